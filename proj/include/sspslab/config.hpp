#pragma once

// Run configuration and its flat TOML-style text form:
//
//   seed = 1
//   framework = "simclr"
//   [corpus]
//   n_speakers = 64
//   [model]
//   encoder_hidden = [64, 64]
//
// Every field is reachable as "section.key" (top-level keys have no section).
// Unknown keys are an error.

#include "sspslab/common.hpp"
#include "sspslab/nncore.hpp"
#include "sspslab/ssps.hpp"
#include "sspslab/synthgen.hpp"

#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace sspslab {

enum class Framework { simclr, dino };
enum class PosSampling { ssl, ssps, supervised };

inline const char* to_string(Framework f) { return f == Framework::simclr ? "simclr" : "dino"; }
inline const char* to_string(PosSampling p) {
  switch (p) {
    case PosSampling::ssl: return "ssl";
    case PosSampling::ssps: return "ssps";
    case PosSampling::supervised: return "supervised";
  }
  return "?";
}
inline Framework parse_framework(const std::string& s) {
  if (s == "simclr") return Framework::simclr;
  if (s == "dino") return Framework::dino;
  throw Error("unknown framework '" + s + "' (expected simclr or dino)");
}
inline PosSampling parse_pos_sampling(const std::string& s) {
  if (s == "ssl") return PosSampling::ssl;
  if (s == "ssps") return PosSampling::ssps;
  if (s == "supervised") return PosSampling::supervised;
  throw Error("unknown pos_sampling '" + s + "' (expected ssl, ssps or supervised)");
}

struct RunConfig {
  Framework framework = Framework::simclr;
  PosSampling pos_sampling = PosSampling::ssl;
  std::uint64_t seed = 1;
  std::int64_t epochs_total = 50;
  std::int64_t epochs_warmup = 0;    // learning-rate warm-up epochs
  std::int64_t schedule_epochs = 0;  // schedule horizon; 0 means epochs_total
  Index batch_size = 64;
  std::int64_t eval_every = 10;
  std::int64_t checkpoint_every = 0;
  std::string output_dir = "runs/default";

  CorpusConfig corpus;
  Index eval_speakers = 16;
  std::size_t n_target_trials = 3000;
  std::size_t n_nontarget_trials = 3000;

  std::vector<Index> encoder_hidden{64, 64};
  Index repr_dim = 32;
  std::vector<Index> projector_hidden{64};
  Index bottleneck_dim = 32;
  Index emb_dim = 128;

  OptimizerKind optimizer = OptimizerKind::adam;
  double lr = 1e-3;
  double lr_end = 0.0;
  double momentum = 0.9;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  double weight_decay = 0.0;
  ScheduleKind lr_schedule = ScheduleKind::step_decay;
  double decay_factor = 0.95;
  std::int64_t decay_every = 5;
  double clip_grad_norm = 0.0;  // 0 disables

  double temperature = 0.03;
  double student_temperature = 0.1;
  double teacher_temperature = 0.04;
  double center_momentum = 0.9;
  double ema_start = 0.996;
  double ema_end = 1.0;

  SspsConfig ssps;

  std::int64_t horizon() const { return schedule_epochs > 0 ? schedule_epochs : epochs_total; }
  Index resolved_k() const { return ssps.K > 0 ? ssps.K : corpus.n_recordings(); }

  void validate() const {
    corpus.validate();
    SSPSLAB_CHECK(epochs_total >= 0 && schedule_epochs >= 0, "epoch counts must be >= 0");
    SSPSLAB_CHECK(epochs_warmup >= 0 && epochs_warmup <= std::max(epochs_total, schedule_epochs),
                  "need 0 <= epochs_warmup <= max(epochs_total, schedule_epochs)");
    SSPSLAB_CHECK(batch_size >= 1 && batch_size <= corpus.n_utterances(),
                  "batch_size must be in [1, N]");
    SSPSLAB_CHECK(eval_every >= 1, "eval_every must be >= 1");
    SSPSLAB_CHECK(eval_speakers >= 2, "need at least two evaluation speakers");
    SSPSLAB_CHECK(repr_dim >= 1 && emb_dim >= 1 && bottleneck_dim >= 1, "dims must be >= 1");
    SSPSLAB_CHECK(temperature > 0.0, "temperature must be positive");
    SSPSLAB_CHECK(teacher_temperature > 0.0 && teacher_temperature < student_temperature,
                  "need 0 < teacher_temperature < student_temperature");
    SSPSLAB_CHECK(ema_start >= 0.0 && ema_start <= 1.0 && ema_end >= 0.0 && ema_end <= 1.0,
                  "EMA momenta must be in [0, 1]");
    SSPSLAB_CHECK(resolved_k() >= 1 && resolved_k() <= corpus.n_utterances(),
                  "ssps.K must be in [1, N]");
    SSPSLAB_CHECK(ssps.M >= 0 && (ssps.M == 0 || ssps.M < resolved_k()), "ssps.M must be < K");
    SSPSLAB_CHECK(ssps.kmeans_iterations >= 0, "kmeans_iterations must be >= 0");
    SSPSLAB_CHECK(corpus.recordings_per_speaker >= 2 || pos_sampling != PosSampling::supervised,
                  "supervised sampling needs at least two recordings per speaker");
  }
};

/// Desk-scale defaults for each framework.
inline RunConfig default_config(Framework f) {
  RunConfig c;
  c.framework = f;
  if (f == Framework::simclr) {
    c.batch_size = 64;
    c.optimizer = OptimizerKind::adam;
    c.lr = 1e-3;
    c.lr_schedule = ScheduleKind::step_decay;
    c.epochs_total = 50;
    c.ssps.enable_epoch = 40;
  } else {
    c.batch_size = 32;
    c.optimizer = OptimizerKind::sgd_momentum;
    c.lr = 0.05;
    c.lr_end = 0.0;
    c.momentum = 0.9;
    c.weight_decay = 5e-5;
    c.lr_schedule = ScheduleKind::cosine_with_warmup;
    c.epochs_warmup = 5;
    c.epochs_total = 50;
    c.clip_grad_norm = 3.0;
    c.ssps.enable_epoch = 40;
  }
  return c;
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  std::string s = buf;
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

inline std::string unquote(const std::string& raw, const std::string& key) {
  SSPSLAB_CHECK(raw.size() >= 2 && raw.front() == '"' && raw.back() == '"',
                key << ": expected a quoted string, got " << raw);
  return raw.substr(1, raw.size() - 2);
}

inline std::int64_t parse_int(const std::string& raw, const std::string& key) {
  std::size_t pos = 0;
  std::int64_t v = 0;
  try {
    v = std::stoll(raw, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  SSPSLAB_CHECK(pos == raw.size() && !raw.empty(), key << ": expected an integer, got " << raw);
  return v;
}

inline double parse_double(const std::string& raw, const std::string& key) {
  std::size_t pos = 0;
  double v = 0;
  try {
    v = std::stod(raw, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  SSPSLAB_CHECK(pos == raw.size() && !raw.empty(), key << ": expected a number, got " << raw);
  return v;
}

inline std::vector<Index> parse_int_list(const std::string& raw, const std::string& key) {
  SSPSLAB_CHECK(raw.size() >= 2 && raw.front() == '[' && raw.back() == ']',
                key << ": expected a list like [64, 64], got " << raw);
  std::vector<Index> out;
  std::string body = raw.substr(1, raw.size() - 2);
  std::stringstream ss(body);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(parse_int(item, key));
  }
  return out;
}

inline std::string fmt_int_list(const std::vector<Index>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + std::to_string(v[i]);
  return s + "]";
}

struct Field {
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

}  // namespace detail

/// Registry of "section.key" -> accessors, in serialization order.
inline const std::vector<std::pair<std::string, detail::Field>>& config_fields() {
  using namespace detail;
  using C = RunConfig;
  auto dbl = [](auto getter) {
    return Field{[getter](C& c, const std::string& raw) { getter(c) = parse_double(raw, ""); },
                 [getter](const C& c) { return fmt_double(getter(const_cast<C&>(c))); }};
  };
  auto integer = [](auto getter) {
    return Field{[getter](C& c, const std::string& raw) {
                   using T = std::remove_reference_t<decltype(getter(c))>;
                   const auto v = parse_int(raw, "");
                   if constexpr (std::is_unsigned_v<T>) SSPSLAB_CHECK(v >= 0, "expected a non-negative integer");
                   getter(c) = static_cast<T>(v);
                 },
                 [getter](const C& c) { return std::to_string(getter(const_cast<C&>(c))); }};
  };
  static const std::vector<std::pair<std::string, Field>> fields = {
      {"framework", {[](C& c, const std::string& r) { c.framework = parse_framework(unquote(r, "framework")); },
                     [](const C& c) { return std::string("\"") + to_string(c.framework) + "\""; }}},
      {"pos_sampling", {[](C& c, const std::string& r) { c.pos_sampling = parse_pos_sampling(unquote(r, "pos_sampling")); },
                        [](const C& c) { return std::string("\"") + to_string(c.pos_sampling) + "\""; }}},
      {"seed", integer([](C& c) -> auto& { return c.seed; })},
      {"epochs_total", integer([](C& c) -> auto& { return c.epochs_total; })},
      {"epochs_warmup", integer([](C& c) -> auto& { return c.epochs_warmup; })},
      {"schedule_epochs", integer([](C& c) -> auto& { return c.schedule_epochs; })},
      {"batch_size", integer([](C& c) -> auto& { return c.batch_size; })},
      {"eval_every", integer([](C& c) -> auto& { return c.eval_every; })},
      {"checkpoint_every", integer([](C& c) -> auto& { return c.checkpoint_every; })},
      {"output_dir", {[](C& c, const std::string& r) { c.output_dir = unquote(r, "output_dir"); },
                      [](const C& c) { return "\"" + c.output_dir + "\""; }}},

      {"corpus.n_speakers", integer([](C& c) -> auto& { return c.corpus.n_speakers; })},
      {"corpus.recordings_per_speaker", integer([](C& c) -> auto& { return c.corpus.recordings_per_speaker; })},
      {"corpus.utterances_per_recording", integer([](C& c) -> auto& { return c.corpus.utterances_per_recording; })},
      {"corpus.latent_dim", integer([](C& c) -> auto& { return c.corpus.latent_dim; })},
      {"corpus.input_dim", integer([](C& c) -> auto& { return c.corpus.input_dim; })},
      {"corpus.speaker_scale", dbl([](C& c) -> auto& { return c.corpus.speaker_scale; })},
      {"corpus.channel_scale", dbl([](C& c) -> auto& { return c.corpus.channel_scale; })},
      {"corpus.segment_noise_sigma", dbl([](C& c) -> auto& { return c.corpus.segment_noise_sigma; })},
      {"corpus.augment_noise_sigma", dbl([](C& c) -> auto& { return c.corpus.augment_noise_sigma; })},
      {"corpus.seed", integer([](C& c) -> auto& { return c.corpus.seed; })},
      {"corpus.eval_speakers", integer([](C& c) -> auto& { return c.eval_speakers; })},
      {"corpus.n_target_trials", integer([](C& c) -> auto& { return c.n_target_trials; })},
      {"corpus.n_nontarget_trials", integer([](C& c) -> auto& { return c.n_nontarget_trials; })},

      {"model.encoder_hidden", {[](C& c, const std::string& r) { c.encoder_hidden = parse_int_list(r, "model.encoder_hidden"); },
                                [](const C& c) { return fmt_int_list(c.encoder_hidden); }}},
      {"model.repr_dim", integer([](C& c) -> auto& { return c.repr_dim; })},
      {"model.projector_hidden", {[](C& c, const std::string& r) { c.projector_hidden = parse_int_list(r, "model.projector_hidden"); },
                                  [](const C& c) { return fmt_int_list(c.projector_hidden); }}},
      {"model.bottleneck_dim", integer([](C& c) -> auto& { return c.bottleneck_dim; })},
      {"model.emb_dim", integer([](C& c) -> auto& { return c.emb_dim; })},

      {"optimizer.kind", {[](C& c, const std::string& r) {
                            const auto s = unquote(r, "optimizer.kind");
                            if (s == "adam") c.optimizer = OptimizerKind::adam;
                            else if (s == "sgd") c.optimizer = OptimizerKind::sgd_momentum;
                            else throw Error("optimizer.kind: expected adam or sgd, got " + s);
                          },
                          [](const C& c) { return std::string(c.optimizer == OptimizerKind::adam ? "\"adam\"" : "\"sgd\""); }}},
      {"optimizer.lr", dbl([](C& c) -> auto& { return c.lr; })},
      {"optimizer.lr_end", dbl([](C& c) -> auto& { return c.lr_end; })},
      {"optimizer.momentum", dbl([](C& c) -> auto& { return c.momentum; })},
      {"optimizer.beta1", dbl([](C& c) -> auto& { return c.beta1; })},
      {"optimizer.beta2", dbl([](C& c) -> auto& { return c.beta2; })},
      {"optimizer.eps", dbl([](C& c) -> auto& { return c.adam_eps; })},
      {"optimizer.weight_decay", dbl([](C& c) -> auto& { return c.weight_decay; })},
      {"optimizer.schedule", {[](C& c, const std::string& r) {
                                const auto s = unquote(r, "optimizer.schedule");
                                if (s == "constant") c.lr_schedule = ScheduleKind::constant;
                                else if (s == "step_decay") c.lr_schedule = ScheduleKind::step_decay;
                                else if (s == "cosine_with_warmup") c.lr_schedule = ScheduleKind::cosine_with_warmup;
                                else throw Error("optimizer.schedule: unknown schedule " + s);
                              },
                              [](const C& c) {
                                switch (c.lr_schedule) {
                                  case ScheduleKind::step_decay: return std::string("\"step_decay\"");
                                  case ScheduleKind::cosine_with_warmup: return std::string("\"cosine_with_warmup\"");
                                  default: return std::string("\"constant\"");
                                }
                              }}},
      {"optimizer.decay_factor", dbl([](C& c) -> auto& { return c.decay_factor; })},
      {"optimizer.decay_every", integer([](C& c) -> auto& { return c.decay_every; })},
      {"optimizer.clip_grad_norm", dbl([](C& c) -> auto& { return c.clip_grad_norm; })},

      {"loss.temperature", dbl([](C& c) -> auto& { return c.temperature; })},
      {"loss.student_temperature", dbl([](C& c) -> auto& { return c.student_temperature; })},
      {"loss.teacher_temperature", dbl([](C& c) -> auto& { return c.teacher_temperature; })},
      {"loss.center_momentum", dbl([](C& c) -> auto& { return c.center_momentum; })},
      {"loss.ema_start", dbl([](C& c) -> auto& { return c.ema_start; })},
      {"loss.ema_end", dbl([](C& c) -> auto& { return c.ema_end; })},

      {"ssps.K", integer([](C& c) -> auto& { return c.ssps.K; })},
      {"ssps.M", integer([](C& c) -> auto& { return c.ssps.M; })},
      {"ssps.kmeans_iterations", integer([](C& c) -> auto& { return c.ssps.kmeans_iterations; })},
      {"ssps.enable_epoch", integer([](C& c) -> auto& { return c.ssps.enable_epoch; })},
      {"ssps.seed", integer([](C& c) -> auto& { return c.ssps.seed; })},
  };
  return fields;
}

/// Parses "section.key" -> raw value pairs; comments start with '#'.
inline std::vector<std::pair<std::string, std::string>> parse_key_values(std::istream& is) {
  std::vector<std::pair<std::string, std::string>> out;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) {
        line.resize(i);
        break;
      }
    }
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[' && line.back() == ']' && line.find('=') == std::string::npos) {
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    SSPSLAB_CHECK(eq != std::string::npos, "config line " << lineno << ": expected key = value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    SSPSLAB_CHECK(!key.empty() && !val.empty(), "config line " << lineno << ": empty key or value");
    out.emplace_back(section.empty() ? key : section + "." + key, val);
  }
  return out;
}

/// Sets one field from its raw text value; unknown keys throw.
inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& raw) {
  for (const auto& [name, field] : config_fields()) {
    if (name != key) continue;
    try {
      field.set(cfg, raw);
    } catch (const Error& e) {
      throw Error(key + ": " + e.what());
    }
    return;
  }
  throw Error("unknown config key '" + key + "'");
}

/// Framework defaults first, then every key from the text in order.
inline RunConfig parse_config(std::istream& is) {
  const auto kv = parse_key_values(is);
  Framework fw = Framework::simclr;
  for (const auto& [k, v] : kv)
    if (k == "framework") fw = parse_framework(detail::unquote(v, k));
  RunConfig cfg = default_config(fw);
  for (const auto& [k, v] : kv) set_config_value(cfg, k, v);
  cfg.validate();
  return cfg;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  SSPSLAB_CHECK(is, "cannot open config " << path);
  return parse_config(is);
}

inline std::string serialize_config(const RunConfig& cfg) {
  std::string out, section;
  for (const auto& [name, field] : config_fields()) {
    const auto dot = name.find('.');
    const std::string sec = dot == std::string::npos ? "" : name.substr(0, dot);
    const std::string key = dot == std::string::npos ? name : name.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += key + " = " + field.get(cfg) + "\n";
  }
  return out;
}

}  // namespace sspslab
