#pragma once

// Positive-sampling comparison grid. For every framework and seed a model is
// pre-trained with same-utterance positives, then the run is resumed once per
// variant (ssl, supervised, ssps for each K x M) up to the same final epoch.

#include "sspslab/config.hpp"
#include "sspslab/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <functional>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace sspslab {

using KeyValues = std::vector<std::pair<std::string, std::string>>;

struct GridSpec {
  std::vector<Framework> frameworks{Framework::simclr, Framework::dino};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<Index> ks{0};  // 0 = number of training recordings
  std::vector<Index> ms{1};
  bool include_ssl = true;
  bool include_supervised = true;
  std::int64_t pretrain_epochs = -1;  // -1: ssps.enable_epoch of the framework config
  std::int64_t resume_epochs = -1;    // -1: epochs_total - pretrain_epochs
  std::string output_dir;             // empty: nothing written
  KeyValues common;                   // overrides for every framework
  std::map<Framework, KeyValues> per_framework;
};

struct ComparisonRow {
  Framework framework = Framework::simclr;
  PosSampling pos_sampling = PosSampling::ssl;
  Index K = 0, M = 0;  // ssps only
  std::uint64_t seed = 0;
  MetricsReport report;
  double fallback_rate = 0.0;  // last epoch
};

inline RunConfig grid_base_config(const GridSpec& g, Framework fw) {
  RunConfig cfg = default_config(fw);
  for (const auto& [k, v] : g.common) set_config_value(cfg, k, v);
  if (auto it = g.per_framework.find(fw); it != g.per_framework.end())
    for (const auto& [k, v] : it->second) set_config_value(cfg, k, v);
  return cfg;
}

inline std::vector<ComparisonRow> run_comparison(const GridSpec& g,
                                                 const std::function<void(const ComparisonRow&)>& on_row = {}) {
  namespace fs = std::filesystem;
  std::vector<ComparisonRow> rows;
  for (Framework fw : g.frameworks) {
    const RunConfig base = grid_base_config(g, fw);
    const std::int64_t pre = g.pretrain_epochs >= 0 ? g.pretrain_epochs : base.ssps.enable_epoch;
    const std::int64_t more = g.resume_epochs >= 0 ? g.resume_epochs : base.epochs_total - pre;
    SSPSLAB_CHECK(pre >= 0 && more >= 0, "invalid pretrain/resume epoch split");
    for (std::uint64_t seed : g.seeds) {
      auto dir_for = [&](const std::string& leaf) {
        if (g.output_dir.empty()) return std::string();
        return (fs::path(g.output_dir) / to_string(fw) / ("seed_" + std::to_string(seed)) / leaf)
            .string();
      };
      RunConfig pc = base;
      pc.seed = seed;
      pc.pos_sampling = PosSampling::ssl;
      pc.epochs_total = pre;
      if (pc.schedule_epochs == 0) pc.schedule_epochs = pre + more;
      pc.eval_every = std::max<std::int64_t>(pre, 1);
      pc.output_dir = dir_for("pretrain");
      Trainer pretrain(pc);
      run_trainer(pretrain, true);

      struct Variant {
        PosSampling ps;
        Index k, m;
        std::string name;
      };
      std::vector<Variant> variants;
      if (g.include_ssl) variants.push_back({PosSampling::ssl, 0, 0, "ssl"});
      if (g.include_supervised) variants.push_back({PosSampling::supervised, 0, 0, "supervised"});
      for (Index k : g.ks)
        for (Index m : g.ms)
          variants.push_back({PosSampling::ssps, k, m,
                              "ssps_K" + std::to_string(k) + "_M" + std::to_string(m)});

      for (const auto& v : variants) {
        KeyValues ov = {{"pos_sampling", std::string("\"") + to_string(v.ps) + "\""},
                        {"epochs_total", std::to_string(pre + more)},
                        {"eval_every", std::to_string(std::max<std::int64_t>(pre + more, 1))},
                        {"output_dir", "\"" + dir_for(v.name) + "\""}};
        if (v.ps == PosSampling::ssps) {
          ov.emplace_back("ssps.K", std::to_string(v.k));
          ov.emplace_back("ssps.M", std::to_string(v.m));
        }
        Trainer t(apply_overrides(pretrain.state(), ov));
        RunArtifacts art = run_trainer(t, false);
        ComparisonRow row;
        row.framework = fw;
        row.pos_sampling = v.ps;
        row.K = v.ps == PosSampling::ssps ? t.config().resolved_k() : 0;
        row.M = v.m;
        row.seed = seed;
        row.report = art.final_report;
        row.fallback_rate = art.epochs.empty() ? 0.0 : art.epochs.back().fallback_rate;
        if (on_row) on_row(row);
        rows.push_back(row);
      }
    }
  }
  return rows;
}

struct ComparisonMean {
  Framework framework;
  PosSampling pos_sampling;
  Index K, M;
  std::size_t runs = 0;
  double eer = 0, min_dcf = 0, intra = 0, inter = 0, fallback_rate = 0;
};

/// Seed-averaged metrics per (framework, sampling, K, M), in first-seen order.
inline std::vector<ComparisonMean> average_over_seeds(const std::vector<ComparisonRow>& rows) {
  std::vector<ComparisonMean> out;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const ComparisonMean& m) {
      return m.framework == r.framework && m.pos_sampling == r.pos_sampling && m.K == r.K &&
             m.M == r.M;
    });
    if (it == out.end()) it = out.insert(out.end(), {r.framework, r.pos_sampling, r.K, r.M});
    ++it->runs;
    it->eer += r.report.eer;
    it->min_dcf += r.report.min_dcf;
    it->intra += r.report.intra_speaker_variance;
    it->inter += r.report.inter_speaker_variance;
    it->fallback_rate += r.fallback_rate;
  }
  for (auto& m : out) {
    const double n = static_cast<double>(m.runs);
    m.eer /= n;
    m.min_dcf /= n;
    m.intra /= n;
    m.inter /= n;
    m.fallback_rate /= n;
  }
  return out;
}

/// Summary CSV: one row per run followed by one "mean" row per variant.
inline void write_summary_csv(const std::vector<ComparisonRow>& rows, const std::string& path) {
  std::ofstream os(path);
  SSPSLAB_CHECK(os, "cannot open " << path << " for writing");
  os << "framework,pos_sampling,K,M,seed,eer,min_dcf,intra_var,inter_var,fallback_rate\n";
  os.precision(10);
  for (const auto& r : rows)
    os << to_string(r.framework) << ',' << to_string(r.pos_sampling) << ',' << r.K << ',' << r.M
       << ',' << r.seed << ',' << r.report.eer << ',' << r.report.min_dcf << ','
       << r.report.intra_speaker_variance << ',' << r.report.inter_speaker_variance << ','
       << r.fallback_rate << '\n';
  for (const auto& m : average_over_seeds(rows))
    os << to_string(m.framework) << ',' << to_string(m.pos_sampling) << ',' << m.K << ',' << m.M
       << ",mean," << m.eer << ',' << m.min_dcf << ',' << m.intra << ',' << m.inter << ','
       << m.fallback_rate << '\n';
}

namespace detail {

inline std::vector<std::string> parse_string_list(const std::string& raw, const std::string& key) {
  SSPSLAB_CHECK(raw.size() >= 2 && raw.front() == '[' && raw.back() == ']',
                key << ": expected a list, got " << raw);
  std::vector<std::string> out;
  std::stringstream ss(raw.substr(1, raw.size() - 2));
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(unquote(item, key));
  }
  return out;
}

inline bool parse_bool(const std::string& raw, const std::string& key) {
  if (raw == "true") return true;
  if (raw == "false") return false;
  throw Error(key + ": expected true or false, got " + raw);
}

}  // namespace detail

/// Grid file: a [grid] section plus optional [common], [simclr] and [dino]
/// sections (and their subsections) holding config overrides, e.g.
///
///   [grid]
///   frameworks = ["simclr"]
///   seeds = [1, 2, 3]
///   K = [64, 256]
///   M = [0, 1, 2]
///   [simclr.optimizer]
///   lr = 0.002
inline GridSpec parse_grid(std::istream& is) {
  GridSpec g;
  for (const auto& [key, raw] : parse_key_values(is)) {
    const auto dot = key.find('.');
    SSPSLAB_CHECK(dot != std::string::npos, "grid key '" << key << "' outside a section");
    const std::string sec = key.substr(0, dot), rest = key.substr(dot + 1);
    if (sec == "grid") {
      if (rest == "frameworks") {
        g.frameworks.clear();
        for (const auto& s : detail::parse_string_list(raw, key)) g.frameworks.push_back(parse_framework(s));
      } else if (rest == "seeds") {
        g.seeds.clear();
        for (Index s : detail::parse_int_list(raw, key)) g.seeds.push_back(static_cast<std::uint64_t>(s));
      } else if (rest == "K") {
        g.ks = detail::parse_int_list(raw, key);
      } else if (rest == "M") {
        g.ms = detail::parse_int_list(raw, key);
      } else if (rest == "include_ssl") {
        g.include_ssl = detail::parse_bool(raw, key);
      } else if (rest == "include_supervised") {
        g.include_supervised = detail::parse_bool(raw, key);
      } else if (rest == "pretrain_epochs") {
        g.pretrain_epochs = detail::parse_int(raw, key);
      } else if (rest == "resume_epochs") {
        g.resume_epochs = detail::parse_int(raw, key);
      } else if (rest == "output_dir") {
        g.output_dir = detail::unquote(raw, key);
      } else {
        throw Error("unknown grid key '" + key + "'");
      }
    } else if (sec == "common") {
      g.common.emplace_back(rest, raw);
    } else if (sec == "simclr" || sec == "dino") {
      g.per_framework[parse_framework(sec)].emplace_back(rest, raw);
    } else {
      throw Error("unknown grid section '" + sec + "'");
    }
  }
  // Surface unknown override keys before any training starts.
  for (Framework fw : g.frameworks) grid_base_config(g, fw).validate();
  return g;
}

inline GridSpec load_grid(const std::string& path) {
  std::ifstream is(path);
  SSPSLAB_CHECK(is, "cannot open grid file " << path);
  return parse_grid(is);
}

}  // namespace sspslab
