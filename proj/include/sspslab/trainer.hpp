#pragma once

// Training loop for SimCLR / DINO with ssl, ssps or supervised positive
// sampling, plus evaluation, checkpoint resume and the comparison grid.

#include "sspslab/checkpoint.hpp"
#include "sspslab/common.hpp"
#include "sspslab/config.hpp"
#include "sspslab/eval.hpp"
#include "sspslab/losses.hpp"
#include "sspslab/nncore.hpp"
#include "sspslab/ssps.hpp"
#include "sspslab/synthgen.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

namespace sspslab {

struct EpochRecord {
  std::int64_t epoch = 0;  // 1-based count of completed epochs
  double mean_loss = 0.0;
  double lr = 0.0;
  double fallback_rate = 0.0;
  std::size_t pseudo_positives = 0;
  std::optional<ClusterDiagnostics> clusters;
  std::optional<MetricsReport> metrics;
};

struct RunArtifacts {
  std::vector<std::string> checkpoints;
  std::string metrics_log;
  std::string diagnostics_log;
  MetricsReport final_report;
  std::vector<EpochRecord> epochs;
};

/// Metrics JSON-lines record.
inline nlohmann::ordered_json metrics_record(std::int64_t epoch, const MetricsReport& m,
                                             double fallback_rate) {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["eer"] = m.eer;
  j["min_dcf"] = m.min_dcf;
  j["intra_var"] = m.intra_speaker_variance;
  j["inter_var"] = m.inter_speaker_variance;
  j["fallback_rate"] = fallback_rate;
  return j;
}

class Trainer {
 public:
  explicit Trainer(const RunConfig& cfg) : Trainer(initial_state(cfg)) {}

  explicit Trainer(TrainingState state) : st_(std::move(state)) {
    const auto& cfg = st_.config;
    cfg.validate();
    corpus_ = build_corpus(cfg.corpus);
    eval_corpus_ = build_eval_corpus(corpus_, cfg.eval_speakers);
    Rng trial_rng(derive_seed(cfg.corpus.seed, 2));
    trials_ = build_trials(eval_corpus_, cfg.n_target_trials, cfg.n_nontarget_trials, trial_rng);
  }

  const TrainingState& state() const { return st_; }
  TrainingState& state_mut() { return st_; }
  const RunConfig& config() const { return st_.config; }
  const Corpus& corpus() const { return corpus_; }
  const Corpus& eval_corpus() const { return eval_corpus_; }
  const TrialList& trials() const { return trials_; }
  const std::optional<ClusterState>& cluster_state() const { return clusters_; }

  Index steps_per_epoch() const {
    return std::max<Index>(1, corpus_.size() / st_.config.batch_size);
  }

  /// Learning rate for the current step.
  double current_lr() const {
    const auto& c = st_.config;
    const auto spe = static_cast<std::uint64_t>(steps_per_epoch());
    Schedule s;
    s.kind = c.lr_schedule;
    s.base = c.lr;
    s.end = c.lr_end;
    s.decay_factor = c.decay_factor;
    s.decay_every = static_cast<std::uint64_t>(std::max<std::int64_t>(c.decay_every, 1));
    if (c.lr_schedule == ScheduleKind::step_decay) {
      s.total_steps = static_cast<std::uint64_t>(std::max<std::int64_t>(c.horizon(), 1));
      return schedule_value(s, static_cast<std::uint64_t>(st_.epoch));
    }
    s.warmup_steps = static_cast<std::uint64_t>(c.epochs_warmup) * spe;
    s.total_steps = std::max<std::uint64_t>(static_cast<std::uint64_t>(c.horizon()) * spe, 1);
    return schedule_value(s, st_.step);
  }

  double current_ema_momentum() const {
    const auto& c = st_.config;
    Schedule s;
    s.kind = ScheduleKind::cosine_momentum;
    s.base = c.ema_start;
    s.end = c.ema_end;
    s.total_steps = std::max<std::uint64_t>(
        static_cast<std::uint64_t>(c.horizon()) * static_cast<std::uint64_t>(steps_per_epoch()), 1);
    return schedule_value(s, st_.step);
  }

  bool ssps_active() const { return clusters_.has_value(); }

  /// Shuffles the epoch order and, in ssps mode past enable_epoch, reclusters.
  void begin_epoch() {
    const auto& c = st_.config;
    order_.resize(static_cast<std::size_t>(corpus_.size()));
    std::iota(order_.begin(), order_.end(), UttId{0});
    std::shuffle(order_.begin(), order_.end(), st_.data_rng.engine());
    cursor_ = 0;
    epoch_loss_ = 0.0;
    epoch_steps_ = 0;
    attempts_ = fallbacks_ = 0;
    accepted_.clear();
    clusters_.reset();
    if (c.pos_sampling != PosSampling::ssps || st_.epoch < c.ssps.enable_epoch) return;
    SspsConfig sc = c.ssps;
    sc.K = c.resolved_k();
    sc.seed = derive_seed(c.ssps.seed, static_cast<std::uint64_t>(st_.epoch));
    // Q-hat fills during the first epoch; until it holds K entries the sampler stays inert.
    if (st_.reference_queue.size() < static_cast<std::size_t>(sc.K)) return;
    clusters_ = ssps_epoch_begin(st_.reference_queue, sc, st_.epoch);
  }

  bool has_next_step() const {
    return cursor_ + static_cast<std::size_t>(st_.config.batch_size) <= order_.size();
  }

  /// One optimizer step on the next batch; returns the loss.
  double step() {
    SSPSLAB_CHECK(has_next_step(), "epoch exhausted");
    const auto b = static_cast<std::size_t>(st_.config.batch_size);
    std::vector<UttId> ids(order_.begin() + static_cast<std::ptrdiff_t>(cursor_),
                           order_.begin() + static_cast<std::ptrdiff_t>(cursor_ + b));
    cursor_ += b;
    const double loss =
        st_.config.framework == Framework::simclr ? simclr_step(ids) : dino_step(ids);
    ++st_.step;
    epoch_loss_ += loss;
    ++epoch_steps_;
    return loss;
  }

  /// Closes the epoch; evaluates when due.
  EpochRecord end_epoch() {
    ++st_.epoch;
    EpochRecord rec;
    rec.epoch = st_.epoch;
    rec.mean_loss = epoch_steps_ ? epoch_loss_ / static_cast<double>(epoch_steps_) : 0.0;
    rec.lr = current_lr();
    rec.fallback_rate =
        attempts_ ? static_cast<double>(fallbacks_) / static_cast<double>(attempts_) : 0.0;
    rec.pseudo_positives = attempts_ - fallbacks_;
    if (clusters_) {
      const auto& labels = corpus_.evaluation_labels();
      auto d = describe_clusters(*clusters_, [&labels](UttId u) {
        return labels[static_cast<std::size_t>(u)].speaker_id;
      });
      d.attempts = attempts_;
      d.fallbacks = fallbacks_;
      std::size_t same_spk = 0, same_rec = 0;
      for (const auto& [a, b] : accepted_) {
        const auto& ua = labels[static_cast<std::size_t>(a)];
        const auto& ub = labels[static_cast<std::size_t>(b)];
        same_spk += ua.speaker_id == ub.speaker_id;
        same_rec += ua.recording_id == ub.recording_id;
      }
      if (!accepted_.empty()) {
        d.same_speaker_rate = static_cast<double>(same_spk) / static_cast<double>(accepted_.size());
        d.same_recording_rate = static_cast<double>(same_rec) / static_cast<double>(accepted_.size());
      }
      rec.clusters = d;
    }
    if (st_.epoch % st_.config.eval_every == 0 || st_.epoch == st_.config.epochs_total)
      rec.metrics = evaluate();
    return rec;
  }

  EpochRecord run_epoch() {
    begin_epoch();
    while (has_next_step()) step();
    return end_epoch();
  }

  MetricsReport evaluate() const {
    return sspslab::evaluate(st_.models.teacher().encoder, eval_corpus_, trials_);
  }

  /// Encoder used for verification (teacher for DINO).
  const Mlp& eval_encoder() const { return st_.models.teacher().encoder; }

  void save(const std::string& path) const { save_checkpoint(st_, path); }

 private:
  // Supervised positives: uniform over same-speaker utterances of other recordings.
  std::vector<UttId> supervised_sources(const std::vector<UttId>& ids) {
    const auto& labels = corpus_.supervision_labels();
    const auto& c = corpus_.config();
    const Index per_rec = c.utterances_per_recording;
    const Index per_spk = per_rec * c.recordings_per_speaker;
    std::vector<UttId> out;
    out.reserve(ids.size());
    for (UttId id : ids) {
      const auto& u = labels[static_cast<std::size_t>(id)];
      // Utterances are laid out speaker-major, recording-major.
      const UttId spk_base = static_cast<UttId>(u.speaker_id * per_spk);
      const Index own_rec = u.recording_id - u.speaker_id * c.recordings_per_speaker;
      const auto pick = static_cast<Index>(st_.supervised_rng.index(
          static_cast<std::size_t>(per_spk - per_rec)));
      Index rec = pick / per_rec;
      if (rec >= own_rec) ++rec;
      const UttId src = spk_base + rec * per_rec + pick % per_rec;
      SSPSLAB_CHECK(labels[static_cast<std::size_t>(src)].speaker_id == u.speaker_id &&
                        labels[static_cast<std::size_t>(src)].recording_id != u.recording_id,
                    "supervised source bookkeeping error");
      out.push_back(src);
    }
    return out;
  }

  std::map<UttId, RowVector> pseudo_positives(const std::vector<UttId>& ids) {
    std::map<UttId, RowVector> rep;
    if (!clusters_) return rep;
    for (UttId id : ids) {
      ++attempts_;
      auto pp = sample_pseudo_positive(id, *clusters_, st_.positive_queue, clusters_->M,
                                       st_.ssps_rng);
      if (pp.fallback) {
        ++fallbacks_;
      } else {
        accepted_.emplace_back(id, pp.source);
        rep.emplace(id, std::move(pp.embedding));
      }
    }
    return rep;
  }

  std::vector<Matrix> clip(std::vector<Matrix> grads) const {
    const double max_norm = st_.config.clip_grad_norm;
    if (max_norm <= 0.0) return grads;
    double sq = 0.0;
    for (const auto& g : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > max_norm)
      for (auto& g : grads) g *= max_norm / norm;
    return grads;
  }

  void check_loss(double loss) {
    if (std::isfinite(loss)) return;
    namespace fs = std::filesystem;
    std::string where = "(not saved: no output_dir)";
    if (!st_.config.output_dir.empty()) {
      fs::create_directories(st_.config.output_dir);
      where = (fs::path(st_.config.output_dir) / "diagnostic.ckpt").string();
      save_checkpoint(st_, where);
    }
    throw Error("non-finite loss at epoch " + std::to_string(st_.epoch) + ", step " +
                std::to_string(st_.step) + "; diagnostic checkpoint " + where);
  }

  double simclr_step(const std::vector<UttId>& ids) {
    const bool supervised = st_.config.pos_sampling == PosSampling::supervised;
    const auto sources = supervised ? supervised_sources(ids) : std::vector<UttId>{};
    const ViewBatch vb = sample_views(corpus_, ids, ViewKind::pair, st_.data_rng, sources);

    const Branch& model = st_.models.student();
    BranchCache ca, cp;
    const BranchOutput za = forward(model, vb.anchors, &ca);
    const BranchOutput zp = forward(model, vb.positives, &cp);
    const Matrix ref = forward(st_.models.teacher().encoder, vb.references);

    PositiveInputs pos{ids, {zp.embedding}, {}};
    pos = apply_pseudo_positive(std::move(pos), pseudo_positives(ids));

    LossResult lr = simclr_loss(za.embedding, pos.views[0], SimclrParams{st_.config.temperature});
    check_loss(lr.loss);
    mask_replaced(lr.grads[1], pos.replaced);
    std::vector<Matrix> grads = backward(model, ca, lr.grads[0]);
    accumulate(grads, backward(model, cp, lr.grads[1]));
    optimizer_step(st_.optimizer, st_.models.student().parameters(), clip(std::move(grads)),
                   current_lr());

    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto r = static_cast<Index>(i);
      st_.reference_queue.enqueue(ids[i], ref.row(r));
      st_.positive_queue.enqueue(sources.empty() ? ids[i] : sources[i], zp.embedding.row(r));
    }
    return lr.loss;
  }

  double dino_step(const std::vector<UttId>& ids) {
    const bool supervised = st_.config.pos_sampling == PosSampling::supervised;
    const auto sources = supervised ? supervised_sources(ids) : std::vector<UttId>{};
    const ViewBatch vb = sample_views(corpus_, ids, ViewKind::multicrop, st_.data_rng, sources);

    const Branch& student = st_.models.student();
    const Branch& teacher = st_.models.teacher();
    std::vector<BranchCache> caches(kGlobalViews + kLocalViews);
    std::vector<Matrix> student_emb;
    for (int v = 0; v < kGlobalViews; ++v)
      student_emb.push_back(forward(student, vb.global_views[v], &caches[v]).embedding);
    for (int v = 0; v < kLocalViews; ++v)
      student_emb.push_back(
          forward(student, vb.local_views[v], &caches[kGlobalViews + v]).embedding);
    std::vector<Matrix> teacher_emb;
    for (int v = 0; v < kGlobalViews; ++v)
      teacher_emb.push_back(forward(teacher, vb.teacher_views[v]).embedding);
    const Matrix ref = forward(teacher.encoder, vb.references);

    PositiveInputs pos{ids, teacher_emb, {}};
    pos = apply_pseudo_positive(std::move(pos), pseudo_positives(ids));

    DinoParams dp;
    dp.student_temperature = st_.config.student_temperature;
    dp.teacher_temperature = st_.config.teacher_temperature;
    dp.center_momentum = st_.config.center_momentum;
    dp.center = st_.center;
    LossResult lr = dino_loss(student_emb, pos.views, dp);
    check_loss(lr.loss);
    std::vector<Matrix> grads;
    for (std::size_t v = 0; v < student_emb.size(); ++v)
      accumulate(grads, backward(student, caches[v], lr.grads[v]));
    optimizer_step(st_.optimizer, st_.models.student().parameters(), clip(std::move(grads)),
                   current_lr());
    ema_update(st_.models.teacher_mut(), st_.models.student(), current_ema_momentum());
    st_.center = update_center(dp, teacher_emb);

    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto r = static_cast<Index>(i);
      st_.reference_queue.enqueue(ids[i], ref.row(r));
      st_.positive_queue.enqueue(sources.empty() ? ids[i] : sources[i], teacher_emb[0].row(r));
    }
    return lr.loss;
  }

  TrainingState st_;
  Corpus corpus_, eval_corpus_;
  TrialList trials_;
  std::vector<UttId> order_;
  std::size_t cursor_ = 0;
  double epoch_loss_ = 0.0;
  std::size_t epoch_steps_ = 0;
  std::size_t attempts_ = 0, fallbacks_ = 0;
  std::vector<std::pair<UttId, UttId>> accepted_;  // (anchor, pos) for diagnostics
  std::optional<ClusterState> clusters_;
};

/// Applies "section.key" overrides to a checkpointed state. A change of
/// pos_sampling to ssps enables SSPS from the resumed epoch on. The positive
/// queue is rebuilt (oldest entries dropped first) when K changes.
inline TrainingState apply_overrides(TrainingState st,
                                     const std::vector<std::pair<std::string, std::string>>& kv) {
  RunConfig cfg = st.config;
  for (const auto& [k, v] : kv) set_config_value(cfg, k, v);
  cfg.validate();
  SSPSLAB_CHECK(cfg.framework == st.config.framework, "cannot change framework on resume");
  SSPSLAB_CHECK(cfg.corpus == st.config.corpus, "corpus config differs from checkpoint");
  {
    Rng probe(0);
    const Branch fresh = build_branch(cfg, probe);
    const auto want = fresh.parameters();
    const auto have = st.models.student().parameters();
    SSPSLAB_CHECK(want.size() == have.size(), "model layout differs from checkpoint");
    for (std::size_t i = 0; i < want.size(); ++i)
      SSPSLAB_CHECK(want[i]->rows() == have[i]->rows() && want[i]->cols() == have[i]->cols(),
                    "shape mismatch between checkpoint and config at tensor " << i);
  }
  SSPSLAB_CHECK(cfg.optimizer == st.config.optimizer, "cannot change optimizer kind on resume");
  if (cfg.pos_sampling != st.config.pos_sampling && cfg.pos_sampling == PosSampling::ssps)
    cfg.ssps.enable_epoch = std::min<std::int64_t>(cfg.ssps.enable_epoch, st.epoch);
  if (static_cast<std::size_t>(cfg.resolved_k()) != st.positive_queue.capacity()) {
    PositiveQueue q(static_cast<std::size_t>(cfg.resolved_k()), st.positive_queue.dim());
    for (UttId id : st.positive_queue.ids()) q.enqueue(id, *st.positive_queue.find(id));
    st.positive_queue = std::move(q);
  }
  st.optimizer.momentum = cfg.momentum;
  st.optimizer.beta1 = cfg.beta1;
  st.optimizer.beta2 = cfg.beta2;
  st.optimizer.eps = cfg.adam_eps;
  st.optimizer.weight_decay = cfg.weight_decay;
  st.config = cfg;
  return st;
}

namespace detail {

inline std::string checkpoint_name(std::int64_t epoch) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "checkpoint_epoch_%04lld.ckpt", static_cast<long long>(epoch));
  return buf;
}

inline nlohmann::ordered_json diagnostics_record(const EpochRecord& rec) {
  nlohmann::ordered_json j;
  j["epoch"] = rec.epoch;
  j["loss"] = rec.mean_loss;
  j["lr"] = rec.lr;
  if (rec.clusters) {
    const auto& d = *rec.clusters;
    j["K"] = d.K;
    j["M"] = d.M;
    j["fallback_rate"] = d.fallback_rate();
    nlohmann::ordered_json hist = nlohmann::ordered_json::object();
    for (const auto& [size, count] : d.size_histogram) hist[std::to_string(size)] = count;
    j["cluster_sizes"] = hist;
    j["speaker_purity"] = d.speaker_purity;
    j["pseudo_same_speaker"] = d.same_speaker_rate;
    j["pseudo_same_recording"] = d.same_recording_rate;
  }
  return j;
}

}  // namespace detail

inline std::int64_t last_saved_epoch(const RunArtifacts& art) {
  if (art.checkpoints.empty()) return -1;
  const std::string name = std::filesystem::path(art.checkpoints.back()).stem().string();
  return std::stoll(name.substr(name.rfind('_') + 1));
}

/// Runs a trainer until `config.epochs_total`, writing logs and checkpoints
/// under `config.output_dir` (nothing is written when it is empty).
inline RunArtifacts run_trainer(Trainer& trainer, bool fresh) {
  namespace fs = std::filesystem;
  const RunConfig& cfg = trainer.config();
  const bool write = !cfg.output_dir.empty();
  RunArtifacts art;
  std::ofstream metrics, diagnostics;
  if (write) {
    fs::create_directories(cfg.output_dir);
    const fs::path dir(cfg.output_dir);
    art.metrics_log = (dir / "metrics.jsonl").string();
    art.diagnostics_log = (dir / "diagnostics.jsonl").string();
    const auto mode = fresh ? std::ios::trunc : std::ios::app;
    metrics.open(art.metrics_log, std::ios::out | mode);
    diagnostics.open(art.diagnostics_log, std::ios::out | mode);
    SSPSLAB_CHECK(metrics && diagnostics, "cannot open logs in " << cfg.output_dir);
    std::ofstream(dir / "config.toml") << serialize_config(cfg);
    write_trials(trainer.trials(), (dir / "trials.txt").string());
    if (fresh) {
      art.checkpoints.push_back((dir / detail::checkpoint_name(trainer.state().epoch)).string());
      trainer.save(art.checkpoints.back());
    }
  }
  while (trainer.state().epoch < cfg.epochs_total) {
    EpochRecord rec = trainer.run_epoch();
    if (write) {
      diagnostics << detail::diagnostics_record(rec).dump() << '\n';
      if (rec.metrics) metrics << metrics_record(rec.epoch, *rec.metrics, rec.fallback_rate).dump() << '\n';
      const bool last = rec.epoch == cfg.epochs_total;
      if (last || (cfg.checkpoint_every > 0 && rec.epoch % cfg.checkpoint_every == 0)) {
        art.checkpoints.push_back(
            (fs::path(cfg.output_dir) / detail::checkpoint_name(rec.epoch)).string());
        trainer.save(art.checkpoints.back());
      }
    }
    art.epochs.push_back(std::move(rec));
  }
  if (write && trainer.state().epoch != last_saved_epoch(art)) {
    art.checkpoints.push_back(
        (fs::path(cfg.output_dir) / detail::checkpoint_name(trainer.state().epoch)).string());
    trainer.save(art.checkpoints.back());
  }
  art.final_report = (!art.epochs.empty() && art.epochs.back().metrics) ? *art.epochs.back().metrics
                                                                        : trainer.evaluate();
  return art;
}

inline RunArtifacts run_training(const RunConfig& cfg) {
  Trainer t(cfg);
  return run_trainer(t, true);
}

/// Evaluates a checkpoint on a trial list over its evaluation corpus.
inline MetricsReport run_eval(const std::string& checkpoint_path, const TrialList& trials) {
  const TrainingState st = load_checkpoint(checkpoint_path);
  const Corpus train = build_corpus(st.config.corpus);
  const Corpus eval = build_eval_corpus(train, st.config.eval_speakers);
  return evaluate(st.models.teacher().encoder, eval, trials);
}

/// Continues training from a checkpoint with config overrides, e.g.
/// {"pos_sampling", "\"ssps\""}. `extra_epochs` more epochs are run.
inline RunArtifacts resume(const std::string& checkpoint_path,
                           std::vector<std::pair<std::string, std::string>> overrides,
                           std::int64_t extra_epochs, const std::string& output_dir) {
  TrainingState st = load_checkpoint(checkpoint_path);
  overrides.emplace_back("epochs_total", std::to_string(st.epoch + extra_epochs));
  overrides.emplace_back("output_dir", "\"" + output_dir + "\"");
  Trainer t(apply_overrides(std::move(st), overrides));
  return run_trainer(t, false);
}

}  // namespace sspslab
