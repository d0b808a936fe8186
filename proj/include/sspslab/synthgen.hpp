#pragma once

// Synthetic speaker/channel corpus.
//
// Every utterance u has a clean observation
//     x(u) = speaker_scale * Ws * s(speaker(u)) + channel_scale * Wr * r(recording(u))
// and every sampled view adds fresh Gaussian segment noise plus, for augmented
// views, Gaussian augmentation noise. Segments of one recording share r, which
// is the nuisance that same-utterance positives leak into the representation.

#include "sspslab/common.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace sspslab {

struct CorpusConfig {
  Index n_speakers = 64;
  Index recordings_per_speaker = 4;
  Index utterances_per_recording = 8;
  Index latent_dim = 8;
  Index input_dim = 32;
  double speaker_scale = 1.0;
  double channel_scale = 1.5;
  double segment_noise_sigma = 0.3;
  double augment_noise_sigma = 0.3;
  std::uint64_t seed = 7;

  Index n_utterances() const {
    return n_speakers * recordings_per_speaker * utterances_per_recording;
  }
  Index n_recordings() const { return n_speakers * recordings_per_speaker; }

  void validate() const {
    SSPSLAB_CHECK(n_speakers >= 1 && recordings_per_speaker >= 1 &&
                      utterances_per_recording >= 1 && latent_dim >= 1 && input_dim >= 1,
                  "corpus counts must be >= 1");
    SSPSLAB_CHECK(input_dim >= latent_dim, "input_dim must be >= latent_dim");
    SSPSLAB_CHECK(segment_noise_sigma >= 0.0 && augment_noise_sigma >= 0.0,
                  "noise sigmas must be non-negative");
    SSPSLAB_CHECK(std::isfinite(speaker_scale) && std::isfinite(channel_scale),
                  "scales must be finite");
  }

  bool operator==(const CorpusConfig&) const = default;
};

struct UtteranceMeta {
  UttId utterance_id = 0;
  Index speaker_id = 0;
  Index recording_id = 0;
  RowVector speaker_latent;
  RowVector channel_latent;
};

class Corpus {
 public:
  Corpus() = default;
  Corpus(CorpusConfig config, Matrix ws, Matrix wr, std::vector<UtteranceMeta> utts)
      : config_(config), ws_(std::move(ws)), wr_(std::move(wr)), utts_(std::move(utts)) {
    clean_.resize(static_cast<Index>(utts_.size()), ws_.rows());
    for (std::size_t i = 0; i < utts_.size(); ++i) {
      clean_.row(static_cast<Index>(i)) =
          config_.speaker_scale * (ws_ * utts_[i].speaker_latent.transpose()).transpose() +
          config_.channel_scale * (wr_ * utts_[i].channel_latent.transpose()).transpose();
    }
  }

  const CorpusConfig& config() const { return config_; }
  Index size() const { return static_cast<Index>(utts_.size()); }
  Index input_dim() const { return ws_.rows(); }
  Index n_recordings() const { return config_.n_recordings(); }
  const Matrix& speaker_mixing() const { return ws_; }
  const Matrix& channel_mixing() const { return wr_; }

  /// Noise-free observation of an utterance.
  auto clean_view(UttId id) const {
    check_id(id);
    return clean_.row(id);
  }
  const Matrix& clean_views() const { return clean_; }

  void check_id(UttId id) const {
    SSPSLAB_CHECK(id >= 0 && id < size(), "unknown utterance id " << id);
  }

  // Hidden labels. Evaluation and diagnostics go through the first accessor;
  // training code may only use the second, and only for supervised sampling.
  const std::vector<UtteranceMeta>& evaluation_labels() const { return utts_; }
  const std::vector<UtteranceMeta>& supervision_labels() const {
    ++supervision_reads_;
    return utts_;
  }
  std::uint64_t supervision_reads() const { return supervision_reads_; }

 private:
  CorpusConfig config_;
  Matrix ws_, wr_;
  std::vector<UtteranceMeta> utts_;
  Matrix clean_;
  mutable std::uint64_t supervision_reads_ = 0;
};

namespace detail {

inline Matrix gaussian_matrix(Index rows, Index cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  return m;
}

inline RowVector gaussian_row(Index n, Rng& rng) {
  RowVector v(n);
  for (Index i = 0; i < n; ++i) v(i) = rng.normal();
  return v;
}

inline std::vector<UtteranceMeta> draw_utterances(const CorpusConfig& c, Index speaker_offset,
                                                  Rng& rng) {
  std::vector<UtteranceMeta> utts;
  utts.reserve(static_cast<std::size_t>(c.n_utterances()));
  for (Index s = 0; s < c.n_speakers; ++s) {
    const RowVector spk = gaussian_row(c.latent_dim, rng);
    for (Index r = 0; r < c.recordings_per_speaker; ++r) {
      const RowVector chn = gaussian_row(c.latent_dim, rng);
      for (Index u = 0; u < c.utterances_per_recording; ++u) {
        UtteranceMeta m;
        m.utterance_id = static_cast<UttId>(utts.size());
        m.speaker_id = speaker_offset + s;
        m.recording_id = (speaker_offset + s) * c.recordings_per_speaker + r;
        m.speaker_latent = spk;
        m.channel_latent = chn;
        utts.push_back(std::move(m));
      }
    }
  }
  return utts;
}

}  // namespace detail

/// Builds the training corpus. Deterministic in `config.seed`.
inline Corpus build_corpus(const CorpusConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(config.latent_dim));
  Matrix ws = detail::gaussian_matrix(config.input_dim, config.latent_dim, scale, rng);
  Matrix wr = detail::gaussian_matrix(config.input_dim, config.latent_dim, scale, rng);
  auto utts = detail::draw_utterances(config, 0, rng);
  return Corpus(config, std::move(ws), std::move(wr), std::move(utts));
}

/// Held-out corpus sharing the mixing matrices of `train` but with fresh
/// speakers (speaker ids continue after the training speakers).
inline Corpus build_eval_corpus(const Corpus& train, Index n_speakers) {
  CorpusConfig c = train.config();
  c.n_speakers = n_speakers;
  c.validate();
  Rng rng(derive_seed(train.config().seed, 1));
  auto utts = detail::draw_utterances(c, train.config().n_speakers, rng);
  return Corpus(c, train.speaker_mixing(), train.channel_mixing(), std::move(utts));
}

enum class ViewKind { pair, multicrop };

struct ViewBatch {
  std::vector<UttId> indices;
  // pair mode
  Matrix anchors, positives;
  // multicrop mode: student sees global + local, teacher sees teacher_views
  std::vector<Matrix> global_views;  // 2
  std::vector<Matrix> local_views;   // 4
  std::vector<Matrix> teacher_views; // 2
  Matrix references;

  Index size() const { return static_cast<Index>(indices.size()); }
};

inline constexpr int kGlobalViews = 2;
inline constexpr int kLocalViews = 4;

namespace detail {

inline void add_view(const Corpus& corpus, UttId id, double seg_sigma, double aug_sigma,
                     Rng& rng, Matrix& out, Index row) {
  const Index d = corpus.input_dim();
  out.row(row) = corpus.clean_view(id);
  // Noise vectors are always drawn so rng consumption is independent of sigma.
  for (Index k = 0; k < d; ++k) out(row, k) += seg_sigma * rng.normal();
  if (aug_sigma >= 0.0)
    for (Index k = 0; k < d; ++k) out(row, k) += aug_sigma * rng.normal();
}

}  // namespace detail

/// Samples views for a batch of utterances.
///
/// `positive_sources`, when non-empty, names the utterance each item's
/// positive (pair) or teacher views (multicrop) are drawn from; empty means
/// the item's own utterance. Reference views are always drawn so the random
/// stream does not depend on whether anything consumes them.
inline ViewBatch sample_views(const Corpus& corpus, const std::vector<UttId>& indices,
                              ViewKind kind, Rng& rng,
                              const std::vector<UttId>& positive_sources = {}) {
  SSPSLAB_CHECK(positive_sources.empty() || positive_sources.size() == indices.size(),
                "positive_sources size mismatch");
  for (UttId id : indices) corpus.check_id(id);
  for (UttId id : positive_sources) corpus.check_id(id);

  const auto& c = corpus.config();
  const double seg = c.segment_noise_sigma;
  const double ref_seg = seg / std::sqrt(2.0);
  const double aug = c.augment_noise_sigma;
  const Index b = static_cast<Index>(indices.size());
  const Index d = corpus.input_dim();
  constexpr double kNoAugment = -1.0;

  ViewBatch vb;
  vb.indices = indices;
  vb.references.resize(b, d);
  if (kind == ViewKind::pair) {
    vb.anchors.resize(b, d);
    vb.positives.resize(b, d);
    for (Index i = 0; i < b; ++i) {
      const UttId src = positive_sources.empty() ? indices[i] : positive_sources[i];
      detail::add_view(corpus, indices[i], seg, aug, rng, vb.anchors, i);
      detail::add_view(corpus, src, seg, aug, rng, vb.positives, i);
      detail::add_view(corpus, indices[i], ref_seg, kNoAugment, rng, vb.references, i);
    }
    return vb;
  }

  vb.global_views.assign(kGlobalViews, Matrix(b, d));
  vb.local_views.assign(kLocalViews, Matrix(b, d));
  vb.teacher_views.assign(kGlobalViews, Matrix(b, d));
  for (Index i = 0; i < b; ++i) {
    for (auto& g : vb.global_views) detail::add_view(corpus, indices[i], ref_seg, aug, rng, g, i);
    for (auto& l : vb.local_views) detail::add_view(corpus, indices[i], seg, aug, rng, l, i);
    detail::add_view(corpus, indices[i], ref_seg, kNoAugment, rng, vb.references, i);
    const bool own = positive_sources.empty() || positive_sources[i] == indices[i];
    for (int t = 0; t < kGlobalViews; ++t) {
      if (own)
        vb.teacher_views[t].row(i) = vb.global_views[t].row(i);
      else
        detail::add_view(corpus, positive_sources[i], ref_seg, aug, rng, vb.teacher_views[t], i);
    }
  }
  return vb;
}

struct Trial {
  UttId a = 0;
  UttId b = 0;
  bool is_target = false;
  bool operator==(const Trial&) const = default;
};

struct TrialList {
  std::vector<Trial> trials;
  std::size_t n_target() const {
    return static_cast<std::size_t>(
        std::count_if(trials.begin(), trials.end(), [](const Trial& t) { return t.is_target; }));
  }
  std::size_t size() const { return trials.size(); }
};

/// Draws distinct verification pairs without replacement.
inline TrialList build_trials(const Corpus& eval, std::size_t n_target, std::size_t n_nontarget,
                              Rng& rng) {
  const auto& labels = eval.evaluation_labels();
  std::vector<std::pair<UttId, UttId>> same, diff;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      (labels[i].speaker_id == labels[j].speaker_id ? same : diff)
          .emplace_back(static_cast<UttId>(i), static_cast<UttId>(j));
  SSPSLAB_CHECK(n_target <= same.size(), "infeasible trial request: " << n_target
                                             << " target pairs requested, " << same.size()
                                             << " available");
  SSPSLAB_CHECK(n_nontarget <= diff.size(), "infeasible trial request: " << n_nontarget
                                                << " non-target pairs requested, "
                                                << diff.size() << " available");

  auto take = [&rng](std::vector<std::pair<UttId, UttId>>& pool, std::size_t n) {
    for (std::size_t k = 0; k < n; ++k) std::swap(pool[k], pool[k + rng.index(pool.size() - k)]);
    pool.resize(n);
  };
  take(same, n_target);
  take(diff, n_nontarget);

  TrialList out;
  out.trials.reserve(n_target + n_nontarget);
  for (auto [a, b] : same) out.trials.push_back({a, b, true});
  for (auto [a, b] : diff) out.trials.push_back({a, b, false});
  std::shuffle(out.trials.begin(), out.trials.end(), rng.engine());
  return out;
}

// Trial lines: "<label 0|1> <utt_id_a> <utt_id_b>".
inline void write_trials(const TrialList& tl, std::ostream& os) {
  for (const auto& t : tl.trials) os << (t.is_target ? 1 : 0) << ' ' << t.a << ' ' << t.b << '\n';
}

inline void write_trials(const TrialList& tl, const std::string& path) {
  std::ofstream os(path);
  SSPSLAB_CHECK(os, "cannot open " << path << " for writing");
  write_trials(tl, os);
}

inline TrialList read_trials(std::istream& is) {
  TrialList tl;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    int label = -1;
    Trial t;
    std::string extra;
    ls >> label >> t.a >> t.b;
    SSPSLAB_CHECK(!ls.fail() && (label == 0 || label == 1) && !(ls >> extra),
                  "malformed trial at line " << lineno << ": '" << line << "'");
    t.is_target = label == 1;
    tl.trials.push_back(t);
  }
  return tl;
}

inline TrialList read_trials(const std::string& path) {
  std::ifstream is(path);
  SSPSLAB_CHECK(is, "cannot open trials file " << path);
  return read_trials(is);
}

// Corpus export: "# sspslab corpus v1", config as key=value lines, a column
// header, then one "utt_id speaker_id recording_id" row per utterance.
inline void export_corpus(const Corpus& corpus, std::ostream& os) {
  const auto& c = corpus.config();
  os << "# sspslab corpus v1\n";
  os << "n_speakers=" << c.n_speakers << '\n'
     << "recordings_per_speaker=" << c.recordings_per_speaker << '\n'
     << "utterances_per_recording=" << c.utterances_per_recording << '\n'
     << "latent_dim=" << c.latent_dim << '\n'
     << "input_dim=" << c.input_dim << '\n';
  os.precision(17);
  os << "speaker_scale=" << c.speaker_scale << '\n'
     << "channel_scale=" << c.channel_scale << '\n'
     << "segment_noise_sigma=" << c.segment_noise_sigma << '\n'
     << "augment_noise_sigma=" << c.augment_noise_sigma << '\n'
     << "seed=" << c.seed << '\n';
  os << "utt_id speaker_id recording_id\n";
  for (const auto& u : corpus.evaluation_labels())
    os << u.utterance_id << ' ' << u.speaker_id << ' ' << u.recording_id << '\n';
}

/// Reads the config header of a corpus export and regenerates the corpus;
/// rows are checked against the regenerated labels.
inline Corpus import_corpus(std::istream& is) {
  std::string line;
  std::getline(is, line);
  SSPSLAB_CHECK(line == "# sspslab corpus v1", "not a corpus export");
  std::map<std::string, std::string> kv;
  while (std::getline(is, line) && line != "utt_id speaker_id recording_id") {
    const auto eq = line.find('=');
    SSPSLAB_CHECK(eq != std::string::npos, "malformed corpus header line '" << line << "'");
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  auto get = [&kv](const char* key) -> const std::string& {
    auto it = kv.find(key);
    SSPSLAB_CHECK(it != kv.end(), "corpus header missing " << key);
    return it->second;
  };
  CorpusConfig c;
  c.n_speakers = std::stoll(get("n_speakers"));
  c.recordings_per_speaker = std::stoll(get("recordings_per_speaker"));
  c.utterances_per_recording = std::stoll(get("utterances_per_recording"));
  c.latent_dim = std::stoll(get("latent_dim"));
  c.input_dim = std::stoll(get("input_dim"));
  c.speaker_scale = std::stod(get("speaker_scale"));
  c.channel_scale = std::stod(get("channel_scale"));
  c.segment_noise_sigma = std::stod(get("segment_noise_sigma"));
  c.augment_noise_sigma = std::stod(get("augment_noise_sigma"));
  c.seed = std::stoull(get("seed"));
  Corpus corpus = build_corpus(c);
  const auto& labels = corpus.evaluation_labels();
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    UttId u;
    Index s, r;
    ls >> u >> s >> r;
    SSPSLAB_CHECK(!ls.fail() && row < labels.size() && labels[row].utterance_id == u &&
                      labels[row].speaker_id == s && labels[row].recording_id == r,
                  "corpus row " << row << " does not match regenerated corpus");
    ++row;
  }
  SSPSLAB_CHECK(row == labels.size(), "corpus export has " << row << " rows, expected "
                                                           << labels.size());
  return corpus;
}

}  // namespace sspslab
