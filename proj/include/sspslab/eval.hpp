#pragma once

// Verification scoring and metrics: cosine trial scores, EER, minDCF,
// speaker variance statistics and CSV export of representations.

#include "sspslab/common.hpp"
#include "sspslab/nncore.hpp"
#include "sspslab/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

namespace sspslab {

struct ScoredTrials {
  std::vector<double> scores;
  std::vector<bool> labels;  // true = target

  void validate() const {
    SSPSLAB_CHECK(scores.size() == labels.size(), "scores/labels length mismatch");
    const auto n_tgt = std::count(labels.begin(), labels.end(), true);
    SSPSLAB_CHECK(n_tgt > 0 && n_tgt < static_cast<std::ptrdiff_t>(labels.size()),
                  "trial list needs both target and non-target trials");
    for (double s : scores) SSPSLAB_CHECK(std::isfinite(s), "non-finite score");
  }
};

struct MetricsReport {
  double eer = 0.0;
  double min_dcf = 0.0;
  double intra_speaker_variance = 0.0;
  double inter_speaker_variance = 0.0;
  std::size_t n_target = 0;
  std::size_t n_nontarget = 0;

  bool operator==(const MetricsReport&) const = default;
};

/// Encodes every utterance of `corpus` from its noise-free view, l2-normalized.
inline Matrix encode_corpus(const Mlp& encoder, const Corpus& corpus) {
  return normalize_rows(forward(encoder, corpus.clean_views()));
}

inline ScoredTrials score_trials(const Matrix& normalized_repr, const TrialList& trials) {
  ScoredTrials st;
  st.scores.reserve(trials.size());
  st.labels.reserve(trials.size());
  for (const auto& t : trials.trials) {
    SSPSLAB_CHECK(t.a >= 0 && t.a < normalized_repr.rows() && t.b >= 0 &&
                      t.b < normalized_repr.rows(),
                  "trial references unknown utterance (" << t.a << ", " << t.b << ")");
    st.scores.push_back(
        std::clamp(normalized_repr.row(t.a).dot(normalized_repr.row(t.b)), -1.0, 1.0));
    st.labels.push_back(t.is_target);
  }
  return st;
}

inline ScoredTrials score_trials(const Mlp& encoder, const Corpus& eval_corpus,
                                 const TrialList& trials) {
  return score_trials(encode_corpus(encoder, eval_corpus), trials);
}

/// Miss and false-alarm rates at every threshold of the sweep. Trials with
/// score >= threshold are accepted. Thresholds are the sorted unique scores
/// followed by +inf, so the first point accepts everything and the last
/// rejects everything.
struct DetectionCurve {
  std::vector<double> thresholds;
  std::vector<double> p_miss;
  std::vector<double> p_fa;
};

inline DetectionCurve detection_curve(const ScoredTrials& st) {
  st.validate();
  std::vector<std::size_t> order(st.scores.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return st.scores[a] < st.scores[b]; });
  const double n_tgt = static_cast<double>(std::count(st.labels.begin(), st.labels.end(), true));
  const double n_non = static_cast<double>(st.labels.size()) - n_tgt;

  DetectionCurve c;
  std::size_t tgt_below = 0, non_below = 0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double thr = st.scores[order[k]];
    c.thresholds.push_back(thr);
    c.p_miss.push_back(static_cast<double>(tgt_below) / n_tgt);
    c.p_fa.push_back(1.0 - static_cast<double>(non_below) / n_non);
    for (; k < order.size() && st.scores[order[k]] == thr; ++k)
      (st.labels[order[k]] ? tgt_below : non_below)++;
  }
  c.thresholds.push_back(std::numeric_limits<double>::infinity());
  c.p_miss.push_back(1.0);
  c.p_fa.push_back(0.0);
  return c;
}

/// Equal error rate, linearly interpolated between the two sweep points that
/// bracket the crossing of the miss and false-alarm curves.
inline double compute_eer(const ScoredTrials& st) {
  const DetectionCurve c = detection_curve(st);
  for (std::size_t k = 0; k < c.thresholds.size(); ++k) {
    if (c.p_miss[k] < c.p_fa[k]) continue;
    if (c.p_miss[k] == c.p_fa[k] || k == 0) return c.p_miss[k];
    const double gap_prev = c.p_fa[k - 1] - c.p_miss[k - 1];  // > 0
    const double gap_here = c.p_fa[k] - c.p_miss[k];          // < 0
    const double t = gap_prev / (gap_prev - gap_here);
    return c.p_miss[k - 1] + t * (c.p_miss[k] - c.p_miss[k - 1]);
  }
  return 1.0;  // unreachable: the last point has p_miss = 1 >= p_fa = 0
}

/// Minimum normalized detection cost over the threshold sweep.
inline double compute_min_dcf(const ScoredTrials& st, double p_target = 0.01, double c_miss = 1.0,
                              double c_fa = 1.0) {
  SSPSLAB_CHECK(p_target > 0.0 && p_target < 1.0, "p_target must be in (0, 1)");
  const DetectionCurve c = detection_curve(st);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < c.thresholds.size(); ++k)
    best = std::min(best, c_miss * p_target * c.p_miss[k] + c_fa * (1 - p_target) * c.p_fa[k]);
  return best / std::min(c_miss * p_target, c_fa * (1 - p_target));
}

struct VarianceStats {
  double intra = 0.0;
  double inter = 0.0;
};

/// On l2-normalized rows: intra = mean squared distance to the own speaker
/// centroid; inter = mean squared distance over all pairs of speaker centroids.
inline VarianceStats speaker_variance_stats(const Matrix& representations,
                                            const std::vector<Index>& speaker_labels) {
  SSPSLAB_CHECK(representations.rows() == static_cast<Index>(speaker_labels.size()),
                "label count mismatch");
  const Matrix x = normalize_rows(representations);
  std::vector<Index> speakers = speaker_labels;
  std::sort(speakers.begin(), speakers.end());
  speakers.erase(std::unique(speakers.begin(), speakers.end()), speakers.end());
  SSPSLAB_CHECK(speakers.size() >= 2, "need at least two speakers");

  const Index n_spk = static_cast<Index>(speakers.size());
  Matrix centroids = Matrix::Zero(n_spk, x.cols());
  std::vector<Index> counts(speakers.size(), 0), slot(speaker_labels.size());
  for (std::size_t i = 0; i < speaker_labels.size(); ++i) {
    slot[i] = std::lower_bound(speakers.begin(), speakers.end(), speaker_labels[i]) - speakers.begin();
    centroids.row(slot[i]) += x.row(static_cast<Index>(i));
    ++counts[static_cast<std::size_t>(slot[i])];
  }
  for (Index s = 0; s < n_spk; ++s) {
    SSPSLAB_CHECK(counts[static_cast<std::size_t>(s)] >= 2,
                  "speaker " << speakers[static_cast<std::size_t>(s)] << " has fewer than 2 items");
    centroids.row(s) /= static_cast<double>(counts[static_cast<std::size_t>(s)]);
  }
  VarianceStats v;
  for (std::size_t i = 0; i < speaker_labels.size(); ++i)
    v.intra += (x.row(static_cast<Index>(i)) - centroids.row(slot[i])).squaredNorm();
  v.intra /= static_cast<double>(speaker_labels.size());
  double pairs = 0.0;
  for (Index a = 0; a < n_spk; ++a)
    for (Index b = a + 1; b < n_spk; ++b) {
      v.inter += (centroids.row(a) - centroids.row(b)).squaredNorm();
      pairs += 1.0;
    }
  v.inter /= pairs;
  return v;
}

/// Full report for an encoder on an evaluation corpus and trial list.
inline MetricsReport evaluate(const Mlp& encoder, const Corpus& eval_corpus,
                              const TrialList& trials) {
  const Matrix repr = encode_corpus(encoder, eval_corpus);
  const ScoredTrials st = score_trials(repr, trials);
  MetricsReport r;
  r.eer = compute_eer(st);
  r.min_dcf = compute_min_dcf(st);
  std::vector<Index> spk;
  for (const auto& u : eval_corpus.evaluation_labels()) spk.push_back(u.speaker_id);
  const VarianceStats v = speaker_variance_stats(repr, spk);
  r.intra_speaker_variance = v.intra;
  r.inter_speaker_variance = v.inter;
  r.n_target = trials.n_target();
  r.n_nontarget = trials.size() - r.n_target;
  return r;
}

/// CSV: header "utt_id,speaker_id,dim_0,...", one row per representation,
/// values with 17 significant digits.
inline void export_embeddings(const Matrix& representations, const std::vector<UttId>& utt_ids,
                              const std::vector<Index>& speaker_ids, const std::string& path) {
  SSPSLAB_CHECK(static_cast<Index>(utt_ids.size()) == representations.rows() &&
                    utt_ids.size() == speaker_ids.size(),
                "embedding export: row count mismatch");
  std::ofstream os(path);
  SSPSLAB_CHECK(os, "cannot open " << path << " for writing");
  os << "utt_id,speaker_id";
  for (Index d = 0; d < representations.cols(); ++d) os << ",dim_" << d;
  os << '\n';
  os.precision(17);
  for (Index r = 0; r < representations.rows(); ++r) {
    os << utt_ids[static_cast<std::size_t>(r)] << ',' << speaker_ids[static_cast<std::size_t>(r)];
    for (Index d = 0; d < representations.cols(); ++d) os << ',' << representations(r, d);
    os << '\n';
  }
  SSPSLAB_CHECK(os.good(), "write to " << path << " failed");
}

}  // namespace sspslab
