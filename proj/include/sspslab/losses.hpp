#pragma once

// Contrastive (SimCLR) and self-distillation (DINO) objectives, with optional
// substitution of the positive by a queued pseudo-positive embedding.

#include "sspslab/common.hpp"

#include <cmath>
#include <map>
#include <vector>

namespace sspslab {

struct SimclrParams {
  double temperature = 0.03;
};

struct DinoParams {
  double student_temperature = 0.1;
  double teacher_temperature = 0.04;
  double center_momentum = 0.9;
  RowVector center;  // length D_emb; empty is treated as zero

  void validate() const {
    SSPSLAB_CHECK(student_temperature > 0.0 && teacher_temperature > 0.0,
                  "temperatures must be positive");
    SSPSLAB_CHECK(teacher_temperature < student_temperature,
                  "teacher temperature must be below student temperature");
    SSPSLAB_CHECK(center_momentum >= 0.0 && center_momentum < 1.0 + 1e-15,
                  "center momentum outside [0, 1]");
    SSPSLAB_CHECK(center.allFinite(), "non-finite DINO center");
  }
};

struct LossResult {
  double loss = 0.0;
  std::vector<Matrix> grads;  // one per differentiable input, in argument order
};

namespace detail {

inline double log_sum_exp(const RowVector& v) {
  const double m = v.maxCoeff();
  return m + std::log((v.array() - m).exp().sum());
}

inline RowVector softmax(const RowVector& v) {
  RowVector e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

inline RowVector log_softmax(const RowVector& v) {
  return v.array() - log_sum_exp(v);
}

/// Backprop through row-wise l2 normalization.
inline Matrix normalize_rows_backward(const Matrix& normalized, const RowVector& norms,
                                      const Matrix& grad_normalized) {
  Matrix g(grad_normalized.rows(), grad_normalized.cols());
  for (Index i = 0; i < g.rows(); ++i) {
    const double proj = grad_normalized.row(i).dot(normalized.row(i));
    g.row(i) = (grad_normalized.row(i) - proj * normalized.row(i)) / norms(i);
  }
  return g;
}

}  // namespace detail

/// InfoNCE over cosine similarities with in-batch negatives.
///
/// Rows of both inputs are l2-normalized internally and gradients flow
/// through the normalization. grads = {dL/dZ, dL/dZ'}.
inline LossResult simclr_loss(const Matrix& z, const Matrix& zp, const SimclrParams& p) {
  SSPSLAB_CHECK(p.temperature > 0.0, "temperature must be positive");
  SSPSLAB_CHECK(z.rows() >= 1 && z.rows() == zp.rows() && z.cols() == zp.cols(),
                "simclr inputs must be matching non-empty batches");
  const Index b = z.rows();
  RowVector zn_norm = z.rowwise().norm().transpose();
  RowVector zp_norm = zp.rowwise().norm().transpose();
  const Matrix zn = normalize_rows(z);
  const Matrix zpn = normalize_rows(zp);

  const Matrix logits = (zn * zpn.transpose()) / p.temperature;
  Matrix dlogits(b, b);
  double loss = 0.0;
  for (Index i = 0; i < b; ++i) {
    const RowVector row = logits.row(i);
    loss += detail::log_sum_exp(row) - row(i);
    dlogits.row(i) = detail::softmax(row);
    dlogits(i, i) -= 1.0;
  }
  loss /= static_cast<double>(b);
  dlogits /= static_cast<double>(b);

  const Matrix dzn = dlogits * zpn / p.temperature;
  const Matrix dzpn = dlogits.transpose() * zn / p.temperature;
  LossResult r;
  r.loss = loss;
  r.grads.push_back(detail::normalize_rows_backward(zn, zn_norm, dzn));
  r.grads.push_back(detail::normalize_rows_backward(zpn, zp_norm, dzpn));
  return r;
}

/// Multi-crop self-distillation loss, summed over teacher views t and student
/// views s != t and averaged over the batch:
///   (1/B) sum_i sum_t sum_{s != t} H((z'_{i,t} - c) / tau_t, z_{i,s} / tau_s)
/// with H(a, b) = -softmax(a) . log softmax(b). Student views 0 and 1 are the
/// global crops that share an index with the teacher views.
/// grads = {dL/dstudent_view_s for s in 0..5}; the teacher gets none.
inline LossResult dino_loss(const std::vector<Matrix>& student_views,
                            const std::vector<Matrix>& teacher_views, const DinoParams& p) {
  p.validate();
  SSPSLAB_CHECK(teacher_views.size() == 2 && student_views.size() == 6,
                "DINO expects 2 teacher and 6 student views, got " << teacher_views.size()
                                                                   << " and "
                                                                   << student_views.size());
  const Index b = student_views[0].rows();
  const Index d = student_views[0].cols();
  for (const auto* set : {&student_views, &teacher_views})
    for (const auto& v : *set)
      SSPSLAB_CHECK(v.rows() == b && v.cols() == d, "DINO view shape mismatch");
  SSPSLAB_CHECK(b >= 1, "empty batch");
  SSPSLAB_CHECK(p.center.size() == 0 || p.center.size() == d, "center length mismatch");
  const RowVector center = p.center.size() ? p.center : RowVector(RowVector::Zero(d));

  LossResult r;
  r.grads.assign(student_views.size(), Matrix::Zero(b, d));
  double loss = 0.0;
  for (Index i = 0; i < b; ++i) {
    std::vector<RowVector> teacher_prob;
    for (const auto& tv : teacher_views)
      teacher_prob.push_back(detail::softmax((tv.row(i) - center) / p.teacher_temperature));
    for (std::size_t s = 0; s < student_views.size(); ++s) {
      const RowVector logits = student_views[s].row(i) / p.student_temperature;
      const RowVector logp = detail::log_softmax(logits);
      const RowVector prob = detail::softmax(logits);
      for (std::size_t t = 0; t < teacher_views.size(); ++t) {
        if (s == t) continue;
        loss -= teacher_prob[t].dot(logp);
        r.grads[s].row(i) += (prob - teacher_prob[t]) / p.student_temperature;
      }
    }
  }
  for (auto& g : r.grads) g /= static_cast<double>(b);
  r.loss = loss / static_cast<double>(b);
  return r;
}

/// c <- rho * c + (1 - rho) * mean of all teacher view rows.
inline RowVector update_center(const DinoParams& p, const std::vector<Matrix>& teacher_views) {
  SSPSLAB_CHECK(!teacher_views.empty(), "no teacher views");
  const Index d = teacher_views[0].cols();
  RowVector mean = RowVector::Zero(d);
  Index rows = 0;
  for (const auto& v : teacher_views) {
    SSPSLAB_CHECK(v.cols() == d && v.allFinite(), "teacher embeddings must be finite");
    mean += v.colwise().sum();
    rows += v.rows();
  }
  mean /= static_cast<double>(rows);
  const RowVector c = p.center.size() ? p.center : RowVector(RowVector::Zero(d));
  return p.center_momentum * c + (1 - p.center_momentum) * mean;
}

/// Positive-side inputs of a loss: one matrix for SimCLR, the two teacher
/// views for DINO. `replaced[i]` marks rows substituted by a queued
/// embedding; those rows are treated as constants.
struct PositiveInputs {
  std::vector<UttId> items;
  std::vector<Matrix> views;
  std::vector<bool> replaced;
};

/// Substitutes the positive of every item found in `replacements` (keyed by
/// anchor utterance id) in all views.
inline PositiveInputs apply_pseudo_positive(PositiveInputs in,
                                            const std::map<UttId, RowVector>& replacements) {
  SSPSLAB_CHECK(!in.views.empty(), "no positive views");
  const Index b = static_cast<Index>(in.items.size());
  if (in.replaced.empty()) in.replaced.assign(in.items.size(), false);
  for (Index i = 0; i < b; ++i) {
    auto it = replacements.find(in.items[i]);
    if (it == replacements.end()) continue;
    for (auto& v : in.views) {
      SSPSLAB_CHECK(it->second.size() == v.cols(), "replacement dimension "
                                                       << it->second.size() << " != "
                                                       << v.cols());
      v.row(i) = it->second;
    }
    in.replaced[i] = true;
  }
  return in;
}

/// Zeroes gradient rows of replaced items (queue entries carry no gradient).
inline void mask_replaced(Matrix& grad, const std::vector<bool>& replaced) {
  for (Index i = 0; i < grad.rows(); ++i)
    if (replaced[static_cast<std::size_t>(i)]) grad.row(i).setZero();
}

}  // namespace sspslab
