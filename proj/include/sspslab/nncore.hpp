#pragma once

// Feedforward networks with explicit backprop, optimizers, schedules and the
// EMA teacher update.

#include "sspslab/common.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

namespace sspslab {

enum class Activation { identity, relu };

/// y = act(W * normalize?(x) + b). Bias is a 1 x out matrix, empty when absent.
struct Layer {
  Matrix weight;  // out x in
  Matrix bias;    // 1 x out, or 0 x 0
  Activation activation = Activation::identity;
  bool normalize_input = false;

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }
  bool has_bias() const { return bias.size() > 0; }
};

struct LayerSpec {
  Index out_dim = 0;
  Activation activation = Activation::identity;
  bool bias = true;
  bool normalize_input = false;
};

class Mlp {
 public:
  Mlp() = default;

  explicit Mlp(std::vector<Layer> layers) : layers_(std::move(layers)) {
    for (std::size_t i = 1; i < layers_.size(); ++i)
      SSPSLAB_CHECK(layers_[i].in_dim() == layers_[i - 1].out_dim(),
                    "layer " << i << " expects " << layers_[i].in_dim() << " inputs, previous "
                             << "layer emits " << layers_[i - 1].out_dim());
    for (const auto& l : layers_)
      SSPSLAB_CHECK(!l.has_bias() || (l.bias.rows() == 1 && l.bias.cols() == l.out_dim()),
                    "bias shape mismatch");
  }

  /// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
  static Mlp build(Index input_dim, const std::vector<LayerSpec>& specs, Rng& rng) {
    std::vector<Layer> layers;
    Index in = input_dim;
    for (const auto& s : specs) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(in));
      Layer l;
      l.weight.resize(s.out_dim, in);
      for (Index r = 0; r < l.weight.rows(); ++r)
        for (Index c = 0; c < l.weight.cols(); ++c) l.weight(r, c) = bound * (2 * rng.uniform() - 1);
      if (s.bias) {
        l.bias.resize(1, s.out_dim);
        for (Index c = 0; c < s.out_dim; ++c) l.bias(0, c) = bound * (2 * rng.uniform() - 1);
      }
      l.activation = s.activation;
      l.normalize_input = s.normalize_input;
      layers.push_back(std::move(l));
      in = s.out_dim;
    }
    return Mlp(std::move(layers));
  }

  Index input_dim() const { return layers_.empty() ? 0 : layers_.front().in_dim(); }
  Index output_dim() const { return layers_.empty() ? 0 : layers_.back().out_dim(); }
  bool empty() const { return layers_.empty(); }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers_mut() {
    ++version_;
    return layers_;
  }

  /// Parameter tensors in declaration order (weight, then bias, per layer).
  std::vector<Matrix*> parameters() {
    ++version_;
    std::vector<Matrix*> out;
    for (auto& l : layers_) {
      out.push_back(&l.weight);
      if (l.has_bias()) out.push_back(&l.bias);
    }
    return out;
  }
  std::vector<const Matrix*> parameters() const {
    std::vector<const Matrix*> out;
    for (const auto& l : layers_) {
      out.push_back(&l.weight);
      if (l.has_bias()) out.push_back(&l.bias);
    }
    return out;
  }

  /// Bumped by every mutable access; a cache from an older version is stale.
  std::uint64_t version() const { return version_; }

 private:
  std::vector<Layer> layers_;
  std::uint64_t version_ = 0;
};

struct ForwardCache {
  const Mlp* model = nullptr;
  std::uint64_t version = 0;
  std::vector<Matrix> inputs;        // per layer, after optional normalization
  std::vector<RowVector> input_norms;  // per layer, empty unless normalize_input
  std::vector<Matrix> pre_activation;
};

struct MlpGrads {
  std::vector<Matrix> tensors;  // same order as Mlp::parameters()
  Matrix input;                 // d loss / d input batch
};

/// Forward pass over a batch (rows are items).
inline Matrix forward(const Mlp& model, const Matrix& batch, ForwardCache* cache = nullptr) {
  SSPSLAB_CHECK(batch.cols() == model.input_dim(),
                "batch width " << batch.cols() << " != model input_dim " << model.input_dim());
  if (cache) {
    *cache = ForwardCache{};
    cache->model = &model;
    cache->version = model.version();
  }
  Matrix x = batch;
  for (const auto& l : model.layers()) {
    RowVector norms;
    if (l.normalize_input) {
      norms = x.rowwise().norm().transpose();
      for (Index i = 0; i < x.rows(); ++i) {
        SSPSLAB_CHECK(norms(i) > 0.0, "zero-norm row into normalized layer");
        x.row(i) /= norms(i);
      }
    }
    Matrix z = x * l.weight.transpose();
    if (l.has_bias()) z.rowwise() += l.bias.row(0);
    Matrix y = l.activation == Activation::relu ? Matrix(z.cwiseMax(0.0)) : z;
    if (cache) {
      cache->inputs.push_back(std::move(x));
      cache->input_norms.push_back(std::move(norms));
      cache->pre_activation.push_back(std::move(z));
    }
    x = std::move(y);
  }
  return x;
}

/// Backward pass; returns parameter gradients and the input gradient.
inline MlpGrads backward(const Mlp& model, const ForwardCache& cache, const Matrix& output_grad) {
  SSPSLAB_CHECK(cache.model == &model && cache.version == model.version() &&
                    cache.inputs.size() == model.layers().size(),
                "stale forward cache");
  const auto& layers = model.layers();
  SSPSLAB_CHECK(layers.empty() || (output_grad.cols() == model.output_dim() &&
                                   output_grad.rows() == cache.inputs.front().rows()),
                "output gradient shape mismatch");
  std::vector<Matrix> wgrads(layers.size()), bgrads(layers.size());
  Matrix g = output_grad;
  for (std::size_t k = layers.size(); k-- > 0;) {
    const auto& l = layers[k];
    if (l.activation == Activation::relu)
      g = g.cwiseProduct(Matrix((cache.pre_activation[k].array() > 0.0).cast<double>()));
    wgrads[k] = g.transpose() * cache.inputs[k];
    if (l.has_bias()) bgrads[k] = g.colwise().sum();
    Matrix gx = g * l.weight;
    if (l.normalize_input) {
      const Matrix& xn = cache.inputs[k];
      for (Index i = 0; i < gx.rows(); ++i) {
        const double proj = gx.row(i).dot(xn.row(i));
        gx.row(i) = (gx.row(i) - proj * xn.row(i)) / cache.input_norms[k](i);
      }
    }
    g = std::move(gx);
  }
  MlpGrads out;
  for (std::size_t k = 0; k < layers.size(); ++k) {
    out.tensors.push_back(std::move(wgrads[k]));
    if (layers[k].has_bias()) out.tensors.push_back(std::move(bgrads[k]));
  }
  out.input = std::move(g);
  return out;
}

/// Encoder followed by an optional projector.
struct Branch {
  Mlp encoder;
  std::optional<Mlp> projector;

  std::vector<Matrix*> parameters() {
    auto p = encoder.parameters();
    if (projector)
      for (auto* t : projector->parameters()) p.push_back(t);
    return p;
  }
  std::vector<const Matrix*> parameters() const {
    auto p = encoder.parameters();
    if (projector)
      for (auto* t : projector->parameters()) p.push_back(t);
    return p;
  }
  Index embedding_dim() const { return projector ? projector->output_dim() : encoder.output_dim(); }
};

struct BranchCache {
  ForwardCache encoder, projector;
};

struct BranchOutput {
  Matrix representation;  // encoder output
  Matrix embedding;       // projector output (== representation without projector)
};

inline BranchOutput forward(const Branch& br, const Matrix& batch, BranchCache* cache = nullptr) {
  BranchOutput out;
  out.representation = forward(br.encoder, batch, cache ? &cache->encoder : nullptr);
  out.embedding = br.projector
                      ? forward(*br.projector, out.representation, cache ? &cache->projector : nullptr)
                      : out.representation;
  return out;
}

/// Gradients for all branch parameters given d loss / d embedding.
inline std::vector<Matrix> backward(const Branch& br, const BranchCache& cache,
                                    const Matrix& embedding_grad) {
  std::vector<Matrix> proj_grads;
  Matrix repr_grad = embedding_grad;
  if (br.projector) {
    auto pg = backward(*br.projector, cache.projector, embedding_grad);
    proj_grads = std::move(pg.tensors);
    repr_grad = std::move(pg.input);
  }
  auto eg = backward(br.encoder, cache.encoder, repr_grad);
  std::vector<Matrix> all = std::move(eg.tensors);
  for (auto& t : proj_grads) all.push_back(std::move(t));
  return all;
}

/// Accumulates b into a (same tensor list layout).
inline void accumulate(std::vector<Matrix>& a, const std::vector<Matrix>& b) {
  if (a.empty()) {
    a = b;
    return;
  }
  SSPSLAB_CHECK(a.size() == b.size(), "gradient list size mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

enum class PairMode { symmetric, student_teacher };

/// Student/teacher pair. In symmetric mode the teacher is the student.
class ModelPair {
 public:
  ModelPair() = default;
  ModelPair(Branch student, PairMode mode) : student_(std::move(student)), mode_(mode) {
    if (mode_ == PairMode::student_teacher) teacher_ = student_;
  }
  ModelPair(Branch student, Branch teacher)
      : student_(std::move(student)), teacher_(std::move(teacher)), mode_(PairMode::student_teacher) {}

  PairMode mode() const { return mode_; }
  Branch& student() { return student_; }
  const Branch& student() const { return student_; }
  const Branch& teacher() const { return teacher_ ? *teacher_ : student_; }
  Branch& teacher_mut() {
    SSPSLAB_CHECK(teacher_.has_value(), "symmetric pair has no separate teacher");
    return *teacher_;
  }

 private:
  Branch student_;
  std::optional<Branch> teacher_;
  PairMode mode_ = PairMode::symmetric;
};

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adam
  double weight_decay = 0.0;
  std::uint64_t steps = 0;
  std::vector<Matrix> first;   // sgd velocity / adam m
  std::vector<Matrix> second;  // adam v

  void init(const std::vector<const Matrix*>& params) {
    first.clear();
    second.clear();
    for (const auto* p : params) {
      first.push_back(Matrix::Zero(p->rows(), p->cols()));
      if (kind == OptimizerKind::adam) second.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
    steps = 0;
  }
};

/// One update. Weight decay is added to the gradient (L2); non-finite
/// gradients abort before any parameter is touched.
inline void optimizer_step(OptimizerState& st, const std::vector<Matrix*>& params,
                           const std::vector<Matrix>& grads, double lr) {
  SSPSLAB_CHECK(params.size() == grads.size(), "parameter/gradient count mismatch");
  if (st.first.empty()) {
    std::vector<const Matrix*> cp(params.begin(), params.end());
    st.init(cp);
  }
  SSPSLAB_CHECK(st.first.size() == params.size(), "optimizer buffer count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    SSPSLAB_CHECK(params[i]->rows() == grads[i].rows() && params[i]->cols() == grads[i].cols() &&
                      st.first[i].rows() == grads[i].rows() && st.first[i].cols() == grads[i].cols(),
                  "shape mismatch for parameter tensor " << i);
    SSPSLAB_CHECK(grads[i].allFinite(), "non-finite gradient in parameter tensor " << i);
  }
  ++st.steps;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = *params[i];
    Matrix g = grads[i];
    if (st.weight_decay != 0.0) g += st.weight_decay * p;
    if (st.kind == OptimizerKind::sgd_momentum) {
      st.first[i] = st.momentum * st.first[i] + g;
      p -= lr * st.first[i];
    } else {
      st.first[i] = st.beta1 * st.first[i] + (1 - st.beta1) * g;
      st.second[i] = st.beta2 * st.second[i] + (1 - st.beta2) * g.cwiseAbs2();
      const double c1 = 1 - std::pow(st.beta1, static_cast<double>(st.steps));
      const double c2 = 1 - std::pow(st.beta2, static_cast<double>(st.steps));
      p.array() -= lr * (st.first[i].array() / c1) /
                   ((st.second[i].array() / c2).sqrt() + st.eps);
    }
  }
}

/// teacher <- m * teacher + (1 - m) * student
inline void ema_update(Branch& teacher, const Branch& student, double m) {
  SSPSLAB_CHECK(m >= 0.0 && m <= 1.0, "EMA momentum " << m << " outside [0, 1]");
  auto tp = teacher.parameters();
  auto sp = student.parameters();
  SSPSLAB_CHECK(tp.size() == sp.size(), "teacher/student parameter count mismatch");
  for (std::size_t i = 0; i < tp.size(); ++i) {
    SSPSLAB_CHECK(tp[i]->rows() == sp[i]->rows() && tp[i]->cols() == sp[i]->cols(),
                  "teacher/student shape mismatch at tensor " << i);
    if (m == 1.0) continue;
    *tp[i] = m * *tp[i] + (1 - m) * *sp[i];
  }
}

enum class ScheduleKind { constant, step_decay, cosine_with_warmup, cosine_momentum };

struct Schedule {
  ScheduleKind kind = ScheduleKind::constant;
  double base = 0.0;
  double end = 0.0;            // cosine endpoints
  double decay_factor = 0.95;  // step_decay
  std::uint64_t decay_every = 5;
  std::uint64_t warmup_steps = 0;
  std::uint64_t total_steps = 1;
};

/// Value at `step`; steps past `total_steps` are clamped.
///
/// step_decay: base * decay_factor^floor(step / decay_every) (step counts epochs).
/// cosine_with_warmup: linear ramp 0 -> base over warmup_steps, then cosine
///   from base down to `end` at total_steps.
/// cosine_momentum: base + (end - base) * (1 - cos(pi t / T)) / 2.
inline double schedule_value(const Schedule& s, std::uint64_t step) {
  const std::uint64_t t = std::min(step, s.total_steps);
  switch (s.kind) {
    case ScheduleKind::constant:
      return s.base;
    case ScheduleKind::step_decay:
      return s.base * std::pow(s.decay_factor, static_cast<double>(t / std::max<std::uint64_t>(s.decay_every, 1)));
    case ScheduleKind::cosine_with_warmup: {
      if (t < s.warmup_steps)
        return s.base * static_cast<double>(t) / static_cast<double>(s.warmup_steps);
      const std::uint64_t span = s.total_steps > s.warmup_steps ? s.total_steps - s.warmup_steps : 0;
      if (span == 0) return s.base;
      const double frac = static_cast<double>(t - s.warmup_steps) / static_cast<double>(span);
      return s.end + (s.base - s.end) * 0.5 * (1 + std::cos(std::numbers::pi * frac));
    }
    case ScheduleKind::cosine_momentum: {
      if (s.total_steps == 0) return s.end;
      const double frac = static_cast<double>(t) / static_cast<double>(s.total_steps);
      if (t == s.total_steps) return s.end;
      return s.base + (s.end - s.base) * 0.5 * (1 - std::cos(std::numbers::pi * frac));
    }
  }
  return s.base;
}

}  // namespace sspslab
