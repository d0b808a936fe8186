#pragma once

// Checkpoint container.
//
//   SSPSLAB-CHECKPOINT v1
//   [[config]]
//   <serialized RunConfig>
//   [[state]]
//   key = value             (epoch, step counters, queue capacities, rng states)
//   [[arrays]]
//   <name> <rows> <cols>    (one line per array, declaration order)
//   [[end]]
//   <concatenated little-endian float64 data of every array, row-major>

#include "sspslab/common.hpp"
#include "sspslab/config.hpp"
#include "sspslab/nncore.hpp"
#include "sspslab/ssps.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace sspslab {

/// Everything needed to continue a run bit-exactly from an epoch boundary.
struct TrainingState {
  RunConfig config;
  std::int64_t epoch = 0;  // completed epochs
  std::uint64_t step = 0;  // completed optimizer steps
  ModelPair models;
  OptimizerState optimizer;
  RowVector center;  // DINO only
  ReferenceQueue reference_queue;
  PositiveQueue positive_queue;
  Rng data_rng, ssps_rng, supervised_rng;
};

/// Fresh encoder (+ projector for DINO) for a config.
inline Branch build_branch(const RunConfig& cfg, Rng& rng) {
  std::vector<LayerSpec> enc;
  for (Index h : cfg.encoder_hidden) enc.push_back({h, Activation::relu, true, false});
  enc.push_back({cfg.repr_dim, Activation::identity, true, false});
  Branch br;
  br.encoder = Mlp::build(cfg.corpus.input_dim, enc, rng);
  if (cfg.framework == Framework::dino) {
    std::vector<LayerSpec> proj;
    for (Index h : cfg.projector_hidden) proj.push_back({h, Activation::relu, true, false});
    proj.push_back({cfg.bottleneck_dim, Activation::identity, true, false});
    // Prototype layer applied to the l2-normalized bottleneck.
    proj.push_back({cfg.emb_dim, Activation::identity, false, true});
    br.projector = Mlp::build(cfg.repr_dim, proj, rng);
  }
  return br;
}

/// Initial state: parameters drawn from the run seed, empty queues.
inline TrainingState initial_state(const RunConfig& cfg) {
  cfg.validate();
  TrainingState st;
  st.config = cfg;
  Rng init_rng(derive_seed(cfg.seed, 0));
  Branch student = build_branch(cfg, init_rng);
  st.models = ModelPair(std::move(student), cfg.framework == Framework::simclr
                                                ? PairMode::symmetric
                                                : PairMode::student_teacher);
  st.optimizer.kind = cfg.optimizer;
  st.optimizer.momentum = cfg.momentum;
  st.optimizer.beta1 = cfg.beta1;
  st.optimizer.beta2 = cfg.beta2;
  st.optimizer.eps = cfg.adam_eps;
  st.optimizer.weight_decay = cfg.weight_decay;
  st.optimizer.init(std::as_const(st.models).student().parameters());
  if (cfg.framework == Framework::dino) st.center = RowVector::Zero(cfg.emb_dim);
  st.reference_queue = ReferenceQueue(static_cast<std::size_t>(cfg.corpus.n_utterances()), cfg.repr_dim);
  st.positive_queue = PositiveQueue(static_cast<std::size_t>(cfg.resolved_k()),
                                    st.models.student().embedding_dim());
  st.data_rng = Rng(derive_seed(cfg.seed, 1));
  st.ssps_rng = Rng(derive_seed(cfg.seed, 2));
  st.supervised_rng = Rng(derive_seed(cfg.seed, 3));
  return st;
}

namespace detail {

struct NamedArray {
  std::string name;
  Index rows = 0, cols = 0;
  std::vector<double> data;
};

inline NamedArray pack(std::string name, const Matrix& m) {
  NamedArray a{std::move(name), m.rows(), m.cols(), {}};
  a.data.assign(m.data(), m.data() + m.size());
  return a;
}

template <class Tag>
void pack_queue(std::vector<NamedArray>& out, const std::string& name, const MemoryQueue<Tag>& q) {
  Matrix ids(1, static_cast<Index>(q.size()));
  Index k = 0;
  for (UttId id : q.ids()) ids(0, k++) = static_cast<double>(id);
  out.push_back(pack(name + ".ids", ids));
  out.push_back(pack(name + ".vectors", q.matrix()));
}

inline std::vector<NamedArray> collect_arrays(const TrainingState& st) {
  std::vector<NamedArray> arrays;
  auto params = st.models.student().parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    arrays.push_back(pack("student." + std::to_string(i), *params[i]));
  if (st.models.mode() == PairMode::student_teacher) {
    auto tp = st.models.teacher().parameters();
    for (std::size_t i = 0; i < tp.size(); ++i)
      arrays.push_back(pack("teacher." + std::to_string(i), *tp[i]));
  }
  for (std::size_t i = 0; i < st.optimizer.first.size(); ++i)
    arrays.push_back(pack("optimizer.first." + std::to_string(i), st.optimizer.first[i]));
  for (std::size_t i = 0; i < st.optimizer.second.size(); ++i)
    arrays.push_back(pack("optimizer.second." + std::to_string(i), st.optimizer.second[i]));
  if (st.center.size()) arrays.push_back(pack("dino.center", st.center));
  pack_queue(arrays, "reference_queue", st.reference_queue);
  pack_queue(arrays, "positive_queue", st.positive_queue);
  return arrays;
}

inline void write_f64_le(std::ostream& os, const std::vector<double>& v) {
  for (double d : v) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
    unsigned char b[8];
    for (int k = 0; k < 8; ++k) b[k] = static_cast<unsigned char>(bits >> (8 * k));
    os.write(reinterpret_cast<const char*>(b), 8);
  }
}

inline std::vector<double> read_f64_le(std::istream& is, std::size_t n) {
  std::vector<double> v(n);
  for (auto& d : v) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    SSPSLAB_CHECK(is.gcount() == 8, "checkpoint truncated");
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(b[k]) << (8 * k);
    d = std::bit_cast<double>(bits);
  }
  return v;
}

}  // namespace detail

inline void save_checkpoint(const TrainingState& st, std::ostream& os) {
  RunConfig cfg = st.config;
  cfg.output_dir = "";  // location is not part of the state
  os << "SSPSLAB-CHECKPOINT v1\n[[config]]\n" << serialize_config(cfg) << "[[state]]\n";
  os << "epoch = " << st.epoch << '\n'
     << "step = " << st.step << '\n'
     << "optimizer_steps = " << st.optimizer.steps << '\n'
     << "reference_queue.capacity = " << st.reference_queue.capacity() << '\n'
     << "positive_queue.capacity = " << st.positive_queue.capacity() << '\n'
     << "rng.data = " << st.data_rng.state() << '\n'
     << "rng.ssps = " << st.ssps_rng.state() << '\n'
     << "rng.supervised = " << st.supervised_rng.state() << '\n';
  const auto arrays = detail::collect_arrays(st);
  os << "[[arrays]]\n";
  for (const auto& a : arrays) os << a.name << ' ' << a.rows << ' ' << a.cols << '\n';
  os << "[[end]]\n";
  for (const auto& a : arrays) detail::write_f64_le(os, a.data);
}

inline void save_checkpoint(const TrainingState& st, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  SSPSLAB_CHECK(os, "cannot open " << path << " for writing");
  save_checkpoint(st, os);
  SSPSLAB_CHECK(os.good(), "failed writing checkpoint " << path);
}

/// Reads a checkpoint, validating every array name and shape against a
/// freshly built state for the stored config.
inline TrainingState load_checkpoint(std::istream& is) {
  std::string line;
  std::getline(is, line);
  SSPSLAB_CHECK(line == "SSPSLAB-CHECKPOINT v1", "not a checkpoint (bad magic)");
  std::getline(is, line);
  SSPSLAB_CHECK(line == "[[config]]", "corrupt checkpoint header");
  std::string config_text;
  while (std::getline(is, line) && line != "[[state]]") config_text += line + '\n';
  SSPSLAB_CHECK(is, "corrupt checkpoint header: missing state block");
  std::map<std::string, std::string> state;
  while (std::getline(is, line) && line != "[[arrays]]") {
    const auto eq = line.find(" = ");
    SSPSLAB_CHECK(eq != std::string::npos, "corrupt checkpoint state line '" << line << "'");
    state[line.substr(0, eq)] = line.substr(eq + 3);
  }
  SSPSLAB_CHECK(is, "corrupt checkpoint header: missing arrays block");
  std::vector<detail::NamedArray> listed;
  while (std::getline(is, line) && line != "[[end]]") {
    std::istringstream ls(line);
    detail::NamedArray a;
    ls >> a.name >> a.rows >> a.cols;
    SSPSLAB_CHECK(!ls.fail() && a.rows >= 0 && a.cols >= 0, "corrupt array entry '" << line << "'");
    listed.push_back(std::move(a));
  }
  SSPSLAB_CHECK(is, "corrupt checkpoint header: missing end marker");

  std::istringstream cs(config_text);
  TrainingState st = initial_state(parse_config(cs));
  auto get = [&state](const std::string& k) -> const std::string& {
    auto it = state.find(k);
    SSPSLAB_CHECK(it != state.end(), "checkpoint state missing " << k);
    return it->second;
  };
  try {
    st.epoch = std::stoll(get("epoch"));
    st.step = std::stoull(get("step"));
    st.optimizer.steps = std::stoull(get("optimizer_steps"));
    st.reference_queue = ReferenceQueue(std::stoull(get("reference_queue.capacity")),
                                        st.reference_queue.dim());
    st.positive_queue = PositiveQueue(std::stoull(get("positive_queue.capacity")),
                                      st.positive_queue.dim());
  } catch (const std::logic_error&) {
    throw Error("corrupt checkpoint state values");
  }
  st.data_rng.set_state(get("rng.data"));
  st.ssps_rng.set_state(get("rng.ssps"));
  st.supervised_rng.set_state(get("rng.supervised"));

  std::map<std::string, Matrix> loaded;
  for (auto& a : listed) {
    const auto data = detail::read_f64_le(is, static_cast<std::size_t>(a.rows * a.cols));
    Matrix m(a.rows, a.cols);
    if (m.size()) std::memcpy(m.data(), data.data(), data.size() * sizeof(double));
    SSPSLAB_CHECK(loaded.emplace(a.name, std::move(m)).second, "duplicate array " << a.name);
  }
  SSPSLAB_CHECK(is.peek() == std::char_traits<char>::eof(), "trailing bytes after checkpoint data");

  auto take = [&loaded](const std::string& name, Matrix& dst, bool fixed_shape) {
    auto it = loaded.find(name);
    SSPSLAB_CHECK(it != loaded.end(), "checkpoint lacks array " << name);
    if (fixed_shape)
      SSPSLAB_CHECK(it->second.rows() == dst.rows() && it->second.cols() == dst.cols(),
                    "shape mismatch for " << name << ": checkpoint " << it->second.rows() << "x"
                                          << it->second.cols() << ", config " << dst.rows() << "x"
                                          << dst.cols());
    dst = std::move(it->second);
    loaded.erase(it);
  };
  auto sp = st.models.student().parameters();
  for (std::size_t i = 0; i < sp.size(); ++i) take("student." + std::to_string(i), *sp[i], true);
  if (st.models.mode() == PairMode::student_teacher) {
    auto tp = st.models.teacher_mut().parameters();
    for (std::size_t i = 0; i < tp.size(); ++i) take("teacher." + std::to_string(i), *tp[i], true);
  }
  for (std::size_t i = 0; i < st.optimizer.first.size(); ++i)
    take("optimizer.first." + std::to_string(i), st.optimizer.first[i], true);
  for (std::size_t i = 0; i < st.optimizer.second.size(); ++i)
    take("optimizer.second." + std::to_string(i), st.optimizer.second[i], true);
  if (st.center.size()) {
    Matrix c = st.center;
    take("dino.center", c, true);
    st.center = c;
  }
  auto restore_queue = [&](const std::string& name, auto& q) {
    Matrix ids, vecs;
    take(name + ".ids", ids, false);
    take(name + ".vectors", vecs, false);
    SSPSLAB_CHECK(ids.rows() <= 1 && ids.size() == vecs.rows() &&
                      (vecs.rows() == 0 || vecs.cols() == q.dim()) &&
                      static_cast<std::size_t>(vecs.rows()) <= q.capacity(),
                  "shape mismatch for " << name);
    for (Index k = 0; k < vecs.rows(); ++k) q.enqueue(static_cast<UttId>(ids(0, k)), vecs.row(k));
  };
  restore_queue("reference_queue", st.reference_queue);
  restore_queue("positive_queue", st.positive_queue);
  SSPSLAB_CHECK(loaded.empty(), "unexpected array " << loaded.begin()->first << " in checkpoint");
  return st;
}

inline TrainingState load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  SSPSLAB_CHECK(is, "cannot open checkpoint " << path);
  return load_checkpoint(is);
}

}  // namespace sspslab
