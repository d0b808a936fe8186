#pragma once

// Self-supervised positive sampling: memory queues, spherical k-means over
// reference representations, and pseudo-positive selection from the anchor's
// cluster or one of its nearest neighboring clusters.

#include "sspslab/common.hpp"

#include <algorithm>
#include <deque>
#include <map>
#include <numeric>
#include <optional>
#include <unordered_map>
#include <vector>

namespace sspslab {

/// Per-utterance vector store with FIFO eviction. Re-inserting an id
/// overwrites its vector and keeps its position in the eviction order.
template <class Tag>
class MemoryQueue {
 public:
  MemoryQueue() = default;
  MemoryQueue(std::size_t capacity, Index dim) : capacity_(capacity), dim_(dim) {
    SSPSLAB_CHECK(capacity >= 1, "queue capacity must be >= 1");
  }

  void enqueue(UttId id, const RowVector& v) {
    SSPSLAB_CHECK(v.size() == dim_, "queue expects dimension " << dim_ << ", got " << v.size());
    auto it = entries_.find(id);
    if (it != entries_.end()) {
      it->second = v;
      return;
    }
    if (order_.size() == capacity_) {
      entries_.erase(order_.front());
      order_.pop_front();
    }
    order_.push_back(id);
    entries_.emplace(id, v);
  }

  const RowVector* find(UttId id) const {
    auto it = entries_.find(id);
    return it == entries_.end() ? nullptr : &it->second;
  }
  bool contains(UttId id) const { return entries_.count(id) != 0; }

  std::size_t size() const { return order_.size(); }
  std::size_t capacity() const { return capacity_; }
  Index dim() const { return dim_; }
  bool empty() const { return order_.empty(); }
  void clear() {
    order_.clear();
    entries_.clear();
  }

  /// Ids oldest first.
  const std::deque<UttId>& ids() const { return order_; }

  /// Stored vectors as rows, oldest first.
  Matrix matrix() const {
    Matrix m(static_cast<Index>(order_.size()), dim_);
    Index r = 0;
    for (UttId id : order_) m.row(r++) = entries_.at(id);
    return m;
  }

 private:
  std::size_t capacity_ = 1;
  Index dim_ = 0;
  std::deque<UttId> order_;
  std::unordered_map<UttId, RowVector> entries_;
};

struct ReferenceTag {};
struct PositiveTag {};
/// Reference representations of un-augmented views; capacity N.
using ReferenceQueue = MemoryQueue<ReferenceTag>;
/// Detached positive embeddings; capacity K.
using PositiveQueue = MemoryQueue<PositiveTag>;

struct SspsConfig {
  Index K = 0;  // 0 resolves to the corpus recording count
  Index M = 1;
  int kmeans_iterations = 10;
  std::int64_t enable_epoch = 40;
  std::uint64_t seed = 3;
};

struct ClusterState {
  Index K = 0;
  Index M = 0;
  std::vector<UttId> ids;           // clustered utterances, queue order
  std::vector<Index> assignment;    // per entry of ids
  Matrix centroids;                 // K x D, unit rows
  std::vector<std::vector<UttId>> members;   // S_c
  std::vector<std::vector<Index>> neighbors; // C_k, descending similarity
  std::vector<double> objective_trace;       // mean cosine after each assignment
  std::unordered_map<UttId, Index> position; // id -> index into ids

  std::optional<Index> cluster_of(UttId id) const {
    auto it = position.find(id);
    if (it == position.end()) return std::nullopt;
    return assignment[static_cast<std::size_t>(it->second)];
  }
};

namespace detail {

inline double assign_points(const Matrix& points, const Matrix& centroids,
                            std::vector<Index>& assignment) {
  const Matrix sims = points * centroids.transpose();
  double total = 0.0;
  for (Index i = 0; i < points.rows(); ++i) {
    Index best = 0;
    for (Index k = 1; k < sims.cols(); ++k)
      if (sims(i, k) > sims(i, best)) best = k;
    assignment[static_cast<std::size_t>(i)] = best;
    total += sims(i, best);
  }
  return total / static_cast<double>(points.rows());
}

// Empty clusters take the member of the largest cluster least similar to that
// cluster's centroid; then centroids become normalized member means.
inline void update_centroids(const Matrix& points, Matrix& centroids,
                             std::vector<Index>& assignment) {
  const Index k_count = centroids.rows();
  std::vector<Index> counts(static_cast<std::size_t>(k_count), 0);
  for (Index a : assignment) ++counts[static_cast<std::size_t>(a)];
  for (Index k = 0; k < k_count; ++k) {
    if (counts[static_cast<std::size_t>(k)] != 0) continue;
    const auto largest = static_cast<Index>(
        std::max_element(counts.begin(), counts.end()) - counts.begin());
    if (counts[static_cast<std::size_t>(largest)] < 2) continue;
    Index far = -1;
    double far_sim = 0.0;
    for (Index i = 0; i < points.rows(); ++i) {
      if (assignment[static_cast<std::size_t>(i)] != largest) continue;
      const double s = points.row(i).dot(centroids.row(largest));
      if (far < 0 || s < far_sim) {
        far = i;
        far_sim = s;
      }
    }
    assignment[static_cast<std::size_t>(far)] = k;
    --counts[static_cast<std::size_t>(largest)];
    ++counts[static_cast<std::size_t>(k)];
  }
  Matrix sums = Matrix::Zero(k_count, points.cols());
  for (Index i = 0; i < points.rows(); ++i) sums.row(assignment[static_cast<std::size_t>(i)]) += points.row(i);
  for (Index k = 0; k < k_count; ++k) {
    const double n = sums.row(k).norm();
    if (n > 0.0) centroids.row(k) = sums.row(k) / n;
  }
}

}  // namespace detail

/// C_k: the M clusters with the largest centroid cosine to k, j != k,
/// descending, ties broken by ascending index.
inline std::vector<std::vector<Index>> neighbor_clusters(const ClusterState& state, Index m) {
  const Index k_count = state.centroids.rows();
  SSPSLAB_CHECK(m >= 0 && (m == 0 || m < k_count),
                "M = " << m << " must be below K = " << k_count);
  std::vector<std::vector<Index>> out(static_cast<std::size_t>(k_count));
  if (m == 0) return out;
  const Matrix sims = state.centroids * state.centroids.transpose();
  for (Index k = 0; k < k_count; ++k) {
    std::vector<Index> others;
    for (Index j = 0; j < k_count; ++j)
      if (j != k) others.push_back(j);
    std::partial_sort(others.begin(), others.begin() + m, others.end(), [&](Index a, Index b) {
      if (sims(k, a) != sims(k, b)) return sims(k, a) > sims(k, b);
      return a < b;
    });
    others.resize(static_cast<std::size_t>(m));
    out[static_cast<std::size_t>(k)] = std::move(others);
  }
  return out;
}

/// Spherical k-means over the queue contents (fixed iteration count).
inline ClusterState cluster(const ReferenceQueue& queue, const SspsConfig& cfg) {
  SSPSLAB_CHECK(!queue.empty(), "cannot cluster an empty reference queue");
  SSPSLAB_CHECK(cfg.K >= 1 && static_cast<std::size_t>(cfg.K) <= queue.size(),
                "K = " << cfg.K << " exceeds the " << queue.size() << " stored representations");
  ClusterState st;
  st.K = cfg.K;
  st.ids.assign(queue.ids().begin(), queue.ids().end());
  const Matrix points = normalize_rows(queue.matrix());
  const Index n = points.rows();

  Rng rng(cfg.seed);
  std::vector<Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (Index k = 0; k < cfg.K; ++k)
    std::swap(perm[static_cast<std::size_t>(k)],
              perm[static_cast<std::size_t>(k) + rng.index(static_cast<std::size_t>(n - k))]);
  st.centroids.resize(cfg.K, points.cols());
  for (Index k = 0; k < cfg.K; ++k) st.centroids.row(k) = points.row(perm[static_cast<std::size_t>(k)]);

  st.assignment.assign(static_cast<std::size_t>(n), 0);
  st.objective_trace.push_back(detail::assign_points(points, st.centroids, st.assignment));
  for (int it = 0; it < cfg.kmeans_iterations; ++it) {
    detail::update_centroids(points, st.centroids, st.assignment);
    st.objective_trace.push_back(detail::assign_points(points, st.centroids, st.assignment));
  }

  st.members.assign(static_cast<std::size_t>(cfg.K), {});
  for (Index i = 0; i < n; ++i) {
    st.members[static_cast<std::size_t>(st.assignment[static_cast<std::size_t>(i)])].push_back(
        st.ids[static_cast<std::size_t>(i)]);
    st.position.emplace(st.ids[static_cast<std::size_t>(i)], i);
  }
  return st;
}

/// Cluster to draw the pseudo-positive from: the anchor's own (M = 0) or a
/// uniformly chosen neighbor.
inline Index choose_cluster(UttId id, const ClusterState& state, Index m, Rng& rng) {
  const auto c = state.cluster_of(id);
  SSPSLAB_CHECK(c.has_value(), "utterance " << id << " is not assigned to a cluster");
  if (m == 0) return *c;
  const auto& nb = state.neighbors[static_cast<std::size_t>(*c)];
  SSPSLAB_CHECK(static_cast<Index>(nb.size()) == m,
                "cluster state holds " << nb.size() << " neighbors, M = " << m);
  return nb[rng.index(nb.size())];
}

struct PseudoPositive {
  bool fallback = true;
  UttId source = -1;
  Index cluster = -1;
  RowVector embedding;
};

/// Draws pos(i) uniformly from S_c \ {i} for the chosen cluster c and looks it
/// up in the positive queue. Fallback when there is no candidate or the
/// candidate's embedding is not queued.
inline PseudoPositive sample_pseudo_positive(UttId id, const ClusterState& state,
                                             const PositiveQueue& queue, Index m, Rng& rng) {
  PseudoPositive out;
  if (!state.cluster_of(id)) return out;
  out.cluster = choose_cluster(id, state, m, rng);
  const auto& members = state.members[static_cast<std::size_t>(out.cluster)];
  const bool self_in = std::find(members.begin(), members.end(), id) != members.end();
  const std::size_t candidates = members.size() - (self_in ? 1 : 0);
  if (candidates == 0) return out;
  std::size_t pick = rng.index(candidates);
  for (UttId u : members) {
    if (u == id) continue;
    if (pick-- == 0) {
      out.source = u;
      break;
    }
  }
  if (const RowVector* e = queue.find(out.source)) {
    out.embedding = *e;
    out.fallback = false;
  }
  return out;
}

/// Clusters Q-hat at the start of an SSPS epoch; nullopt before enable_epoch.
inline std::optional<ClusterState> ssps_epoch_begin(const ReferenceQueue& queue,
                                                    const SspsConfig& cfg, std::int64_t epoch) {
  if (epoch < cfg.enable_epoch) return std::nullopt;
  ClusterState st = cluster(queue, cfg);
  st.M = cfg.M;
  st.neighbors = neighbor_clusters(st, cfg.M);
  return st;
}

struct ClusterDiagnostics {
  Index K = 0, M = 0;
  std::size_t attempts = 0, fallbacks = 0;
  std::map<std::size_t, std::size_t> size_histogram;  // cluster size -> count
  double speaker_purity = 0.0;
  // Share of accepted pseudo-positives from the anchor's speaker / recording.
  double same_speaker_rate = 0.0;
  double same_recording_rate = 0.0;

  double fallback_rate() const {
    return attempts ? static_cast<double>(fallbacks) / static_cast<double>(attempts) : 0.0;
  }
};

/// Size histogram and majority-speaker purity. `speaker_of` maps an
/// utterance id to its hidden speaker; evaluation use only.
template <class SpeakerOf>
ClusterDiagnostics describe_clusters(const ClusterState& st, SpeakerOf&& speaker_of) {
  ClusterDiagnostics d;
  d.K = st.K;
  d.M = st.M;
  std::size_t majority = 0, total = 0;
  for (const auto& mem : st.members) {
    ++d.size_histogram[mem.size()];
    std::map<Index, std::size_t> counts;
    for (UttId u : mem) ++counts[speaker_of(u)];
    std::size_t best = 0;
    for (const auto& [spk, c] : counts) best = std::max(best, c);
    majority += best;
    total += mem.size();
  }
  d.speaker_purity = total ? static_cast<double>(majority) / static_cast<double>(total) : 0.0;
  return d;
}

}  // namespace sspslab
