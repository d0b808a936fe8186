#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <istream>
#include <ostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace sspslab {

/// Row-major so that batch items are contiguous rows.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

/// Utterance identifier, 0-based position in the corpus.
using UttId = std::int64_t;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define SSPSLAB_CHECK(cond, msg)                                  \
  do {                                                            \
    if (!(cond)) {                                                \
      std::ostringstream sspslab_os_;                             \
      sspslab_os_ << msg;                                         \
      throw ::sspslab::Error(sspslab_os_.str());                  \
    }                                                             \
  } while (0)

// Seeded generator with a serializable state. The normal distribution is kept
// alongside the engine because libstdc++ caches one of the two polar draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }

  /// Uniform integer in [0, n).
  std::size_t index(std::size_t n) {
    std::uniform_int_distribution<std::size_t> d(0, n - 1);
    return d(engine_);
  }

  std::mt19937_64& engine() { return engine_; }

  std::string state() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_ << ' ' << uniform_;
    return os.str();
  }

  void set_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_ >> normal_ >> uniform_;
    SSPSLAB_CHECK(!is.fail(), "corrupt rng state");
  }

  bool operator==(const Rng& o) const { return state() == o.state(); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// Derives an independent stream seed (splitmix64 finalizer).
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Returns a copy of `m` with l2-normalized rows; throws on a zero row.
inline Matrix normalize_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) {
    const double n = m.row(i).norm();
    SSPSLAB_CHECK(n > 0.0, "zero-norm row " << i);
    out.row(i) = m.row(i) / n;
  }
  return out;
}

}  // namespace sspslab
