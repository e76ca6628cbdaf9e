#pragma once

#include "sargraph/common.hpp"

#include <cstdint>

namespace sargraph {

// Counter-based RNG: a stateless mix of (seed, stream, counters) so any draw
// can be reproduced from its coordinates alone. Multi-worker runs use the
// global node id as a coordinate, making masks independent of partitioning.

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

inline std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  return detail::splitmix64(h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2)));
}

struct RngStream {
  std::uint64_t state;
  explicit RngStream(std::uint64_t seed) : state(detail::splitmix64(seed)) {}
  RngStream with(std::uint64_t v) const { return RngStream(hash_combine(state, v)); }
  std::uint64_t at(std::uint64_t counter) const { return detail::splitmix64(state ^ (counter * 0xd1342543de82ef95ULL + 1)); }
  /// Uniform in [0, 1).
  double uniform(std::uint64_t counter) const { return double(at(counter) >> 11) * 0x1.0p-53; }
};

// Stream tags, one per independent use of the generator.
enum : std::uint64_t {
  kStreamInit = 1,
  kStreamDropout = 2,
  kStreamPartition = 3,
  kStreamData = 4,
};

/// Glorot-uniform fill with limit sqrt(6 / (fan_in + fan_out)).
template <class Scalar>
void glorot_fill(Mat<Scalar>& w, std::uint64_t seed, std::uint64_t param_tag,
                 Eigen::Index fan_in, Eigen::Index fan_out) {
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  RngStream rs = RngStream(seed).with(kStreamInit).with(param_tag);
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j)
      w(i, j) = Scalar((2.0 * rs.uniform(std::uint64_t(i) * std::uint64_t(w.cols()) + std::uint64_t(j)) - 1.0) * limit);
}

/// Keep-decision for dropout of element (global node row, col).
inline bool dropout_keep(std::uint64_t seed, std::uint64_t epoch, std::uint64_t stage,
                         std::int64_t global_row, Eigen::Index col, double p) {
  RngStream rs = RngStream(seed).with(kStreamDropout).with(epoch).with(stage).with(std::uint64_t(global_row));
  return rs.uniform(std::uint64_t(col)) >= p;
}

}  // namespace sargraph
