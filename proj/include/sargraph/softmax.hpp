#pragma once

#include "sargraph/common.hpp"

#include <limits>

namespace sargraph {

// Streaming softmax-weighted aggregation. The true maximum is unknown while
// chunks arrive, so a running maximum is kept; when it grows, the accumulated
// numerator and denominator are rescaled by exp(old_max - new_max). The final
// numerator/denominator ratio equals the exact stable softmax result no matter
// how the logit stream was chunked or ordered.

/// One fold step for a single (logit, value-row) pair.
/// num and value may be Eigen row expressions of equal width.
template <class NumRow, class ValueRow>
inline void softmax_fold_one(double& max_logit, double& denom, NumRow&& num, double logit,
                             const ValueRow& value) {
  if (logit <= max_logit) {
    const double w = std::exp(logit - max_logit);
    denom += w;
    num += w * value;
  } else {
    const double r =
        max_logit == -std::numeric_limits<double>::infinity() ? 0.0 : std::exp(max_logit - logit);
    denom = denom * r + 1.0;
    num = (num * r + value).eval();
    max_logit = logit;
  }
}

/// Accumulators for one destination (one softmax group).
struct RunningSoftmaxState {
  double max_logit = -std::numeric_limits<double>::infinity();
  double denom = 0.0;
  RowVecd numer;

  explicit RunningSoftmaxState(Eigen::Index width = 0) : numer(RowVecd::Zero(width)) {}

  bool finite() const {
    return std::isfinite(denom) && numer.allFinite() &&
           (denom == 0.0 || std::isfinite(max_logit));
  }
};

/// Fold a chunk of logits with matching value rows into the state.
inline void running_softmax_fold(RunningSoftmaxState& s, std::span<const double> logits,
                                 const Matd& values) {
  require_input(std::int64_t(logits.size()) == values.rows(), "softmax fold: chunk size mismatch");
  require_input(values.cols() == s.numer.cols(), "softmax fold: value width mismatch");
  for (std::size_t i = 0; i < logits.size(); ++i)
    softmax_fold_one(s.max_logit, s.denom, s.numer, logits[i], values.row(std::int64_t(i)));
}

/// numerator / denominator; zero row when nothing was folded.
inline RowVecd running_softmax_finalize(const RunningSoftmaxState& s) {
  if (s.denom == 0.0) return RowVecd::Zero(s.numer.cols());
  return s.numer / s.denom;
}

}  // namespace sargraph
