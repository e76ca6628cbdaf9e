#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sargraph {

using NodeId = std::int64_t;

/// Row-major dense matrix; rows index nodes, cols index features.
template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matf = Mat<float>;
using Matd = Mat<double>;
using Vecd = Eigen::VectorXd;
using RowVecd = Eigen::RowVectorXd;

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

template <class Scalar>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  return std::is_same_v<Scalar, float> ? DType::F32 : DType::F64;
}

inline std::size_t dtype_size(DType dt) { return dt == DType::F32 ? 4 : 8; }

// Error taxonomy; the CLI maps these to exit codes 2 (input) and 3 (runtime).
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ProtocolError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct TimeoutError : ProtocolError {
  using ProtocolError::ProtocolError;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require_input(bool ok, const std::string& msg) {
  if (!ok) throw InputError(msg);
}
inline void require_proto(bool ok, const std::string& msg) {
  if (!ok) throw ProtocolError(msg);
}

#ifndef NDEBUG
template <class Derived>
void debug_check_finite(const Eigen::MatrixBase<Derived>& m, const char* where) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite value in ") + where);
}
#else
template <class Derived>
void debug_check_finite(const Eigen::MatrixBase<Derived>&, const char*) {}
#endif

// Neumaier-compensated addition. Keeps streamed sums insensitive to how the
// term sequence is grouped across shard blocks and workers.
inline void neumaier_add(double& sum, double& comp, double x) {
  const double t = sum + x;
  if (std::abs(sum) >= std::abs(x))
    comp += (sum - t) + x;
  else
    comp += (x - t) + sum;
  sum = t;
}

/// Compensated row-block accumulator for f64 reductions over shard blocks.
class CompensatedRows {
 public:
  CompensatedRows() = default;
  CompensatedRows(Eigen::Index rows, Eigen::Index cols)
      : sum_(Matd::Zero(rows, cols)), comp_(Matd::Zero(rows, cols)) {}

  void add_row(Eigen::Index r, const RowVecd& x) {
    for (Eigen::Index c = 0; c < x.size(); ++c) neumaier_add(sum_(r, c), comp_(r, c), x(c));
  }
  template <class Expr>
  void add_row_expr(Eigen::Index r, const Expr& x) {
    for (Eigen::Index c = 0; c < sum_.cols(); ++c) neumaier_add(sum_(r, c), comp_(r, c), x(c));
  }
  Matd value() const { return sum_ + comp_; }
  Eigen::Index rows() const { return sum_.rows(); }
  Eigen::Index cols() const { return sum_.cols(); }

 private:
  Matd sum_, comp_;
};

}  // namespace sargraph
