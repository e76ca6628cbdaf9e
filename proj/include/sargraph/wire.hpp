#pragma once

#include "sargraph/common.hpp"

#include <vector>

namespace sargraph {

enum class MsgKind : std::uint8_t {
  FetchRequest = 0,
  FeatureChunk = 1,
  GradChunk = 2,
  AllReduceChunk = 3,
  Barrier = 4,
  Abort = 5,
};

/// Frame layout, little-endian throughout:
///   u32 magic "SARW" | u8 kind | u8 src | u8 dst | u8 dtype |
///   u32 layer | u32 reserved | u64 payload length | payload.
/// Tensor payloads are u64 rows, u64 cols, then row-major values; a
/// FetchRequest payload is u64 count, u64 0, then count u64 row indices.
struct WireMessage {
  MsgKind kind = MsgKind::Barrier;
  std::uint8_t src = 0;
  std::uint8_t dst = 0;
  DType dtype = DType::F32;
  std::uint32_t layer = 0;
  std::vector<std::byte> payload;
};

std::vector<std::byte> encode_frame(const WireMessage& m);
/// Throws ProtocolError on malformed frames.
WireMessage decode_frame(std::span<const std::byte> bytes, std::size_t* consumed = nullptr);

std::vector<std::byte> pack_indices(std::span<const std::uint64_t> rows);
std::vector<std::uint64_t> unpack_indices(std::span<const std::byte> payload);

std::vector<std::byte> pack_tensor(std::int64_t rows, std::int64_t cols, DType dt, const void* data);
template <class Scalar>
std::vector<std::byte> pack_matrix(const Mat<Scalar>& m) {
  return pack_tensor(m.rows(), m.cols(), dtype_of<Scalar>(), m.data());
}

struct TensorView {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::span<const std::byte> data;
};
/// Validates that the payload length matches rows*cols*dtype size.
TensorView unpack_tensor(std::span<const std::byte> payload, DType dt);

template <class Scalar>
Mat<Scalar> tensor_to_matrix(const TensorView& v) {
  Mat<Scalar> m(v.rows, v.cols);
  std::memcpy(m.data(), v.data.data(), v.data.size());
  return m;
}

/// Data bytes of a tensor payload (what the communication ledgers count).
inline std::uint64_t tensor_data_bytes(std::int64_t rows, std::int64_t cols, DType dt) {
  return std::uint64_t(rows) * std::uint64_t(cols) * dtype_size(dt);
}

}  // namespace sargraph
