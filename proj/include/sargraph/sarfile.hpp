#pragma once

#include "sargraph/common.hpp"

#include <map>
#include <string>
#include <vector>

namespace sargraph {

/// Binary tensor file: magic "SARF", u32 LE version=1, u64 rows, u64 cols,
/// u8 dtype (0=f32, 1=f64), then row-major values little-endian.
struct SarfTensor {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  DType dtype = DType::F32;
  std::vector<std::byte> data;  // raw little-endian values

  Matd as_f64() const;
  template <class Scalar>
  Mat<Scalar> as() const {
    const Matd d = as_f64();
    return d.template cast<Scalar>();
  }
};

SarfTensor sarf_from_f64(const Matd& m, DType dt);
template <class Scalar>
SarfTensor sarf_from(const Mat<Scalar>& m) {
  return sarf_from_f64(m.template cast<double>(), dtype_of<Scalar>());
}

void write_sarf(const std::string& path, const SarfTensor& t);
SarfTensor read_sarf(const std::string& path);

std::vector<std::byte> encode_sarf(const SarfTensor& t);
SarfTensor decode_sarf(std::span<const std::byte> bytes, std::size_t* consumed = nullptr);

/// Labels: SARF with cols=1, f32 class ids; -1 marks unlabeled.
std::vector<std::int32_t> read_labels(const std::string& path);
void write_labels(const std::string& path, std::span<const std::int32_t> labels);

/// Node-set text file: one node id per line, '#' comments.
std::vector<NodeId> read_node_set(const std::string& path);
void write_node_set(const std::string& path, std::span<const NodeId> nodes);

/// Named-tensor archive with a text index followed by concatenated SARF blobs.
using TensorArchive = std::map<std::string, SarfTensor>;
void write_archive(const std::string& path, const TensorArchive& a);
TensorArchive read_archive(const std::string& path);

}  // namespace sargraph
