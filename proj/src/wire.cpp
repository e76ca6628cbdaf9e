#include "sargraph/wire.hpp"

#include <cstring>

namespace sargraph {

namespace {

constexpr std::uint32_t kWireMagic = 0x57524153u;  // "SARW"

template <class T>
void put(std::vector<std::byte>& out, T v) {
  const std::size_t n = out.size();
  out.resize(n + sizeof(T));
  std::memcpy(out.data() + n, &v, sizeof(T));
}

template <class T>
T get(std::span<const std::byte> in, std::size_t& off) {
  require_proto(off + sizeof(T) <= in.size(), "wire: truncated frame");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

std::vector<std::byte> encode_frame(const WireMessage& m) {
  std::vector<std::byte> out;
  out.reserve(24 + m.payload.size());
  put<std::uint32_t>(out, kWireMagic);
  put<std::uint8_t>(out, std::uint8_t(m.kind));
  put<std::uint8_t>(out, m.src);
  put<std::uint8_t>(out, m.dst);
  put<std::uint8_t>(out, std::uint8_t(m.dtype));
  put<std::uint32_t>(out, m.layer);
  put<std::uint32_t>(out, 0u);  // reserved
  put<std::uint64_t>(out, std::uint64_t(m.payload.size()));
  out.insert(out.end(), m.payload.begin(), m.payload.end());
  return out;
}

WireMessage decode_frame(std::span<const std::byte> bytes, std::size_t* consumed) {
  std::size_t off = 0;
  require_proto(get<std::uint32_t>(bytes, off) == kWireMagic, "wire: bad magic");
  WireMessage m;
  const std::uint8_t kind = get<std::uint8_t>(bytes, off);
  require_proto(kind <= std::uint8_t(MsgKind::Abort), "wire: unknown message kind");
  m.kind = MsgKind(kind);
  m.src = get<std::uint8_t>(bytes, off);
  m.dst = get<std::uint8_t>(bytes, off);
  const std::uint8_t dt = get<std::uint8_t>(bytes, off);
  require_proto(dt <= 1, "wire: bad dtype");
  m.dtype = DType(dt);
  m.layer = get<std::uint32_t>(bytes, off);
  (void)get<std::uint32_t>(bytes, off);  // reserved
  const std::uint64_t len = get<std::uint64_t>(bytes, off);
  require_proto(off + len <= bytes.size(), "wire: truncated payload");
  m.payload.assign(bytes.begin() + std::ptrdiff_t(off), bytes.begin() + std::ptrdiff_t(off + len));
  if (consumed) *consumed = off + len;

  // Kind-specific payload validation.
  switch (m.kind) {
    case MsgKind::FetchRequest:
      (void)unpack_indices(m.payload);
      break;
    case MsgKind::FeatureChunk:
    case MsgKind::GradChunk:
    case MsgKind::AllReduceChunk:
      (void)unpack_tensor(m.payload, m.dtype);
      break;
    case MsgKind::Barrier:
    case MsgKind::Abort:
      require_proto(m.payload.empty(), "wire: control frame with payload");
      break;
  }
  return m;
}

std::vector<std::byte> pack_indices(std::span<const std::uint64_t> rows) {
  std::vector<std::byte> out;
  out.reserve(16 + rows.size() * 8);
  put<std::uint64_t>(out, std::uint64_t(rows.size()));
  put<std::uint64_t>(out, 0u);
  for (std::uint64_t r : rows) put<std::uint64_t>(out, r);
  return out;
}

std::vector<std::uint64_t> unpack_indices(std::span<const std::byte> payload) {
  std::size_t off = 0;
  const std::uint64_t n = get<std::uint64_t>(payload, off);
  const std::uint64_t z = get<std::uint64_t>(payload, off);
  require_proto(z == 0, "wire: malformed index payload");
  require_proto(payload.size() == 16 + n * 8, "wire: index payload length mismatch");
  std::vector<std::uint64_t> rows(n);
  std::memcpy(rows.data(), payload.data() + 16, n * 8);
  return rows;
}

std::vector<std::byte> pack_tensor(std::int64_t rows, std::int64_t cols, DType dt, const void* data) {
  std::vector<std::byte> out;
  const std::size_t nbytes = std::size_t(rows) * std::size_t(cols) * dtype_size(dt);
  out.reserve(16 + nbytes);
  put<std::uint64_t>(out, std::uint64_t(rows));
  put<std::uint64_t>(out, std::uint64_t(cols));
  const std::size_t n = out.size();
  out.resize(n + nbytes);
  std::memcpy(out.data() + n, data, nbytes);
  return out;
}

TensorView unpack_tensor(std::span<const std::byte> payload, DType dt) {
  std::size_t off = 0;
  TensorView v;
  v.rows = std::int64_t(get<std::uint64_t>(payload, off));
  v.cols = std::int64_t(get<std::uint64_t>(payload, off));
  const std::size_t nbytes = std::size_t(v.rows) * std::size_t(v.cols) * dtype_size(dt);
  require_proto(payload.size() == 16 + nbytes, "wire: tensor payload length mismatch");
  v.data = payload.subspan(16);
  return v;
}

}  // namespace sargraph
