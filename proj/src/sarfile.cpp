#include "sargraph/sarfile.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

static_assert(std::endian::native == std::endian::little,
              "file and wire formats assume a little-endian host");

namespace sargraph {

namespace {

template <class T>
void put(std::vector<std::byte>& out, T v) {
  const std::size_t n = out.size();
  out.resize(n + sizeof(T));
  std::memcpy(out.data() + n, &v, sizeof(T));
}

template <class T>
T get(std::span<const std::byte> in, std::size_t& off) {
  require_input(off + sizeof(T) <= in.size(), "sarf: truncated file");
  T v;
  std::memcpy(&v, in.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

constexpr std::uint32_t kSarfMagic = 0x46524153u;  // "SARF"

}  // namespace

Matd SarfTensor::as_f64() const {
  Matd m(rows, cols);
  const std::size_t n = std::size_t(rows) * std::size_t(cols);
  if (dtype == DType::F32) {
    std::vector<float> tmp(n);
    std::memcpy(tmp.data(), data.data(), n * 4);
    for (std::size_t i = 0; i < n; ++i) m.data()[i] = double(tmp[i]);
  } else {
    std::memcpy(m.data(), data.data(), n * 8);
  }
  return m;
}

SarfTensor sarf_from_f64(const Matd& m, DType dt) {
  SarfTensor t;
  t.rows = m.rows();
  t.cols = m.cols();
  t.dtype = dt;
  const std::size_t n = std::size_t(m.size());
  if (dt == DType::F32) {
    t.data.resize(n * 4);
    std::vector<float> tmp(n);
    for (std::size_t i = 0; i < n; ++i) tmp[i] = float(m.data()[i]);
    std::memcpy(t.data.data(), tmp.data(), n * 4);
  } else {
    t.data.resize(n * 8);
    std::memcpy(t.data.data(), m.data(), n * 8);
  }
  return t;
}

std::vector<std::byte> encode_sarf(const SarfTensor& t) {
  std::vector<std::byte> out;
  put<std::uint32_t>(out, kSarfMagic);
  put<std::uint32_t>(out, 1u);
  put<std::uint64_t>(out, std::uint64_t(t.rows));
  put<std::uint64_t>(out, std::uint64_t(t.cols));
  put<std::uint8_t>(out, std::uint8_t(t.dtype));
  const std::size_t expect = std::size_t(t.rows) * std::size_t(t.cols) * dtype_size(t.dtype);
  require_input(t.data.size() == expect, "sarf: payload size mismatch");
  out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

SarfTensor decode_sarf(std::span<const std::byte> bytes, std::size_t* consumed) {
  std::size_t off = 0;
  require_input(get<std::uint32_t>(bytes, off) == kSarfMagic, "sarf: bad magic");
  require_input(get<std::uint32_t>(bytes, off) == 1u, "sarf: unsupported version");
  SarfTensor t;
  t.rows = std::int64_t(get<std::uint64_t>(bytes, off));
  t.cols = std::int64_t(get<std::uint64_t>(bytes, off));
  const std::uint8_t dt = get<std::uint8_t>(bytes, off);
  require_input(dt <= 1, "sarf: bad dtype");
  t.dtype = DType(dt);
  const std::size_t n = std::size_t(t.rows) * std::size_t(t.cols) * dtype_size(t.dtype);
  require_input(off + n <= bytes.size(), "sarf: truncated payload");
  t.data.assign(bytes.begin() + std::ptrdiff_t(off), bytes.begin() + std::ptrdiff_t(off + n));
  if (consumed) *consumed = off + n;
  return t;
}

void write_sarf(const std::string& path, const SarfTensor& t) {
  std::ofstream out(path, std::ios::binary);
  require_input(bool(out), "cannot write: " + path);
  const auto bytes = encode_sarf(t);
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
}

SarfTensor read_sarf(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require_input(bool(in), "cannot open: " + path);
  std::vector<char> chars{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  std::vector<std::byte> raw(chars.size());
  std::memcpy(raw.data(), chars.data(), chars.size());
  return decode_sarf(raw);
}

std::vector<std::int32_t> read_labels(const std::string& path) {
  const SarfTensor t = read_sarf(path);
  require_input(t.cols == 1, "labels file must have cols=1");
  const Matd m = t.as_f64();
  std::vector<std::int32_t> out(static_cast<std::size_t>(t.rows));
  for (std::int64_t i = 0; i < t.rows; ++i) out[size_t(i)] = std::int32_t(m(i, 0));
  return out;
}

void write_labels(const std::string& path, std::span<const std::int32_t> labels) {
  Matd m(std::int64_t(labels.size()), 1);
  for (std::size_t i = 0; i < labels.size(); ++i) m(std::int64_t(i), 0) = double(labels[i]);
  write_sarf(path, sarf_from_f64(m, DType::F32));
}

std::vector<NodeId> read_node_set(const std::string& path) {
  std::ifstream in(path);
  require_input(bool(in), "cannot open node set: " + path);
  std::vector<NodeId> out;
  std::string line;
  while (std::getline(in, line)) {
    std::size_t pos = line.find_first_not_of(" \t\r");
    if (pos == std::string::npos || line[pos] == '#') continue;
    out.push_back(std::stoll(line));
  }
  return out;
}

void write_node_set(const std::string& path, std::span<const NodeId> nodes) {
  std::ofstream out(path);
  require_input(bool(out), "cannot write node set: " + path);
  for (NodeId v : nodes) out << v << '\n';
}

void write_archive(const std::string& path, const TensorArchive& a) {
  std::vector<std::byte> blobs;
  std::ostringstream index;
  index << "SARC 1\n" << a.size() << '\n';
  for (const auto& [name, tensor] : a) {
    const auto enc = encode_sarf(tensor);
    index << name << ' ' << blobs.size() << ' ' << enc.size() << '\n';
    blobs.insert(blobs.end(), enc.begin(), enc.end());
  }
  index << "---\n";
  std::ofstream out(path, std::ios::binary);
  require_input(bool(out), "cannot write archive: " + path);
  const std::string hdr = index.str();
  out.write(hdr.data(), std::streamsize(hdr.size()));
  out.write(reinterpret_cast<const char*>(blobs.data()), std::streamsize(blobs.size()));
}

TensorArchive read_archive(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require_input(bool(in), "cannot open archive: " + path);
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  in >> magic >> version >> count;
  require_input(magic == "SARC" && version == 1, "bad archive header");
  struct Row {
    std::string name;
    std::size_t off, size;
  };
  std::vector<Row> rows(count);
  for (auto& r : rows) in >> r.name >> r.off >> r.size;
  std::string sep;
  in >> sep;
  require_input(sep == "---", "bad archive separator");
  in.get();  // trailing newline
  std::vector<char> blobs{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  TensorArchive a;
  for (const auto& r : rows) {
    require_input(r.off + r.size <= blobs.size(), "archive blob out of range");
    std::vector<std::byte> raw(r.size);
    std::memcpy(raw.data(), blobs.data() + r.off, r.size);
    a[r.name] = decode_sarf(raw);
  }
  return a;
}

}  // namespace sargraph
