#include "sargraph/ledger.hpp"

#include <sstream>

namespace sargraph {

const char* mem_tag_name(MemTag t) {
  switch (t) {
    case MemTag::LocalFeatures: return "local-features";
    case MemTag::RemoteFeatures: return "remote-features";
    case MemTag::EdgeCoefficients: return "edge-coefficients";
    case MemTag::Activations: return "activations";
  }
  return "?";
}

void MemoryLedger::reset_epoch() {
  std::lock_guard lk(mu_);
  peak_resident_ = resident_;
  peak_total_ = live_total_;
  peak_by_tag_ = live_;
  edge_coeff_violations_ = 0;
}

void MemoryLedger::block_acquired(std::size_t bytes) {
  std::lock_guard lk(mu_);
  resident_++;
  peak_resident_ = std::max(peak_resident_, resident_);
  live_[int(MemTag::RemoteFeatures)] += bytes;
  peak_by_tag_[int(MemTag::RemoteFeatures)] =
      std::max(peak_by_tag_[int(MemTag::RemoteFeatures)], live_[int(MemTag::RemoteFeatures)]);
  live_total_ += bytes;
  peak_total_ = std::max(peak_total_, live_total_);
}

void MemoryLedger::block_freed(std::size_t bytes) {
  std::lock_guard lk(mu_);
  resident_--;
  live_[int(MemTag::RemoteFeatures)] -= bytes;
  live_total_ -= bytes;
}

void MemoryLedger::alloc(MemTag tag, std::size_t bytes) {
  std::lock_guard lk(mu_);
  live_[int(tag)] += bytes;
  peak_by_tag_[int(tag)] = std::max(peak_by_tag_[int(tag)], live_[int(tag)]);
  live_total_ += bytes;
  peak_total_ = std::max(peak_total_, live_total_);
}

void MemoryLedger::free(MemTag tag, std::size_t bytes) {
  std::lock_guard lk(mu_);
  live_[int(tag)] -= bytes;
  live_total_ -= bytes;
}

void MemoryLedger::end_of_block_check() {
  std::lock_guard lk(mu_);
  if (live_[int(MemTag::EdgeCoefficients)] != 0) edge_coeff_violations_++;
}

std::int64_t MemoryLedger::resident_remote_blocks() const {
  std::lock_guard lk(mu_);
  return resident_ - 1;
}
std::int64_t MemoryLedger::peak_resident() const {
  std::lock_guard lk(mu_);
  return peak_resident_;
}
std::size_t MemoryLedger::live_bytes(MemTag tag) const {
  std::lock_guard lk(mu_);
  return live_[int(tag)];
}
std::size_t MemoryLedger::live_bytes_total() const {
  std::lock_guard lk(mu_);
  return live_total_;
}
std::size_t MemoryLedger::peak_bytes() const {
  std::lock_guard lk(mu_);
  return peak_total_;
}
std::size_t MemoryLedger::peak_bytes(MemTag tag) const {
  std::lock_guard lk(mu_);
  return peak_by_tag_[int(tag)];
}
std::int64_t MemoryLedger::edge_coeff_violations() const {
  std::lock_guard lk(mu_);
  return edge_coeff_violations_;
}

LedgerReport ledger_check(const MemoryLedger& ledger, bool prefetch) {
  LedgerReport r;
  r.limit = prefetch ? 3 : 2;
  r.peak_resident = ledger.peak_resident();
  r.leaked_blocks = ledger.resident_remote_blocks();
  r.pass = r.peak_resident <= r.limit && r.leaked_blocks == 0;
  std::ostringstream os;
  os << (r.pass ? "pass" : "FAIL") << ": peak_resident=" << r.peak_resident << " limit=" << r.limit
     << " leaked_blocks=" << r.leaked_blocks;
  r.message = os.str();
  return r;
}

}  // namespace sargraph
