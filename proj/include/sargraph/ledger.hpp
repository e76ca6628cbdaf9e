#pragma once

#include "sargraph/common.hpp"

#include <array>
#include <mutex>
#include <string>

namespace sargraph {

enum class MemTag : int { LocalFeatures = 0, RemoteFeatures, EdgeCoefficients, Activations };
constexpr int kNumMemTags = 4;
const char* mem_tag_name(MemTag t);

/// Tracks live feature blocks and tagged byte counts. The owning partition
/// counts as one permanently resident block, so the bound is 2 blocks without
/// prefetch and 3 with a prefetched block in flight.
class MemoryLedger {
 public:
  void reset_epoch();

  void block_acquired(std::size_t bytes);
  void block_freed(std::size_t bytes);
  void alloc(MemTag tag, std::size_t bytes);
  void free(MemTag tag, std::size_t bytes);

  /// Fused/blockwise attention calls this after each block; a non-zero
  /// edge-coefficient balance is recorded as a violation.
  void end_of_block_check();

  std::int64_t resident_remote_blocks() const;
  std::int64_t peak_resident() const;
  std::size_t live_bytes(MemTag tag) const;
  std::size_t live_bytes_total() const;
  std::size_t peak_bytes() const;
  std::size_t peak_bytes(MemTag tag) const;
  std::int64_t edge_coeff_violations() const;

 private:
  mutable std::mutex mu_;
  std::int64_t resident_ = 1;  // the local partition
  std::int64_t peak_resident_ = 1;
  std::array<std::size_t, kNumMemTags> live_{};
  std::array<std::size_t, kNumMemTags> peak_by_tag_{};
  std::size_t live_total_ = 0;
  std::size_t peak_total_ = 0;
  std::int64_t edge_coeff_violations_ = 0;
};

/// Payload bytes moved per phase within one epoch (tensor data only; framing,
/// row/col headers and fetch requests are not counted).
struct CommLedger {
  std::uint64_t fwd_feature_bytes = 0;
  std::uint64_t bwd_feature_bytes = 0;
  std::uint64_t bwd_gradient_bytes = 0;
  std::uint64_t allreduce_bytes = 0;

  void reset() { *this = CommLedger{}; }
  std::uint64_t total_message_bytes() const {
    return fwd_feature_bytes + bwd_feature_bytes + bwd_gradient_bytes;
  }
};

struct LedgerReport {
  bool pass = false;
  std::int64_t peak_resident = 0;
  std::int64_t limit = 0;
  std::int64_t leaked_blocks = 0;
  std::string message;
};

/// Epoch-end residency check: peak <= 2 without prefetch, <= 3 with, counting
/// the local partition as one block; any block still live counts as a leak.
LedgerReport ledger_check(const MemoryLedger& ledger, bool prefetch);

}  // namespace sargraph
