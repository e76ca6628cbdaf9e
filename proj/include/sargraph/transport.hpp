#pragma once

#include "sargraph/ledger.hpp"
#include "sargraph/wire.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <chrono>
#include <thread>
#include <vector>

namespace sargraph {

struct TransportOptions {
  double timeout_seconds = 120.0;
};

namespace detail {
/// Timed predicate wait on a wall-clock deadline (coarse failure detection
/// only; also keeps the wait on the pthread path thread sanitizers observe).
template <class Pred>
bool cv_wait_for(std::condition_variable& cv, std::unique_lock<std::mutex>& lk, double seconds,
                 Pred pred) {
  const auto deadline = std::chrono::system_clock::now() +
                        std::chrono::duration_cast<std::chrono::system_clock::duration>(
                            std::chrono::duration<double>(seconds));
  return cv.wait_until(lk, deadline, std::move(pred));
}
}  // namespace detail

enum class FetchPhase { Forward, Backward };

struct Payload {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  DType dt = DType::F32;
  std::vector<std::byte> data;

  template <class Scalar>
  Mat<Scalar> as() const {
    require_proto(dt == dtype_of<Scalar>(), "payload dtype mismatch");
    Mat<Scalar> m(rows, cols);
    std::memcpy(m.data(), data.data(), data.size());
    return m;
  }
};

/// Point-to-point and collective communication against immutable per-layer
/// feature snapshots. Feature payloads travel in the run's scalar dtype;
/// error and allreduce payloads are always f64. The attached CommLedger
/// counts tensor data bytes only.
class Transport {
 public:
  virtual ~Transport() = default;
  virtual int rank() const = 0;
  virtual int world_size() const = 0;

  void attach_comm_ledger(CommLedger* c) { comm_ = c; }

  virtual void publish_snapshot(std::uint32_t tag, DType dt, std::int64_t rows, std::int64_t cols,
                                const void* data) = 0;
  virtual void clear_snapshots() = 0;

  /// Blocking fetch of the given peer-local rows of the peer's snapshot.
  /// Rows come back in request order. Waits for publication up to the timeout.
  virtual Payload fetch_rows(int peer, std::uint32_t tag, std::span<const std::uint64_t> rows,
                             FetchPhase phase) = 0;

  virtual void send_grad(int peer, std::uint32_t tag, const Matd& rows) = 0;
  /// Next queued error chunk for this tag, any sender: (sender, rows).
  virtual std::pair<int, Matd> recv_grad_any(std::uint32_t tag) = 0;

  /// In-place sum across all workers, identical result bytes everywhere
  /// (rank-ascending reduction at a single point, then broadcast).
  virtual void allreduce_sum(std::span<double> buf) = 0;
  virtual void barrier() = 0;

  /// Best-effort notification that this worker is going down; peers blocked
  /// on this job fail promptly instead of running into their timeouts.
  virtual void broadcast_abort() {}

  /// Epoch boundary: drop the published snapshots, then synchronize so no
  /// fetch for the new epoch can observe a stale snapshot on a slow peer.
  void epoch_begin() {
    clear_snapshots();
    barrier();
  }

 protected:
  void count_fetch(FetchPhase phase, std::uint64_t bytes) {
    if (!comm_) return;
    if (phase == FetchPhase::Forward)
      comm_->fwd_feature_bytes += bytes;
    else
      comm_->bwd_feature_bytes += bytes;
  }
  void count_grad_send(std::uint64_t bytes) {
    if (comm_) comm_->bwd_gradient_bytes += bytes;
  }
  void count_allreduce(std::uint64_t bytes) {
    if (comm_) comm_->allreduce_bytes += bytes;
  }
  CommLedger* comm_ = nullptr;
};

template <class Scalar>
void publish_matrix(Transport& t, std::uint32_t tag, const Mat<Scalar>& m) {
  t.publish_snapshot(tag, dtype_of<Scalar>(), m.rows(), m.cols(), m.data());
}

/// Collect one error chunk from every flagged sender for this tag. A chunk
/// from an unexpected sender or a second chunk from the same sender is a
/// protocol error; a missing sender surfaces as the transport's timeout.
inline std::map<int, Matd> recv_error_chunks(Transport& tp, std::uint32_t tag,
                                             const std::vector<char>& expect_from) {
  std::size_t expected = 0;
  for (char c : expect_from) expected += c ? 1 : 0;
  std::map<int, Matd> got;
  while (got.size() < expected) {
    auto [src, rows] = tp.recv_grad_any(tag);
    require_proto(src >= 0 && src < int(expect_from.size()) && expect_from[std::size_t(src)],
                  "recv_errors: chunk from unexpected sender " + std::to_string(src));
    require_proto(got.count(src) == 0,
                  "recv_errors: duplicate chunk from sender " + std::to_string(src));
    got.emplace(src, std::move(rows));
  }
  return got;
}

// ---------------------------------------------------------------------------
// In-process loopback: N workers as threads sharing a hub. Deterministic and
// byte-identical to the TCP transport for identical requests.

class LoopbackTransport;

class LoopbackHub {
 public:
  explicit LoopbackHub(int n, TransportOptions opt = {});
  ~LoopbackHub() = default;

  int world_size() const { return int(workers_.size()); }
  std::unique_ptr<LoopbackTransport> transport(int rank);

 private:
  friend class LoopbackTransport;
  struct Snapshot {
    DType dt;
    std::int64_t rows, cols;
    std::vector<std::byte> data;
  };
  struct PerWorker {
    std::mutex mu;
    std::condition_variable cv;
    std::map<std::uint32_t, std::shared_ptr<const Snapshot>> snapshots;
    std::deque<WireMessage> inbox;
  };
  std::vector<std::unique_ptr<PerWorker>> workers_;
  TransportOptions opt_;
  std::atomic<bool> aborted_{false};

  // reusable rendezvous state for barrier/allreduce
  std::mutex coll_mu_;
  std::condition_variable coll_cv_;
  int arrived_ = 0, departed_ = 0;
  std::uint64_t generation_ = 0;
  bool round_done_ = false;
  std::vector<double*> bufs_;
  std::size_t buf_len_ = 0;
  std::vector<double> result_;
};

class LoopbackTransport : public Transport {
 public:
  LoopbackTransport(LoopbackHub* hub, int rank) : hub_(hub), rank_(rank) {}
  int rank() const override { return rank_; }
  int world_size() const override { return hub_->world_size(); }

  void publish_snapshot(std::uint32_t tag, DType dt, std::int64_t rows, std::int64_t cols,
                        const void* data) override;
  void clear_snapshots() override;
  Payload fetch_rows(int peer, std::uint32_t tag, std::span<const std::uint64_t> rows,
                     FetchPhase phase) override;
  void send_grad(int peer, std::uint32_t tag, const Matd& rows) override;
  std::pair<int, Matd> recv_grad_any(std::uint32_t tag) override;
  void allreduce_sum(std::span<double> buf) override;
  void barrier() override;

  void abort_all();
  void broadcast_abort() override { abort_all(); }

 private:
  void rendezvous(double* buf, std::size_t len);
  LoopbackHub* hub_;
  int rank_;
};

// ---------------------------------------------------------------------------
// Length-prefixed TCP. One listening port per worker, taken from a rank file
// of "rank host:port" lines. One service thread per inbound connection.

struct RankEntry {
  std::string host;
  std::uint16_t port = 0;
};
std::vector<RankEntry> parse_rankfile(const std::string& path);

class TcpTransport : public Transport {
 public:
  TcpTransport(int rank, std::vector<RankEntry> peers, TransportOptions opt = {});
  ~TcpTransport() override;

  int rank() const override { return rank_; }
  int world_size() const override { return int(peers_.size()); }

  void publish_snapshot(std::uint32_t tag, DType dt, std::int64_t rows, std::int64_t cols,
                        const void* data) override;
  void clear_snapshots() override;
  Payload fetch_rows(int peer, std::uint32_t tag, std::span<const std::uint64_t> rows,
                     FetchPhase phase) override;
  void send_grad(int peer, std::uint32_t tag, const Matd& rows) override;
  std::pair<int, Matd> recv_grad_any(std::uint32_t tag) override;
  void allreduce_sum(std::span<double> buf) override;
  void barrier() override;
  void broadcast_abort() override;

 private:
  struct Snapshot {
    DType dt;
    std::int64_t rows, cols;
    std::vector<std::byte> data;
  };

  void listener_main();
  void reader_main(int fd);
  int out_fd(int peer);
  void send_frame_locked(int peer, const WireMessage& m);
  WireMessage request_response(int peer, const WireMessage& req);
  WireMessage take_inbox(MsgKind kind, std::uint32_t tag, int from /* -1 = any */);
  std::shared_ptr<const Snapshot> wait_snapshot(std::uint32_t tag);

  int rank_;
  std::vector<RankEntry> peers_;
  TransportOptions opt_;

  std::mutex snap_mu_;
  std::condition_variable snap_cv_;
  std::map<std::uint32_t, std::shared_ptr<const Snapshot>> snapshots_;

  std::mutex inbox_mu_;
  std::condition_variable inbox_cv_;
  std::deque<WireMessage> inbox_;
  std::atomic<bool> aborted_{false};

  std::mutex out_mu_;
  std::vector<int> out_fds_;
  std::vector<std::unique_ptr<std::mutex>> out_locks_;

  int listen_fd_ = -1;
  std::atomic<bool> stop_{false};
  std::thread listener_;
  std::mutex readers_mu_;
  std::vector<std::thread> readers_;
  std::vector<int> inbound_fds_;

  std::uint32_t barrier_seq_ = 0;
  std::uint32_t allreduce_seq_ = 0;
};

}  // namespace sargraph
