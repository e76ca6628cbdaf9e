#include "sargraph/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

namespace sargraph {

using Clock = std::chrono::steady_clock;

// ---------------------------------------------------------------------------
// Loopback

LoopbackHub::LoopbackHub(int n, TransportOptions opt) : opt_(opt) {
  require_input(n >= 1 && n <= 255, "loopback hub: world size out of range");
  workers_.resize(std::size_t(n));
  for (auto& w : workers_) w = std::make_unique<PerWorker>();
  bufs_.resize(std::size_t(n), nullptr);
}

std::unique_ptr<LoopbackTransport> LoopbackHub::transport(int rank) {
  require_input(rank >= 0 && rank < world_size(), "loopback: bad rank");
  return std::make_unique<LoopbackTransport>(this, rank);
}

void LoopbackTransport::publish_snapshot(std::uint32_t tag, DType dt, std::int64_t rows,
                                         std::int64_t cols, const void* data) {
  auto snap = std::make_shared<LoopbackHub::Snapshot>();
  snap->dt = dt;
  snap->rows = rows;
  snap->cols = cols;
  snap->data.resize(std::size_t(rows) * std::size_t(cols) * dtype_size(dt));
  std::memcpy(snap->data.data(), data, snap->data.size());
  auto& w = *hub_->workers_[std::size_t(rank_)];
  {
    std::lock_guard lk(w.mu);
    w.snapshots[tag] = std::move(snap);
  }
  w.cv.notify_all();
}

void LoopbackTransport::clear_snapshots() {
  auto& w = *hub_->workers_[std::size_t(rank_)];
  std::lock_guard lk(w.mu);
  w.snapshots.clear();
}

Payload LoopbackTransport::fetch_rows(int peer, std::uint32_t tag,
                                      std::span<const std::uint64_t> rows, FetchPhase phase) {
  require_proto(peer >= 0 && peer < world_size() && peer != rank_, "fetch_rows: bad peer");
  auto& w = *hub_->workers_[std::size_t(peer)];
  std::shared_ptr<const LoopbackHub::Snapshot> snap;
  {
    std::unique_lock lk(w.mu);
    const bool ok = detail::cv_wait_for(w.cv, lk, hub_->opt_.timeout_seconds,
                                        [&] { return hub_->aborted_.load() || w.snapshots.count(tag) > 0; });
    if (hub_->aborted_.load()) throw ProtocolError("fetch_rows: aborted");
    if (!ok) throw TimeoutError("fetch_rows: snapshot " + std::to_string(tag) + " never published by worker " +
                                std::to_string(peer));
    snap = w.snapshots.at(tag);
  }
  const std::size_t row_bytes = std::size_t(snap->cols) * dtype_size(snap->dt);
  Payload p;
  p.rows = std::int64_t(rows.size());
  p.cols = snap->cols;
  p.dt = snap->dt;
  p.data.resize(rows.size() * row_bytes);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require_proto(std::int64_t(rows[i]) < snap->rows, "fetch_rows: row index out of range");
    std::memcpy(p.data.data() + i * row_bytes, snap->data.data() + rows[i] * row_bytes, row_bytes);
  }
  count_fetch(phase, tensor_data_bytes(p.rows, p.cols, p.dt));
  return p;
}

void LoopbackTransport::send_grad(int peer, std::uint32_t tag, const Matd& rows) {
  require_proto(peer >= 0 && peer < world_size(), "send_grad: bad peer");
  WireMessage m;
  m.kind = MsgKind::GradChunk;
  m.src = std::uint8_t(rank_);
  m.dst = std::uint8_t(peer);
  m.dtype = DType::F64;
  m.layer = tag;
  m.payload = pack_matrix<double>(rows);
  auto& w = *hub_->workers_[std::size_t(peer)];
  {
    std::lock_guard lk(w.mu);
    w.inbox.push_back(std::move(m));
  }
  w.cv.notify_all();
  count_grad_send(tensor_data_bytes(rows.rows(), rows.cols(), DType::F64));
}

std::pair<int, Matd> LoopbackTransport::recv_grad_any(std::uint32_t tag) {
  auto& w = *hub_->workers_[std::size_t(rank_)];
  std::unique_lock lk(w.mu);
  auto find = [&]() -> std::deque<WireMessage>::iterator {
    for (auto it = w.inbox.begin(); it != w.inbox.end(); ++it)
      if (it->kind == MsgKind::GradChunk && it->layer == tag) return it;
    return w.inbox.end();
  };
  const bool ok = detail::cv_wait_for(w.cv, lk, hub_->opt_.timeout_seconds,
                                      [&] { return hub_->aborted_.load() || find() != w.inbox.end(); });
  if (hub_->aborted_.load()) throw ProtocolError("recv_grad_any: aborted");
  if (!ok) throw TimeoutError("recv_grad_any: no error chunk for tag " + std::to_string(tag));
  auto it = find();
  WireMessage m = std::move(*it);
  w.inbox.erase(it);
  lk.unlock();
  const TensorView v = unpack_tensor(m.payload, DType::F64);
  return {int(m.src), tensor_to_matrix<double>(v)};
}

void LoopbackTransport::rendezvous(double* buf, std::size_t len) {
  auto& h = *hub_;
  std::unique_lock lk(h.coll_mu_);
  const std::uint64_t gen = h.generation_;
  if (buf) {
    if (h.arrived_ == 0)
      h.buf_len_ = len;
    else
      require_proto(h.buf_len_ == len, "allreduce: buffer length differs across workers");
    h.bufs_[std::size_t(rank_)] = buf;
  }
  h.arrived_++;
  if (h.arrived_ == world_size()) {
    if (buf) {
      h.result_.assign(len, 0.0);
      for (int r = 0; r < world_size(); ++r)
        for (std::size_t i = 0; i < len; ++i) h.result_[i] += h.bufs_[std::size_t(r)][i];
    }
    h.round_done_ = true;
    h.coll_cv_.notify_all();
  } else {
    const bool ok = detail::cv_wait_for(h.coll_cv_, lk, h.opt_.timeout_seconds, [&] {
      return (h.round_done_ && h.generation_ == gen) || h.aborted_.load();
    });
    if (h.aborted_.load()) throw ProtocolError("collective: aborted");
    if (!ok) {
      h.aborted_.store(true);
      h.coll_cv_.notify_all();
      throw TimeoutError("collective: timed out waiting for peers");
    }
  }
  if (buf) std::copy(h.result_.begin(), h.result_.end(), buf);
  h.departed_++;
  if (h.departed_ == world_size()) {
    h.arrived_ = 0;
    h.departed_ = 0;
    h.round_done_ = false;
    h.generation_++;
    h.coll_cv_.notify_all();
  } else {
    h.coll_cv_.wait(lk, [&] { return h.generation_ != gen || h.aborted_.load(); });
    if (h.aborted_.load()) throw ProtocolError("collective: aborted");
  }
}

void LoopbackTransport::allreduce_sum(std::span<double> buf) {
  if (world_size() == 1) return;
  rendezvous(buf.data(), buf.size());
  count_allreduce(buf.size() * 8);
}

void LoopbackTransport::barrier() {
  if (world_size() == 1) return;
  rendezvous(nullptr, 0);
}

void LoopbackTransport::abort_all() {
  hub_->aborted_.store(true);
  for (auto& w : hub_->workers_) {
    std::lock_guard lk(w->mu);
    w->cv.notify_all();
  }
  hub_->coll_cv_.notify_all();
}

// ---------------------------------------------------------------------------
// TCP

std::vector<RankEntry> parse_rankfile(const std::string& path) {
  std::ifstream in(path);
  require_input(bool(in), "cannot open rank file: " + path);
  std::map<int, RankEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    std::size_t pos = line.find_first_not_of(" \t\r");
    if (pos == std::string::npos || line[pos] == '#') continue;
    std::istringstream ls(line);
    int rank;
    std::string hp;
    require_input(bool(ls >> rank >> hp), "rank file: malformed line: " + line);
    const std::size_t colon = hp.rfind(':');
    require_input(colon != std::string::npos, "rank file: expected host:port: " + hp);
    RankEntry e;
    e.host = hp.substr(0, colon);
    e.port = std::uint16_t(std::stoi(hp.substr(colon + 1)));
    entries[rank] = e;
  }
  std::vector<RankEntry> out;
  for (int r = 0; r < int(entries.size()); ++r) {
    require_input(entries.count(r) > 0, "rank file: missing rank " + std::to_string(r));
    out.push_back(entries[r]);
  }
  require_input(!out.empty(), "rank file: empty");
  return out;
}

namespace {

enum class IoStatus { Ok, Eof, Timeout, Error };

IoStatus write_all(int fd, const void* p, std::size_t n) {
  const char* c = static_cast<const char*>(p);
  while (n > 0) {
    const ssize_t w = ::send(fd, c, n, MSG_NOSIGNAL);
    if (w < 0) {
      if (errno == EINTR) continue;
      return IoStatus::Error;
    }
    c += w;
    n -= std::size_t(w);
  }
  return IoStatus::Ok;
}

IoStatus read_all(int fd, void* p, std::size_t n) {
  char* c = static_cast<char*>(p);
  while (n > 0) {
    const ssize_t r = ::recv(fd, c, n, 0);
    if (r == 0) return IoStatus::Eof;
    if (r < 0) {
      if (errno == EINTR) continue;
      if (errno == EAGAIN || errno == EWOULDBLOCK) return IoStatus::Timeout;
      return IoStatus::Error;
    }
    c += r;
    n -= std::size_t(r);
  }
  return IoStatus::Ok;
}

IoStatus read_frame(int fd, WireMessage& out) {
  std::vector<std::byte> buf(24);
  IoStatus s = read_all(fd, buf.data(), 24);
  if (s != IoStatus::Ok) return s;
  std::uint64_t len;
  std::memcpy(&len, buf.data() + 16, 8);
  buf.resize(24 + len);
  if (len > 0) {
    s = read_all(fd, buf.data() + 24, len);
    if (s != IoStatus::Ok) return s == IoStatus::Eof ? IoStatus::Error : s;
  }
  out = decode_frame(buf);
  return IoStatus::Ok;
}

void set_socket_options(int fd, double timeout_seconds) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  timeval tv;
  tv.tv_sec = long(timeout_seconds);
  tv.tv_usec = long((timeout_seconds - double(tv.tv_sec)) * 1e6);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
}

sockaddr_in resolve(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (host == "localhost") {
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  } else if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    hostent* he = ::gethostbyname(host.c_str());
    require_input(he && he->h_addrtype == AF_INET, "cannot resolve host: " + host);
    std::memcpy(&addr.sin_addr, he->h_addr_list[0], sizeof(addr.sin_addr));
  }
  return addr;
}

}  // namespace

TcpTransport::TcpTransport(int rank, std::vector<RankEntry> peers, TransportOptions opt)
    : rank_(rank), peers_(std::move(peers)), opt_(opt) {
  require_input(rank_ >= 0 && rank_ < int(peers_.size()), "tcp: rank out of range");
  require_input(peers_.size() <= 255, "tcp: world size out of range");
  out_fds_.assign(peers_.size(), -1);
  out_locks_.resize(peers_.size());
  for (auto& m : out_locks_) m = std::make_unique<std::mutex>();

  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  require_proto(listen_fd_ >= 0, "tcp: socket() failed");
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  addr.sin_port = htons(peers_[std::size_t(rank_)].port);
  require_proto(::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0,
                "tcp: cannot bind port " + std::to_string(peers_[std::size_t(rank_)].port));
  require_proto(::listen(listen_fd_, 64) == 0, "tcp: listen failed");
  listener_ = std::thread([this] { listener_main(); });
}

TcpTransport::~TcpTransport() {
  stop_.store(true);
  if (listen_fd_ >= 0) {
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
  }
  {
    std::lock_guard lk(readers_mu_);
    for (int fd : inbound_fds_) ::shutdown(fd, SHUT_RDWR);
  }
  if (listener_.joinable()) listener_.join();
  {
    std::lock_guard lk(readers_mu_);
    for (auto& t : readers_)
      if (t.joinable()) t.join();
    for (int fd : inbound_fds_) ::close(fd);
  }
  for (int fd : out_fds_)
    if (fd >= 0) ::close(fd);
}

void TcpTransport::listener_main() {
  while (!stop_.load()) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (stop_.load()) return;
      if (errno == EINTR) continue;
      return;
    }
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lk(readers_mu_);
    inbound_fds_.push_back(fd);
    readers_.emplace_back([this, fd] { reader_main(fd); });
  }
}

std::shared_ptr<const TcpTransport::Snapshot> TcpTransport::wait_snapshot(std::uint32_t tag) {
  std::unique_lock lk(snap_mu_);
  const bool ok = detail::cv_wait_for(snap_cv_, lk, opt_.timeout_seconds, [&] {
    return stop_.load() || aborted_.load() || snapshots_.count(tag) > 0;
  });
  if (!ok || stop_.load() || aborted_.load()) return nullptr;
  return snapshots_.at(tag);
}

void TcpTransport::reader_main(int fd) {
  while (!stop_.load()) {
    WireMessage m;
    const IoStatus s = read_frame(fd, m);
    if (s != IoStatus::Ok) return;  // peer closed or shutdown
    switch (m.kind) {
      case MsgKind::FetchRequest: {
        const auto rows = unpack_indices(m.payload);
        auto snap = wait_snapshot(m.layer);
        WireMessage resp;
        resp.src = std::uint8_t(rank_);
        resp.dst = m.src;
        resp.layer = m.layer;
        if (!snap) {
          resp.kind = MsgKind::Abort;
        } else {
          bool in_range = true;
          for (std::uint64_t r : rows)
            if (std::int64_t(r) >= snap->rows) in_range = false;
          if (!in_range) {
            resp.kind = MsgKind::Abort;
          } else {
            resp.kind = MsgKind::FeatureChunk;
            resp.dtype = snap->dt;
            const std::size_t row_bytes = std::size_t(snap->cols) * dtype_size(snap->dt);
            std::vector<std::byte> data(rows.size() * row_bytes);
            for (std::size_t i = 0; i < rows.size(); ++i)
              std::memcpy(data.data() + i * row_bytes, snap->data.data() + rows[i] * row_bytes,
                          row_bytes);
            resp.payload = pack_tensor(std::int64_t(rows.size()), snap->cols, snap->dt, data.data());
          }
        }
        const auto frame = encode_frame(resp);
        if (write_all(fd, frame.data(), frame.size()) != IoStatus::Ok) return;
        break;
      }
      case MsgKind::GradChunk:
      case MsgKind::AllReduceChunk:
      case MsgKind::Barrier: {
        {
          std::lock_guard lk(inbox_mu_);
          inbox_.push_back(std::move(m));
        }
        inbox_cv_.notify_all();
        break;
      }
      case MsgKind::Abort: {
        aborted_.store(true);
        inbox_cv_.notify_all();
        snap_cv_.notify_all();
        break;
      }
      default:
        return;
    }
  }
}

int TcpTransport::out_fd(int peer) {
  std::lock_guard lk(out_mu_);
  if (out_fds_[std::size_t(peer)] >= 0) return out_fds_[std::size_t(peer)];
  const sockaddr_in addr = resolve(peers_[std::size_t(peer)].host, peers_[std::size_t(peer)].port);
  const auto deadline = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                           std::chrono::duration<double>(opt_.timeout_seconds));
  for (;;) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    require_proto(fd >= 0, "tcp: socket() failed");
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof addr) == 0) {
      set_socket_options(fd, opt_.timeout_seconds);
      out_fds_[std::size_t(peer)] = fd;
      return fd;
    }
    ::close(fd);
    if (Clock::now() >= deadline)
      throw TimeoutError("tcp: cannot connect to rank " + std::to_string(peer));
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
  }
}

void TcpTransport::send_frame_locked(int peer, const WireMessage& m) {
  const int fd = out_fd(peer);
  const auto frame = encode_frame(m);
  std::lock_guard lk(*out_locks_[std::size_t(peer)]);
  require_proto(write_all(fd, frame.data(), frame.size()) == IoStatus::Ok,
                "tcp: send to rank " + std::to_string(peer) + " failed");
}

WireMessage TcpTransport::request_response(int peer, const WireMessage& req) {
  const int fd = out_fd(peer);
  const auto frame = encode_frame(req);
  std::lock_guard lk(*out_locks_[std::size_t(peer)]);
  require_proto(write_all(fd, frame.data(), frame.size()) == IoStatus::Ok,
                "tcp: request to rank " + std::to_string(peer) + " failed");
  WireMessage resp;
  const IoStatus s = read_frame(fd, resp);
  if (s == IoStatus::Timeout) throw TimeoutError("tcp: response timeout from rank " + std::to_string(peer));
  require_proto(s == IoStatus::Ok, "tcp: connection to rank " + std::to_string(peer) + " lost");
  return resp;
}

void TcpTransport::publish_snapshot(std::uint32_t tag, DType dt, std::int64_t rows,
                                    std::int64_t cols, const void* data) {
  auto snap = std::make_shared<Snapshot>();
  snap->dt = dt;
  snap->rows = rows;
  snap->cols = cols;
  snap->data.resize(std::size_t(rows) * std::size_t(cols) * dtype_size(dt));
  std::memcpy(snap->data.data(), data, snap->data.size());
  {
    std::lock_guard lk(snap_mu_);
    snapshots_[tag] = std::move(snap);
  }
  snap_cv_.notify_all();
}

void TcpTransport::clear_snapshots() {
  std::lock_guard lk(snap_mu_);
  snapshots_.clear();
}

Payload TcpTransport::fetch_rows(int peer, std::uint32_t tag, std::span<const std::uint64_t> rows,
                                 FetchPhase phase) {
  require_proto(peer >= 0 && peer < world_size() && peer != rank_, "fetch_rows: bad peer");
  WireMessage req;
  req.kind = MsgKind::FetchRequest;
  req.src = std::uint8_t(rank_);
  req.dst = std::uint8_t(peer);
  req.layer = tag;
  req.payload = pack_indices(rows);
  const WireMessage resp = request_response(peer, req);
  require_proto(resp.kind == MsgKind::FeatureChunk && resp.layer == tag,
                "fetch_rows: peer could not serve snapshot " + std::to_string(tag));
  const TensorView v = unpack_tensor(resp.payload, resp.dtype);
  require_proto(v.rows == std::int64_t(rows.size()), "fetch_rows: row count mismatch");
  Payload p;
  p.rows = v.rows;
  p.cols = v.cols;
  p.dt = resp.dtype;
  p.data.assign(v.data.begin(), v.data.end());
  count_fetch(phase, tensor_data_bytes(p.rows, p.cols, p.dt));
  return p;
}

void TcpTransport::send_grad(int peer, std::uint32_t tag, const Matd& rows) {
  WireMessage m;
  m.kind = MsgKind::GradChunk;
  m.src = std::uint8_t(rank_);
  m.dst = std::uint8_t(peer);
  m.dtype = DType::F64;
  m.layer = tag;
  m.payload = pack_matrix<double>(rows);
  send_frame_locked(peer, m);
  count_grad_send(tensor_data_bytes(rows.rows(), rows.cols(), DType::F64));
}

WireMessage TcpTransport::take_inbox(MsgKind kind, std::uint32_t tag, int from) {
  std::unique_lock lk(inbox_mu_);
  auto find = [&]() -> std::deque<WireMessage>::iterator {
    for (auto it = inbox_.begin(); it != inbox_.end(); ++it)
      if (it->kind == kind && it->layer == tag && (from < 0 || int(it->src) == from)) return it;
    return inbox_.end();
  };
  const bool ok = detail::cv_wait_for(inbox_cv_, lk, opt_.timeout_seconds,
                                      [&] { return aborted_.load() || find() != inbox_.end(); });
  require_proto(!aborted_.load(), "tcp: peer aborted");
  if (!ok) throw TimeoutError("tcp: timed out waiting for message kind " + std::to_string(int(kind)));
  auto it = find();
  WireMessage m = std::move(*it);
  inbox_.erase(it);
  return m;
}

std::pair<int, Matd> TcpTransport::recv_grad_any(std::uint32_t tag) {
  const WireMessage m = take_inbox(MsgKind::GradChunk, tag, -1);
  const TensorView v = unpack_tensor(m.payload, DType::F64);
  return {int(m.src), tensor_to_matrix<double>(v)};
}

void TcpTransport::allreduce_sum(std::span<double> buf) {
  if (world_size() == 1) return;
  const std::uint32_t seq = allreduce_seq_++;
  Matd mine = Eigen::Map<const Matd>(buf.data(), 1, std::int64_t(buf.size()));
  if (rank_ != 0) {
    WireMessage m;
    m.kind = MsgKind::AllReduceChunk;
    m.src = std::uint8_t(rank_);
    m.dst = 0;
    m.dtype = DType::F64;
    m.layer = seq;
    m.payload = pack_matrix<double>(mine);
    send_frame_locked(0, m);
    const WireMessage r = take_inbox(MsgKind::AllReduceChunk, seq, 0);
    const TensorView v = unpack_tensor(r.payload, DType::F64);
    require_proto(std::size_t(v.rows * v.cols) == buf.size(), "allreduce: size mismatch");
    std::memcpy(buf.data(), v.data.data(), v.data.size());
  } else {
    // rank-ascending reduction: acc starts from rank 0's contribution
    std::vector<Matd> contrib(static_cast<std::size_t>(world_size()));
    contrib[0] = mine;
    for (int r = 1; r < world_size(); ++r) {
      const WireMessage m = take_inbox(MsgKind::AllReduceChunk, seq, r);
      const TensorView v = unpack_tensor(m.payload, DType::F64);
      require_proto(std::size_t(v.rows * v.cols) == buf.size(),
                    "allreduce: buffer length differs across workers");
      contrib[std::size_t(r)] = tensor_to_matrix<double>(v);
    }
    Matd acc = contrib[0];
    for (int r = 1; r < world_size(); ++r) acc += contrib[std::size_t(r)];
    for (int r = 1; r < world_size(); ++r) {
      WireMessage m;
      m.kind = MsgKind::AllReduceChunk;
      m.src = 0;
      m.dst = std::uint8_t(r);
      m.dtype = DType::F64;
      m.layer = seq;
      m.payload = pack_matrix<double>(acc);
      send_frame_locked(r, m);
    }
    std::memcpy(buf.data(), acc.data(), buf.size() * 8);
  }
  count_allreduce(buf.size() * 8);
}

void TcpTransport::broadcast_abort() {
  WireMessage m;
  m.kind = MsgKind::Abort;
  m.src = std::uint8_t(rank_);
  for (int r = 0; r < world_size(); ++r) {
    if (r == rank_) continue;
    try {
      m.dst = std::uint8_t(r);
      send_frame_locked(r, m);
    } catch (...) {
      // peer may already be gone
    }
  }
}

void TcpTransport::barrier() {
  if (world_size() == 1) return;
  const std::uint32_t seq = barrier_seq_++;
  WireMessage m;
  m.kind = MsgKind::Barrier;
  m.src = std::uint8_t(rank_);
  m.layer = seq;
  if (rank_ != 0) {
    m.dst = 0;
    send_frame_locked(0, m);
    (void)take_inbox(MsgKind::Barrier, seq, 0);
  } else {
    for (int r = 1; r < world_size(); ++r) (void)take_inbox(MsgKind::Barrier, seq, r);
    for (int r = 1; r < world_size(); ++r) {
      m.dst = std::uint8_t(r);
      send_frame_locked(r, m);
    }
  }
}

}  // namespace sargraph
