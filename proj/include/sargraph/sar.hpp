#pragma once

#include "sargraph/aggregators.hpp"
#include "sargraph/mfg.hpp"
#include "sargraph/transport.hpp"

#include <condition_variable>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

namespace sargraph {

/// Sar frees every remote block (and its intermediates) as soon as the block
/// is folded, reconstructing what backward needs; VanillaDp retains fetched
/// blocks and materialized coefficients through the backward pass.
enum class RematPolicy { Sar, VanillaDp };

struct SarOptions {
  std::uint32_t layer_tag = 0;
  bool prefetch = false;
  RematPolicy policy = RematPolicy::Sar;
};

/// Per-layer communication metadata for one worker.
struct LayerCommPlan {
  std::int32_t my_part = 0;
  std::int64_t n_local = 0;
  std::vector<ShardBlock> blocks;                          // incoming, dst = my_part
  std::vector<std::vector<std::uint64_t>> fetch_rows;      // per q: peer-local indices
  std::vector<std::vector<std::int64_t>> incoming_rows;    // per q: my local rows of E_{q->p}
};

inline LayerCommPlan build_comm_plan(const Graph& g, const PartitionMap& pm, std::int32_t p,
                                     const std::vector<char>& active_dst = {}) {
  LayerCommPlan plan;
  plan.my_part = p;
  plan.blocks = build_shard_blocks(g, pm, p, active_dst);
  const auto local = local_index_of(pm);
  plan.n_local = 0;
  for (NodeId v = 0; v < pm.num_nodes(); ++v)
    if (pm.assignment[std::size_t(v)] == p) plan.n_local++;
  plan.fetch_rows.resize(plan.blocks.size());
  for (std::size_t q = 0; q < plan.blocks.size(); ++q) {
    plan.fetch_rows[q].reserve(plan.blocks[q].src_global_ids.size());
    for (NodeId v : plan.blocks[q].src_global_ids)
      plan.fetch_rows[q].push_back(std::uint64_t(local[std::size_t(v)]));
  }
  const auto outgoing = outgoing_src_ids(g, pm, p, active_dst);
  plan.incoming_rows.resize(outgoing.size());
  for (std::size_t q = 0; q < outgoing.size(); ++q)
    for (NodeId v : outgoing[q]) plan.incoming_rows[q].push_back(local[std::size_t(v)]);
  return plan;
}

namespace detail {

/// Depth-1 prefetch agent: one fetch in flight, handed over through a
/// capacity-1 slot. The next request is only posted once the previous block
/// has been consumed, so at most local + current + prefetched are resident.
template <class Scalar>
class PrefetchAgent {
 public:
  PrefetchAgent(Transport& tp, const LayerCommPlan& plan, FetchPhase phase, MemoryLedger* mem)
      : tp_(tp), plan_(plan), phase_(phase), mem_(mem) {
    worker_ = std::thread([this] { run(); });
  }
  ~PrefetchAgent() {
    {
      std::lock_guard lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  void post(int q) {
    std::lock_guard lk(mu_);
    pending_.push_back(q);
    cv_.notify_all();
  }

  Mat<Scalar> take(int q) {
    std::unique_lock lk(mu_);
    cv_.wait(lk, [&] { return error_ || (ready_ && ready_q_ == q); });
    if (error_) std::rethrow_exception(error_);
    Mat<Scalar> out = std::move(result_);
    ready_ = false;
    cv_.notify_all();
    return out;
  }

 private:
  void run() {
    for (;;) {
      int q;
      {
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return stop_ || !pending_.empty(); });
        if (stop_) return;
        q = pending_.front();
        pending_.pop_front();
      }
      try {
        const Payload p =
            tp_.fetch_rows(q, tag_, std::span<const std::uint64_t>(plan_.fetch_rows[std::size_t(q)]),
                           phase_);
        Mat<Scalar> m = p.as<Scalar>();
        if (mem_) mem_->block_acquired(std::size_t(m.size()) * sizeof(Scalar));
        std::unique_lock lk(mu_);
        cv_.wait(lk, [&] { return stop_ || !ready_; });
        if (stop_) return;
        result_ = std::move(m);
        ready_q_ = q;
        ready_ = true;
        cv_.notify_all();
      } catch (...) {
        std::lock_guard lk(mu_);
        error_ = std::current_exception();
        cv_.notify_all();
        return;
      }
    }
  }

 public:
  std::uint32_t tag_ = 0;

 private:
  Transport& tp_;
  const LayerCommPlan& plan_;
  FetchPhase phase_;
  MemoryLedger* mem_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<int> pending_;
  bool ready_ = false;
  int ready_q_ = -1;
  Mat<Scalar> result_;
  std::exception_ptr error_;
  bool stop_ = false;
};

template <class Scalar>
Mat<Scalar> gather_rows(const Mat<Scalar>& src, std::span<const std::uint64_t> rows) {
  Mat<Scalar> out(std::int64_t(rows.size()), src.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(std::int64_t(i)) = src.row(std::int64_t(rows[i]));
  return out;
}

}  // namespace detail

/// Forward aggregation for one layer on this worker: publish the local rows,
/// then sweep the shard blocks in fixed order q = 0..N-1 with no gradient
/// recording, fetching each remote block, folding it, and freeing it before
/// the block after next is fetched. Returns the state holding the finalized
/// aggregator output.
template <class Scalar>
std::shared_ptr<AggregationState<Scalar>> sar_forward(const Aggregator<Scalar>& agg,
                                                      std::shared_ptr<const Mat<Scalar>> local_z,
                                                      const LayerCommPlan& plan, Transport& tp,
                                                      MemoryLedger* mem, const SarOptions& opt) {
  const int me = tp.rank();
  require_input(local_z->rows() == plan.n_local, "sar_forward: local feature rows mismatch");
  auto st = std::make_shared<AggregationState<Scalar>>();
  st->saved_local_z = local_z;
  publish_matrix(tp, opt.layer_tag, *local_z);
  agg.begin_forward(*st, *local_z);

  const bool retain = opt.policy == RematPolicy::VanillaDp;
  if (retain) {
    st->retained_src.resize(plan.blocks.size());
    st->retained_remote_bytes.assign(plan.blocks.size(), 0);
  }

  std::vector<int> remote;
  for (int q = 0; q < int(plan.blocks.size()); ++q)
    if (q != me && !plan.blocks[std::size_t(q)].empty()) remote.push_back(q);

  std::optional<detail::PrefetchAgent<Scalar>> agent;
  std::size_t next_post = 0;
  if (opt.prefetch && !remote.empty()) {
    agent.emplace(tp, plan, FetchPhase::Forward, mem);
    agent->tag_ = opt.layer_tag;
    agent->post(remote[0]);
    next_post = 1;
  }

  for (int q = 0; q < int(plan.blocks.size()); ++q) {
    const ShardBlock& block = plan.blocks[std::size_t(q)];
    if (block.empty()) continue;
    if (q == me) {
      const Mat<Scalar> rows =
          detail::gather_rows(*local_z, std::span<const std::uint64_t>(plan.fetch_rows[std::size_t(q)]));
      agg.fold_block(*st, block, rows, mem);
      if (retain) st->retained_src[std::size_t(q)] = rows;
      if (mem && !retain) mem->end_of_block_check();
      continue;
    }
    Mat<Scalar> rows;
    if (agent) {
      rows = agent->take(q);
      if (next_post < remote.size()) agent->post(remote[next_post++]);
    } else {
      const Payload p = tp.fetch_rows(
          q, opt.layer_tag, std::span<const std::uint64_t>(plan.fetch_rows[std::size_t(q)]),
          FetchPhase::Forward);
      rows = p.as<Scalar>();
      if (mem) mem->block_acquired(std::size_t(rows.size()) * sizeof(Scalar));
    }
    const std::size_t bytes = std::size_t(rows.size()) * sizeof(Scalar);
    agg.fold_block(*st, block, rows, mem);
    if (retain) {
      st->retained_src[std::size_t(q)] = std::move(rows);
      st->retained_remote_bytes[std::size_t(q)] = bytes;
    } else {
      rows.resize(0, 0);  // delete Z_{q->p} before the next fetch
      if (mem) mem->block_freed(bytes);
    }
    if (mem && !retain) mem->end_of_block_check();
  }

  if (auto* ref = dynamic_cast<const GatReferenceAggregator<Scalar>*>(&agg))
    ref->finalize_blocks(*st, plan.blocks);
  else
    agg.finalize(*st);
  return st;
}

/// Backward for one layer: sweep the blocks again in fixed order, refetching
/// the remote inputs when the aggregator needs them (case 2), computing each
/// block error E_{p->q} and sending it to its owner, then accumulate the
/// incoming errors in ascending sender order into an f64 buffer. Returns the
/// loss gradient w.r.t. this worker's local z rows, ready to seed the tape.
template <class Scalar>
Matd sar_backward(const Aggregator<Scalar>& agg, AggregationState<Scalar>& st, const Matd& e_acc,
                  const LayerCommPlan& plan, Transport& tp, MemoryLedger* mem,
                  const SarOptions& opt) {
  const int me = tp.rank();
  if (!st.saved_local_z)
    throw std::logic_error("sar_backward: aggregation state is missing saved_local_z");
  require_input(e_acc.rows() == st.acc.rows() && e_acc.cols() == st.acc.cols(),
                "sar_backward: error shape does not match aggregator output");
  agg.begin_backward(st, e_acc);

  const bool case2 = agg.spec().needs_input_rematerialization;
  const bool retain = opt.policy == RematPolicy::VanillaDp;
  const Eigen::Index z_cols = st.saved_local_z->cols();
  CompensatedRows local_dst_grad(plan.n_local, z_cols);
  Matd local_src_err;

  std::vector<int> remote;
  for (int q = 0; q < int(plan.blocks.size()); ++q)
    if (q != me && !plan.blocks[std::size_t(q)].empty()) remote.push_back(q);

  std::optional<detail::PrefetchAgent<Scalar>> agent;
  std::size_t next_post = 0;
  if (opt.prefetch && case2 && !retain && !remote.empty()) {
    agent.emplace(tp, plan, FetchPhase::Backward, mem);
    agent->tag_ = opt.layer_tag;
    agent->post(remote[0]);
    next_post = 1;
  }

  for (int q = 0; q < int(plan.blocks.size()); ++q) {
    const ShardBlock& block = plan.blocks[std::size_t(q)];
    if (block.empty()) continue;
    Mat<Scalar> fetched;
    const Mat<Scalar>* src_rows = nullptr;
    std::size_t fetched_bytes = 0;
    if (case2) {
      if (q == me) {
        fetched = detail::gather_rows(*st.saved_local_z,
                                      std::span<const std::uint64_t>(plan.fetch_rows[std::size_t(q)]));
        src_rows = &fetched;
      } else if (retain) {
        src_rows = &st.retained_src[std::size_t(q)];
      } else {
        if (agent) {
          fetched = agent->take(q);
          if (next_post < remote.size()) agent->post(remote[next_post++]);
        } else {
          const Payload p = tp.fetch_rows(
              q, opt.layer_tag, std::span<const std::uint64_t>(plan.fetch_rows[std::size_t(q)]),
              FetchPhase::Backward);
          fetched = p.as<Scalar>();
          if (mem) mem->block_acquired(std::size_t(fetched.size()) * sizeof(Scalar));
        }
        require_proto(fetched.rows() == std::int64_t(block.src_global_ids.size()),
                      "sar_backward: fetched rows do not match block");
        fetched_bytes = std::size_t(fetched.size()) * sizeof(Scalar);
        src_rows = &fetched;
      }
    }

    Matd err = agg.backward_block(st, block, src_rows, local_dst_grad, mem);
    if (q == me)
      local_src_err = std::move(err);
    else
      tp.send_grad(q, opt.layer_tag, err);

    if (fetched_bytes) {
      fetched.resize(0, 0);
      if (mem) mem->block_freed(fetched_bytes);
    }
    if (retain && q != me) {
      // vanilla-dp frees its retained state as backward consumes it
      if (st.retained_remote_bytes[std::size_t(q)]) {
        st.retained_src[std::size_t(q)].resize(0, 0);
        if (mem) mem->block_freed(st.retained_remote_bytes[std::size_t(q)]);
        st.retained_remote_bytes[std::size_t(q)] = 0;
      }
    }
    if (retain && std::size_t(q) < st.retained_coeff_bytes.size() &&
        st.retained_coeff_bytes[std::size_t(q)]) {
      st.retained_logits[std::size_t(q)].reset();
      if (mem) mem->free(MemTag::EdgeCoefficients, st.retained_coeff_bytes[std::size_t(q)]);
      st.retained_coeff_bytes[std::size_t(q)] = 0;
    }
    if (mem && !retain) mem->end_of_block_check();
  }

  // Collect E_{q->p} from every worker whose aggregations touched our rows.
  std::vector<char> expect_from(plan.incoming_rows.size(), 0);
  for (int q = 0; q < int(plan.incoming_rows.size()); ++q)
    if (q != me && !plan.incoming_rows[std::size_t(q)].empty()) expect_from[std::size_t(q)] = 1;
  std::map<int, Matd> incoming = recv_error_chunks(tp, opt.layer_tag, expect_from);
  for (const auto& [src, rows] : incoming)
    require_proto(rows.rows() == std::int64_t(plan.incoming_rows[std::size_t(src)].size()) &&
                      rows.cols() == z_cols,
                  "sar_backward: error chunk shape mismatch");

  CompensatedRows e_p(plan.n_local, z_cols);
  const Matd dst_grad = local_dst_grad.value();
  for (int q = 0; q < int(plan.blocks.size()); ++q) {
    if (q == me) {
      if (local_src_err.size() > 0) {
        const auto& rows = plan.fetch_rows[std::size_t(q)];
        for (std::size_t k = 0; k < rows.size(); ++k)
          e_p.add_row_expr(std::int64_t(rows[k]), local_src_err.row(std::int64_t(k)));
      }
      for (Eigen::Index i = 0; i < plan.n_local; ++i) e_p.add_row_expr(i, dst_grad.row(i));
    } else if (auto it = incoming.find(q); it != incoming.end()) {
      const auto& rows = plan.incoming_rows[std::size_t(q)];
      for (std::size_t k = 0; k < rows.size(); ++k)
        e_p.add_row_expr(rows[k], it->second.row(std::int64_t(k)));
    }
  }
  agg.end_backward(st);
  return e_p.value();
}

/// Sum parameter gradients across all workers; every worker ends up with the
/// same bytes (rank-ascending reduction, then broadcast).
template <class Scalar>
void allreduce_param_grads(ParamStore<Scalar>& ps, Transport& tp) {
  std::vector<double> buf = ps.flatten_grads();
  tp.allreduce_sum(buf);
  ps.set_grads(buf);
}

}  // namespace sargraph
