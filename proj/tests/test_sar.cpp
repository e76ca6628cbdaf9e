#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sargraph/sar.hpp"
#include "support/oracles.hpp"

#include <thread>

using namespace sargraph;

namespace {

struct WorkerStats {
  CommLedger comm;
  std::int64_t peak_resident = 0;
  std::int64_t coeff_violations = 0;
};

struct SarRunResult {
  Matd acc;         // assembled aggregator outputs, global rows
  Matd e_p;         // assembled input-feature errors, global rows
  Matd theta_grad;  // post-allreduce attention / coefficient gradients (entry 0)
  std::vector<WorkerStats> stats;
};

enum class AggChoice { Sum, Mean, GatFused, GatBlockwise, GatReference, Rgcn };

struct SarCase {
  Graph g;
  PartitionMap pm;
  Matd z_global;  // [n x F]
  AggChoice agg = AggChoice::Mean;
  int heads = 1;
  double slope = 0.2;
  Matd attn;          // [2*fh x heads] for gat
  std::vector<Matd> bases;  // rgcn
  Matd coeff;               // rgcn [R x B]
  bool prefetch = false;
  RematPolicy policy = RematPolicy::Sar;
  const Matd* e_acc_global = nullptr;  // run backward if set
};

template <class Scalar>
SarRunResult run_sar_case(const SarCase& c) {
  const int world = c.pm.num_parts;
  SarRunResult out;
  out.stats.resize(static_cast<std::size_t>(world));
  const Eigen::Index f_in = c.z_global.cols();
  LoopbackHub hub(world, TransportOptions{20.0});
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(world));
  std::mutex out_mu;
  Eigen::Index f_out = f_in;

  for (int r = 0; r < world; ++r) {
    threads.emplace_back([&, r] {
      auto tp = hub.transport(r);
      try {
        const auto owned = owned_nodes(c.pm, r);
        const std::int64_t n_local = std::int64_t(owned.size());
        Mat<Scalar> local_z(n_local, f_in);
        for (std::int64_t i = 0; i < n_local; ++i)
          local_z.row(i) = c.z_global.row(owned[std::size_t(i)]).template cast<Scalar>();

        auto deg = std::make_shared<Vecd>(n_local);
        const auto full_deg = in_degrees(c.g);
        for (std::int64_t i = 0; i < n_local; ++i)
          (*deg)(i) = double(full_deg[std::size_t(owned[std::size_t(i)])]);
        auto rel_deg = std::make_shared<Matd>(n_local, c.g.num_relations);
        const auto full_rel = in_degrees_by_relation(c.g);
        for (std::int64_t i = 0; i < n_local; ++i)
          for (std::int32_t rr = 0; rr < c.g.num_relations; ++rr)
            (*rel_deg)(i, rr) = double(
                full_rel[std::size_t(owned[std::size_t(i)]) * std::size_t(c.g.num_relations) +
                         std::size_t(rr)]);

        ParamStore<Scalar> ps;
        std::unique_ptr<Aggregator<Scalar>> agg;
        switch (c.agg) {
          case AggChoice::Sum:
            agg = std::make_unique<SageAggregator<Scalar>>(false, deg);
            break;
          case AggChoice::Mean:
            agg = std::make_unique<SageAggregator<Scalar>>(true, deg);
            break;
          case AggChoice::GatFused:
          case AggChoice::GatBlockwise:
          case AggChoice::GatReference: {
            const auto a_id = ps.add("a", c.attn.template cast<Scalar>());
            if (c.agg == AggChoice::GatReference)
              agg = std::make_unique<GatReferenceAggregator<Scalar>>(&ps, a_id, c.heads, c.slope,
                                                                     n_local);
            else
              agg = std::make_unique<GatAggregator<Scalar>>(&ps, a_id, c.heads, c.slope, n_local,
                                                            c.agg == AggChoice::GatBlockwise);
            break;
          }
          case AggChoice::Rgcn: {
            std::vector<std::int32_t> basis_ids;
            for (std::size_t b = 0; b < c.bases.size(); ++b)
              basis_ids.push_back(
                  ps.add("V" + std::to_string(b), c.bases[b].template cast<Scalar>()));
            const auto coeff_id = ps.add("a_rb", c.coeff.template cast<Scalar>());
            agg = std::make_unique<RgcnAggregator<Scalar>>(&ps, basis_ids, coeff_id,
                                                           c.g.num_relations, rel_deg);
            break;
          }
        }

        const LayerCommPlan plan = build_comm_plan(c.g, c.pm, r);
        MemoryLedger mem;
        CommLedger comm;
        tp->attach_comm_ledger(&comm);
        SarOptions opt{0, c.prefetch, c.policy};

        auto zp = std::make_shared<const Mat<Scalar>>(local_z);
        auto st = sar_forward(*agg, zp, plan, *tp, &mem, opt);

        Matd ep;
        if (c.e_acc_global) {
          Matd e_local(n_local, st->acc.cols());
          for (std::int64_t i = 0; i < n_local; ++i)
            e_local.row(i) = c.e_acc_global->row(owned[std::size_t(i)]);
          ep = sar_backward(*agg, *st, e_local, plan, *tp, &mem, opt);
          allreduce_param_grads(ps, *tp);
        }
        tp->barrier();

        std::lock_guard lk(out_mu);
        f_out = st->acc.cols();
        if (out.acc.size() == 0) out.acc = Matd::Zero(c.g.num_nodes, st->acc.cols());
        for (std::int64_t i = 0; i < n_local; ++i)
          out.acc.row(owned[std::size_t(i)]) = st->acc.row(i).template cast<double>();
        if (c.e_acc_global) {
          if (out.e_p.size() == 0) out.e_p = Matd::Zero(c.g.num_nodes, f_in);
          for (std::int64_t i = 0; i < n_local; ++i) out.e_p.row(owned[std::size_t(i)]) = ep.row(i);
          if (r == 0 && ps.size() > 0) out.theta_grad = ps.entry(0).grad;
        }
        out.stats[std::size_t(r)].comm = comm;
        out.stats[std::size_t(r)].peak_resident = mem.peak_resident();
        out.stats[std::size_t(r)].coeff_violations = mem.edge_coeff_violations();
      } catch (...) {
        errors[std::size_t(r)] = std::current_exception();
        tp->abort_all();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

Graph four_cycle_bidirectional() {
  std::vector<Edge> edges;
  for (NodeId i = 0; i < 4; ++i) {
    edges.push_back({i, (i + 1) % 4});
    edges.push_back({(i + 1) % 4, i});
  }
  return build_csr(edges, 4);
}

PartitionMap two_parts_of_four() {
  PartitionMap pm;
  pm.num_parts = 2;
  pm.assignment = {0, 0, 1, 1};
  return pm;
}

}  // namespace

TEST_CASE("sar forward, N=1: plain local aggregation, zero fetch bytes") {
  SarCase c;
  c.g = oracles::random_graph(12, 50, 3);
  c.pm = partition_balanced(c.g, 1, 0);
  c.z_global = oracles::random_matrix(12, 5, 4);
  c.agg = AggChoice::Sum;
  const auto res = run_sar_case<double>(c);
  CHECK(oracles::max_rel_err(res.acc, oracles::dense_sum_aggregate(c.g, c.z_global)) < 1e-14);
  CHECK(res.stats[0].comm.fwd_feature_bytes == 0);
  CHECK(res.stats[0].comm.bwd_feature_bytes == 0);
  CHECK(res.stats[0].peak_resident == 1);
}

TEST_CASE("sar forward: 4-node 2-partition mean matches the dense oracle") {
  SarCase c;
  c.g = four_cycle_bidirectional();
  c.pm = two_parts_of_four();
  c.z_global = oracles::random_matrix(4, 3, 9);
  c.agg = AggChoice::Mean;
  const auto res = run_sar_case<double>(c);
  // node 1's in-neighbors are 0 and 2: acc = mean(z0, z2)
  const RowVecd want = (c.z_global.row(0) + c.z_global.row(2)) / 2.0;
  CHECK((res.acc.row(1) - want).cwiseAbs().maxCoeff() < 1e-15);
  CHECK(oracles::max_rel_err(res.acc, oracles::dense_mean_aggregate(c.g, c.z_global)) < 1e-14);
}

TEST_CASE("sum aggregation is block-order independent in f64") {
  const Graph g = oracles::random_graph(30, 250, 13);
  const PartitionMap pm = partition_balanced(g, 3, 1);
  const Matd z = oracles::random_matrix(30, 4, 14);
  const auto blocks = build_shard_blocks(g, pm, 0);
  const auto owned = owned_nodes(pm, 0);
  const auto local = local_index_of(pm);

  auto fold_in_order = [&](const std::vector<int>& order) {
    SageAggregator<double> agg(false, std::make_shared<Vecd>(Vecd::Zero(std::int64_t(owned.size()))));
    AggregationState<double> st;
    Matd dummy = Matd::Zero(std::int64_t(owned.size()), z.cols());
    agg.begin_forward(st, dummy);
    for (int q : order) {
      const auto& b = blocks[std::size_t(q)];
      Matd rows(std::int64_t(b.src_global_ids.size()), z.cols());
      for (std::size_t k = 0; k < b.src_global_ids.size(); ++k)
        rows.row(std::int64_t(k)) = z.row(b.src_global_ids[k]);
      agg.fold_block(st, b, rows, nullptr);
    }
    agg.finalize(st);
    return st.acc_d;
  };
  const Matd fwd = fold_in_order({0, 1, 2});
  const Matd rev = fold_in_order({2, 1, 0});
  CHECK(oracles::max_rel_err(fwd, rev) < 1e-12);

  // and both equal the dense one-shot sum on owned rows
  const Matd dense = oracles::dense_sum_aggregate(g, z);
  for (std::size_t i = 0; i < owned.size(); ++i)
    CHECK((fwd.row(std::int64_t(i)) - dense.row(owned[i])).cwiseAbs().maxCoeff() < 1e-12);
  (void)local;
}

TEST_CASE("sequential aggregation identity: folding a split block equals the whole") {
  const Graph g = oracles::random_graph(16, 80, 21);
  const PartitionMap pm = partition_balanced(g, 1, 0);
  const Matd z = oracles::random_matrix(16, 6, 22);
  const auto blocks = build_shard_blocks(g, pm, 0);
  const ShardBlock& whole = blocks[0];

  ShardBlock first = whole, second = whole;
  const std::size_t cut = whole.edges.size() / 2;
  first.edges.assign(whole.edges.begin(), whole.edges.begin() + std::ptrdiff_t(cut));
  second.edges.assign(whole.edges.begin() + std::ptrdiff_t(cut), whole.edges.end());

  auto deg = std::make_shared<Vecd>(16);
  const auto full_deg = in_degrees(g);
  for (int i = 0; i < 16; ++i) (*deg)(i) = double(full_deg[std::size_t(i)]);

  Matd rows(std::int64_t(whole.src_global_ids.size()), z.cols());
  for (std::size_t k = 0; k < whole.src_global_ids.size(); ++k)
    rows.row(std::int64_t(k)) = z.row(whole.src_global_ids[k]);

  // mean aggregator
  {
    SageAggregator<double> agg(true, deg);
    AggregationState<double> one, two;
    agg.begin_forward(one, z);
    agg.fold_block(one, whole, rows, nullptr);
    agg.finalize(one);
    agg.begin_forward(two, z);
    agg.fold_block(two, first, rows, nullptr);
    agg.fold_block(two, second, rows, nullptr);
    agg.finalize(two);
    CHECK(oracles::max_rel_err(one.acc_d, two.acc_d) < 1e-12);
  }
  // attention aggregator (fused)
  {
    ParamStore<double> ps;
    const Matd a = oracles::random_matrix(2 * 3, 2, 23);
    const auto a_id = ps.add("a", a);
    GatAggregator<double> agg(&ps, a_id, 2, 0.2, 16, false);
    AggregationState<double> one, two;
    agg.begin_forward(one, z);
    agg.fold_block(one, whole, rows, nullptr);
    agg.finalize(one);
    agg.begin_forward(two, z);
    agg.fold_block(two, first, rows, nullptr);
    agg.fold_block(two, second, rows, nullptr);
    agg.finalize(two);
    CHECK(oracles::max_rel_err(one.acc_d, two.acc_d) < 1e-12);
  }
}

TEST_CASE("case-1 backward: errors scatter as e_acc / degree, no backward feature bytes") {
  SarCase c;
  c.g = oracles::random_graph(20, 120, 31);
  c.pm = partition_balanced(c.g, 2, 3);
  c.z_global = oracles::random_matrix(20, 4, 32);
  c.agg = AggChoice::Mean;
  const Matd e_acc = oracles::random_matrix(20, 4, 33);
  c.e_acc_global = &e_acc;
  const auto res = run_sar_case<double>(c);

  // dense oracle: dE/dz_j = sum_{i : j in N(i)} e_acc_i / deg_i
  Matd want = Matd::Zero(20, 4);
  for (const Edge& e : edges_of(c.g)) want.row(e.src) += e_acc.row(e.dst) / double(c.g.in_degree(e.dst));
  CHECK(oracles::max_rel_err(res.e_p, want) < 1e-12);
  for (const auto& s : res.stats) CHECK(s.comm.bwd_feature_bytes == 0);
  for (const auto& s : res.stats) CHECK(s.comm.bwd_gradient_bytes > 0);
}

TEST_CASE("case-2 single remote neighbor: attention gradients match finite differences") {
  SarCase c;
  c.g = build_csr(std::vector<Edge>{{0, 1}}, 2);
  PartitionMap pm;
  pm.num_parts = 2;
  pm.assignment = {0, 1};
  c.pm = pm;
  c.z_global = oracles::random_matrix(2, 4, 41);
  c.agg = AggChoice::GatFused;
  c.heads = 2;
  c.attn = oracles::random_matrix(4, 2, 42);
  const Matd e_acc = oracles::random_matrix(2, 4, 43);
  c.e_acc_global = &e_acc;
  const auto res = run_sar_case<double>(c);
  for (const auto& s : res.stats) CHECK(s.comm.bwd_feature_bytes >= 0);
  CHECK(res.stats[1].comm.bwd_feature_bytes > 0);  // owner of node 1 refetches z_0

  auto loss_z = [&](const Matd& zz) {
    return oracles::dense_gat_aggregate(c.g, zz, c.attn, c.heads, c.slope)
        .cwiseProduct(e_acc)
        .sum();
  };
  const Matd fd_z = oracles::finite_diff(loss_z, c.z_global);
  CHECK(oracles::max_rel_err(res.e_p, fd_z) < 1e-5);

  auto loss_a = [&](const Matd& aa) {
    return oracles::dense_gat_aggregate(c.g, c.z_global, aa, c.heads, c.slope)
        .cwiseProduct(e_acc)
        .sum();
  };
  const Matd fd_a = oracles::finite_diff(loss_a, c.attn);
  CHECK(oracles::max_rel_err(res.theta_grad, fd_a) < 1e-5);
}

TEST_CASE("zero upstream error: zero input errors and zero theta grads") {
  SarCase c;
  c.g = oracles::random_graph(10, 40, 51);
  c.pm = partition_balanced(c.g, 2, 5);
  c.z_global = oracles::random_matrix(10, 4, 52);
  c.agg = AggChoice::GatFused;
  c.heads = 1;
  c.attn = oracles::random_matrix(8, 1, 53);
  const Matd zero = Matd::Zero(10, 4);
  c.e_acc_global = &zero;
  const auto res = run_sar_case<double>(c);
  CHECK(res.e_p.cwiseAbs().maxCoeff() == 0.0);
  CHECK(res.theta_grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("residency ledger: <=2 without prefetch, <=3 with, over forward+backward") {
  SarCase c;
  c.g = oracles::random_graph(40, 500, 61);
  c.pm = partition_balanced(c.g, 4, 7);
  c.z_global = oracles::random_matrix(40, 6, 62);
  c.agg = AggChoice::GatFused;
  c.heads = 2;
  c.attn = oracles::random_matrix(6, 2, 63);
  const Matd e_acc = oracles::random_matrix(40, 6, 64);
  c.e_acc_global = &e_acc;

  for (const bool prefetch : {false, true}) {
    CAPTURE(prefetch);
    c.prefetch = prefetch;
    const auto res = run_sar_case<double>(c);
    for (const auto& s : res.stats) {
      CHECK(s.peak_resident <= (prefetch ? 3 : 2));
      CHECK(s.coeff_violations == 0);
    }
    // prefetch must not change the math
    c.prefetch = false;
    const auto base = run_sar_case<double>(c);
    CHECK(oracles::max_rel_err(res.acc, base.acc) == 0.0);
    CHECK(oracles::max_rel_err(res.e_p, base.e_p) == 0.0);
    c.prefetch = prefetch;
  }
}

TEST_CASE("ledger_check: pass/fail logic") {
  MemoryLedger mem;
  mem.reset_epoch();
  CHECK(ledger_check(mem, false).pass);
  mem.block_acquired(100);
  mem.block_freed(100);
  CHECK(ledger_check(mem, false).pass);
  mem.block_acquired(100);
  mem.block_acquired(100);  // two live remote blocks: peak 3
  CHECK_FALSE(ledger_check(mem, false).pass);
  CHECK(ledger_check(mem, true).peak_resident == 3);
  mem.block_freed(100);
  mem.block_freed(100);
  CHECK(ledger_check(mem, true).pass);
  mem.block_acquired(50);  // leaked
  const auto rep = ledger_check(mem, true);
  CHECK_FALSE(rep.pass);
  CHECK(rep.leaked_blocks == 1);
}

TEST_CASE("allreduce_param_grads: small example, zeros, sequential-oracle bitwise") {
  LoopbackHub hub(2, TransportOptions{10.0});
  std::vector<std::thread> threads;
  Matd got0, got1;
  for (int r = 0; r < 2; ++r) {
    threads.emplace_back([&, r] {
      auto tp = hub.transport(r);
      ParamStore<double> ps;
      Matd g(1, 2);
      if (r == 0)
        g << 1, 2;
      else
        g << 3, 4;
      const auto id = ps.add("w", Matd::Zero(1, 2));
      ps.add_grad(id, g);
      allreduce_param_grads(ps, *tp);
      (r == 0 ? got0 : got1) = ps.entry(0).grad;

      ps.zero_grads();
      allreduce_param_grads(ps, *tp);
      CHECK(ps.entry(0).grad.cwiseAbs().maxCoeff() == 0.0);
      tp->barrier();
    });
  }
  for (auto& t : threads) t.join();
  Matd want(1, 2);
  want << 4, 6;
  CHECK(std::memcmp(got0.data(), want.data(), 16) == 0);
  CHECK(std::memcmp(got1.data(), want.data(), 16) == 0);
}

TEST_CASE("sar_backward contract: missing saved_local_z and shape mismatch") {
  const Graph g = oracles::random_graph(6, 20, 71);
  const PartitionMap pm = partition_balanced(g, 1, 0);
  const LayerCommPlan plan = build_comm_plan(g, pm, 0);
  LoopbackHub hub(1);
  auto tp = hub.transport(0);
  auto deg = std::make_shared<Vecd>(Vecd::Ones(6));
  SageAggregator<double> agg(true, deg);
  AggregationState<double> st;
  st.acc = Matd::Zero(6, 3);
  CHECK_THROWS_AS(
      (void)sar_backward(agg, st, Matd::Zero(6, 3), plan, *tp, nullptr, SarOptions{}),
      std::logic_error);
  st.saved_local_z = std::make_shared<const Matd>(Matd::Zero(6, 3));
  CHECK_THROWS_AS(
      (void)sar_backward(agg, st, Matd::Zero(5, 3), plan, *tp, nullptr, SarOptions{}),
      InputError);
}
