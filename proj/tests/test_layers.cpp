#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sargraph/layers.hpp"
#include "support/harness.hpp"
#include "support/oracles.hpp"

#include <thread>

using namespace sargraph;

using harness::run_layer_workers;
using harness::set_param_d;


TEST_CASE("sage: hand example, mean of neighbor rows") {
  // node 0 aggregates z_1 = [1,2] and z_2 = [3,4]; W = I, W_res = 0, identity act
  const Graph g = build_csr(std::vector<Edge>{{1, 0}, {2, 0}}, 3);
  const PartitionMap pm = partition_balanced(g, 1, 0);
  Matd x(3, 2);
  x << 9, 9, 1, 2, 3, 4;
  auto factory = [](ParamStore<double>& ps, std::int64_t, std::shared_ptr<const Vecd> deg,
                    std::shared_ptr<const Matd>) -> std::unique_ptr<LayerBase<double>> {
    auto l = std::make_unique<GraphSageLayer<double>>(ps, "layer0", 2, 2, Activation::Identity,
                                                      deg, 1, 1);
    set_param_d(ps, "layer0.W", Matd::Identity(2, 2));
    set_param_d(ps, "layer0.W_res", Matd::Zero(2, 2));
    return l;
  };
  const auto res = run_layer_workers<double>(g, pm, x, nullptr, factory);
  CHECK(res.h(0, 0) == doctest::Approx(2.0));
  CHECK(res.h(0, 1) == doctest::Approx(3.0));
}

TEST_CASE("sage: empty neighborhood leaves only the residual path") {
  // no in-edges at node 0; W_res = I, relu: h = relu(x) = [0, 5]
  const Graph g = build_csr(std::vector<Edge>{{0, 1}}, 2);
  const PartitionMap pm = partition_balanced(g, 1, 0);
  Matd x(2, 2);
  x << -1, 5, 2, 2;
  auto factory = [](ParamStore<double>& ps, std::int64_t, std::shared_ptr<const Vecd> deg,
                    std::shared_ptr<const Matd>) -> std::unique_ptr<LayerBase<double>> {
    auto l = std::make_unique<GraphSageLayer<double>>(ps, "layer0", 2, 2, Activation::Relu, deg, 1,
                                                      1);
    set_param_d(ps, "layer0.W", Matd::Identity(2, 2));
    set_param_d(ps, "layer0.W_res", Matd::Identity(2, 2));
    return l;
  };
  const auto res = run_layer_workers<double>(g, pm, x, nullptr, factory);
  CHECK(res.h(0, 0) == 0.0);
  CHECK(res.h(0, 1) == 5.0);
}

TEST_CASE("sage: partition split leaves the aggregation unchanged") {
  const Graph g = oracles::random_graph(24, 140, 5);
  const Matd x = oracles::random_matrix(24, 6, 6);
  const Matd seed = oracles::random_matrix(24, 5, 7);
  auto factory = [](ParamStore<double>& ps, std::int64_t, std::shared_ptr<const Vecd> deg,
                    std::shared_ptr<const Matd>) -> std::unique_ptr<LayerBase<double>> {
    return std::make_unique<GraphSageLayer<double>>(ps, "layer0", 6, 5, Activation::Relu, deg, 3,
                                                    1);
  };
  const auto one = run_layer_workers<double>(g, partition_balanced(g, 1, 0), x, &seed, factory);
  const auto two = run_layer_workers<double>(g, partition_balanced(g, 2, 1), x, &seed, factory);
  const auto four = run_layer_workers<double>(g, partition_balanced(g, 4, 2), x, &seed, factory);
  CHECK(oracles::max_rel_err(two.h, one.h) < 1e-12);
  CHECK(oracles::max_rel_err(four.h, one.h) < 1e-12);
  CHECK(oracles::max_rel_err(two.x_grad, one.x_grad) < 1e-12);
  CHECK(oracles::max_rel_err(four.x_grad, one.x_grad) < 1e-12);
  for (const auto& [name, grad] : one.param_grads) {
    CHECK(oracles::max_rel_err(two.param_grads.at(name), grad) < 1e-11);
    CHECK(oracles::max_rel_err(four.param_grads.at(name), grad) < 1e-11);
  }
}

TEST_CASE("gat: zero attention vector gives uniform attention (mean aggregation)") {
  const Graph g = oracles::random_graph(10, 50, 11);
  const Matd x = oracles::random_matrix(10, 4, 12);
  auto gat_factory = [](ParamStore<double>& ps, std::int64_t n_local,
                        std::shared_ptr<const Vecd>, std::shared_ptr<const Matd>)
      -> std::unique_ptr<LayerBase<double>> {
    auto l = std::make_unique<GatLayer<double>>(ps, "layer0", 4, 4, 1, 0.2, Activation::Identity,
                                                n_local, 1, 1);
    set_param_d(ps, "layer0.W", Matd::Identity(4, 4));
    set_param_d(ps, "layer0.a", Matd::Zero(8, 1));
    return l;
  };
  const auto got = run_layer_workers<double>(g, partition_balanced(g, 2, 1), x, nullptr,
                                             gat_factory);
  const Matd want = oracles::dense_mean_aggregate(g, x);
  CHECK(oracles::max_rel_err(got.h, want) < 1e-12);
}

TEST_CASE("gat: a single neighbor passes through regardless of the attention vector") {
  const Graph g = build_csr(std::vector<Edge>{{0, 1}}, 2);
  const Matd x = oracles::random_matrix(2, 4, 21);
  auto factory = [](ParamStore<double>& ps, std::int64_t n_local, std::shared_ptr<const Vecd>,
                    std::shared_ptr<const Matd>) -> std::unique_ptr<LayerBase<double>> {
    auto l = std::make_unique<GatLayer<double>>(ps, "layer0", 4, 4, 2, 0.2, Activation::Identity,
                                                n_local, 5, 1);
    set_param_d(ps, "layer0.W", Matd::Identity(4, 4));
    return l;
  };
  const auto got = run_layer_workers<double>(g, partition_balanced(g, 1, 0), x, nullptr, factory);
  CHECK((got.h.row(1) - x.row(0)).cwiseAbs().maxCoeff() < 1e-14);
  CHECK(got.h.row(0).cwiseAbs().maxCoeff() == 0.0);  // no neighbors
}

TEST_CASE("gat fused vs materialized reference: values and all gradients") {
  for (const int heads : {1, 2}) {
    CAPTURE(heads);
    const Graph g = oracles::random_graph(12, 70, std::uint64_t(30 + heads));
    const Matd x = oracles::random_matrix(12, 6, 31);
    const Matd seed = oracles::random_matrix(12, 6, 32);
    auto factory = [&](ParamStore<double>& ps, std::int64_t n_local, std::shared_ptr<const Vecd>,
                       std::shared_ptr<const Matd>) -> std::unique_ptr<LayerBase<double>> {
      return std::make_unique<GatLayer<double>>(ps, "layer0", 6, 6, heads, 0.2, Activation::Elu,
                                                n_local, 9, 1);
    };
    // fused under the sar policy, reference under vanilla-dp; N = 2 for both
    const PartitionMap pm = partition_balanced(g, 2, 3);
    const auto fused = run_layer_workers<double>(g, pm, x, &seed, factory, RematPolicy::Sar);
    const auto ref = run_layer_workers<double>(g, pm, x, &seed, factory, RematPolicy::VanillaDp);
    CHECK(oracles::max_rel_err(fused.h, ref.h) < 1e-10);
    CHECK(oracles::max_rel_err(fused.x_grad, ref.x_grad) < 1e-10);
    for (const auto& [name, grad] : ref.param_grads)
      CHECK(oracles::max_rel_err(fused.param_grads.at(name), grad) < 1e-10);
  }
}

TEST_CASE("gat reference gradients match finite differences") {
  const Graph g = oracles::random_graph(8, 30, 41);
  const Matd x = oracles::random_matrix(8, 4, 42);
  const Matd seed = oracles::random_matrix(8, 4, 43);
  const Matd a0 = oracles::random_matrix(4, 2, 44);
  auto factory = [&](ParamStore<double>& ps, std::int64_t n_local, std::shared_ptr<const Vecd>,
                     std::shared_ptr<const Matd>) -> std::unique_ptr<LayerBase<double>> {
    auto l = std::make_unique<GatLayer<double>>(ps, "layer0", 4, 4, 2, 0.2, Activation::Identity,
                                                n_local, 11, 1);
    set_param_d(ps, "layer0.W", Matd::Identity(4, 4));
    set_param_d(ps, "layer0.a", a0);
    return l;
  };
  const PartitionMap pm = partition_balanced(g, 1, 0);
  const auto got = run_layer_workers<double>(g, pm, x, &seed, factory, RematPolicy::VanillaDp);

  auto loss_x = [&](const Matd& xx) {
    return oracles::dense_gat_aggregate(g, xx, a0, 2, 0.2).cwiseProduct(seed).sum();
  };
  CHECK(oracles::max_rel_err(got.x_grad, oracles::finite_diff(loss_x, x)) < 1e-6);
  auto loss_a = [&](const Matd& aa) {
    return oracles::dense_gat_aggregate(g, x, aa, 2, 0.2).cwiseProduct(seed).sum();
  };
  CHECK(oracles::max_rel_err(got.param_grads.at("layer0.a"), oracles::finite_diff(loss_a, a0)) <
        1e-6);
}

TEST_CASE("attention coefficients per destination sum to one") {
  const Graph g = oracles::random_graph(10, 60, 51);
  const Matd z = oracles::random_matrix(10, 6, 52);
  const Matd a = oracles::random_matrix(6, 2, 53);
  ParamStore<double> ps;
  const auto a_id = ps.add("a", a);
  GatReferenceAggregator<double> agg(&ps, a_id, 2, 0.2, 10);
  const PartitionMap pm = partition_balanced(g, 1, 0);
  const LayerCommPlan plan = build_comm_plan(g, pm, 0);
  LoopbackHub hub(1);
  auto tp = hub.transport(0);
  auto zp = std::make_shared<const Matd>(z);
  auto st = sar_forward(agg, zp, plan, *tp, nullptr, SarOptions{0, false, RematPolicy::VanillaDp});

  // recover normalized coefficients from the stored logits and saved max/den
  const auto& logits = *st->retained_logits.at(0);
  Matd sums = Matd::Zero(10, 2);
  const auto& block = plan.blocks[0];
  for (std::int64_t k = 0; k < block.num_edges(); ++k)
    for (int h = 0; h < 2; ++h) {
      const double pre = logits(k, h);
      const double e = pre >= 0 ? pre : 0.2 * pre;
      sums(block.edges[std::size_t(k)].first, h) +=
          std::exp(e - st->softmax_max(block.edges[std::size_t(k)].first, h)) /
          st->softmax_den(block.edges[std::size_t(k)].first, h);
    }
  for (NodeId i = 0; i < 10; ++i)
    for (int h = 0; h < 2; ++h)
      if (g.in_degree(i) > 0) CHECK(sums(i, h) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("distributed batchnorm: split across workers matches the single pass") {
  // forward/backward through dist_normalize with 1 vs 2 workers
  const Matd x = oracles::random_matrix(8, 3, 61);
  const Matd seed = oracles::random_matrix(8, 3, 62);

  auto run_split = [&](int world) {
    LoopbackHub hub(world, TransportOptions{10.0});
    std::vector<std::thread> threads;
    Matd out = Matd::Zero(8, 3), grad = Matd::Zero(8, 3);
    std::mutex mu;
    const std::int64_t rows_per = 8 / world;
    for (int r = 0; r < world; ++r) {
      threads.emplace_back([&, r] {
        auto tp = hub.transport(r);
        Tape<double> tape;
        const Var in = tape.input(x.middleRows(r * rows_per, rows_per));
        const Var o = dist_normalize(tape, in, 1e-5, tp.get());
        const std::pair<Var, Matd> s{o, seed.middleRows(r * rows_per, rows_per)};
        tape.backward(std::span<const std::pair<Var, Matd>>(&s, 1));
        std::lock_guard lk(mu);
        out.middleRows(r * rows_per, rows_per) = tape.value(o);
        grad.middleRows(r * rows_per, rows_per) = tape.grad(in);
      });
    }
    for (auto& t : threads) t.join();
    return std::pair{out, grad};
  };

  const auto [out1, grad1] = run_split(1);
  const auto [out2, grad2] = run_split(2);
  const auto [out4, grad4] = run_split(4);
  CHECK(oracles::max_rel_err(out2, out1) < 1e-6);
  CHECK(oracles::max_rel_err(grad2, grad1) < 1e-6);
  CHECK(oracles::max_rel_err(out4, out1) < 1e-6);
  CHECK(oracles::max_rel_err(grad4, grad1) < 1e-6);
}

TEST_CASE("distributed batchnorm: hand example across two workers") {
  LoopbackHub hub(2, TransportOptions{10.0});
  std::vector<std::thread> threads;
  Matd rows[2];
  for (int r = 0; r < 2; ++r) {
    threads.emplace_back([&, r] {
      auto tp = hub.transport(r);
      Matd x(2, 1);
      if (r == 0)
        x << 1, 3;
      else
        x << 5, 7;
      Tape<double> tape;
      const Var o = dist_normalize(tape, tape.input(x), 1e-5, tp.get());
      rows[r] = tape.value(o);
    });
  }
  for (auto& t : threads) t.join();
  const double d = std::sqrt(5.0 + 1e-5);
  CHECK(rows[0](0, 0) == doctest::Approx(-3.0 / d));
  CHECK(rows[0](1, 0) == doctest::Approx(-1.0 / d));
  CHECK(rows[1](0, 0) == doctest::Approx(1.0 / d));
  CHECK(rows[1](1, 0) == doctest::Approx(3.0 / d));
}

TEST_CASE("rgcn: degenerate basis (B=1, a=1) equals mean aggregation then matmul") {
  const Graph g = oracles::random_graph(9, 40, 71);
  const Matd x = oracles::random_matrix(9, 4, 72);
  const Matd v0 = oracles::random_matrix(4, 3, 73);
  auto factory = [&](ParamStore<double>& ps, std::int64_t, std::shared_ptr<const Vecd>,
                     std::shared_ptr<const Matd> rel_deg) -> std::unique_ptr<LayerBase<double>> {
    auto l = std::make_unique<RgcnLayer<double>>(ps, "layer0", 4, 3, g.num_relations, 1, false,
                                                 Activation::Identity, rel_deg, 3, 1);
    set_param_d(ps, "layer0.V0", v0);
    set_param_d(ps, "layer0.a_rb", Matd::Ones(1, 1));
    return l;
  };
  const auto got = run_layer_workers<double>(g, partition_balanced(g, 1, 0), x, nullptr, factory);

  // mean aggregation through the engine's own mean path, then the engine matmul
  const PartitionMap pm1 = partition_balanced(g, 1, 0);
  const auto blocks = build_shard_blocks(g, pm1, 0);
  auto deg = std::make_shared<Vecd>(9);
  const auto full_deg = in_degrees(g);
  for (int i = 0; i < 9; ++i) (*deg)(i) = double(full_deg[std::size_t(i)]);
  SageAggregator<double> mean_agg(true, deg);
  AggregationState<double> st;
  mean_agg.begin_forward(st, x);
  Matd rows(std::int64_t(blocks[0].src_global_ids.size()), x.cols());
  for (std::size_t k = 0; k < blocks[0].src_global_ids.size(); ++k)
    rows.row(std::int64_t(k)) = x.row(blocks[0].src_global_ids[k]);
  mean_agg.fold_block(st, blocks[0], rows, nullptr);
  mean_agg.finalize(st);
  const Matd want = matmul_rowwise<double>(st.acc_d, v0);
  CHECK((got.h - want).cwiseAbs().maxCoeff() == 0.0);  // bitwise in f64

  // and it tracks the plain dense oracle to f64 roundoff
  CHECK(oracles::max_rel_err(got.h, matmul_rowwise<double>(oracles::dense_mean_aggregate(g, x), v0)) <
        1e-14);
}

TEST_CASE("rgcn: identity coefficients recover independent per-relation weights") {
  const Graph g = oracles::random_graph(10, 60, 81, 2);
  const Matd x = oracles::random_matrix(10, 3, 82);
  const Matd v0 = oracles::random_matrix(3, 4, 83);
  const Matd v1 = oracles::random_matrix(3, 4, 84);
  auto factory = [&](ParamStore<double>& ps, std::int64_t, std::shared_ptr<const Vecd>,
                     std::shared_ptr<const Matd> rel_deg) -> std::unique_ptr<LayerBase<double>> {
    auto l = std::make_unique<RgcnLayer<double>>(ps, "layer0", 3, 4, 2, 2, false,
                                                 Activation::Identity, rel_deg, 5, 1);
    set_param_d(ps, "layer0.V0", v0);
    set_param_d(ps, "layer0.V1", v1);
    set_param_d(ps, "layer0.a_rb", Matd::Identity(2, 2));
    return l;
  };
  const auto got = run_layer_workers<double>(g, partition_balanced(g, 2, 1), x, nullptr, factory);
  const Matd want = oracles::dense_rgcn_aggregate(g, x, {v0, v1});
  CHECK(oracles::max_rel_err(got.h, want) < 1e-12);
}

TEST_CASE("rgcn: basis and coefficient gradients match finite differences") {
  const Graph g = oracles::random_graph(8, 36, 91, 2);
  const Matd x = oracles::random_matrix(8, 3, 92);
  const Matd seed = oracles::random_matrix(8, 4, 93);
  const Matd v0 = oracles::random_matrix(3, 4, 94);
  const Matd v1 = oracles::random_matrix(3, 4, 95);
  Matd coeff(2, 2);
  coeff << 0.7, -0.3, 0.4, 1.1;

  auto factory = [&](ParamStore<double>& ps, std::int64_t, std::shared_ptr<const Vecd>,
                     std::shared_ptr<const Matd> rel_deg) -> std::unique_ptr<LayerBase<double>> {
    auto l = std::make_unique<RgcnLayer<double>>(ps, "layer0", 3, 4, 2, 2, false,
                                                 Activation::Identity, rel_deg, 7, 1);
    set_param_d(ps, "layer0.V0", v0);
    set_param_d(ps, "layer0.V1", v1);
    set_param_d(ps, "layer0.a_rb", coeff);
    return l;
  };
  const auto got = run_layer_workers<double>(g, partition_balanced(g, 2, 2), x, &seed, factory);

  auto w_of = [&](const Matd& vv0, const Matd& vv1, const Matd& cc) {
    return std::vector<Matd>{cc(0, 0) * vv0 + cc(0, 1) * vv1, cc(1, 0) * vv0 + cc(1, 1) * vv1};
  };
  auto loss_v0 = [&](const Matd& vv) {
    return oracles::dense_rgcn_aggregate(g, x, w_of(vv, v1, coeff)).cwiseProduct(seed).sum();
  };
  auto loss_v1 = [&](const Matd& vv) {
    return oracles::dense_rgcn_aggregate(g, x, w_of(v0, vv, coeff)).cwiseProduct(seed).sum();
  };
  auto loss_c = [&](const Matd& cc) {
    return oracles::dense_rgcn_aggregate(g, x, w_of(v0, v1, cc)).cwiseProduct(seed).sum();
  };
  auto loss_x = [&](const Matd& xx) {
    return oracles::dense_rgcn_aggregate(g, xx, w_of(v0, v1, coeff)).cwiseProduct(seed).sum();
  };
  CHECK(oracles::max_rel_err(got.param_grads.at("layer0.V0"), oracles::finite_diff(loss_v0, v0)) <
        1e-5);
  CHECK(oracles::max_rel_err(got.param_grads.at("layer0.V1"), oracles::finite_diff(loss_v1, v1)) <
        1e-5);
  CHECK(oracles::max_rel_err(got.param_grads.at("layer0.a_rb"),
                             oracles::finite_diff(loss_c, coeff)) < 1e-5);
  CHECK(oracles::max_rel_err(got.x_grad, oracles::finite_diff(loss_x, x)) < 1e-5);
}

TEST_CASE("rgcn: relation id out of range is an input error") {
  std::vector<Edge> edges{{0, 1, 0}, {1, 0, 1}};
  const Graph g = build_csr(edges, 2, 2);
  const Matd x = oracles::random_matrix(2, 3, 99);
  auto factory = [&](ParamStore<double>& ps, std::int64_t, std::shared_ptr<const Vecd>,
                     std::shared_ptr<const Matd> rel_deg) -> std::unique_ptr<LayerBase<double>> {
    // layer claims a single relation while the graph carries two
    return std::make_unique<RgcnLayer<double>>(ps, "layer0", 3, 3, 1, 1, false,
                                               Activation::Identity, rel_deg, 7, 1);
  };
  CHECK_THROWS_AS(
      (void)run_layer_workers<double>(g, partition_balanced(g, 1, 0), x, nullptr, factory),
      InputError);
}
