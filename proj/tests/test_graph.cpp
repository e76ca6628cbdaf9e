#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "sargraph/mfg.hpp"
#include "sargraph/partition.hpp"
#include "sargraph/shard.hpp"
#include "sargraph/sarfile.hpp"
#include "support/oracles.hpp"

#include <fstream>

#include <map>
#include <set>

using namespace sargraph;

TEST_CASE("build_csr: two-cycle") {
  const std::vector<Edge> edges{{0, 1}, {1, 0}};
  const Graph g = build_csr(edges, 2);
  CHECK(g.indptr == std::vector<std::int64_t>{0, 1, 2});
  CHECK(g.indices == std::vector<NodeId>{1, 0});
}

TEST_CASE("build_csr: empty graph") {
  const Graph g = build_csr({}, 3);
  CHECK(g.indptr == std::vector<std::int64_t>{0, 0, 0, 0});
  CHECK(g.indices.empty());
}

TEST_CASE("build_csr: sources sorted per destination") {
  const std::vector<Edge> edges{{2, 0}, {1, 0}, {0, 1}};
  const Graph g = build_csr(edges, 3);
  CHECK(g.indptr == std::vector<std::int64_t>{0, 2, 3, 3});
  CHECK(g.indices == std::vector<NodeId>{1, 2, 0});
}

TEST_CASE("build_csr: duplicates preserved, ids validated") {
  const std::vector<Edge> dup{{0, 1}, {0, 1}};
  CHECK(build_csr(dup, 2).num_edges() == 2);
  const std::vector<Edge> bad{{0, 5}};
  CHECK_THROWS_AS((void)build_csr(bad, 2), InputError);
}

TEST_CASE("partition_balanced: single part and forced balance") {
  const Graph g = oracles::random_graph(7, 20, 3);
  const PartitionMap pm1 = partition_balanced(g, 1, 0);
  for (auto p : pm1.assignment) CHECK(p == 0);

  const std::vector<Edge> edges{{0, 1}, {1, 2}, {2, 3}, {3, 0}};
  const Graph g4 = build_csr(edges, 4);
  const PartitionMap pm2 = partition_balanced(g4, 2, 42);
  const auto sizes = part_sizes(pm2);
  CHECK(sizes == std::vector<std::int64_t>{2, 2});
}

TEST_CASE("partition_balanced: 4-cycle vs exhaustive balanced bipartitions") {
  std::vector<Edge> edges;
  for (NodeId i = 0; i < 4; ++i) {
    edges.push_back({i, (i + 1) % 4});
    edges.push_back({(i + 1) % 4, i});
  }
  const Graph g = build_csr(edges, 4);
  const PartitionMap pm = partition_balanced(g, 2, 9);
  CHECK(part_sizes(pm) == std::vector<std::int64_t>{2, 2});

  // the 3 balanced bipartitions of {0,1,2,3}: their cuts bound what a
  // balanced partitioner can produce
  std::int64_t worst = 0;
  for (const auto& grouping : {std::set<NodeId>{0, 1}, {0, 2}, {0, 3}}) {
    PartitionMap cand;
    cand.num_parts = 2;
    cand.assignment.assign(4, 1);
    for (NodeId v : grouping) cand.assignment[std::size_t(v)] = 0;
    worst = std::max(worst, edge_cut(g, cand));
  }
  CHECK(edge_cut(g, pm) <= worst);
  CHECK(edge_cut(g, pm) <= 4);
}

TEST_CASE("partition_balanced: deterministic, capacity errors") {
  const Graph g = oracles::random_graph(33, 150, 5);
  const PartitionMap a = partition_balanced(g, 4, 123);
  const PartitionMap b = partition_balanced(g, 4, 123);
  CHECK(a.assignment == b.assignment);
  const auto sizes = part_sizes(a);
  const auto [mn, mx] = std::minmax_element(sizes.begin(), sizes.end());
  CHECK(*mx - *mn <= 1);
  CHECK_THROWS_AS((void)partition_balanced(g, 34, 0), InputError);
}

TEST_CASE("shard blocks: 4-cycle with reverse edges") {
  std::vector<Edge> edges;
  for (NodeId i = 0; i < 4; ++i) {
    edges.push_back({i, (i + 1) % 4});
    edges.push_back({(i + 1) % 4, i});
  }
  const Graph g = build_csr(edges, 4);
  PartitionMap pm;
  pm.num_parts = 2;
  pm.assignment = {0, 0, 1, 1};

  const auto blocks = build_shard_blocks(g, pm, 0);
  REQUIRE(blocks.size() == 2);
  CHECK(blocks[1].src_global_ids == std::vector<NodeId>{2, 3});
  // 2 -> 1 is (local dst 1, local src 0); 3 -> 0 is (local dst 0, local src 1)
  const std::set<std::pair<std::int64_t, std::int64_t>> got(blocks[1].edges.begin(),
                                                            blocks[1].edges.end());
  CHECK(got == std::set<std::pair<std::int64_t, std::int64_t>>{{1, 0}, {0, 1}});

  // local block G_{0,0}: 0 -> 1 and 1 -> 0 only
  CHECK(blocks[0].src_global_ids == std::vector<NodeId>{0, 1});
  const std::set<std::pair<std::int64_t, std::int64_t>> loc(blocks[0].edges.begin(),
                                                            blocks[0].edges.end());
  CHECK(loc == std::set<std::pair<std::int64_t, std::int64_t>>{{1, 0}, {0, 1}});
}

TEST_CASE("shard blocks: no cross edges yields empty block") {
  const std::vector<Edge> edges{{0, 1}, {1, 0}, {2, 3}, {3, 2}};
  const Graph g = build_csr(edges, 4);
  PartitionMap pm;
  pm.num_parts = 2;
  pm.assignment = {0, 0, 1, 1};
  const auto blocks = build_shard_blocks(g, pm, 0);
  CHECK(blocks[1].edges.empty());
  CHECK(blocks[1].src_global_ids.empty());
}

TEST_CASE("shard blocks: flattening reproduces the edge multiset") {
  const Graph g = oracles::random_graph(40, 300, 11);
  const PartitionMap pm = partition_balanced(g, 3, 7);
  std::multiset<std::pair<NodeId, NodeId>> from_blocks;
  const auto owned_by = [&](std::int32_t p) { return owned_nodes(pm, p); };
  for (std::int32_t p = 0; p < 3; ++p) {
    const auto owned = owned_by(p);
    for (const auto& b : build_shard_blocks(g, pm, p))
      for (const auto& [dst, src] : b.edges)
        from_blocks.emplace(b.src_global_ids[std::size_t(src)], owned[std::size_t(dst)]);
  }
  std::multiset<std::pair<NodeId, NodeId>> from_graph;
  for (const Edge& e : edges_of(g)) from_graph.emplace(e.src, e.dst);
  CHECK(from_blocks == from_graph);
}

TEST_CASE("shard blocks: outgoing ids mirror the peer's blocks") {
  const Graph g = oracles::random_graph(30, 200, 21);
  const PartitionMap pm = partition_balanced(g, 3, 5);
  for (std::int32_t p = 0; p < 3; ++p) {
    const auto outgoing = outgoing_src_ids(g, pm, p);
    for (std::int32_t q = 0; q < 3; ++q) {
      const auto q_blocks = build_shard_blocks(g, pm, q);
      CHECK(outgoing[std::size_t(q)] == q_blocks[std::size_t(p)].src_global_ids);
    }
  }
}

TEST_CASE("mfg masks: directed path") {
  // message flow 3 -> 2 -> 1 -> 0
  const std::vector<Edge> edges{{1, 0}, {2, 1}, {3, 2}};
  const Graph g = build_csr(edges, 4);
  const std::vector<NodeId> labeled{0};
  const auto masks = compute_mfg_masks(g, labeled, 2);
  REQUIRE(masks.size() == 3);
  CHECK(masks[0] == std::vector<NodeId>{0, 1, 2});
  CHECK(masks[1] == std::vector<NodeId>{0, 1});
  CHECK(masks[2] == std::vector<NodeId>{0});
}

TEST_CASE("mfg masks: all labeled and empty labeled") {
  const Graph g = oracles::random_graph(12, 40, 17);
  std::vector<NodeId> all(12);
  for (NodeId i = 0; i < 12; ++i) all[std::size_t(i)] = i;
  for (const auto& m : compute_mfg_masks(g, all, 3)) CHECK(m.size() == 12);
  for (const auto& m : compute_mfg_masks(g, {}, 3)) CHECK(m.empty());
}

TEST_CASE("mfg masks: monotone, and mask[0] is the reachable set at depth >= diameter") {
  const Graph g = oracles::random_graph(25, 60, 23);
  const std::vector<NodeId> labeled{3, 11};
  const auto masks = compute_mfg_masks(g, labeled, 25);
  for (std::size_t l = 0; l + 1 < masks.size(); ++l) {
    const std::set<NodeId> lower(masks[l].begin(), masks[l].end());
    for (NodeId v : masks[l + 1]) CHECK(lower.count(v) == 1);
  }
  // brute-force directed reachability to a labeled node
  std::set<NodeId> want(labeled.begin(), labeled.end());
  bool grew = true;
  while (grew) {
    grew = false;
    for (const Edge& e : edges_of(g))
      if (want.count(e.dst) && !want.count(e.src)) {
        want.insert(e.src);
        grew = true;
      }
  }
  CHECK(std::set<NodeId>(masks[0].begin(), masks[0].end()) == want);
}

TEST_CASE("partition map round trip and local index") {
  const Graph g = oracles::random_graph(19, 60, 29);
  const PartitionMap pm = partition_balanced(g, 4, 77);
  save_partition_map("/tmp/sargraph_test_pm.txt", pm);
  const PartitionMap back = load_partition_map("/tmp/sargraph_test_pm.txt");
  CHECK(back.assignment == pm.assignment);
  CHECK(back.num_parts == pm.num_parts);

  const auto local = local_index_of(pm);
  for (std::int32_t p = 0; p < 4; ++p) {
    const auto owned = owned_nodes(pm, p);
    for (std::size_t i = 0; i < owned.size(); ++i)
      CHECK(local[std::size_t(owned[i])] == std::int64_t(i));
  }
}

TEST_CASE("edge list file round trip with symmetrization") {
  const Graph g = oracles::random_graph(15, 50, 31);
  save_edge_list("/tmp/sargraph_test_edges.txt", g);
  const Graph back = load_edge_list("/tmp/sargraph_test_edges.txt", false);
  CHECK(back.indptr == g.indptr);
  CHECK(back.indices == g.indices);

  const Graph sym = load_edge_list("/tmp/sargraph_test_edges.txt", true);
  CHECK(sym.num_edges() == 2 * g.num_edges());
}

TEST_CASE("edge list: comment lines and malformed input") {
  {
    std::ofstream out("/tmp/sargraph_test_comments.txt");
    out << "# header comment\n0 1\n  # indented comment\n2 0 1\n";
  }
  const Graph g = load_edge_list("/tmp/sargraph_test_comments.txt", false);
  CHECK(g.num_nodes == 3);
  CHECK(g.num_edges() == 2);
  CHECK(g.num_relations == 2);
  {
    std::ofstream out("/tmp/sargraph_test_bad.txt");
    out << "0 x\n";
  }
  CHECK_THROWS_AS((void)load_edge_list("/tmp/sargraph_test_bad.txt", false), InputError);
}

TEST_CASE("sarf tensors: f32/f64 round trips and validation") {

  const Matd m = oracles::random_matrix(5, 3, 101);
  for (const DType dt : {DType::F32, DType::F64}) {
    const SarfTensor t = sarf_from_f64(m, dt);
    write_sarf("/tmp/sargraph_test_tensor.sarf", t);
    const SarfTensor back = read_sarf("/tmp/sargraph_test_tensor.sarf");
    CHECK(back.rows == 5);
    CHECK(back.cols == 3);
    CHECK(back.dtype == dt);
    const double tol = dt == DType::F64 ? 0.0 : 1e-7;
    CHECK(oracles::max_rel_err(back.as_f64(), m) <= tol);
  }
  auto bytes = encode_sarf(sarf_from_f64(m, DType::F32));
  bytes.resize(bytes.size() - 4);  // truncate payload
  CHECK_THROWS_AS((void)decode_sarf(bytes), InputError);

  // labels round trip with the unlabeled marker
  const std::vector<std::int32_t> labels{2, -1, 0, 1};
  write_labels("/tmp/sargraph_test_labels.sarf", labels);
  CHECK(read_labels("/tmp/sargraph_test_labels.sarf") == labels);
}
