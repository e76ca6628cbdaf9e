#include "sargraph/shard.hpp"

#include <algorithm>
#include <unordered_map>

namespace sargraph {

std::vector<ShardBlock> build_shard_blocks(const Graph& g, const PartitionMap& pm, std::int32_t p,
                                           const std::vector<char>& active_dst) {
  validate_partition(g, pm);
  require_input(p >= 0 && p < pm.num_parts, "build_shard_blocks: partition id out of range");
  const std::int32_t n_parts = pm.num_parts;
  const auto local = local_index_of(pm);

  std::vector<ShardBlock> blocks(static_cast<std::size_t>(n_parts));
  for (std::int32_t q = 0; q < n_parts; ++q) {
    blocks[size_t(q)].dst_part = p;
    blocks[size_t(q)].src_part = q;
  }

  // Pass 1: collect the remote vertex set per source partition.
  std::vector<std::vector<NodeId>> srcs(static_cast<std::size_t>(n_parts));
  for (NodeId i = 0; i < g.num_nodes; ++i) {
    if (pm.assignment[size_t(i)] != p) continue;
    if (!active_dst.empty() && !active_dst[size_t(i)]) continue;
    for (std::int64_t k = g.indptr[size_t(i)]; k < g.indptr[size_t(i) + 1]; ++k)
      srcs[size_t(pm.assignment[size_t(g.indices[size_t(k)])])].push_back(g.indices[size_t(k)]);
  }
  std::vector<std::unordered_map<NodeId, std::int64_t>> src_local(static_cast<std::size_t>(n_parts));
  for (std::int32_t q = 0; q < n_parts; ++q) {
    auto& v = srcs[size_t(q)];
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    blocks[size_t(q)].src_global_ids = v;
    for (std::size_t r = 0; r < v.size(); ++r) src_local[size_t(q)][v[r]] = std::int64_t(r);
  }

  // Pass 2: edges in canonical order (ascending destination, CSR source order).
  for (NodeId i = 0; i < g.num_nodes; ++i) {
    if (pm.assignment[size_t(i)] != p) continue;
    if (!active_dst.empty() && !active_dst[size_t(i)]) continue;
    for (std::int64_t k = g.indptr[size_t(i)]; k < g.indptr[size_t(i) + 1]; ++k) {
      const NodeId j = g.indices[size_t(k)];
      const std::int32_t q = pm.assignment[size_t(j)];
      auto& b = blocks[size_t(q)];
      b.edges.emplace_back(local[size_t(i)], src_local[size_t(q)].at(j));
      if (g.heterogeneous()) b.edge_rel.push_back(g.edge_type[size_t(k)]);
    }
  }
  return blocks;
}

std::vector<std::vector<NodeId>> outgoing_src_ids(const Graph& g, const PartitionMap& pm,
                                                  std::int32_t p,
                                                  const std::vector<char>& active_dst) {
  validate_partition(g, pm);
  const std::int32_t n_parts = pm.num_parts;
  std::vector<std::vector<NodeId>> out(static_cast<std::size_t>(n_parts));
  for (NodeId i = 0; i < g.num_nodes; ++i) {
    if (!active_dst.empty() && !active_dst[size_t(i)]) continue;
    const std::int32_t q = pm.assignment[size_t(i)];
    for (std::int64_t k = g.indptr[size_t(i)]; k < g.indptr[size_t(i) + 1]; ++k) {
      const NodeId j = g.indices[size_t(k)];
      if (pm.assignment[size_t(j)] == p) out[size_t(q)].push_back(j);
    }
  }
  for (auto& v : out) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return out;
}

}  // namespace sargraph
