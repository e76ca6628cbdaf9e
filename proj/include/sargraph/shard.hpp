#pragma once

#include "sargraph/partition.hpp"

#include <vector>

namespace sargraph {

/// Subgraph of the edges from partition src_part into partition dst_part.
/// edges hold (local dst index within dst_part, local src index into
/// src_global_ids); src_global_ids are the remote endpoints, sorted ascending.
/// Edge order is canonical: ascending destination, then CSR source order.
struct ShardBlock {
  std::int32_t dst_part = 0;
  std::int32_t src_part = 0;
  std::vector<std::pair<std::int64_t, std::int64_t>> edges;
  std::vector<NodeId> src_global_ids;
  std::vector<std::int32_t> edge_rel;  // empty for homogeneous graphs

  std::int64_t num_edges() const { return std::int64_t(edges.size()); }
  bool empty() const { return edges.empty(); }
};

/// All N source-side blocks feeding partition p, ordered q = 0..N-1.
/// active_dst, when non-empty, keeps only edges whose destination is flagged
/// (global-id indexed); used to restrict computation to message-flow masks.
std::vector<ShardBlock> build_shard_blocks(const Graph& g, const PartitionMap& pm, std::int32_t p,
                                           const std::vector<char>& active_dst = {});

/// For each peer q, the ascending global ids of partition p's nodes that feed
/// at least one (active) destination in partition q. Equals
/// build_shard_blocks(g, pm, q)[p].src_global_ids; both ends of an error
/// exchange can derive the row ordering without shipping ids.
std::vector<std::vector<NodeId>> outgoing_src_ids(const Graph& g, const PartitionMap& pm,
                                                  std::int32_t p,
                                                  const std::vector<char>& active_dst = {});

}  // namespace sargraph
