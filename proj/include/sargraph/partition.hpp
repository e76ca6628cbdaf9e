#pragma once

#include "sargraph/graph.hpp"

#include <string>
#include <vector>

namespace sargraph {

struct PartitionMap {
  std::vector<std::int32_t> assignment;  // node -> partition id
  std::int32_t num_parts = 1;

  NodeId num_nodes() const { return NodeId(assignment.size()); }
};

/// Balanced partitioner: seeded multi-source BFS growth under per-part
/// capacity caps, round-robin fill for anything BFS never reaches.
/// Part sizes differ by at most one; deterministic for a fixed seed.
PartitionMap partition_balanced(const Graph& g, std::int32_t n_parts, std::uint64_t seed);

/// Text format: line i holds the partition id of node i.
PartitionMap load_partition_map(const std::string& path);
void save_partition_map(const std::string& path, const PartitionMap& pm);

void validate_partition(const Graph& g, const PartitionMap& pm);

/// Nodes owned by partition p, ascending global id (the canonical local order).
std::vector<NodeId> owned_nodes(const PartitionMap& pm, std::int32_t p);
std::vector<std::int64_t> part_sizes(const PartitionMap& pm);
std::int64_t edge_cut(const Graph& g, const PartitionMap& pm);

/// Local row index of each node within its owning partition.
std::vector<std::int64_t> local_index_of(const PartitionMap& pm);

}  // namespace sargraph
