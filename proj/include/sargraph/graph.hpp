#pragma once

#include "sargraph/common.hpp"

#include <string>
#include <vector>

namespace sargraph {

struct Edge {
  NodeId src = 0;
  NodeId dst = 0;
  std::int32_t rel = 0;
};

/// Directed graph in CSR form grouped by destination: indices[indptr[i]..indptr[i+1])
/// are the source ids of the edges into node i, sorted ascending. edge_type is
/// empty for homogeneous graphs and parallel to indices otherwise.
struct Graph {
  NodeId num_nodes = 0;
  std::int32_t num_relations = 1;
  std::vector<std::int64_t> indptr;
  std::vector<NodeId> indices;
  std::vector<std::int32_t> edge_type;

  std::int64_t num_edges() const { return std::int64_t(indices.size()); }
  std::int64_t in_degree(NodeId i) const { return indptr[size_t(i) + 1] - indptr[size_t(i)]; }
  bool heterogeneous() const { return !edge_type.empty(); }
};

/// Build CSR grouped by destination; within each destination the sources are
/// sorted ascending, duplicates preserved (stable for equal (dst, src) keys).
Graph build_csr(std::span<const Edge> edges, NodeId num_nodes, std::int32_t num_relations = 0);

/// Edge-list text file: "src dst" or "src dst rel" per line, '#' comments.
/// num_nodes is max id + 1. symmetrize adds the reverse of every non-loop edge.
Graph load_edge_list(const std::string& path, bool symmetrize);
void save_edge_list(const std::string& path, const Graph& g);

std::vector<Edge> edges_of(const Graph& g);

/// Global in-degree per node.
std::vector<std::int64_t> in_degrees(const Graph& g);
/// Per-relation in-degree, laid out [node * num_relations + rel].
std::vector<std::int64_t> in_degrees_by_relation(const Graph& g);

}  // namespace sargraph
