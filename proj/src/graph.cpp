#include "sargraph/graph.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace sargraph {

Graph build_csr(std::span<const Edge> edges, NodeId num_nodes, std::int32_t num_relations) {
  require_input(num_nodes >= 0, "build_csr: negative node count");
  std::int32_t max_rel = -1;
  for (const Edge& e : edges) {
    require_input(e.src >= 0 && e.src < num_nodes, "build_csr: source id out of range");
    require_input(e.dst >= 0 && e.dst < num_nodes, "build_csr: destination id out of range");
    require_input(e.rel >= 0, "build_csr: negative relation id");
    max_rel = std::max(max_rel, e.rel);
  }
  if (num_relations == 0) num_relations = std::max<std::int32_t>(1, max_rel + 1);
  require_input(max_rel < num_relations, "build_csr: relation id out of range");

  std::vector<std::size_t> order(edges.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (edges[a].dst != edges[b].dst) return edges[a].dst < edges[b].dst;
    return edges[a].src < edges[b].src;
  });

  Graph g;
  g.num_nodes = num_nodes;
  g.num_relations = num_relations;
  g.indptr.assign(std::size_t(num_nodes) + 1, 0);
  g.indices.reserve(edges.size());
  const bool hetero = num_relations > 1;
  if (hetero) g.edge_type.reserve(edges.size());
  for (std::size_t i : order) {
    g.indptr[std::size_t(edges[i].dst) + 1]++;
    g.indices.push_back(edges[i].src);
    if (hetero) g.edge_type.push_back(edges[i].rel);
  }
  for (std::size_t i = 1; i < g.indptr.size(); ++i) g.indptr[i] += g.indptr[i - 1];
  return g;
}

std::vector<Edge> edges_of(const Graph& g) {
  std::vector<Edge> out;
  out.reserve(std::size_t(g.num_edges()));
  for (NodeId i = 0; i < g.num_nodes; ++i)
    for (std::int64_t k = g.indptr[size_t(i)]; k < g.indptr[size_t(i) + 1]; ++k)
      out.push_back({g.indices[size_t(k)], i, g.heterogeneous() ? g.edge_type[size_t(k)] : 0});
  return out;
}

Graph load_edge_list(const std::string& path, bool symmetrize) {
  std::ifstream in(path);
  require_input(bool(in), "cannot open edge list: " + path);
  std::vector<Edge> edges;
  NodeId max_id = -1;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t pos = line.find_first_not_of(" \t\r");
    if (pos == std::string::npos || line[pos] == '#') continue;
    std::istringstream ls(line);
    Edge e;
    long long src, dst, rel = 0;
    if (!(ls >> src >> dst)) throw InputError(path + ":" + std::to_string(lineno) + ": malformed edge line");
    ls >> rel;
    require_input(src >= 0 && dst >= 0 && rel >= 0, path + ":" + std::to_string(lineno) + ": negative id");
    e.src = src;
    e.dst = dst;
    e.rel = std::int32_t(rel);
    edges.push_back(e);
    max_id = std::max({max_id, e.src, e.dst});
  }
  if (symmetrize) {
    const std::size_t n = edges.size();
    for (std::size_t i = 0; i < n; ++i)
      if (edges[i].src != edges[i].dst) edges.push_back({edges[i].dst, edges[i].src, edges[i].rel});
  }
  return build_csr(edges, max_id + 1);
}

void save_edge_list(const std::string& path, const Graph& g) {
  std::ofstream out(path);
  require_input(bool(out), "cannot write edge list: " + path);
  for (const Edge& e : edges_of(g)) {
    if (g.heterogeneous())
      out << e.src << ' ' << e.dst << ' ' << e.rel << '\n';
    else
      out << e.src << ' ' << e.dst << '\n';
  }
}

std::vector<std::int64_t> in_degrees(const Graph& g) {
  std::vector<std::int64_t> deg(static_cast<std::size_t>(g.num_nodes));
  for (NodeId i = 0; i < g.num_nodes; ++i) deg[size_t(i)] = g.in_degree(i);
  return deg;
}

std::vector<std::int64_t> in_degrees_by_relation(const Graph& g) {
  std::vector<std::int64_t> deg(std::size_t(g.num_nodes) * std::size_t(g.num_relations), 0);
  for (NodeId i = 0; i < g.num_nodes; ++i)
    for (std::int64_t k = g.indptr[size_t(i)]; k < g.indptr[size_t(i) + 1]; ++k) {
      const std::int32_t r = g.heterogeneous() ? g.edge_type[size_t(k)] : 0;
      deg[std::size_t(i) * std::size_t(g.num_relations) + std::size_t(r)]++;
    }
  return deg;
}

}  // namespace sargraph
