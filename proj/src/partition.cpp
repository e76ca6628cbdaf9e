#include "sargraph/partition.hpp"

#include "sargraph/rng.hpp"

#include <algorithm>
#include <deque>
#include <fstream>

namespace sargraph {

namespace {

// Undirected adjacency for BFS growth; CSR stores in-edges only.
std::vector<std::vector<NodeId>> undirected_adj(const Graph& g) {
  std::vector<std::vector<NodeId>> adj(static_cast<std::size_t>(g.num_nodes));
  for (NodeId i = 0; i < g.num_nodes; ++i)
    for (std::int64_t k = g.indptr[size_t(i)]; k < g.indptr[size_t(i) + 1]; ++k) {
      const NodeId j = g.indices[size_t(k)];
      adj[size_t(i)].push_back(j);
      if (j != i) adj[size_t(j)].push_back(i);
    }
  for (auto& v : adj) {
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
  }
  return adj;
}

}  // namespace

PartitionMap partition_balanced(const Graph& g, std::int32_t n_parts, std::uint64_t seed) {
  require_input(n_parts >= 1, "partition_balanced: n_parts must be >= 1");
  require_input(NodeId(n_parts) <= std::max<NodeId>(g.num_nodes, 1),
                "partition_balanced: more parts than nodes");

  const NodeId n = g.num_nodes;
  PartitionMap pm;
  pm.num_parts = n_parts;
  pm.assignment.assign(std::size_t(n), -1);
  if (n == 0) return pm;

  std::vector<std::int64_t> cap(std::size_t(n_parts), n / n_parts);
  for (std::int64_t p = 0; p < n % n_parts; ++p) cap[size_t(p)]++;
  std::vector<std::int64_t> size(std::size_t(n_parts), 0);

  const auto adj = undirected_adj(g);
  RngStream rs = RngStream(seed).with(kStreamPartition);

  // Distinct seed nodes, one per part.
  std::vector<std::deque<NodeId>> frontier(static_cast<std::size_t>(n_parts));
  std::uint64_t counter = 0;
  for (std::int32_t p = 0; p < n_parts; ++p) {
    NodeId s;
    do {
      s = NodeId(rs.at(counter++) % std::uint64_t(n));
    } while (pm.assignment[size_t(s)] != -1);
    pm.assignment[size_t(s)] = p;
    size[size_t(p)]++;
    frontier[size_t(p)].push_back(s);
  }

  // Round-robin BFS growth under the caps.
  bool progress = true;
  while (progress) {
    progress = false;
    for (std::int32_t p = 0; p < n_parts; ++p) {
      if (size[size_t(p)] >= cap[size_t(p)]) continue;
      while (!frontier[size_t(p)].empty() && size[size_t(p)] < cap[size_t(p)]) {
        const NodeId u = frontier[size_t(p)].front();
        NodeId grabbed = -1;
        for (NodeId v : adj[size_t(u)]) {
          if (pm.assignment[size_t(v)] == -1) {
            grabbed = v;
            break;
          }
        }
        if (grabbed == -1) {
          frontier[size_t(p)].pop_front();
          continue;
        }
        pm.assignment[size_t(grabbed)] = p;
        size[size_t(p)]++;
        frontier[size_t(p)].push_back(grabbed);
        progress = true;
        break;  // one node per part per round keeps growth balanced
      }
    }
  }

  // Unreached nodes: round-robin into parts below cap, ascending node id.
  std::int32_t next = 0;
  for (NodeId v = 0; v < n; ++v) {
    if (pm.assignment[size_t(v)] != -1) continue;
    while (size[size_t(next)] >= cap[size_t(next)]) next = (next + 1) % n_parts;
    pm.assignment[size_t(v)] = next;
    size[size_t(next)]++;
    next = (next + 1) % n_parts;
  }
  return pm;
}

PartitionMap load_partition_map(const std::string& path) {
  std::ifstream in(path);
  require_input(bool(in), "cannot open partition map: " + path);
  PartitionMap pm;
  long long p;
  std::int32_t max_p = 0;
  while (in >> p) {
    require_input(p >= 0, "partition map: negative partition id");
    pm.assignment.push_back(std::int32_t(p));
    max_p = std::max(max_p, std::int32_t(p));
  }
  pm.num_parts = max_p + 1;
  return pm;
}

void save_partition_map(const std::string& path, const PartitionMap& pm) {
  std::ofstream out(path);
  require_input(bool(out), "cannot write partition map: " + path);
  for (std::int32_t p : pm.assignment) out << p << '\n';
}

void validate_partition(const Graph& g, const PartitionMap& pm) {
  require_input(pm.num_nodes() == g.num_nodes, "partition map size mismatch with graph");
  for (std::int32_t p : pm.assignment)
    require_input(p >= 0 && p < pm.num_parts, "partition id out of range");
}

std::vector<NodeId> owned_nodes(const PartitionMap& pm, std::int32_t p) {
  std::vector<NodeId> out;
  for (NodeId v = 0; v < pm.num_nodes(); ++v)
    if (pm.assignment[size_t(v)] == p) out.push_back(v);
  return out;
}

std::vector<std::int64_t> part_sizes(const PartitionMap& pm) {
  std::vector<std::int64_t> s(std::size_t(pm.num_parts), 0);
  for (std::int32_t p : pm.assignment) s[size_t(p)]++;
  return s;
}

std::int64_t edge_cut(const Graph& g, const PartitionMap& pm) {
  std::int64_t cut = 0;
  for (NodeId i = 0; i < g.num_nodes; ++i)
    for (std::int64_t k = g.indptr[size_t(i)]; k < g.indptr[size_t(i) + 1]; ++k)
      if (pm.assignment[size_t(g.indices[size_t(k)])] != pm.assignment[size_t(i)]) cut++;
  return cut;
}

std::vector<std::int64_t> local_index_of(const PartitionMap& pm) {
  std::vector<std::int64_t> idx(pm.assignment.size());
  std::vector<std::int64_t> counter(std::size_t(pm.num_parts), 0);
  for (NodeId v = 0; v < pm.num_nodes(); ++v)
    idx[size_t(v)] = counter[size_t(pm.assignment[size_t(v)])]++;
  return idx;
}

}  // namespace sargraph
