#include "sargraph/mfg.hpp"

#include <algorithm>

namespace sargraph {

std::vector<char> node_flags(NodeId num_nodes, std::span<const NodeId> nodes) {
  std::vector<char> f(std::size_t(num_nodes), 0);
  for (NodeId v : nodes) {
    require_input(v >= 0 && v < num_nodes, "node set: id out of range");
    f[size_t(v)] = 1;
  }
  return f;
}

std::vector<std::vector<NodeId>> compute_mfg_masks(const Graph& g,
                                                   std::span<const NodeId> labeled,
                                                   int num_layers) {
  require_input(num_layers >= 0, "compute_mfg_masks: negative layer count");
  std::vector<std::vector<NodeId>> masks(static_cast<std::size_t>(num_layers) + 1);
  std::vector<char> flags = node_flags(g.num_nodes, labeled);

  auto collect = [&] {
    std::vector<NodeId> v;
    for (NodeId i = 0; i < g.num_nodes; ++i)
      if (flags[size_t(i)]) v.push_back(i);
    return v;
  };

  masks[std::size_t(num_layers)] = collect();
  for (int l = num_layers - 1; l >= 0; --l) {
    for (NodeId i : masks[std::size_t(l) + 1])
      for (std::int64_t k = g.indptr[size_t(i)]; k < g.indptr[size_t(i) + 1]; ++k)
        flags[size_t(g.indices[size_t(k)])] = 1;
    masks[std::size_t(l)] = collect();
  }
  return masks;
}

}  // namespace sargraph
