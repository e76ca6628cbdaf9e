#pragma once

#include "sargraph/graph.hpp"

#include <vector>

namespace sargraph {

/// Message-flow masks: masks[l] is the minimal set of nodes whose layer-l
/// features influence the outputs at the labeled nodes of a num_layers-deep
/// network. masks[num_layers] == labeled; each earlier mask adds the
/// in-neighbors of the one above it (reverse BFS). Returned sorted ascending.
std::vector<std::vector<NodeId>> compute_mfg_masks(const Graph& g,
                                                   std::span<const NodeId> labeled,
                                                   int num_layers);

/// Node-set -> per-node flag vector.
std::vector<char> node_flags(NodeId num_nodes, std::span<const NodeId> nodes);

}  // namespace sargraph
