#pragma once

#include "sargraph/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace sargraph {

struct LayerSpec {
  std::string type;  // sage | gat | rgcn
  std::int64_t dim_out = 0;
  int heads = 1;
  double slope = 0.2;
  std::string activation;  // default depends on type
  double dropout = 0.0;    // applied to this layer's output (skipped on the last layer)
  bool batchnorm = false;  // likewise
  int bases = 1;           // rgcn
  bool self_weight = false;
};

/// Flat key=value training configuration; layers use repeated
/// layer.<i>.<field> keys. See the README for the full key list.
struct TrainConfig {
  std::string graph_path;
  std::string features_path;
  std::string labels_path;
  std::string partition_path;  // empty: partition with n_parts/part_seed
  int n_parts = 1;
  std::uint64_t part_seed = 0;
  std::string train_nodes, val_nodes, test_nodes;
  std::string partition_out;
  std::string metrics_out;
  std::string checkpoint_out, checkpoint_in;

  int epochs = 100;
  double lr = 0.01;
  double lr_decay = 0.3;
  int lr_step = 30;
  std::uint64_t seed = 1;
  double dropout = -1.0;  // >= 0: overrides every layer's dropout
  bool prefetch = false;
  bool mfg = false;
  bool undirected = false;
  bool fused_attention = true;
  std::string transport = "loopback";  // loopback | tcp
  std::string dtype = "f32-accum64";   // f32-accum64 | f64
  double timeout_seconds = 120.0;
  int bench_epochs = 3;

  std::vector<LayerSpec> layers;

  double lr_at(int epoch) const {
    double v = lr;
    for (int k = lr_step; k <= epoch; k += lr_step) v *= lr_decay;
    return v;
  }
};

TrainConfig parse_config_text(const std::string& text);
TrainConfig load_config(const std::string& path);
void validate_config(const TrainConfig& cfg, std::int64_t feature_dim, std::int64_t num_classes);

}  // namespace sargraph
