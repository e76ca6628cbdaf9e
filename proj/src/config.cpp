#include "sargraph/config.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace sargraph {

namespace {

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw InputError("config: bad boolean for " + key + ": " + v);
}

}  // namespace

TrainConfig parse_config_text(const std::string& text) {
  TrainConfig cfg;
  std::map<int, LayerSpec> layers;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    const std::size_t eq = line.find('=');
    require_input(eq != std::string::npos, "config line " + std::to_string(lineno) + ": expected key=value");
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string{} : s.substr(a, b - a + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));

    if (key.rfind("layer.", 0) == 0) {
      const std::size_t dot = key.find('.', 6);
      require_input(dot != std::string::npos, "config: bad layer key: " + key);
      const int idx = std::stoi(key.substr(6, dot - 6));
      const std::string field = key.substr(dot + 1);
      LayerSpec& ls = layers[idx];
      if (field == "type") ls.type = val;
      else if (field == "dim_out") ls.dim_out = std::stoll(val);
      else if (field == "heads") ls.heads = std::stoi(val);
      else if (field == "slope") ls.slope = std::stod(val);
      else if (field == "activation") ls.activation = val;
      else if (field == "dropout") ls.dropout = std::stod(val);
      else if (field == "batchnorm") ls.batchnorm = parse_bool(val, key);
      else if (field == "bases") ls.bases = std::stoi(val);
      else if (field == "self_weight") ls.self_weight = parse_bool(val, key);
      else throw InputError("config: unknown layer field: " + key);
      continue;
    }

    if (key == "graph") cfg.graph_path = val;
    else if (key == "features") cfg.features_path = val;
    else if (key == "labels") cfg.labels_path = val;
    else if (key == "partition") cfg.partition_path = val;
    else if (key == "n_parts") cfg.n_parts = std::stoi(val);
    else if (key == "part_seed") cfg.part_seed = std::stoull(val);
    else if (key == "train_nodes") cfg.train_nodes = val;
    else if (key == "val_nodes") cfg.val_nodes = val;
    else if (key == "test_nodes") cfg.test_nodes = val;
    else if (key == "partition_out") cfg.partition_out = val;
    else if (key == "metrics_out") cfg.metrics_out = val;
    else if (key == "checkpoint_out") cfg.checkpoint_out = val;
    else if (key == "checkpoint_in") cfg.checkpoint_in = val;
    else if (key == "epochs") cfg.epochs = std::stoi(val);
    else if (key == "lr") cfg.lr = std::stod(val);
    else if (key == "lr_decay") cfg.lr_decay = std::stod(val);
    else if (key == "lr_step") cfg.lr_step = std::stoi(val);
    else if (key == "seed") cfg.seed = std::stoull(val);
    else if (key == "dropout") cfg.dropout = std::stod(val);
    else if (key == "prefetch") cfg.prefetch = parse_bool(val, key);
    else if (key == "mfg") cfg.mfg = parse_bool(val, key);
    else if (key == "undirected") cfg.undirected = parse_bool(val, key);
    else if (key == "fused_attention") cfg.fused_attention = parse_bool(val, key);
    else if (key == "transport") cfg.transport = val;
    else if (key == "dtype") cfg.dtype = val;
    else if (key == "timeout_seconds") cfg.timeout_seconds = std::stod(val);
    else if (key == "bench_epochs") cfg.bench_epochs = std::stoi(val);
    else throw InputError("config: unknown key: " + key);
  }

  int expect = 0;
  for (const auto& [idx, ls] : layers) {
    require_input(idx == expect, "config: layer indices must be contiguous from 0");
    expect++;
    cfg.layers.push_back(ls);
  }
  if (cfg.dropout >= 0.0)
    for (auto& ls : cfg.layers) ls.dropout = cfg.dropout;
  return cfg;
}

TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require_input(bool(in), "cannot open config: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void validate_config(const TrainConfig& cfg, std::int64_t feature_dim, std::int64_t num_classes) {
  require_input(cfg.epochs >= 1, "config: epochs must be >= 1");
  require_input(!cfg.layers.empty(), "config: no layers configured");
  require_input(cfg.transport == "loopback" || cfg.transport == "tcp",
                "config: transport must be loopback or tcp");
  require_input(cfg.dtype == "f32-accum64" || cfg.dtype == "f64",
                "config: dtype must be f32-accum64 or f64");
  std::int64_t dim = feature_dim;
  for (std::size_t i = 0; i < cfg.layers.size(); ++i) {
    const LayerSpec& ls = cfg.layers[i];
    require_input(ls.type == "sage" || ls.type == "gat" || ls.type == "rgcn",
                  "config: unknown layer type: " + ls.type);
    require_input(ls.dim_out >= 1, "config: layer dim_out must be >= 1");
    require_input(ls.dropout >= 0.0 && ls.dropout < 1.0, "config: layer dropout must be in [0,1)");
    if (ls.type == "gat")
      require_input(ls.dim_out % ls.heads == 0, "config: gat dim_out must be divisible by heads");
    dim = ls.dim_out;
  }
  require_input(dim == num_classes,
                "config: last layer dim_out (" + std::to_string(dim) +
                    ") must equal the number of classes (" + std::to_string(num_classes) + ")");
}

}  // namespace sargraph
