#pragma once

#include "sargraph/config.hpp"
#include "sargraph/layers.hpp"

#include <array>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

namespace sargraph {

struct Dataset {
  Graph graph;
  PartitionMap pm;
  Matd features;
  std::vector<std::int32_t> labels;
  std::vector<NodeId> train_nodes, val_nodes, test_nodes;
  std::int64_t num_classes = 0;
};

inline Dataset load_dataset(const TrainConfig& cfg) {
  Dataset ds;
  ds.graph = load_edge_list(cfg.graph_path, cfg.undirected);
  const SarfTensor feat = read_sarf(cfg.features_path);
  require_input(feat.rows == ds.graph.num_nodes, "features: row count differs from graph");
  ds.features = feat.as_f64();
  ds.labels = read_labels(cfg.labels_path);
  require_input(std::int64_t(ds.labels.size()) == ds.graph.num_nodes,
                "labels: row count differs from graph");
  for (std::int32_t y : ds.labels) ds.num_classes = std::max<std::int64_t>(ds.num_classes, y + 1);
  require_input(ds.num_classes >= 2, "labels: need at least two classes");
  if (!cfg.partition_path.empty()) {
    ds.pm = load_partition_map(cfg.partition_path);
    validate_partition(ds.graph, ds.pm);
  } else {
    ds.pm = partition_balanced(ds.graph, cfg.n_parts, cfg.part_seed);
  }
  if (!cfg.train_nodes.empty()) ds.train_nodes = read_node_set(cfg.train_nodes);
  if (!cfg.val_nodes.empty()) ds.val_nodes = read_node_set(cfg.val_nodes);
  if (!cfg.test_nodes.empty()) ds.test_nodes = read_node_set(cfg.test_nodes);
  return ds;
}

struct MetricsRow {
  std::string mode = "train";
  int epoch = 0;
  int worker = 0;
  double epoch_seconds = 0;
  std::int64_t peak_resident_blocks = 0;
  std::uint64_t peak_bytes = 0;
  std::uint64_t fwd_feature_bytes = 0;
  std::uint64_t bwd_feature_bytes = 0;
  std::uint64_t bwd_gradient_bytes = 0;
  std::uint64_t allreduce_bytes = 0;
  double loss = 0;
};

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows,
                              bool with_mode) {
  std::ofstream out(path);
  require_input(bool(out), "cannot write metrics: " + path);
  if (with_mode) out << "mode,";
  out << "epoch,worker,epoch_seconds,peak_resident_blocks,peak_bytes,fwd_feature_bytes,"
         "bwd_feature_bytes,bwd_gradient_bytes,allreduce_bytes,loss\n";
  out.precision(17);
  for (const auto& r : rows) {
    if (with_mode) out << r.mode << ',';
    out << r.epoch << ',' << r.worker << ',' << r.epoch_seconds << ',' << r.peak_resident_blocks
        << ',' << r.peak_bytes << ',' << r.fwd_feature_bytes << ',' << r.bwd_feature_bytes << ','
        << r.bwd_gradient_bytes << ',' << r.allreduce_bytes << ',' << r.loss << '\n';
  }
}

/// Thread-safe collection shared by loopback workers; rows survive a worker
/// failure so a partial CSV can still be flushed.
struct MetricsSink {
  std::mutex mu;
  std::vector<MetricsRow> rows;
  std::vector<double> losses;
  std::vector<std::array<double, 3>> accuracies;

  void add_row(MetricsRow r) {
    std::lock_guard lk(mu);
    rows.push_back(std::move(r));
  }
  void add_epoch(double loss, std::array<double, 3> acc) {
    std::lock_guard lk(mu);
    losses.push_back(loss);
    accuracies.push_back(acc);
  }
  std::vector<std::pair<int, std::uint64_t>> param_hashes;
  void add_param_hash(int worker, std::uint64_t h) {
    std::lock_guard lk(mu);
    param_hashes.emplace_back(worker, h);
  }
};

inline std::uint64_t fnv1a(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

struct TrainResult {
  std::vector<double> epoch_losses;
  std::vector<std::array<double, 3>> split_accuracy;  // train, val, test
  std::map<std::string, Matd> final_params;
  std::vector<MetricsRow> metrics;
  std::vector<std::int64_t> computed_nodes;  // per layer, summed across workers
  std::vector<std::pair<int, std::uint64_t>> param_hashes;  // per worker
  double final_loss = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

template <class Scalar>
struct WorkerModel {
  std::vector<std::unique_ptr<LayerBase<Scalar>>> layers;
  std::vector<std::unique_ptr<BatchNormLayer<Scalar>>> bns;  // per layer, null if off
  std::vector<double> dropouts;
  std::vector<GatLayer<Scalar>*> gats;
};

template <class Scalar>
WorkerModel<Scalar> build_model(const TrainConfig& cfg, ParamStore<Scalar>& ps,
                                std::int64_t feature_dim, std::int32_t num_relations,
                                std::int64_t n_local, std::shared_ptr<const Vecd> degrees,
                                std::shared_ptr<const Matd> rel_degrees) {
  WorkerModel<Scalar> m;
  std::int64_t dim = feature_dim;
  for (std::size_t l = 0; l < cfg.layers.size(); ++l) {
    const LayerSpec& ls = cfg.layers[l];
    const std::string name = "layer" + std::to_string(l);
    const bool last = l + 1 == cfg.layers.size();
    Activation act;
    if (!ls.activation.empty())
      act = activation_from_name(ls.activation);
    else if (last)
      act = Activation::Identity;
    else
      act = ls.type == "gat" ? Activation::Elu : Activation::Relu;

    if (ls.type == "sage") {
      m.layers.push_back(std::make_unique<GraphSageLayer<Scalar>>(ps, name, dim, ls.dim_out, act,
                                                                  degrees, cfg.seed, l + 1));
    } else if (ls.type == "gat") {
      auto gat = std::make_unique<GatLayer<Scalar>>(ps, name, dim, ls.dim_out, ls.heads, ls.slope,
                                                    act, n_local, cfg.seed, l + 1);
      gat->set_fused(cfg.fused_attention);
      m.gats.push_back(gat.get());
      m.layers.push_back(std::move(gat));
    } else if (ls.type == "rgcn") {
      m.layers.push_back(std::make_unique<RgcnLayer<Scalar>>(ps, name, dim, ls.dim_out,
                                                             num_relations, ls.bases,
                                                             ls.self_weight, act, rel_degrees,
                                                             cfg.seed, l + 1));
    }
    dim = ls.dim_out;
    if (!last && ls.batchnorm)
      m.bns.push_back(std::make_unique<BatchNormLayer<Scalar>>(ps, "bn" + std::to_string(l), dim));
    else
      m.bns.push_back(nullptr);
    m.dropouts.push_back(last ? 0.0 : ls.dropout);
  }
  return m;
}

template <class Scalar>
struct WorkerOutput {
  std::map<std::string, Matd> final_params;  // rank 0
  TensorArchive checkpoint;                  // rank 0
  std::vector<std::int64_t> computed_nodes;
};

inline std::vector<char> flags_of(NodeId n, std::span<const NodeId> nodes) {
  return node_flags(n, nodes);
}

/// The full training loop for one worker. Runs the SAR forward/backward per
/// layer per epoch, synchronizes gradients, and steps Adam identically on
/// every worker.
template <class Scalar>
WorkerOutput<Scalar> worker_run(const TrainConfig& cfg, const Dataset& ds, Transport& tp,
                                MetricsSink& sink, RematPolicy policy, bool fused,
                                const std::string& mode_name, int epochs) {
  const int me = tp.rank();
  const int world = tp.world_size();
  require_input(world == ds.pm.num_parts, "worker count differs from partition count");
  const Graph& g = ds.graph;
  const int num_layers = int(cfg.layers.size());

  const std::vector<NodeId> owned = owned_nodes(ds.pm, me);
  const std::int64_t n_local = std::int64_t(owned.size());

  Mat<Scalar> local_x(n_local, ds.features.cols());
  for (std::int64_t i = 0; i < n_local; ++i)
    local_x.row(i) = ds.features.row(owned[std::size_t(i)]).template cast<Scalar>();

  std::vector<std::int32_t> local_labels(static_cast<std::size_t>(n_local));
  for (std::int64_t i = 0; i < n_local; ++i)
    local_labels[std::size_t(i)] = ds.labels[std::size_t(owned[std::size_t(i)])];

  const std::vector<char> train_glob = flags_of(g.num_nodes, ds.train_nodes);
  const std::vector<char> val_glob = flags_of(g.num_nodes, ds.val_nodes);
  const std::vector<char> test_glob = flags_of(g.num_nodes, ds.test_nodes);
  std::vector<char> train_mask(std::size_t(n_local), 0),
      val_mask(std::size_t(n_local), 0), test_mask(std::size_t(n_local), 0);
  for (std::int64_t i = 0; i < n_local; ++i) {
    const NodeId v = owned[std::size_t(i)];
    const bool labeled = local_labels[std::size_t(i)] >= 0;
    train_mask[std::size_t(i)] = train_glob[std::size_t(v)] && labeled;
    val_mask[std::size_t(i)] = val_glob[std::size_t(v)] && labeled;
    test_mask[std::size_t(i)] = test_glob[std::size_t(v)] && labeled;
  }
  std::int64_t global_train_count = 0;
  for (NodeId v = 0; v < g.num_nodes; ++v)
    if (train_glob[std::size_t(v)] && ds.labels[std::size_t(v)] >= 0) global_train_count++;
  require_input(global_train_count > 0, "no labeled training nodes");

  // message-flow masks: outputs are consumed at every split node
  std::vector<std::vector<char>> active(static_cast<std::size_t>(num_layers));
  std::vector<std::int64_t> computed_local(std::size_t(num_layers), n_local);
  if (cfg.mfg) {
    std::vector<NodeId> consumed;
    for (NodeId v = 0; v < g.num_nodes; ++v)
      if (train_glob[std::size_t(v)] || val_glob[std::size_t(v)] || test_glob[std::size_t(v)])
        consumed.push_back(v);
    const auto masks = compute_mfg_masks(g, consumed, num_layers);
    for (int l = 0; l < num_layers; ++l) {
      active[std::size_t(l)] = flags_of(g.num_nodes, masks[std::size_t(l) + 1]);
      std::int64_t c = 0;
      for (NodeId v : owned)
        if (active[std::size_t(l)][std::size_t(v)]) c++;
      computed_local[std::size_t(l)] = c;
    }
  }

  std::vector<LayerCommPlan> plans;
  plans.reserve(static_cast<std::size_t>(num_layers));
  for (int l = 0; l < num_layers; ++l)
    plans.push_back(build_comm_plan(g, ds.pm, me, active[std::size_t(l)]));

  auto deg = std::make_shared<Vecd>(n_local);
  {
    const auto full = in_degrees(g);
    for (std::int64_t i = 0; i < n_local; ++i)
      (*deg)(i) = double(full[std::size_t(owned[std::size_t(i)])]);
  }
  auto rel_deg = std::make_shared<Matd>(n_local, g.num_relations);
  {
    const auto full = in_degrees_by_relation(g);
    for (std::int64_t i = 0; i < n_local; ++i)
      for (std::int32_t r = 0; r < g.num_relations; ++r)
        (*rel_deg)(i, r) =
            double(full[std::size_t(owned[std::size_t(i)]) * std::size_t(g.num_relations) +
                        std::size_t(r)]);
  }

  ParamStore<Scalar> ps;
  WorkerModel<Scalar> model = build_model(cfg, ps, ds.features.cols(), g.num_relations, n_local,
                                          deg, rel_deg);
  for (auto* gat : model.gats) gat->set_fused(fused);

  int epoch_start = 0;
  if (!cfg.checkpoint_in.empty()) {
    const TensorArchive a = read_archive(cfg.checkpoint_in);
    ps.load_archive(a);
    for (auto& bn : model.bns)
      if (bn) bn->load_state(a);
    epoch_start = int(a.at("meta/epoch").as_f64()(0, 0));
  }

  MemoryLedger mem;
  CommLedger comm;
  tp.attach_comm_ledger(&comm);

  for (int epoch = epoch_start; epoch < epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    tp.epoch_begin();
    mem.reset_epoch();
    comm.reset();

    Tape<Scalar> tape(&ps, &mem);
    Var h = tape.input(local_x);
    for (int l = 0; l < num_layers; ++l) {
      LayerRun<Scalar> run{tape,       tp,
                           &mem,       &plans[std::size_t(l)],
                           SarOptions{std::uint32_t(l), cfg.prefetch, policy},
                           cfg.seed,   std::uint64_t(epoch),
                           std::span<const NodeId>(owned)};
      h = model.layers[std::size_t(l)]->forward(run, h);
      if (l + 1 < num_layers) {
        if (model.bns[std::size_t(l)]) h = model.bns[std::size_t(l)]->forward(run, h);
        if (model.dropouts[std::size_t(l)] > 0.0)
          h = dropout(tape, h, model.dropouts[std::size_t(l)], cfg.seed, std::uint64_t(epoch),
                      std::uint64_t(l), std::span<const NodeId>(owned));
      }
    }
    const Var loss = nll_masked(tape, h, local_labels, train_mask, global_train_count);

    // one collective for the epoch stats: loss, then correct/count per split
    std::vector<double> stats(7, 0.0);
    stats[0] = loss_partial(tape, loss);
    {
      const Mat<Scalar>& logits = tape.value(h);
      const std::vector<char>* masks[3] = {&train_mask, &val_mask, &test_mask};
      for (int s = 0; s < 3; ++s)
        for (std::int64_t i = 0; i < n_local; ++i) {
          if (!(*masks[s])[std::size_t(i)]) continue;
          Eigen::Index best;
          logits.row(i).maxCoeff(&best);
          stats[std::size_t(1 + 2 * s)] += double(best == local_labels[std::size_t(i)]);
          stats[std::size_t(2 + 2 * s)] += 1.0;
        }
    }
    tp.allreduce_sum(stats);
    const double global_loss = stats[0];
    std::array<double, 3> acc{};
    for (int s = 0; s < 3; ++s)
      acc[std::size_t(s)] = stats[std::size_t(2 + 2 * s)] > 0
                                ? stats[std::size_t(1 + 2 * s)] / stats[std::size_t(2 + 2 * s)]
                                : 0.0;

    ps.zero_grads();
    tape.backward_from(loss);
    allreduce_param_grads(ps, tp);
    ps.adam_step(cfg.lr_at(epoch));

    if (policy == RematPolicy::Sar) {
      const LedgerReport report = ledger_check(mem, cfg.prefetch);
      if (!report.pass) throw ProtocolError("residency ledger: " + report.message);
    }

    MetricsRow row;
    row.mode = mode_name;
    row.epoch = epoch;
    row.worker = me;
    row.epoch_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    row.peak_resident_blocks = mem.peak_resident();
    row.peak_bytes = mem.peak_bytes();
    row.fwd_feature_bytes = comm.fwd_feature_bytes;
    row.bwd_feature_bytes = comm.bwd_feature_bytes;
    row.bwd_gradient_bytes = comm.bwd_gradient_bytes;
    row.allreduce_bytes = comm.allreduce_bytes;
    row.loss = global_loss;
    sink.add_row(row);
    if (me == 0) sink.add_epoch(global_loss, acc);
  }

  // engine-side computed-node counts (aggregation destinations per layer)
  std::vector<double> counts(static_cast<std::size_t>(num_layers));
  for (int l = 0; l < num_layers; ++l) counts[std::size_t(l)] = double(computed_local[std::size_t(l)]);
  tp.allreduce_sum(counts);

  WorkerOutput<Scalar> out;
  out.computed_nodes.resize(static_cast<std::size_t>(num_layers));
  for (int l = 0; l < num_layers; ++l)
    out.computed_nodes[std::size_t(l)] = std::int64_t(std::llround(counts[std::size_t(l)]));
  {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto& v = ps.entry(std::int32_t(i)).value;
      h ^= fnv1a(v.data(), std::size_t(v.size()) * sizeof(Scalar));
      h *= 1099511628211ULL;
    }
    sink.add_param_hash(me, h);
  }
  if (me == 0) {
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const auto& e = ps.entry(std::int32_t(i));
      out.final_params[e.name] = e.value.template cast<double>();
    }
    out.checkpoint = ps.to_archive();
    for (const auto& bn : model.bns)
      if (bn) bn->save_state(out.checkpoint);
    Matd ep(1, 1);
    ep(0, 0) = double(epochs);
    out.checkpoint["meta/epoch"] = sarf_from_f64(ep, DType::F64);
  }
  tp.attach_comm_ledger(nullptr);
  return out;
}

template <class Scalar>
TrainResult run_constrained(const TrainConfig& cfg, RematPolicy policy, bool fused,
                            const std::string& mode_name, int epochs, int tcp_rank,
                            const std::string& rankfile) {
  const Dataset ds = load_dataset(cfg);
  validate_config(cfg, ds.features.cols(), ds.num_classes);

  MetricsSink sink;
  WorkerOutput<Scalar> rank0_out;
  TransportOptions topt{cfg.timeout_seconds};

  if (cfg.transport == "loopback") {
    const int world = ds.pm.num_parts;
    LoopbackHub hub(world, topt);
    std::vector<std::unique_ptr<LoopbackTransport>> tps(static_cast<std::size_t>(world));
    for (int r = 0; r < world; ++r) tps[std::size_t(r)] = hub.transport(r);
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(world));
    std::vector<std::thread> threads;
    threads.reserve(std::size_t(world));
    for (int r = 0; r < world; ++r) {
      threads.emplace_back([&, r] {
        try {
          auto out = worker_run<Scalar>(cfg, ds, *tps[std::size_t(r)], sink, policy, fused,
                                        mode_name, epochs);
          if (r == 0) rank0_out = std::move(out);
        } catch (...) {
          errors[std::size_t(r)] = std::current_exception();
          tps[std::size_t(r)]->abort_all();
        }
      });
    }
    for (auto& t : threads) t.join();
    for (const auto& e : errors)
      if (e) {
        if (!cfg.metrics_out.empty()) write_metrics_csv(cfg.metrics_out, sink.rows, false);
        std::rethrow_exception(e);
      }
  } else {
    require_input(tcp_rank >= 0, "tcp transport requires a rank");
    require_input(!rankfile.empty(), "tcp transport requires a rank file");
    const auto entries = parse_rankfile(rankfile);
    require_input(int(entries.size()) == ds.pm.num_parts,
                  "rank file worker count differs from partition count");
    TcpTransport tp(tcp_rank, entries, topt);
    try {
      auto out = worker_run<Scalar>(cfg, ds, tp, sink, policy, fused, mode_name, epochs);
      if (tcp_rank == 0) rank0_out = std::move(out);
    } catch (...) {
      tp.broadcast_abort();
      std::string metrics_path = cfg.metrics_out;
      if (!metrics_path.empty())
        write_metrics_csv(metrics_path + ".rank" + std::to_string(tcp_rank), sink.rows, false);
      throw;
    }
  }

  TrainResult res;
  res.metrics = std::move(sink.rows);
  std::sort(res.metrics.begin(), res.metrics.end(), [](const MetricsRow& a, const MetricsRow& b) {
    return std::tie(a.epoch, a.worker) < std::tie(b.epoch, b.worker);
  });
  res.epoch_losses = std::move(sink.losses);
  res.split_accuracy = std::move(sink.accuracies);
  res.param_hashes = std::move(sink.param_hashes);
  res.final_params = std::move(rank0_out.final_params);
  res.computed_nodes = std::move(rank0_out.computed_nodes);
  if (!res.epoch_losses.empty()) res.final_loss = res.epoch_losses.back();
  std::string metrics_path = cfg.metrics_out;
  if (!metrics_path.empty() && cfg.transport == "tcp")
    metrics_path += ".rank" + std::to_string(tcp_rank);
  if (!metrics_path.empty()) write_metrics_csv(metrics_path, res.metrics, false);
  if (!cfg.checkpoint_out.empty() && !rank0_out.checkpoint.empty())
    write_archive(cfg.checkpoint_out, rank0_out.checkpoint);
  return res;
}

}  // namespace detail

template <class Scalar>
TrainResult run_train_typed(const TrainConfig& cfg, int tcp_rank = -1,
                            const std::string& rankfile = "") {
  const RematPolicy policy = RematPolicy::Sar;
  return detail::run_constrained<Scalar>(cfg, policy, cfg.fused_attention, "train", cfg.epochs,
                                         tcp_rank, rankfile);
}

inline TrainResult run_train(const TrainConfig& cfg, int tcp_rank = -1,
                             const std::string& rankfile = "") {
  if (cfg.dtype == "f64") return run_train_typed<double>(cfg, tcp_rank, rankfile);
  return run_train_typed<float>(cfg, tcp_rank, rankfile);
}

struct BenchResult {
  std::vector<MetricsRow> rows;  // mode column distinguishes the runs
};

/// Three modes over the same data and seeds: vanilla domain-parallel
/// (retain everything, materialized attention), sar (free + rematerialize,
/// blockwise attention), sar+fused (free + rematerialize, fused attention).
template <class Scalar>
BenchResult run_bench_typed(const TrainConfig& cfg, int tcp_rank = -1,
                            const std::string& rankfile = "") {
  BenchResult out;
  const std::array<std::tuple<std::string, RematPolicy, bool>, 3> modes = {
      std::tuple{std::string("vanilla-dp"), RematPolicy::VanillaDp, false},
      std::tuple{std::string("sar"), RematPolicy::Sar, false},
      std::tuple{std::string("sar+fused"), RematPolicy::Sar, true},
  };
  for (const auto& [name, policy, fused] : modes) {
    TrainConfig c = cfg;
    c.metrics_out.clear();
    c.checkpoint_out.clear();
    c.checkpoint_in.clear();
    const TrainResult r =
        detail::run_constrained<Scalar>(c, policy, fused, name, cfg.bench_epochs, tcp_rank, rankfile);
    out.rows.insert(out.rows.end(), r.metrics.begin(), r.metrics.end());
  }
  if (!cfg.metrics_out.empty()) write_metrics_csv(cfg.metrics_out, out.rows, true);
  return out;
}

inline BenchResult run_bench(const TrainConfig& cfg, int tcp_rank = -1,
                             const std::string& rankfile = "") {
  if (cfg.dtype == "f64") return run_bench_typed<double>(cfg, tcp_rank, rankfile);
  return run_bench_typed<float>(cfg, tcp_rank, rankfile);
}

struct PartitionRunStats {
  std::vector<std::int64_t> sizes;
  std::int64_t edge_cut = 0;
};

inline PartitionRunStats run_partition(const TrainConfig& cfg) {
  require_input(!cfg.partition_out.empty(), "partition: partition_out not set");
  const Graph g = load_edge_list(cfg.graph_path, cfg.undirected);
  const PartitionMap pm = partition_balanced(g, cfg.n_parts, cfg.part_seed);
  save_partition_map(cfg.partition_out, pm);
  PartitionRunStats st;
  st.sizes = part_sizes(pm);
  st.edge_cut = edge_cut(g, pm);
  return st;
}

}  // namespace sargraph
