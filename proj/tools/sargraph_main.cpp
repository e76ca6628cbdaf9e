#include "sargraph/trainer.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>

using namespace sargraph;

namespace {

int env_rank() {
  const char* v = std::getenv("SARGRAPH_RANK");
  return v ? std::atoi(v) : -1;
}
std::string env_rankfile() {
  const char* v = std::getenv("SARGRAPH_RANKFILE");
  return v ? v : "";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sargraph: distributed full-batch GNN training with sequential "
               "aggregation and rematerialization"};
  app.require_subcommand(1);

  std::string config_path, rankfile = env_rankfile(), transport_override;
  int rank = env_rank();

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value configuration file")->required();
    sub->add_option("--rank", rank, "worker rank (tcp transport)");
    sub->add_option("--rankfile", rankfile, "rank file of 'rank host:port' lines (tcp transport)");
    sub->add_option("--transport", transport_override, "loopback|tcp (overrides the config)");
  };

  CLI::App* cmd_partition = app.add_subcommand("partition", "write a balanced partition map");
  CLI::App* cmd_train = app.add_subcommand("train", "run distributed full-batch training");
  CLI::App* cmd_bench =
      app.add_subcommand("bench", "compare vanilla-dp, sar, and sar+fused modes");
  add_common(cmd_partition);
  add_common(cmd_train);
  add_common(cmd_bench);

  CLI11_PARSE(app, argc, argv);

  try {
    TrainConfig cfg = load_config(config_path);
    if (!transport_override.empty()) cfg.transport = transport_override;

    if (cmd_partition->parsed()) {
      const PartitionRunStats st = run_partition(cfg);
      std::cout << "partition sizes:";
      for (auto s : st.sizes) std::cout << ' ' << s;
      std::cout << " edge_cut: " << st.edge_cut << '\n';
      return 0;
    }
    if (cmd_train->parsed()) {
      const TrainResult res = run_train(cfg, rank, rankfile);
      if (!res.epoch_losses.empty()) {
        const auto& acc = res.split_accuracy.back();
        std::cout.precision(17);
        std::cout << "final loss: " << res.final_loss << "\n";
        std::cout.precision(6);
        std::cout << "accuracy train/val/test: " << acc[0] << ' ' << acc[1] << ' ' << acc[2]
                  << '\n';
      } else {
        // non-reporting rank (tcp): rank 0 prints the run summary
        std::cout << "worker " << rank << " done\n";
      }
      return 0;
    }
    if (cmd_bench->parsed()) {
      const BenchResult res = run_bench(cfg, rank, rankfile);
      std::map<std::string, std::pair<double, std::uint64_t>> summary;
      for (const auto& r : res.rows) {
        auto& [secs, peak] = summary[r.mode];
        secs += r.epoch_seconds;
        peak = std::max(peak, std::uint64_t(r.peak_bytes));
      }
      for (const auto& [mode, sp] : summary)
        std::cout << mode << ": total_seconds=" << sp.first << " peak_bytes=" << sp.second << '\n';
      return 0;
    }
  } catch (const InputError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
