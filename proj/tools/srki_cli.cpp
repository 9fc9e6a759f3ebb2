// Command-line driver for the data / training / evaluation pipeline.

#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "srki/pipeline.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kValidation = 1;
constexpr int kRuntime = 2;

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Selective KB injection: data generation, two-stage adapter training, evaluation"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  std::string checkpoint;
  app.add_option("--config", config_path, "Run configuration (JSON)")->required();
  app.add_option("--seed", seed, "Override the configured run seed");
  app.add_option("--out", out_dir, "Artifact directory");

  app.add_subcommand("gen-data", "Generate triples, KB and QA corpus");
  app.add_subcommand("train-stage1", "Optional backbone pretraining, then stage-1 adapter training");
  app.add_subcommand("identify-layer", "Probe every layer and pick the retrieval layer");
  app.add_subcommand("train-stage2", "Stage-2 training with the attention loss");
  auto* eval = app.add_subcommand("eval", "Metrics report over KB sizes, policies and seeds");
  eval->add_option("--checkpoint", checkpoint, "Adapter checkpoint (default: stage-2 output)");
  app.add_subcommand("bench-memory", "Analytic memory sweep over KB sizes");
  app.add_subcommand("ablate", "Reuse versus per-layer versus random pre-retrieval injection");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kValidation;
  }

  srki::RunConfig cfg;
  try {
    cfg = srki::load_config(config_path);
    if (seed) srki::apply_seed(cfg, *seed);
    cfg.validate();
  } catch (const std::exception& e) {
    std::cerr << "invalid configuration: " << e.what() << '\n';
    return kValidation;
  }

  const std::filesystem::path out(out_dir);
  const std::string cmd = app.get_subcommands().front()->get_name();
  try {
    std::filesystem::create_directories(out);
    if (cmd == "gen-data") {
      srki::cmd_gen_data(cfg, out);
    } else if (cmd == "train-stage1") {
      srki::cmd_train_stage1(cfg, out);
    } else if (cmd == "identify-layer") {
      srki::cmd_identify_layer(cfg, out);
    } else if (cmd == "train-stage2") {
      srki::cmd_train_stage2(cfg, out);
    } else if (cmd == "eval") {
      std::optional<std::filesystem::path> ckpt;
      if (!checkpoint.empty()) ckpt = checkpoint;
      srki::cmd_eval(cfg, out, ckpt);
    } else if (cmd == "bench-memory") {
      srki::cmd_bench_memory(cfg, out);
    } else if (cmd == "ablate") {
      srki::cmd_ablate(cfg, out);
    }
  } catch (const srki::ConfigError& e) {
    std::cerr << cmd << ": invalid input: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << cmd << ": " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}
