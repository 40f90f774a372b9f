// SPDX-License-Identifier: Apache-2.0
//
// spu <init|prune|plan|train|report> [--config FILE] [flags] [--set key=value ...]
#include <CLI11.hpp>

#include <iostream>

#include "spu/cli.hpp"

namespace {

struct FlagSpec {
  const char* flag;
  const char* key;
  const char* help;
};

constexpr FlagSpec kFlags[] = {
    {"--model", "model", "input checkpoint (omit to build from arch.*)"},
    {"--plan", "plan", "plan file to start fixed/dynamic training from"},
    {"--out", "out", "output directory"},
    {"--seed", "seed", "root seed"},
    {"--mode", "mode", "none, last, full, fixed or dynamic"},
    {"--budget-bytes", "budget_bytes", "extra training memory budget in bytes"},
    {"--ratio", "ratio", "channel ratio r per trainable layer"},
    {"--stage-epochs", "stage_epochs", "j,k,l stage lengths in epochs"},
    {"--epochs", "epochs", "training epochs"},
    {"--reselect-every-steps", "reselect_every_steps", "dynamic redraw interval in steps (0 = once per epoch)"},
    {"--checkpoint-every", "checkpoint_every", "write a checkpoint every N epochs (0 = off)"},
    {"--runs", "report.runs", "comma-separated run directories for report"},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-update fine-tuning under a memory budget"};
  app.require_subcommand(1);
  std::string config;
  std::vector<std::string> sets;
  std::vector<std::string> values(std::size(kFlags));
  app.add_option("--config", config, "run config file (key = value)");
  app.add_option("--set", sets, "override any config key: key=value")->take_all();
  for (std::size_t i = 0; i < std::size(kFlags); ++i) app.add_option(kFlags[i].flag, values[i], kFlags[i].help);
  for (const char* name : spu::cli::kCommands) app.add_subcommand(name)->fallthrough();

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  std::vector<spu::cli::Override> flags;
  for (std::size_t i = 0; i < std::size(kFlags); ++i)
    if (app.count(kFlags[i].flag)) flags.push_back({kFlags[i].key, values[i], kFlags[i].flag});
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      std::cerr << "spu " << command << ": error: --set expects key=value, got '" << s << "'\n";
      return 2;
    }
    flags.push_back({s.substr(0, eq), s.substr(eq + 1), "--set " + s.substr(0, eq)});
  }

  try {
    const auto cfg = spu::cli::load_run_config(config.empty() ? std::nullopt : std::optional<std::filesystem::path>(config),
                                               flags, command);
    return spu::cli::run_command(cfg);
  } catch (const spu::cli::RunError& e) {
    std::cerr << "spu " << command << ": " << spu::cli::describe(e) << '\n';
  } catch (const std::exception& e) {
    std::cerr << "spu " << command << ": error: " << e.what() << '\n';
  }
  return 1;
}
