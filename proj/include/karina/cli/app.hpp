#pragma once

// Command-line front end: subcommand dispatch, config resolution, exit codes.

#include <CLI11.hpp>

#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "karina/cli/commands.hpp"

namespace karina::cli {

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kRuntimeFailure = 2 };

/// Applies --config, then each --set in order, then --seed.
inline RunConfig resolve_config(const std::string& config_path, const std::vector<std::string>& sets,
                                const std::string& seed) {
  RunConfig cfg = config_path.empty() ? RunConfig{} : RunConfig::from_file(config_path);
  for (const auto& kv : sets) cfg.set_assignment(kv);
  if (!seed.empty()) cfg.set("seed", seed);
  cfg.integer("seed");
  return cfg;
}

inline void mark_failed(const fs::path& out, const std::string& message) {
  try {
    write_text(out / "FAILED", message + "\n");
  } catch (const std::exception&) {
  }
}

/// Runs one invocation; returns the process exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"KARINA desk-scale weather model: train, finetune, evaluate, rollout, ablate"};
  app.require_subcommand(1, 1);
  std::string config_path, out_dir, seed;
  std::vector<std::string> sets;
  bool quiet = false;

  const std::map<std::string, std::string> descriptions{
      {"train", "train a model from scratch"},
      {"finetune", "fine-tune a checkpoint on lag-augmented pairs"},
      {"evaluate", "score forecasts with latitude-weighted RMSE and ACC"},
      {"rollout", "run an autoregressive forecast and drift report"},
      {"ablate", "train and compare the padding/SE variants"},
      {"generate", "write the synthetic dataset as a grid file"}};
  for (const auto& [name, desc] : descriptions) {
    auto* sub = app.add_subcommand(name, desc);
    sub->add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
    sub->add_option("--set", sets, "override one key (key=value), repeatable")->allow_extra_args(false);
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "random seed (overrides the config)");
    sub->add_flag("--quiet", quiet, "suppress progress lines");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kSuccess : kUsageError;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  const fs::path dir(out_dir);

  CommandContext ctx;
  ctx.out = dir;
  ctx.log = quiet ? nullptr : &out;
  try {
    ctx.cfg = resolve_config(config_path, sets, seed);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << std::endl;
    return kUsageError;
  }

  try {
    fs::create_directories(dir);
    fs::remove(dir / "FAILED");
    write_text(dir / "resolved_config.txt", ctx.cfg.resolved_text());
  } catch (const std::exception& e) {
    err << "error: cannot prepare output directory " << dir.string() << ": " << e.what() << std::endl;
    return kRuntimeFailure;
  }

  const std::map<std::string, std::function<bool()>> commands{
      {"train", [&] { return cmd_train(ctx), true; }},
      {"finetune", [&] { return cmd_finetune(ctx), true; }},
      {"evaluate", [&] { return cmd_evaluate(ctx), true; }},
      {"rollout", [&] { return cmd_rollout(ctx); }},
      {"ablate", [&] { return cmd_ablate(ctx), true; }},
      {"generate", [&] { return cmd_generate(ctx), true; }}};
  try {
    if (!commands.at(command)()) {
      const std::string msg = command + ": rollout blew up; partial outputs written";
      err << "error: " << msg << std::endl;
      mark_failed(dir, msg);
      return kRuntimeFailure;
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << std::endl;
    mark_failed(dir, e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << std::endl;
    mark_failed(dir, e.what());
    return kRuntimeFailure;
  }
  return kSuccess;
}

}  // namespace karina::cli
