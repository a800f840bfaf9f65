#include <iostream>

#include <CLI11.hpp>

#include "fedned/cli.hpp"

namespace fedned::cli {

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "fedned-out";
  std::vector<std::string> sets;
};

void add_common(CLI::App* sub, CommonOptions& opts) {
  sub->add_option("--config", opts.config, "JSON config file");
  sub->add_option("--seed", opts.seed, "master seed (overrides the config)");
  sub->add_option("--out", opts.out, "output directory")->capture_default_str();
  sub->add_option("--set", opts.sets, "dotted-path override, key=value (repeatable)");
}

CliConfig resolve(const CommonOptions& opts) {
  std::optional<std::filesystem::path> path;
  if (!opts.config.empty()) path = opts.config;
  return load_config(path, opts.sets, opts.seed);
}

}  // namespace

int run_app(int argc, char** argv) {
  CLI::App app{"fedned: federated learning with extremely noisy clients"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  CommonOptions run_opts, preset_opts;
  auto* run = app.add_subcommand("run", "run one experiment and write per-round metrics");
  add_common(run, run_opts);

  std::string preset_name;
  auto* preset = app.add_subcommand("preset", "run a preset: weight-sweep, ablation or en-count");
  preset->add_option("name", preset_name, "preset name")->required();
  add_common(preset, preset_opts);

  std::string run_dir;
  int bins = 20;
  auto* inspect = app.add_subcommand("inspect-uncertainty", "histogram of logged model uncertainty");
  inspect->add_option("run_dir", run_dir, "directory written by `run`")->required();
  inspect->add_option("--bins", bins, "histogram bins")->capture_default_str()->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const auto runtime = orchestrator::RuntimeOptions::from_environment();
  try {
    if (*run) {
      const CliConfig config = resolve(run_opts);
      return cmd_run(config, run_opts.out, runtime);
    }
    if (*preset) {
      const auto names = preset_names();
      if (std::find(names.begin(), names.end(), preset_name) == names.end()) {
        std::cerr << "error: unknown preset '" << preset_name << "'; valid presets: weight-sweep, ablation, en-count\n";
        return 2;
      }
      const CliConfig config = resolve(preset_opts);
      return cmd_preset(preset_name, config, preset_opts.out, runtime);
    }
    return cmd_inspect_uncertainty(run_dir, bins);
  } catch (const SchemaError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace fedned::cli
