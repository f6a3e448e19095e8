// steer: batch runner for repeated-interaction bath steering experiments.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "steer/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Bath steering by repeated ancilla measurements"};
  app.set_version_flag("--version", steer::kVersion);
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;

  for (const char* name : {"spectrum", "simulate", "stats", "sweep"}) {
    auto* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "JSON config")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override run.seed");
    sub->add_option("--threads", threads, "worker threads (beats STEER_THREADS and run.threads)");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    steer::RunOverrides o;
    o.seed = seed;
    o.threads = threads ? threads : steer::env_threads();
    const steer::json raw = steer::read_json_file(config_path);
    const steer::fs::path base = steer::fs::path(config_path).parent_path();

    if (command == "sweep") {
      const auto points = steer::cmd_sweep(raw, base, o);
      for (const auto& [dir, files] : points) steer::write_bundle(steer::fs::path(out_dir) / dir, files);
      std::cout << "sweep: " << points.size() - 1 << " points written to " << out_dir << "\n";
      return 0;
    }
    if (raw.contains("sweep")) {
      throw steer::Error(steer::ErrorCode::ConfigError, "sweep: config holds a sweep axis; use the sweep command");
    }
    steer::ExperimentConfig cfg = steer::parse_config(raw, base);
    steer::apply_overrides(cfg, o);
    const steer::Bundle files = steer::run_command(command, cfg);
    steer::write_bundle(out_dir, files);
    for (const auto& f : files) std::cout << (steer::fs::path(out_dir) / f.name).string() << "\n";
    return 0;
  } catch (const steer::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return steer::exit_code(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
