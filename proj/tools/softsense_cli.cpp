// softsense: simulate -> render -> train-ae -> train-rnn -> imagine -> eval.
//
// Exit codes: 0 success, 2 configuration error, 3 missing/stale dependency,
// 4 numerical divergence, 1 anything else.

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <map>
#include <optional>
#include <string>

#include "softsense/nn/blas.hpp"
#include "softsense/stages.hpp"

namespace {

using namespace softsense;

int threads_from_env() {
  const char* env = std::getenv("SOFTSENSE_THREADS");
  if (!env || !*env) return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1 || n > 1024) {
    throw ConfigError(std::string("SOFTSENSE_THREADS must be a positive integer, got '") + env + "'");
  }
  return static_cast<int>(n);
}

std::string flag_name(const std::string& key) {
  std::string f = key;
  for (char& c : f)
    if (c == '_') c = '-';
  return "--" + f;
}

int run(int argc, char** argv) {
  CLI::App app{"Soft-arm proprioception pipeline: simulate, render, train, imagine, evaluate"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file, out_dir;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  app.add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", seed, "RNG seed (overrides the config)");
  app.add_option("--out", out_dir, "run directory (default runs/<config-hash>-s<seed>)");
  app.add_flag("-q,--quiet", quiet, "suppress progress output");

  std::map<std::string, std::string> overrides;
  for (const std::string& key : RunConfig::keys()) {
    if (key == "seed") continue;
    app.add_option_function<std::string>(
           flag_name(key), [&overrides, key](const std::string& v) { overrides[key] = v; },
           "config key " + key)
        ->group("Config overrides");
  }

  std::vector<std::string> stages;
  for (const std::string& name : stage_names()) {
    app.add_subcommand(name, "run the " + name + " stage")->callback([&stages, name] { stages = {name}; });
  }
  app.add_subcommand("run-all", "run every stage in order")->callback([&stages] { stages = stage_names(); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  StageContext ctx;
  if (!config_file.empty()) ctx.config = RunConfig::load(config_file);
  for (const auto& [k, v] : overrides) ctx.config.set(k, v);
  if (seed) ctx.config.seed = *seed;
  // Surface bad values before any stage starts.
  (void)ctx.config.sim_params();
  (void)ctx.config.sensor_pair_list();
  (void)ctx.config.autoencoder_spec();
  ctx.dir = out_dir.empty() ? default_run_dir(ctx.config) : fs::path(out_dir);
  if (!quiet) ctx.log = [](const std::string& line) { std::cerr << line << std::endl; };
  nn::set_blas_threads(threads_from_env());

  for (const std::string& stage : stages) {
    ctx.log("== " + stage + " (" + ctx.dir.string() + ")");
    run_stage(stage, ctx);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const softsense::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const softsense::DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return 3;
  } catch (const softsense::FormatError& e) {
    std::cerr << "dependency error (unreadable artifact): " << e.what() << "\n";
    return 3;
  } catch (const softsense::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const softsense::DegenerateGeometryError& e) {
    std::cerr << "divergence (degenerate geometry): " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
