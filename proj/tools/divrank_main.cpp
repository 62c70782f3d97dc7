// Command-line driver for the diversity re-ranking toolkit.
//
// Subcommands: generate, simulate, build-geo, train, rerank, evaluate,
// plot-data. Exit codes: 0 success, 2 configuration error, 3 data error.

#include <cstdio>
#include <exception>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "divrank/harness.hpp"

namespace {

divrank::RunConfig make_config(const std::string& config_path,
                               std::optional<std::uint64_t> seed,
                               const std::string& out_dir,
                               const std::vector<std::string>& methods) {
  divrank::RunConfig cfg = config_path.empty()
                               ? divrank::RunConfig::defaults()
                               : divrank::RunConfig::load(config_path);
  if (seed) {
    cfg.seed = *seed;
    cfg.train_base.seed = *seed;
    cfg.train_contextual.seed = *seed;
    cfg.train_combined.seed = *seed;
    cfg.train_qce.seed = *seed;
    cfg.pipe.seed = *seed;
  } else {
    cfg.pipe.seed = cfg.seed;
  }
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (!methods.empty()) cfg.methods = methods;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"divrank: two-stage search re-ranking with diversity methods"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> methods;
  app.add_option("--config", config_path, "JSON run configuration file");
  app.add_option("--seed", seed, "override the run seed");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--method", methods, "method name, repeatable")
      ->take_all();

  auto* generate = app.add_subcommand("generate", "write a synthetic corpus");
  std::string phase = "production";
  auto* simulate =
      app.add_subcommand("simulate", "simulate user sessions over a corpus");
  simulate->add_option("--phase", phase,
                       "bootstrap (seeded-shuffle pages) or production");
  auto* build_geo = app.add_subcommand(
      "build-geo", "build KD-trees, merged regions, and targets");
  std::string which_model = "all";
  auto* train = app.add_subcommand("train", "train ranking models");
  train->add_option("--model", which_model,
                    "base | contextual | combined | qce | all");
  auto* rerank =
      app.add_subcommand("rerank", "write re-ranked pages for held-out sessions");
  auto* evaluate =
      app.add_subcommand("evaluate", "evaluate methods against the baseline");
  auto* plot_data =
      app.add_subcommand("plot-data", "emit histogram and rank-change CSVs");

  CLI11_PARSE(app, argc, argv);

  try {
    const divrank::RunConfig cfg =
        make_config(config_path, seed, out_dir, methods);
    if (generate->parsed()) {
      divrank::cli_generate(cfg);
    } else if (simulate->parsed()) {
      divrank::cli_simulate(cfg, phase);
    } else if (build_geo->parsed()) {
      divrank::cli_build_geo(cfg);
    } else if (train->parsed()) {
      divrank::cli_train(cfg, which_model);
    } else if (rerank->parsed()) {
      divrank::cli_rerank(cfg);
    } else if (evaluate->parsed()) {
      divrank::cli_evaluate(cfg);
    } else if (plot_data->parsed()) {
      divrank::cli_plot_data(cfg);
    }
  } catch (const divrank::config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const divrank::data_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
