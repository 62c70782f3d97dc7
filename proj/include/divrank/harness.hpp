#pragma once

// Experiment orchestration: run configuration, the generate/simulate/train
// stages, the evaluation report, and plot-data emission.

#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "divrank/corpus.hpp"
#include "divrank/pipeline.hpp"

namespace divrank {

struct GeoBuildConfig {
  int max_leaf_size = 32;
  double threshold_frac = 0.02;  // fraction of per-market total engagement
};

struct PriceConfig {
  double alpha = 0.5;
  double beta = 2.0;
  int buckets = 10;
  double mu_frac = 1.0 / 3.0;  // mode at the expected price under defaults
  double sigma_frac = 0.2;
};

struct RunConfig {
  GenConfig gen;
  SimConfig sim;
  PipelineConfig pipe;
  NetConfig net;
  TrainConfig train_base;
  TrainConfig train_contextual;
  TrainConfig train_combined;
  TrainConfig train_qce;
  GeoBuildConfig geo;
  PriceConfig price;
  int bootstrap_sessions = 10000;
  int production_sessions = 12000;
  std::uint64_t seed = 7;
  std::string out_dir = "out";
  std::vector<std::string> methods = {"base",       "greedy_mlr",
                                      "locdiv_anneal", "contextual",
                                      "combined",   "qce"};

  static RunConfig defaults();
  // JSON file; absent keys keep their defaults.
  static RunConfig load(const std::string& path);
  nlohmann::json to_json() const;
};

// Deterministic 80/20 split by query id hash.
bool is_holdout_query(std::int64_t query_id);

struct MethodAggregate {
  double mlr = 0.0;
  double ndcg = 0.0;
  double locdiv = 0.0;   // 1 - Hellinger to the location target
  double pricediv = 0.0; // 1 - Hellinger to the price target
};

struct EvalReport {
  std::vector<std::string> methods;            // row order, base first
  std::map<std::string, MethodAggregate> raw;  // per-method means
  std::map<std::string, MethodAggregate> delta_pct;  // 100*(m-base)/|base|
  std::uint64_t seed = 0;
  std::string corpus_hash;
  std::string config_hash;
};

// CLI operations. All paths live under cfg.out_dir.
void cli_generate(const RunConfig& cfg);
// phase is "bootstrap" (seeded-shuffle ranking, no model needed) or
// "production" (pages served by the trained base model).
void cli_simulate(const RunConfig& cfg, const std::string& phase);
void cli_build_geo(const RunConfig& cfg);
// which: base | contextual | combined | qce | all
void cli_train(const RunConfig& cfg, const std::string& which);
EvalReport cli_evaluate(const RunConfig& cfg, bool print_table = true);
void cli_plot_data(const RunConfig& cfg);
void cli_rerank(const RunConfig& cfg);

// generate -> simulate bootstrap -> train base -> simulate production ->
// build-geo -> train second-stage models -> evaluate -> plot-data.
EvalReport run_full_pipeline(const RunConfig& cfg);

// Trains a second-stage model with the surrogate location loss alone and
// reports the mean top-K location Hellinger distance against the base
// ranking on held-out sessions. Requires pipeline artifacts through
// build-geo.
struct LocationOnlyResult {
  double base_hellinger = 0.0;
  double model_hellinger = 0.0;
};
LocationOnlyResult location_only_experiment(const RunConfig& cfg);

// Loads the resources produced by build-geo and train.
Resources load_resources(const RunConfig& cfg,
                         std::vector<TrainedModel>& model_storage,
                         bool need_models);

// Session training examples for the neural module; `with_buckets` attaches
// region/price buckets and targets, `require_pairs` drops sessions without
// a booking.
std::vector<SessionExample> build_session_examples(
    const CorpusIndex& index, std::span<const Session> sessions,
    const Resources* resources, const PipelineConfig& pipe, bool with_buckets,
    bool with_aggregates, bool require_pairs);

EvalReport read_report_csv(const std::string& dir);

}  // namespace divrank
