#pragma once

// Two-stage ranking: base scoring of the retrieval set, top-T windowing,
// and second-stage re-ranking by the configured method.

#include <map>
#include <optional>
#include <string>

#include "divrank/corpus.hpp"
#include "divrank/geodiv.hpp"
#include "divrank/heuristic.hpp"
#include "divrank/neural.hpp"
#include "divrank/pricediv.hpp"

namespace divrank {

enum class Method { BaseOnly, GreedyMlr, LocdivAnneal, Contextual, Combined, Qce };

const char* method_name(Method m);
Method method_from_name(const std::string& name);

struct RankedList {
  std::int64_t query_id = 0;
  std::vector<std::int64_t> ids;   // final order
  std::vector<double> base_scores; // aligned with ids
  std::vector<double> final_scores;
  std::string method;
};

struct PipelineConfig {
  int window_t = 200;    // second-stage window
  int rerank_k = 16;     // model re-rank cutoff
  int seq_n = 32;        // sequence length fed to the recurrence
  int page_size = 18;
  int metric_top_k = 8;  // diversity measurement cutoff
  double lambda = 0.15;        // MLR trade-off
  double lambda_loc = 0.6;     // location loss trade-off
  AnnealSchedule anneal;
  std::uint64_t seed = 7;
};

// Spatial resources for one market.
struct MarketGeo {
  GeoKdTree tree;
  MergedRegionSet regions;
  Distribution target;
};

// Immutable registry shared by all second-stage methods.
struct Resources {
  const TrainedModel* base = nullptr;
  const TrainedModel* contextual = nullptr;
  const TrainedModel* combined = nullptr;
  const TrainedModel* qce = nullptr;
  std::map<std::string, MarketGeo> geo;
  ExpectedPriceModel price_model;
  Distribution price_target_dist;
  double price_alpha = 0.5;
  double price_beta = 2.0;
  int price_buckets = 10;
};

// Query and user features as fed to every model: scaled guests, nights,
// checkin offset, price affinity, patience, and a market one-hot.
Vec query_user_features(const Query& query, const User& user,
                        const CorpusIndex& index);

// Scores every candidate with the base model and sorts descending,
// ties by ascending listing id. Fills ctx.base_scores in candidate order.
RankedList base_rank(RetrievalSet& ctx, const User& user,
                     const TrainedModel& base, const CorpusIndex& index);

// Applies one second-stage method to the top-T window of a base ranking.
// Heuristic methods may reorder the whole window; model methods permute
// only the top-K prefix. Positions past the window are untouched.
RankedList second_stage(const RankedList& ranked, const RetrievalSet& ctx,
                        const User& user, Method method,
                        const Resources& resources, const PipelineConfig& cfg,
                        const CorpusIndex& index);

}  // namespace divrank
