#pragma once

// Price diversification support: an expected-price model over query
// features, min-max price bucketization on [p_min, p_max], and the
// discretized-normal target distribution.

#include <map>
#include <string>

#include <json.hpp>

#include "divrank/corpus.hpp"
#include "divrank/metrics.hpp"

namespace divrank {

// Linear model over (guests, nights, market median price) with a positive
// floor. Unknown markets fall back to the global median.
struct ExpectedPriceModel {
  double w_guests = 0.0;
  double w_nights = 0.0;
  double w_market = 1.0;
  double bias = 0.0;
  double floor = 1.0;
  std::map<std::string, double> market_median;
  double global_median = 90.0;

  nlohmann::json to_json() const;
  static ExpectedPriceModel from_json(const nlohmann::json& j);
};

double expected_price(const Query& query, const ExpectedPriceModel& model);

// Least-squares fit against per-query retrieval-set median prices.
ExpectedPriceModel fit_expected_price(const Corpus& corpus);

struct PriceBucketizer {
  double p_min = 0.0;
  double p_max = 1.0;
  int bucket_count = 10;

  // p_min = alpha * expected, p_max = beta * expected.
  static PriceBucketizer from_expected(double expected, double alpha,
                                       double beta, int bucket_count);
};

// floor(K * (price - p_min) / (p_max - p_min)) clamped into [0, K-1].
int price_bucket(double price, const PriceBucketizer& b);

// Bucket masses proportional to the normal(mu_frac, sigma_frac) integral
// over each bucket's share of [0, 1], renormalized to sum 1.
Distribution price_target(int bucket_count, double mu_frac,
                          double sigma_frac);

}  // namespace divrank
