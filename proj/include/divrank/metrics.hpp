#pragma once

// Scalar relevance/diversity measurements: positional discount, listing
// feature vectors and distances, mean listing relevance, NDCG variants,
// Hellinger distance, empirical bucket distributions.

#include <functional>
#include <span>
#include <vector>

#include "divrank/types.hpp"

namespace divrank {

// Listing feature layout: [price, lat, lng, capacity, bathrooms,
// room-type one-hot x4]. Continuous components are min-max normalized per
// retrieval set; a degenerate attribute (min == max) maps to 0.5.
using FeatureVector = std::vector<double>;

constexpr int kContinuousFeatures = 5;
constexpr int kFeatureDim = kContinuousFeatures + kRoomTypeCount;

// Discrete probability vector over K buckets.
struct Distribution {
  std::vector<double> mass;

  std::size_t size() const { return mass.size(); }
  bool is_normalized(double tol = 1e-9) const;

  // Validates non-negativity and unit mass; throws std::domain_error.
  static Distribution checked(std::vector<double> mass);
  // Scales non-negative counts to unit mass; all-zero input is rejected.
  static Distribution from_counts(std::vector<double> counts);
  static Distribution uniform(std::size_t k);
};

// Positional discount c(i) = 1/log2(i+1), positions 1-based.
double positional_discount(int position);

// Min-max normalizer fitted over one retrieval set.
class FeatureScaler {
 public:
  static FeatureScaler fit(const RetrievalSet& ctx);
  FeatureVector vector_of(const Listing& l) const;

 private:
  double lo_[kContinuousFeatures] = {};
  double hi_[kContinuousFeatures] = {};
};

// Feature vector of one listing, normalized within its retrieval set.
// The listing must be a member of ctx.candidates.
FeatureVector listing_vector(const Listing& l, const RetrievalSet& ctx);

// Euclidean distance; optional per-component weights.
double listing_distance(const FeatureVector& a, const FeatureVector& b);
double listing_distance(const FeatureVector& a, const FeatureVector& b,
                        std::span<const double> weights);

// Booking probability of a base-ranker logit: logistic.
double booking_prob(double base_score);

// Mean Listing Relevance of an ordered list:
//   sum_i [ (1-lambda) * c(i) * P(l_i) + lambda * sum_{j<i} d(l_i,l_j) / i ]
// The i=1 diversity term is an empty sum.
double mlr(std::span<const Listing> ordered, std::span<const double> probs,
           double lambda, const RetrievalSet& ctx);

// Same metric over pre-normalized feature vectors.
double mlr_from_vectors(const std::vector<FeatureVector>& vectors,
                        std::span<const double> probs, double lambda);

// Binary-relevance NDCG: 1/log2(rank(booked)+1).
double ndcg_binary(std::span<const std::int64_t> ordered_ids,
                   std::int64_t booked);

// Graded NDCG under the base ranking function: gains are booking_prob(score),
// scores aligned with the given order, ideal order is descending score.
double ndcg_graded(std::span<const double> scores_in_rank_order);

// Hellinger distance sqrt(1/2 * sum (sqrt(p)-sqrt(q))^2), in [0,1].
double hellinger(const Distribution& p, const Distribution& q);

// Bucket distribution of the first `top` items.
Distribution empirical_distribution(std::span<const int> bucket_per_item,
                                    int bucket_count, int top);
Distribution empirical_distribution(
    std::span<const Listing> items,
    const std::function<int(const Listing&)>& bucket_of, int bucket_count,
    int top);

}  // namespace divrank
