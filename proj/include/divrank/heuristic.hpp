#pragma once

// Non-learned second-stage rankers: greedy maximization of mean listing
// relevance, and simulated annealing on the combined relevance/location
// loss with constant-time swap deltas.

#include <span>
#include <vector>

#include "divrank/common.hpp"
#include "divrank/metrics.hpp"

namespace divrank {

// Builds the result incrementally; step i (1-based) picks the candidate
// maximizing (1-lambda)*c(i)*P + lambda*(sum of distances to selected)/i,
// ties broken by ascending listing id. Returns indices into ctx.candidates,
// min(top_n, |candidates|) of them.
std::vector<std::size_t> greedy_mlr_rerank(const RetrievalSet& ctx,
                                           std::span<const double> probs,
                                           double lambda, int top_n);

// Same selection over pre-normalized vectors and explicit ids.
std::vector<std::size_t> greedy_mlr_order(
    const std::vector<FeatureVector>& vectors, std::span<const double> probs,
    std::span<const std::int64_t> ids, double lambda, int top_n);

// Mutable ranking state over a top-T window with the caches needed for
// constant-time swap deltas of
//   loss = (1 - NDCG_F(ordering)) + lambda_loc * H(target, top-K regions).
class RankState {
 public:
  // gains[i] = booking probability of item i under the base model;
  // bucket[i] = region index of item i; items are window positions 0..T-1
  // in their initial order.
  RankState(std::vector<double> gains, std::vector<int> bucket,
            Distribution target, double lambda_loc, int top_k);

  int size() const { return static_cast<int>(order_.size()); }
  int top_k() const { return top_k_; }
  double lambda_loc() const { return lambda_loc_; }
  std::span<const int> order() const { return order_; }
  double cached_loss() const { return cached_loss_; }

  // Loss difference from swapping positions i and j, without mutating.
  double swap_delta(int i, int j) const;
  // Applies the swap and updates all caches incrementally.
  void commit_swap(int i, int j);

  // Loss recomputed from scratch; the oracle for the cached value.
  double full_loss() const;

 private:
  void hellinger_terms(int i, int j, double& delta_sq, int& r_out,
                       int& r_in) const;

  std::vector<int> order_;      // position -> item
  std::vector<double> gain_;    // per item
  std::vector<int> bucket_;     // per item
  Distribution target_;
  double lambda_loc_;
  int top_k_;
  std::vector<int> top_count_;     // per region, count within top-K prefix
  std::vector<double> partial_;    // per region, (sqrt(cnt/K)-sqrt(q))^2
  double sq_sum_ = 0.0;            // sum of partial_
  double dcg_ = 0.0;
  double idcg_ = 0.0;
  double cached_loss_ = 0.0;
};

// Eq-style combined loss of an ordering, computed from scratch.
double locdiv_loss(std::span<const double> gains_in_rank_order,
                   std::span<const int> buckets_in_rank_order,
                   const Distribution& target, double lambda_loc, int top_k);

struct AnnealSchedule {
  int iterations = 20000;
  double t0 = 0.05;      // initial temperature
  double gamma = 0.999;  // geometric cooling factor
};

// Simulated annealing over swaps of a top-K position with any window
// position. Accepts improving swaps always, worsening swaps with
// probability exp(-delta/temperature). Returns the best ordering seen.
std::vector<int> anneal_rerank(RankState& state,
                               const AnnealSchedule& schedule, Rng& rng);

}  // namespace divrank
