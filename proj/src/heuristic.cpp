#include "divrank/heuristic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace divrank {

std::vector<std::size_t> greedy_mlr_order(
    const std::vector<FeatureVector>& vectors, std::span<const double> probs,
    std::span<const std::int64_t> ids, double lambda, int top_n) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::domain_error("greedy_mlr: lambda outside [0,1]");
  const std::size_t n = vectors.size();
  if (probs.size() != n || ids.size() != n)
    throw std::domain_error("greedy_mlr: misaligned inputs");
  const std::size_t want = std::min<std::size_t>(
      n, static_cast<std::size_t>(std::max(top_n, 0)));

  std::vector<std::size_t> selected;
  selected.reserve(want);
  std::vector<bool> used(n, false);
  // Running sum of distances from each candidate to the selected set keeps
  // every step O(n).
  std::vector<double> dist_sum(n, 0.0);

  for (std::size_t step = 0; step < want; ++step) {
    const double c = positional_discount(static_cast<int>(step) + 1);
    const double inv_pos = 1.0 / static_cast<double>(step + 1);
    std::size_t best = n;
    double best_score = 0.0;
    for (std::size_t cand = 0; cand < n; ++cand) {
      if (used[cand]) continue;
      const double score =
          (1.0 - lambda) * c * probs[cand] + lambda * dist_sum[cand] * inv_pos;
      if (best == n || score > best_score ||
          (score == best_score && ids[cand] < ids[best])) {
        best = cand;
        best_score = score;
      }
    }
    used[best] = true;
    selected.push_back(best);
    for (std::size_t cand = 0; cand < n; ++cand) {
      if (!used[cand])
        dist_sum[cand] += listing_distance(vectors[cand], vectors[best]);
    }
  }
  return selected;
}

std::vector<std::size_t> greedy_mlr_rerank(const RetrievalSet& ctx,
                                           std::span<const double> probs,
                                           double lambda, int top_n) {
  if (ctx.candidates.empty())
    throw std::domain_error("greedy_mlr: empty candidate set");
  const FeatureScaler scaler = FeatureScaler::fit(ctx);
  std::vector<FeatureVector> vectors;
  std::vector<std::int64_t> ids;
  vectors.reserve(ctx.candidates.size());
  ids.reserve(ctx.candidates.size());
  for (const Listing& l : ctx.candidates) {
    vectors.push_back(scaler.vector_of(l));
    ids.push_back(l.id);
  }
  return greedy_mlr_order(vectors, probs, ids, lambda, top_n);
}

double locdiv_loss(std::span<const double> gains_in_rank_order,
                   std::span<const int> buckets_in_rank_order,
                   const Distribution& target, double lambda_loc, int top_k) {
  if (lambda_loc < 0.0) throw std::domain_error("locdiv_loss: lambda_loc < 0");
  const std::size_t n = gains_in_rank_order.size();
  if (n == 0) throw std::domain_error("locdiv_loss: empty ordering");
  if (buckets_in_rank_order.size() != n)
    throw std::domain_error("locdiv_loss: misaligned buckets");

  double dcg = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    dcg += gains_in_rank_order[i] *
           positional_discount(static_cast<int>(i) + 1);
  std::vector<double> ideal(gains_in_rank_order.begin(),
                            gains_in_rank_order.end());
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    idcg += ideal[i] * positional_discount(static_cast<int>(i) + 1);

  const int k = std::min<int>(top_k, static_cast<int>(n));
  const Distribution empirical = empirical_distribution(
      buckets_in_rank_order, static_cast<int>(target.size()), k);
  return (1.0 - dcg / idcg) + lambda_loc * hellinger(target, empirical);
}

RankState::RankState(std::vector<double> gains, std::vector<int> bucket,
                     Distribution target, double lambda_loc, int top_k)
    : gain_(std::move(gains)),
      bucket_(std::move(bucket)),
      target_(std::move(target)),
      lambda_loc_(lambda_loc) {
  if (lambda_loc_ < 0.0) throw std::domain_error("RankState: lambda_loc < 0");
  const std::size_t n = gain_.size();
  if (n == 0) throw std::domain_error("RankState: empty window");
  if (bucket_.size() != n)
    throw std::domain_error("RankState: misaligned buckets");
  top_k_ = std::min<int>(top_k, static_cast<int>(n));
  if (top_k_ < 1) throw std::domain_error("RankState: top_k < 1");

  order_.resize(n);
  for (std::size_t i = 0; i < n; ++i) order_[i] = static_cast<int>(i);

  const std::size_t regions = target_.size();
  for (int b : bucket_) {
    if (b < 0 || b >= static_cast<int>(regions))
      throw std::domain_error("RankState: bucket out of range");
  }

  for (std::size_t i = 0; i < n; ++i)
    dcg_ += gain_[i] * positional_discount(static_cast<int>(i) + 1);
  std::vector<double> ideal = gain_;
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  for (std::size_t i = 0; i < n; ++i)
    idcg_ += ideal[i] * positional_discount(static_cast<int>(i) + 1);

  top_count_.assign(regions, 0);
  for (int i = 0; i < top_k_; ++i)
    ++top_count_[static_cast<std::size_t>(bucket_[static_cast<std::size_t>(
        order_[static_cast<std::size_t>(i)])])];
  partial_.assign(regions, 0.0);
  for (std::size_t r = 0; r < regions; ++r) {
    const double d = std::sqrt(static_cast<double>(top_count_[r]) / top_k_) -
                     std::sqrt(target_.mass[r]);
    partial_[r] = d * d;
    sq_sum_ += partial_[r];
  }
  cached_loss_ =
      (1.0 - dcg_ / idcg_) + lambda_loc_ * std::sqrt(0.5 * sq_sum_);
}

void RankState::hellinger_terms(int i, int j, double& delta_sq, int& r_out,
                                int& r_in) const {
  delta_sq = 0.0;
  r_out = r_in = -1;
  const bool i_top = i < top_k_;
  const bool j_top = j < top_k_;
  if (i_top == j_top) return;  // prefix membership unchanged
  const int pos_out = i_top ? i : j;    // position leaving the prefix's item
  const int pos_in = i_top ? j : i;     // position whose item enters
  r_out = bucket_[static_cast<std::size_t>(
      order_[static_cast<std::size_t>(pos_out)])];
  r_in = bucket_[static_cast<std::size_t>(
      order_[static_cast<std::size_t>(pos_in)])];
  if (r_out == r_in) {
    r_out = r_in = -1;
    return;
  }
  auto term = [&](int region, int count) {
    const double d = std::sqrt(static_cast<double>(count) / top_k_) -
                     std::sqrt(target_.mass[static_cast<std::size_t>(region)]);
    return d * d;
  };
  const double t_out_new =
      term(r_out, top_count_[static_cast<std::size_t>(r_out)] - 1);
  const double t_in_new =
      term(r_in, top_count_[static_cast<std::size_t>(r_in)] + 1);
  delta_sq = t_out_new - partial_[static_cast<std::size_t>(r_out)] +
             t_in_new - partial_[static_cast<std::size_t>(r_in)];
}

double RankState::swap_delta(int i, int j) const {
  const int n = size();
  if (i == j || i < 0 || j < 0 || i >= n || j >= n)
    throw std::domain_error("swap_delta: positions out of range");
  const double gi = gain_[static_cast<std::size_t>(
      order_[static_cast<std::size_t>(i)])];
  const double gj = gain_[static_cast<std::size_t>(
      order_[static_cast<std::size_t>(j)])];
  const double ci = positional_discount(i + 1);
  const double cj = positional_discount(j + 1);
  const double delta_dcg = (gj - gi) * (ci - cj);

  double delta_sq;
  int r_out, r_in;
  hellinger_terms(i, j, delta_sq, r_out, r_in);
  const double h_new = std::sqrt(0.5 * (sq_sum_ + delta_sq));
  const double h_old = std::sqrt(0.5 * sq_sum_);
  return -delta_dcg / idcg_ + lambda_loc_ * (h_new - h_old);
}

void RankState::commit_swap(int i, int j) {
  const double delta = swap_delta(i, j);
  const double gi = gain_[static_cast<std::size_t>(
      order_[static_cast<std::size_t>(i)])];
  const double gj = gain_[static_cast<std::size_t>(
      order_[static_cast<std::size_t>(j)])];
  const double ci = positional_discount(i + 1);
  const double cj = positional_discount(j + 1);
  dcg_ += (gj - gi) * (ci - cj);

  double delta_sq;
  int r_out, r_in;
  hellinger_terms(i, j, delta_sq, r_out, r_in);
  if (r_out >= 0) {
    auto term = [&](int region, int count) {
      const double d =
          std::sqrt(static_cast<double>(count) / top_k_) -
          std::sqrt(target_.mass[static_cast<std::size_t>(region)]);
      return d * d;
    };
    --top_count_[static_cast<std::size_t>(r_out)];
    ++top_count_[static_cast<std::size_t>(r_in)];
    sq_sum_ -= partial_[static_cast<std::size_t>(r_out)];
    sq_sum_ -= partial_[static_cast<std::size_t>(r_in)];
    partial_[static_cast<std::size_t>(r_out)] =
        term(r_out, top_count_[static_cast<std::size_t>(r_out)]);
    partial_[static_cast<std::size_t>(r_in)] =
        term(r_in, top_count_[static_cast<std::size_t>(r_in)]);
    sq_sum_ += partial_[static_cast<std::size_t>(r_out)];
    sq_sum_ += partial_[static_cast<std::size_t>(r_in)];
  }
  std::swap(order_[static_cast<std::size_t>(i)],
            order_[static_cast<std::size_t>(j)]);
  cached_loss_ += delta;
}

double RankState::full_loss() const {
  std::vector<double> gains;
  std::vector<int> buckets;
  gains.reserve(order_.size());
  buckets.reserve(order_.size());
  for (int item : order_) {
    gains.push_back(gain_[static_cast<std::size_t>(item)]);
    buckets.push_back(bucket_[static_cast<std::size_t>(item)]);
  }
  return locdiv_loss(gains, buckets, target_, lambda_loc_, top_k_);
}

std::vector<int> anneal_rerank(RankState& state,
                               const AnnealSchedule& schedule, Rng& rng) {
  std::vector<int> best(state.order().begin(), state.order().end());
  if (schedule.iterations <= 0) return best;
  if (schedule.t0 <= 0.0) throw std::domain_error("anneal: t0 <= 0");
  if (schedule.gamma <= 0.0 || schedule.gamma >= 1.0)
    throw std::domain_error("anneal: gamma outside (0,1)");

  double best_loss = state.cached_loss();
  double temperature = schedule.t0;
  const int n = state.size();
  const int k = state.top_k();
  for (int m = 0; m < schedule.iterations; ++m) {
    const int i = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(k)));
    int j = static_cast<int>(
        rng.uniform_int(static_cast<std::uint64_t>(n - 1)));
    if (j >= i) ++j;  // uniform over window positions != i
    const double delta = state.swap_delta(i, j);
    bool accept = delta <= 0.0;
    if (!accept) accept = rng.uniform() < std::exp(-delta / temperature);
    if (accept) {
      state.commit_swap(i, j);
      if (state.cached_loss() < best_loss) {
        best_loss = state.cached_loss();
        best.assign(state.order().begin(), state.order().end());
      }
    }
    temperature *= schedule.gamma;
  }
  return best;
}

}  // namespace divrank
