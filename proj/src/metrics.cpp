#include "divrank/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace divrank {

namespace {

double continuous_attr(const Listing& l, int k) {
  switch (k) {
    case 0: return l.price;
    case 1: return l.lat;
    case 2: return l.lng;
    case 3: return static_cast<double>(l.capacity);
    default: return static_cast<double>(l.bathrooms);
  }
}

}  // namespace

bool Distribution::is_normalized(double tol) const {
  double sum = 0.0;
  for (double m : mass) {
    if (m < 0.0) return false;
    sum += m;
  }
  return std::abs(sum - 1.0) <= tol;
}

Distribution Distribution::checked(std::vector<double> mass) {
  Distribution d{std::move(mass)};
  if (d.mass.empty()) throw std::domain_error("distribution: empty");
  if (!d.is_normalized())
    throw std::domain_error("distribution: not normalized");
  return d;
}

Distribution Distribution::from_counts(std::vector<double> counts) {
  double total = 0.0;
  for (double c : counts) {
    if (c < 0.0) throw std::domain_error("distribution: negative count");
    total += c;
  }
  if (total <= 0.0) throw std::domain_error("distribution: zero total mass");
  for (double& c : counts) c /= total;
  return Distribution{std::move(counts)};
}

Distribution Distribution::uniform(std::size_t k) {
  if (k == 0) throw std::domain_error("distribution: zero buckets");
  return Distribution{std::vector<double>(k, 1.0 / static_cast<double>(k))};
}

double positional_discount(int position) {
  if (position < 1) throw std::domain_error("positional_discount: i < 1");
  return 1.0 / std::log2(static_cast<double>(position) + 1.0);
}

FeatureScaler FeatureScaler::fit(const RetrievalSet& ctx) {
  if (ctx.candidates.empty())
    throw std::domain_error("FeatureScaler: empty retrieval set");
  FeatureScaler s;
  for (int k = 0; k < kContinuousFeatures; ++k) {
    double lo = continuous_attr(ctx.candidates.front(), k);
    double hi = lo;
    for (const Listing& l : ctx.candidates) {
      const double v = continuous_attr(l, k);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    s.lo_[k] = lo;
    s.hi_[k] = hi;
  }
  return s;
}

FeatureVector FeatureScaler::vector_of(const Listing& l) const {
  FeatureVector v(kFeatureDim, 0.0);
  for (int k = 0; k < kContinuousFeatures; ++k) {
    const double span = hi_[k] - lo_[k];
    v[k] = span > 0.0 ? (continuous_attr(l, k) - lo_[k]) / span : 0.5;
  }
  v[kContinuousFeatures + static_cast<int>(l.room_type)] = 1.0;
  return v;
}

FeatureVector listing_vector(const Listing& l, const RetrievalSet& ctx) {
  const bool member =
      std::any_of(ctx.candidates.begin(), ctx.candidates.end(),
                  [&](const Listing& c) { return c.id == l.id; });
  if (!member)
    throw std::domain_error("listing_vector: listing not in retrieval set");
  return FeatureScaler::fit(ctx).vector_of(l);
}

double listing_distance(const FeatureVector& a, const FeatureVector& b) {
  if (a.size() != b.size())
    throw std::domain_error("listing_distance: length mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sq += d * d;
  }
  return std::sqrt(sq);
}

double listing_distance(const FeatureVector& a, const FeatureVector& b,
                        std::span<const double> weights) {
  if (a.size() != b.size() || a.size() != weights.size())
    throw std::domain_error("listing_distance: length mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sq += weights[i] * d * d;
  }
  return std::sqrt(sq);
}

double booking_prob(double base_score) {
  return 1.0 / (1.0 + std::exp(-base_score));
}

double mlr_from_vectors(const std::vector<FeatureVector>& vectors,
                        std::span<const double> probs, double lambda) {
  if (lambda < 0.0 || lambda > 1.0)
    throw std::domain_error("mlr: lambda outside [0,1]");
  if (vectors.size() != probs.size())
    throw std::domain_error("mlr: probs not aligned");
  double total = 0.0;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    const int pos = static_cast<int>(i) + 1;
    double term = (1.0 - lambda) * positional_discount(pos) * probs[i];
    double dist_sum = 0.0;
    for (std::size_t j = 0; j < i; ++j)
      dist_sum += listing_distance(vectors[i], vectors[j]);
    term += lambda * dist_sum / static_cast<double>(pos);
    total += term;
  }
  return total;
}

double mlr(std::span<const Listing> ordered, std::span<const double> probs,
           double lambda, const RetrievalSet& ctx) {
  const FeatureScaler scaler = FeatureScaler::fit(ctx);
  std::vector<FeatureVector> vectors;
  vectors.reserve(ordered.size());
  for (const Listing& l : ordered) vectors.push_back(scaler.vector_of(l));
  return mlr_from_vectors(vectors, probs, lambda);
}

double ndcg_binary(std::span<const std::int64_t> ordered_ids,
                   std::int64_t booked) {
  for (std::size_t i = 0; i < ordered_ids.size(); ++i) {
    if (ordered_ids[i] == booked)
      return 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  throw std::domain_error("ndcg_binary: booked listing absent");
}

double ndcg_graded(std::span<const double> scores_in_rank_order) {
  if (scores_in_rank_order.empty())
    throw std::domain_error("ndcg_graded: empty list");
  std::vector<double> gains;
  gains.reserve(scores_in_rank_order.size());
  for (double s : scores_in_rank_order) gains.push_back(booking_prob(s));
  double dcg = 0.0;
  for (std::size_t i = 0; i < gains.size(); ++i)
    dcg += gains[i] * positional_discount(static_cast<int>(i) + 1);
  std::vector<double> ideal = gains;
  std::sort(ideal.begin(), ideal.end(), std::greater<>());
  double idcg = 0.0;
  for (std::size_t i = 0; i < ideal.size(); ++i)
    idcg += ideal[i] * positional_discount(static_cast<int>(i) + 1);
  return dcg / idcg;
}

double hellinger(const Distribution& p, const Distribution& q) {
  if (p.size() != q.size())
    throw std::domain_error("hellinger: bucket count mismatch");
  if (!p.is_normalized() || !q.is_normalized())
    throw std::domain_error("hellinger: unnormalized input");
  double sq = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    const double d = std::sqrt(p.mass[k]) - std::sqrt(q.mass[k]);
    sq += d * d;
  }
  return std::sqrt(0.5 * sq);
}

Distribution empirical_distribution(std::span<const int> bucket_per_item,
                                    int bucket_count, int top) {
  if (top <= 0) throw std::domain_error("empirical_distribution: top = 0");
  if (top > static_cast<int>(bucket_per_item.size()))
    throw std::domain_error("empirical_distribution: top exceeds item count");
  std::vector<double> mass(static_cast<std::size_t>(bucket_count), 0.0);
  for (int i = 0; i < top; ++i) {
    const int b = bucket_per_item[static_cast<std::size_t>(i)];
    if (b < 0 || b >= bucket_count)
      throw std::domain_error("empirical_distribution: bucket out of range");
    mass[static_cast<std::size_t>(b)] += 1.0;
  }
  for (double& m : mass) m /= static_cast<double>(top);
  return Distribution{std::move(mass)};
}

Distribution empirical_distribution(
    std::span<const Listing> items,
    const std::function<int(const Listing&)>& bucket_of, int bucket_count,
    int top) {
  std::vector<int> buckets;
  buckets.reserve(items.size());
  for (const Listing& l : items) buckets.push_back(bucket_of(l));
  return empirical_distribution(buckets, bucket_count, top);
}

}  // namespace divrank
