#include "divrank/pricediv.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace divrank {

using nlohmann::json;

double expected_price(const Query& query, const ExpectedPriceModel& model) {
  auto it = model.market_median.find(query.market);
  const double base =
      it != model.market_median.end() ? it->second : model.global_median;
  const double pred = model.w_guests * query.guests +
                      model.w_nights * query.nights + model.w_market * base +
                      model.bias;
  return std::max(pred, model.floor);
}

ExpectedPriceModel fit_expected_price(const Corpus& corpus) {
  if (corpus.queries.empty() || corpus.listings.empty())
    throw data_error("fit_expected_price: empty corpus");
  CorpusIndex index(corpus);

  ExpectedPriceModel model;
  for (const MarketInfo& m : corpus.markets)
    model.market_median[m.id] = index.market_median_price(m.id);
  model.global_median = index.global_median_price();

  // Normal equations for y ~ [guests, nights, market_median, 1].
  constexpr int d = 4;
  std::array<std::array<double, d>, d> ata{};
  std::array<double, d> atb{};
  for (const Query& q : corpus.queries) {
    const RetrievalSet rs = retrieve(q, index);
    if (rs.candidates.empty()) continue;
    std::vector<double> prices;
    prices.reserve(rs.candidates.size());
    for (const Listing& l : rs.candidates) prices.push_back(l.price);
    std::sort(prices.begin(), prices.end());
    const double y = prices[prices.size() / 2];
    const std::array<double, d> x{static_cast<double>(q.guests),
                                  static_cast<double>(q.nights),
                                  model.market_median.at(q.market), 1.0};
    for (int i = 0; i < d; ++i) {
      atb[i] += x[i] * y;
      for (int j = 0; j < d; ++j) ata[i][j] += x[i] * x[j];
    }
  }
  // Gaussian elimination with partial pivoting; ridge for degenerate data.
  for (int i = 0; i < d; ++i) ata[i][i] += 1e-9;
  for (int col = 0; col < d; ++col) {
    int pivot = col;
    for (int r = col + 1; r < d; ++r)
      if (std::abs(ata[r][col]) > std::abs(ata[pivot][col])) pivot = r;
    std::swap(ata[col], ata[pivot]);
    std::swap(atb[col], atb[pivot]);
    const double p = ata[col][col];
    if (std::abs(p) < 1e-12)
      throw data_error("fit_expected_price: singular system");
    for (int r = 0; r < d; ++r) {
      if (r == col) continue;
      const double factor = ata[r][col] / p;
      for (int c = col; c < d; ++c) ata[r][c] -= factor * ata[col][c];
      atb[r] -= factor * atb[col];
    }
  }
  model.w_guests = atb[0] / ata[0][0];
  model.w_nights = atb[1] / ata[1][1];
  model.w_market = atb[2] / ata[2][2];
  model.bias = atb[3] / ata[3][3];
  return model;
}

json ExpectedPriceModel::to_json() const {
  return json{{"format", "divrank-pricemodel-v1"},
              {"w_guests", w_guests},
              {"w_nights", w_nights},
              {"w_market", w_market},
              {"bias", bias},
              {"floor", floor},
              {"market_median", market_median},
              {"global_median", global_median}};
}

ExpectedPriceModel ExpectedPriceModel::from_json(const json& j) {
  if (j.at("format").get<std::string>() != "divrank-pricemodel-v1")
    throw data_error("price model: unknown serialization format");
  ExpectedPriceModel m;
  m.w_guests = j.at("w_guests").get<double>();
  m.w_nights = j.at("w_nights").get<double>();
  m.w_market = j.at("w_market").get<double>();
  m.bias = j.at("bias").get<double>();
  m.floor = j.at("floor").get<double>();
  m.market_median = j.at("market_median").get<std::map<std::string, double>>();
  m.global_median = j.at("global_median").get<double>();
  return m;
}

PriceBucketizer PriceBucketizer::from_expected(double expected, double alpha,
                                               double beta,
                                               int bucket_count) {
  if (expected <= 0.0)
    throw std::domain_error("bucketizer: non-positive expected price");
  if (alpha <= 0.0 || beta <= alpha)
    throw std::domain_error("bucketizer: need 0 < alpha < beta");
  if (bucket_count < 2) throw std::domain_error("bucketizer: K < 2");
  return PriceBucketizer{alpha * expected, beta * expected, bucket_count};
}

int price_bucket(double price, const PriceBucketizer& b) {
  const double t = (price - b.p_min) / (b.p_max - b.p_min);
  const int k = static_cast<int>(std::floor(t * b.bucket_count));
  return std::clamp(k, 0, b.bucket_count - 1);
}

Distribution price_target(int bucket_count, double mu_frac,
                          double sigma_frac) {
  if (bucket_count < 2) throw std::domain_error("price_target: K < 2");
  if (sigma_frac <= 0.0) throw std::domain_error("price_target: sigma <= 0");
  // Gaussian CDF via erf.
  auto cdf = [&](double x) {
    return 0.5 * (1.0 + std::erf((x - mu_frac) /
                                 (sigma_frac * std::numbers::sqrt2)));
  };
  std::vector<double> mass(static_cast<std::size_t>(bucket_count), 0.0);
  for (int k = 0; k < bucket_count; ++k) {
    const double lo = static_cast<double>(k) / bucket_count;
    const double hi = static_cast<double>(k + 1) / bucket_count;
    mass[static_cast<std::size_t>(k)] = cdf(hi) - cdf(lo);
  }
  return Distribution::from_counts(std::move(mass));
}

}  // namespace divrank
