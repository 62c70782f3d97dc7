#pragma once

// Synthetic marketplace: generation, retrieval, a position-biased booking
// simulator, pairwise training data, and JSONL persistence.

#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "divrank/common.hpp"
#include "divrank/types.hpp"

namespace divrank {

struct GenConfig {
  int markets = 4;
  int listings_per_market = 300;
  int intent_areas = 3;
  int users = 500;
  int queries_per_market = 60;
  double price_mu = 4.5;     // log-normal price parameters
  double price_sigma = 0.6;
  double area_ring_deg = 0.24;   // intent areas sit on a ring of this radius
  double area_sigma_deg = 0.055; // listing scatter around an area center
};

struct SimConfig {
  int page_size = 18;
  double click_threshold = 0.62;
  double booking_threshold = 0.78;
  double w_quality = 0.35;
  double w_price = 0.30;
  double w_geo = 0.35;
  double click_weight = 1.0;
  double booking_weight = 5.0;
  // Fraction of production sessions served with a fully shuffled logging
  // window; exploration traffic decorrelates the logs from the serving
  // policy.
  double exploration_fraction = 0.3;
};

// Lookup structures over an immutable corpus: per-market listing indices in
// id order, sorted prices for percentile normalization, market metadata.
class CorpusIndex {
 public:
  explicit CorpusIndex(const Corpus& corpus);

  const Corpus& corpus() const { return *corpus_; }
  const MarketInfo& market(const std::string& id) const;
  // Position of the market within the corpus market list.
  int market_ordinal(const std::string& id) const;
  int market_count() const { return static_cast<int>(corpus_->markets.size()); }
  bool has_market(const std::string& id) const;
  // Listing indices for one market, ascending by listing id.
  std::span<const std::size_t> market_listings(const std::string& id) const;
  const Listing& listing(std::int64_t id) const;
  const Query& query(std::int64_t id) const;
  const User& user(std::int64_t id) const;
  double market_median_price(const std::string& id) const;
  double global_median_price() const { return global_median_price_; }
  // Empirical CDF value of a price within its market, in (0,1).
  double price_percentile(const Listing& l) const;

 private:
  const Corpus* corpus_;
  std::map<std::string, std::vector<std::size_t>> by_market_;
  std::map<std::string, std::vector<double>> sorted_prices_;
  std::map<std::string, std::size_t> market_info_;
  std::unordered_map<std::int64_t, std::size_t> listing_idx_;
  std::unordered_map<std::int64_t, std::size_t> query_idx_;
  std::unordered_map<std::int64_t, std::size_t> user_idx_;
  double global_median_price_ = 0.0;
};

// Deterministic synthetic marketplace for a fixed (config, seed).
// Listings cluster around per-market intent areas, prices are log-normal,
// latent quality is positively correlated with price.
Corpus generate_marketplace(const GenConfig& config, std::uint64_t seed);

// Candidates with matching market and capacity >= guests, in id order.
RetrievalSet retrieve(const Query& query, const CorpusIndex& index);

// Simulated user utility for a listing, in [0,1].
double listing_utility(const User& user, const Listing& l,
                       const CorpusIndex& index, const SimConfig& cfg);

// One simulated page view. The user scans the page as a cascade whose
// marginal examination probability at position i is patience * c(i); an
// examined listing is clicked when utility exceeds the click threshold and
// the first listing above the booking threshold is booked, ending the scan.
Session simulate_session(const Query& query, const User& user,
                         std::span<const Listing> ranked, Rng& rng,
                         const CorpusIndex& index, const SimConfig& cfg);

struct TrainingPair {
  std::int64_t query_id = 0;
  std::int64_t user_id = 0;
  std::int64_t booked_id = 0;
  std::int64_t unbooked_id = 0;
};

// One pair per shown non-booked listing of each booked session.
std::vector<TrainingPair> make_training_pairs(
    std::span<const Session> sessions);

// Per (query, listing) engagement mass: clicks plus booking-weighted
// bookings. Output sorted by (query_id, listing_id).
std::vector<EngagementRecord> aggregate_engagement(
    std::span<const Session> sessions, const SimConfig& cfg);

// JSONL persistence, one entity per line.
void write_listings_jsonl(const std::string& path,
                          std::span<const Listing> v);
void write_queries_jsonl(const std::string& path, std::span<const Query> v);
void write_users_jsonl(const std::string& path, std::span<const User> v);
void write_sessions_jsonl(const std::string& path,
                          std::span<const Session> v);
void write_engagement_jsonl(const std::string& path,
                            std::span<const EngagementRecord> v);
void write_markets_jsonl(const std::string& path,
                         std::span<const MarketInfo> v);

std::vector<Listing> read_listings_jsonl(const std::string& path);
std::vector<Query> read_queries_jsonl(const std::string& path);
std::vector<User> read_users_jsonl(const std::string& path);
std::vector<Session> read_sessions_jsonl(const std::string& path);
std::vector<EngagementRecord> read_engagement_jsonl(const std::string& path);
std::vector<MarketInfo> read_markets_jsonl(const std::string& path);

void write_corpus(const std::string& dir, const Corpus& corpus);
Corpus read_corpus(const std::string& dir);

}  // namespace divrank
