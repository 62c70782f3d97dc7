#include "divrank/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "divrank/metrics.hpp"

namespace divrank {

using nlohmann::json;

const char* room_type_name(RoomType t) {
  switch (t) {
    case RoomType::EntireHome: return "EntireHome";
    case RoomType::PrivateRoom: return "PrivateRoom";
    case RoomType::SharedRoom: return "SharedRoom";
    default: return "Hotel";
  }
}

RoomType room_type_from_name(const std::string& name) {
  if (name == "EntireHome") return RoomType::EntireHome;
  if (name == "PrivateRoom") return RoomType::PrivateRoom;
  if (name == "SharedRoom") return RoomType::SharedRoom;
  if (name == "Hotel") return RoomType::Hotel;
  throw data_error("unknown room type: " + name);
}

CorpusIndex::CorpusIndex(const Corpus& corpus) : corpus_(&corpus) {
  for (std::size_t i = 0; i < corpus.markets.size(); ++i)
    market_info_[corpus.markets[i].id] = i;
  for (std::size_t i = 0; i < corpus.listings.size(); ++i) {
    const Listing& l = corpus.listings[i];
    by_market_[l.market].push_back(i);
    sorted_prices_[l.market].push_back(l.price);
    listing_idx_[l.id] = i;
  }
  for (auto& [mkt, idxs] : by_market_) {
    std::sort(idxs.begin(), idxs.end(), [&](std::size_t a, std::size_t b) {
      return corpus.listings[a].id < corpus.listings[b].id;
    });
  }
  std::vector<double> all_prices;
  for (auto& [mkt, prices] : sorted_prices_) {
    std::sort(prices.begin(), prices.end());
    all_prices.insert(all_prices.end(), prices.begin(), prices.end());
  }
  std::sort(all_prices.begin(), all_prices.end());
  if (!all_prices.empty())
    global_median_price_ = all_prices[all_prices.size() / 2];
  for (std::size_t i = 0; i < corpus.queries.size(); ++i)
    query_idx_[corpus.queries[i].id] = i;
  for (std::size_t i = 0; i < corpus.users.size(); ++i)
    user_idx_[corpus.users[i].id] = i;
}

const MarketInfo& CorpusIndex::market(const std::string& id) const {
  auto it = market_info_.find(id);
  if (it == market_info_.end()) throw not_found_error("unknown market: " + id);
  return corpus_->markets[it->second];
}

int CorpusIndex::market_ordinal(const std::string& id) const {
  auto it = market_info_.find(id);
  if (it == market_info_.end()) throw not_found_error("unknown market: " + id);
  return static_cast<int>(it->second);
}

bool CorpusIndex::has_market(const std::string& id) const {
  return market_info_.count(id) > 0;
}

std::span<const std::size_t> CorpusIndex::market_listings(
    const std::string& id) const {
  auto it = by_market_.find(id);
  if (it == by_market_.end()) return {};
  return it->second;
}

const Listing& CorpusIndex::listing(std::int64_t id) const {
  auto it = listing_idx_.find(id);
  if (it == listing_idx_.end())
    throw not_found_error("unknown listing id " + std::to_string(id));
  return corpus_->listings[it->second];
}

const Query& CorpusIndex::query(std::int64_t id) const {
  auto it = query_idx_.find(id);
  if (it == query_idx_.end())
    throw not_found_error("unknown query id " + std::to_string(id));
  return corpus_->queries[it->second];
}

const User& CorpusIndex::user(std::int64_t id) const {
  auto it = user_idx_.find(id);
  if (it == user_idx_.end())
    throw not_found_error("unknown user id " + std::to_string(id));
  return corpus_->users[it->second];
}

double CorpusIndex::market_median_price(const std::string& id) const {
  auto it = sorted_prices_.find(id);
  if (it == sorted_prices_.end() || it->second.empty())
    throw not_found_error("unknown market: " + id);
  return it->second[it->second.size() / 2];
}

double CorpusIndex::price_percentile(const Listing& l) const {
  auto it = sorted_prices_.find(l.market);
  if (it == sorted_prices_.end() || it->second.empty())
    throw not_found_error("unknown market: " + l.market);
  const auto& prices = it->second;
  const auto lo =
      std::lower_bound(prices.begin(), prices.end(), l.price) - prices.begin();
  return (static_cast<double>(lo) + 0.5) / static_cast<double>(prices.size());
}

namespace {

RoomType sample_room_type(Rng& rng) {
  const std::size_t k = rng.categorical({0.50, 0.30, 0.12, 0.08});
  return static_cast<RoomType>(k);
}

int sample_capacity(RoomType t, Rng& rng) {
  switch (t) {
    case RoomType::EntireHome:
      return 2 + static_cast<int>(rng.uniform_int(7));  // 2..8
    case RoomType::PrivateRoom:
      return 1 + static_cast<int>(rng.uniform_int(3));  // 1..3
    case RoomType::SharedRoom:
      return 1 + static_cast<int>(rng.uniform_int(2));  // 1..2
    default:
      return 1 + static_cast<int>(rng.uniform_int(4));  // 1..4
  }
}

int sample_bathrooms(RoomType t, int capacity, Rng& rng) {
  if (t == RoomType::SharedRoom)
    return static_cast<int>(rng.uniform_int(2));  // 0..1
  const int base = 1 + capacity / 4;
  const int jitter = static_cast<int>(rng.uniform_int(2));
  return std::max(0, base + jitter - 1);
}

}  // namespace

Corpus generate_marketplace(const GenConfig& config, std::uint64_t seed) {
  if (config.markets <= 0) throw config_error("generate: zero markets");
  if (config.listings_per_market <= 0)
    throw config_error("generate: zero listings per market");
  if (config.intent_areas <= 0)
    throw config_error("generate: zero intent areas");
  if (config.users <= 0) throw config_error("generate: zero users");

  Corpus corpus;
  Rng rng(mix_seed(seed, 0xc0de));

  std::int64_t next_listing = 1;
  for (int m = 0; m < config.markets; ++m) {
    MarketInfo mkt;
    char name[16];
    std::snprintf(name, sizeof(name), "M%03d", m);
    mkt.id = name;
    mkt.center_lat = rng.uniform(-55.0, 55.0);
    mkt.center_lng = rng.uniform(-170.0, 170.0);
    for (int a = 0; a < config.intent_areas; ++a) {
      IntentArea area;
      const double angle = 2.0 * std::numbers::pi *
                               (static_cast<double>(a) + rng.uniform() * 0.3) /
                           static_cast<double>(config.intent_areas);
      const double radius = config.area_ring_deg * (0.7 + 0.6 * rng.uniform());
      area.lat = mkt.center_lat + radius * std::sin(angle);
      area.lng = mkt.center_lng + radius * std::cos(angle);
      area.sigma = config.area_sigma_deg * (0.8 + 0.4 * rng.uniform());
      // Earlier areas are more popular.
      area.weight = std::pow(0.8, a) * (0.85 + 0.3 * rng.uniform());
      mkt.areas.push_back(area);
    }

    std::vector<double> area_weights;
    for (const IntentArea& a : mkt.areas) area_weights.push_back(a.weight);

    for (int i = 0; i < config.listings_per_market; ++i) {
      Listing l;
      l.id = next_listing++;
      l.market = mkt.id;
      const IntentArea& area = mkt.areas[rng.categorical(area_weights)];
      l.lat = std::clamp(area.lat + rng.normal(0.0, area.sigma), -89.9, 89.9);
      l.lng = area.lng + rng.normal(0.0, area.sigma);
      l.price = rng.lognormal(config.price_mu, config.price_sigma);
      l.room_type = sample_room_type(rng);
      l.capacity = sample_capacity(l.room_type, rng);
      l.bathrooms = sample_bathrooms(l.room_type, l.capacity, rng);
      // Quality tracks the price z-score with noise, squashed to (0,1).
      const double z =
          (std::log(l.price) - config.price_mu) / config.price_sigma;
      l.quality = 1.0 / (1.0 + std::exp(-(0.9 * z + 0.9 * rng.normal())));
      corpus.listings.push_back(l);
    }
    corpus.markets.push_back(std::move(mkt));
  }

  for (int u = 0; u < config.users; ++u) {
    User user;
    user.id = u + 1;
    user.price_affinity = rng.uniform();
    // Intent index over the ring positions; lower indices more popular.
    std::vector<double> w;
    for (int a = 0; a < config.intent_areas; ++a) w.push_back(std::pow(0.8, a));
    user.geo_intent = static_cast<int>(rng.categorical(w));
    user.patience = rng.uniform(0.75, 1.0);
    corpus.users.push_back(user);
  }

  std::int64_t next_query = 1;
  for (int m = 0; m < config.markets; ++m) {
    for (int q = 0; q < config.queries_per_market; ++q) {
      Query query;
      query.id = next_query++;
      query.market = corpus.markets[static_cast<std::size_t>(m)].id;
      query.guests = 1 + static_cast<int>(
                             rng.categorical({0.35, 0.30, 0.15, 0.10, 0.06, 0.04}));
      query.nights =
          1 + static_cast<int>(rng.categorical(
                  {0.18, 0.22, 0.18, 0.12, 0.10, 0.07, 0.06, 0.04, 0.02, 0.01}));
      query.checkin_offset = static_cast<int>(rng.uniform_int(61));
      corpus.queries.push_back(query);
    }
  }
  return corpus;
}

RetrievalSet retrieve(const Query& query, const CorpusIndex& index) {
  if (!index.has_market(query.market))
    throw not_found_error("retrieve: unknown market " + query.market);
  RetrievalSet out;
  out.query = query;
  for (std::size_t idx : index.market_listings(query.market)) {
    const Listing& l = index.corpus().listings[idx];
    if (l.capacity >= query.guests) out.candidates.push_back(l);
  }
  return out;
}

double listing_utility(const User& user, const Listing& l,
                       const CorpusIndex& index, const SimConfig& cfg) {
  const MarketInfo& mkt = index.market(l.market);
  const IntentArea& area =
      mkt.areas[static_cast<std::size_t>(user.geo_intent) % mkt.areas.size()];
  const double dlat = l.lat - area.lat;
  const double dlng = l.lng - area.lng;
  const double scale = 1.5 * std::max(area.sigma, 1e-6);
  const double geo =
      std::exp(-(dlat * dlat + dlng * dlng) / (2.0 * scale * scale));
  const double norm_price = index.price_percentile(l);
  const double price_fit = 1.0 - std::abs(norm_price - user.price_affinity);
  return cfg.w_quality * l.quality + cfg.w_price * price_fit + cfg.w_geo * geo;
}

Session simulate_session(const Query& query, const User& user,
                         std::span<const Listing> ranked, Rng& rng,
                         const CorpusIndex& index, const SimConfig& cfg) {
  Session s;
  s.query_id = query.id;
  s.user_id = user.id;
  const std::size_t n =
      std::min(ranked.size(), static_cast<std::size_t>(cfg.page_size));
  for (std::size_t i = 0; i < n; ++i) s.shown.push_back(ranked[i].id);

  // Cascade scan whose marginal examination probability at position i is
  // patience * c(i): the continuation chance from i-1 to i is c(i)/c(i-1).
  // The session ends at the first booking.
  std::set<std::int64_t> clicks;
  for (std::size_t i = 0; i < n; ++i) {
    const int pos = static_cast<int>(i) + 1;
    const double p_continue =
        i == 0 ? std::min(1.0, user.patience * positional_discount(1))
               : positional_discount(pos) / positional_discount(pos - 1);
    if (!rng.bernoulli(p_continue)) break;
    s.examined.push_back(static_cast<int>(i));
    const Listing& l = ranked[i];
    const double u = listing_utility(user, l, index, cfg);
    if (u > cfg.click_threshold) clicks.insert(l.id);
    if (u > cfg.booking_threshold) {
      s.booked = l.id;
      clicks.insert(l.id);
      break;
    }
  }
  s.clicks.assign(clicks.begin(), clicks.end());
  return s;
}

std::vector<TrainingPair> make_training_pairs(
    std::span<const Session> sessions) {
  std::vector<TrainingPair> pairs;
  for (const Session& s : sessions) {
    if (!s.booked) continue;
    for (std::int64_t id : s.shown) {
      if (id == *s.booked) continue;
      pairs.push_back({s.query_id, s.user_id, *s.booked, id});
    }
  }
  return pairs;
}

std::vector<EngagementRecord> aggregate_engagement(
    std::span<const Session> sessions, const SimConfig& cfg) {
  std::map<std::pair<std::int64_t, std::int64_t>, double> mass;
  for (const Session& s : sessions) {
    for (std::int64_t id : s.clicks)
      mass[{s.query_id, id}] += cfg.click_weight;
    if (s.booked) mass[{s.query_id, *s.booked}] += cfg.booking_weight;
  }
  std::vector<EngagementRecord> out;
  out.reserve(mass.size());
  for (const auto& [key, w] : mass) out.push_back({key.first, key.second, w});
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

json to_json(const Listing& l) {
  return json{{"id", l.id},
              {"market", l.market},
              {"price", l.price},
              {"lat", l.lat},
              {"lng", l.lng},
              {"capacity", l.capacity},
              {"bathrooms", l.bathrooms},
              {"room_type", room_type_name(l.room_type)},
              {"quality", l.quality}};
}

Listing listing_from_json(const json& j) {
  Listing l;
  l.id = j.at("id").get<std::int64_t>();
  l.market = j.at("market").get<std::string>();
  l.price = j.at("price").get<double>();
  l.lat = j.at("lat").get<double>();
  l.lng = j.at("lng").get<double>();
  l.capacity = j.at("capacity").get<int>();
  l.bathrooms = j.at("bathrooms").get<int>();
  l.room_type = room_type_from_name(j.at("room_type").get<std::string>());
  l.quality = j.at("quality").get<double>();
  return l;
}

json to_json(const Query& q) {
  return json{{"id", q.id},
              {"market", q.market},
              {"guests", q.guests},
              {"nights", q.nights},
              {"checkin_offset", q.checkin_offset}};
}

Query query_from_json(const json& j) {
  Query q;
  q.id = j.at("id").get<std::int64_t>();
  q.market = j.at("market").get<std::string>();
  q.guests = j.at("guests").get<int>();
  q.nights = j.at("nights").get<int>();
  q.checkin_offset = j.at("checkin_offset").get<int>();
  return q;
}

json to_json(const User& u) {
  return json{{"id", u.id},
              {"price_affinity", u.price_affinity},
              {"geo_intent", u.geo_intent},
              {"patience", u.patience}};
}

User user_from_json(const json& j) {
  User u;
  u.id = j.at("id").get<std::int64_t>();
  u.price_affinity = j.at("price_affinity").get<double>();
  u.geo_intent = j.at("geo_intent").get<int>();
  u.patience = j.at("patience").get<double>();
  return u;
}

json to_json(const Session& s) {
  json j{{"query_id", s.query_id},
         {"user_id", s.user_id},
         {"shown", s.shown},
         {"clicks", s.clicks},
         {"context_ids", s.context_ids}};
  if (s.booked)
    j["booked"] = *s.booked;
  else
    j["booked"] = nullptr;
  return j;
}

Session session_from_json(const json& j) {
  Session s;
  s.query_id = j.at("query_id").get<std::int64_t>();
  s.user_id = j.at("user_id").get<std::int64_t>();
  s.shown = j.at("shown").get<std::vector<std::int64_t>>();
  s.clicks = j.at("clicks").get<std::vector<std::int64_t>>();
  s.context_ids = j.at("context_ids").get<std::vector<std::int64_t>>();
  if (!j.at("booked").is_null()) s.booked = j.at("booked").get<std::int64_t>();
  return s;
}

json to_json(const EngagementRecord& r) {
  return json{{"query_id", r.query_id},
              {"listing_id", r.listing_id},
              {"weight", r.weight}};
}

EngagementRecord engagement_from_json(const json& j) {
  EngagementRecord r;
  r.query_id = j.at("query_id").get<std::int64_t>();
  r.listing_id = j.at("listing_id").get<std::int64_t>();
  r.weight = j.at("weight").get<double>();
  return r;
}

json to_json(const MarketInfo& m) {
  json areas = json::array();
  for (const IntentArea& a : m.areas)
    areas.push_back(json{{"lat", a.lat},
                         {"lng", a.lng},
                         {"sigma", a.sigma},
                         {"weight", a.weight}});
  return json{{"id", m.id},
              {"center_lat", m.center_lat},
              {"center_lng", m.center_lng},
              {"areas", areas}};
}

MarketInfo market_from_json(const json& j) {
  MarketInfo m;
  m.id = j.at("id").get<std::string>();
  m.center_lat = j.at("center_lat").get<double>();
  m.center_lng = j.at("center_lng").get<double>();
  for (const json& a : j.at("areas")) {
    IntentArea area;
    area.lat = a.at("lat").get<double>();
    area.lng = a.at("lng").get<double>();
    area.sigma = a.at("sigma").get<double>();
    area.weight = a.at("weight").get<double>();
    m.areas.push_back(area);
  }
  return m;
}

template <class T, class ToJson>
void write_jsonl(const std::string& path, std::span<const T> v, ToJson f) {
  std::ofstream out(path);
  if (!out) throw data_error("cannot open for writing: " + path);
  for (const T& x : v) out << f(x).dump() << '\n';
}

template <class T, class FromJson>
std::vector<T> read_jsonl(const std::string& path, FromJson f) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open for reading: " + path);
  std::vector<T> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out.push_back(f(json::parse(line)));
  }
  return out;
}

}  // namespace

void write_listings_jsonl(const std::string& path,
                          std::span<const Listing> v) {
  write_jsonl(path, v, [](const Listing& x) { return to_json(x); });
}
void write_queries_jsonl(const std::string& path, std::span<const Query> v) {
  write_jsonl(path, v, [](const Query& x) { return to_json(x); });
}
void write_users_jsonl(const std::string& path, std::span<const User> v) {
  write_jsonl(path, v, [](const User& x) { return to_json(x); });
}
void write_sessions_jsonl(const std::string& path,
                          std::span<const Session> v) {
  write_jsonl(path, v, [](const Session& x) { return to_json(x); });
}
void write_engagement_jsonl(const std::string& path,
                            std::span<const EngagementRecord> v) {
  write_jsonl(path, v, [](const EngagementRecord& x) { return to_json(x); });
}
void write_markets_jsonl(const std::string& path,
                         std::span<const MarketInfo> v) {
  write_jsonl(path, v, [](const MarketInfo& x) { return to_json(x); });
}

std::vector<Listing> read_listings_jsonl(const std::string& path) {
  return read_jsonl<Listing>(path, listing_from_json);
}
std::vector<Query> read_queries_jsonl(const std::string& path) {
  return read_jsonl<Query>(path, query_from_json);
}
std::vector<User> read_users_jsonl(const std::string& path) {
  return read_jsonl<User>(path, user_from_json);
}
std::vector<Session> read_sessions_jsonl(const std::string& path) {
  return read_jsonl<Session>(path, session_from_json);
}
std::vector<EngagementRecord> read_engagement_jsonl(const std::string& path) {
  return read_jsonl<EngagementRecord>(path, engagement_from_json);
}
std::vector<MarketInfo> read_markets_jsonl(const std::string& path) {
  return read_jsonl<MarketInfo>(path, market_from_json);
}

void write_corpus(const std::string& dir, const Corpus& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  write_markets_jsonl(dir + "/markets.jsonl", corpus.markets);
  write_listings_jsonl(dir + "/listings.jsonl", corpus.listings);
  write_queries_jsonl(dir + "/queries.jsonl", corpus.queries);
  write_users_jsonl(dir + "/users.jsonl", corpus.users);
}

Corpus read_corpus(const std::string& dir) {
  Corpus c;
  c.markets = read_markets_jsonl(dir + "/markets.jsonl");
  c.listings = read_listings_jsonl(dir + "/listings.jsonl");
  c.queries = read_queries_jsonl(dir + "/queries.jsonl");
  c.users = read_users_jsonl(dir + "/users.jsonl");
  return c;
}

}  // namespace divrank
