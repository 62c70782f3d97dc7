#pragma once

// Marketplace entities shared across modules.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace divrank {

enum class RoomType { EntireHome, PrivateRoom, SharedRoom, Hotel };

constexpr int kRoomTypeCount = 4;

const char* room_type_name(RoomType t);
RoomType room_type_from_name(const std::string& name);

struct Listing {
  std::int64_t id = 0;
  std::string market;
  double price = 0.0;  // per night
  double lat = 0.0;
  double lng = 0.0;
  int capacity = 1;
  int bathrooms = 0;
  RoomType room_type = RoomType::EntireHome;
  double quality = 0.0;  // latent score in [0,1]; simulation only
};

struct Query {
  std::int64_t id = 0;
  std::string market;
  int guests = 1;
  int nights = 1;
  int checkin_offset = 0;
};

struct User {
  std::int64_t id = 0;
  double price_affinity = 0.5;  // preferred normalized price point in [0,1]
  int geo_intent = 0;           // index of preferred intent area
  double patience = 1.0;        // attention decay multiplier
};

struct Session {
  std::int64_t query_id = 0;
  std::int64_t user_id = 0;
  std::vector<std::int64_t> shown;  // page order, length <= page size
  std::optional<std::int64_t> booked;
  std::vector<std::int64_t> clicks;       // subset of shown, sorted by id
  std::vector<std::int64_t> context_ids;  // ranked candidates logged for
                                          // sequence models, length <= N
  // Positions examined by the simulated user; in-memory only, not part of
  // the JSONL schema.
  std::vector<int> examined;
};

struct EngagementRecord {
  std::int64_t query_id = 0;
  std::int64_t listing_id = 0;
  double weight = 0.0;
};

// Simulation metadata describing one market's latent geography. Hidden from
// models, like Listing::quality.
struct IntentArea {
  double lat = 0.0;
  double lng = 0.0;
  double sigma = 0.05;   // listing scatter around the area center, degrees
  double weight = 1.0;   // relative popularity used at generation time
};

struct MarketInfo {
  std::string id;
  double center_lat = 0.0;
  double center_lng = 0.0;
  std::vector<IntentArea> areas;
};

struct Corpus {
  std::vector<MarketInfo> markets;
  std::vector<Listing> listings;
  std::vector<Query> queries;
  std::vector<User> users;
};

struct RetrievalSet {
  Query query;
  std::vector<Listing> candidates;  // stable order by listing id
  std::vector<double> base_scores;  // aligned with candidates once filled
};

}  // namespace divrank
