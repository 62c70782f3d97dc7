#include "divrank/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <unordered_map>

namespace divrank {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::defaults() {
  RunConfig cfg;
  cfg.geo.threshold_frac = 0.05;
  cfg.pipe.lambda_loc = 0.005;
  cfg.pipe.anneal.t0 = 0.001;
  cfg.train_base.epochs = 40;
  cfg.train_base.seed = 7;
  cfg.train_contextual.epochs = 12;
  cfg.train_contextual.seed = 7;
  cfg.train_combined.epochs = 10;
  cfg.train_combined.seed = 7;
  cfg.train_combined.w_loc = 0.5;
  cfg.train_combined.w_price = 0.5;
  cfg.train_qce.epochs = 10;
  cfg.train_qce.seed = 7;
  cfg.train_qce.lr = 2e-3;
  return cfg;
}

namespace {

void read_if(const json& j, const char* key, int& out) {
  if (j.contains(key)) out = j.at(key).get<int>();
}
void read_if(const json& j, const char* key, double& out) {
  if (j.contains(key)) out = j.at(key).get<double>();
}
void read_if(const json& j, const char* key, std::uint64_t& out) {
  if (j.contains(key)) out = j.at(key).get<std::uint64_t>();
}
void read_if(const json& j, const char* key, std::string& out) {
  if (j.contains(key)) out = j.at(key).get<std::string>();
}

void read_train(const json& j, TrainConfig& t) {
  read_if(j, "lr", t.lr);
  read_if(j, "beta1", t.beta1);
  read_if(j, "beta2", t.beta2);
  read_if(j, "eps", t.eps);
  read_if(j, "batch_size", t.batch_size);
  read_if(j, "epochs", t.epochs);
  read_if(j, "seed", t.seed);
  read_if(j, "w_pair", t.w_pair);
  read_if(j, "w_loc", t.w_loc);
  read_if(j, "w_price", t.w_price);
  read_if(j, "dist_window", t.dist_window);
}

json train_to_json(const TrainConfig& t) {
  return json{{"lr", t.lr},
              {"beta1", t.beta1},
              {"beta2", t.beta2},
              {"eps", t.eps},
              {"batch_size", t.batch_size},
              {"epochs", t.epochs},
              {"seed", t.seed},
              {"w_pair", t.w_pair},
              {"w_loc", t.w_loc},
              {"w_price", t.w_price},
              {"dist_window", t.dist_window}};
}

std::string hash_hex(std::uint64_t h) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw config_error("config parse error: " + std::string(e.what()));
  }
  RunConfig cfg = RunConfig::defaults();
  if (j.contains("gen")) {
    const json& g = j.at("gen");
    read_if(g, "markets", cfg.gen.markets);
    read_if(g, "listings_per_market", cfg.gen.listings_per_market);
    read_if(g, "intent_areas", cfg.gen.intent_areas);
    read_if(g, "users", cfg.gen.users);
    read_if(g, "queries_per_market", cfg.gen.queries_per_market);
    read_if(g, "price_mu", cfg.gen.price_mu);
    read_if(g, "price_sigma", cfg.gen.price_sigma);
    read_if(g, "area_ring_deg", cfg.gen.area_ring_deg);
    read_if(g, "area_sigma_deg", cfg.gen.area_sigma_deg);
  }
  if (j.contains("sim")) {
    const json& s = j.at("sim");
    read_if(s, "page_size", cfg.sim.page_size);
    read_if(s, "click_threshold", cfg.sim.click_threshold);
    read_if(s, "booking_threshold", cfg.sim.booking_threshold);
    read_if(s, "w_quality", cfg.sim.w_quality);
    read_if(s, "w_price", cfg.sim.w_price);
    read_if(s, "w_geo", cfg.sim.w_geo);
    read_if(s, "click_weight", cfg.sim.click_weight);
    read_if(s, "exploration_fraction", cfg.sim.exploration_fraction);
    read_if(s, "booking_weight", cfg.sim.booking_weight);
  }
  if (j.contains("pipeline")) {
    const json& p = j.at("pipeline");
    read_if(p, "window_t", cfg.pipe.window_t);
    read_if(p, "rerank_k", cfg.pipe.rerank_k);
    read_if(p, "seq_n", cfg.pipe.seq_n);
    read_if(p, "page_size", cfg.pipe.page_size);
    read_if(p, "metric_top_k", cfg.pipe.metric_top_k);
    read_if(p, "lambda", cfg.pipe.lambda);
    read_if(p, "lambda_loc", cfg.pipe.lambda_loc);
    read_if(p, "anneal_iterations", cfg.pipe.anneal.iterations);
    read_if(p, "anneal_t0", cfg.pipe.anneal.t0);
    read_if(p, "anneal_gamma", cfg.pipe.anneal.gamma);
  }
  if (j.contains("net")) {
    const json& n = j.at("net");
    read_if(n, "hidden", cfg.net.hidden);
    read_if(n, "tower_out", cfg.net.tower_out);
    read_if(n, "lstm_hidden", cfg.net.lstm_hidden);
    read_if(n, "embedding_dim", cfg.net.embedding_dim);
  }
  if (j.contains("train_base")) read_train(j.at("train_base"), cfg.train_base);
  if (j.contains("train_contextual"))
    read_train(j.at("train_contextual"), cfg.train_contextual);
  if (j.contains("train_combined"))
    read_train(j.at("train_combined"), cfg.train_combined);
  if (j.contains("train_qce")) read_train(j.at("train_qce"), cfg.train_qce);
  if (j.contains("geo")) {
    read_if(j.at("geo"), "max_leaf_size", cfg.geo.max_leaf_size);
    read_if(j.at("geo"), "threshold_frac", cfg.geo.threshold_frac);
  }
  if (j.contains("price")) {
    const json& p = j.at("price");
    read_if(p, "alpha", cfg.price.alpha);
    read_if(p, "beta", cfg.price.beta);
    read_if(p, "buckets", cfg.price.buckets);
    read_if(p, "mu_frac", cfg.price.mu_frac);
    read_if(p, "sigma_frac", cfg.price.sigma_frac);
  }
  read_if(j, "bootstrap_sessions", cfg.bootstrap_sessions);
  read_if(j, "production_sessions", cfg.production_sessions);
  read_if(j, "seed", cfg.seed);
  read_if(j, "out_dir", cfg.out_dir);
  if (j.contains("methods"))
    cfg.methods = j.at("methods").get<std::vector<std::string>>();
  return cfg;
}

json RunConfig::to_json() const {
  return json{
      {"gen",
       {{"markets", gen.markets},
        {"listings_per_market", gen.listings_per_market},
        {"intent_areas", gen.intent_areas},
        {"users", gen.users},
        {"queries_per_market", gen.queries_per_market},
        {"price_mu", gen.price_mu},
        {"price_sigma", gen.price_sigma},
        {"area_ring_deg", gen.area_ring_deg},
        {"area_sigma_deg", gen.area_sigma_deg}}},
      {"sim",
       {{"page_size", sim.page_size},
        {"click_threshold", sim.click_threshold},
        {"booking_threshold", sim.booking_threshold},
        {"w_quality", sim.w_quality},
        {"w_price", sim.w_price},
        {"w_geo", sim.w_geo},
        {"click_weight", sim.click_weight},
        {"exploration_fraction", sim.exploration_fraction},
        {"booking_weight", sim.booking_weight}}},
      {"pipeline",
       {{"window_t", pipe.window_t},
        {"rerank_k", pipe.rerank_k},
        {"seq_n", pipe.seq_n},
        {"page_size", pipe.page_size},
        {"metric_top_k", pipe.metric_top_k},
        {"lambda", pipe.lambda},
        {"lambda_loc", pipe.lambda_loc},
        {"anneal_iterations", pipe.anneal.iterations},
        {"anneal_t0", pipe.anneal.t0},
        {"anneal_gamma", pipe.anneal.gamma}}},
      {"net",
       {{"hidden", net.hidden},
        {"tower_out", net.tower_out},
        {"lstm_hidden", net.lstm_hidden},
        {"embedding_dim", net.embedding_dim}}},
      {"train_base", train_to_json(train_base)},
      {"train_contextual", train_to_json(train_contextual)},
      {"train_combined", train_to_json(train_combined)},
      {"train_qce", train_to_json(train_qce)},
      {"geo",
       {{"max_leaf_size", geo.max_leaf_size},
        {"threshold_frac", geo.threshold_frac}}},
      {"price",
       {{"alpha", price.alpha},
        {"beta", price.beta},
        {"buckets", price.buckets},
        {"mu_frac", price.mu_frac},
        {"sigma_frac", price.sigma_frac}}},
      {"bootstrap_sessions", bootstrap_sessions},
      {"production_sessions", production_sessions},
      {"seed", seed},
      {"out_dir", out_dir},
      {"methods", methods}};
}

bool is_holdout_query(std::int64_t query_id) {
  return splitmix64(static_cast<std::uint64_t>(query_id) ^
                    0x8e7d3b2c51f04a96ULL) %
             5 ==
         0;
}

// ---------------------------------------------------------------------------
// Stage helpers

namespace {

std::string listings_path(const RunConfig& c) { return c.out_dir + "/listings.jsonl"; }
std::string queries_path(const RunConfig& c) { return c.out_dir + "/queries.jsonl"; }
std::string users_path(const RunConfig& c) { return c.out_dir + "/users.jsonl"; }
std::string markets_path(const RunConfig& c) { return c.out_dir + "/markets.jsonl"; }
std::string boot_sessions_path(const RunConfig& c) {
  return c.out_dir + "/sessions_boot.jsonl";
}
std::string sessions_path(const RunConfig& c) { return c.out_dir + "/sessions.jsonl"; }
std::string engagement_path(const RunConfig& c) {
  return c.out_dir + "/engagement.jsonl";
}
std::string geo_path(const RunConfig& c) { return c.out_dir + "/geo.json"; }
std::string model_path(const RunConfig& c, const std::string& name) {
  return c.out_dir + "/models/" + name + ".json";
}
std::string trace_path(const RunConfig& c, const std::string& name) {
  return c.out_dir + "/traces/" + name + "_trace.csv";
}

Corpus load_corpus_files(const RunConfig& cfg) {
  if (!fs::exists(listings_path(cfg)))
    throw data_error("corpus files missing; run `generate` first (" +
                     listings_path(cfg) + ")");
  return read_corpus(cfg.out_dir);
}

TrainedModel load_model(const RunConfig& cfg, const std::string& name) {
  const std::string path = model_path(cfg, name);
  std::ifstream in(path);
  if (!in)
    throw config_error("model file missing: " + path + "; run `train` first");
  json j;
  in >> j;
  return TrainedModel::from_json(j);
}

void save_model(const RunConfig& cfg, const std::string& name,
                const TrainResult& result) {
  fs::create_directories(cfg.out_dir + "/models");
  fs::create_directories(cfg.out_dir + "/traces");
  std::ofstream out(model_path(cfg, name));
  out << result.model.to_json().dump() << '\n';
  std::ofstream trace(trace_path(cfg, name));
  trace << "epoch,loss\n";
  for (std::size_t e = 0; e < result.epoch_loss.size(); ++e)
    trace << e + 1 << ',' << fmt_g17(result.epoch_loss[e]) << '\n';
}

// Sessions assigned round-robin over queries; one rng stream per session.
std::vector<Session> simulate_phase(const RunConfig& cfg,
                                    const CorpusIndex& index, int n_sessions,
                                    const TrainedModel* base,
                                    std::uint64_t phase_tag) {
  const auto& queries = index.corpus().queries;
  const auto& users = index.corpus().users;
  if (queries.empty() || users.empty())
    throw data_error("simulate: corpus has no queries or users");

  // Retrieval sets cached per query.
  std::unordered_map<std::int64_t, RetrievalSet> ctx_cache;
  std::vector<Session> sessions;
  sessions.reserve(static_cast<std::size_t>(n_sessions));

  for (int s = 0; s < n_sessions; ++s) {
    const Query& query =
        queries[static_cast<std::size_t>(s) % queries.size()];
    Rng rng(mix_seed(mix_seed(cfg.seed, phase_tag),
                     static_cast<std::uint64_t>(s)));
    const User& user = users[rng.uniform_int(users.size())];

    auto it = ctx_cache.find(query.id);
    if (it == ctx_cache.end())
      it = ctx_cache.emplace(query.id, retrieve(query, index)).first;
    RetrievalSet& ctx = it->second;
    if (ctx.candidates.empty()) continue;

    std::vector<std::int64_t> order_ids;
    if (base) {
      const RankedList ranked = base_rank(ctx, user, *base, index);
      order_ids = ranked.ids;
      const std::size_t win = std::min<std::size_t>(
          order_ids.size(), static_cast<std::size_t>(cfg.pipe.seq_n));
      if (win > 1 && rng.uniform() < cfg.sim.exploration_fraction) {
        for (std::size_t i = win; i > 1; --i) {
          const std::size_t j = rng.uniform_int(i);
          std::swap(order_ids[i - 1], order_ids[j]);
        }
      }
    } else {
      std::vector<std::size_t> idx(ctx.candidates.size());
      for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
      rng.shuffle(idx);
      order_ids.reserve(idx.size());
      for (std::size_t i : idx) order_ids.push_back(ctx.candidates[i].id);
    }

    std::vector<Listing> page;
    const std::size_t page_n = std::min<std::size_t>(
        order_ids.size(), static_cast<std::size_t>(cfg.sim.page_size));
    for (std::size_t i = 0; i < page_n; ++i)
      page.push_back(index.listing(order_ids[i]));

    Session session =
        simulate_session(query, user, page, rng, index, cfg.sim);
    const std::size_t ctx_n = std::min<std::size_t>(
        order_ids.size(), static_cast<std::size_t>(cfg.pipe.seq_n));
    session.context_ids.assign(order_ids.begin(),
                               order_ids.begin() + static_cast<std::ptrdiff_t>(ctx_n));
    sessions.push_back(std::move(session));
  }
  return sessions;
}

struct GeoResourceFile {
  std::map<std::string, MarketGeo> geo;
  ExpectedPriceModel price_model;
  Distribution price_target_dist;
};

GeoResourceFile load_geo_file(const RunConfig& cfg) {
  std::ifstream in(geo_path(cfg));
  if (!in)
    throw config_error("geo resources missing; run `build-geo` first (" +
                       geo_path(cfg) + ")");
  json j;
  in >> j;
  if (j.at("format").get<std::string>() != "divrank-geo-v1")
    throw data_error("geo file: unknown format");
  GeoResourceFile out;
  for (const auto& [market, jm] : j.at("markets").items()) {
    MarketGeo g;
    g.tree = GeoKdTree::from_json(jm.at("tree"));
    g.regions.region_nodes = jm.at("region_nodes").get<std::vector<int>>();
    g.regions.engagement = jm.at("engagement").get<std::vector<double>>();
    g.regions.leaf_to_region =
        jm.at("leaf_to_region").get<std::vector<int>>();
    g.target = Distribution{jm.at("target").get<std::vector<double>>()};
    out.geo.emplace(market, std::move(g));
  }
  out.price_model = ExpectedPriceModel::from_json(j.at("price_model"));
  out.price_target_dist =
      Distribution{j.at("price_target").get<std::vector<double>>()};
  return out;
}

int price_bucket_of(const Resources& res, const Query& query,
                    const Listing& l) {
  const double expected = expected_price(query, res.price_model);
  const PriceBucketizer b = PriceBucketizer::from_expected(
      expected, res.price_alpha, res.price_beta, res.price_buckets);
  return price_bucket(l.price, b);
}

}  // namespace

Resources load_resources(const RunConfig& cfg,
                         std::vector<TrainedModel>& model_storage,
                         bool need_models) {
  Resources res;
  GeoResourceFile geo = load_geo_file(cfg);
  res.geo = std::move(geo.geo);
  res.price_model = std::move(geo.price_model);
  res.price_target_dist = std::move(geo.price_target_dist);
  res.price_alpha = cfg.price.alpha;
  res.price_beta = cfg.price.beta;
  res.price_buckets = cfg.price.buckets;
  if (need_models) {
    model_storage.reserve(model_storage.size() + 4);
    model_storage.push_back(load_model(cfg, "base"));
    res.base = &model_storage.back();
    for (const std::string& m : cfg.methods) {
      if (m == "contextual") {
        model_storage.push_back(load_model(cfg, "contextual"));
        res.contextual = &model_storage.back();
      } else if (m == "combined") {
        model_storage.push_back(load_model(cfg, "combined"));
        res.combined = &model_storage.back();
      } else if (m == "qce") {
        model_storage.push_back(load_model(cfg, "qce"));
        res.qce = &model_storage.back();
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// CLI stages

void cli_generate(const RunConfig& cfg) {
  const Corpus corpus = generate_marketplace(cfg.gen, cfg.seed);
  write_corpus(cfg.out_dir, corpus);
}

void cli_simulate(const RunConfig& cfg, const std::string& phase) {
  const Corpus corpus = load_corpus_files(cfg);
  const CorpusIndex index(corpus);
  if (phase == "bootstrap") {
    const std::vector<Session> sessions = simulate_phase(
        cfg, index, cfg.bootstrap_sessions, nullptr, 0xb001);
    write_sessions_jsonl(boot_sessions_path(cfg), sessions);
  } else if (phase == "production") {
    const TrainedModel base = load_model(cfg, "base");
    const std::vector<Session> sessions = simulate_phase(
        cfg, index, cfg.production_sessions, &base, 0x980d);
    write_sessions_jsonl(sessions_path(cfg), sessions);
    const std::vector<EngagementRecord> engagement =
        aggregate_engagement(sessions, cfg.sim);
    write_engagement_jsonl(engagement_path(cfg), engagement);
  } else {
    throw config_error("simulate: unknown phase " + phase);
  }
}

void cli_build_geo(const RunConfig& cfg) {
  const Corpus corpus = load_corpus_files(cfg);
  const CorpusIndex index(corpus);
  if (!fs::exists(sessions_path(cfg)))
    throw data_error("build-geo: production sessions missing; run `simulate`");
  const std::vector<Session> sessions =
      read_sessions_jsonl(sessions_path(cfg));

  // Location targets are built from training-split engagement only, pooled
  // per market (the query's location context).
  std::vector<Session> train_sessions;
  for (const Session& s : sessions)
    if (!is_holdout_query(s.query_id)) train_sessions.push_back(s);
  const std::vector<EngagementRecord> records =
      aggregate_engagement(train_sessions, cfg.sim);

  json markets_json = json::object();
  for (const MarketInfo& market : corpus.markets) {
    std::vector<Listing> market_listings;
    for (std::size_t idx : index.market_listings(market.id))
      market_listings.push_back(corpus.listings[idx]);
    if (market_listings.empty()) continue;
    const GeoKdTree tree =
        GeoKdTree::build(market_listings, cfg.geo.max_leaf_size);

    std::vector<EngagementRecord> market_records;
    for (const EngagementRecord& r : records) {
      if (index.listing(r.listing_id).market == market.id)
        market_records.push_back(r);
    }
    const std::vector<double> mass = leaf_engagement(tree, market_records, index);
    double total = 0.0;
    for (double m : mass) total += m;
    const MergedRegionSet regions =
        merge_sparse_regions(tree, mass, cfg.geo.threshold_frac * total);
    const Distribution target = location_target(regions);

    markets_json[market.id] =
        json{{"tree", tree.to_json()},
             {"region_nodes", regions.region_nodes},
             {"engagement", regions.engagement},
             {"leaf_to_region", regions.leaf_to_region},
             {"target", target.mass}};
  }

  const ExpectedPriceModel price_model = fit_expected_price(corpus);
  const Distribution target = price_target(
      cfg.price.buckets, cfg.price.mu_frac, cfg.price.sigma_frac);

  std::ofstream out(geo_path(cfg));
  out << json{{"format", "divrank-geo-v1"},
              {"markets", markets_json},
              {"price_model", price_model.to_json()},
              {"price_target", target.mass}}
             .dump()
      << '\n';
}

std::vector<SessionExample> build_session_examples(
    const CorpusIndex& index, std::span<const Session> sessions,
    const Resources* resources, const PipelineConfig& pipe, bool with_buckets,
    bool with_aggregates, bool require_pairs) {
  std::vector<SessionExample> out;
  std::unordered_map<std::int64_t, RetrievalSet> ctx_cache;
  std::unordered_map<std::int64_t, FeatureScaler> scaler_cache;

  for (const Session& s : sessions) {
    if (require_pairs && !s.booked) continue;
    if (s.context_ids.empty()) continue;
    const Query& query = index.query(s.query_id);
    const User& user = index.user(s.user_id);

    auto cit = ctx_cache.find(query.id);
    if (cit == ctx_cache.end()) {
      cit = ctx_cache.emplace(query.id, retrieve(query, index)).first;
      scaler_cache.emplace(query.id, FeatureScaler::fit(cit->second));
    }
    const RetrievalSet& ctx = cit->second;
    const FeatureScaler& scaler = scaler_cache.at(query.id);

    SessionExample ex;
    ex.query_user = query_user_features(query, user, index);
    ex.listing_ids = s.context_ids;
    ex.listing_feats.reserve(s.context_ids.size());
    std::unordered_map<std::int64_t, int> pos;
    for (std::size_t i = 0; i < s.context_ids.size(); ++i) {
      const Listing& l = index.listing(s.context_ids[i]);
      ex.listing_feats.push_back(scaler.vector_of(l));
      pos[l.id] = static_cast<int>(i);
    }
    if (s.booked) {
      const auto bit = pos.find(*s.booked);
      if (bit != pos.end()) {
        for (std::int64_t id : s.shown) {
          if (id == *s.booked) continue;
          const auto uit = pos.find(id);
          if (uit != pos.end()) ex.pairs.push_back({bit->second, uit->second});
        }
      }
    }
    if (require_pairs && ex.pairs.empty()) continue;

    if (with_aggregates) {
      std::vector<Listing> top_k;
      const std::size_t k = std::min<std::size_t>(
          s.context_ids.size(), static_cast<std::size_t>(pipe.rerank_k));
      for (std::size_t i = 0; i < k; ++i)
        top_k.push_back(index.listing(s.context_ids[i]));
      ex.ctx_aggregates = contextual_aggregates(top_k, ctx);
    }
    if (with_buckets) {
      if (!resources) throw config_error("examples: resources required");
      const auto git = resources->geo.find(query.market);
      if (git == resources->geo.end())
        throw config_error("examples: no geo resources for market " +
                           query.market);
      ex.loc_target = git->second.target;
      ex.price_target = resources->price_target_dist;
      ex.loc_bucket.reserve(s.context_ids.size());
      ex.price_bucket.reserve(s.context_ids.size());
      const double expected = expected_price(query, resources->price_model);
      const PriceBucketizer bucketizer = PriceBucketizer::from_expected(
          expected, resources->price_alpha, resources->price_beta,
          resources->price_buckets);
      for (std::int64_t id : s.context_ids) {
        const Listing& l = index.listing(id);
        ex.loc_bucket.push_back(
            region_of(l, git->second.tree, git->second.regions));
        ex.price_bucket.push_back(price_bucket(l.price, bucketizer));
      }
    }
    out.push_back(std::move(ex));
  }
  return out;
}

void cli_train(const RunConfig& cfg, const std::string& which) {
  const Corpus corpus = load_corpus_files(cfg);
  const CorpusIndex index(corpus);
  const bool all = which == "all";

  if (all || which == "base") {
    if (!fs::exists(boot_sessions_path(cfg)))
      throw data_error("train base: bootstrap sessions missing");
    const std::vector<Session> boot =
        read_sessions_jsonl(boot_sessions_path(cfg));
    std::vector<Session> train_split;
    for (const Session& s : boot)
      if (!is_holdout_query(s.query_id)) train_split.push_back(s);
    const std::vector<SessionExample> examples = build_session_examples(
        index, train_split, nullptr, cfg.pipe, false, false, true);
    if (examples.empty()) throw data_error("train base: no booked sessions");
    const TrainResult result =
        train(ModelKind::Base, examples, cfg.train_base, cfg.net);
    save_model(cfg, "base", result);
  }

  if (all || which == "contextual" || which == "combined" || which == "qce") {
    if (!fs::exists(sessions_path(cfg)))
      throw data_error("train: production sessions missing");
    const std::vector<Session> sessions =
        read_sessions_jsonl(sessions_path(cfg));
    std::vector<Session> train_split;
    for (const Session& s : sessions)
      if (!is_holdout_query(s.query_id)) train_split.push_back(s);

    if (all || which == "contextual") {
      const std::vector<SessionExample> examples = build_session_examples(
          index, train_split, nullptr, cfg.pipe, false, true, true);
      if (examples.empty())
        throw data_error("train contextual: no booked sessions");
      const TrainResult result = train(ModelKind::Contextual, examples,
                                       cfg.train_contextual, cfg.net);
      save_model(cfg, "contextual", result);
    }
    if (all || which == "combined") {
      std::vector<TrainedModel> storage;
      const Resources res = load_resources(cfg, storage, false);
      const std::vector<SessionExample> examples = build_session_examples(
          index, train_split, &res, cfg.pipe, true, false, false);
      if (examples.empty()) throw data_error("train combined: no sessions");
      const TrainResult result =
          train(ModelKind::Combined, examples, cfg.train_combined, cfg.net);
      save_model(cfg, "combined", result);
    }
    if (all || which == "qce") {
      const std::vector<SessionExample> examples = build_session_examples(
          index, train_split, nullptr, cfg.pipe, false, false, true);
      if (examples.empty()) throw data_error("train qce: no booked sessions");
      const TrainResult result =
          train(ModelKind::Qce, examples, cfg.train_qce, cfg.net);
      save_model(cfg, "qce", result);
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation

namespace {

struct SessionRow {
  std::string method;
  std::int64_t query_id = 0;
  std::int64_t user_id = 0;
  bool has_booking = false;
  double mlr = 0.0;
  double ndcg = 0.0;
  double locdiv = 0.0;
  double pricediv = 0.0;
};

struct MetricsContext {
  const Resources* res;
  const PipelineConfig* pipe;
};

SessionRow score_ranking(const RankedList& ranking, const RetrievalSet& ctx,
                         const Session& session, const MetricsContext& mc,
                         const CorpusIndex& index) {
  SessionRow row;
  row.method = ranking.method;
  row.query_id = session.query_id;
  row.user_id = session.user_id;

  const std::size_t page = std::min<std::size_t>(
      ranking.ids.size(), static_cast<std::size_t>(mc.pipe->page_size));
  std::vector<Listing> page_listings;
  std::vector<double> page_probs;
  for (std::size_t i = 0; i < page; ++i) {
    page_listings.push_back(index.listing(ranking.ids[i]));
    page_probs.push_back(booking_prob(ranking.base_scores[i]));
  }
  row.mlr = mlr(page_listings, page_probs, mc.pipe->lambda, ctx);

  if (session.booked) {
    row.has_booking = true;
    row.ndcg = ndcg_binary(ranking.ids, *session.booked);
  }

  const int top = std::min<int>(mc.pipe->metric_top_k,
                                static_cast<int>(ranking.ids.size()));
  const auto git = mc.res->geo.find(ctx.query.market);
  if (git == mc.res->geo.end())
    throw config_error("evaluate: no geo resources for market " +
                       ctx.query.market);
  std::vector<int> loc_buckets;
  std::vector<int> price_buckets;
  const double expected = expected_price(ctx.query, mc.res->price_model);
  const PriceBucketizer bucketizer = PriceBucketizer::from_expected(
      expected, mc.res->price_alpha, mc.res->price_beta,
      mc.res->price_buckets);
  for (int i = 0; i < top; ++i) {
    const Listing& l = index.listing(ranking.ids[static_cast<std::size_t>(i)]);
    loc_buckets.push_back(region_of(l, git->second.tree, git->second.regions));
    price_buckets.push_back(price_bucket(l.price, bucketizer));
  }
  const Distribution loc_emp = empirical_distribution(
      loc_buckets, static_cast<int>(git->second.target.size()), top);
  const Distribution price_emp = empirical_distribution(
      price_buckets, mc.res->price_buckets, top);
  row.locdiv = 1.0 - hellinger(git->second.target, loc_emp);
  row.pricediv = 1.0 - hellinger(mc.res->price_target_dist, price_emp);
  return row;
}

void write_session_rows(const std::string& path,
                        const std::vector<SessionRow>& rows) {
  std::ofstream out(path);
  out << "method,query_id,user_id,has_booking,mlr,ndcg,locdiv,pricediv\n";
  for (const SessionRow& r : rows) {
    out << r.method << ',' << r.query_id << ',' << r.user_id << ','
        << (r.has_booking ? 1 : 0) << ',' << fmt_g17(r.mlr) << ','
        << (r.has_booking ? fmt_g17(r.ndcg) : "") << ',' << fmt_g17(r.locdiv)
        << ',' << fmt_g17(r.pricediv) << '\n';
  }
}

}  // namespace

EvalReport cli_evaluate(const RunConfig& cfg, bool print_table) {
  const Corpus corpus = load_corpus_files(cfg);
  const CorpusIndex index(corpus);
  if (!fs::exists(sessions_path(cfg)))
    throw data_error("evaluate: production sessions missing");
  const std::vector<Session> sessions =
      read_sessions_jsonl(sessions_path(cfg));

  std::vector<Session> holdout;
  for (const Session& s : sessions)
    if (is_holdout_query(s.query_id)) holdout.push_back(s);
  if (holdout.empty()) throw data_error("evaluate: no held-out queries");

  std::vector<TrainedModel> storage;
  const Resources res = load_resources(cfg, storage, true);

  std::vector<std::string> methods = cfg.methods;
  if (std::find(methods.begin(), methods.end(), "base") == methods.end())
    methods.insert(methods.begin(), "base");

  const MetricsContext mc{&res, &cfg.pipe};
  std::unordered_map<std::int64_t, RetrievalSet> ctx_cache;
  std::vector<SessionRow> rows;
  rows.reserve(holdout.size() * methods.size());

  for (const Session& session : holdout) {
    const Query& query = index.query(session.query_id);
    const User& user = index.user(session.user_id);
    auto it = ctx_cache.find(query.id);
    if (it == ctx_cache.end())
      it = ctx_cache.emplace(query.id, retrieve(query, index)).first;
    RetrievalSet& ctx = it->second;
    if (ctx.candidates.empty()) continue;
    const RankedList base = base_rank(ctx, user, *res.base, index);
    for (const std::string& m : methods) {
      const Method method = method_from_name(m);
      const RankedList ranking =
          method == Method::BaseOnly
              ? base
              : second_stage(base, ctx, user, method, res, cfg.pipe, index);
      rows.push_back(score_ranking(ranking, ctx, session, mc, index));
    }
  }

  // Aggregate means in row order.
  std::map<std::string, MethodAggregate> sums;
  std::map<std::string, int> n_all, n_booked;
  for (const SessionRow& r : rows) {
    MethodAggregate& a = sums[r.method];
    a.mlr += r.mlr;
    a.locdiv += r.locdiv;
    a.pricediv += r.pricediv;
    ++n_all[r.method];
    if (r.has_booking) {
      a.ndcg += r.ndcg;
      ++n_booked[r.method];
    }
  }
  EvalReport report;
  report.methods = methods;
  report.seed = cfg.seed;
  for (const std::string& m : methods) {
    MethodAggregate a = sums[m];
    const int na = std::max(1, n_all[m]);
    const int nb = std::max(1, n_booked[m]);
    a.mlr /= na;
    a.locdiv /= na;
    a.pricediv /= na;
    a.ndcg /= nb;
    report.raw[m] = a;
  }
  const MethodAggregate& base_agg = report.raw.at("base");
  auto pct = [](double v, double b) {
    return std::abs(b) < 1e-300 ? 0.0 : 100.0 * (v - b) / std::abs(b);
  };
  for (const std::string& m : methods) {
    const MethodAggregate& a = report.raw.at(m);
    MethodAggregate d;
    d.mlr = pct(a.mlr, base_agg.mlr);
    d.ndcg = pct(a.ndcg, base_agg.ndcg);
    d.locdiv = pct(a.locdiv, base_agg.locdiv);
    d.pricediv = pct(a.pricediv, base_agg.pricediv);
    report.delta_pct[m] = d;
  }

  // Hashes over the corpus files and the effective configuration.
  std::uint64_t ch = fnv1a64_file(markets_path(cfg));
  ch = fnv1a64_file(listings_path(cfg)) ^ (ch * 1099511628211ULL);
  ch = fnv1a64_file(queries_path(cfg)) ^ (ch * 1099511628211ULL);
  ch = fnv1a64_file(users_path(cfg)) ^ (ch * 1099511628211ULL);
  report.corpus_hash = hash_hex(ch);
  const std::string cfg_dump = cfg.to_json().dump();
  report.config_hash =
      hash_hex(fnv1a64(cfg_dump.data(), cfg_dump.size()));

  write_session_rows(cfg.out_dir + "/per_session.csv", rows);
  {
    std::ofstream out(cfg.out_dir + "/report.csv");
    out << "method,mlr_pct,ndcg_pct,locdiv_pct,pricediv_pct\n";
    for (const std::string& m : methods) {
      const MethodAggregate& d = report.delta_pct.at(m);
      out << m << ',' << fmt_g12(d.mlr) << ',' << fmt_g12(d.ndcg) << ','
          << fmt_g12(d.locdiv) << ',' << fmt_g12(d.pricediv) << '\n';
    }
  }
  {
    std::ofstream out(cfg.out_dir + "/report_meta.json");
    out << json{{"seed", report.seed},
                {"corpus_hash", report.corpus_hash},
                {"config_hash", report.config_hash}}
               .dump()
        << '\n';
  }

  if (print_table) {
    std::printf("%-16s %10s %10s %12s %12s\n", "method", "MLR%", "NDCG%",
                "locdiv%", "pricediv%");
    for (const std::string& m : methods) {
      const MethodAggregate& d = report.delta_pct.at(m);
      std::printf("%-16s %+10.3f %+10.3f %+12.3f %+12.3f\n", m.c_str(), d.mlr,
                  d.ndcg, d.locdiv, d.pricediv);
    }
  }
  return report;
}

EvalReport read_report_csv(const std::string& dir) {
  std::ifstream in(dir + "/report.csv");
  if (!in) throw data_error("missing report.csv in " + dir);
  EvalReport report;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string method, f;
    std::getline(ss, method, ',');
    MethodAggregate d;
    std::getline(ss, f, ',');
    d.mlr = std::stod(f);
    std::getline(ss, f, ',');
    d.ndcg = std::stod(f);
    std::getline(ss, f, ',');
    d.locdiv = std::stod(f);
    std::getline(ss, f, ',');
    d.pricediv = std::stod(f);
    report.methods.push_back(method);
    report.delta_pct[method] = d;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Plot data

void cli_plot_data(const RunConfig& cfg) {
  const Corpus corpus = load_corpus_files(cfg);
  const CorpusIndex index(corpus);
  const std::vector<Session> sessions =
      read_sessions_jsonl(sessions_path(cfg));
  std::vector<Session> holdout;
  for (const Session& s : sessions)
    if (is_holdout_query(s.query_id)) holdout.push_back(s);
  if (holdout.empty()) throw data_error("plot-data: no held-out sessions");

  std::vector<TrainedModel> storage;
  const Resources res = load_resources(cfg, storage, true);
  fs::create_directories(cfg.out_dir + "/plots");

  constexpr int kBins = 16;
  constexpr double kPriceBinWidth = 20.0;
  constexpr double kGeoBinWidth = 0.05;
  constexpr int kTop = 8;

  std::vector<std::string> methods = cfg.methods;
  if (std::find(methods.begin(), methods.end(), "base") == methods.end())
    methods.insert(methods.begin(), "base");

  std::unordered_map<std::int64_t, RetrievalSet> ctx_cache;

  std::map<std::string, std::vector<long>> price_hist, geo_hist;
  for (const std::string& m : methods) {
    price_hist[m].assign(kBins, 0);
    geo_hist[m].assign(kBins, 0);
  }
  // Mean rank change per normalized-price bucket for the qce method.
  constexpr int kPriceBuckets = 10;
  std::vector<double> rank_change_sum(kPriceBuckets, 0.0);
  std::vector<long> rank_change_n(kPriceBuckets, 0);

  for (const Session& session : holdout) {
    const Query& query = index.query(session.query_id);
    const User& user = index.user(session.user_id);
    auto it = ctx_cache.find(query.id);
    if (it == ctx_cache.end())
      it = ctx_cache.emplace(query.id, retrieve(query, index)).first;
    RetrievalSet& ctx = it->second;
    if (ctx.candidates.empty()) continue;
    const RankedList base = base_rank(ctx, user, *res.base, index);

    for (const std::string& m : methods) {
      const Method method = method_from_name(m);
      const RankedList ranking =
          method == Method::BaseOnly
              ? base
              : second_stage(base, ctx, user, method, res, cfg.pipe, index);
      const int top =
          std::min<int>(kTop, static_cast<int>(ranking.ids.size()));
      for (int i = 0; i < top; ++i) {
        for (int j = i + 1; j < top; ++j) {
          const Listing& a =
              index.listing(ranking.ids[static_cast<std::size_t>(i)]);
          const Listing& b =
              index.listing(ranking.ids[static_cast<std::size_t>(j)]);
          const double dp = std::abs(a.price - b.price);
          const double dlat = a.lat - b.lat;
          const double dlng = a.lng - b.lng;
          const double dg = std::sqrt(dlat * dlat + dlng * dlng);
          const int pb = std::min(kBins - 1,
                                  static_cast<int>(dp / kPriceBinWidth));
          const int gb =
              std::min(kBins - 1, static_cast<int>(dg / kGeoBinWidth));
          ++price_hist[m][static_cast<std::size_t>(pb)];
          ++geo_hist[m][static_cast<std::size_t>(gb)];
        }
      }

      if (method == Method::Qce) {
        // Normalized price relative to the top-N listings of the base order.
        const std::size_t n = std::min<std::size_t>(
            base.ids.size(), static_cast<std::size_t>(cfg.pipe.seq_n));
        double lo = 0.0, hi = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double p = index.listing(base.ids[i]).price;
          if (i == 0) lo = hi = p;
          lo = std::min(lo, p);
          hi = std::max(hi, p);
        }
        std::unordered_map<std::int64_t, int> new_pos;
        for (std::size_t i = 0; i < ranking.ids.size(); ++i)
          new_pos[ranking.ids[i]] = static_cast<int>(i);
        const int k = std::min<int>(cfg.pipe.rerank_k,
                                    static_cast<int>(base.ids.size()));
        for (int i = 0; i < k; ++i) {
          const Listing& l =
              index.listing(base.ids[static_cast<std::size_t>(i)]);
          const double np =
              hi > lo ? (l.price - lo) / (hi - lo) : 0.5;
          const int bucket = std::min(
              kPriceBuckets - 1,
              static_cast<int>(np * kPriceBuckets));
          rank_change_sum[static_cast<std::size_t>(bucket)] +=
              new_pos.at(l.id) - i;
          ++rank_change_n[static_cast<std::size_t>(bucket)];
        }
      }
    }
  }

  for (const std::string& m : methods) {
    std::ofstream out(cfg.out_dir + "/plots/pairdiff_" + m + ".csv");
    out << "bin,price_lo,price_hi,price_count,geo_lo,geo_hi,geo_count\n";
    for (int b = 0; b < kBins; ++b) {
      out << b << ',' << fmt_g12(b * kPriceBinWidth) << ','
          << fmt_g12((b + 1) * kPriceBinWidth) << ','
          << price_hist[m][static_cast<std::size_t>(b)] << ','
          << fmt_g12(b * kGeoBinWidth) << ',' << fmt_g12((b + 1) * kGeoBinWidth)
          << ',' << geo_hist[m][static_cast<std::size_t>(b)] << '\n';
    }
  }
  {
    std::ofstream out(cfg.out_dir + "/plots/qce_rank_change.csv");
    out << "price_bucket,mean_rank_change,count\n";
    for (int b = 0; b < kPriceBuckets; ++b) {
      const long n = rank_change_n[static_cast<std::size_t>(b)];
      const double mean =
          n > 0 ? rank_change_sum[static_cast<std::size_t>(b)] / n : 0.0;
      out << b << ',' << fmt_g17(mean) << ',' << n << '\n';
    }
  }
}

void cli_rerank(const RunConfig& cfg) {
  const Corpus corpus = load_corpus_files(cfg);
  const CorpusIndex index(corpus);
  const std::vector<Session> sessions =
      read_sessions_jsonl(sessions_path(cfg));
  std::vector<TrainedModel> storage;
  const Resources res = load_resources(cfg, storage, true);

  std::unordered_map<std::int64_t, RetrievalSet> ctx_cache;
  for (const std::string& m : cfg.methods) {
    const Method method = method_from_name(m);
    std::ofstream out(cfg.out_dir + "/rankings_" + m + ".csv");
    out << "query_id,user_id,rank,listing_id,base_score,final_score\n";
    for (const Session& session : sessions) {
      if (!is_holdout_query(session.query_id)) continue;
      const Query& query = index.query(session.query_id);
      const User& user = index.user(session.user_id);
      auto it = ctx_cache.find(query.id);
      if (it == ctx_cache.end())
        it = ctx_cache.emplace(query.id, retrieve(query, index)).first;
      RetrievalSet& ctx = it->second;
      if (ctx.candidates.empty()) continue;
      const RankedList base = base_rank(ctx, user, *res.base, index);
      const RankedList ranking =
          method == Method::BaseOnly
              ? base
              : second_stage(base, ctx, user, method, res, cfg.pipe, index);
      const std::size_t page = std::min<std::size_t>(
          ranking.ids.size(), static_cast<std::size_t>(cfg.pipe.page_size));
      for (std::size_t i = 0; i < page; ++i) {
        out << session.query_id << ',' << session.user_id << ',' << i + 1
            << ',' << ranking.ids[i] << ',' << fmt_g17(ranking.base_scores[i])
            << ',' << fmt_g17(ranking.final_scores[i]) << '\n';
      }
    }
  }
}

EvalReport run_full_pipeline(const RunConfig& cfg) {
  cli_generate(cfg);
  cli_simulate(cfg, "bootstrap");
  cli_train(cfg, "base");
  cli_simulate(cfg, "production");
  cli_build_geo(cfg);
  cli_train(cfg, "contextual");
  cli_train(cfg, "combined");
  cli_train(cfg, "qce");
  EvalReport report = cli_evaluate(cfg, false);
  cli_plot_data(cfg);
  return report;
}

LocationOnlyResult location_only_experiment(const RunConfig& cfg_in) {
  // The experiment re-ranks the whole logged candidate window so the
  // trained score ordering is fully applied.
  RunConfig cfg = cfg_in;
  cfg.pipe.rerank_k = cfg.pipe.seq_n;
  const Corpus corpus = load_corpus_files(cfg);
  const CorpusIndex index(corpus);
  const std::vector<Session> sessions =
      read_sessions_jsonl(sessions_path(cfg));
  std::vector<Session> train_split, holdout;
  for (const Session& s : sessions) {
    if (is_holdout_query(s.query_id))
      holdout.push_back(s);
    else
      train_split.push_back(s);
  }
  if (train_split.empty() || holdout.empty())
    throw data_error("location-only: missing sessions");

  std::vector<TrainedModel> storage;
  Resources res = load_resources(cfg, storage, false);
  storage.reserve(storage.size() + 2);
  storage.push_back(load_model(cfg, "base"));
  res.base = &storage.back();

  const std::vector<SessionExample> examples = build_session_examples(
      index, train_split, &res, cfg.pipe, true, false, false);
  TrainConfig tc = cfg.train_combined;
  tc.w_pair = 0.0;
  tc.w_loc = 1.0;
  tc.w_price = 0.0;
  const TrainResult trained =
      train(ModelKind::Combined, examples, tc, cfg.net);
  storage.push_back(trained.model);
  res.combined = &storage.back();

  std::unordered_map<std::int64_t, RetrievalSet> ctx_cache;
  double base_sum = 0.0, model_sum = 0.0;
  long n = 0;
  for (const Session& session : holdout) {
    const Query& query = index.query(session.query_id);
    const User& user = index.user(session.user_id);
    auto it = ctx_cache.find(query.id);
    if (it == ctx_cache.end())
      it = ctx_cache.emplace(query.id, retrieve(query, index)).first;
    RetrievalSet& ctx = it->second;
    if (ctx.candidates.empty()) continue;
    const auto git = res.geo.find(query.market);
    if (git == res.geo.end()) continue;
    const MarketGeo& geo = git->second;

    const RankedList base = base_rank(ctx, user, *res.base, index);
    const RankedList reranked =
        second_stage(base, ctx, user, Method::Combined, res, cfg.pipe, index);
    const int top = std::min<int>(cfg.pipe.metric_top_k,
                                  static_cast<int>(base.ids.size()));
    auto hell = [&](const RankedList& r) {
      std::vector<int> buckets;
      for (int i = 0; i < top; ++i)
        buckets.push_back(region_of(
            index.listing(r.ids[static_cast<std::size_t>(i)]), geo.tree,
            geo.regions));
      return hellinger(geo.target,
                       empirical_distribution(
                           buckets, static_cast<int>(geo.target.size()), top));
    };
    base_sum += hell(base);
    model_sum += hell(reranked);
    ++n;
  }
  if (n == 0) throw data_error("location-only: no usable held-out sessions");
  return {base_sum / n, model_sum / n};
}

}  // namespace divrank
