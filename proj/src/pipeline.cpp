#include "divrank/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

namespace divrank {

const char* method_name(Method m) {
  switch (m) {
    case Method::BaseOnly: return "base";
    case Method::GreedyMlr: return "greedy_mlr";
    case Method::LocdivAnneal: return "locdiv_anneal";
    case Method::Contextual: return "contextual";
    case Method::Combined: return "combined";
    default: return "qce";
  }
}

Method method_from_name(const std::string& name) {
  if (name == "base") return Method::BaseOnly;
  if (name == "greedy_mlr") return Method::GreedyMlr;
  if (name == "locdiv_anneal") return Method::LocdivAnneal;
  if (name == "contextual") return Method::Contextual;
  if (name == "combined") return Method::Combined;
  if (name == "qce") return Method::Qce;
  throw config_error("unknown method: " + name);
}

Vec query_user_features(const Query& query, const User& user,
                        const CorpusIndex& index) {
  // price_affinity and geo_intent are latent preferences, hidden from the
  // models like Listing::quality; patience is the observable profile signal.
  Vec v{static_cast<double>(query.guests) / 8.0,
        static_cast<double>(query.nights) / 14.0,
        static_cast<double>(query.checkin_offset) / 60.0, user.patience};
  const int ord = index.market_ordinal(query.market);
  for (int m = 0; m < index.market_count(); ++m)
    v.push_back(m == ord ? 1.0 : 0.0);
  return v;
}

RankedList base_rank(RetrievalSet& ctx, const User& user,
                     const TrainedModel& base, const CorpusIndex& index) {
  if (base.scorer.layers.empty())
    throw config_error("base_rank: base model not trained");
  const std::size_t n = ctx.candidates.size();
  const FeatureScaler scaler = FeatureScaler::fit(ctx);
  const Vec qu = query_user_features(ctx.query, user, index);

  ctx.base_scores.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const Vec input = concat(scaler.vector_of(ctx.candidates[i]), qu);
    ctx.base_scores[i] = dense_forward(base.scorer, input)[0];
  }
  // Standardize logits within the retrieval set so booking_prob stays
  // calibrated per query instead of saturating; ordering is unchanged.
  if (n > 1) {
    double mean = 0.0;
    for (double s : ctx.base_scores) mean += s;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double s : ctx.base_scores) var += (s - mean) * (s - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    if (sd > 1e-9)
      for (double& s : ctx.base_scores) s = (s - mean) / sd;
  }

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (ctx.base_scores[a] != ctx.base_scores[b])
      return ctx.base_scores[a] > ctx.base_scores[b];
    return ctx.candidates[a].id < ctx.candidates[b].id;
  });

  RankedList out;
  out.query_id = ctx.query.id;
  out.method = method_name(Method::BaseOnly);
  out.ids.reserve(n);
  out.base_scores.reserve(n);
  for (std::size_t i : idx) {
    out.ids.push_back(ctx.candidates[i].id);
    out.base_scores.push_back(ctx.base_scores[i]);
  }
  out.final_scores = out.base_scores;
  return out;
}

namespace {

// Candidate lookup by id within one retrieval set.
struct CtxLookup {
  std::unordered_map<std::int64_t, std::size_t> pos;
  explicit CtxLookup(const RetrievalSet& ctx) {
    for (std::size_t i = 0; i < ctx.candidates.size(); ++i)
      pos[ctx.candidates[i].id] = i;
  }
  std::size_t at(std::int64_t id) const { return pos.at(id); }
};

// Rebuilds a RankedList from a new id order, carrying base scores along and
// synthesizing strictly decreasing final scores below the given prefix.
RankedList assemble(const RankedList& in, Method method,
                    const std::vector<std::int64_t>& ids,
                    const std::vector<double>& prefix_scores) {
  RankedList out;
  out.query_id = in.query_id;
  out.method = method_name(method);
  out.ids = ids;
  std::unordered_map<std::int64_t, double> base_by_id;
  for (std::size_t i = 0; i < in.ids.size(); ++i)
    base_by_id[in.ids[i]] = in.base_scores[i];
  out.base_scores.reserve(ids.size());
  for (std::int64_t id : ids) out.base_scores.push_back(base_by_id.at(id));

  out.final_scores.assign(ids.size(), 0.0);
  double floor = 0.0;
  for (std::size_t i = 0; i < prefix_scores.size(); ++i) {
    out.final_scores[i] = prefix_scores[i];
    floor = i == 0 ? prefix_scores[i] : std::min(floor, prefix_scores[i]);
  }
  for (std::size_t i = prefix_scores.size(); i < ids.size(); ++i) {
    floor -= 1.0;
    out.final_scores[i] = floor;
  }
  return out;
}

std::vector<double> synth_rank_scores(std::size_t n) {
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = -static_cast<double>(i + 1);
  return s;
}

}  // namespace

RankedList second_stage(const RankedList& ranked, const RetrievalSet& ctx,
                        const User& user, Method method,
                        const Resources& resources, const PipelineConfig& cfg,
                        const CorpusIndex& index) {
  const std::size_t n = ranked.ids.size();
  if (method == Method::BaseOnly) {
    RankedList out = ranked;
    out.method = method_name(method);
    return out;
  }

  const std::size_t window =
      std::min<std::size_t>(n, static_cast<std::size_t>(cfg.window_t));
  const CtxLookup lookup(ctx);
  const FeatureScaler scaler = FeatureScaler::fit(ctx);
  const Vec qu = query_user_features(ctx.query, user, index);

  // Window listings in base order.
  std::vector<const Listing*> win;
  std::vector<double> win_scores;
  win.reserve(window);
  win_scores.reserve(window);
  for (std::size_t i = 0; i < window; ++i) {
    win.push_back(&ctx.candidates[lookup.at(ranked.ids[i])]);
    win_scores.push_back(ranked.base_scores[i]);
  }

  std::vector<std::int64_t> ids;
  std::vector<double> prefix_scores;

  if (method == Method::GreedyMlr || method == Method::LocdivAnneal) {
    std::vector<double> probs;
    probs.reserve(window);
    for (double s : win_scores) probs.push_back(booking_prob(s));

    std::vector<std::size_t> new_window_order;
    if (method == Method::GreedyMlr) {
      std::vector<FeatureVector> vectors;
      std::vector<std::int64_t> win_ids;
      for (const Listing* l : win) {
        vectors.push_back(scaler.vector_of(*l));
        win_ids.push_back(l->id);
      }
      const std::vector<std::size_t> page =
          greedy_mlr_order(vectors, probs, win_ids, cfg.lambda, cfg.page_size);
      std::vector<bool> taken(window, false);
      for (std::size_t p : page) taken[p] = true;
      new_window_order = page;
      for (std::size_t i = 0; i < window; ++i)
        if (!taken[i]) new_window_order.push_back(i);
    } else {
      const auto geo_it = resources.geo.find(ctx.query.market);
      if (geo_it == resources.geo.end())
        throw config_error("second_stage: no geo resources for market " +
                           ctx.query.market);
      const MarketGeo& geo = geo_it->second;
      std::vector<int> buckets;
      buckets.reserve(window);
      for (const Listing* l : win)
        buckets.push_back(region_of(*l, geo.tree, geo.regions));
      RankState state(probs, buckets, geo.target, cfg.lambda_loc,
                      cfg.metric_top_k);
      Rng rng(mix_seed(mix_seed(cfg.seed, static_cast<std::uint64_t>(
                                              ctx.query.id)),
                       static_cast<std::uint64_t>(user.id)));
      const std::vector<int> best = anneal_rerank(state, cfg.anneal, rng);
      new_window_order.assign(best.begin(), best.end());
    }

    ids.reserve(n);
    for (std::size_t p : new_window_order)
      ids.push_back(win[p]->id);
    for (std::size_t i = window; i < n; ++i) ids.push_back(ranked.ids[i]);
    prefix_scores = synth_rank_scores(ids.size());
    // Tail synthesis not needed; scores cover the whole list.
    RankedList out = assemble(ranked, method, ids, prefix_scores);
    return out;
  }

  // Model methods permute only the top-K prefix.
  const std::size_t k =
      std::min<std::size_t>(window, static_cast<std::size_t>(cfg.rerank_k));
  std::vector<double> model_scores(k, 0.0);

  if (method == Method::Contextual || method == Method::Combined) {
    const TrainedModel* model = method == Method::Contextual
                                    ? resources.contextual
                                    : resources.combined;
    if (!model || model->scorer.layers.empty())
      throw config_error(std::string("second_stage: model missing for ") +
                         method_name(method));
    Vec aggregates;
    if (method == Method::Contextual) {
      std::vector<Listing> top_k;
      for (std::size_t i = 0; i < k; ++i) top_k.push_back(*win[i]);
      aggregates = contextual_aggregates(top_k, ctx);
    }
    for (std::size_t i = 0; i < k; ++i) {
      Vec input = concat(scaler.vector_of(*win[i]), qu);
      if (method == Method::Contextual) input = concat(input, aggregates);
      model_scores[i] = dense_forward(model->scorer, input)[0];
    }
  } else {  // Qce
    if (!resources.qce)
      throw config_error("second_stage: qce model missing");
    const std::size_t seq_len =
        std::min<std::size_t>(window, static_cast<std::size_t>(cfg.seq_n));
    std::vector<Vec> seq;
    seq.reserve(seq_len);
    for (std::size_t i = 0; i < seq_len; ++i)
      seq.push_back(scaler.vector_of(*win[i]));
    const Vec qce =
        query_context_embedding(resources.qce->qce, qu, Vec{}, seq);
    for (std::size_t i = 0; i < k; ++i)
      model_scores[i] = second_stage_score(resources.qce->qce,
                                           scaler.vector_of(*win[i]), qce);
  }

  std::vector<std::size_t> prefix(k);
  std::iota(prefix.begin(), prefix.end(), 0);
  std::sort(prefix.begin(), prefix.end(), [&](std::size_t a, std::size_t b) {
    if (model_scores[a] != model_scores[b])
      return model_scores[a] > model_scores[b];
    return win[a]->id < win[b]->id;
  });

  ids.reserve(n);
  prefix_scores.reserve(k);
  for (std::size_t p : prefix) {
    ids.push_back(win[p]->id);
    prefix_scores.push_back(model_scores[p]);
  }
  for (std::size_t i = k; i < n; ++i) ids.push_back(ranked.ids[i]);
  return assemble(ranked, method, ids, prefix_scores);
}

}  // namespace divrank
