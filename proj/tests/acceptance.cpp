#include <algorithm>
#include <cstdio>
#include <fstream>
#include <unordered_map>

#include "divrank/harness.hpp"

using namespace divrank;

int main() {
  RunConfig cfg = RunConfig::defaults();
  cfg.out_dir = "/tmp/run1";

  // Ceiling: best greedy 8-subset of the top-32 pool.
  {
    const Corpus corpus = read_corpus(cfg.out_dir);
    const CorpusIndex index(corpus);
    const std::vector<Session> sessions =
        read_sessions_jsonl(cfg.out_dir + "/sessions.jsonl");
    std::vector<TrainedModel> storage;
    Resources res = load_resources(cfg, storage, false);
    storage.push_back(TrainedModel{});
    {
      std::ifstream in(cfg.out_dir + "/models/base.json");
      nlohmann::json j;
      in >> j;
      storage.back() = TrainedModel::from_json(j);
    }
    res.base = &storage.back();
    std::unordered_map<std::int64_t, RetrievalSet> cache;
    double base_sum = 0, ceil_sum = 0;
    long n = 0;
    const int top = cfg.pipe.metric_top_k;
    for (const Session& s : sessions) {
      if (!is_holdout_query(s.query_id)) continue;
      const Query& q = index.query(s.query_id);
      const User& u = index.user(s.user_id);
      auto it = cache.find(q.id);
      if (it == cache.end())
        it = cache.emplace(q.id, retrieve(q, index)).first;
      RetrievalSet& ctx = it->second;
      if (ctx.candidates.empty()) continue;
      const MarketGeo& geo = res.geo.at(q.market);
      const RankedList base = base_rank(ctx, u, *res.base, index);
      const int pool = std::min<int>(32, (int)base.ids.size());
      if (pool < top) continue;
      std::vector<int> pr;
      for (int i = 0; i < pool; ++i)
        pr.push_back(region_of(index.listing(base.ids[(std::size_t)i]),
                               geo.tree, geo.regions));
      base_sum += hellinger(
          geo.target,
          empirical_distribution(pr, (int)geo.target.size(), top));
      std::vector<int> counts(geo.target.size(), 0);
      std::vector<bool> used(pool, false);
      for (int pick = 0; pick < top; ++pick) {
        double best = 1e18;
        int best_i = -1;
        for (int i = 0; i < pool; ++i) {
          if (used[(std::size_t)i]) continue;
          ++counts[(std::size_t)pr[(std::size_t)i]];
          double sq = 0;
          for (std::size_t r = 0; r < counts.size(); ++r) {
            const double d = std::sqrt(counts[r] / double(pick + 1)) -
                             std::sqrt(geo.target.mass[r]);
            sq += d * d;
          }
          --counts[(std::size_t)pr[(std::size_t)i]];
          if (sq < best) {
            best = sq;
            best_i = i;
          }
        }
        used[(std::size_t)best_i] = true;
        ++counts[(std::size_t)pr[(std::size_t)best_i]];
      }
      double sq = 0;
      for (std::size_t r = 0; r < counts.size(); ++r) {
        const double d = std::sqrt(counts[r] / double(top)) -
                         std::sqrt(geo.target.mass[r]);
        sq += d * d;
      }
      ceil_sum += std::sqrt(0.5 * sq);
      ++n;
    }
    std::printf("ceiling scan: base_H=%.4f ceiling_H=%.4f ratio=%.2f (n=%ld)\n",
                base_sum / n, ceil_sum / n, ceil_sum / base_sum);
  }

  for (int epochs : {10, 20, 30}) {
    for (double lr : {1e-3, 3e-3}) {
      RunConfig c2 = cfg;
      c2.train_combined.epochs = epochs;
      c2.train_combined.lr = lr;
      LocationOnlyResult lo = location_only_experiment(c2);
      std::printf("loconly epochs=%d lr=%.0e: base_H=%.4f model_H=%.4f reduction=%.1f%%\n",
                  epochs, lr, lo.base_hellinger, lo.model_hellinger,
                  100.0 * (1.0 - lo.model_hellinger / lo.base_hellinger));
    }
  }
  return 0;
}
