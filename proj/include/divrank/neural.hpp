#pragma once

// Self-contained differentiable stack with analytic gradients: dense towers,
// logistic pairwise loss, the surrogate distribution-matching loss, an LSTM
// cell with backprop through time, the two-tower query-context-embedding
// model, and mini-batch training with adaptive moments.

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "divrank/common.hpp"
#include "divrank/linalg.hpp"
#include "divrank/metrics.hpp"

namespace divrank {

// ---------------------------------------------------------------------------
// Dense stacks: tanh hidden layers, linear final layer.

struct DenseLayer {
  Mat W;
  Vec b;
};

struct DenseStack {
  std::vector<DenseLayer> layers;

  // dims = [in, hidden..., out]; weights uniform(-r, r), r=sqrt(6/(fi+fo)).
  static DenseStack make(const std::vector<int>& dims, Rng& rng);
  static DenseStack zeros_like(const DenseStack& other);
  int in_dim() const { return layers.front().W.cols; }
  int out_dim() const { return layers.back().W.rows; }
};

struct DenseCache {
  std::vector<Vec> inputs;  // input of each layer
  Vec out;
};

Vec dense_forward(const DenseStack& stack, const Vec& x,
                  DenseCache* cache = nullptr);
// Returns dL/dx and accumulates parameter gradients into `grad`.
Vec dense_backward(const DenseStack& stack, const DenseCache& cache,
                   const Vec& dout, DenseStack& grad);

// ---------------------------------------------------------------------------
// Losses.

struct PairwiseLossResult {
  double loss = 0.0;
  double d_booked = 0.0;
  double d_unbooked = 0.0;
};

// Logistic cross-entropy of (s_booked - s_unbooked) against label 1,
// computed in a saturation-safe form.
PairwiseLossResult pairwise_loss(double s_booked, double s_unbooked);

struct SurrogateLossResult {
  double loss = 0.0;
  std::vector<double> d_logits;
  std::vector<double> weights;  // per listing, after L2 normalization
  std::vector<double> labels;   // per listing, 0/1 direction
};

// Surrogate cross-entropy for distribution matching. The empirical
// distribution is the mean of the bucket one-hots; a bucket strictly below
// the target gets label 1 (push logits up), otherwise 0; per-listing weights
// are the L2-normalized (sqrt(empirical)-sqrt(target))^2 of the listing's
// bucket; the loss is the weighted mean of sigmoid cross-entropies.
SurrogateLossResult surrogate_distribution_loss(
    std::span<const double> logits,
    const std::vector<std::vector<double>>& bucket_onehots,
    const Distribution& target);

// ---------------------------------------------------------------------------
// LSTM.

struct LstmParams {
  // Gate weights over the concatenated [x; h_prev] block, H x (D+H).
  Mat Wi, Wf, Wo, Wc;
  Vec bi, bf, bo, bc;

  static LstmParams make(int input_dim, int hidden_dim, Rng& rng);
  static LstmParams zeros_like(const LstmParams& other);
  int input_dim() const { return Wi.cols - Wi.rows; }
  int hidden_dim() const { return Wi.rows; }
};

struct LstmStepCache {
  Vec z;  // [x; h_prev]
  Vec i, f, o, g, c, tanh_c;
};

struct LstmCache {
  std::vector<LstmStepCache> steps;
};

// h_0 = c_0 = 0; returns the final hidden state (zero vector for an empty
// sequence).
Vec lstm_forward(const LstmParams& p, std::span<const Vec> seq,
                 LstmCache* cache = nullptr);
// Backprop through time from dL/dh_N; accumulates into `grad`.
void lstm_backward(const LstmParams& p, const LstmCache& cache,
                   const Vec& dh_last, LstmParams& grad);

// ---------------------------------------------------------------------------
// Two-tower second-stage model with query context embedding.

struct SecondStageModel {
  DenseStack query_tower;    // query+user features -> tower output
  LstmParams lstm;           // listing sequence -> h_N
  DenseLayer projection;     // concat(tower, h_N) -> embedding, tanh
  DenseStack listing_tower;  // listing features -> embedding

  static SecondStageModel make(int query_user_dim, int listing_dim,
                               int hidden, int tower_out, int lstm_hidden,
                               int embedding_dim, Rng& rng);
  static SecondStageModel zeros_like(const SecondStageModel& other);
  int embedding_dim() const { return projection.W.rows; }
};

struct QceCache {
  DenseCache tower;
  LstmCache lstm;
  Vec concat_in;
  Vec out;  // tanh output
};

// concat(query_tower(query+user), h_N) through the tanh projection layer.
Vec query_context_embedding(const SecondStageModel& m, const Vec& query_feats,
                            const Vec& user_feats, std::span<const Vec> seq,
                            QceCache* cache = nullptr);
// Backward from dL/d(embedding); accumulates into `grad`.
void query_context_embedding_backward(const SecondStageModel& m,
                                      const QceCache& cache, const Vec& dout,
                                      SecondStageModel& grad);

// score = -||listing_tower(listing) - qce||; 0 is the maximum.
struct ScoreCache {
  DenseCache tower;
  Vec embedding;
  double dist = 0.0;
};
double second_stage_score(const SecondStageModel& m, const Vec& listing_vec,
                          const Vec& qce, ScoreCache* cache = nullptr);

// Contextual aggregate features over the top-K listings of a retrieval set:
// mean and variance of normalized price/lat/lng/capacity plus room-type
// proportions. Length 2*4 + 4.
Vec contextual_aggregates(std::span<const Listing> top_k,
                          const RetrievalSet& ctx);

constexpr int kContextualDim = 12;

// ---------------------------------------------------------------------------
// Training.

enum class ModelKind { Base, Contextual, Combined, Qce };

const char* model_kind_name(ModelKind k);
ModelKind model_kind_from_name(const std::string& name);

struct NetConfig {
  int hidden = 32;
  int tower_out = 32;
  int lstm_hidden = 32;
  int embedding_dim = 16;
};

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 16;  // sessions per step
  int epochs = 12;
  std::uint64_t seed = 7;
  double w_pair = 1.0;
  double w_loc = 0.0;
  double w_price = 0.0;
  int dist_window = 8;  // listings forming the surrogate empirical
};

// One session worth of training data: the logged candidate window in base
// order, the pairwise examples drawn from shown listings, and the fixed
// bucket assignments for the distribution losses.
struct SessionExample {
  Vec query_user;                          // query and user features
  std::vector<std::int64_t> listing_ids;   // window listings, base order
  std::vector<Vec> listing_feats;          // aligned with listing_ids
  Vec ctx_aggregates;                      // contextual mode extras
  std::vector<int> loc_bucket;             // per listing; empty when unused
  std::vector<int> price_bucket;
  Distribution loc_target;
  Distribution price_target;
  std::vector<std::pair<int, int>> pairs;  // (booked, unbooked) indices
};

struct TrainedModel {
  ModelKind kind = ModelKind::Base;
  DenseStack scorer;     // Base / Contextual / Combined
  SecondStageModel qce;  // Qce
  NetConfig net;

  nlohmann::json to_json() const;
  static TrainedModel from_json(const nlohmann::json& j);
};

struct TrainResult {
  TrainedModel model;
  std::vector<double> epoch_loss;
};

// Mini-batch Adam. Deterministic for fixed (data, cfg, seed). The combined
// objective is w_pair*pairwise + w_loc*surrogate(location) +
// w_price*surrogate(price); zero-weight terms are skipped entirely so the
// parameter trajectory matches pure pairwise training.
TrainResult train(ModelKind kind, std::span<const SessionExample> data,
                  const TrainConfig& cfg, const NetConfig& net);

// ---------------------------------------------------------------------------
// Parameter visitors (deterministic order), used by Adam and tests.

template <class F>
void for_each_param(DenseStack& s, F&& f) {
  for (DenseLayer& layer : s.layers) {
    for (double& w : layer.W.a) f(w);
    for (double& b : layer.b) f(b);
  }
}

template <class F>
void for_each_param(LstmParams& p, F&& f) {
  for (Mat* m : {&p.Wi, &p.Wf, &p.Wo, &p.Wc})
    for (double& w : m->a) f(w);
  for (Vec* v : {&p.bi, &p.bf, &p.bo, &p.bc})
    for (double& b : *v) f(b);
}

template <class F>
void for_each_param(SecondStageModel& m, F&& f) {
  for_each_param(m.query_tower, f);
  for_each_param(m.lstm, f);
  for (double& w : m.projection.W.a) f(w);
  for (double& b : m.projection.b) f(b);
  for_each_param(m.listing_tower, f);
}

template <class M>
std::vector<double*> param_ptrs(M& m) {
  std::vector<double*> out;
  for_each_param(m, [&](double& w) { out.push_back(&w); });
  return out;
}

}  // namespace divrank
