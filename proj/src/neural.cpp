#include "divrank/neural.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace divrank {

using nlohmann::json;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// log(1 + exp(x)) without overflow.
double softplus(double x) {
  if (x > 0.0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

Mat glorot(int rows, int cols, Rng& rng) {
  Mat m = Mat::zeros(rows, cols);
  const double r = std::sqrt(6.0 / (rows + cols));
  for (double& w : m.a) w = rng.uniform(-r, r);
  return m;
}

}  // namespace

// ---------------------------------------------------------------------------
// Dense stack

DenseStack DenseStack::make(const std::vector<int>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::domain_error("DenseStack: need >= 2 dims");
  DenseStack s;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    DenseLayer layer;
    layer.W = glorot(dims[i + 1], dims[i], rng);
    layer.b.assign(static_cast<std::size_t>(dims[i + 1]), 0.0);
    s.layers.push_back(std::move(layer));
  }
  return s;
}

DenseStack DenseStack::zeros_like(const DenseStack& other) {
  DenseStack s;
  for (const DenseLayer& layer : other.layers) {
    DenseLayer z;
    z.W = Mat::zeros(layer.W.rows, layer.W.cols);
    z.b.assign(layer.b.size(), 0.0);
    s.layers.push_back(std::move(z));
  }
  return s;
}

Vec dense_forward(const DenseStack& stack, const Vec& x, DenseCache* cache) {
  if (static_cast<int>(x.size()) != stack.in_dim())
    throw std::domain_error("dense_forward: input dimension mismatch");
  Vec h = x;
  if (cache) cache->inputs.clear();
  for (std::size_t l = 0; l < stack.layers.size(); ++l) {
    if (cache) cache->inputs.push_back(h);
    const DenseLayer& layer = stack.layers[l];
    Vec y = matvec(layer.W, h);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += layer.b[i];
    if (l + 1 < stack.layers.size())
      for (double& v : y) v = std::tanh(v);
    h = std::move(y);
  }
  if (cache) cache->out = h;
  return h;
}

Vec dense_backward(const DenseStack& stack, const DenseCache& cache,
                   const Vec& dout, DenseStack& grad) {
  Vec dh = dout;
  for (std::size_t l = stack.layers.size(); l-- > 0;) {
    const DenseLayer& layer = stack.layers[l];
    Vec dy = dh;
    if (l + 1 < stack.layers.size()) {
      // tanh output of this layer is the next layer's cached input.
      const Vec& act = cache.inputs[l + 1];
      for (std::size_t i = 0; i < dy.size(); ++i)
        dy[i] *= 1.0 - act[i] * act[i];
    }
    add_outer(grad.layers[l].W, dy, cache.inputs[l]);
    for (std::size_t i = 0; i < dy.size(); ++i) grad.layers[l].b[i] += dy[i];
    dh = mat_tvec(layer.W, dy);
  }
  return dh;
}

// ---------------------------------------------------------------------------
// Losses

PairwiseLossResult pairwise_loss(double s_booked, double s_unbooked) {
  const double z = s_booked - s_unbooked;
  PairwiseLossResult r;
  r.loss = softplus(-z);
  const double dz = sigmoid(z) - 1.0;  // d loss / d z
  r.d_booked = dz;
  r.d_unbooked = -dz;
  return r;
}

SurrogateLossResult surrogate_distribution_loss(
    std::span<const double> logits,
    const std::vector<std::vector<double>>& bucket_onehots,
    const Distribution& target) {
  const std::size_t n = logits.size();
  if (bucket_onehots.size() != n)
    throw std::domain_error("surrogate: misaligned one-hots");
  const std::size_t k = target.size();

  std::vector<int> bucket(n, -1);
  for (std::size_t i = 0; i < n; ++i) {
    if (bucket_onehots[i].size() != k)
      throw std::domain_error("surrogate: one-hot width mismatch");
    double sum = 0.0;
    for (std::size_t b = 0; b < k; ++b) {
      sum += bucket_onehots[i][b];
      if (bucket_onehots[i][b] == 1.0) bucket[i] = static_cast<int>(b);
    }
    if (std::abs(sum - 1.0) > 1e-12 || bucket[i] < 0)
      throw std::domain_error("surrogate: one-hot row does not sum to 1");
  }

  std::vector<double> empirical(k, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    empirical[static_cast<std::size_t>(bucket[i])] += 1.0;
  for (double& e : empirical) e /= static_cast<double>(n);

  // Direction per bucket: strictly below target -> raise logits.
  std::vector<double> direction(k, 0.0);
  for (std::size_t b = 0; b < k; ++b)
    direction[b] = empirical[b] < target.mass[b] ? 1.0 : 0.0;

  // Per-bucket squared sqrt differences, L2-normalized over buckets; the
  // all-zero vector stays all-zero.
  std::vector<double> sqdiff(k, 0.0);
  double norm_sq = 0.0;
  for (std::size_t b = 0; b < k; ++b) {
    const double d = std::sqrt(empirical[b]) - std::sqrt(target.mass[b]);
    sqdiff[b] = d * d;
    norm_sq += sqdiff[b] * sqdiff[b];
  }
  const double norm = std::sqrt(norm_sq);
  if (norm > 0.0)
    for (double& s : sqdiff) s /= norm;

  SurrogateLossResult out;
  out.d_logits.assign(n, 0.0);
  out.weights.resize(n);
  out.labels.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t b = static_cast<std::size_t>(bucket[i]);
    const double label = direction[b];
    const double weight = sqdiff[b];
    const double x = logits[i];
    // sigmoid cross-entropy: max(x,0) - x*label + log(1+exp(-|x|))
    const double ce = std::max(x, 0.0) - x * label + softplus(-std::abs(x));
    total += weight * ce;
    out.d_logits[i] = weight * (sigmoid(x) - label) / static_cast<double>(n);
    out.weights[i] = weight;
    out.labels[i] = label;
  }
  out.loss = total / static_cast<double>(n);
  return out;
}

// ---------------------------------------------------------------------------
// LSTM

LstmParams LstmParams::make(int input_dim, int hidden_dim, Rng& rng) {
  LstmParams p;
  const int z = input_dim + hidden_dim;
  p.Wi = glorot(hidden_dim, z, rng);
  p.Wf = glorot(hidden_dim, z, rng);
  p.Wo = glorot(hidden_dim, z, rng);
  p.Wc = glorot(hidden_dim, z, rng);
  p.bi.assign(static_cast<std::size_t>(hidden_dim), 0.0);
  p.bf.assign(static_cast<std::size_t>(hidden_dim), 1.0);  // forget bias
  p.bo.assign(static_cast<std::size_t>(hidden_dim), 0.0);
  p.bc.assign(static_cast<std::size_t>(hidden_dim), 0.0);
  return p;
}

LstmParams LstmParams::zeros_like(const LstmParams& other) {
  LstmParams p;
  p.Wi = Mat::zeros(other.Wi.rows, other.Wi.cols);
  p.Wf = Mat::zeros(other.Wf.rows, other.Wf.cols);
  p.Wo = Mat::zeros(other.Wo.rows, other.Wo.cols);
  p.Wc = Mat::zeros(other.Wc.rows, other.Wc.cols);
  p.bi.assign(other.bi.size(), 0.0);
  p.bf.assign(other.bf.size(), 0.0);
  p.bo.assign(other.bo.size(), 0.0);
  p.bc.assign(other.bc.size(), 0.0);
  return p;
}

Vec lstm_forward(const LstmParams& p, std::span<const Vec> seq,
                 LstmCache* cache) {
  const int h_dim = p.hidden_dim();
  Vec h(static_cast<std::size_t>(h_dim), 0.0);
  Vec c(static_cast<std::size_t>(h_dim), 0.0);
  if (cache) cache->steps.clear();
  for (const Vec& x : seq) {
    if (static_cast<int>(x.size()) != p.input_dim())
      throw std::domain_error("lstm_forward: input dimension mismatch");
    LstmStepCache st;
    st.z = concat(x, h);
    st.i = matvec(p.Wi, st.z);
    st.f = matvec(p.Wf, st.z);
    st.o = matvec(p.Wo, st.z);
    st.g = matvec(p.Wc, st.z);
    for (int u = 0; u < h_dim; ++u) {
      const std::size_t s = static_cast<std::size_t>(u);
      st.i[s] = sigmoid(st.i[s] + p.bi[s]);
      st.f[s] = sigmoid(st.f[s] + p.bf[s]);
      st.o[s] = sigmoid(st.o[s] + p.bo[s]);
      st.g[s] = std::tanh(st.g[s] + p.bc[s]);
    }
    Vec c_new(static_cast<std::size_t>(h_dim));
    Vec tanh_c(static_cast<std::size_t>(h_dim));
    for (int u = 0; u < h_dim; ++u) {
      const std::size_t s = static_cast<std::size_t>(u);
      c_new[s] = st.f[s] * c[s] + st.i[s] * st.g[s];
      tanh_c[s] = std::tanh(c_new[s]);
      h[s] = st.o[s] * tanh_c[s];
    }
    st.c = c_new;
    st.tanh_c = tanh_c;
    c = std::move(c_new);
    if (cache) cache->steps.push_back(std::move(st));
  }
  return h;
}

void lstm_backward(const LstmParams& p, const LstmCache& cache,
                   const Vec& dh_last, LstmParams& grad) {
  const int h_dim = p.hidden_dim();
  const int in_dim = p.input_dim();
  Vec dh = dh_last;
  Vec dc(static_cast<std::size_t>(h_dim), 0.0);
  for (std::size_t t = cache.steps.size(); t-- > 0;) {
    const LstmStepCache& st = cache.steps[t];
    const Vec* c_prev = t > 0 ? &cache.steps[t - 1].c : nullptr;
    Vec dai(static_cast<std::size_t>(h_dim)), daf(static_cast<std::size_t>(h_dim)),
        dao(static_cast<std::size_t>(h_dim)), dag(static_cast<std::size_t>(h_dim));
    for (int u = 0; u < h_dim; ++u) {
      const std::size_t s = static_cast<std::size_t>(u);
      const double dco =
          dc[s] + dh[s] * st.o[s] * (1.0 - st.tanh_c[s] * st.tanh_c[s]);
      const double do_ = dh[s] * st.tanh_c[s];
      const double cp = c_prev ? (*c_prev)[s] : 0.0;
      const double di = dco * st.g[s];
      const double df = dco * cp;
      const double dg = dco * st.i[s];
      dc[s] = dco * st.f[s];
      dai[s] = di * st.i[s] * (1.0 - st.i[s]);
      daf[s] = df * st.f[s] * (1.0 - st.f[s]);
      dao[s] = do_ * st.o[s] * (1.0 - st.o[s]);
      dag[s] = dg * (1.0 - st.g[s] * st.g[s]);
    }
    add_outer(grad.Wi, dai, st.z);
    add_outer(grad.Wf, daf, st.z);
    add_outer(grad.Wo, dao, st.z);
    add_outer(grad.Wc, dag, st.z);
    for (int u = 0; u < h_dim; ++u) {
      const std::size_t s = static_cast<std::size_t>(u);
      grad.bi[s] += dai[s];
      grad.bf[s] += daf[s];
      grad.bo[s] += dao[s];
      grad.bc[s] += dag[s];
    }
    const Vec dzi = mat_tvec(p.Wi, dai);
    const Vec dzf = mat_tvec(p.Wf, daf);
    const Vec dzo = mat_tvec(p.Wo, dao);
    const Vec dzg = mat_tvec(p.Wc, dag);
    dh.assign(static_cast<std::size_t>(h_dim), 0.0);
    for (int u = 0; u < h_dim; ++u) {
      const std::size_t s = static_cast<std::size_t>(in_dim + u);
      dh[static_cast<std::size_t>(u)] = dzi[s] + dzf[s] + dzo[s] + dzg[s];
    }
  }
}

// ---------------------------------------------------------------------------
// Second-stage model

SecondStageModel SecondStageModel::make(int query_user_dim, int listing_dim,
                                        int hidden, int tower_out,
                                        int lstm_hidden, int embedding_dim,
                                        Rng& rng) {
  SecondStageModel m;
  m.query_tower = DenseStack::make({query_user_dim, hidden, tower_out}, rng);
  m.lstm = LstmParams::make(listing_dim, lstm_hidden, rng);
  m.projection.W = glorot(embedding_dim, tower_out + lstm_hidden, rng);
  m.projection.b.assign(static_cast<std::size_t>(embedding_dim), 0.0);
  m.listing_tower =
      DenseStack::make({listing_dim, hidden, hidden, embedding_dim}, rng);
  return m;
}

SecondStageModel SecondStageModel::zeros_like(const SecondStageModel& other) {
  SecondStageModel m;
  m.query_tower = DenseStack::zeros_like(other.query_tower);
  m.lstm = LstmParams::zeros_like(other.lstm);
  m.projection.W = Mat::zeros(other.projection.W.rows, other.projection.W.cols);
  m.projection.b.assign(other.projection.b.size(), 0.0);
  m.listing_tower = DenseStack::zeros_like(other.listing_tower);
  return m;
}

Vec query_context_embedding(const SecondStageModel& m, const Vec& query_feats,
                            const Vec& user_feats, std::span<const Vec> seq,
                            QceCache* cache) {
  const Vec qu = concat(query_feats, user_feats);
  QceCache local;
  QceCache& c = cache ? *cache : local;
  const Vec tower = dense_forward(m.query_tower, qu, &c.tower);
  const Vec h_n = lstm_forward(m.lstm, seq, &c.lstm);
  c.concat_in = concat(tower, h_n);
  Vec out = matvec(m.projection.W, c.concat_in);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = std::tanh(out[i] + m.projection.b[i]);
  c.out = out;
  return out;
}

void query_context_embedding_backward(const SecondStageModel& m,
                                      const QceCache& cache, const Vec& dout,
                                      SecondStageModel& grad) {
  Vec dpre(dout.size());
  for (std::size_t i = 0; i < dout.size(); ++i)
    dpre[i] = dout[i] * (1.0 - cache.out[i] * cache.out[i]);
  add_outer(grad.projection.W, dpre, cache.concat_in);
  for (std::size_t i = 0; i < dpre.size(); ++i) grad.projection.b[i] += dpre[i];
  const Vec dconcat = mat_tvec(m.projection.W, dpre);
  const int tower_out = m.query_tower.out_dim();
  Vec dtower(dconcat.begin(), dconcat.begin() + tower_out);
  Vec dh(dconcat.begin() + tower_out, dconcat.end());
  dense_backward(m.query_tower, cache.tower, dtower, grad.query_tower);
  if (!cache.lstm.steps.empty()) lstm_backward(m.lstm, cache.lstm, dh, grad.lstm);
}

double second_stage_score(const SecondStageModel& m, const Vec& listing_vec,
                          const Vec& qce, ScoreCache* cache) {
  ScoreCache local;
  ScoreCache& c = cache ? *cache : local;
  c.embedding = dense_forward(m.listing_tower, listing_vec, &c.tower);
  if (c.embedding.size() != qce.size())
    throw std::domain_error("second_stage_score: embedding dim mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < qce.size(); ++i) {
    const double d = c.embedding[i] - qce[i];
    sq += d * d;
  }
  c.dist = std::sqrt(sq);
  return -c.dist;
}

Vec contextual_aggregates(std::span<const Listing> top_k,
                          const RetrievalSet& ctx) {
  if (top_k.empty())
    throw std::domain_error("contextual_aggregates: empty top-K");
  const FeatureScaler scaler = FeatureScaler::fit(ctx);
  const double n = static_cast<double>(top_k.size());
  // Normalized price, lat, lng, capacity are feature components 0..3.
  double sum[4] = {0, 0, 0, 0};
  double sumsq[4] = {0, 0, 0, 0};
  double room[kRoomTypeCount] = {0, 0, 0, 0};
  for (const Listing& l : top_k) {
    const FeatureVector v = scaler.vector_of(l);
    for (int k = 0; k < 4; ++k) {
      sum[k] += v[static_cast<std::size_t>(k)];
      sumsq[k] += v[static_cast<std::size_t>(k)] * v[static_cast<std::size_t>(k)];
    }
    room[static_cast<int>(l.room_type)] += 1.0;
  }
  Vec out;
  out.reserve(kContextualDim);
  for (int k = 0; k < 4; ++k) {
    const double mean = sum[k] / n;
    out.push_back(mean);
    out.push_back(std::max(0.0, sumsq[k] / n - mean * mean));
  }
  for (int r = 0; r < kRoomTypeCount; ++r) out.push_back(room[r] / n);
  return out;
}

// ---------------------------------------------------------------------------
// Training

const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Base: return "base";
    case ModelKind::Contextual: return "contextual";
    case ModelKind::Combined: return "combined";
    default: return "qce";
  }
}

ModelKind model_kind_from_name(const std::string& name) {
  if (name == "base") return ModelKind::Base;
  if (name == "contextual") return ModelKind::Contextual;
  if (name == "combined") return ModelKind::Combined;
  if (name == "qce") return ModelKind::Qce;
  throw config_error("unknown model kind: " + name);
}

namespace {

class Adam {
 public:
  Adam(std::size_t n, const TrainConfig& cfg)
      : m_(n, 0.0), v_(n, 0.0), cfg_(cfg) {}

  void step(std::span<double*> params, std::span<double* const> grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double g = *grads[i];
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g * g;
      const double mhat = m_[i] / bc1;
      const double vhat = v_[i] / bc2;
      *params[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

 private:
  std::vector<double> m_, v_;
  TrainConfig cfg_;
  int t_ = 0;
};

Vec scorer_input(const SessionExample& ex, int listing, bool contextual) {
  Vec in = concat(ex.listing_feats[static_cast<std::size_t>(listing)],
                  ex.query_user);
  if (contextual) in = concat(in, ex.ctx_aggregates);
  return in;
}

// Indices of the current top `window` listings by (score desc, id asc).
std::vector<int> top_window(const std::vector<double>& scores,
                            const std::vector<std::int64_t>& ids,
                            int window) {
  std::vector<int> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (scores[static_cast<std::size_t>(a)] !=
        scores[static_cast<std::size_t>(b)])
      return scores[static_cast<std::size_t>(a)] >
             scores[static_cast<std::size_t>(b)];
    return ids[static_cast<std::size_t>(a)] < ids[static_cast<std::size_t>(b)];
  });
  idx.resize(std::min<std::size_t>(idx.size(),
                                   static_cast<std::size_t>(window)));
  return idx;
}

double surrogate_term(const std::vector<double>& scores,
                      const SessionExample& ex,
                      const std::vector<int>& buckets,
                      const Distribution& target, int window,
                      std::vector<double>& d_scores) {
  const std::vector<int> win = top_window(scores, ex.listing_ids, window);
  std::vector<double> logits;
  std::vector<std::vector<double>> onehots;
  logits.reserve(win.size());
  onehots.reserve(win.size());
  for (int i : win) {
    logits.push_back(scores[static_cast<std::size_t>(i)]);
    std::vector<double> row(target.size(), 0.0);
    row[static_cast<std::size_t>(buckets[static_cast<std::size_t>(i)])] = 1.0;
    onehots.push_back(std::move(row));
  }
  const SurrogateLossResult r =
      surrogate_distribution_loss(logits, onehots, target);
  for (std::size_t w = 0; w < win.size(); ++w)
    d_scores[static_cast<std::size_t>(win[w])] += r.d_logits[w];
  return r.loss;
}

}  // namespace

TrainResult train(ModelKind kind, std::span<const SessionExample> data,
                  const TrainConfig& cfg, const NetConfig& net) {
  if (data.empty()) throw std::domain_error("train: empty data");
  const bool contextual = kind == ModelKind::Contextual;
  const bool use_loc = kind != ModelKind::Qce && cfg.w_loc > 0.0;
  const bool use_price = kind != ModelKind::Qce && cfg.w_price > 0.0;

  Rng init_rng(mix_seed(cfg.seed, 0x11f0));
  TrainResult result;
  result.model.kind = kind;
  result.model.net = net;

  const int listing_dim =
      static_cast<int>(data.front().listing_feats.front().size());
  const int qu_dim = static_cast<int>(data.front().query_user.size());

  std::vector<double*> params;
  if (kind == ModelKind::Qce) {
    result.model.qce =
        SecondStageModel::make(qu_dim, listing_dim, net.hidden, net.tower_out,
                               net.lstm_hidden, net.embedding_dim, init_rng);
    params = param_ptrs(result.model.qce);
  } else {
    int in_dim = listing_dim + qu_dim;
    if (contextual) in_dim += static_cast<int>(data.front().ctx_aggregates.size());
    result.model.scorer =
        DenseStack::make({in_dim, net.hidden, net.hidden, 1}, init_rng);
    params = param_ptrs(result.model.scorer);
  }

  Adam adam(params.size(), cfg);
  DenseStack scorer_grad;
  SecondStageModel qce_grad;

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng epoch_rng(mix_seed(cfg.seed, 0xe90c + static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(order);
    double epoch_loss = 0.0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t stop = std::min(
          order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(stop - start);

      std::vector<double*> grad_ptrs;
      if (kind == ModelKind::Qce) {
        qce_grad = SecondStageModel::zeros_like(result.model.qce);
        grad_ptrs = param_ptrs(qce_grad);
      } else {
        scorer_grad = DenseStack::zeros_like(result.model.scorer);
        grad_ptrs = param_ptrs(scorer_grad);
      }

      for (std::size_t bi = start; bi < stop; ++bi) {
        const SessionExample& ex = data[order[bi]];
        double session_loss = 0.0;

        if (kind == ModelKind::Qce) {
          QceCache qcache;
          // The spec inputs are query features and user features; they
          // arrive pre-concatenated here.
          const Vec qce = query_context_embedding(result.model.qce,
                                                  ex.query_user, Vec{},
                                                  ex.listing_feats, &qcache);
          if (ex.pairs.empty()) continue;
          // Forward each distinct pair member once.
          std::set<int> needed;
          for (const auto& [b, u] : ex.pairs) {
            needed.insert(b);
            needed.insert(u);
          }
          std::vector<ScoreCache> caches;
          std::vector<double> scores;
          std::vector<int> members(needed.begin(), needed.end());
          std::vector<int> member_pos(ex.listing_feats.size(), -1);
          caches.resize(members.size());
          scores.resize(members.size());
          for (std::size_t mi = 0; mi < members.size(); ++mi) {
            member_pos[static_cast<std::size_t>(members[mi])] =
                static_cast<int>(mi);
            scores[mi] = second_stage_score(
                result.model.qce,
                ex.listing_feats[static_cast<std::size_t>(members[mi])], qce,
                &caches[mi]);
          }
          std::vector<double> d_scores(members.size(), 0.0);
          double pair_sum = 0.0;
          for (const auto& [b, u] : ex.pairs) {
            const int pb = member_pos[static_cast<std::size_t>(b)];
            const int pu = member_pos[static_cast<std::size_t>(u)];
            const PairwiseLossResult pl = pairwise_loss(
                scores[static_cast<std::size_t>(pb)],
                scores[static_cast<std::size_t>(pu)]);
            pair_sum += pl.loss;
            d_scores[static_cast<std::size_t>(pb)] += pl.d_booked;
            d_scores[static_cast<std::size_t>(pu)] += pl.d_unbooked;
          }
          const double pair_scale =
              cfg.w_pair / static_cast<double>(ex.pairs.size());
          session_loss = pair_scale * pair_sum;

          Vec d_qce(qce.size(), 0.0);
          for (std::size_t mi = 0; mi < members.size(); ++mi) {
            const double ds =
                d_scores[mi] * pair_scale * inv_batch;
            if (ds == 0.0) continue;
            const ScoreCache& sc = caches[mi];
            const double safe = std::max(sc.dist, 1e-12);
            Vec demb(qce.size());
            for (std::size_t i = 0; i < qce.size(); ++i) {
              const double dir = (sc.embedding[i] - qce[i]) / safe;
              demb[i] = -ds * dir;
              d_qce[i] += ds * dir;
            }
            dense_backward(result.model.qce.listing_tower, sc.tower, demb,
                           qce_grad.listing_tower);
          }
          query_context_embedding_backward(result.model.qce, qcache, d_qce,
                                           qce_grad);
        } else {
          const std::size_t n_listings = ex.listing_feats.size();
          std::vector<double> scores(n_listings, 0.0);
          std::vector<DenseCache> caches(n_listings);
          std::vector<bool> forwarded(n_listings, false);
          std::vector<double> d_scores(n_listings, 0.0);

          auto ensure_forward = [&](int i) {
            const std::size_t s = static_cast<std::size_t>(i);
            if (forwarded[s]) return;
            forwarded[s] = true;
            scores[s] = dense_forward(result.model.scorer,
                                      scorer_input(ex, i, contextual),
                                      &caches[s])[0];
          };

          if (use_loc || use_price) {
            for (std::size_t i = 0; i < n_listings; ++i)
              ensure_forward(static_cast<int>(i));
          } else {
            for (const auto& [b, u] : ex.pairs) {
              ensure_forward(b);
              ensure_forward(u);
            }
          }

          if (!ex.pairs.empty() && cfg.w_pair > 0.0) {
            double pair_sum = 0.0;
            const double pair_scale =
                cfg.w_pair / static_cast<double>(ex.pairs.size());
            for (const auto& [b, u] : ex.pairs) {
              const PairwiseLossResult pl =
                  pairwise_loss(scores[static_cast<std::size_t>(b)],
                                scores[static_cast<std::size_t>(u)]);
              pair_sum += pl.loss;
              d_scores[static_cast<std::size_t>(b)] += pair_scale * pl.d_booked;
              d_scores[static_cast<std::size_t>(u)] +=
                  pair_scale * pl.d_unbooked;
            }
            session_loss += pair_scale * pair_sum;
          }
          if (use_loc) {
            std::vector<double> ds(n_listings, 0.0);
            const double l = surrogate_term(scores, ex, ex.loc_bucket,
                                            ex.loc_target, cfg.dist_window, ds);
            session_loss += cfg.w_loc * l;
            for (std::size_t i = 0; i < n_listings; ++i)
              d_scores[i] += cfg.w_loc * ds[i];
          }
          if (use_price) {
            std::vector<double> ds(n_listings, 0.0);
            const double l =
                surrogate_term(scores, ex, ex.price_bucket, ex.price_target,
                               cfg.dist_window, ds);
            session_loss += cfg.w_price * l;
            for (std::size_t i = 0; i < n_listings; ++i)
              d_scores[i] += cfg.w_price * ds[i];
          }

          for (std::size_t i = 0; i < n_listings; ++i) {
            if (!forwarded[i] || d_scores[i] == 0.0) continue;
            dense_backward(result.model.scorer, caches[i],
                           Vec{d_scores[i] * inv_batch}, scorer_grad);
          }
        }
        epoch_loss += session_loss;
      }

      adam.step(params, grad_ptrs);
    }

    const double mean_loss = epoch_loss / static_cast<double>(data.size());
    if (!std::isfinite(mean_loss))
      throw data_error("train: non-finite loss at epoch " +
                       std::to_string(epoch));
    result.epoch_loss.push_back(mean_loss);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

json mat_to_json(const Mat& m) {
  return json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.a}};
}

Mat mat_from_json(const json& j) {
  Mat m;
  m.rows = j.at("rows").get<int>();
  m.cols = j.at("cols").get<int>();
  m.a = j.at("data").get<std::vector<double>>();
  if (m.a.size() != static_cast<std::size_t>(m.rows) *
                        static_cast<std::size_t>(m.cols))
    throw data_error("model: tensor size mismatch");
  return m;
}

json stack_to_json(const DenseStack& s) {
  json layers = json::array();
  for (const DenseLayer& l : s.layers)
    layers.push_back(json{{"W", mat_to_json(l.W)}, {"b", l.b}});
  return layers;
}

DenseStack stack_from_json(const json& j) {
  DenseStack s;
  for (const json& jl : j) {
    DenseLayer l;
    l.W = mat_from_json(jl.at("W"));
    l.b = jl.at("b").get<Vec>();
    s.layers.push_back(std::move(l));
  }
  return s;
}

json lstm_to_json(const LstmParams& p) {
  return json{{"Wi", mat_to_json(p.Wi)}, {"Wf", mat_to_json(p.Wf)},
              {"Wo", mat_to_json(p.Wo)}, {"Wc", mat_to_json(p.Wc)},
              {"bi", p.bi},              {"bf", p.bf},
              {"bo", p.bo},              {"bc", p.bc}};
}

LstmParams lstm_from_json(const json& j) {
  LstmParams p;
  p.Wi = mat_from_json(j.at("Wi"));
  p.Wf = mat_from_json(j.at("Wf"));
  p.Wo = mat_from_json(j.at("Wo"));
  p.Wc = mat_from_json(j.at("Wc"));
  p.bi = j.at("bi").get<Vec>();
  p.bf = j.at("bf").get<Vec>();
  p.bo = j.at("bo").get<Vec>();
  p.bc = j.at("bc").get<Vec>();
  return p;
}

}  // namespace

json TrainedModel::to_json() const {
  json j{{"format", "divrank-model-v1"},
         {"kind", model_kind_name(kind)},
         {"net",
          {{"hidden", net.hidden},
           {"tower_out", net.tower_out},
           {"lstm_hidden", net.lstm_hidden},
           {"embedding_dim", net.embedding_dim}}}};
  if (kind == ModelKind::Qce) {
    j["query_tower"] = stack_to_json(qce.query_tower);
    j["lstm"] = lstm_to_json(qce.lstm);
    j["projection"] =
        json{{"W", mat_to_json(qce.projection.W)}, {"b", qce.projection.b}};
    j["listing_tower"] = stack_to_json(qce.listing_tower);
  } else {
    j["scorer"] = stack_to_json(scorer);
  }
  return j;
}

TrainedModel TrainedModel::from_json(const json& j) {
  if (j.at("format").get<std::string>() != "divrank-model-v1")
    throw data_error("model: unknown serialization format");
  TrainedModel m;
  m.kind = model_kind_from_name(j.at("kind").get<std::string>());
  m.net.hidden = j.at("net").at("hidden").get<int>();
  m.net.tower_out = j.at("net").at("tower_out").get<int>();
  m.net.lstm_hidden = j.at("net").at("lstm_hidden").get<int>();
  m.net.embedding_dim = j.at("net").at("embedding_dim").get<int>();
  if (m.kind == ModelKind::Qce) {
    m.qce.query_tower = stack_from_json(j.at("query_tower"));
    m.qce.lstm = lstm_from_json(j.at("lstm"));
    m.qce.projection.W = mat_from_json(j.at("projection").at("W"));
    m.qce.projection.b = j.at("projection").at("b").get<Vec>();
    m.qce.listing_tower = stack_from_json(j.at("listing_tower"));
  } else {
    m.scorer = stack_from_json(j.at("scorer"));
  }
  return m;
}

}  // namespace divrank
