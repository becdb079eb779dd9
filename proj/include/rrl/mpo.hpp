#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <mutex>
#include <stdexcept>
#include <vector>

#include "rrl/adam.hpp"
#include "rrl/nn.hpp"
#include "rrl/rng.hpp"
#include "rrl/tensor.hpp"

namespace rrl {

// ---------------------------------------------------------------------------
// Fixed categorical support
// ---------------------------------------------------------------------------

struct Support {
  float vmin = 0.0f, vmax = 1.0f;
  int atoms = 51;

  float delta() const { return (vmax - vmin) / static_cast<float>(atoms - 1); }
  float z(int i) const { return vmin + delta() * static_cast<float>(i); }
};

/// C51 projection: transform every atom by T z = clip(r + (1-done) * gamma * z)
/// and split its mass linearly between the two nearest support atoms.
inline std::vector<float> categorical_projection(float reward, bool done, float gamma,
                                                 const std::vector<float>& next_probs,
                                                 const Support& sup) {
  if (static_cast<int>(next_probs.size()) != sup.atoms)
    throw std::invalid_argument("categorical_projection: probability size mismatch");
  std::vector<double> m(static_cast<size_t>(sup.atoms), 0.0);
  const double delta = sup.delta();
  for (int j = 0; j < sup.atoms; ++j) {
    const double p = next_probs[static_cast<size_t>(j)];
    if (p == 0.0) continue;
    double tz = reward + (done ? 0.0 : static_cast<double>(gamma) * sup.z(j));
    tz = std::clamp(tz, static_cast<double>(sup.vmin), static_cast<double>(sup.vmax));
    const double b = (tz - sup.vmin) / delta;
    const int lo = static_cast<int>(std::floor(b));
    const int hi = std::min(lo + 1, sup.atoms - 1);
    const double frac = b - lo;
    m[static_cast<size_t>(lo)] += p * (1.0 - frac);
    m[static_cast<size_t>(hi)] += p * frac;
  }
  std::vector<float> out(static_cast<size_t>(sup.atoms));
  for (int i = 0; i < sup.atoms; ++i) out[static_cast<size_t>(i)] = static_cast<float>(m[static_cast<size_t>(i)]);
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian policy head: MLP emitting (mu, rho) with sigma = softplus(rho)
// ---------------------------------------------------------------------------

inline float softplus(float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); }
inline float softplus_inv(float y) { return y > 20.0f ? y : std::log(std::expm1(y)); }
inline float sigmoidf(float x) { return 1.0f / (1.0f + std::exp(-x)); }

constexpr float kSigmaFloor = 1e-6f;

struct GaussianPolicy {
  Network net;
  int act_dim = 0;

  struct Out {
    Tensor mu;     // {B, A}
    Tensor sigma;  // {B, A}
  };

  /// Builds input -> [sizes with layer norm + relu] -> (mu, rho). The output
  /// layer is zero-initialized: mu is exactly 0 and sigma exactly sigma_init
  /// for every input at initialization.
  static GaussianPolicy build(int in_dim, const std::vector<int>& sizes, int act_dim,
                              float sigma_init, Rng& rng, const std::string& prefix) {
    GaussianPolicy p;
    p.act_dim = act_dim;
    p.net.input({in_dim});
    for (size_t i = 0; i < sizes.size(); ++i) {
      p.net.dense(prefix + "_l" + std::to_string(i), sizes[i]);
      p.net.layer_norm(prefix + "_ln" + std::to_string(i));
      p.net.relu();
    }
    p.net.dense(prefix + "_out", 2 * act_dim, Init::kZero);
    p.net.init_params(rng);
    const float rho0 = softplus_inv(sigma_init);
    for (int d = 0; d < act_dim; ++d) p.net.layers.back().bias[act_dim + d] = rho0;
    return p;
  }

  Out evaluate(const Tensor& features, Forward& ws) const {
    const Tensor& raw = net.forward(features, nullptr, ws);
    const int b = raw.dim(0);
    Out out;
    out.mu = Tensor({b, act_dim});
    out.sigma = Tensor({b, act_dim});
    for (int i = 0; i < b; ++i)
      for (int d = 0; d < act_dim; ++d) {
        const float mu = raw[static_cast<int64_t>(i) * 2 * act_dim + d];
        const float sg = softplus(raw[static_cast<int64_t>(i) * 2 * act_dim + act_dim + d]);
        if (!std::isfinite(mu) || !std::isfinite(sg))
          throw std::runtime_error("gaussian policy: non-finite parameters");
        if (sg < kSigmaFloor)
          throw std::runtime_error("gaussian policy: sigma collapsed below 1e-6");
        out.mu[static_cast<int64_t>(i) * act_dim + d] = mu;
        out.sigma[static_cast<int64_t>(i) * act_dim + d] = sg;
      }
    return out;
  }

  /// Chains (dmu, dsigma) through the softplus and the network.
  void backward(const Forward& ws, const Tensor& dmu, const Tensor& dsigma, Grads& grads) const {
    const Tensor& raw = ws.acts.back();
    const int b = raw.dim(0);
    Tensor draw({b, 2 * act_dim});
    for (int i = 0; i < b; ++i)
      for (int d = 0; d < act_dim; ++d) {
        draw[static_cast<int64_t>(i) * 2 * act_dim + d] = dmu[static_cast<int64_t>(i) * act_dim + d];
        const float rho = raw[static_cast<int64_t>(i) * 2 * act_dim + act_dim + d];
        draw[static_cast<int64_t>(i) * 2 * act_dim + act_dim + d] =
            dsigma[static_cast<int64_t>(i) * act_dim + d] * sigmoidf(rho);
      }
    net.backward(ws, draw, grads);
  }
};

inline double gaussian_log_prob(const float* x, const float* mu, const float* sigma, int dim) {
  double lp = 0.0;
  for (int d = 0; d < dim; ++d) {
    const double z = (static_cast<double>(x[d]) - mu[d]) / sigma[d];
    lp += -0.5 * z * z - std::log(static_cast<double>(sigma[d])) - 0.5 * std::log(2.0 * M_PI);
  }
  return lp;
}

// ---------------------------------------------------------------------------
// Categorical critic: MLP over [features ; action] emitting atom logits
// ---------------------------------------------------------------------------

struct CategoricalCritic {
  Network net;
  Support support;

  static CategoricalCritic build(int in_dim, const std::vector<int>& sizes, const Support& sup,
                                 Rng& rng, const std::string& prefix) {
    CategoricalCritic c;
    c.support = sup;
    c.net.input({in_dim});
    for (size_t i = 0; i < sizes.size(); ++i) {
      c.net.dense(prefix + "_l" + std::to_string(i), sizes[i]);
      c.net.layer_norm(prefix + "_ln" + std::to_string(i));
      c.net.relu();
    }
    // Zero-initialized logits: the initial value distribution is uniform.
    c.net.dense(prefix + "_out", sup.atoms, Init::kZero);
    c.net.init_params(rng);
    return c;
  }

  /// Softmax over atom logits, written into probs {B, atoms}.
  const Tensor& logits(const Tensor& input, Forward& ws) const {
    return net.forward(input, nullptr, ws);
  }

  static void probs_from_logits(const Tensor& logits, Tensor& probs) {
    probs = logits;
    const int atoms = logits.dim(1);
    for (int i = 0; i < logits.dim(0); ++i) {
      float* row = &probs[static_cast<int64_t>(i) * atoms];
      float mx = row[0];
      for (int a = 1; a < atoms; ++a) mx = std::max(mx, row[a]);
      float sum = 0.0f;
      for (int a = 0; a < atoms; ++a) {
        row[a] = std::exp(row[a] - mx);
        sum += row[a];
      }
      const float inv = 1.0f / sum;
      for (int a = 0; a < atoms; ++a) row[a] *= inv;
    }
  }

  double q_value(const float* probs) const {
    double q = 0.0;
    for (int a = 0; a < support.atoms; ++a) q += static_cast<double>(probs[a]) * support.z(a);
    return q;
  }
};

// ---------------------------------------------------------------------------
// MPO E-step: closed-form reweighting with the temperature dual solved by
// bounded scalar minimization of g(eta).
// ---------------------------------------------------------------------------

struct EStepResult {
  std::vector<float> weights;  // row-major {states, samples}, rows sum to 1
  double eta = 1.0;
  bool at_bound = false;
};

inline double mpo_dual_value(const std::vector<float>& q, int states, int samples, double epsilon,
                             double eta) {
  double acc = 0.0;
  for (int s = 0; s < states; ++s) {
    const float* row = q.data() + static_cast<int64_t>(s) * samples;
    double mx = row[0];
    for (int i = 1; i < samples; ++i) mx = std::max(mx, static_cast<double>(row[i]));
    double sum = 0.0;
    for (int i = 0; i < samples; ++i) sum += std::exp((row[i] - mx) / eta);
    acc += mx / eta + std::log(sum / samples);
  }
  return eta * epsilon + eta * (acc / states);
}

inline EStepResult mpo_e_step(const std::vector<float>& q, int states, int samples,
                              double epsilon) {
  if (samples < 2) throw std::invalid_argument("mpo_e_step: need at least 2 action samples");
  if (!(epsilon > 0.0)) throw std::invalid_argument("mpo_e_step: epsilon must be positive");
  if (static_cast<int64_t>(q.size()) != static_cast<int64_t>(states) * samples)
    throw std::invalid_argument("mpo_e_step: Q matrix size mismatch");

  // Golden-section search on log(eta); g is convex in eta.
  const double lo = std::log(1e-6), hi = std::log(1e3);
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = lo, b = hi;
  double c = b - gr * (b - a), d = a + gr * (b - a);
  double fc = mpo_dual_value(q, states, samples, epsilon, std::exp(c));
  double fd = mpo_dual_value(q, states, samples, epsilon, std::exp(d));
  for (int it = 0; it < 80; ++it) {
    if (fc < fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - gr * (b - a);
      fc = mpo_dual_value(q, states, samples, epsilon, std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + gr * (b - a);
      fd = mpo_dual_value(q, states, samples, epsilon, std::exp(d));
    }
  }
  EStepResult res;
  res.eta = std::exp(0.5 * (a + b));
  res.at_bound = (a - lo) < 1e-3 || (hi - b) < 1e-3;

  res.weights.resize(q.size());
  for (int s = 0; s < states; ++s) {
    const float* row = q.data() + static_cast<int64_t>(s) * samples;
    float* w = res.weights.data() + static_cast<int64_t>(s) * samples;
    double mx = row[0];
    for (int i = 1; i < samples; ++i) mx = std::max(mx, static_cast<double>(row[i]));
    double sum = 0.0;
    for (int i = 0; i < samples; ++i) {
      const double e = std::exp((row[i] - mx) / res.eta);
      w[i] = static_cast<float>(e);
      sum += e;
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int i = 0; i < samples; ++i) w[i] *= inv;
  }
  return res;
}

// ---------------------------------------------------------------------------
// MPO M-step: KL-regularized weighted maximum likelihood with decoupled
// mean/covariance constraints and Lagrange multipliers on their own gradients.
// ---------------------------------------------------------------------------

struct DualVariables {
  double epsilon_kl = 0.1;      // E-step bound
  double epsilon_mu = 1e-2;     // decoupled mean KL bound
  double epsilon_sigma = 1e-4;  // decoupled covariance KL bound
  float alpha_mu_param = 1.0f;  // softplus parameterization keeps alpha >= 0
  float alpha_sigma_param = 1.0f;
  double last_eta = 1.0;

  double alpha_mu() const { return softplus(alpha_mu_param); }
  double alpha_sigma() const { return softplus(alpha_sigma_param); }
};

struct MStepGrads {
  Tensor dmu, dsigma;           // {B, A}, gradients for the online actor outputs
  double kl_mu = 0.0, kl_sigma = 0.0;  // batch-mean decoupled KLs
  double dalpha_mu_param = 0.0, dalpha_sigma_param = 0.0;
};

/// Output-level gradients of the M-step objective. `actions` holds the M
/// sampled actions per state ({B, M, A} row-major) with per-state weights
/// summing to one.
inline MStepGrads mpo_m_step_grads(const Tensor& mu, const Tensor& sigma, const Tensor& mu_t,
                                   const Tensor& sigma_t, const std::vector<float>& actions,
                                   const std::vector<float>& weights, int samples,
                                   const DualVariables& duals) {
  const int b = mu.dim(0);
  const int ad = mu.dim(1);
  MStepGrads g;
  g.dmu = Tensor({b, ad});
  g.dsigma = Tensor({b, ad});
  const float inv_b = 1.0f / static_cast<float>(b);
  const double a_mu = duals.alpha_mu();
  const double a_sigma = duals.alpha_sigma();

  for (int s = 0; s < b; ++s) {
    const float* mu_s = &mu[static_cast<int64_t>(s) * ad];
    const float* sg_s = &sigma[static_cast<int64_t>(s) * ad];
    const float* mut_s = &mu_t[static_cast<int64_t>(s) * ad];
    const float* sgt_s = &sigma_t[static_cast<int64_t>(s) * ad];
    float* dmu_s = &g.dmu[static_cast<int64_t>(s) * ad];
    float* dsg_s = &g.dsigma[static_cast<int64_t>(s) * ad];

    for (int i = 0; i < samples; ++i) {
      const float w = weights[static_cast<int64_t>(s) * samples + i];
      if (w == 0.0f) continue;
      const float* a = actions.data() + (static_cast<int64_t>(s) * samples + i) * ad;
      for (int d = 0; d < ad; ++d) {
        // Mean term evaluated with the target covariance.
        const float st2 = sgt_s[d] * sgt_s[d];
        dmu_s[d] += w * (mu_s[d] - a[d]) / st2 * inv_b;
        // Covariance term evaluated with the target mean.
        const float diff = a[d] - mut_s[d];
        const float s2 = sg_s[d] * sg_s[d];
        dsg_s[d] += w * (1.0f / sg_s[d] - diff * diff / (s2 * sg_s[d])) * inv_b;
      }
    }

    for (int d = 0; d < ad; ++d) {
      const float st2 = sgt_s[d] * sgt_s[d];
      const double dm = static_cast<double>(mut_s[d]) - mu_s[d];
      g.kl_mu += 0.5 * dm * dm / st2 / b;
      const double ratio = static_cast<double>(sgt_s[d]) / sg_s[d];
      g.kl_sigma += (std::log(static_cast<double>(sg_s[d]) / sgt_s[d]) + 0.5 * ratio * ratio - 0.5) / b;
      // KL penalty gradients (alpha treated as constant here).
      dmu_s[d] += static_cast<float>(a_mu) * (mu_s[d] - mut_s[d]) / st2 * inv_b;
      dsg_s[d] += static_cast<float>(a_sigma) *
                  (1.0f / sg_s[d] - st2 / (sg_s[d] * sg_s[d] * sg_s[d])) * inv_b;
    }
  }

  // Dual descent: alpha grows while the measured KL exceeds its bound.
  g.dalpha_mu_param = (duals.epsilon_mu - g.kl_mu) * sigmoidf(duals.alpha_mu_param);
  g.dalpha_sigma_param = (duals.epsilon_sigma - g.kl_sigma) * sigmoidf(duals.alpha_sigma_param);
  return g;
}

// ---------------------------------------------------------------------------
// Replay buffer: FIFO ring, uniform without-replacement minibatches.
// ---------------------------------------------------------------------------

template <class Entry>
class ReplayBuffer {
 public:
  explicit ReplayBuffer(size_t capacity) : capacity_(capacity) { ring_.reserve(capacity); }

  void add(Entry e) {
    std::lock_guard<std::mutex> lock(mu_);
    if (ring_.size() < capacity_) {
      ring_.push_back(std::move(e));
    } else {
      ring_[head_] = std::move(e);
      head_ = (head_ + 1) % capacity_;
    }
    ++inserted_;
  }

  size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return ring_.size();
  }
  int64_t inserted() const {
    std::lock_guard<std::mutex> lock(mu_);
    return inserted_;
  }

  /// Copies a uniform without-replacement sample of `n` entries.
  std::vector<Entry> sample(size_t n, Rng& rng) const {
    std::lock_guard<std::mutex> lock(mu_);
    if (n > ring_.size()) throw std::invalid_argument("replay sample: not enough entries");
    std::vector<size_t> idx;
    idx.reserve(n);
    while (idx.size() < n) {
      const size_t k = rng.uniform_int(ring_.size());
      bool dup = false;
      for (size_t j : idx)
        if (j == k) {
          dup = true;
          break;
        }
      if (!dup) idx.push_back(k);
    }
    std::vector<Entry> out;
    out.reserve(n);
    for (size_t k : idx) out.push_back(ring_[k]);
    return out;
  }

  /// Oldest entry currently retained (for FIFO checks).
  Entry oldest() const {
    std::lock_guard<std::mutex> lock(mu_);
    return ring_.size() < capacity_ ? ring_.front() : ring_[head_];
  }

 private:
  size_t capacity_;
  mutable std::mutex mu_;
  std::vector<Entry> ring_;
  size_t head_ = 0;
  int64_t inserted_ = 0;
};

// ---------------------------------------------------------------------------
// Learner: one distributional-critic TD step + E-step + M-step + dual step.
// ---------------------------------------------------------------------------

struct RlConfig {
  float gamma = 0.99f;
  float c_scale = 0.1f;     // residual denormalization scale
  float sigma_init = 0.33f;
  int action_samples = 20;  // M
  double epsilon_kl = 0.1;
  double epsilon_mu = 1e-2;
  double epsilon_sigma = 1e-4;
  int target_period = 100;
  int replay_capacity = 100000;
  int warmup = 1000;
  int batch_size = 64;
  float lr = 3.3e-4f;
  float dual_lr = 1e-2f;
  std::vector<int> actor_sizes{64, 64, 64};
  std::vector<int> critic_sizes{64, 64, 64};
  int atoms = 51;
  float vmin = 0.0f, vmax = 1.0f;
  int64_t total_env_steps = 200000;
  int64_t eval_period = 10000;
  int eval_episodes = 100;
  int eval_threads = 1;
  double stop_at_success_ma = 0.0;  // early stop once the 5-eval moving average reaches this
  int learner_steps_per_env_step = 1;
  int workers = 0;                  // 0 = single-threaded deterministic reference mode
};

struct Transition {
  std::vector<float> features;       // actor input at t
  std::array<float, 8> action{};    // residual sample in normalized space (act_dim used)
  float reward = 0.0f;
  uint8_t bootstrap = 1;             // 0 on true (success) terminals
  std::vector<float> next_features;  // actor input at t+1
};

struct LearnerStats {
  double critic_loss = 0.0;
  double eta = 1.0;
  double alpha_mu = 0.0;
  double alpha_sigma = 0.0;
  double kl_mu = 0.0, kl_sigma = 0.0;
  double mean_q = 0.0;
};

class MpoLearner {
 public:
  MpoLearner(int feature_dim, int act_dim, const RlConfig& cfg, Rng& init_rng)
      : cfg_(cfg), feature_dim_(feature_dim), act_dim_(act_dim) {
    const Support sup{cfg.vmin, cfg.vmax, cfg.atoms};
    actor_ = GaussianPolicy::build(feature_dim, cfg.actor_sizes, act_dim, cfg.sigma_init,
                                   init_rng, "actor");
    critic_ = CategoricalCritic::build(feature_dim + act_dim, cfg.critic_sizes, sup, init_rng,
                                       "critic");
    actor_target_ = actor_;
    critic_target_ = critic_;
    duals_.epsilon_kl = cfg.epsilon_kl;
    duals_.epsilon_mu = cfg.epsilon_mu;
    duals_.epsilon_sigma = cfg.epsilon_sigma;
    actor_adam_ = AdamState::init(actor_.net.param_tensors(), cfg.lr);
    critic_adam_ = AdamState::init(critic_.net.param_tensors(), cfg.lr);
    actor_grads_ = actor_.net.make_grads();
    critic_grads_ = critic_.net.make_grads();
  }

  const GaussianPolicy& actor() const { return actor_; }
  GaussianPolicy& actor() { return actor_; }
  const CategoricalCritic& critic() const { return critic_; }
  const DualVariables& duals() const { return duals_; }
  int64_t steps() const { return steps_; }
  int act_dim() const { return act_dim_; }
  int feature_dim() const { return feature_dim_; }

  /// One learner step on a sampled batch. When `dfeat_out` is non-null it
  /// receives the critic-loss gradient w.r.t. the current-step features
  /// (used by arms that train a trunk); actor gradients never flow there.
  LearnerStats learner_step(const std::vector<Transition>& batch, Rng& rng,
                            Tensor* dfeat_out = nullptr) {
    const int b = static_cast<int>(batch.size());
    const int fa = feature_dim_ + act_dim_;
    const Support& sup = critic_.support;
    LearnerStats stats;

    Tensor feats({b, feature_dim_}), next_feats({b, feature_dim_});
    for (int i = 0; i < b; ++i) {
      if (static_cast<int>(batch[static_cast<size_t>(i)].features.size()) != feature_dim_)
        throw std::invalid_argument("learner: feature dimension drift vs actor network");
      std::memcpy(&feats[static_cast<int64_t>(i) * feature_dim_],
                  batch[static_cast<size_t>(i)].features.data(),
                  sizeof(float) * static_cast<size_t>(feature_dim_));
      std::memcpy(&next_feats[static_cast<int64_t>(i) * feature_dim_],
                  batch[static_cast<size_t>(i)].next_features.data(),
                  sizeof(float) * static_cast<size_t>(feature_dim_));
    }

    // ---- critic TD update ----
    // Target distribution from the target critic at the target actor's mean
    // next action, projected back onto the support.
    Forward ws_ta;
    const GaussianPolicy::Out next_pi = actor_target_.evaluate(next_feats, ws_ta);
    Tensor next_in({b, fa});
    for (int i = 0; i < b; ++i) {
      std::memcpy(&next_in[static_cast<int64_t>(i) * fa],
                  &next_feats[static_cast<int64_t>(i) * feature_dim_],
                  sizeof(float) * static_cast<size_t>(feature_dim_));
      std::memcpy(&next_in[static_cast<int64_t>(i) * fa + feature_dim_],
                  &next_pi.mu[static_cast<int64_t>(i) * act_dim_],
                  sizeof(float) * static_cast<size_t>(act_dim_));
    }
    Forward ws_tc;
    Tensor next_probs;
    CategoricalCritic::probs_from_logits(critic_target_.logits(next_in, ws_tc), next_probs);

    Tensor cur_in({b, fa});
    for (int i = 0; i < b; ++i) {
      std::memcpy(&cur_in[static_cast<int64_t>(i) * fa],
                  &feats[static_cast<int64_t>(i) * feature_dim_],
                  sizeof(float) * static_cast<size_t>(feature_dim_));
      std::memcpy(&cur_in[static_cast<int64_t>(i) * fa + feature_dim_],
                  batch[static_cast<size_t>(i)].action.data(),
                  sizeof(float) * static_cast<size_t>(act_dim_));
    }
    Forward ws_c;
    const Tensor& logits = critic_.logits(cur_in, ws_c);
    Tensor probs;
    CategoricalCritic::probs_from_logits(logits, probs);

    Tensor dlogits({b, sup.atoms});
    double loss = 0.0;
    std::vector<float> row(static_cast<size_t>(sup.atoms));
    for (int i = 0; i < b; ++i) {
      std::copy(&next_probs[static_cast<int64_t>(i) * sup.atoms],
                &next_probs[static_cast<int64_t>(i) * sup.atoms] + sup.atoms, row.begin());
      const auto m = categorical_projection(batch[static_cast<size_t>(i)].reward,
                                            batch[static_cast<size_t>(i)].bootstrap == 0,
                                            cfg_.gamma, row, sup);
      const float* p = &probs[static_cast<int64_t>(i) * sup.atoms];
      for (int a = 0; a < sup.atoms; ++a) {
        if (m[static_cast<size_t>(a)] > 0.0f)
          loss -= static_cast<double>(m[static_cast<size_t>(a)]) *
                  std::log(std::max(p[a], 1e-12f));
        dlogits[static_cast<int64_t>(i) * sup.atoms + a] =
            (p[a] - m[static_cast<size_t>(a)]) / static_cast<float>(b);
      }
      stats.mean_q += critic_.q_value(p) / b;
    }
    loss /= b;
    if (!std::isfinite(loss)) throw std::runtime_error("learner: critic loss is not finite");
    stats.critic_loss = loss;

    critic_grads_.zero();
    Tensor dcur_in;
    critic_.net.backward(ws_c, dlogits, critic_grads_,
                         dfeat_out != nullptr ? &dcur_in : nullptr);
    if (dfeat_out != nullptr) {
      *dfeat_out = Tensor({b, feature_dim_});
      for (int i = 0; i < b; ++i)
        std::memcpy(&(*dfeat_out)[static_cast<int64_t>(i) * feature_dim_],
                    &dcur_in[static_cast<int64_t>(i) * fa],
                    sizeof(float) * static_cast<size_t>(feature_dim_));
    }
    {
      auto params = critic_.net.param_tensors();
      auto grads = critic_.net.grad_tensors(critic_grads_);
      adam_update(critic_adam_, params, std::vector<const Tensor*>(grads.begin(), grads.end()));
    }

    // ---- E-step: reweight M sampled actions by exponentiated advantage ----
    Forward ws_ta2;
    const GaussianPolicy::Out pi_t = actor_target_.evaluate(feats, ws_ta2);
    const int m_samples = cfg_.action_samples;
    std::vector<float> sampled(static_cast<size_t>(b) * m_samples * act_dim_);
    for (int s = 0; s < b; ++s)
      for (int i = 0; i < m_samples; ++i)
        for (int d = 0; d < act_dim_; ++d)
          sampled[(static_cast<size_t>(s) * m_samples + i) * act_dim_ + d] =
              pi_t.mu[static_cast<int64_t>(s) * act_dim_ + d] +
              pi_t.sigma[static_cast<int64_t>(s) * act_dim_ + d] *
                  static_cast<float>(rng.normal());

    Tensor estep_in({b * m_samples, fa});
    for (int s = 0; s < b; ++s)
      for (int i = 0; i < m_samples; ++i) {
        float* dst = &estep_in[(static_cast<int64_t>(s) * m_samples + i) * fa];
        std::memcpy(dst, &feats[static_cast<int64_t>(s) * feature_dim_],
                    sizeof(float) * static_cast<size_t>(feature_dim_));
        std::memcpy(dst + feature_dim_,
                    &sampled[(static_cast<size_t>(s) * m_samples + i) * act_dim_],
                    sizeof(float) * static_cast<size_t>(act_dim_));
      }
    Forward ws_qe;
    Tensor estep_probs;
    CategoricalCritic::probs_from_logits(critic_target_.logits(estep_in, ws_qe), estep_probs);
    std::vector<float> q(static_cast<size_t>(b) * m_samples);
    for (int64_t i = 0; i < static_cast<int64_t>(q.size()); ++i)
      q[static_cast<size_t>(i)] = static_cast<float>(
          critic_target_.q_value(&estep_probs[i * sup.atoms]));

    const EStepResult estep = mpo_e_step(q, b, m_samples, duals_.epsilon_kl);
    duals_.last_eta = estep.eta;
    stats.eta = estep.eta;

    // ---- M-step: KL-regularized weighted maximum likelihood ----
    Forward ws_a;
    const GaussianPolicy::Out pi = actor_.evaluate(feats, ws_a);
    const MStepGrads mg = mpo_m_step_grads(pi.mu, pi.sigma, pi_t.mu, pi_t.sigma, sampled,
                                           estep.weights, m_samples, duals_);
    actor_grads_.zero();
    actor_.backward(ws_a, mg.dmu, mg.dsigma, actor_grads_);
    {
      auto params = actor_.net.param_tensors();
      auto grads = actor_.net.grad_tensors(actor_grads_);
      adam_update(actor_adam_, params, std::vector<const Tensor*>(grads.begin(), grads.end()));
    }

    // ---- dual step ----
    duals_.alpha_mu_param -= cfg_.dual_lr * static_cast<float>(mg.dalpha_mu_param);
    duals_.alpha_sigma_param -= cfg_.dual_lr * static_cast<float>(mg.dalpha_sigma_param);
    stats.alpha_mu = duals_.alpha_mu();
    stats.alpha_sigma = duals_.alpha_sigma();
    stats.kl_mu = mg.kl_mu;
    stats.kl_sigma = mg.kl_sigma;

    ++steps_;
    if (steps_ % cfg_.target_period == 0) {
      actor_target_ = actor_;
      critic_target_ = critic_;
    }
    return stats;
  }

 private:
  RlConfig cfg_;
  int feature_dim_, act_dim_;
  GaussianPolicy actor_, actor_target_;
  CategoricalCritic critic_, critic_target_;
  DualVariables duals_;
  AdamState actor_adam_, critic_adam_;
  Grads actor_grads_, critic_grads_;
  int64_t steps_ = 0;
};

}  // namespace rrl
