#pragma once

#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "rrl/adam.hpp"
#include "rrl/checkpoint.hpp"
#include "rrl/demo.hpp"
#include "rrl/env.hpp"
#include "rrl/nn.hpp"

namespace rrl {

constexpr int kNumHeads = 4;  // action horizons predicted per state

struct BCConfig {
  float lambda = 0.9f;                     // L2 vs cross-entropy weight
  std::array<int, kNumHeads> offsets{0, 5, 10, 15};
  int epochs = 60;
  int batch_size = 64;
  bool augment = true;
  float val_fraction = 0.05f;
  float lr = 1e-3f;
  std::string obs_mode = "image+proprio";  // image | image+proprio
  bool grip_classifier = true;             // 2-class grip head; false = pure regression
  bool with_actor_head = false;            // attach the RL-style actor head at BC time
  int bottleneck = 64;
  std::vector<int> actor_sizes{64, 64, 64};
  float actor_sigma_init = 0.33f;
  float lookahead_grad_scale = 1.0f;       // 0 reduces training to single-step BC
  // Augmentation magnitudes. At 32x32 a shift comparable to the success
  // threshold (~2.5 px) destroys the positional signal, so defaults stay well
  // below it.
  float aug_crop_px = 1.5f;
  float aug_rotation_deg = 3.0f;

  int continuous_dim() const { return grip_classifier ? 2 : kActionDim; }
  int grip_classes() const { return grip_classifier ? 2 : 0; }
  int head_width() const { return continuous_dim() + grip_classes(); }
  int output_dim() const { return kNumHeads * head_width(); }
  int proprio_dim() const { return obs_mode == "image" ? 0 : kProprioDim; }

  void validate() const {
    if (!(lambda >= 0.0f && lambda <= 1.0f)) throw std::invalid_argument("bc: lambda outside [0,1]");
    if (!(val_fraction > 0.0f && val_fraction < 1.0f))
      throw std::invalid_argument("bc: split fraction outside (0,1)");
    if (offsets[0] != 0) throw std::invalid_argument("bc: offsets must start at 0");
    for (int i = 1; i < kNumHeads; ++i)
      if (offsets[i] <= offsets[i - 1])
        throw std::invalid_argument("bc: offsets must be strictly increasing");
    if (obs_mode != "image" && obs_mode != "image+proprio")
      throw std::invalid_argument("bc: unsupported observation mode '" + obs_mode + "'");
    if (!grip_classifier && lambda != 1.0f)
      throw std::invalid_argument("bc: pure-regression head requires lambda = 1");
  }
};

/// Defaults per task: Push is fully continuous (lambda = 1), gripper tasks mix
/// regression with the 2-class grip head at lambda = 0.9.
inline BCConfig default_bc_config(Task task) {
  BCConfig cfg;
  if (task == Task::kPush) {
    cfg.lambda = 1.0f;
    cfg.grip_classifier = false;
  }
  return cfg;
}

inline Network build_trunk(int bottleneck) {
  Network net;
  net.input({kFrameStack, kFrameSize, kFrameSize})
      .conv2d("conv1", 8, 3, 2, 1)
      .relu()
      .conv2d("conv2", 16, 3, 2, 1)
      .relu()
      .conv2d("conv3", 32, 3, 2, 1)
      .relu()
      .flatten()
      .dense("trunk_fc", bottleneck)
      .relu()
      .tap("bottleneck");
  return net;
}

inline Network build_bc_head(const BCConfig& cfg) {
  Network net;
  net.input({cfg.bottleneck});
  if (cfg.proprio_dim() > 0) net.concat_aux(cfg.proprio_dim());
  net.dense("bc_head", cfg.output_dim(), Init::kXavier);
  return net;
}

// ---------------------------------------------------------------------------
// Targets and loss
// ---------------------------------------------------------------------------

struct StepTargets {
  std::array<std::array<float, kActionDim>, kNumHeads> v;  // normalized continuous targets
  std::array<int, kNumHeads> grip_class;                    // 0 = close, 1 = open
};

/// Targets at offsets {0, d1, d2, d3} ahead of t; indices past the end clamp
/// to the final action. Grip classes come from the raw command sign.
inline StepTargets multi_step_targets(const Trajectory& tr, size_t t,
                                      const std::array<int, kNumHeads>& offsets,
                                      const NormStats& stats) {
  if (t >= tr.length()) throw std::out_of_range("multi_step_targets: t beyond trajectory");
  StepTargets out;
  for (int h = 0; h < kNumHeads; ++h) {
    const size_t idx = std::min(t + static_cast<size_t>(offsets[h]), tr.length() - 1);
    const auto raw = action_to_array(tr.actions[idx]);
    out.v[h] = normalize_action(raw, stats);
    out.grip_class[h] = raw[2] > 0.0f ? 1 : 0;
  }
  return out;
}

/// Mixed loss summed over the four horizons:
///   sum_h [ lambda ||v_hat - v||^2 - (1 - lambda) sum_c g_c log g_hat_c ].
/// `predictions` holds, per head, the continuous part followed by grip-class
/// probabilities (when the head has them).
inline double bc_loss(const std::vector<float>& predictions, const StepTargets& targets,
                      float lambda, const BCConfig& cfg) {
  const int cd = cfg.continuous_dim(), gc = cfg.grip_classes(), w = cfg.head_width();
  if (static_cast<int>(predictions.size()) != cfg.output_dim())
    throw std::invalid_argument("bc_loss: prediction width mismatch");
  double loss = 0.0;
  for (int h = 0; h < kNumHeads; ++h) {
    const float* head = predictions.data() + h * w;
    for (int d = 0; d < cd; ++d) {
      const double e = static_cast<double>(head[d]) - targets.v[h][d];
      loss += lambda * e * e;
    }
    if (gc > 0 && lambda < 1.0f) {
      double sum = 0.0;
      for (int c = 0; c < gc; ++c) {
        if (head[cd + c] < 0.0f) throw std::invalid_argument("bc_loss: grip head is not a distribution");
        sum += head[cd + c];
      }
      if (std::abs(sum - 1.0) > 1e-4)
        throw std::invalid_argument("bc_loss: grip head probabilities do not sum to 1");
      const double p = std::max(static_cast<double>(head[cd + targets.grip_class[h]]), 1e-12);
      loss += -(1.0 - lambda) * std::log(p);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Augmentation: one shared crop-and-resize (up to 4 px) plus rotation (up to
// +/-10 degrees) applied to all four frames; bilinear, clamp-to-edge.
// ---------------------------------------------------------------------------

inline void augment_frames(float* frames, Rng& rng, float max_crop_px = 4.0f,
                           float max_rotation_deg = 10.0f) {
  const float theta =
      static_cast<float>(rng.uniform(-max_rotation_deg, max_rotation_deg) * M_PI / 180.0);
  const float crop = static_cast<float>(rng.uniform(0.0, max_crop_px));
  const float scale = static_cast<float>(kFrameSize) / (kFrameSize - crop);
  const float jx = static_cast<float>(rng.uniform(0.0, crop)) - crop * 0.5f;
  const float jy = static_cast<float>(rng.uniform(0.0, crop)) - crop * 0.5f;
  const float ct = std::cos(theta), st = std::sin(theta);
  const float centre = (kFrameSize - 1) * 0.5f;

  std::array<float, kFramePixels> tmp;
  for (int f = 0; f < kFrameStack; ++f) {
    float* img = frames + f * kFramePixels;
    for (int r = 0; r < kFrameSize; ++r) {
      for (int c = 0; c < kFrameSize; ++c) {
        const float xd = (c - centre) / scale, yd = (r - centre) / scale;
        const float xs = ct * xd + st * yd + centre + jx;
        const float ys = -st * xd + ct * yd + centre + jy;
        const int x0 = static_cast<int>(std::floor(xs)), y0 = static_cast<int>(std::floor(ys));
        const float fx = xs - x0, fy = ys - y0;
        auto at = [&](int y, int x) {
          y = std::clamp(y, 0, kFrameSize - 1);
          x = std::clamp(x, 0, kFrameSize - 1);
          return img[y * kFrameSize + x];
        };
        tmp[r * kFrameSize + c] = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                                  fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      }
    }
    std::copy(tmp.begin(), tmp.end(), img);
  }
}

// ---------------------------------------------------------------------------
// Base policy
// ---------------------------------------------------------------------------

struct BaseAct {
  EnvAction u;                              // env-space base action
  std::array<float, kActionDim> a_hat{};    // normalized base action
  std::vector<float> bottleneck;
};

struct BasePolicy {
  Task task = Task::kPush;
  BCConfig config;
  NormStats stats;
  Network trunk;
  Network head;
  std::optional<Network> actor_head;  // present when config.with_actor_head

  /// Deterministic single-observation action; only the horizon-0 head is used.
  BaseAct act(const Observation& obs) const {
    Forward tw, hw;
    Tensor img({1, kFrameStack, kFrameSize, kFrameSize}, obs.frames);
    const Tensor& feats = trunk.forward(img, nullptr, tw);
    Tensor aux;
    const Tensor* auxp = nullptr;
    if (config.proprio_dim() > 0) {
      const auto np = normalize_proprio(obs.proprio, stats);
      aux = Tensor({1, kProprioDim}, std::vector<float>(np.begin(), np.end()));
      auxp = &aux;
    }
    const Tensor& out = head.forward(feats, auxp, hw);
    BaseAct res;
    res.bottleneck = feats.data;
    const int cd = config.continuous_dim();
    if (config.grip_classifier) {
      res.a_hat = {out[0], out[1], 0.0f};
      auto denorm = denormalize_base(res.a_hat, stats);
      const bool open = out[cd + 1] > out[cd + 0];
      const float grip_cmd = open ? 1.0f : -1.0f;
      res.a_hat[2] = (grip_cmd - stats.action_mean[2]) / stats.action_std[2];
      res.u = EnvAction{denorm[0], denorm[1], grip_cmd};
    } else {
      res.a_hat = {out[0], out[1], out[2]};
      const auto denorm = denormalize_base(res.a_hat, stats);
      res.u = EnvAction{denorm[0], denorm[1], denorm[2]};
    }
    return res;
  }

  int64_t param_checksum_bytes() const {
    // FNV over raw parameter bytes; used to assert frozen-ness.
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&](const Network& n) {
      for (const Tensor* t : n.param_tensors())
        for (float v : t->data) {
          uint32_t bits;
          std::memcpy(&bits, &v, 4);
          h = (h ^ bits) * 0x100000001b3ull;
        }
    };
    mix(trunk);
    mix(head);
    if (actor_head) mix(*actor_head);
    return static_cast<int64_t>(h);
  }
};

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct BCEpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
};

struct BCReport {
  std::vector<BCEpochRow> rows;
  int best_epoch = -1;
  double best_val_loss = 0.0;
};

namespace detail {

/// Gradient of bc_loss w.r.t. the head's raw outputs (logits for grip parts).
/// Softmax + cross-entropy fold into (p - onehot). Lookahead heads can be
/// scaled for the single-step regression hook.
inline void bc_output_gradient(const float* raw, const StepTargets& tg, const BCConfig& cfg,
                               float* grad) {
  const int cd = cfg.continuous_dim(), gc = cfg.grip_classes(), w = cfg.head_width();
  const float lambda = cfg.lambda;
  for (int h = 0; h < kNumHeads; ++h) {
    const float scale = h == 0 ? 1.0f : cfg.lookahead_grad_scale;
    const float* head = raw + h * w;
    float* g = grad + h * w;
    for (int d = 0; d < cd; ++d) g[d] = scale * 2.0f * lambda * (head[d] - tg.v[h][d]);
    if (gc > 0) {
      const float mx = std::max(head[cd], head[cd + 1]);
      const float e0 = std::exp(head[cd] - mx), e1 = std::exp(head[cd + 1] - mx);
      const float inv = 1.0f / (e0 + e1);
      const float p0 = e0 * inv, p1 = e1 * inv;
      g[cd] = scale * (1.0f - lambda) * (p0 - (tg.grip_class[h] == 0 ? 1.0f : 0.0f));
      g[cd + 1] = scale * (1.0f - lambda) * (p1 - (tg.grip_class[h] == 1 ? 1.0f : 0.0f));
    }
  }
}

/// Loss value from raw outputs (softmax applied to grip segments) so the
/// training loop and the public bc_loss agree.
inline double bc_loss_from_raw(const float* raw, const StepTargets& tg, const BCConfig& cfg) {
  std::vector<float> probs(raw, raw + cfg.output_dim());
  const int cd = cfg.continuous_dim(), gc = cfg.grip_classes(), w = cfg.head_width();
  if (gc > 0) {
    for (int h = 0; h < kNumHeads; ++h) {
      float* head = probs.data() + h * w;
      const float mx = std::max(head[cd], head[cd + 1]);
      const float e0 = std::exp(head[cd] - mx), e1 = std::exp(head[cd + 1] - mx);
      const float inv = 1.0f / (e0 + e1);
      head[cd] = e0 * inv;
      head[cd + 1] = e1 * inv;
    }
  }
  return bc_loss(probs, tg, cfg.lambda, cfg);
}

struct SampleRef {
  int traj = 0;
  int t = 0;
};

}  // namespace detail

/// Behavioral cloning: 95/5 trajectory-level split, Adam, augmentation, and
/// the parameter snapshot from the epoch with the lowest validation loss.
inline std::pair<BasePolicy, BCReport> train_bc(const DemoDataset& ds, const BCConfig& cfg,
                                                uint64_t seed) {
  cfg.validate();
  if (ds.trajectories.size() < 2)
    throw std::invalid_argument("train_bc: need at least 2 trajectories for the split");

  BasePolicy policy;
  policy.task = ds.task;
  policy.config = cfg;
  policy.stats = ds.stats;
  policy.trunk = build_trunk(cfg.bottleneck);
  policy.head = build_bc_head(cfg);
  Rng init_rng(substream(seed, "bc-init"));
  policy.trunk.init_params(init_rng);
  policy.head.init_params(init_rng);
  if (cfg.with_actor_head) {
    Network ah;
    ah.input({cfg.bottleneck + cfg.proprio_dim()});
    for (size_t i = 0; i < cfg.actor_sizes.size(); ++i) {
      ah.dense("actor_l" + std::to_string(i), cfg.actor_sizes[i]);
      ah.layer_norm("actor_ln" + std::to_string(i));
      ah.relu();
    }
    ah.dense("actor_out", 2 * kActionDim, Init::kZero);
    ah.init_params(init_rng);
    const float rho0 = std::log(std::exp(cfg.actor_sigma_init) - 1.0f);
    for (int d = 0; d < kActionDim; ++d)
      ah.layers.back().bias[kActionDim + d] = rho0;
    policy.actor_head = std::move(ah);
  }

  // Trajectory-level split; the validation side holds at least one episode.
  std::vector<int> order(ds.trajectories.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
  Rng split_rng(substream(seed, "bc-split"));
  for (size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[split_rng.uniform_int(i)]);
  const int n_val = std::max<int>(1, static_cast<int>(std::floor(
                                          cfg.val_fraction * static_cast<double>(order.size()))));
  std::vector<int> val_traj(order.end() - n_val, order.end());
  std::vector<int> train_traj(order.begin(), order.end() - n_val);

  auto samples_of = [&](const std::vector<int>& trajs) {
    std::vector<detail::SampleRef> out;
    for (int ti : trajs)
      for (size_t t = 0; t < ds.trajectories[static_cast<size_t>(ti)].length(); ++t)
        out.push_back({ti, static_cast<int>(t)});
    return out;
  };
  std::vector<detail::SampleRef> train_samples = samples_of(train_traj);
  const std::vector<detail::SampleRef> val_samples = samples_of(val_traj);

  const int pd = cfg.proprio_dim();
  Forward trunk_ws, head_ws, actor_ws;
  Grads trunk_g = policy.trunk.make_grads();
  Grads head_g = policy.head.make_grads();
  Grads actor_g = cfg.with_actor_head ? policy.actor_head->make_grads() : Grads{};

  std::vector<Tensor*> params = policy.trunk.param_tensors();
  {
    auto hp = policy.head.param_tensors();
    params.insert(params.end(), hp.begin(), hp.end());
    if (cfg.with_actor_head) {
      auto ap = policy.actor_head->param_tensors();
      params.insert(params.end(), ap.begin(), ap.end());
    }
  }
  AdamState adam = AdamState::init(params, cfg.lr);

  auto run_batch = [&](const std::vector<detail::SampleRef>& refs, size_t lo, size_t hi,
                       bool train, Rng* aug_rng) -> double {
    const int b = static_cast<int>(hi - lo);
    Tensor img({b, kFrameStack, kFrameSize, kFrameSize});
    Tensor aux = pd > 0 ? Tensor({b, pd}) : Tensor();
    std::vector<StepTargets> targets(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) {
      const auto& ref = refs[lo + static_cast<size_t>(i)];
      const Trajectory& tr = ds.trajectories[static_cast<size_t>(ref.traj)];
      const Observation& obs = tr.observations[static_cast<size_t>(ref.t)];
      float* dst = &img[static_cast<int64_t>(i) * kFrameStack * kFramePixels];
      std::copy(obs.frames.begin(), obs.frames.end(), dst);
      if (train && cfg.augment) augment_frames(dst, *aug_rng, cfg.aug_crop_px, cfg.aug_rotation_deg);
      if (pd > 0) {
        const auto np = normalize_proprio(obs.proprio, ds.stats);
        std::copy(np.begin(), np.end(), &aux[static_cast<int64_t>(i) * pd]);
      }
      targets[static_cast<size_t>(i)] =
          multi_step_targets(tr, static_cast<size_t>(ref.t), cfg.offsets, ds.stats);
    }

    const Tensor& feats = policy.trunk.forward(img, nullptr, trunk_ws);
    const Tensor& out = policy.head.forward(feats, pd > 0 ? &aux : nullptr, head_ws);

    double loss = 0.0;
    Tensor dout(out.shape);
    const int w = cfg.output_dim();
    for (int i = 0; i < b; ++i) {
      loss += detail::bc_loss_from_raw(&out[static_cast<int64_t>(i) * w],
                                       targets[static_cast<size_t>(i)], cfg);
      if (train)
        detail::bc_output_gradient(&out[static_cast<int64_t>(i) * w],
                                   targets[static_cast<size_t>(i)], cfg,
                                   &dout[static_cast<int64_t>(i) * w]);
    }

    // Optional RL-style actor head, regressed on the normalized horizon-0
    // action so fine-tuning can start from it.
    Tensor actor_in, actor_dout;
    const Tensor* actor_out = nullptr;
    if (cfg.with_actor_head) {
      actor_in = Tensor({b, cfg.bottleneck + pd});
      for (int i = 0; i < b; ++i) {
        std::memcpy(&actor_in[static_cast<int64_t>(i) * (cfg.bottleneck + pd)],
                    &feats[static_cast<int64_t>(i) * cfg.bottleneck],
                    sizeof(float) * static_cast<size_t>(cfg.bottleneck));
        if (pd > 0)
          std::memcpy(&actor_in[static_cast<int64_t>(i) * (cfg.bottleneck + pd) + cfg.bottleneck],
                      &aux[static_cast<int64_t>(i) * pd], sizeof(float) * static_cast<size_t>(pd));
      }
      actor_out = &policy.actor_head->forward(actor_in, nullptr, actor_ws);
      actor_dout = Tensor(actor_out->shape);
      for (int i = 0; i < b; ++i) {
        for (int d = 0; d < kActionDim; ++d) {
          const float mu = (*actor_out)[static_cast<int64_t>(i) * 2 * kActionDim + d];
          const float e = mu - targets[static_cast<size_t>(i)].v[0][d];
          loss += static_cast<double>(e) * e;
          if (train) actor_dout[static_cast<int64_t>(i) * 2 * kActionDim + d] = 2.0f * e;
        }
      }
    }

    if (train) {
      const float inv_b = 1.0f / static_cast<float>(b);
      for (auto& v : dout.data) v *= inv_b;
      trunk_g.zero();
      head_g.zero();
      Tensor head_din;
      policy.head.backward(head_ws, dout, head_g, &head_din);
      if (cfg.with_actor_head) {
        for (auto& v : actor_dout.data) v *= inv_b;
        actor_g.zero();
        Tensor actor_din;
        policy.actor_head->backward(actor_ws, actor_dout, actor_g, &actor_din);
        for (int i = 0; i < b; ++i)
          axpyf(1.0f, &actor_din[static_cast<int64_t>(i) * (cfg.bottleneck + pd)],
                &head_din[static_cast<int64_t>(i) * cfg.bottleneck], cfg.bottleneck);
      }
      policy.trunk.backward(trunk_ws, head_din, trunk_g);

      std::vector<Tensor*> grads = policy.trunk.grad_tensors(trunk_g);
      auto hg = policy.head.grad_tensors(head_g);
      grads.insert(grads.end(), hg.begin(), hg.end());
      if (cfg.with_actor_head) {
        auto ag = policy.actor_head->grad_tensors(actor_g);
        grads.insert(grads.end(), ag.begin(), ag.end());
      }
      adam_update(adam, params, std::vector<const Tensor*>(grads.begin(), grads.end()));
    }
    return loss / b;
  };

  BCReport report;
  std::vector<Tensor> best_params;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng(substream(seed, "bc-shuffle", static_cast<uint64_t>(epoch)));
    for (size_t i = train_samples.size(); i > 1; --i)
      std::swap(train_samples[i - 1], train_samples[shuffle_rng.uniform_int(i)]);
    Rng aug_rng(substream(seed, "bc-aug", static_cast<uint64_t>(epoch)));

    double train_loss = 0.0;
    int batches = 0;
    for (size_t lo = 0; lo < train_samples.size(); lo += static_cast<size_t>(cfg.batch_size)) {
      const size_t hi = std::min(train_samples.size(), lo + static_cast<size_t>(cfg.batch_size));
      train_loss += run_batch(train_samples, lo, hi, true, &aug_rng);
      ++batches;
    }
    train_loss /= std::max(1, batches);

    double val_loss = 0.0;
    int val_batches = 0;
    for (size_t lo = 0; lo < val_samples.size(); lo += static_cast<size_t>(cfg.batch_size)) {
      const size_t hi = std::min(val_samples.size(), lo + static_cast<size_t>(cfg.batch_size));
      val_loss += run_batch(val_samples, lo, hi, false, nullptr);
      ++val_batches;
    }
    val_loss /= std::max(1, val_batches);
    if (!std::isfinite(val_loss))
      throw std::runtime_error("train_bc: validation loss is not finite at epoch " +
                               std::to_string(epoch));

    report.rows.push_back({epoch, train_loss, val_loss});
    if (report.best_epoch < 0 || val_loss < report.best_val_loss) {
      report.best_epoch = epoch;
      report.best_val_loss = val_loss;
      best_params.clear();
      for (const Tensor* p : params) best_params.push_back(*p);
    }
  }

  for (size_t i = 0; i < params.size(); ++i) *params[i] = best_params[i];
  return {std::move(policy), std::move(report)};
}

// ---------------------------------------------------------------------------
// Environment evaluation
// ---------------------------------------------------------------------------

struct SuccessReport {
  double success_rate = 0.0;
  double mean_success_length = 0.0;  // steps, over successful episodes only
  int episodes = 0;
  int successes = 0;
};

/// A policy instance for one episode; episodes are independent, so stochastic
/// policies derive their randomness from the per-episode seed.
using PolicyFn = std::function<EnvAction(const Observation&, const WorldState&)>;
using PolicyFactory = std::function<PolicyFn(uint64_t episode_seed)>;

inline uint64_t evaluation_seed(Task task, uint64_t seed, uint64_t index) {
  return eval_seed(hash_combine(seed, hash_str(task_to_string(task))), index);
}

/// Runs n_states episodes from evaluation seeds disjoint from every demo seed;
/// episodes can fan out over threads and merge deterministically by index.
inline SuccessReport evaluate_policy(const PolicyFactory& make_policy, Task task, ObsMode mode,
                                     int n_states, uint64_t seed, int threads = 1) {
  if (n_states < 1) throw std::invalid_argument("evaluate_policy: n_states must be >= 1");
  std::vector<uint8_t> success(static_cast<size_t>(n_states), 0);
  std::vector<int> length(static_cast<size_t>(n_states), 0);

  auto run_range = [&](int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      const uint64_t es = evaluation_seed(task, seed, static_cast<uint64_t>(i));
      Env env(task, mode);
      Observation obs = env.reset(es);
      PolicyFn policy = make_policy(es);
      for (int t = 0; t < env_limits::kHorizon; ++t) {
        const StepResult r = env.step(policy(obs, env.state()));
        obs = r.obs;
        if (r.done) {
          success[static_cast<size_t>(i)] = r.success ? 1 : 0;
          length[static_cast<size_t>(i)] = env.state().step;
          break;
        }
      }
    }
  };

  threads = std::max(1, threads);
  if (threads == 1) {
    run_range(0, n_states);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n_states + threads - 1) / threads;
    for (int k = 0; k < threads; ++k) {
      const int lo = k * chunk, hi = std::min(n_states, (k + 1) * chunk);
      if (lo < hi) pool.emplace_back(run_range, lo, hi);
    }
    for (auto& th : pool) th.join();
  }

  SuccessReport rep;
  rep.episodes = n_states;
  int64_t len_sum = 0;
  for (int i = 0; i < n_states; ++i)
    if (success[static_cast<size_t>(i)]) {
      ++rep.successes;
      len_sum += length[static_cast<size_t>(i)];
    }
  rep.success_rate = static_cast<double>(rep.successes) / n_states;
  rep.mean_success_length = rep.successes > 0 ? static_cast<double>(len_sum) / rep.successes : 0.0;
  return rep;
}

inline PolicyFactory base_policy_actor(const BasePolicy& policy) {
  return [&policy](uint64_t) -> PolicyFn {
    return [&policy](const Observation& obs, const WorldState&) { return policy.act(obs).u; };
  };
}

inline PolicyFactory expert_actor(Task task, double noise_scale = 0.0) {
  return [task, noise_scale](uint64_t episode_seed) -> PolicyFn {
    auto rng = std::make_shared<Rng>(substream(episode_seed, "expert-eval-noise"));
    return [task, noise_scale, rng](const Observation&, const WorldState& s) {
      return expert_action(task, s, noise_scale, *rng);
    };
  };
}

inline PolicyFactory random_actor() {
  return [](uint64_t episode_seed) -> PolicyFn {
    auto rng = std::make_shared<Rng>(substream(episode_seed, "random-actor"));
    return [rng](const Observation&, const WorldState&) {
      namespace el = env_limits;
      EnvAction a;
      a.vx = static_cast<float>(rng->uniform(-el::kVelocityBound, el::kVelocityBound));
      a.vy = static_cast<float>(rng->uniform(-el::kVelocityBound, el::kVelocityBound));
      a.grip = static_cast<float>(rng->uniform(-1.0, 1.0));
      return a;
    };
  };
}

// ---------------------------------------------------------------------------
// Persistence: tensor-nn checkpoint + stats + config in one directory.
// ---------------------------------------------------------------------------

inline void to_json(nlohmann::json& j, const BCConfig& c) {
  j = {{"lambda", c.lambda},
       {"offsets", c.offsets},
       {"epochs", c.epochs},
       {"batch_size", c.batch_size},
       {"augment", c.augment},
       {"val_fraction", c.val_fraction},
       {"lr", c.lr},
       {"obs_mode", c.obs_mode},
       {"grip_classifier", c.grip_classifier},
       {"with_actor_head", c.with_actor_head},
       {"bottleneck", c.bottleneck},
       {"actor_sizes", c.actor_sizes},
       {"actor_sigma_init", c.actor_sigma_init},
       {"lookahead_grad_scale", c.lookahead_grad_scale},
       {"aug_crop_px", c.aug_crop_px},
       {"aug_rotation_deg", c.aug_rotation_deg}};
}

inline void from_json(const nlohmann::json& j, BCConfig& c) {
  j.at("lambda").get_to(c.lambda);
  j.at("offsets").get_to(c.offsets);
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("augment").get_to(c.augment);
  j.at("val_fraction").get_to(c.val_fraction);
  j.at("lr").get_to(c.lr);
  j.at("obs_mode").get_to(c.obs_mode);
  j.at("grip_classifier").get_to(c.grip_classifier);
  j.at("with_actor_head").get_to(c.with_actor_head);
  j.at("bottleneck").get_to(c.bottleneck);
  j.at("actor_sizes").get_to(c.actor_sizes);
  j.at("actor_sigma_init").get_to(c.actor_sigma_init);
  j.at("lookahead_grad_scale").get_to(c.lookahead_grad_scale);
  j.at("aug_crop_px").get_to(c.aug_crop_px);
  j.at("aug_rotation_deg").get_to(c.aug_rotation_deg);
}

inline void save_base_policy(const std::filesystem::path& dir, const BasePolicy& policy) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> names;
  std::vector<const Tensor*> tensors;
  auto add = [&](const Network& n, const std::string& prefix) {
    auto pn = n.param_names();
    auto pt = n.param_tensors();
    for (size_t i = 0; i < pn.size(); ++i) {
      names.push_back(prefix + pn[i]);
      tensors.push_back(pt[i]);
    }
  };
  add(policy.trunk, "trunk/");
  add(policy.head, "head/");
  if (policy.actor_head) add(*policy.actor_head, "actor/");
  save_checkpoint(dir, names, tensors);

  nlohmann::json meta;
  meta["task"] = task_to_string(policy.task);
  meta["config"] = policy.config;
  meta["stats"] = detail::stats_to_json(policy.stats);
  std::ofstream f(dir / "policy.json", std::ios::trunc);
  f << meta.dump(2) << "\n";
  if (!f.good()) throw std::runtime_error("save_base_policy: write failed");
}

inline BasePolicy load_base_policy(const std::filesystem::path& dir) {
  std::ifstream f(dir / "policy.json");
  if (!f) throw std::runtime_error("load_base_policy: missing " + (dir / "policy.json").string());
  const nlohmann::json meta = nlohmann::json::parse(f);
  BasePolicy policy;
  policy.task = task_from_string(meta.at("task").get<std::string>());
  policy.config = meta.at("config").get<BCConfig>();
  policy.stats = detail::stats_from_json(meta.at("stats"));
  policy.trunk = build_trunk(policy.config.bottleneck);
  policy.head = build_bc_head(policy.config);
  if (policy.config.with_actor_head) {
    Network ah;
    ah.input({policy.config.bottleneck + policy.config.proprio_dim()});
    for (size_t i = 0; i < policy.config.actor_sizes.size(); ++i) {
      ah.dense("actor_l" + std::to_string(i), policy.config.actor_sizes[i]);
      ah.layer_norm("actor_ln" + std::to_string(i));
      ah.relu();
    }
    ah.dense("actor_out", 2 * kActionDim, Init::kZero);
    policy.actor_head = std::move(ah);
  }

  auto loaded = load_checkpoint(dir);
  auto apply = [&](Network& n, const std::string& prefix) {
    auto pn = n.param_names();
    auto pt = n.param_tensors();
    for (size_t i = 0; i < pn.size(); ++i) {
      auto it = loaded.find(prefix + pn[i]);
      if (it == loaded.end())
        throw std::runtime_error("load_base_policy: missing parameter " + prefix + pn[i]);
      if (it->second.shape != pt[i]->shape)
        throw std::runtime_error("load_base_policy: shape mismatch for " + prefix + pn[i]);
      *pt[i] = std::move(it->second);
    }
  };
  apply(policy.trunk, "trunk/");
  apply(policy.head, "head/");
  if (policy.actor_head) apply(*policy.actor_head, "actor/");
  return policy;
}

}  // namespace rrl
