#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "rrl/bc.hpp"

using namespace rrl;

namespace {

Trajectory synthetic_trajectory(int len, std::function<EnvAction(int)> action_fn) {
  Trajectory tr;
  tr.success = true;
  for (int t = 0; t < len; ++t) {
    Observation obs;
    obs.frames.assign(kFrameStack * kFramePixels, -1.0f);
    obs.proprio = {0.5f, 0.5f, 0.0f, 0.0f, 1.0f, 0.0f};
    tr.observations.push_back(obs);
    tr.actions.push_back(action_fn(t));
    tr.flags.push_back(t == len - 1 ? 3 : 0);
  }
  return tr;
}

}  // namespace

TEST_CASE("multi-step targets clamp past the end of the trajectory") {
  NormStats st;
  const Trajectory tr = synthetic_trajectory(
      20, [](int t) { return EnvAction{0.001f * t, -0.001f * t, t % 2 ? 1.0f : -1.0f}; });
  const std::array<int, 4> offsets{0, 5, 10, 15};
  const StepTargets tg = multi_step_targets(tr, 19, offsets, st);
  const auto last = normalize_action(action_to_array(tr.actions[19]), st);
  for (int h = 0; h < 4; ++h)
    for (int d = 0; d < kActionDim; ++d) CHECK(tg.v[h][d] == last[d]);
}

TEST_CASE("multi-step targets pick actions at the configured offsets") {
  NormStats st;
  const Trajectory tr =
      synthetic_trajectory(100, [](int t) { return EnvAction{0.0004f * t, 0.0f, 1.0f}; });
  const std::array<int, 4> offsets{0, 10, 20, 30};
  const StepTargets tg = multi_step_targets(tr, 0, offsets, st);
  CHECK(tg.v[0][0] == 0.0f);
  CHECK(tg.v[1][0] == Catch::Approx(0.004f));
  CHECK(tg.v[2][0] == Catch::Approx(0.008f));
  CHECK(tg.v[3][0] == Catch::Approx(0.012f));
}

TEST_CASE("constant-action trajectories give identical targets everywhere") {
  NormStats st;
  const Trajectory tr =
      synthetic_trajectory(30, [](int) { return EnvAction{0.02f, -0.01f, 1.0f}; });
  const std::array<int, 4> offsets{0, 5, 10, 15};
  const StepTargets first = multi_step_targets(tr, 0, offsets, st);
  for (size_t t = 0; t < tr.length(); ++t) {
    const StepTargets tg = multi_step_targets(tr, t, offsets, st);
    for (int h = 0; h < 4; ++h) {
      CHECK(tg.v[h] == first.v[0]);
      CHECK(tg.grip_class[h] == 1);
    }
  }
}

TEST_CASE("bc loss is zero for a perfect continuous fit at lambda=1") {
  BCConfig cfg = default_bc_config(Task::kPush);
  StepTargets tg;
  for (int h = 0; h < 4; ++h) tg.v[h] = {0.3f, -0.2f, 0.7f};
  std::vector<float> pred(cfg.output_dim());
  for (int h = 0; h < 4; ++h)
    for (int d = 0; d < 3; ++d) pred[h * 3 + d] = tg.v[h][d];
  CHECK(bc_loss(pred, tg, 1.0f, cfg) == 0.0);
}

TEST_CASE("a unit squared error on one horizon costs exactly one") {
  BCConfig cfg = default_bc_config(Task::kPush);
  StepTargets tg{};
  std::vector<float> pred(cfg.output_dim(), 0.0f);
  pred[0] = 1.0f;  // horizon 0, first dim
  CHECK(bc_loss(pred, tg, 1.0f, cfg) == Catch::Approx(1.0));
}

TEST_CASE("mixed loss matches the hand-evaluated weighting") {
  // lambda=0.9, squared error 0.5, correct-class probability 0.5 on one
  // horizon: 0.9*0.5 + 0.1*log 2 = 0.5193147; other horizons contribute 0.
  BCConfig cfg = default_bc_config(Task::kPick);
  StepTargets tg{};
  for (int h = 0; h < 4; ++h) tg.grip_class[h] = 0;
  std::vector<float> pred(cfg.output_dim(), 0.0f);
  const int w = cfg.head_width();
  pred[0] = std::sqrt(0.5f);
  pred[2] = 0.5f;
  pred[3] = 0.5f;
  for (int h = 1; h < 4; ++h) {
    pred[h * w + 2] = 1.0f;  // probability mass on the target class
    pred[h * w + 3] = 0.0f;
  }
  CHECK(bc_loss(pred, tg, 0.9f, cfg) == Catch::Approx(0.5193147).epsilon(1e-4));
}

TEST_CASE("loss decomposition: lambda=1 is pure L2, lambda=0 pure cross-entropy") {
  BCConfig cfg = default_bc_config(Task::kPick);
  StepTargets tg{};
  for (int h = 0; h < 4; ++h) {
    tg.v[h] = {0.1f * h, -0.2f, 0.0f};
    tg.grip_class[h] = h % 2;
  }
  Rng rng(4);
  std::vector<float> pred(cfg.output_dim());
  const int w = cfg.head_width();
  for (int h = 0; h < 4; ++h) {
    pred[h * w + 0] = static_cast<float>(rng.uniform(-1, 1));
    pred[h * w + 1] = static_cast<float>(rng.uniform(-1, 1));
    const float p = static_cast<float>(rng.uniform(0.1, 0.9));
    pred[h * w + 2] = p;
    pred[h * w + 3] = 1.0f - p;
  }
  double l2 = 0.0, ce = 0.0;
  for (int h = 0; h < 4; ++h) {
    for (int d = 0; d < 2; ++d) {
      const double e = pred[h * w + d] - tg.v[h][d];
      l2 += e * e;
    }
    ce += -std::log(static_cast<double>(pred[h * w + 2 + tg.grip_class[h]]));
  }
  CHECK(bc_loss(pred, tg, 1.0f, cfg) == Catch::Approx(l2));
  CHECK(bc_loss(pred, tg, 0.0f, cfg) == Catch::Approx(ce));
}

TEST_CASE("invalid grip distributions are rejected") {
  BCConfig cfg = default_bc_config(Task::kPick);
  StepTargets tg{};
  std::vector<float> pred(cfg.output_dim(), 0.0f);
  pred[2] = 0.9f;
  pred[3] = 0.4f;  // sums to 1.3
  CHECK_THROWS_AS(bc_loss(pred, tg, 0.9f, cfg), std::invalid_argument);
}

TEST_CASE("bc output gradient matches finite differences") {
  for (Task task : {Task::kPush, Task::kPick}) {
    BCConfig cfg = default_bc_config(task);
    Rng rng(11);
    StepTargets tg{};
    for (int h = 0; h < 4; ++h) {
      for (int d = 0; d < kActionDim; ++d) tg.v[h][d] = static_cast<float>(rng.uniform(-1, 1));
      tg.grip_class[h] = rng.uniform_int(2) ? 1 : 0;
    }
    std::vector<float> raw(cfg.output_dim());
    for (auto& v : raw) v = static_cast<float>(rng.uniform(-1, 1));
    std::vector<float> grad(cfg.output_dim());
    detail::bc_output_gradient(raw.data(), tg, cfg, grad.data());
    const double eps = 1e-3;
    for (size_t i = 0; i < raw.size(); ++i) {
      const float keep = raw[i];
      raw[i] = keep + static_cast<float>(eps);
      const double lp = detail::bc_loss_from_raw(raw.data(), tg, cfg);
      raw[i] = keep - static_cast<float>(eps);
      const double lm = detail::bc_loss_from_raw(raw.data(), tg, cfg);
      raw[i] = keep;
      const double numeric = (lp - lm) / (2 * eps);
      CHECK(std::abs(grad[i] - numeric) / std::max(1.0, std::abs(numeric)) < 1e-3);
    }
  }
}

TEST_CASE("zeroing lookahead gradients reduces training to single-step BC") {
  BCConfig cfg = default_bc_config(Task::kPick);
  cfg.lookahead_grad_scale = 0.0f;
  Rng rng(13);
  StepTargets tg{};
  for (int h = 0; h < 4; ++h) tg.grip_class[h] = 1;
  std::vector<float> raw(cfg.output_dim());
  for (auto& v : raw) v = static_cast<float>(rng.uniform(-1, 1));
  std::vector<float> grad(cfg.output_dim());
  detail::bc_output_gradient(raw.data(), tg, cfg, grad.data());
  const int w = cfg.head_width();
  for (int h = 1; h < 4; ++h)
    for (int d = 0; d < w; ++d) CHECK(grad[h * w + d] == 0.0f);
  // Head 0 keeps the standard gradient.
  cfg.lookahead_grad_scale = 1.0f;
  std::vector<float> full(cfg.output_dim());
  detail::bc_output_gradient(raw.data(), tg, cfg, full.data());
  for (int d = 0; d < w; ++d) CHECK(grad[d] == full[d]);
}

TEST_CASE("augmentation disabled is the identity and seeding fixes the transform") {
  Rng rng(7);
  std::vector<float> frames(kFrameStack * kFramePixels);
  for (auto& v : frames) v = static_cast<float>(rng.uniform(-1, 1));
  const std::vector<float> original = frames;

  std::vector<float> a = original, b = original;
  Rng ra(99), rb(99);
  augment_frames(a.data(), ra);
  augment_frames(b.data(), rb);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  CHECK(std::memcmp(a.data(), original.data(), a.size() * sizeof(float)) != 0);
}

TEST_CASE("augmenting a constant image keeps it constant") {
  std::vector<float> frames(kFrameStack * kFramePixels, 0.25f);
  Rng rng(3);
  augment_frames(frames.data(), rng);
  for (float v : frames) CHECK(v == Catch::Approx(0.25f).margin(1e-6));
}

TEST_CASE("training requires at least two trajectories") {
  DemoDataset ds = collect_demonstrations(Task::kPush, 1, 0, 0.0);
  BCConfig cfg = default_bc_config(Task::kPush);
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_bc(ds, cfg, 0), std::invalid_argument);
}

TEST_CASE("bc training is deterministic in parameters and report") {
  const DemoDataset ds = collect_demonstrations(Task::kPush, 4, 3, 0.2);
  BCConfig cfg = default_bc_config(Task::kPush);
  cfg.epochs = 3;
  auto [p1, r1] = train_bc(ds, cfg, 42);
  auto [p2, r2] = train_bc(ds, cfg, 42);
  CHECK(p1.param_checksum_bytes() == p2.param_checksum_bytes());
  REQUIRE(r1.rows.size() == r2.rows.size());
  for (size_t i = 0; i < r1.rows.size(); ++i) {
    CHECK(r1.rows[i].train_loss == r2.rows[i].train_loss);
    CHECK(r1.rows[i].val_loss == r2.rows[i].val_loss);
  }
}

TEST_CASE("returned snapshot has the minimum validation loss") {
  const DemoDataset ds = collect_demonstrations(Task::kPush, 4, 5, 0.2);
  BCConfig cfg = default_bc_config(Task::kPush);
  cfg.epochs = 5;
  auto [policy, report] = train_bc(ds, cfg, 7);
  REQUIRE(report.best_epoch >= 0);
  for (const auto& row : report.rows) CHECK(report.best_val_loss <= row.val_loss);
}

TEST_CASE("expert evaluation reaches 95% and a random policy fails pick") {
  const SuccessReport expert = evaluate_policy(expert_actor(Task::kPush), Task::kPush,
                                               ObsMode::kImageProprio, 100, 1);
  CHECK(expert.success_rate >= 0.95);
  CHECK(expert.mean_success_length > 0.0);
  const SuccessReport random =
      evaluate_policy(random_actor(), Task::kPick, ObsMode::kImageProprio, 100, 1);
  CHECK(random.success_rate <= 0.05);
}

TEST_CASE("evaluation reports are reproducible and parallel-merge is stable") {
  const SuccessReport a =
      evaluate_policy(expert_actor(Task::kPick), Task::kPick, ObsMode::kImageProprio, 50, 9);
  const SuccessReport b =
      evaluate_policy(expert_actor(Task::kPick), Task::kPick, ObsMode::kImageProprio, 50, 9);
  CHECK(a.success_rate == b.success_rate);
  CHECK(a.mean_success_length == b.mean_success_length);
  const SuccessReport c =
      evaluate_policy(expert_actor(Task::kPick), Task::kPick, ObsMode::kImageProprio, 50, 9, 4);
  CHECK(a.success_rate == c.success_rate);
  CHECK(a.mean_success_length == c.mean_success_length);
}

TEST_CASE("evaluation seeds never collide with demonstration seeds") {
  std::set<uint64_t> demo_seeds;
  for (uint64_t i = 0; i < 1000; ++i) demo_seeds.insert(demo_seed(12, i));
  for (uint64_t i = 0; i < 1000; ++i) {
    const uint64_t es = evaluation_seed(Task::kPush, 12, i);
    CHECK(demo_seeds.count(es) == 0);
    CHECK((es >> 63) == 1);
  }
}

TEST_CASE("base policies round-trip through their checkpoint directory") {
  const DemoDataset ds = collect_demonstrations(Task::kPick, 3, 2, 0.2);
  BCConfig cfg = default_bc_config(Task::kPick);
  cfg.epochs = 2;
  cfg.with_actor_head = true;
  auto [policy, report] = train_bc(ds, cfg, 5);

  const auto dir = std::filesystem::temp_directory_path() / "rrl_bc_ckpt";
  std::filesystem::remove_all(dir);
  save_base_policy(dir, policy);
  const BasePolicy loaded = load_base_policy(dir);
  CHECK(loaded.param_checksum_bytes() == policy.param_checksum_bytes());

  const Observation obs = ds.trajectories[0].observations[3];
  const BaseAct a = policy.act(obs);
  const BaseAct b = loaded.act(obs);
  CHECK(a.u.vx == b.u.vx);
  CHECK(a.u.grip == b.u.grip);
  CHECK(a.a_hat == b.a_hat);
  std::filesystem::remove_all(dir);
}
