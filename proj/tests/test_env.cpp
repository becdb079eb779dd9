#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>
#include <set>

#include "rrl/env.hpp"

using namespace rrl;
namespace el = env_limits;

namespace {

bool states_equal(const WorldState& a, const WorldState& b) {
  return std::memcmp(&a, &b, sizeof(WorldState)) == 0;
}

struct Rollout {
  int steps = 0;
  bool success = false;
  float total_reward = 0.0f;
};

Rollout run_expert(Task task, uint64_t seed, double noise, uint64_t noise_seed = 9) {
  Env env(task);
  env.reset(seed);
  Rng noise_rng(noise_seed);
  Rollout out;
  for (int t = 0; t < el::kHorizon; ++t) {
    const EnvAction a = expert_action(task, env.state(), noise, noise_rng);
    const StepResult r = env.step(a);
    out.total_reward += r.reward;
    out.steps = env.state().step;
    if (r.done) {
      out.success = r.success;
      break;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("reset is a pure function of task and seed") {
  Env a(Task::kPush), b(Task::kPush);
  a.reset(7);
  b.reset(7);
  CHECK(states_equal(a.state(), b.state()));
  b.reset(8);
  CHECK(!states_equal(a.state(), b.state()));
}

TEST_CASE("1000 resets keep the cube clear of the target") {
  for (Task task : {Task::kPush, Task::kPickPlace}) {
    float min_sep = 1e9f;
    for (uint64_t s = 0; s < 1000; ++s) {
      Env env(task);
      env.reset(s);
      min_sep = std::min(min_sep, dist(env.state().cube, env.state().target));
      const auto& st = env.state();
      CHECK(st.gripper.x >= el::kSpawnLo);
      CHECK(st.gripper.x <= el::kSpawnHi);
      CHECK(st.cube.y >= el::kSpawnLo);
      CHECK(st.cube.y <= el::kSpawnHi);
    }
    CHECK(min_sep >= el::kMinCubeTargetSep);
  }
}

TEST_CASE("pick episodes start released with an open gripper") {
  for (uint64_t s : {0ull, 3ull, 12345ull}) {
    Env env(Task::kPick);
    env.reset(s);
    CHECK(env.state().held == false);
    CHECK(env.state().aperture == 1.0f);
    CHECK(env.state().step == 0);
  }
}

TEST_CASE("unknown task ids are rejected") {
  CHECK_THROWS_AS(task_from_string("sweep"), std::invalid_argument);
  CHECK_NOTHROW(task_from_string("pickplace"));
}

TEST_CASE("zero action is a fixed point of the dynamics") {
  Env env(Task::kPush);
  env.reset(3);
  const WorldState before = env.state();
  const StepResult r = env.step(EnvAction{});
  CHECK(env.state().gripper.x == before.gripper.x);
  CHECK(env.state().gripper.y == before.gripper.y);
  CHECK(env.state().cube.x == before.cube.x);
  CHECK(env.state().cube.y == before.cube.y);
  CHECK(env.state().aperture == before.aperture);
  CHECK(r.reward == 0.0f);
  CHECK(env.state().step == before.step + 1);
}

TEST_CASE("push succeeds exactly when the cube reaches the target disk") {
  WorldState s;
  s.target = {0.5f, 0.5f};
  s.gripper = {0.2f, 0.2f};
  s.cube = {0.5f + el::kPushSuccess + 0.001f, 0.5f};
  CHECK(!Env::task_success(s, Task::kPush));
  s.cube.x = 0.5f + el::kPushSuccess - 0.001f;
  CHECK(Env::task_success(s, Task::kPush));
}

TEST_CASE("horizon timeout ends the episode with zero reward") {
  Env env(Task::kPick);
  env.reset(5);
  float total = 0.0f;
  bool done = false;
  for (int t = 0; t < el::kHorizon; ++t) {
    const StepResult r = env.step(EnvAction{});
    total += r.reward;
    done = r.done;
    if (done) {
      CHECK(t == el::kHorizon - 1);
    }
  }
  CHECK(done);
  CHECK(total == 0.0f);
  CHECK(env.state().step == el::kHorizon);
  CHECK_THROWS_AS(env.step(EnvAction{}), std::logic_error);
}

TEST_CASE("non-finite actions are rejected") {
  Env env(Task::kPush);
  env.reset(1);
  EnvAction a;
  a.vx = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(env.step(a), std::invalid_argument);
}

TEST_CASE("grasp, hold and release dynamics") {
  WorldState s;
  s.gripper = {0.5f, 0.5f};
  s.cube = {0.52f, 0.5f};  // within capture distance
  s.aperture = 0.4f;
  s.target = {0.9f, 0.9f};

  // Closing below the capture aperture grabs the cube.
  EnvAction close;
  close.grip = -1.0f;
  WorldState held = Env::step_dynamics(s, close, Task::kPick);
  REQUIRE(held.held);
  CHECK(held.cube.x == held.gripper.x);
  CHECK(held.cube.y == held.gripper.y);

  // The held cube tracks the gripper exactly.
  EnvAction move;
  move.vx = 0.03f;
  move.vy = -0.02f;
  move.grip = -1.0f;
  WorldState moved = Env::step_dynamics(held, move, Task::kPick);
  CHECK(moved.held);
  CHECK(moved.cube.x == moved.gripper.x);
  CHECK(moved.cube.y == moved.gripper.y);

  // Opening past the release aperture lets go.
  EnvAction open;
  open.grip = 1.0f;
  WorldState st = moved;
  for (int i = 0; i < 4 && st.held; ++i) st = Env::step_dynamics(st, open, Task::kPick);
  CHECK(!st.held);
  CHECK(st.aperture > el::kReleaseAperture);
}

TEST_CASE("push contact moves the cube along the contact normal") {
  WorldState s;
  s.gripper = {0.46f, 0.5f};
  s.cube = {0.5f, 0.5f};
  s.target = {0.9f, 0.5f};
  EnvAction a;
  a.vx = 0.03f;  // drive into the cube from the left
  WorldState next = Env::step_dynamics(s, a, Task::kPush);
  CHECK(next.cube.x == Catch::Approx(next.gripper.x + el::kPushContact));
  CHECK(next.cube.y == Catch::Approx(0.5f));
  // The same contact in Pick does not move the cube.
  WorldState pick_next = Env::step_dynamics(s, a, Task::kPick);
  CHECK(pick_next.cube.x == 0.5f);
}

TEST_CASE("render places the cube square at the centre pixel") {
  WorldState s;
  s.cube = {0.5f, 0.5f};
  s.gripper = {0.1f, 0.9f};
  s.target = {0.85f, 0.15f};
  std::vector<float> frame(kFramePixels);
  render(s, Task::kPush, frame.data());
  // Workspace (0.5, 0.5) maps to pixel row 16, col 16; the filled 4x4 square
  // covers rows/cols 15..18.
  for (int r = 15; r <= 18; ++r)
    for (int c = 15; c <= 18; ++c) CHECK(frame[r * kFrameSize + c] == pixel::kCube);
  CHECK(frame[14 * kFrameSize + 16] == pixel::kBackground);
  CHECK(frame[16 * kFrameSize + 19] == pixel::kBackground);
}

TEST_CASE("frames differ only inside the moved cube footprints") {
  WorldState a;
  a.cube = {0.3f, 0.6f};
  a.gripper = {0.1f, 0.1f};
  a.target = {0.85f, 0.15f};
  WorldState b = a;
  b.cube = {0.7f, 0.4f};
  std::vector<float> fa(kFramePixels), fb(kFramePixels);
  render(a, Task::kPush, fa.data());
  render(b, Task::kPush, fb.data());
  int diff = 0;
  for (int i = 0; i < kFramePixels; ++i)
    if (fa[i] != fb[i]) {
      ++diff;
      CHECK((fa[i] == pixel::kCube || fb[i] == pixel::kCube));
    }
  CHECK(diff > 0);
  CHECK(diff <= 2 * 16);
}

TEST_CASE("mostly background when all entities sit in corners") {
  WorldState s;
  s.cube = {0.02f, 0.02f};
  s.gripper = {0.98f, 0.98f};
  s.target = {0.02f, 0.98f};
  std::vector<float> frame(kFramePixels);
  render(s, Task::kPush, frame.data());
  int bg = 0;
  for (float v : frame)
    if (v == pixel::kBackground) ++bg;
  CHECK(bg >= static_cast<int>(0.9 * kFramePixels));
}

TEST_CASE("push expert velocity points at the target when lined up behind the cube") {
  WorldState s;
  s.target = {0.8f, 0.5f};
  s.cube = {0.5f, 0.5f};
  s.gripper = {0.42f, 0.5f};  // directly behind on the cube-target line
  const EnvAction a = expert_action(Task::kPush, s);
  const float angle = std::atan2(a.vy, a.vx);
  const float want = std::atan2(s.target.y - s.cube.y, s.target.x - s.cube.x);
  CHECK(std::abs(angle - want) < 5.0 * M_PI / 180.0);
}

TEST_CASE("noiseless expert actions are deterministic") {
  WorldState s;
  s.target = {0.8f, 0.2f};
  s.cube = {0.4f, 0.7f};
  s.gripper = {0.2f, 0.3f};
  for (Task task : {Task::kPush, Task::kPick, Task::kPickPlace}) {
    Rng r1(1), r2(2);
    const EnvAction a = expert_action(task, s, 0.0, r1);
    const EnvAction b = expert_action(task, s, 0.0, r2);
    CHECK(a.vx == b.vx);
    CHECK(a.vy == b.vy);
    CHECK(a.grip == b.grip);
  }
}

TEST_CASE("experts reach at least 95% success on 100 seeded resets per task") {
  for (Task task : {Task::kPush, Task::kPick, Task::kPickPlace}) {
    int succ = 0;
    for (uint64_t i = 0; i < 100; ++i)
      if (run_expert(task, eval_seed(4242, i), 0.0).success) ++succ;
    CAPTURE(task_to_string(task));
    CHECK(succ >= 95);
  }
}

TEST_CASE("episodic reward is sparse: total is 0 or 1 and 1 only on success") {
  for (Task task : {Task::kPush, Task::kPick, Task::kPickPlace}) {
    for (uint64_t i = 0; i < 20; ++i) {
      const Rollout r = run_expert(task, demo_seed(77, i), 0.6, i);
      CHECK((r.total_reward == 0.0f || r.total_reward == 1.0f));
      CHECK((r.total_reward == 1.0f) == r.success);
    }
  }
}

TEST_CASE("seed plus action sequence fully determine the trajectory") {
  auto run = [](uint64_t seed) {
    Env env(Task::kPickPlace);
    env.reset(seed);
    Rng rng(seed);
    std::vector<WorldState> states;
    for (int t = 0; t < 40; ++t) {
      EnvAction a;
      a.vx = static_cast<float>(rng.uniform(-0.06, 0.06));
      a.vy = static_cast<float>(rng.uniform(-0.06, 0.06));
      a.grip = static_cast<float>(rng.uniform(-1.0, 1.0));
      env.step(a);
      states.push_back(env.state());
    }
    return states;
  };
  const auto s1 = run(11), s2 = run(11);
  REQUIRE(s1.size() == s2.size());
  for (size_t i = 0; i < s1.size(); ++i) CHECK(states_equal(s1[i], s2[i]));
}

TEST_CASE("observation frame i at time t equals the render at time t-i") {
  Env env(Task::kPush);
  Observation obs = env.reset(21);
  std::vector<std::vector<float>> rendered;
  {
    std::vector<float> f(kFramePixels);
    render(env.state(), Task::kPush, f.data());
    rendered.push_back(f);
  }
  // At reset every slot replicates the current frame.
  for (int i = 0; i < kFrameStack; ++i)
    CHECK(std::memcmp(obs.frames.data() + i * kFramePixels, rendered[0].data(),
                      kFramePixels * sizeof(float)) == 0);

  Rng rng(5);
  for (int t = 1; t <= 6; ++t) {
    EnvAction a;
    a.vx = static_cast<float>(rng.uniform(-0.05, 0.05));
    a.vy = static_cast<float>(rng.uniform(-0.05, 0.05));
    obs = env.step(a).obs;
    std::vector<float> f(kFramePixels);
    render(env.state(), Task::kPush, f.data());
    rendered.push_back(f);
    for (int i = 0; i < kFrameStack; ++i) {
      const int src = std::max(0, t - i);
      CHECK(std::memcmp(obs.frames.data() + i * kFramePixels, rendered[src].data(),
                        kFramePixels * sizeof(float)) == 0);
    }
  }
}

TEST_CASE("held cube coincides with the gripper exactly at all times") {
  Env env(Task::kPick);
  env.reset(2);
  Rng rng(3);
  bool ever_held = false;
  for (int t = 0; t < el::kHorizon; ++t) {
    const EnvAction a = expert_action(Task::kPick, env.state(), 0.3, rng);
    const StepResult r = env.step(a);
    if (env.state().held) {
      ever_held = true;
      CHECK(env.state().cube.x == env.state().gripper.x);
      CHECK(env.state().cube.y == env.state().gripper.y);
    }
    if (r.done) break;
  }
  CHECK(ever_held);
}

TEST_CASE("full-state observations extend proprio with object positions") {
  Env push(Task::kPush, ObsMode::kFull);
  Observation obs = push.reset(1);
  REQUIRE(obs.full_state.size() == 2);
  CHECK(obs.full_state[0] == push.state().cube.x);
  Env pp(Task::kPickPlace, ObsMode::kImageFull);
  obs = pp.reset(1);
  REQUIRE(obs.full_state.size() == 4);
  CHECK(obs.full_state[2] == pp.state().target.x);
  Env plain(Task::kPush, ObsMode::kImageProprio);
  obs = plain.reset(1);
  CHECK(obs.full_state.empty());
}
