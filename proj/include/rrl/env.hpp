#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <stdexcept>
#include <string>
#include <vector>

#include "rrl/rng.hpp"

namespace rrl {

enum class Task { kPush, kPick, kPickPlace };
enum class ObsMode { kImage, kImageProprio, kImageFull, kFull };

inline Task task_from_string(const std::string& s) {
  if (s == "push") return Task::kPush;
  if (s == "pick") return Task::kPick;
  if (s == "pickplace") return Task::kPickPlace;
  throw std::invalid_argument("unknown task id '" + s + "' (expected push|pick|pickplace)");
}
inline const char* task_to_string(Task t) {
  switch (t) {
    case Task::kPush: return "push";
    case Task::kPick: return "pick";
    default: return "pickplace";
  }
}

inline ObsMode obs_mode_from_string(const std::string& s) {
  if (s == "image") return ObsMode::kImage;
  if (s == "image+proprio") return ObsMode::kImageProprio;
  if (s == "image+full") return ObsMode::kImageFull;
  if (s == "full") return ObsMode::kFull;
  throw std::invalid_argument("unknown observation mode '" + s +
                              "' (expected image|image+proprio|image+full|full)");
}
inline const char* obs_mode_to_string(ObsMode m) {
  switch (m) {
    case ObsMode::kImage: return "image";
    case ObsMode::kImageProprio: return "image+proprio";
    case ObsMode::kImageFull: return "image+full";
    default: return "full";
  }
}

struct Vec2 {
  float x = 0.0f, y = 0.0f;
  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(float s) const { return {x * s, y * s}; }
  float norm() const { return std::sqrt(x * x + y * y); }
};
inline float dist(Vec2 a, Vec2 b) { return (a - b).norm(); }

// Workspace geometry and dynamics constants. Positions live in [0,1]^2.
namespace env_limits {
constexpr float kVelocityBound = 0.05f;   // per-component velocity clip
constexpr float kGripDelta = 0.2f;        // aperture change per step
constexpr float kSpawnLo = 0.1f, kSpawnHi = 0.9f;
constexpr float kMinCubeTargetSep = 0.2f;
constexpr float kCaptureDist = 0.04f;     // grasp proximity
constexpr float kCaptureAperture = 0.3f;  // grasp closes below this
constexpr float kReleaseAperture = 0.7f;  // grasp opens above this
constexpr float kPushContact = 0.05f;     // pushing contact radius (Push task)
constexpr float kPushSuccess = 0.08f;     // cube-target distance for Push
constexpr float kLiftZoneY = 0.8f;        // Pick succeeds above this height
constexpr float kPlaceSuccess = 0.06f;    // cube-bowl distance for PickAndPlace
constexpr int kHorizon = 100;
constexpr Vec2 kPushTarget{0.75f, 0.25f};
}  // namespace env_limits

constexpr int kFrameSize = 32;
constexpr int kFrameStack = 4;
constexpr int kFramePixels = kFrameSize * kFrameSize;
constexpr int kProprioDim = 6;
constexpr int kActionDim = 3;  // vx, vy, grip

struct WorldState {
  Vec2 gripper;
  Vec2 gripper_vel;
  float aperture = 1.0f;  // 1 = open
  float grip_vel = 0.0f;
  Vec2 cube;
  bool held = false;
  Vec2 target;  // Push target / PickAndPlace bowl; unused for Pick
  int step = 0;
};

/// Velocity command plus a continuous grip command (negative closes, positive
/// opens). Clipping happens inside step, never in callers.
struct EnvAction {
  float vx = 0.0f, vy = 0.0f, grip = 0.0f;
};

/// Stacked grayscale frames (newest first), raw proprioceptive features, and
/// the optional privileged full-state extension.
struct Observation {
  std::vector<float> frames;  // kFrameStack * kFramePixels, values in [-1,1]
  std::array<float, kProprioDim> proprio{};
  std::vector<float> full_state;  // cube (+ bowl for pickplace) when the mode provides it
};

inline int full_state_dim(Task task) { return task == Task::kPickPlace ? 4 : 2; }

// Grayscale palette; every level sits exactly on the 8-bit quantization grid
// used by dataset persistence, so render -> quantize -> dequantize is lossless.
namespace pixel {
constexpr float kBackground = -1.0f;
constexpr float kTarget = -0.2f;   // level 102
constexpr float kGripper = 0.6f;   // level 204
constexpr float kCube = 1.0f;      // level 255
}  // namespace pixel

/// Renders one 32x32 frame: target/bowl as a 6x6 outline, cube as a filled
/// 4x4 square, gripper as a 5-pixel cross whose arm gap encodes the aperture.
inline void render(const WorldState& s, Task task, float* frame) {
  for (int i = 0; i < kFramePixels; ++i) frame[i] = pixel::kBackground;
  const auto px = [](float v) {
    int p = static_cast<int>(v * kFrameSize);
    return p < 0 ? 0 : (p >= kFrameSize ? kFrameSize - 1 : p);
  };
  const auto put = [&](int r, int c, float v) {
    if (r >= 0 && r < kFrameSize && c >= 0 && c < kFrameSize) frame[r * kFrameSize + c] = v;
  };
  const auto to_rc = [&](Vec2 p, int& r, int& c) {
    r = px(1.0f - p.y);
    c = px(p.x);
  };

  if (task != Task::kPick) {
    int r, c;
    to_rc(s.target, r, c);
    for (int dr = -2; dr <= 3; ++dr)
      for (int dc = -2; dc <= 3; ++dc)
        if (dr == -2 || dr == 3 || dc == -2 || dc == 3) put(r + dr, c + dc, pixel::kTarget);
  }
  {
    int r, c;
    to_rc(s.cube, r, c);
    for (int dr = -1; dr <= 2; ++dr)
      for (int dc = -1; dc <= 2; ++dc) put(r + dr, c + dc, pixel::kCube);
  }
  {
    int r, c;
    to_rc(s.gripper, r, c);
    const int gap = 1 + static_cast<int>(std::lround(s.aperture * 2.0f));
    put(r, c, pixel::kGripper);
    put(r + gap, c, pixel::kGripper);
    put(r - gap, c, pixel::kGripper);
    put(r, c + gap, pixel::kGripper);
    put(r, c - gap, pixel::kGripper);
  }
}

struct StepResult {
  Observation obs;
  float reward = 0.0f;
  bool done = false;
  bool success = false;
};

/// Deterministic, seedable 2D manipulation environment. One instance is
/// single-threaded; run parallel episodes on independent instances.
class Env {
 public:
  explicit Env(Task task, ObsMode mode = ObsMode::kImageProprio) : task_(task), mode_(mode) {}

  Task task() const { return task_; }
  ObsMode mode() const { return mode_; }
  const WorldState& state() const { return state_; }

  Observation reset(uint64_t seed) {
    Rng rng(seed);
    state_ = WorldState{};
    state_.gripper = draw_pos(rng);
    if (task_ == Task::kPush) {
      state_.target = env_limits::kPushTarget;
    } else if (task_ == Task::kPickPlace) {
      state_.target = draw_pos(rng);
    } else {
      state_.target = {0.5f, 0.9f};
    }
    // Cube keeps a minimum separation from the target so no episode starts
    // solved; for Pick any spawn position is valid.
    do {
      state_.cube = draw_pos(rng);
    } while (task_ != Task::kPick &&
             dist(state_.cube, state_.target) < env_limits::kMinCubeTargetSep);
    state_.aperture = 1.0f;
    state_.held = false;
    state_.step = 0;
    history_.clear();
    push_frame();
    return make_observation();
  }

  StepResult step(const EnvAction& action) {
    namespace el = env_limits;
    if (state_.step >= el::kHorizon)
      throw std::logic_error("env step: episode already ended at the horizon");

    state_ = step_dynamics(state_, action, task_);
    push_frame();

    StepResult res;
    res.success = task_success(state_, task_);
    res.reward = res.success ? 1.0f : 0.0f;
    res.done = res.success || state_.step >= el::kHorizon;
    res.obs = make_observation();
    return res;
  }

  bool success_predicate() const { return task_success(state_, task_); }

  /// Pure kinematic update: clip, move, grip, grasp/release, push contact.
  static WorldState step_dynamics(const WorldState& in, const EnvAction& action, Task task) {
    namespace el = env_limits;
    if (!(std::isfinite(action.vx) && std::isfinite(action.vy) && std::isfinite(action.grip)))
      throw std::invalid_argument("env step: non-finite action");

    WorldState s = in;
    const float vx = std::clamp(action.vx, -el::kVelocityBound, el::kVelocityBound);
    const float vy = std::clamp(action.vy, -el::kVelocityBound, el::kVelocityBound);
    const Vec2 prev = s.gripper;
    s.gripper.x = std::clamp(prev.x + vx, 0.0f, 1.0f);
    s.gripper.y = std::clamp(prev.y + vy, 0.0f, 1.0f);
    s.gripper_vel = s.gripper - prev;

    const float grip_cmd = std::clamp(action.grip, -1.0f, 1.0f);
    const float sign = grip_cmd > 0.0f ? 1.0f : (grip_cmd < 0.0f ? -1.0f : 0.0f);
    const float prev_ap = s.aperture;
    s.aperture = std::clamp(prev_ap + el::kGripDelta * sign, 0.0f, 1.0f);
    s.grip_vel = s.aperture - prev_ap;

    if (s.held) {
      s.cube = s.gripper;
      if (s.aperture > el::kReleaseAperture) s.held = false;
    } else if (dist(s.gripper, s.cube) <= el::kCaptureDist &&
               s.aperture < el::kCaptureAperture) {
      s.held = true;
      s.cube = s.gripper;
    } else if (task == Task::kPush) {
      const float d = dist(s.gripper, s.cube);
      if (d < el::kPushContact) {
        Vec2 dir;
        if (d > 1e-6f) {
          dir = (s.cube - s.gripper) * (1.0f / d);
        } else if (s.gripper_vel.norm() > 1e-6f) {
          dir = s.gripper_vel * (1.0f / s.gripper_vel.norm());
        } else {
          dir = {1.0f, 0.0f};
        }
        s.cube = s.gripper + dir * el::kPushContact;
        s.cube.x = std::clamp(s.cube.x, 0.0f, 1.0f);
        s.cube.y = std::clamp(s.cube.y, 0.0f, 1.0f);
      }
    }

    s.step += 1;
    return s;
  }

  static bool task_success(const WorldState& s, Task task) {
    namespace el = env_limits;
    switch (task) {
      case Task::kPush:
        return dist(s.cube, s.target) <= el::kPushSuccess;
      case Task::kPick:
        return s.held && s.cube.y > el::kLiftZoneY;
      case Task::kPickPlace:
        return !s.held && s.aperture > el::kReleaseAperture &&
               dist(s.cube, s.target) <= el::kPlaceSuccess;
    }
    return false;
  }

  Observation observation() const { return make_observation(); }

 private:
  Task task_;
  ObsMode mode_;
  WorldState state_;
  std::deque<std::vector<float>> history_;  // newest at front

  static Vec2 draw_pos(Rng& rng) {
    namespace el = env_limits;
    Vec2 p;
    p.x = static_cast<float>(rng.uniform(el::kSpawnLo, el::kSpawnHi));
    p.y = static_cast<float>(rng.uniform(el::kSpawnLo, el::kSpawnHi));
    return p;
  }

  void push_frame() {
    std::vector<float> f(kFramePixels);
    render(state_, task_, f.data());
    history_.push_front(std::move(f));
    if (history_.size() > kFrameStack) history_.pop_back();
  }

  Observation make_observation() const {
    Observation obs;
    obs.frames.resize(kFrameStack * kFramePixels);
    for (int i = 0; i < kFrameStack; ++i) {
      // At episode start the history is shorter than the stack; the oldest
      // available frame is replicated.
      const auto& src = history_[std::min<size_t>(i, history_.size() - 1)];
      std::copy(src.begin(), src.end(), obs.frames.begin() + i * kFramePixels);
    }
    obs.proprio = {state_.gripper.x,   state_.gripper.y, state_.gripper_vel.x,
                   state_.gripper_vel.y, state_.aperture,  state_.grip_vel};
    if (mode_ == ObsMode::kImageFull || mode_ == ObsMode::kFull) {
      obs.full_state = {state_.cube.x, state_.cube.y};
      if (task_ == Task::kPickPlace) {
        obs.full_state.push_back(state_.target.x);
        obs.full_state.push_back(state_.target.y);
      }
    }
    return obs;
  }
};

// ---------------------------------------------------------------------------
// Scripted experts: stateless waypoint proportional controllers, the data
// source for behavioral cloning.
// ---------------------------------------------------------------------------

namespace detail {

inline Vec2 toward(Vec2 from, Vec2 to, float gain, float cap) {
  Vec2 v = (to - from) * gain;
  const float n = v.norm();
  if (n > cap) v = v * (cap / n);
  return v;
}

inline EnvAction push_expert(const WorldState& s) {
  namespace el = env_limits;
  EnvAction a;
  a.grip = 1.0f;  // never grasp; pushing works with any aperture
  const Vec2 to_target = s.target - s.cube;
  const float d_ct = to_target.norm();
  if (d_ct < 1e-6f) return a;
  const Vec2 dir_t = to_target * (1.0f / d_ct);

  // Smooth potential-field controller: attraction to a staging point behind
  // the cube, radial repulsion plus a fixed-handed swirl near the cube (so the
  // detour side is consistent), and a blend into the pushing motion once
  // lined up. A continuous field clones far better than branchy waypoint
  // logic, whose decision boundaries average out to near-zero actions.
  const Vec2 behind = s.cube - dir_t * 0.08f;
  const float d_gc = dist(s.gripper, s.cube);
  Vec2 att = behind - s.gripper;
  const float d_att = att.norm();
  if (d_att > 1e-6f) att = att * (1.0f / d_att);
  Vec2 u_gc{0.0f, 0.0f};
  if (d_gc > 1e-6f) u_gc = (s.gripper - s.cube) * (1.0f / d_gc);
  const float prox = std::max(0.0f, 1.0f - d_gc / 0.22f);

  const float align = -(u_gc.x * dir_t.x + u_gc.y * dir_t.y);
  const float w_align = std::clamp((align - 0.80f) / 0.15f, 0.0f, 1.0f);
  const float w_near = std::clamp((0.16f - d_gc) / 0.06f, 0.0f, 1.0f);
  const float w = w_align * w_near;

  // Obstacle avoidance fades out as the pushing blend takes over; an active
  // repulsion while in contact sets up a slow kick-out limit cycle.
  const Vec2 repulse = u_gc * (1.2f * prox * prox * (1.0f - w));
  const Vec2 swirl = Vec2{-u_gc.y, u_gc.x} * (1.5f * prox * prox * (1.0f - w));

  Vec2 v_app = att + repulse + swirl;
  const float n_app = v_app.norm();
  if (n_app > 1e-6f) v_app = v_app * (1.0f / n_app);

  // While pushing, advance along the target direction and steer back onto
  // the pushing axis; lateral drift otherwise walks the cube past the target
  // disk.
  const Vec2 ideal_grip = s.cube - dir_t * 0.045f;
  Vec2 v_push = dir_t + (ideal_grip - s.gripper) * 6.0f;
  const float n_push = v_push.norm();
  if (n_push > 1e-6f) v_push = v_push * (1.0f / n_push);

  const float speed = (0.05f - 0.015f * w) * std::min(1.0f, std::max(d_att, d_ct) / 0.05f);
  const Vec2 v = (v_app * (1.0f - w) + v_push * w) * speed;
  a.vx = v.x;
  a.vy = v.y;
  return a;
}

inline EnvAction pick_expert(const WorldState& s) {
  namespace el = env_limits;
  EnvAction a;
  if (s.held) {
    const Vec2 v = toward(s.gripper, {s.gripper.x, 0.95f}, 1.0f, el::kVelocityBound);
    a.vx = v.x;
    a.vy = v.y;
    a.grip = -1.0f;
    return a;
  }
  const float d = dist(s.gripper, s.cube);
  const Vec2 v = toward(s.gripper, s.cube, 1.0f, el::kVelocityBound);
  a.vx = v.x;
  a.vy = v.y;
  a.grip = d <= 0.035f ? -1.0f : 1.0f;
  return a;
}

inline EnvAction pickplace_expert(const WorldState& s) {
  namespace el = env_limits;
  EnvAction a;
  if (s.held) {
    if (dist(s.gripper, s.target) > 0.02f) {
      const Vec2 v = toward(s.gripper, s.target, 1.0f, el::kVelocityBound);
      a.vx = v.x;
      a.vy = v.y;
      a.grip = -1.0f;
    } else {
      const Vec2 v = toward(s.gripper, s.target, 1.0f, 0.01f);
      a.vx = v.x;
      a.vy = v.y;
      a.grip = 1.0f;  // release over the bowl
    }
    return a;
  }
  if (dist(s.cube, s.target) <= el::kPlaceSuccess) {
    a.grip = 1.0f;  // already placed: keep the hand open
    return a;
  }
  return pick_expert(s);
}

}  // namespace detail

/// Scripted expert action for the given state, with optional Gaussian action
/// noise of the given scale (velocity noise is scaled to the velocity bound).
inline EnvAction expert_action(Task task, const WorldState& s, double noise_scale, Rng& rng) {
  EnvAction a;
  switch (task) {
    case Task::kPush: a = detail::push_expert(s); break;
    case Task::kPick: a = detail::pick_expert(s); break;
    case Task::kPickPlace: a = detail::pickplace_expert(s); break;
  }
  if (noise_scale > 0.0) {
    namespace el = env_limits;
    a.vx = std::clamp(a.vx + static_cast<float>(rng.normal(0.0, noise_scale * el::kVelocityBound)),
                      -el::kVelocityBound, el::kVelocityBound);
    a.vy = std::clamp(a.vy + static_cast<float>(rng.normal(0.0, noise_scale * el::kVelocityBound)),
                      -el::kVelocityBound, el::kVelocityBound);
    a.grip = std::clamp(a.grip + static_cast<float>(rng.normal(0.0, noise_scale * 0.3)), -1.0f, 1.0f);
  }
  return a;
}

inline EnvAction expert_action(Task task, const WorldState& s) {
  Rng unused(0);
  return expert_action(task, s, 0.0, unused);
}

}  // namespace rrl
