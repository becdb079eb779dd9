#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rrl/env.hpp"
#include "rrl/rng.hpp"

namespace rrl {

/// One expert episode: observation/action pairs in execution order plus the
/// per-step outcome flags (bit 0: reward, bit 1: done).
struct Trajectory {
  std::vector<Observation> observations;
  std::vector<EnvAction> actions;
  std::vector<uint8_t> flags;
  bool success = false;
  uint64_t seed = 0;

  size_t length() const { return actions.size(); }
};

/// Per-dimension normalization statistics over successful demonstrations.
/// Standard deviations are floored at 1e-6.
struct NormStats {
  std::array<float, kActionDim> action_mean{}, action_std{};
  std::array<float, kProprioDim> proprio_mean{}, proprio_std{};

  NormStats() {
    action_std.fill(1.0f);
    proprio_std.fill(1.0f);
  }
};

constexpr float kStdFloor = 1e-6f;

struct DemoDataset {
  Task task = Task::kPush;
  int n = 0;
  uint64_t base_seed = 0;
  double noise_scale = 0.0;
  std::vector<Trajectory> trajectories;
  std::vector<uint64_t> seeds;  // generating seed per kept trajectory
  NormStats stats;
};

// ---------------------------------------------------------------------------
// Normalization (element-wise; the base action is mean-shifted, the residual
// action is zero-centered and c-scaled).
// ---------------------------------------------------------------------------

inline std::array<float, kActionDim> action_to_array(const EnvAction& a) {
  return {a.vx, a.vy, a.grip};
}
inline EnvAction action_from_array(const std::array<float, kActionDim>& v) {
  return EnvAction{v[0], v[1], v[2]};
}

inline std::array<float, kActionDim> normalize_action(const std::array<float, kActionDim>& a,
                                                      const NormStats& st) {
  std::array<float, kActionDim> out;
  for (int i = 0; i < kActionDim; ++i) out[i] = (a[i] - st.action_mean[i]) / st.action_std[i];
  return out;
}

/// u = sigma(A) o a_hat + mu(A)
inline std::array<float, kActionDim> denormalize_base(const std::array<float, kActionDim>& ahat,
                                                      const NormStats& st) {
  std::array<float, kActionDim> out;
  for (int i = 0; i < kActionDim; ++i) out[i] = st.action_std[i] * ahat[i] + st.action_mean[i];
  return out;
}

/// a = c sigma(A) o sample; zero-centered, no mean shift.
inline std::array<float, kActionDim> denormalize_residual(
    const std::array<float, kActionDim>& sample, const NormStats& st, float c) {
  if (!(c > 0.0f)) throw std::invalid_argument("denormalize_residual: c must be positive");
  std::array<float, kActionDim> out;
  for (int i = 0; i < kActionDim; ++i) out[i] = c * st.action_std[i] * sample[i];
  return out;
}

inline std::array<float, kProprioDim> normalize_proprio(const std::array<float, kProprioDim>& p,
                                                        const NormStats& st) {
  std::array<float, kProprioDim> out;
  for (int i = 0; i < kProprioDim; ++i) out[i] = (p[i] - st.proprio_mean[i]) / st.proprio_std[i];
  return out;
}

/// Exact sample mean / population standard deviation per action and proprio
/// dimension, accumulated in double. Constant dimensions get the floored
/// deviation and a warning.
inline NormStats compute_norm_stats(const DemoDataset& ds) {
  if (ds.trajectories.empty()) throw std::invalid_argument("compute_norm_stats: empty dataset");
  NormStats st;
  std::array<double, kActionDim> asum{}, asq{};
  std::array<double, kProprioDim> psum{}, psq{};
  int64_t n = 0;
  for (const auto& tr : ds.trajectories) {
    for (size_t i = 0; i < tr.length(); ++i) {
      const auto a = action_to_array(tr.actions[i]);
      for (int d = 0; d < kActionDim; ++d) {
        asum[d] += a[d];
        asq[d] += static_cast<double>(a[d]) * a[d];
      }
      for (int d = 0; d < kProprioDim; ++d) {
        const double v = tr.observations[i].proprio[d];
        psum[d] += v;
        psq[d] += v * v;
      }
      ++n;
    }
  }
  if (n == 0) throw std::invalid_argument("compute_norm_stats: dataset has no steps");
  for (int d = 0; d < kActionDim; ++d) {
    const double mean = asum[d] / n;
    const double var = std::max(0.0, asq[d] / n - mean * mean);
    st.action_mean[d] = static_cast<float>(mean);
    st.action_std[d] = static_cast<float>(std::sqrt(var));
    if (st.action_std[d] < kStdFloor) {
      std::fprintf(stderr, "warning: action dimension %d is constant; std floored at %g\n", d,
                   kStdFloor);
      st.action_std[d] = kStdFloor;
    }
  }
  for (int d = 0; d < kProprioDim; ++d) {
    const double mean = psum[d] / n;
    const double var = std::max(0.0, psq[d] / n - mean * mean);
    st.proprio_mean[d] = static_cast<float>(mean);
    st.proprio_std[d] = static_cast<float>(std::sqrt(var));
    if (st.proprio_std[d] < kStdFloor) {
      std::fprintf(stderr, "warning: proprio dimension %d is constant; std floored at %g\n", d,
                   kStdFloor);
      st.proprio_std[d] = kStdFloor;
    }
  }
  return st;
}

/// Rolls out the scripted expert until exactly n successful episodes are
/// collected. Failed episodes are discarded and re-drawn with fresh seeds; a
/// success rate below 50% over a 10n attempt budget aborts.
inline DemoDataset collect_demonstrations(Task task, int n, uint64_t seed, double noise_scale) {
  if (n < 1) throw std::invalid_argument("collect_demonstrations: n must be >= 1");
  DemoDataset ds;
  ds.task = task;
  ds.n = n;
  ds.base_seed = seed;
  ds.noise_scale = noise_scale;
  const int64_t budget = 10ll * n;
  int64_t attempt = 0;
  while (static_cast<int>(ds.trajectories.size()) < n) {
    if (attempt >= budget)
      throw std::runtime_error(
          "collect_demonstrations: expert success rate below 50% over the attempt budget (" +
          std::to_string(ds.trajectories.size()) + "/" + std::to_string(attempt) + " on " +
          task_to_string(task) + ")");
    const uint64_t episode_seed = demo_seed(seed, static_cast<uint64_t>(attempt));
    Rng noise_rng(substream(seed, "demo-noise", static_cast<uint64_t>(attempt)));
    ++attempt;

    Env env(task, ObsMode::kImageProprio);
    Trajectory tr;
    tr.seed = episode_seed;
    Observation obs = env.reset(episode_seed);
    bool success = false;
    for (int t = 0; t < env_limits::kHorizon; ++t) {
      const EnvAction a = expert_action(task, env.state(), noise_scale, noise_rng);
      StepResult res = env.step(a);
      tr.observations.push_back(std::move(obs));
      tr.actions.push_back(a);
      tr.flags.push_back(static_cast<uint8_t>((res.success ? 1 : 0) | (res.done ? 2 : 0)));
      obs = std::move(res.obs);
      if (res.done) {
        success = res.success;
        break;
      }
    }
    tr.success = success;
    if (success) ds.trajectories.push_back(std::move(tr));
  }
  ds.seeds.clear();
  for (const auto& tr : ds.trajectories) ds.seeds.push_back(tr.seed);
  ds.stats = compute_norm_stats(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Persistence: manifest.json + data.bin under one directory. Frames are
// stored 8-bit quantized; the render palette sits exactly on the grid, so
// collected datasets round-trip losslessly.
// ---------------------------------------------------------------------------

constexpr char kDemoMagic[8] = {'R', 'R', 'L', 'D', 'E', 'M', 'O', '1'};

inline uint8_t quantize_pixel(float v) {
  const long q = std::lround((v + 1.0f) * 127.5f);
  return static_cast<uint8_t>(q < 0 ? 0 : (q > 255 ? 255 : q));
}
inline float dequantize_pixel(uint8_t q) { return static_cast<float>(q) / 127.5f - 1.0f; }

namespace detail {

inline nlohmann::json stats_to_json(const NormStats& st) {
  return {{"action_mean", st.action_mean},
          {"action_std", st.action_std},
          {"proprio_mean", st.proprio_mean},
          {"proprio_std", st.proprio_std}};
}

inline NormStats stats_from_json(const nlohmann::json& j) {
  NormStats st;
  auto read = [&](const char* key, auto& arr) {
    const auto v = j.at(key).get<std::vector<float>>();
    if (v.size() != arr.size()) throw std::runtime_error("stats: wrong dimension for " + std::string(key));
    std::copy(v.begin(), v.end(), arr.begin());
  };
  read("action_mean", st.action_mean);
  read("action_std", st.action_std);
  read("proprio_mean", st.proprio_mean);
  read("proprio_std", st.proprio_std);
  return st;
}

}  // namespace detail

inline void persist_dataset(const DemoDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "rrl-demos";
  manifest["version"] = 1;
  manifest["task"] = task_to_string(ds.task);
  manifest["n"] = ds.n;
  manifest["base_seed"] = ds.base_seed;
  manifest["noise_scale"] = ds.noise_scale;
  manifest["seeds"] = ds.seeds;
  manifest["stats"] = detail::stats_to_json(ds.stats);
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << "\n";

  std::ofstream blob(dir / "data.bin", std::ios::binary | std::ios::trunc);
  blob.write(kDemoMagic, sizeof(kDemoMagic));
  std::vector<uint8_t> qframes(kFrameStack * kFramePixels);
  for (const auto& tr : ds.trajectories) {
    const uint32_t len = static_cast<uint32_t>(tr.length());
    blob.write(reinterpret_cast<const char*>(&len), sizeof(len));
    for (size_t i = 0; i < tr.length(); ++i) {
      const Observation& obs = tr.observations[i];
      for (size_t p = 0; p < qframes.size(); ++p) qframes[p] = quantize_pixel(obs.frames[p]);
      blob.write(reinterpret_cast<const char*>(qframes.data()),
                 static_cast<std::streamsize>(qframes.size()));
      blob.write(reinterpret_cast<const char*>(obs.proprio.data()),
                 sizeof(float) * kProprioDim);
      const auto act = action_to_array(tr.actions[i]);
      blob.write(reinterpret_cast<const char*>(act.data()), sizeof(float) * kActionDim);
      blob.write(reinterpret_cast<const char*>(&tr.flags[i]), 1);
    }
  }
  if (!blob.good() || !mf.good()) throw std::runtime_error("persist_dataset: write failed");
}

inline DemoDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream mf(dir / "manifest.json");
  if (!mf) throw std::runtime_error("load_dataset: missing " + (dir / "manifest.json").string());
  const nlohmann::json manifest = nlohmann::json::parse(mf);
  if (manifest.value("format", "") != "rrl-demos")
    throw std::runtime_error("load_dataset: manifest is not a demo manifest");
  if (manifest.value("version", 0) != 1)
    throw std::runtime_error("load_dataset: unsupported format version");

  DemoDataset ds;
  ds.task = task_from_string(manifest.at("task").get<std::string>());
  ds.n = manifest.at("n").get<int>();
  ds.base_seed = manifest.at("base_seed").get<uint64_t>();
  ds.noise_scale = manifest.at("noise_scale").get<double>();
  ds.seeds = manifest.at("seeds").get<std::vector<uint64_t>>();
  ds.stats = detail::stats_from_json(manifest.at("stats"));

  std::ifstream blob(dir / "data.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("load_dataset: missing " + (dir / "data.bin").string());
  int64_t offset = 0;
  auto read = [&](void* dst, size_t bytes, const char* what) {
    blob.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
    if (static_cast<size_t>(blob.gcount()) != bytes)
      throw std::runtime_error("load_dataset: truncated file reading " + std::string(what) +
                               " at offset " + std::to_string(offset));
    offset += static_cast<int64_t>(bytes);
  };
  char magic[8];
  read(magic, sizeof(magic), "header");
  if (std::memcmp(magic, kDemoMagic, sizeof(magic)) != 0)
    throw std::runtime_error("load_dataset: bad magic bytes in blob header");

  std::vector<uint8_t> qframes(kFrameStack * kFramePixels);
  for (size_t k = 0; k < ds.seeds.size(); ++k) {
    uint32_t len = 0;
    read(&len, sizeof(len), "trajectory length");
    Trajectory tr;
    tr.seed = ds.seeds[k];
    tr.success = true;
    for (uint32_t i = 0; i < len; ++i) {
      Observation obs;
      obs.frames.resize(kFrameStack * kFramePixels);
      read(qframes.data(), qframes.size(), "frames");
      for (size_t p = 0; p < qframes.size(); ++p) obs.frames[p] = dequantize_pixel(qframes[p]);
      read(obs.proprio.data(), sizeof(float) * kProprioDim, "proprio");
      std::array<float, kActionDim> act{};
      read(act.data(), sizeof(float) * kActionDim, "action");
      uint8_t flags = 0;
      read(&flags, 1, "flags");
      tr.observations.push_back(std::move(obs));
      tr.actions.push_back(action_from_array(act));
      tr.flags.push_back(flags);
    }
    ds.trajectories.push_back(std::move(tr));
  }
  return ds;
}

inline bool datasets_equal(const DemoDataset& a, const DemoDataset& b) {
  if (a.task != b.task || a.n != b.n || a.base_seed != b.base_seed || a.seeds != b.seeds)
    return false;
  if (std::memcmp(&a.stats, &b.stats, sizeof(NormStats)) != 0) return false;
  if (a.trajectories.size() != b.trajectories.size()) return false;
  for (size_t k = 0; k < a.trajectories.size(); ++k) {
    const auto& ta = a.trajectories[k];
    const auto& tb = b.trajectories[k];
    if (ta.length() != tb.length() || ta.flags != tb.flags || ta.seed != tb.seed) return false;
    for (size_t i = 0; i < ta.length(); ++i) {
      if (std::memcmp(&ta.actions[i], &tb.actions[i], sizeof(EnvAction)) != 0) return false;
      if (ta.observations[i].proprio != tb.observations[i].proprio) return false;
      for (size_t p = 0; p < ta.observations[i].frames.size(); ++p)
        if (quantize_pixel(ta.observations[i].frames[p]) !=
            quantize_pixel(tb.observations[i].frames[p]))
          return false;
    }
  }
  return true;
}

}  // namespace rrl
