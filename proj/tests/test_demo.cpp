#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "rrl/demo.hpp"

using namespace rrl;

namespace {
std::filesystem::path temp_dir(const char* name) {
  auto p = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(p);
  return p;
}
}  // namespace

TEST_CASE("collecting n demonstrations yields exactly n successes") {
  const DemoDataset ds = collect_demonstrations(Task::kPush, 5, 0, 0.1);
  REQUIRE(ds.trajectories.size() == 5);
  for (const auto& tr : ds.trajectories) {
    CHECK(tr.success);
    REQUIRE(tr.length() > 0);
    CHECK(tr.observations.size() == tr.actions.size());
    // Success trajectories end with reward 1.
    CHECK((tr.flags.back() & 1) == 1);
    CHECK((tr.flags.back() & 2) == 2);
  }
  CHECK(ds.seeds.size() == 5);
}

TEST_CASE("demo collection is deterministic") {
  const DemoDataset a = collect_demonstrations(Task::kPick, 4, 9, 0.3);
  const DemoDataset b = collect_demonstrations(Task::kPick, 4, 9, 0.3);
  CHECK(datasets_equal(a, b));
}

TEST_CASE("near-perfect experts keep the attempt overhead within 10%") {
  const int n = 200;
  const DemoDataset ds = collect_demonstrations(Task::kPick, n, 1, 0.0);
  // Seeds are drawn per attempt; the last kept seed reveals how many attempts
  // were consumed.
  int64_t attempts = -1;
  for (int64_t k = 0; k < 10 * n; ++k)
    if (demo_seed(1, static_cast<uint64_t>(k)) == ds.seeds.back()) {
      attempts = k + 1;
      break;
    }
  REQUIRE(attempts > 0);
  CHECK(attempts <= static_cast<int64_t>(1.1 * n));
}

TEST_CASE("norm stats of constant actions floor the deviation") {
  DemoDataset ds;
  ds.task = Task::kPush;
  Trajectory tr;
  tr.success = true;
  for (int i = 0; i < 10; ++i) {
    Observation obs;
    obs.frames.assign(kFrameStack * kFramePixels, -1.0f);
    obs.proprio = {0.5f, 0.5f, 0.0f, 0.0f, 1.0f, 0.0f};
    tr.observations.push_back(obs);
    tr.actions.push_back(EnvAction{0.02f, 0.0f, 1.0f});
    tr.flags.push_back(0);
  }
  ds.trajectories.push_back(tr);
  const NormStats st = compute_norm_stats(ds);
  CHECK(st.action_mean[0] == Catch::Approx(0.02f));
  CHECK(st.action_mean[1] == Catch::Approx(0.0f));
  CHECK(st.action_mean[2] == Catch::Approx(1.0f));
  for (int d = 0; d < kActionDim; ++d) CHECK(st.action_std[d] == kStdFloor);
}

TEST_CASE("norm stats of a two-point set: mean 2, std 1") {
  DemoDataset ds;
  Trajectory tr;
  tr.success = true;
  for (float v : {1.0f, 3.0f}) {
    Observation obs;
    obs.frames.assign(kFrameStack * kFramePixels, -1.0f);
    obs.proprio = {v, 0.0f, 0.0f, 0.0f, 0.0f, 0.0f};
    tr.observations.push_back(obs);
    tr.actions.push_back(EnvAction{v, 0.0f, 0.0f});
    tr.flags.push_back(0);
  }
  ds.trajectories.push_back(tr);
  const NormStats st = compute_norm_stats(ds);
  CHECK(st.action_mean[0] == 2.0f);
  CHECK(st.action_std[0] == 1.0f);
  CHECK(st.proprio_mean[0] == 2.0f);
  CHECK(st.proprio_std[0] == 1.0f);
}

TEST_CASE("normalizing a dataset with its own stats standardizes it") {
  const DemoDataset ds = collect_demonstrations(Task::kPick, 10, 2, 0.4);
  for (int d = 0; d < kActionDim; ++d) {
    if (ds.stats.action_std[d] <= kStdFloor) continue;  // constant dimension
    double sum = 0.0, sq = 0.0;
    int64_t n = 0;
    for (const auto& tr : ds.trajectories)
      for (const auto& a : tr.actions) {
        const auto z = normalize_action(action_to_array(a), ds.stats);
        sum += z[d];
        sq += static_cast<double>(z[d]) * z[d];
        ++n;
      }
    const double mean = sum / n;
    const double stddev = std::sqrt(std::max(0.0, sq / n - mean * mean));
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(stddev - 1.0) < 1e-6);
  }
}

TEST_CASE("base denormalization evaluates the affine map") {
  NormStats st;
  st.action_mean = {2.0f, 0.0f, -1.0f};
  st.action_std = {3.0f, 1.0f, 2.0f};
  // a_hat = 0 -> u = mean
  const auto u0 = denormalize_base({0.0f, 0.0f, 0.0f}, st);
  CHECK(u0[0] == 2.0f);
  CHECK(u0[1] == 0.0f);
  CHECK(u0[2] == -1.0f);
  // scalar case: a_hat = 1 with mean 2, std 3 -> u = 5
  const auto u1 = denormalize_base({1.0f, 0.0f, 0.0f}, st);
  CHECK(u1[0] == 5.0f);
}

TEST_CASE("normalize/denormalize round-trips 1000 random actions") {
  Rng rng(8);
  NormStats st;
  for (int d = 0; d < kActionDim; ++d) {
    st.action_mean[d] = static_cast<float>(rng.uniform(-1.0, 1.0));
    st.action_std[d] = static_cast<float>(rng.uniform(0.01, 2.0));
  }
  float max_err = 0.0f;
  for (int i = 0; i < 1000; ++i) {
    std::array<float, kActionDim> a;
    for (auto& v : a) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    const auto back = denormalize_base(normalize_action(a, st), st);
    for (int d = 0; d < kActionDim; ++d) max_err = std::max(max_err, std::abs(back[d] - a[d]));
  }
  CHECK(max_err < 1e-6f);
}

TEST_CASE("residual denormalization is zero-centered and c-scaled") {
  NormStats st;
  st.action_std = {2.0f, 2.0f, 2.0f};
  st.action_mean = {5.0f, -3.0f, 1.0f};  // must not leak into the residual
  const auto zero = denormalize_residual({0.0f, 0.0f, 0.0f}, st, 0.7f);
  for (float v : zero) CHECK(v == 0.0f);
  const auto one = denormalize_residual({1.0f, 0.0f, 0.0f}, st, 0.1f);
  CHECK(one[0] == Catch::Approx(0.2f));
}

TEST_CASE("denormalized unit-gaussian samples have std c*sigma per dimension") {
  NormStats st;
  st.action_std = {0.02f, 0.5f, 1.5f};
  const float c = 0.1f;
  Rng rng(3);
  std::array<double, kActionDim> sq{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    std::array<float, kActionDim> x;
    for (auto& v : x) v = static_cast<float>(rng.normal());
    const auto a = denormalize_residual(x, st, c);
    for (int d = 0; d < kActionDim; ++d) sq[d] += static_cast<double>(a[d]) * a[d];
  }
  for (int d = 0; d < kActionDim; ++d) {
    const double got = std::sqrt(sq[d] / n);
    const double want = c * st.action_std[d];
    CHECK(std::abs(got - want) / want < 0.02);
  }
}

TEST_CASE("base and residual denormalization differ by the mean at c=1") {
  NormStats st;
  st.action_mean = {0.3f, -0.2f, 0.9f};
  st.action_std = {1.2f, 0.4f, 0.05f};
  Rng rng(5);
  for (int i = 0; i < 100; ++i) {
    std::array<float, kActionDim> x;
    for (auto& v : x) v = static_cast<float>(rng.uniform(-2.0, 2.0));
    const auto base = denormalize_base(x, st);
    const auto res = denormalize_residual(x, st, 1.0f);
    for (int d = 0; d < kActionDim; ++d)
      CHECK(base[d] - res[d] == Catch::Approx(st.action_mean[d]).margin(1e-6));
  }
}

TEST_CASE("normalization with identity stats is the identity") {
  NormStats st;  // means 0, stds 1
  const std::array<float, kActionDim> a{0.4f, -0.7f, 0.2f};
  const auto z = normalize_action(a, st);
  for (int d = 0; d < kActionDim; ++d) CHECK(z[d] == a[d]);
}

TEST_CASE("datasets persist and reload identically") {
  const auto dir = temp_dir("rrl_demo_roundtrip");
  const DemoDataset ds = collect_demonstrations(Task::kPickPlace, 3, 4, 0.2);
  persist_dataset(ds, dir);
  const DemoDataset back = load_dataset(dir);
  CHECK(datasets_equal(ds, back));
  // Iteration order survives persistence.
  for (size_t i = 0; i < ds.trajectories.size(); ++i)
    CHECK(ds.trajectories[i].seed == back.trajectories[i].seed);

  // A second save of the loaded dataset is byte-identical.
  const auto dir2 = temp_dir("rrl_demo_roundtrip2");
  persist_dataset(back, dir2);
  for (const char* f : {"data.bin", "manifest.json"}) {
    std::ifstream f1(dir / f, std::ios::binary), f2(dir2 / f, std::ios::binary);
    std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(s1 == s2);
  }
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("corrupted magic bytes are reported as a header failure") {
  const auto dir = temp_dir("rrl_demo_corrupt");
  const DemoDataset ds = collect_demonstrations(Task::kPush, 2, 5, 0.0);
  persist_dataset(ds, dir);
  {
    std::fstream f(dir / "data.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXXXXXX", 8);
  }
  try {
    load_dataset(dir);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("header") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("truncated blobs fail with the offending offset") {
  const auto dir = temp_dir("rrl_demo_trunc");
  const DemoDataset ds = collect_demonstrations(Task::kPush, 2, 6, 0.0);
  persist_dataset(ds, dir);
  const auto full = std::filesystem::file_size(dir / "data.bin");
  std::filesystem::resize_file(dir / "data.bin", full / 2);
  try {
    load_dataset(dir);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("file size tracks the quantized frame payload") {
  const auto dir = temp_dir("rrl_demo_size");
  const DemoDataset ds = collect_demonstrations(Task::kPick, 200, 7, 0.0);
  persist_dataset(ds, dir);
  int64_t frames = 0;
  for (const auto& tr : ds.trajectories) frames += static_cast<int64_t>(tr.length()) * kFrameStack;
  const auto size = static_cast<int64_t>(std::filesystem::file_size(dir / "data.bin"));
  const int64_t expected = frames * 1024;
  CHECK(std::abs(size - expected) <= expected / 10);
  std::filesystem::remove_all(dir);
}
