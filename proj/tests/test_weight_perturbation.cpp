#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "advtrain/errors.hpp"
#include "advtrain/model.hpp"
#include "advtrain/weight_perturb.hpp"

using namespace advtrain;

namespace {

ModelState toy_model(uint64_t seed) {
  ModelState m;
  m.architecture = "small_cnn";
  m.num_classes = 3;
  auto net = std::make_unique<nn::Sequential>();
  net->add("conv", std::make_unique<nn::Conv2d>(2, 4, 3, 1, 1));
  net->add("relu", std::make_unique<nn::ReLU>());
  net->add("pool", std::make_unique<nn::GlobalAvgPool>());
  net->add("fc", std::make_unique<nn::Linear>(4, 3));
  m.net = std::move(net);
  std::mt19937 rng(static_cast<uint32_t>(seed));
  m.net->init(rng);
  return m;
}

Tensor random_inputs(int64_t b, std::mt19937& rng) {
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  Tensor x({b, 2, 4, 4});
  for (auto& v : x.data) v = d(rng);
  return x;
}

std::vector<float> snapshot(ModelState& m) {
  std::vector<float> all;
  for (auto& p : m.parameters()) all.insert(all.end(), p.value->data.begin(), p.value->data.end());
  return all;
}

double masked_loss(ModelState& m, const Tensor& x, const std::vector<int>& y, float l_min) {
  PredictionBatch pred = m.forward(x, false);
  auto losses = cross_entropy_per_sample(pred, y);
  auto mask = small_loss_mask(losses, l_min);
  double s = 0;
  for (size_t i = 0; i < losses.size(); ++i)
    if (mask[i]) s += losses[i];
  return s;
}

}  // namespace

TEST_CASE("small loss mask threshold is inclusive") {
  auto mask = small_loss_mask({0.2f, 1.5f, 1.5000001f, 3.0f}, 1.5f);
  CHECK(mask == std::vector<uint8_t>({1, 1, 0, 0}));
}

TEST_CASE("empty mask yields exactly zero perturbation") {
  ModelState m = toy_model(1);
  std::mt19937 rng(2);
  Tensor x = random_inputs(4, rng);
  std::vector<int> y = {0, 1, 2, 0};
  WPSpec spec;
  spec.l_min = -1.0f;  // nothing is below the threshold
  auto before = snapshot(m);
  WeightPerturbation wp = generate_wp(m, x, y, spec);
  CHECK(wp.is_zero());
  CHECK(snapshot(m) == before);
}

TEST_CASE("one-step perturbation matches the closed form") {
  ModelState m = toy_model(5);
  std::mt19937 rng(6);
  Tensor x = random_inputs(4, rng);
  std::vector<int> y = {0, 1, 2, 0};
  WPSpec spec;
  spec.gamma = 0.01f;
  spec.l_min = 100.0f;  // everything masked in
  spec.steps = 1;

  // Oracle: gradient of the summed CE at theta, per-layer scaled to
  // gamma * ||theta_l|| * g / ||g||, projected (a no-op at this step size).
  m.zero_grad();
  PredictionBatch pred = m.forward(x, false);
  m.backward(cross_entropy_logit_grad(pred, y));
  struct Expected {
    std::string name;
    Tensor v;
  };
  std::vector<Expected> expect;
  for (auto& p : m.parameters()) {
    if (!p.perturbable) continue;
    float gnorm = l2_norm(*p.grad);
    float scale = spec.gamma * l2_norm(*p.value) / gnorm;
    Expected e{p.name, Tensor(p.value->shape)};
    for (int64_t i = 0; i < e.v.numel(); ++i) e.v[i] = scale * (*p.grad)[i];
    expect.push_back(std::move(e));
  }

  m.zero_grad();
  WeightPerturbation wp = generate_wp(m, x, y, spec);
  REQUIRE(wp.entries.size() == expect.size());
  for (size_t l = 0; l < expect.size(); ++l) {
    CHECK(wp.entries[l].name == expect[l].name);
    for (int64_t i = 0; i < expect[l].v.numel(); ++i)
      CHECK(wp.entries[l].v[i] == doctest::Approx(expect[l].v[i]).epsilon(1e-5));
  }
}

TEST_CASE("per-layer norm constraint holds for multi-step ascent") {
  std::mt19937 rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    ModelState m = toy_model(20 + static_cast<uint64_t>(trial));
    Tensor x = random_inputs(5, rng);
    std::vector<int> y = {0, 1, 2, 1, 0};
    WPSpec spec;
    spec.gamma = 0.05f;
    spec.l_min = 100.0f;
    spec.steps = 3;
    WeightPerturbation wp = generate_wp(m, x, y, spec);
    for (auto& p : m.parameters()) {
      if (!p.perturbable) continue;
      float radius = spec.gamma * l2_norm(*p.value);
      CHECK(wp.layer_norm(p.name) <= radius * (1.0f + 1e-6f));
    }
  }
}

TEST_CASE("perturbation ascends the masked loss in most random trials") {
  std::mt19937 rng(31);
  int positive = 0, total = 0;
  for (int trial = 0; trial < 100; ++trial) {
    ModelState m = toy_model(100 + static_cast<uint64_t>(trial));
    Tensor x = random_inputs(6, rng);
    std::uniform_int_distribution<int> lab(0, 2);
    std::vector<int> y;
    for (int i = 0; i < 6; ++i) y.push_back(lab(rng));
    WPSpec spec;
    spec.gamma = 0.02f;
    spec.l_min = 100.0f;
    WeightPerturbation wp = generate_wp(m, x, y, spec);
    if (wp.is_zero()) continue;
    double base = masked_loss(m, x, y, spec.l_min);
    apply_wp(m, wp);
    double up = masked_loss(m, x, y, spec.l_min);
    restore_wp(m, wp);
    ++total;
    if (up > base) ++positive;
  }
  REQUIRE(total >= 90);
  CHECK(positive >= total * 95 / 100);
}

TEST_CASE("only perturbable parameters receive entries, exclusions respected") {
  ModelState m = build_model("small_cnn", 4, 3);
  std::mt19937 rng(41);
  Tensor x({2, 3, 8, 8});
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (auto& v : x.data) v = d(rng);
  std::vector<int> y = {1, 2};
  WPSpec spec;
  spec.l_min = 100.0f;
  WeightPerturbation wp = generate_wp(m, x, y, spec);
  for (auto& e : wp.entries) {
    CHECK(e.name.find("bn") == std::string::npos);
    CHECK(e.name.find(".bias") == std::string::npos);
  }
  CHECK(!wp.entries.empty());

  WPSpec excl = spec;
  excl.exclude = {"fc"};
  WeightPerturbation wpe = generate_wp(m, x, y, excl);
  for (auto& e : wpe.entries) CHECK(e.name.find("fc") == std::string::npos);
  CHECK(wpe.entries.size() < wp.entries.size());
}

TEST_CASE("apply then restore is an exact identity when parameters do not move") {
  ModelState m = toy_model(51);
  std::mt19937 rng(52);
  Tensor x = random_inputs(4, rng);
  std::vector<int> y = {0, 1, 2, 1};
  WPSpec spec;
  spec.gamma = 0.03f;
  spec.l_min = 100.0f;
  WeightPerturbation wp = generate_wp(m, x, y, spec);
  auto before = snapshot(m);
  apply_wp(m, wp);
  CHECK(snapshot(m) != before);
  restore_wp(m, wp);
  CHECK(snapshot(m) == before);  // bitwise
}

TEST_CASE("restore preserves an optimizer delta taken at the perturbed point") {
  ModelState m = toy_model(61);
  std::mt19937 rng(62);
  Tensor x = random_inputs(4, rng);
  std::vector<int> y = {2, 0, 1, 1};
  WPSpec spec;
  spec.gamma = 0.03f;
  spec.l_min = 100.0f;
  WeightPerturbation wp = generate_wp(m, x, y, spec);

  auto theta0 = snapshot(m);
  apply_wp(m, wp);
  // emulate an sgd update at theta + v
  const float bump = 1e-3f;
  for (auto& p : m.parameters())
    for (auto& v : p.value->data) v += bump;
  restore_wp(m, wp);
  auto after = snapshot(m);
  REQUIRE(after.size() == theta0.size());
  for (size_t i = 0; i < after.size(); ++i)
    CHECK(after[i] == doctest::Approx(theta0[i] + bump).epsilon(1e-6));
}

TEST_CASE("apply/restore protocol misuse raises UsageError") {
  ModelState m = toy_model(71);
  std::mt19937 rng(72);
  Tensor x = random_inputs(2, rng);
  std::vector<int> y = {0, 1};
  WPSpec spec;
  spec.l_min = 100.0f;
  WeightPerturbation wp = generate_wp(m, x, y, spec);
  CHECK_THROWS_AS(restore_wp(m, wp), UsageError);
  apply_wp(m, wp);
  CHECK_THROWS_AS(apply_wp(m, wp), UsageError);
  restore_wp(m, wp);
  CHECK_THROWS_AS(restore_wp(m, wp), UsageError);
}

TEST_CASE("WpScope restores on every exit path") {
  ModelState m = toy_model(81);
  std::mt19937 rng(82);
  Tensor x = random_inputs(3, rng);
  std::vector<int> y = {0, 1, 2};
  WPSpec spec;
  spec.gamma = 0.02f;
  spec.l_min = 100.0f;
  WeightPerturbation wp = generate_wp(m, x, y, spec);
  auto before = snapshot(m);
  try {
    WpScope scope(m, wp);
    CHECK(snapshot(m) != before);
    throw std::runtime_error("boom");
  } catch (const std::runtime_error&) {
  }
  CHECK(snapshot(m) == before);

  // explicit restore inside the scope is also fine
  {
    WpScope scope(m, wp);
    restore_wp(m, wp);
  }
  CHECK(snapshot(m) == before);
}

TEST_CASE("wp spec validation") {
  WPSpec s;
  s.gamma = -0.1f;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.gamma = 0.005f;
  s.steps = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s.steps = 1;
  CHECK_NOTHROW(s.validate());
}

TEST_CASE("batchnorm statistics are untouched by wp generation") {
  ModelState m = build_model("small_cnn", 3, 91);
  std::mt19937 rng(92);
  Tensor x({2, 3, 8, 8});
  std::uniform_real_distribution<float> d(0.0f, 1.0f);
  for (auto& v : x.data) v = d(rng);
  std::vector<int> y = {0, 2};
  std::vector<float> stats;
  for (auto& b : m.buffers()) stats.insert(stats.end(), b.value->data.begin(), b.value->data.end());
  WPSpec spec;
  spec.l_min = 100.0f;
  spec.steps = 2;
  generate_wp(m, x, y, spec);
  std::vector<float> stats_after;
  for (auto& b : m.buffers())
    stats_after.insert(stats_after.end(), b.value->data.begin(), b.value->data.end());
  CHECK(stats == stats_after);
}
