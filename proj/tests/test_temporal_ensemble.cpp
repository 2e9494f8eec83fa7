#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <random>

#include "advtrain/ensemble.hpp"
#include "advtrain/errors.hpp"

using namespace advtrain;

namespace {

PredictionBatch random_probs(int64_t b, int64_t y, std::mt19937& rng) {
  std::uniform_real_distribution<float> d(-2.0f, 2.0f);
  PredictionBatch p;
  p.logits = Tensor({b, y});
  for (auto& v : p.logits.data) v = d(rng);
  softmax_rows(p.logits, p.probs);
  return p;
}

}  // namespace

TEST_CASE("ema matches brute-force convex recomputation over 50-epoch histories") {
  const int64_t n = 7, y = 4;
  const float eta = 0.9f;
  std::mt19937 rng(101);
  EnsembleStore store(n, y, eta, false);
  // oracle: z_t = eta z_{t-1} + (1-eta) p_t, accumulated in double
  std::vector<double> oracle(static_cast<size_t>(n * y), 0.0);

  std::vector<int64_t> ids(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) ids[static_cast<size_t>(i)] = i;

  for (int epoch = 1; epoch <= 50; ++epoch) {
    PredictionBatch p = random_probs(n, y, rng);
    store.update(Track::clean, ids, p);
    for (int64_t k = 0; k < n * y; ++k)
      oracle[static_cast<size_t>(k)] = eta * oracle[static_cast<size_t>(k)] +
                                       (1.0 - eta) * static_cast<double>(p.probs[k]);
    store.end_epoch(Track::clean);

    Tensor zhat = store.normalized(Track::clean, ids);
    double denom = 1.0 - std::pow(static_cast<double>(eta), epoch);
    for (int64_t k = 0; k < n * y; ++k)
      CHECK(std::abs(zhat[k] - oracle[static_cast<size_t>(k)] / denom) <= 1e-6);
  }
}

TEST_CASE("normalized rows lie on the probability simplex") {
  const int64_t n = 16, y = 5;
  std::mt19937 rng(7);
  EnsembleStore store(n, y, 0.9f, false);
  std::vector<int64_t> ids;
  for (int64_t i = 0; i < n; ++i) ids.push_back(i);
  for (int epoch = 0; epoch < 12; ++epoch) {
    store.update(Track::clean, ids, random_probs(n, y, rng));
    store.end_epoch(Track::clean);
  }
  Tensor zhat = store.normalized(Track::clean, ids);
  for (int64_t i = 0; i < n; ++i) {
    double s = 0;
    for (int64_t j = 0; j < y; ++j) {
      CHECK(zhat[i * y + j] >= -1e-5f);
      s += zhat[i * y + j];
    }
    CHECK(std::abs(s - 1.0) <= 1e-5);
  }
}

TEST_CASE("normalized before the first completed sweep is an error") {
  EnsembleStore store(4, 3, 0.9f, false);
  std::mt19937 rng(3);
  std::vector<int64_t> ids = {0, 1, 2, 3};
  store.update(Track::clean, ids, random_probs(4, 3, rng));
  CHECK_THROWS_AS(store.normalized(Track::clean, ids), UsageError);
  store.end_epoch(Track::clean);
  CHECK_NOTHROW(store.normalized(Track::clean, ids));
}

TEST_CASE("boundary track is independent and gated on allocation") {
  std::mt19937 rng(9);
  std::vector<int64_t> ids = {0, 1};

  EnsembleStore no_boundary(2, 3, 0.9f, false);
  CHECK_THROWS_AS(no_boundary.update(Track::boundary, ids, random_probs(2, 3, rng)), UsageError);
  CHECK_THROWS_AS(no_boundary.end_epoch(Track::boundary), UsageError);

  EnsembleStore store(2, 3, 0.9f, true);
  PredictionBatch pc = random_probs(2, 3, rng);
  PredictionBatch pb = random_probs(2, 3, rng);
  store.update(Track::clean, ids, pc);
  store.update(Track::boundary, ids, pb);
  store.end_epoch(Track::clean);
  store.end_epoch(Track::boundary);
  Tensor zc = store.normalized(Track::clean, ids);
  Tensor zb = store.normalized(Track::boundary, ids);
  for (int64_t k = 0; k < 6; ++k) {
    CHECK(zc[k] == doctest::Approx(pc.probs[k]).epsilon(1e-6));
    CHECK(zb[k] == doctest::Approx(pb.probs[k]).epsilon(1e-6));
  }
}

TEST_CASE("update validates ids and class counts") {
  EnsembleStore store(3, 4, 0.9f, false);
  std::mt19937 rng(5);
  CHECK_THROWS_AS(store.update(Track::clean, {0, 3}, random_probs(2, 4, rng)), InputError);
  CHECK_THROWS_AS(store.update(Track::clean, {0}, random_probs(2, 4, rng)), InputError);
  CHECK_THROWS_AS(store.update(Track::clean, {0, 1}, random_probs(2, 3, rng)), InputError);
  CHECK_THROWS(EnsembleStore(3, 4, 1.0f, false));
}

TEST_CASE("store pack/unpack round trips bit exactly") {
  std::mt19937 rng(21);
  EnsembleStore store(5, 3, 0.85f, true);
  std::vector<int64_t> ids = {0, 1, 2, 3, 4};
  for (int e = 0; e < 4; ++e) {
    store.update(Track::clean, ids, random_probs(5, 3, rng));
    store.update(Track::boundary, ids, random_probs(5, 3, rng));
    store.end_epoch(Track::clean);
    store.end_epoch(Track::boundary);
  }
  TensorArchive ar;
  store.pack(ar);
  ar.save("ensemble_roundtrip.ckpt");
  EnsembleStore back = EnsembleStore::unpack(TensorArchive::load("ensemble_roundtrip.ckpt"));
  CHECK(back.momentum() == store.momentum());
  CHECK(back.update_count(Track::clean) == 4);
  CHECK(back.update_count(Track::boundary) == 4);
  CHECK(back.raw(Track::clean).data == store.raw(Track::clean).data);
  CHECK(back.raw(Track::boundary).data == store.raw(Track::boundary).data);
  std::remove("ensemble_roundtrip.ckpt");
}

TEST_CASE("ramp weight hand values") {
  RampSchedule s;
  s.base_weight = 300.0f;
  s.activation_epoch = 90;
  s.ramp_length = 10;
  CHECK(ramp_weight(s, 1) == 0.0f);
  CHECK(ramp_weight(s, 89) == 0.0f);
  // epoch 90: tau = 1/10, w = 300 exp(-5 * 0.81)
  CHECK(ramp_weight(s, 90) == doctest::Approx(300.0 * std::exp(-5.0 * 0.81)).epsilon(1e-5));
  // epoch 94: tau = 5/10, w = 300 exp(-5 * 0.25)
  CHECK(ramp_weight(s, 94) == doctest::Approx(300.0 * std::exp(-1.25)).epsilon(1e-5));
  // epoch 99: tau = 1, full weight; stays there afterwards
  CHECK(ramp_weight(s, 99) == doctest::Approx(300.0).epsilon(1e-6));
  CHECK(ramp_weight(s, 150) == doctest::Approx(300.0).epsilon(1e-6));
}

TEST_CASE("te penalty closed form and shape checks") {
  PredictionBatch p;
  p.logits = Tensor({1, 2});
  p.probs = Tensor({1, 2});
  p.probs[0] = 0.8f;
  p.probs[1] = 0.2f;
  Tensor z({1, 2});
  z[0] = 0.5f;
  z[1] = 0.5f;
  auto pen = te_penalty(p, z);
  CHECK(pen[0] == doctest::Approx(0.09 + 0.09).epsilon(1e-6));
  Tensor wrong({2, 2});
  CHECK_THROWS_AS(te_penalty(p, wrong), InputError);
}

TEST_CASE("te penalty logit gradient matches finite differences, z_hat constant") {
  std::mt19937 rng(77);
  std::uniform_real_distribution<float> d(-1.5f, 1.5f);
  for (int trial = 0; trial < 20; ++trial) {
    const int64_t y = 4;
    Tensor logits({1, y});
    for (auto& v : logits.data) v = d(rng);
    Tensor z({1, y});
    float zs = 0;
    for (auto& v : z.data) {
      v = std::abs(d(rng)) + 0.05f;
      zs += v;
    }
    for (auto& v : z.data) v /= zs;

    PredictionBatch p;
    p.logits = logits;
    softmax_rows(p.logits, p.probs);
    Tensor g = te_penalty_logit_grad(p, z);

    const double h = 1e-4;
    for (int64_t k = 0; k < y; ++k) {
      PredictionBatch up, dn;
      up.logits = logits;
      up.logits[k] += static_cast<float>(h);
      softmax_rows(up.logits, up.probs);
      dn.logits = logits;
      dn.logits[k] -= static_cast<float>(h);
      softmax_rows(dn.logits, dn.probs);
      double fd = (te_penalty(up, z)[0] - te_penalty(dn, z)[0]) / (2.0 * h);
      CHECK(std::abs(fd - g[k]) <= 5e-3 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("gradient flows only into p, never into the stored ensemble") {
  // te_penalty_logit_grad of a perfectly matching prediction is zero: no
  // force is exerted once p equals z_hat, confirming z_hat enters as a
  // constant target rather than a second differentiable argument.
  PredictionBatch p;
  p.logits = Tensor({1, 3});
  p.logits[0] = 0.3f;
  p.logits[1] = -0.1f;
  p.logits[2] = 0.8f;
  softmax_rows(p.logits, p.probs);
  Tensor z = p.probs;
  Tensor g = te_penalty_logit_grad(p, z);
  for (int64_t k = 0; k < 3; ++k) CHECK(std::abs(g[k]) <= 1e-7f);
}
