#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "advtrain/errors.hpp"
#include "advtrain/trainer.hpp"

using namespace advtrain;

namespace {

ModelState one_linear(float w, float b) {
  ModelState m;
  m.architecture = "small_cnn";
  m.num_classes = 1;
  auto net = std::make_unique<nn::Sequential>();
  auto fc = std::make_unique<nn::Linear>(1, 1);
  fc->weight[0] = w;
  fc->bias[0] = b;
  net->add("fc", std::move(fc));
  m.net = std::move(net);
  return m;
}

LossParts example_parts() {
  LossParts p;
  p.adv_ce = 1.0f;
  p.adv_te = 0.25f;
  p.helper_ce = 0.5f;
  p.helper_te = 0.125f;
  p.clean_ce = 0.75f;
  p.clean_te = 0.0625f;
  return p;
}

std::string synthetic_config_json(const std::string& method, const std::string& out_dir,
                                  int epochs) {
  bool bs = method == "AT_TE_BS" || method == "MLCAT_WP_TE_BS" || method == "MLCAT_WP_XE_BS";
  bool te = method.find("TE") != std::string::npos && method != "MLCAT_WP_XE_BS";
  bool wp = method.rfind("MLCAT", 0) == 0;
  std::string json = R"({
    "dataset": {"name": "synthetic", "augmentation": "none", "n_train": 48, "n_test": 24,
                "classes": 3, "channels": 3, "height": 8, "width": 8,
                "blob_scale": 0.3, "noise_std": 0.05, "label_noise": 0.0, "gen_seed": 5},
    "model": {"architecture": "small_cnn"},
    "method": ")" + method + R"(",
    "attack": {"epsilon": 0.031, "step_size": 0.008, "steps": 3, "capture_boundary": )" +
                     (bs ? "true" : "false") + R"(},
    "eval_attack": {"epsilon": 0.031, "step_size": 0.008, "steps": 3},)" +
                     (te ? R"(
    "te": {"weight": 30.0, "activation_epoch": 2, "ramp_length": 2, "momentum": 0.9},)" : "") +
                     (wp ? R"(
    "wp": {"gamma": 0.005, "lmin": 1.5, "steps": 1},)" : "") + R"(
    "optim": {"lr": 0.05, "decay_epochs": [], "decay_factor": 0.1,
              "momentum": 0.9, "weight_decay": 0.0005},
    "train": {"epochs": )" + std::to_string(epochs) + R"(, "batch_size": 16, "seed": 3,
              "eval_every": 1, "output_dir": ")" + out_dir + R"(",
              "selection_metric": "robust", "loss_bucket": [0.0, 0.5]}
  })";
  return json;
}

std::vector<float> params_of(ModelState& m) {
  std::vector<float> all;
  for (auto& p : m.parameters()) all.insert(all.end(), p.value->data.begin(), p.value->data.end());
  return all;
}

}  // namespace

TEST_CASE("compose_loss per-method arithmetic") {
  LossParts p = example_parts();
  const float w = 2.0f;
  CHECK(compose_loss(Method::AT, p, w) == doctest::Approx(1.0f));
  CHECK(compose_loss(Method::AT_TE, p, w) == doctest::Approx(1.5f));
  CHECK(compose_loss(Method::MLCAT_WP, p, w) == doctest::Approx(1.0f));
  CHECK(compose_loss(Method::MLCAT_WP_TE, p, w) == doctest::Approx(1.5f));
  CHECK(compose_loss(Method::AT_TE_XEC, p, w) == doctest::Approx(2.25f));
  CHECK(compose_loss(Method::MLCAT_WP_XEC, p, w) == doctest::Approx(1.75f));
  CHECK(compose_loss(Method::AT_TE_BS, p, w) == doctest::Approx(2.25f));
  CHECK(compose_loss(Method::MLCAT_WP_TE_BS, p, w) == doctest::Approx(2.25f));
  CHECK(compose_loss(Method::AT_TE_CS, p, w) == doctest::Approx(2.375f));
  CHECK(compose_loss(Method::MLCAT_WP_TE_CS, p, w) == doctest::Approx(2.375f));
  CHECK(compose_loss(Method::MLCAT_WP_XE_BS, p, w) == doctest::Approx(1.5f));
}

TEST_CASE("compose_loss names the missing part") {
  LossParts p;
  p.adv_ce = 1.0f;
  CHECK_THROWS_AS(compose_loss(Method::AT_TE, p, 2.0f), ConfigError);
  CHECK_THROWS_AS(compose_loss(Method::AT_TE_BS, p, 2.0f), ConfigError);
  // with the penalty disabled, the te parts are not required
  CHECK(compose_loss(Method::AT_TE, p, 0.0f) == doctest::Approx(1.0f));
  CHECK_NOTHROW(compose_loss(Method::AT, p, 2.0f));
}

TEST_CASE("sgd two-step hand-computed trajectory with momentum and weight decay") {
  ModelState m = one_linear(2.0f, 0.5f);
  SgdOptimizer opt(m, 0.9f, 0.1f);
  auto params = m.parameters();
  // step 1: grad_w = 1
  (*params[0].grad)[0] = 1.0f;
  (*params[1].grad)[0] = 0.0f;
  opt.step(0.1f);
  CHECK((*params[0].value)[0] == doctest::Approx(1.88f).epsilon(1e-6));
  CHECK((*params[1].value)[0] == doctest::Approx(0.495f).epsilon(1e-6));
  // step 2: same raw gradient
  (*params[0].grad)[0] = 1.0f;
  opt.step(0.1f);
  // g = 1 + 0.1*1.88 = 1.188; buf = 0.9*1.2 + 1.188 = 2.268; w -= 0.2268
  CHECK((*params[0].value)[0] == doctest::Approx(1.6532f).epsilon(1e-5));
  // bias: g = 0.1*0.495 = 0.0495; buf = 0.9*0.05 + 0.0495; b -= 0.00945
  CHECK((*params[1].value)[0] == doctest::Approx(0.48555f).epsilon(1e-5));
}

TEST_CASE("sgd momentum buffers round trip through an archive") {
  ModelState m = one_linear(1.0f, 0.0f);
  SgdOptimizer opt(m, 0.9f, 0.0f);
  auto params = m.parameters();
  (*params[0].grad)[0] = 0.5f;
  opt.step(0.1f);
  TensorArchive ar;
  opt.pack(ar);

  ModelState m2 = one_linear(1.0f, 0.0f);
  (*m2.parameters()[0].value)[0] = (*params[0].value)[0];
  SgdOptimizer opt2(m2, 0.9f, 0.0f);
  opt2.unpack(ar);
  // same follow-up step must land at the same value
  (*params[0].grad)[0] = 0.25f;
  (*m2.parameters()[0].grad)[0] = 0.25f;
  opt.step(0.1f);
  opt2.step(0.1f);
  CHECK((*m.parameters()[0].value)[0] == (*m2.parameters()[0].value)[0]);
}

TEST_CASE("learning rate schedule decays from the decay epoch inclusive") {
  LrSchedule s;
  s.base_lr = 0.1f;
  s.decay_epochs = {100, 150};
  s.decay_factor = 0.1f;
  CHECK(lr_at(s, 1) == doctest::Approx(0.1f));
  CHECK(lr_at(s, 99) == doctest::Approx(0.1f));
  CHECK(lr_at(s, 100) == doctest::Approx(0.01f));
  CHECK(lr_at(s, 149) == doctest::Approx(0.01f));
  CHECK(lr_at(s, 150) == doctest::Approx(0.001f));
  CHECK(lr_at(s, 200) == doctest::Approx(0.001f));
  CHECK_THROWS_AS(lr_at(s, 0), UsageError);
}

TEST_CASE("AT_TE with zero effective weight reproduces the AT trajectory") {
  DatasetSpec ds;
  ds.name = "synthetic";
  ds.n_train = 32;
  ds.n_test = 8;
  ds.classes = 3;
  ds.channels = 3;
  ds.height = 8;
  ds.width = 8;
  ds.gen_seed = 2;
  DatasetPair data = load_dataset(ds);
  std::vector<int64_t> ids;
  for (int64_t i = 0; i < 16; ++i) ids.push_back(i);
  LabeledBatch batch = data.train.batch(ids);

  MethodSpec at;
  at.method = Method::AT;
  at.attack.steps = 3;

  MethodSpec at_te = at;
  at_te.method = Method::AT_TE;
  at_te.te = RampSchedule{300.0f, 90, 10, 0.9f};

  ModelState m1 = build_model("small_cnn", 3, 11);
  ModelState m2 = build_model("small_cnn", 3, 11);
  SgdOptimizer o1(m1, 0.9f, 5e-4f), o2(m2, 0.9f, 5e-4f);
  EnsembleStore store(32, 3, 0.9f, false);

  TrainStepOptions opts;
  opts.lr = 0.1f;
  opts.w_eff = 0.0f;  // pre-activation
  opts.seed = 77;
  for (int step = 0; step < 3; ++step) {
    train_step(m1, o1, nullptr, at, batch, opts);
    train_step(m2, o2, &store, at_te, batch, opts);
  }
  auto p1 = params_of(m1), p2 = params_of(m2);
  REQUIRE(p1.size() == p2.size());
  float max_diff = 0;
  for (size_t i = 0; i < p1.size(); ++i) max_diff = std::max(max_diff, std::abs(p1[i] - p2[i]));
  CHECK(max_diff <= 1e-6f);
}

TEST_CASE("MLCAT_WP with gamma zero reproduces the AT trajectory") {
  DatasetSpec ds;
  ds.name = "synthetic";
  ds.n_train = 32;
  ds.n_test = 8;
  ds.classes = 3;
  ds.channels = 3;
  ds.height = 8;
  ds.width = 8;
  ds.gen_seed = 4;
  DatasetPair data = load_dataset(ds);
  std::vector<int64_t> ids;
  for (int64_t i = 0; i < 16; ++i) ids.push_back(i);
  LabeledBatch batch = data.train.batch(ids);

  MethodSpec at;
  at.method = Method::AT;
  at.attack.steps = 2;
  MethodSpec ml = at;
  ml.method = Method::MLCAT_WP;
  ml.wp = WPSpec{};
  ml.wp->gamma = 0.0f;

  ModelState m1 = build_model("small_cnn", 3, 13);
  ModelState m2 = build_model("small_cnn", 3, 13);
  SgdOptimizer o1(m1, 0.9f, 5e-4f), o2(m2, 0.9f, 5e-4f);
  TrainStepOptions opts;
  opts.lr = 0.1f;
  opts.seed = 5;
  for (int step = 0; step < 2; ++step) {
    train_step(m1, o1, nullptr, at, batch, opts);
    train_step(m2, o2, nullptr, ml, batch, opts);
  }
  CHECK(params_of(m1) == params_of(m2));
}

TEST_CASE("train_step returns coherent metrics and respects the method plan") {
  DatasetSpec ds;
  ds.name = "synthetic";
  ds.n_train = 24;
  ds.n_test = 8;
  ds.classes = 3;
  ds.channels = 3;
  ds.height = 8;
  ds.width = 8;
  ds.gen_seed = 6;
  DatasetPair data = load_dataset(ds);
  std::vector<int64_t> ids;
  for (int64_t i = 0; i < 12; ++i) ids.push_back(i);
  LabeledBatch batch = data.train.batch(ids);

  MethodSpec spec;
  spec.method = Method::MLCAT_WP_TE_BS;
  spec.attack.steps = 3;
  spec.attack.capture_boundary = true;
  spec.te = RampSchedule{30.0f, 1, 1, 0.9f};
  spec.wp = WPSpec{};
  spec.wp->l_min = 10.0f;

  ModelState m = build_model("small_cnn", 3, 19);
  SgdOptimizer opt(m, 0.9f, 5e-4f);
  EnsembleStore store(24, 3, 0.9f, true);

  TrainStepOptions opts;
  opts.lr = 0.05f;
  opts.w_eff = 30.0f;
  opts.seed = 9;

  // first sweep: store empty, penalty silently disabled
  StepMetrics sm = train_step(m, opt, &store, spec, batch, opts);
  CHECK(sm.parts.adv_ce.has_value());
  CHECK(sm.parts.helper_ce.has_value());
  CHECK(!sm.parts.clean_ce.has_value());
  CHECK(sm.adv_losses.size() == 12);
  CHECK(sm.capture_step.size() == 12);
  CHECK(store.update_count(Track::clean) == 0);  // end_epoch is the trainer's call

  store.end_epoch(Track::clean);
  store.end_epoch(Track::boundary);
  StepMetrics sm2 = train_step(m, opt, &store, spec, batch, opts);
  REQUIRE(sm2.parts.adv_te.has_value());
  REQUIRE(sm2.parts.helper_te.has_value());
  float expect = *sm2.parts.adv_ce + 30.0f * *sm2.parts.adv_te + *sm2.parts.helper_ce +
                 30.0f * *sm2.parts.helper_te;
  CHECK(sm2.loss == doctest::Approx(expect).epsilon(1e-5));
}

TEST_CASE("separate and concatenated helper passes both train stably") {
  for (bool separate : {false, true}) {
    std::string dir = separate ? "tmp_trainer_sep" : "tmp_trainer_cat";
    ExperimentConfig cfg =
        ExperimentConfig::from_json_text(synthetic_config_json("AT_TE_BS", dir, 2));
    cfg.separate_helper_pass = separate;
    TrainResult r = run_training(cfg);
    CHECK(r.completed_epochs == 2);
    CHECK(r.metrics.size() == 2);
    for (auto& m : r.metrics) CHECK(std::isfinite(m.train_adv_loss));
    std::filesystem::remove_all(dir);
  }
}

TEST_CASE("run_training writes a metrics log and coherent best/last records") {
  ExperimentConfig cfg =
      ExperimentConfig::from_json_text(synthetic_config_json("AT", "tmp_trainer_run", 3));
  TrainResult r = run_training(cfg);
  CHECK(r.completed_epochs == 3);
  CHECK(std::filesystem::exists("tmp_trainer_run/last.ckpt"));
  CHECK(std::filesystem::exists("tmp_trainer_run/best.ckpt"));

  std::ifstream in("tmp_trainer_run/metrics.jsonl");
  int lines = 0;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) {
      EpochMetrics m = EpochMetrics::from_json_line(line);
      CHECK(m.epoch == ++lines);
      m.validate();
    }
  CHECK(lines == 3);

  CHECK(r.by_robust.last_epoch == 3);
  CHECK(r.by_robust.best_epoch >= 1);
  CHECK(r.by_robust.best_robust >= r.by_robust.last_robust);
  CHECK(r.by_clean.best_clean >= r.by_clean.last_clean);
  std::filesystem::remove_all("tmp_trainer_run");
}

TEST_CASE("eval_every skips evaluation but carries the last known accuracy") {
  ExperimentConfig cfg =
      ExperimentConfig::from_json_text(synthetic_config_json("AT", "tmp_trainer_cadence", 4));
  cfg.eval_every = 2;
  TrainResult r = run_training(cfg);
  REQUIRE(r.metrics.size() == 4);
  CHECK(r.metrics[0].clean_acc == 0.0);  // epoch 1 not evaluated, nothing to carry
  CHECK(r.metrics[2].clean_acc == r.metrics[1].clean_acc);  // epoch 3 carries epoch 2
  CHECK(r.by_robust.last_epoch == 4);
  std::filesystem::remove_all("tmp_trainer_cadence");
}

TEST_CASE("resumed training is bit-identical to uninterrupted training") {
  for (const char* method : {"AT", "MLCAT_WP_TE_BS"}) {
    std::string full_dir = std::string("tmp_resume_full_") + method;
    std::string part_dir = std::string("tmp_resume_part_") + method;
    ExperimentConfig full = ExperimentConfig::from_json_text(synthetic_config_json(method, full_dir, 4));
    run_training(full);

    ExperimentConfig part = ExperimentConfig::from_json_text(synthetic_config_json(method, part_dir, 2));
    run_training(part);
    ExperimentConfig cont = ExperimentConfig::from_json_text(synthetic_config_json(method, part_dir, 4));
    cont.resume = true;
    run_training(cont);

    std::ifstream a(full_dir + "/last.ckpt", std::ios::binary);
    std::ifstream b(part_dir + "/last.ckpt", std::ios::binary);
    std::string da((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string db((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(da == db);
    std::filesystem::remove_all(full_dir);
    std::filesystem::remove_all(part_dir);
  }
}

TEST_CASE("dump_attacks writes per-batch archives within budget") {
  ExperimentConfig cfg =
      ExperimentConfig::from_json_text(synthetic_config_json("AT_TE_BS", "tmp_trainer_dump", 1));
  cfg.dump_attacks = true;
  run_training(cfg);
  int dumps = 0;
  for (auto& e : std::filesystem::directory_iterator("tmp_trainer_dump/attack_dumps")) {
    TensorArchive ar = TensorArchive::load(e.path().string());
    CHECK(ar.tensors.count("x"));
    CHECK(ar.tensors.count("x_adv"));
    CHECK(ar.tensors.count("x_boundary"));
    CHECK(ar.tensors.count("capture_step"));
    ++dumps;
  }
  CHECK(dumps == 3);  // 48 samples / batch 16
  std::filesystem::remove_all("tmp_trainer_dump");
}
