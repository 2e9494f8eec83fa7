#include "advtrain/trainer.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

#include "advtrain/attack.hpp"
#include "advtrain/errors.hpp"
#include "advtrain/rng.hpp"

namespace advtrain {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

SgdOptimizer::SgdOptimizer(ModelState& model, float momentum, float weight_decay)
    : model_(model), momentum_(momentum), weight_decay_(weight_decay) {}

void SgdOptimizer::step(float lr) {
  auto params = model_.parameters();
  if (buffers_.empty()) {
    buffers_.reserve(params.size());
    for (auto& p : params) buffers_.emplace_back(p.name, Tensor(p.value->shape));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (buffers_[i].first != p.name) throw UsageError("optimizer/model parameter order changed");
    Tensor& buf = buffers_[i].second;
    for (int64_t k = 0; k < p.value->numel(); ++k) {
      float g = (*p.grad)[k] + weight_decay_ * (*p.value)[k];
      buf[k] = momentum_ * buf[k] + g;
      (*p.value)[k] -= lr * buf[k];
    }
  }
}

void SgdOptimizer::pack(TensorArchive& ar) const {
  for (auto& [name, buf] : buffers_) ar.tensors["momentum/" + name] = buf;
}

void SgdOptimizer::unpack(const TensorArchive& ar) {
  buffers_.clear();
  for (auto& p : model_.parameters()) {
    auto it = ar.tensors.find("momentum/" + p.name);
    buffers_.emplace_back(p.name, it != ar.tensors.end() ? it->second : Tensor(p.value->shape));
  }
}

// ---------------------------------------------------------------------------
// Loss composition
// ---------------------------------------------------------------------------

namespace {

struct SegmentPlan {
  bool use = false;
  float ce_coef = 0.0f;
  float te_coef = 0.0f;  // multiplied by w_eff already
  bool te_uses_boundary_track = false;
};

struct MethodPlan {
  SegmentPlan adv, helper, clean;
};

MethodPlan plan_for(Method method, float w_eff) {
  MethodPlan p;
  p.adv.use = true;
  p.adv.ce_coef = 1.0f;
  if (method_uses_te(method)) p.adv.te_coef = w_eff;
  if (method_uses_helper(method)) {
    p.helper.use = true;
    p.helper.ce_coef = 1.0f;
    if (method_uses_boundary_track(method)) {
      p.helper.te_coef = w_eff;
      p.helper.te_uses_boundary_track = true;
    }
  }
  if (method_uses_clean(method)) {
    p.clean.use = true;
    p.clean.ce_coef = 1.0f;
    if (method == Method::AT_TE_CS || method == Method::MLCAT_WP_TE_CS)
      p.clean.te_coef = w_eff;
  }
  return p;
}

float require_part(const std::optional<float>& v, const char* name, Method m) {
  if (!v)
    throw ConfigError(std::string("compose_loss: method ") + method_name(m) +
                      " requires part " + name);
  return *v;
}

}  // namespace

float compose_loss(Method method, const LossParts& parts, float w_eff) {
  MethodPlan plan = plan_for(method, w_eff);
  float total = 0.0f;
  if (plan.adv.use) {
    total += plan.adv.ce_coef * require_part(parts.adv_ce, "adv_ce", method);
    if (plan.adv.te_coef != 0.0f)
      total += plan.adv.te_coef * require_part(parts.adv_te, "adv_te", method);
  }
  if (plan.helper.use) {
    total += plan.helper.ce_coef * require_part(parts.helper_ce, "helper_ce", method);
    if (plan.helper.te_coef != 0.0f)
      total += plan.helper.te_coef * require_part(parts.helper_te, "helper_te", method);
  }
  if (plan.clean.use) {
    total += plan.clean.ce_coef * require_part(parts.clean_ce, "clean_ce", method);
    if (plan.clean.te_coef != 0.0f)
      total += plan.clean.te_coef * require_part(parts.clean_te, "clean_te", method);
  }
  return total;
}

// ---------------------------------------------------------------------------
// train_step
// ---------------------------------------------------------------------------

namespace {

float mean_of(const std::vector<float>& v) {
  if (v.empty()) return 0.0f;
  double s = std::accumulate(v.begin(), v.end(), 0.0);
  return static_cast<float>(s / v.size());
}

PredictionBatch slice_rows(const PredictionBatch& p, int64_t start, int64_t count) {
  int64_t y = p.classes();
  PredictionBatch out;
  out.logits = Tensor({count, y});
  out.probs = Tensor({count, y});
  std::copy(p.logits.ptr() + start * y, p.logits.ptr() + (start + count) * y, out.logits.ptr());
  std::copy(p.probs.ptr() + start * y, p.probs.ptr() + (start + count) * y, out.probs.ptr());
  return out;
}

// Gradient of (ce_coef * CE + te_coef * ||p - zhat||^2) summed over the
// segment, scaled by inv_batch.
Tensor segment_logit_grad(const PredictionBatch& pred, const std::vector<int>& labels,
                          const SegmentPlan& plan, const Tensor* z_hat, float inv_batch) {
  Tensor g = cross_entropy_logit_grad(pred, labels);
  for (auto& v : g.data) v *= plan.ce_coef * inv_batch;
  if (plan.te_coef != 0.0f && z_hat != nullptr) {
    Tensor tg = te_penalty_logit_grad(pred, *z_hat);
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += plan.te_coef * inv_batch * tg[i];
  }
  return g;
}

}  // namespace

StepMetrics train_step(ModelState& model, SgdOptimizer& optimizer, EnsembleStore* store,
                       const MethodSpec& method, const LabeledBatch& batch,
                       const TrainStepOptions& opts) {
  method.validate();
  batch.validate(model.num_classes);
  const Method m = method.method;
  const int64_t B = batch.size();
  const float inv_batch = 1.0f / static_cast<float>(B);

  float w_eff = opts.w_eff;
  if (!method_uses_te(m)) w_eff = 0.0f;
  if (w_eff != 0.0f && (store == nullptr || store->update_count(Track::clean) < 1)) w_eff = 0.0f;

  Tensor zhat_clean, zhat_boundary;
  bool have_boundary_zhat = false;
  if (w_eff != 0.0f) {
    zhat_clean = store->normalized(Track::clean, batch.sample_ids);
    if (method_uses_boundary_track(m) && store->update_count(Track::boundary) >= 1) {
      zhat_boundary = store->normalized(Track::boundary, batch.sample_ids);
      have_boundary_zhat = true;
    }
  }

  // (1) adversarial example generation, with boundary capture for BS methods
  ModelClassifier clf(model);
  AttackObjective aobj;
  if (method.attack_loss == AttackObjective::Mode::composed && w_eff != 0.0f) {
    aobj.mode = AttackObjective::Mode::composed;
    aobj.te_weight = w_eff;
    aobj.z_hat = &zhat_clean;
  }
  AttackOutcome attack = pgd_attack(clf, batch, method.attack, aobj, opts.seed);

  // (2) adversarial weight perturbation from the adversarial losses
  WeightPerturbation wp;
  const bool uses_wp = method_uses_wp(m);
  if (uses_wp) wp = generate_wp(model, attack.adversarial, batch.labels, *method.wp);

  MethodPlan plan = plan_for(m, w_eff);
  if (plan.helper.te_coef != 0.0f && !have_boundary_zhat) plan.helper.te_coef = 0.0f;

  StepMetrics sm;
  PredictionBatch adv_pred, helper_pred, clean_pred;
  {
    // (3)-(6): outer passes and the optimizer update run under theta + v;
    // the scope guarantees restoration on every exit path.
    std::optional<WpScope> scope;
    if (uses_wp) scope.emplace(model, wp);

    model.zero_grad();
    if (!opts.separate_passes) {
      // Single concatenated train-mode pass so normalization statistics see
      // every segment the method trains on.
      int64_t segs = 1 + (plan.helper.use ? 1 : 0) + (plan.clean.use ? 1 : 0);
      std::vector<int64_t> shape = batch.inputs.shape;
      shape[0] = segs * B;
      Tensor cat(shape);
      int64_t row = batch.inputs.numel() / B;
      int64_t off = 0;
      std::copy(attack.adversarial.ptr(), attack.adversarial.ptr() + B * row, cat.ptr());
      off += B * row;
      if (plan.helper.use) {
        std::copy(attack.boundary.ptr(), attack.boundary.ptr() + B * row, cat.ptr() + off);
        off += B * row;
      }
      if (plan.clean.use)
        std::copy(batch.inputs.ptr(), batch.inputs.ptr() + B * row, cat.ptr() + off);

      PredictionBatch all = model.forward(cat, /*train=*/true);
      int64_t y = all.classes();
      adv_pred = slice_rows(all, 0, B);
      int64_t seg_idx = 1;
      if (plan.helper.use) helper_pred = slice_rows(all, seg_idx++ * B, B);
      if (plan.clean.use) clean_pred = slice_rows(all, seg_idx++ * B, B);

      Tensor grad({segs * B, y});
      Tensor g = segment_logit_grad(adv_pred, batch.labels, plan.adv,
                                    plan.adv.te_coef != 0.0f ? &zhat_clean : nullptr, inv_batch);
      std::copy(g.ptr(), g.ptr() + B * y, grad.ptr());
      int64_t goff = B * y;
      if (plan.helper.use) {
        g = segment_logit_grad(helper_pred, batch.labels, plan.helper,
                               plan.helper.te_coef != 0.0f ? &zhat_boundary : nullptr, inv_batch);
        std::copy(g.ptr(), g.ptr() + B * y, grad.ptr() + goff);
        goff += B * y;
      }
      if (plan.clean.use) {
        g = segment_logit_grad(clean_pred, batch.labels, plan.clean,
                               plan.clean.te_coef != 0.0f ? &zhat_clean : nullptr, inv_batch);
        std::copy(g.ptr(), g.ptr() + B * y, grad.ptr() + goff);
      }
      model.backward(grad);
    } else {
      // Separate train-mode passes; each pass backpropagates before the next
      // forward overwrites the cached activations.
      adv_pred = model.forward(attack.adversarial, /*train=*/true);
      model.backward(segment_logit_grad(adv_pred, batch.labels, plan.adv,
                                        plan.adv.te_coef != 0.0f ? &zhat_clean : nullptr,
                                        inv_batch));
      if (plan.helper.use) {
        helper_pred = model.forward(attack.boundary, /*train=*/true);
        model.backward(segment_logit_grad(helper_pred, batch.labels, plan.helper,
                                          plan.helper.te_coef != 0.0f ? &zhat_boundary : nullptr,
                                          inv_batch));
      }
      if (plan.clean.use) {
        clean_pred = model.forward(batch.inputs, /*train=*/true);
        model.backward(segment_logit_grad(clean_pred, batch.labels, plan.clean,
                                          plan.clean.te_coef != 0.0f ? &zhat_clean : nullptr,
                                          inv_batch));
      }
    }

    optimizer.step(opts.lr);
  }  // restore_wp

  // (7) ensemble store updates with the outer-pass predictions
  if (store != nullptr) {
    store->update(Track::clean, batch.sample_ids, adv_pred);
    if (method_uses_boundary_track(m)) store->update(Track::boundary, batch.sample_ids, helper_pred);
  }

  // metrics
  sm.adv_losses = cross_entropy_per_sample(adv_pred, batch.labels);
  TcpResult tcp = true_class_prob(adv_pred, batch.labels);
  sm.adv_tcp = tcp.per_sample;
  sm.adv_correct.resize(static_cast<size_t>(B));
  for (int64_t i = 0; i < B; ++i)
    sm.adv_correct[static_cast<size_t>(i)] =
        adv_pred.argmax_row(i) == batch.labels[static_cast<size_t>(i)] ? 1 : 0;
  sm.capture_step = attack.capture_step;
  sm.fallback = attack.fallback;
  if (opts.keep_attack_tensors) {
    sm.adversarial = attack.adversarial;
    sm.boundary = attack.boundary;
  }

  sm.parts.adv_ce = mean_of(sm.adv_losses);
  if (plan.adv.te_coef != 0.0f) sm.parts.adv_te = mean_of(te_penalty(adv_pred, zhat_clean));
  else if (method_uses_te(m)) sm.parts.adv_te = 0.0f;
  if (plan.helper.use) {
    sm.parts.helper_ce = mean_of(cross_entropy_per_sample(helper_pred, batch.labels));
    if (method_uses_boundary_track(m))
      sm.parts.helper_te =
          plan.helper.te_coef != 0.0f ? mean_of(te_penalty(helper_pred, zhat_boundary)) : 0.0f;
  }
  if (plan.clean.use) {
    sm.parts.clean_ce = mean_of(cross_entropy_per_sample(clean_pred, batch.labels));
    if (m == Method::AT_TE_CS || m == Method::MLCAT_WP_TE_CS)
      sm.parts.clean_te =
          plan.clean.te_coef != 0.0f ? mean_of(te_penalty(clean_pred, zhat_clean)) : 0.0f;
  }
  sm.loss = compose_loss(m, sm.parts, w_eff);

  model.check_finite();
  return sm;
}

// ---------------------------------------------------------------------------
// run_training
// ---------------------------------------------------------------------------

namespace {

constexpr uint64_t kShuffleTag = 0xA110;
constexpr uint64_t kAugmentTag = 0xA116;
constexpr uint64_t kStepTag = 0xA7C0;
constexpr uint64_t kEvalTag = 0xE7A1;
constexpr uint64_t kDiagTag = 0xD1A6;

void pack_record(TensorArchive& ar, const std::string& key, const BestLastRecord& r) {
  ar.meta_num[key + "/best_epoch"] = r.best_epoch;
  ar.meta_num[key + "/best_clean"] = r.best_clean;
  ar.meta_num[key + "/best_robust"] = r.best_robust;
  ar.meta_num[key + "/last_epoch"] = r.last_epoch;
  ar.meta_num[key + "/last_clean"] = r.last_clean;
  ar.meta_num[key + "/last_robust"] = r.last_robust;
}

BestLastRecord unpack_record(const TensorArchive& ar, const std::string& key,
                             const std::string& metric) {
  BestLastRecord r;
  r.selection_metric = metric;
  r.best_epoch = static_cast<int>(ar.num(key + "/best_epoch"));
  r.best_clean = ar.num(key + "/best_clean");
  r.best_robust = ar.num(key + "/best_robust");
  r.last_epoch = static_cast<int>(ar.num(key + "/last_epoch"));
  r.last_clean = ar.num(key + "/last_clean");
  r.last_robust = ar.num(key + "/last_robust");
  return r;
}

// Exact post-epoch diagnostics sweep: re-attacks every training batch against
// the final model of the epoch.
void full_diagnostics(ModelState& model, const Dataset& train, const MethodSpec& method,
                      int batch_size, uint64_t seed, DiagnosticsAccumulator& acc) {
  ModelClassifier clf(model);
  AttackSpec spec = method.attack;
  spec.capture_boundary = false;
  int64_t n = train.count;
  int64_t bi = 0;
  for (int64_t start = 0; start < n; start += batch_size, ++bi) {
    std::vector<int64_t> ids;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) ids.push_back(i);
    LabeledBatch b = train.batch(ids);
    AttackOutcome atk = pgd_attack(clf, b, spec, mix_seed(seed, static_cast<uint64_t>(bi)));
    PredictionBatch pred = clf.predict(atk.adversarial);
    std::vector<float> losses = cross_entropy_per_sample(pred, b.labels);
    TcpResult tcp = true_class_prob(pred, b.labels);
    std::vector<int> correct(ids.size());
    for (size_t i = 0; i < ids.size(); ++i)
      correct[i] = pred.argmax_row(static_cast<int64_t>(i)) == b.labels[i] ? 1 : 0;
    acc.add(losses, tcp.per_sample, correct);
  }
}

}  // namespace

TrainResult run_training(const ExperimentConfig& config) {
  config.validate();
  fs::create_directories(config.output_dir);
  const std::string last_path = config.output_dir + "/last.ckpt";
  const std::string best_path = config.output_dir + "/best.ckpt";
  const std::string metrics_path = config.output_dir + "/metrics.jsonl";

  DatasetPair data = load_dataset(config.dataset);
  if (data.train.classes != config.classes)
    throw ConfigError("dataset class count " + std::to_string(data.train.classes) +
                      " does not match model classes " + std::to_string(config.classes));

  const Method m = config.method.method;
  const bool has_store = method_uses_te(m);

  TrainResult result;
  result.by_robust.selection_metric = "robust";
  result.by_clean.selection_metric = "clean";

  ModelState model;
  EnsembleStore store;
  int start_epoch = 0;

  bool resumed = false;
  if (config.resume && fs::exists(last_path)) {
    TensorArchive ar = TensorArchive::load(last_path);
    model = unpack_model(ar);
    start_epoch = static_cast<int>(ar.num("epoch"));
    result.by_robust = unpack_record(ar, "record/robust", "robust");
    result.by_clean = unpack_record(ar, "record/clean", "clean");
    if (has_store) store = EnsembleStore::unpack(ar);
    resumed = true;
    // keep only the metrics rows this checkpoint has seen
    if (fs::exists(metrics_path)) {
      std::ifstream in(metrics_path);
      std::vector<std::string> keep;
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        EpochMetrics em = EpochMetrics::from_json_line(line);
        if (em.epoch <= start_epoch) {
          keep.push_back(line);
          result.metrics.push_back(em);
        }
      }
      in.close();
      std::ofstream out(metrics_path, std::ios::trunc);
      for (auto& l : keep) out << l << "\n";
    }
  } else {
    model = build_model(config.architecture, config.classes, config.seed);
    if (has_store)
      store = EnsembleStore(data.train.count, config.classes,
                            config.method.te->te_momentum, method_uses_boundary_track(m));
    std::ofstream(metrics_path, std::ios::trunc);
    std::ofstream(config.output_dir + "/config.json", std::ios::trunc)
        << config.to_json_text() << "\n";
  }

  SgdOptimizer optimizer(model, config.optim.momentum, config.optim.weight_decay);
  if (resumed) optimizer.unpack(TensorArchive::load(last_path));

  const std::string aug = config.dataset.effective_augmentation();
  const int64_t n_train = data.train.count;

  for (int epoch = start_epoch + 1; epoch <= config.epochs; ++epoch) {
    float lr = lr_at(config.optim.schedule, epoch);
    float w_eff = 0.0f;
    if (has_store && config.method.te) {
      w_eff = ramp_weight(*config.method.te, epoch);
      if (store.update_count(Track::clean) < 1) w_eff = 0.0f;
    }

    std::vector<int64_t> perm(static_cast<size_t>(n_train));
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 shuffle_rng(mix_seed(config.seed, static_cast<uint64_t>(epoch), kShuffleTag));
    std::shuffle(perm.begin(), perm.end(), shuffle_rng);

    DiagnosticsAccumulator acc(config.bucket_lo, config.bucket_hi);
    int64_t batch_index = 0;
    for (int64_t start = 0; start < n_train; start += config.batch_size, ++batch_index) {
      std::vector<int64_t> ids(perm.begin() + start,
                               perm.begin() + std::min<int64_t>(n_train, start + config.batch_size));
      LabeledBatch batch = data.train.batch(ids);
      batch = augment(batch, aug,
                      mix_seed(config.seed, static_cast<uint64_t>(epoch),
                               static_cast<uint64_t>(batch_index), kAugmentTag));
      TrainStepOptions opts;
      opts.epoch = epoch;
      opts.lr = lr;
      opts.w_eff = w_eff;
      opts.seed = mix_seed(config.seed, static_cast<uint64_t>(epoch),
                           static_cast<uint64_t>(batch_index), kStepTag);
      opts.separate_passes = config.separate_helper_pass;
      opts.keep_attack_tensors = config.dump_attacks;
      StepMetrics sm =
          train_step(model, optimizer, has_store ? &store : nullptr, config.method, batch, opts);
      acc.add(sm.adv_losses, sm.adv_tcp, sm.adv_correct);
      if (config.dump_attacks) {
        fs::create_directories(config.output_dir + "/attack_dumps");
        TensorArchive dump;
        dump.meta_num["epoch"] = epoch;
        dump.meta_num["batch"] = static_cast<double>(batch_index);
        dump.tensors["x"] = batch.inputs;
        dump.tensors["x_adv"] = sm.adversarial;
        if (sm.boundary.numel() > 0) dump.tensors["x_boundary"] = sm.boundary;
        Tensor steps({static_cast<int64_t>(sm.capture_step.size())});
        for (size_t i = 0; i < sm.capture_step.size(); ++i)
          steps[static_cast<int64_t>(i)] = static_cast<float>(sm.capture_step[i]);
        dump.tensors["capture_step"] = steps;
        Tensor ids_t({static_cast<int64_t>(batch.sample_ids.size())});
        for (size_t i = 0; i < batch.sample_ids.size(); ++i)
          ids_t[static_cast<int64_t>(i)] = static_cast<float>(batch.sample_ids[i]);
        dump.tensors["sample_ids"] = ids_t;
        dump.save(config.output_dir + "/attack_dumps/epoch" + std::to_string(epoch) + "_batch" +
                  std::to_string(batch_index) + ".atar");
      }
    }
    if (has_store) {
      store.end_epoch(Track::clean);
      if (method_uses_boundary_track(m)) store.end_epoch(Track::boundary);
    }

    EpochMetrics metrics;
    metrics.epoch = epoch;
    metrics.lr = lr;
    metrics.te_weight_effective = w_eff;
    if (config.full_diagnostics_pass) {
      DiagnosticsAccumulator exact(config.bucket_lo, config.bucket_hi);
      full_diagnostics(model, data.train, config.method, config.batch_size,
                       mix_seed(config.seed, static_cast<uint64_t>(epoch), kDiagTag), exact);
      exact.fill(metrics);
    } else {
      acc.fill(metrics);
    }

    bool evaluated = epoch % config.eval_every == 0 || epoch == config.epochs;
    if (evaluated) {
      EvalResult ev = evaluate(model, data.test, config.eval_attack, config.batch_size,
                               mix_seed(config.seed, static_cast<uint64_t>(epoch), kEvalTag));
      metrics.clean_acc = ev.clean_acc;
      metrics.robust_acc = ev.robust_acc;
      update_best_last(result.by_robust, metrics);
      update_best_last(result.by_clean, metrics);
    } else if (!result.metrics.empty()) {
      metrics.clean_acc = result.metrics.back().clean_acc;
      metrics.robust_acc = result.metrics.back().robust_acc;
    }
    metrics.validate();
    result.metrics.push_back(metrics);
    {
      std::ofstream out(metrics_path, std::ios::app);
      out << metrics.to_json_line() << "\n";
    }

    TensorArchive ar;
    pack_model(ar, model);
    ar.meta_num["epoch"] = epoch;
    optimizer.pack(ar);
    if (has_store) store.pack(ar);
    pack_record(ar, "record/robust", result.by_robust);
    pack_record(ar, "record/clean", result.by_clean);
    ar.meta_str["method"] = method_name(m);
    ar.save(last_path);

    const BestLastRecord& sel =
        config.selection_metric == "clean" ? result.by_clean : result.by_robust;
    if (evaluated && sel.best_epoch == epoch) fs::copy_file(last_path, best_path,
                                                            fs::copy_options::overwrite_existing);
    result.completed_epochs = epoch;
  }

  result.last_checkpoint = last_path;
  result.best_checkpoint = best_path;
  return result;
}

}  // namespace advtrain
