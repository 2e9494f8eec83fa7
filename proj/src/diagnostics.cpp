#include "advtrain/diagnostics.hpp"

#include <nlohmann/json.hpp>

#include "advtrain/errors.hpp"
#include "advtrain/rng.hpp"

namespace advtrain {

using nlohmann::json;

std::string EpochMetrics::to_json_line() const {
  json j;
  j["epoch"] = epoch;
  j["clean_acc"] = clean_acc;
  j["robust_acc"] = robust_acc;
  j["train_avg_tcp"] = train_avg_tcp;
  j["train_avg_tcp_small_loss"] = train_avg_tcp_small_loss;
  j["small_loss_proportion"] = small_loss_proportion;
  j["loss_bucket_edges"] = {bucket_lo, bucket_hi};
  j["lr"] = lr;
  j["te_weight_effective"] = te_weight_effective;
  j["train_adv_loss"] = train_adv_loss;
  j["train_robust_acc"] = train_robust_acc;
  return j.dump();
}

EpochMetrics EpochMetrics::from_json_line(const std::string& line) {
  json j = json::parse(line);
  EpochMetrics m;
  m.epoch = j.at("epoch").get<int>();
  m.clean_acc = j.at("clean_acc").get<double>();
  m.robust_acc = j.at("robust_acc").get<double>();
  m.train_avg_tcp = j.at("train_avg_tcp").get<double>();
  m.train_avg_tcp_small_loss = j.at("train_avg_tcp_small_loss").get<double>();
  m.small_loss_proportion = j.at("small_loss_proportion").get<double>();
  m.bucket_lo = j.at("loss_bucket_edges").at(0).get<double>();
  m.bucket_hi = j.at("loss_bucket_edges").at(1).get<double>();
  m.lr = j.at("lr").get<double>();
  m.te_weight_effective = j.at("te_weight_effective").get<double>();
  m.train_adv_loss = j.at("train_adv_loss").get<double>();
  m.train_robust_acc = j.at("train_robust_acc").get<double>();
  return m;
}

void EpochMetrics::validate() const {
  auto frac = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!frac(clean_acc) || !frac(robust_acc) || !frac(train_avg_tcp) ||
      !frac(train_avg_tcp_small_loss) || !frac(small_loss_proportion))
    throw UsageError("epoch metrics fraction out of [0,1]");
}

TcpResult true_class_prob(const PredictionBatch& predictions, const std::vector<int>& labels) {
  int64_t b = predictions.size(), y = predictions.classes();
  if (static_cast<int64_t>(labels.size()) != b) throw InputError("labels size mismatch");
  TcpResult r;
  r.per_sample.resize(static_cast<size_t>(b));
  double s = 0.0;
  for (int64_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= y) throw InputError("label out of range");
    float v = predictions.probs[i * y + labels[i]];
    r.per_sample[static_cast<size_t>(i)] = v;
    s += v;
  }
  r.mean = b > 0 ? s / static_cast<double>(b) : 0.0;
  return r;
}

BucketStats loss_bucket_stats(const std::vector<float>& per_sample_losses,
                              const std::vector<float>& per_sample_tcp, double lo, double hi) {
  if (!(lo < hi)) throw UsageError("loss bucket requires lo < hi");
  if (per_sample_losses.size() != per_sample_tcp.size())
    throw InputError("loss/tcp size mismatch");
  BucketStats s;
  if (per_sample_losses.empty()) return s;
  int64_t in = 0;
  double tcp_sum = 0.0;
  for (size_t i = 0; i < per_sample_losses.size(); ++i) {
    double l = per_sample_losses[i];
    if (l >= lo && l < hi) {
      ++in;
      tcp_sum += per_sample_tcp[i];
    }
  }
  s.proportion = static_cast<double>(in) / static_cast<double>(per_sample_losses.size());
  s.empty = in == 0;
  s.mean_tcp = in > 0 ? tcp_sum / static_cast<double>(in) : 0.0;
  return s;
}

BucketStats loss_bucket_stats(const std::vector<float>& per_sample_losses,
                              const std::vector<int>& labels, const PredictionBatch& predictions,
                              double lo, double hi) {
  TcpResult tcp = true_class_prob(predictions, labels);
  return loss_bucket_stats(per_sample_losses, tcp.per_sample, lo, hi);
}

EvalResult evaluate(ModelState& model, const Dataset& test, const AttackSpec& eval_attack,
                    int batch_size, uint64_t seed) {
  ModelClassifier clf(model);
  int64_t n = test.count;
  int64_t clean_hits = 0, robust_hits = 0;
  AttackSpec spec = eval_attack;
  spec.capture_boundary = false;
  int64_t batch_index = 0;
  for (int64_t start = 0; start < n; start += batch_size, ++batch_index) {
    std::vector<int64_t> ids;
    for (int64_t i = start; i < std::min(n, start + batch_size); ++i) ids.push_back(i);
    LabeledBatch batch = test.batch(ids);
    PredictionBatch clean = clf.predict(batch.inputs);
    for (int64_t i = 0; i < clean.size(); ++i)
      if (clean.argmax_row(i) == batch.labels[static_cast<size_t>(i)]) ++clean_hits;
    AttackOutcome adv = pgd_attack(clf, batch, spec, mix_seed(seed, static_cast<uint64_t>(batch_index)));
    PredictionBatch robust = clf.predict(adv.adversarial);
    for (int64_t i = 0; i < robust.size(); ++i)
      if (robust.argmax_row(i) == batch.labels[static_cast<size_t>(i)]) ++robust_hits;
  }
  EvalResult r;
  if (n > 0) {
    r.clean_acc = static_cast<double>(clean_hits) / static_cast<double>(n);
    r.robust_acc = static_cast<double>(robust_hits) / static_cast<double>(n);
  }
  return r;
}

void update_best_last(BestLastRecord& record, const EpochMetrics& metrics) {
  if (metrics.epoch <= record.last_epoch)
    throw UsageError("update_best_last: epochs must arrive in increasing order");
  record.last_epoch = metrics.epoch;
  record.last_clean = metrics.clean_acc;
  record.last_robust = metrics.robust_acc;
  double candidate = record.selection_metric == "clean" ? metrics.clean_acc : metrics.robust_acc;
  double incumbent = record.selection_metric == "clean" ? record.best_clean : record.best_robust;
  if (record.best_epoch < 0 || candidate > incumbent) {
    record.best_epoch = metrics.epoch;
    record.best_clean = metrics.clean_acc;
    record.best_robust = metrics.robust_acc;
  }
}

void DiagnosticsAccumulator::add(const std::vector<float>& adv_losses,
                                 const std::vector<float>& adv_tcp,
                                 const std::vector<int>& correct_flags) {
  if (adv_losses.size() != adv_tcp.size() || adv_losses.size() != correct_flags.size())
    throw InputError("diagnostics accumulator size mismatch");
  for (size_t i = 0; i < adv_losses.size(); ++i) {
    ++n_;
    sum_tcp_ += adv_tcp[i];
    sum_loss_ += adv_losses[i];
    n_correct_ += correct_flags[i] ? 1 : 0;
    double l = adv_losses[i];
    if (l >= lo_ && l < hi_) {
      ++n_bucket_;
      sum_tcp_bucket_ += adv_tcp[i];
    }
  }
}

void DiagnosticsAccumulator::fill(EpochMetrics& m) const {
  m.bucket_lo = lo_;
  m.bucket_hi = hi_;
  if (n_ == 0) return;
  m.train_avg_tcp = sum_tcp_ / static_cast<double>(n_);
  m.small_loss_proportion = static_cast<double>(n_bucket_) / static_cast<double>(n_);
  m.train_avg_tcp_small_loss = n_bucket_ > 0 ? sum_tcp_bucket_ / static_cast<double>(n_bucket_) : 0.0;
  m.train_adv_loss = sum_loss_ / static_cast<double>(n_);
  m.train_robust_acc = static_cast<double>(n_correct_) / static_cast<double>(n_);
}

}  // namespace advtrain
