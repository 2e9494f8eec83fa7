#pragma once

#include <string>
#include <vector>

#include "advtrain/attack.hpp"
#include "advtrain/dataset.hpp"
#include "advtrain/model.hpp"

namespace advtrain {

struct EpochMetrics {
  int epoch = 0;
  double clean_acc = 0.0;
  double robust_acc = 0.0;
  double train_avg_tcp = 0.0;
  double train_avg_tcp_small_loss = 0.0;
  double small_loss_proportion = 0.0;
  double bucket_lo = 0.0;
  double bucket_hi = 0.5;
  double lr = 0.0;
  double te_weight_effective = 0.0;
  double train_adv_loss = 0.0;
  double train_robust_acc = 0.0;

  std::string to_json_line() const;
  static EpochMetrics from_json_line(const std::string& line);
  void validate() const;
};

struct BestLastRecord {
  int best_epoch = -1;
  double best_clean = 0.0;
  double best_robust = 0.0;
  int last_epoch = -1;
  double last_clean = 0.0;
  double last_robust = 0.0;
  std::string selection_metric = "robust";  // robust | clean
};

struct TcpResult {
  std::vector<float> per_sample;
  double mean = 0.0;
};

// TCP[i] = p_i[y_i].
TcpResult true_class_prob(const PredictionBatch& predictions, const std::vector<int>& labels);

struct BucketStats {
  double proportion = 0.0;  // |{i : lo <= loss_i < hi}| / N
  double mean_tcp = 0.0;    // 0 when the bucket is empty
  bool empty = true;
};

BucketStats loss_bucket_stats(const std::vector<float>& per_sample_losses,
                              const std::vector<int>& labels, const PredictionBatch& predictions,
                              double lo, double hi);
BucketStats loss_bucket_stats(const std::vector<float>& per_sample_losses,
                              const std::vector<float>& per_sample_tcp, double lo, double hi);

struct EvalResult {
  double clean_acc = 0.0;
  double robust_acc = 0.0;
};

// Clean and PGD-attacked test accuracy. Deterministic under a fixed seed and
// free of parameter/statistics mutation (evaluation-mode forwards only).
EvalResult evaluate(ModelState& model, const Dataset& test, const AttackSpec& eval_attack,
                    int batch_size, uint64_t seed);

// Strict improvement updates best_*, ties keep the earlier epoch; last_* is
// always refreshed. Epochs must arrive in increasing order.
void update_best_last(BestLastRecord& record, const EpochMetrics& metrics);

// Streaming accumulator for training-set diagnostics gathered batch by batch.
class DiagnosticsAccumulator {
 public:
  DiagnosticsAccumulator(double bucket_lo, double bucket_hi)
      : lo_(bucket_lo), hi_(bucket_hi) {}

  void add(const std::vector<float>& adv_losses, const std::vector<float>& adv_tcp,
           const std::vector<int>& correct_flags);
  void fill(EpochMetrics& m) const;

 private:
  double lo_, hi_;
  int64_t n_ = 0;
  int64_t n_bucket_ = 0;
  int64_t n_correct_ = 0;
  double sum_tcp_ = 0.0;
  double sum_tcp_bucket_ = 0.0;
  double sum_loss_ = 0.0;
};

}  // namespace advtrain
