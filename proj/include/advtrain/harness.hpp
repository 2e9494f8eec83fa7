#pragma once

#include <string>
#include <vector>

#include "advtrain/config.hpp"
#include "advtrain/diagnostics.hpp"

namespace advtrain {

// Reads a metrics.jsonl file, skipping blank lines.
std::vector<EpochMetrics> read_metrics_log(const std::string& path);

// evaluate() against the checkpoint named by `which` ("last" or "best"),
// or an explicit checkpoint path.
EvalResult evaluate_checkpoint(const ExperimentConfig& config, const std::string& checkpoint_path);

struct DiagnoseReport {
  int64_t epoch = 0;
  double train_avg_tcp = 0.0;
  double train_avg_tcp_small_loss = 0.0;
  double small_loss_proportion = 0.0;
  double train_adv_loss = 0.0;
  double train_robust_acc = 0.0;
  double clean_acc = 0.0;
  double robust_acc = 0.0;

  std::string to_json_text() const;
};

// Full training-set attack sweep plus a test-set evaluation for one
// checkpoint.
DiagnoseReport diagnose_checkpoint(const ExperimentConfig& config,
                                   const std::string& checkpoint_path);

// Writes <out_prefix>.csv (one row per epoch) and <out_prefix>.svg (accuracy
// curves) from a metrics log.
void plot_metrics(const std::vector<EpochMetrics>& metrics, const std::string& out_prefix);

// Flat weight export for external toolchains. Layout:
//   8-byte magic "ATWX0001"
//   uint64 header length, then that many bytes of JSON:
//     {"architecture": ..., "classes": ..., "tensors":
//       [{"name": ..., "kind": "param"|"buffer", "shape": [...], "offset": N,
//         "count": N}, ...]}
//   raw little-endian float32 payload, tensors in header order, offsets in
//   floats from the start of the payload.
// Bit-exact: export -> import reproduces every value.
void export_weights(const std::string& checkpoint_path, const std::string& out_path);
ModelState import_weights(const std::string& path);

}  // namespace advtrain
