#pragma once

#include <optional>
#include <string>
#include <vector>

#include "advtrain/config.hpp"
#include "advtrain/diagnostics.hpp"
#include "advtrain/ensemble.hpp"
#include "advtrain/model.hpp"
#include "advtrain/weight_perturb.hpp"

namespace advtrain {

// SGD with momentum and coupled weight decay:
//   g = grad + wd * theta;  buf = mu * buf + g;  theta -= lr * buf.
class SgdOptimizer {
 public:
  SgdOptimizer(ModelState& model, float momentum, float weight_decay);

  void step(float lr);

  void pack(TensorArchive& ar) const;
  void unpack(const TensorArchive& ar);

 private:
  ModelState& model_;
  float momentum_, weight_decay_;
  std::vector<std::pair<std::string, Tensor>> buffers_;
};

// Scalar loss parts a method composes. Each value is a batch mean; the *_te
// parts are raw penalties, scaled by the effective ensemble weight here.
struct LossParts {
  std::optional<float> adv_ce;
  std::optional<float> adv_te;
  std::optional<float> helper_ce;
  std::optional<float> helper_te;
  std::optional<float> clean_ce;
  std::optional<float> clean_te;
};

float compose_loss(Method method, const LossParts& parts, float w_eff);

struct StepMetrics {
  float loss = 0.0f;
  LossParts parts;
  std::vector<float> adv_losses;  // per-sample CE on the training adversarial pass
  std::vector<float> adv_tcp;
  std::vector<int> adv_correct;
  std::vector<int> capture_step;
  std::vector<uint8_t> fallback;
  Tensor adversarial;  // filled only when keep_attack_tensors is set
  Tensor boundary;
};

struct TrainStepOptions {
  int epoch = 1;
  float lr = 0.1f;
  float w_eff = 0.0f;       // effective ensemble weight; 0 disables the penalty
  uint64_t seed = 0;        // per-step seed for the attack
  bool separate_passes = false;
  bool keep_attack_tensors = false;  // retain x~ and x' in the metrics for dumping
};

// One batch update of the selected objective: attack, optional weight
// perturbation, outer forward/backward, optimizer step, restore, store update.
StepMetrics train_step(ModelState& model, SgdOptimizer& optimizer, EnsembleStore* store,
                       const MethodSpec& method, const LabeledBatch& batch,
                       const TrainStepOptions& opts);

struct TrainResult {
  BestLastRecord by_robust;
  BestLastRecord by_clean;
  std::vector<EpochMetrics> metrics;
  std::string last_checkpoint;
  std::string best_checkpoint;
  int completed_epochs = 0;
};

// Full training loop with per-epoch evaluation, metrics log, best/last
// checkpoints and lossless resume. Artifacts land in config.output_dir.
TrainResult run_training(const ExperimentConfig& config);

}  // namespace advtrain
