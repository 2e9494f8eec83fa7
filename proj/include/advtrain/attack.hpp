#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "advtrain/model.hpp"
#include "advtrain/tensor.hpp"

namespace advtrain {

struct AttackSpec {
  float epsilon = 8.0f / 255.0f;   // l_inf budget in pixel units
  float step_size = 2.0f / 255.0f; // per-iteration step in pixel units
  int steps = 10;
  std::string norm = "l_inf";
  bool random_start = true;
  bool capture_boundary = false;

  void validate() const;
};

// Loss maximized by the attack. cross_entropy_only is the default; composed
// adds the ensemble-consistency penalty to the inner objective.
struct AttackObjective {
  enum class Mode { cross_entropy_only, composed };
  Mode mode = Mode::cross_entropy_only;
  float te_weight = 0.0f;
  const Tensor* z_hat = nullptr;  // (B, Y) rows, required for composed
};

// Read-only view of a differentiable classifier. The indirection lets tests
// substitute call-counting doubles for cost accounting.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual int64_t num_classes() const = 0;
  // Evaluation-mode forward.
  virtual PredictionBatch predict(const Tensor& inputs) = 0;
  // Evaluation-mode forward plus gradient of the summed attack loss w.r.t.
  // the inputs. One call = one gradient computation.
  virtual std::pair<PredictionBatch, Tensor> loss_input_grad(
      const Tensor& inputs, const std::vector<int>& labels, const AttackObjective& objective) = 0;
};

// Adapts a ModelState. Forward passes run in evaluation-statistics mode so
// attacks never mutate batch-norm state. Parameter gradients accumulated as a
// side effect are the caller's to clear.
class ModelClassifier : public Classifier {
 public:
  explicit ModelClassifier(ModelState& model) : model_(model) {}
  int64_t num_classes() const override { return model_.num_classes; }
  PredictionBatch predict(const Tensor& inputs) override;
  std::pair<PredictionBatch, Tensor> loss_input_grad(const Tensor& inputs,
                                                     const std::vector<int>& labels,
                                                     const AttackObjective& objective) override;

 private:
  ModelState& model_;
};

struct AttackOutcome {
  Tensor adversarial;             // x tilde, final PGD iterate
  Tensor boundary;                // x prime; filled iff capture_boundary
  std::vector<int> capture_step;  // per sample; -1 encodes "none"
  std::vector<uint8_t> fallback;  // 1 iff no iterate was misclassified
};

// Elementwise clamp of candidate to [anchor - eps, anchor + eps], then [0,1].
Tensor project(const Tensor& candidate, const Tensor& anchor, float epsilon);

// Per-sample first-misclassification bookkeeping across PGD iterates.
struct CaptureState {
  std::vector<int> capture_step;  // -1 until captured
  Tensor boundary;                // captured iterate rows
  int last_step = -1;

  explicit CaptureState(const Tensor& like)
      : capture_step(static_cast<size_t>(like.dim(0)), -1), boundary(like.shape) {}
};

// Records, for each not-yet-captured sample whose argmax != label, the current
// iterate row and step index. Must be called in increasing step order,
// step 0 = initial point.
void capture_boundary_step(const PredictionBatch& predictions, const std::vector<int>& labels,
                           const Tensor& iterate, int step_index, CaptureState& state);

// Sign-gradient PGD inside the l_inf eps-ball intersected with [0,1].
// Deterministic for identical (model, batch, spec, seed).
AttackOutcome pgd_attack(Classifier& model, const LabeledBatch& batch, const AttackSpec& spec,
                         const AttackObjective& objective, uint64_t seed);

inline AttackOutcome pgd_attack(Classifier& model, const LabeledBatch& batch,
                                const AttackSpec& spec, uint64_t seed) {
  return pgd_attack(model, batch, spec, AttackObjective{}, seed);
}

}  // namespace advtrain
