#include "advtrain/attack.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "advtrain/ensemble.hpp"
#include "advtrain/errors.hpp"

namespace advtrain {

void AttackSpec::validate() const {
  if (epsilon < 0.0f || step_size < 0.0f || steps < 0)
    throw ConfigError("attack spec requires epsilon >= 0, step_size >= 0, steps >= 0");
  if (norm != "l_inf") throw ConfigError("unsupported attack norm: " + norm);
}

PredictionBatch ModelClassifier::predict(const Tensor& inputs) {
  return model_.forward(inputs, /*train=*/false);
}

std::pair<PredictionBatch, Tensor> ModelClassifier::loss_input_grad(
    const Tensor& inputs, const std::vector<int>& labels, const AttackObjective& objective) {
  PredictionBatch pred = model_.forward(inputs, /*train=*/false);
  Tensor grad_logits = cross_entropy_logit_grad(pred, labels);
  if (objective.mode == AttackObjective::Mode::composed && objective.te_weight != 0.0f) {
    if (objective.z_hat == nullptr)
      throw UsageError("composed attack objective requires z_hat rows");
    Tensor te_grad = te_penalty_logit_grad(pred, *objective.z_hat);
    for (int64_t i = 0; i < grad_logits.numel(); ++i)
      grad_logits[i] += objective.te_weight * te_grad[i];
  }
  Tensor grad_x = model_.backward(grad_logits);
  return {std::move(pred), std::move(grad_x)};
}

Tensor project(const Tensor& candidate, const Tensor& anchor, float epsilon) {
  if (!candidate.same_shape(anchor))
    throw UsageError("project: candidate/anchor shape mismatch");
  Tensor out(candidate.shape);
  for (int64_t i = 0; i < candidate.numel(); ++i) {
    float lo = std::max(0.0f, anchor[i] - epsilon);
    float hi = std::min(1.0f, anchor[i] + epsilon);
    out[i] = std::min(hi, std::max(lo, candidate[i]));
  }
  return out;
}

void capture_boundary_step(const PredictionBatch& predictions, const std::vector<int>& labels,
                           const Tensor& iterate, int step_index, CaptureState& state) {
  if (step_index <= state.last_step)
    throw UsageError("capture_boundary_step: step_index must increase across calls");
  state.last_step = step_index;
  int64_t b = predictions.size();
  int64_t row_len = iterate.numel() / iterate.dim(0);
  for (int64_t i = 0; i < b; ++i) {
    if (state.capture_step[static_cast<size_t>(i)] >= 0) continue;
    if (predictions.argmax_row(i) != labels[static_cast<size_t>(i)]) {
      state.capture_step[static_cast<size_t>(i)] = step_index;
      std::copy(iterate.ptr() + i * row_len, iterate.ptr() + (i + 1) * row_len,
                state.boundary.ptr() + i * row_len);
    }
  }
}

static void check_grad_finite(const Tensor& grad, const LabeledBatch& batch) {
  int64_t b = grad.dim(0);
  int64_t row_len = grad.numel() / b;
  std::vector<int64_t> bad;
  for (int64_t i = 0; i < b; ++i) {
    const float* p = grad.ptr() + i * row_len;
    for (int64_t j = 0; j < row_len; ++j)
      if (!std::isfinite(p[j])) {
        bad.push_back(batch.sample_ids[static_cast<size_t>(i)]);
        break;
      }
  }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "non-finite attack gradient for sample ids:";
    for (int64_t id : bad) os << " " << id;
    throw NumericError(os.str(), bad);
  }
}

AttackOutcome pgd_attack(Classifier& model, const LabeledBatch& batch, const AttackSpec& spec,
                         const AttackObjective& objective, uint64_t seed) {
  spec.validate();
  batch.validate(model.num_classes());
  const Tensor& x = batch.inputs;

  Tensor iterate = x;
  if (spec.random_start && spec.epsilon > 0.0f) {
    std::mt19937 rng(static_cast<uint32_t>(seed));
    std::uniform_real_distribution<float> noise(-spec.epsilon, spec.epsilon);
    for (int64_t i = 0; i < iterate.numel(); ++i) iterate[i] = x[i] + noise(rng);
    iterate = project(iterate, x, spec.epsilon);
  }

  CaptureState cap(x);
  for (int t = 0; t < spec.steps; ++t) {
    auto [pred, grad] = model.loss_input_grad(iterate, batch.labels, objective);
    check_grad_finite(grad, batch);
    if (spec.capture_boundary) capture_boundary_step(pred, batch.labels, iterate, t, cap);
    Tensor next(iterate.shape);
    for (int64_t i = 0; i < iterate.numel(); ++i) {
      float s = grad[i] > 0.0f ? 1.0f : (grad[i] < 0.0f ? -1.0f : 0.0f);
      next[i] = iterate[i] + spec.step_size * s;
    }
    iterate = project(next, x, spec.epsilon);
  }
  if (spec.capture_boundary) {
    // The final iterate is the only point whose prediction was not already
    // computed for a gradient step.
    PredictionBatch pred = model.predict(iterate);
    capture_boundary_step(pred, batch.labels, iterate, spec.steps, cap);
  }

  AttackOutcome out;
  out.adversarial = iterate;
  out.capture_step = cap.capture_step;
  int64_t b = x.dim(0);
  out.fallback.assign(static_cast<size_t>(b), 0);
  if (spec.capture_boundary) {
    out.boundary = std::move(cap.boundary);
    int64_t row_len = x.numel() / b;
    for (int64_t i = 0; i < b; ++i) {
      if (out.capture_step[static_cast<size_t>(i)] < 0) {
        out.fallback[static_cast<size_t>(i)] = 1;
        std::copy(iterate.ptr() + i * row_len, iterate.ptr() + (i + 1) * row_len,
                  out.boundary.ptr() + i * row_len);
      }
    }
  }
  return out;
}

}  // namespace advtrain
