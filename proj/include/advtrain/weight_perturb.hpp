#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "advtrain/model.hpp"
#include "advtrain/tensor.hpp"

namespace advtrain {

struct WPSpec {
  float gamma = 0.005f;      // relative per-layer l2 budget
  float l_min = 1.5f;        // minimum adversarial loss threshold
  int steps = 1;
  float step_scale = 1.0f;
  // Parameters whose name contains any of these substrings are never
  // perturbed, on top of the built-in bias/normalization exclusion.
  std::vector<std::string> exclude;

  void validate() const;
};

// mask[i] = (loss[i] <= l_min); the threshold is inclusive.
std::vector<uint8_t> small_loss_mask(const std::vector<float>& per_sample_losses, float l_min);

// A named per-layer perturbation of the perturbable parameters. apply/restore
// bracket the outer gradient step; restore after an optimizer update yields
// theta_original + optimizer_delta (exact identity when nothing moved).
struct WeightPerturbation {
  struct Entry {
    std::string name;
    Tensor v;
    Tensor saved;    // parameters before apply
    Tensor applied;  // parameters right after apply (saved + v)
  };
  std::vector<Entry> entries;
  bool applied = false;

  float layer_norm(const std::string& name) const;
  bool is_zero() const;
};

// Iterative ascent of the summed small-loss-masked cross-entropy over
// per-layer relative l2 balls of radius gamma * ||theta_l||. The model is
// returned at its original parameters; adversarial losses are evaluated in
// evaluation-statistics mode.
WeightPerturbation generate_wp(ModelState& model, const Tensor& adv_inputs,
                               const std::vector<int>& labels, const WPSpec& spec);

void apply_wp(ModelState& model, WeightPerturbation& v);
void restore_wp(ModelState& model, WeightPerturbation& v);

// Applies on construction, restores on destruction unless already restored.
// Keeps the restore step on every exit path of a training step.
class WpScope {
 public:
  WpScope(ModelState& model, WeightPerturbation& v) : model_(model), v_(v) {
    apply_wp(model_, v_);
  }
  ~WpScope() {
    if (v_.applied) restore_wp(model_, v_);
  }
  WpScope(const WpScope&) = delete;
  WpScope& operator=(const WpScope&) = delete;

 private:
  ModelState& model_;
  WeightPerturbation& v_;
};

}  // namespace advtrain
