#include "advtrain/weight_perturb.hpp"

#include <cmath>

#include "advtrain/errors.hpp"

namespace advtrain {

void WPSpec::validate() const {
  if (gamma < 0.0f) throw ConfigError("wp gamma must be >= 0");
  if (steps < 1) throw ConfigError("wp steps must be >= 1");
}

std::vector<uint8_t> small_loss_mask(const std::vector<float>& per_sample_losses, float l_min) {
  std::vector<uint8_t> mask(per_sample_losses.size());
  for (size_t i = 0; i < per_sample_losses.size(); ++i)
    mask[i] = per_sample_losses[i] <= l_min ? 1 : 0;
  return mask;
}

float WeightPerturbation::layer_norm(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return l2_norm(e.v);
  throw UsageError("no perturbation entry named " + name);
}

bool WeightPerturbation::is_zero() const {
  for (const auto& e : entries)
    for (float x : e.v.data)
      if (x != 0.0f) return false;
  return true;
}

static std::vector<nn::ParamRef> perturbable_params(ModelState& model, const WPSpec& spec) {
  std::vector<nn::ParamRef> out;
  for (auto& p : model.parameters()) {
    if (!p.perturbable) continue;
    bool excluded = false;
    for (const auto& pat : spec.exclude)
      if (p.name.find(pat) != std::string::npos) {
        excluded = true;
        break;
      }
    if (!excluded) out.push_back(p);
  }
  return out;
}

WeightPerturbation generate_wp(ModelState& model, const Tensor& adv_inputs,
                               const std::vector<int>& labels, const WPSpec& spec) {
  spec.validate();
  auto params = perturbable_params(model, spec);

  WeightPerturbation wp;
  wp.entries.reserve(params.size());
  for (auto& p : params) {
    WeightPerturbation::Entry e;
    e.name = p.name;
    e.v = Tensor(p.value->shape);
    e.saved = *p.value;  // theta at entry
    wp.entries.push_back(std::move(e));
  }
  if (spec.gamma == 0.0f) return wp;

  for (int step = 0; step < spec.steps; ++step) {
    PredictionBatch pred = model.forward(adv_inputs, /*train=*/false);
    std::vector<float> losses = cross_entropy_per_sample(pred, labels);
    for (float l : losses)
      if (!std::isfinite(l)) throw NumericError("non-finite loss during weight perturbation", {});
    std::vector<uint8_t> mask = small_loss_mask(losses, spec.l_min);
    bool any = false;
    for (uint8_t m : mask) any = any || m;
    if (!any) break;

    // Gradient of the summed masked cross-entropy.
    model.zero_grad();
    Tensor grad_logits = cross_entropy_logit_grad(pred, labels);
    int64_t y = pred.classes();
    for (int64_t i = 0; i < pred.size(); ++i)
      if (!mask[static_cast<size_t>(i)]) {
        float* row = grad_logits.ptr() + i * y;
        for (int64_t j = 0; j < y; ++j) row[j] = 0.0f;
      }
    model.backward(grad_logits);

    for (size_t l = 0; l < params.size(); ++l) {
      auto& e = wp.entries[l];
      float gnorm = l2_norm(*params[l].grad);
      if (gnorm == 0.0f) continue;
      float theta_norm = l2_norm(e.saved);
      float scale = spec.step_scale * spec.gamma * theta_norm / gnorm;
      for (int64_t i = 0; i < e.v.numel(); ++i) e.v[i] += scale * (*params[l].grad)[i];
      // Project back to the per-layer ball of radius gamma * ||theta_l||.
      float vnorm = l2_norm(e.v);
      float radius = spec.gamma * theta_norm;
      if (vnorm > radius && vnorm > 0.0f) {
        float shrink = radius / vnorm;
        for (auto& x : e.v.data) x *= shrink;
      }
      for (int64_t i = 0; i < e.v.numel(); ++i) (*params[l].value)[i] = e.saved[i] + e.v[i];
    }
  }

  // Leave the model exactly at theta; apply_wp is a separate, explicit step.
  for (size_t l = 0; l < params.size(); ++l) *params[l].value = wp.entries[l].saved;
  return wp;
}

static nn::ParamRef find_param(std::vector<nn::ParamRef>& params, const std::string& name) {
  for (auto& p : params)
    if (p.name == name) return p;
  throw UsageError("model has no parameter named " + name);
}

void apply_wp(ModelState& model, WeightPerturbation& v) {
  if (v.applied) throw UsageError("weight perturbation already applied");
  auto params = model.parameters();
  for (auto& e : v.entries) {
    nn::ParamRef p = find_param(params, e.name);
    if (p.value->shape != e.v.shape)
      throw UsageError("perturbation shape mismatch for " + e.name);
    e.saved = *p.value;
    for (int64_t i = 0; i < e.v.numel(); ++i) (*p.value)[i] = e.saved[i] + e.v[i];
    e.applied = *p.value;
  }
  v.applied = true;
}

void restore_wp(ModelState& model, WeightPerturbation& v) {
  if (!v.applied) throw UsageError("restore_wp without a matching apply_wp");
  auto params = model.parameters();
  for (auto& e : v.entries) {
    nn::ParamRef p = find_param(params, e.name);
    // theta_saved + (current - applied): removes v exactly while keeping any
    // optimizer movement that happened at the perturbed parameters.
    for (int64_t i = 0; i < e.v.numel(); ++i) {
      float delta = (*p.value)[i] - e.applied[i];
      (*p.value)[i] = delta == 0.0f ? e.saved[i] : e.saved[i] + delta;
    }
  }
  v.applied = false;
}

}  // namespace advtrain
