#pragma once

#include <cstdint>
#include <vector>

#include "advtrain/checkpoint.hpp"
#include "advtrain/model.hpp"
#include "advtrain/tensor.hpp"

namespace advtrain {

enum class Track { clean, boundary };

// Per-sample exponential-moving-average prediction store, keyed by dataset
// sample index. The boundary track is allocated only for methods that train
// on boundary samples.
class EnsembleStore {
 public:
  EnsembleStore() = default;
  EnsembleStore(int64_t num_samples, int64_t num_classes, float momentum, bool with_boundary);

  // z[id] <- eta * z[id] + (1 - eta) * p_row. At most once per
  // (sample, track, epoch); the trainer owns that discipline.
  void update(Track track, const std::vector<int64_t>& sample_ids, const PredictionBatch& p);

  // Marks a completed full-epoch sweep of a track.
  void end_epoch(Track track);

  // Bias-corrected rows z[id] / (1 - eta^t); requires >= 1 completed sweep.
  Tensor normalized(Track track, const std::vector<int64_t>& sample_ids) const;

  int64_t update_count(Track track) const;
  float momentum() const { return momentum_; }
  bool has_boundary() const { return z_boundary_.numel() > 0; }
  int64_t num_samples() const { return z_clean_.rank() ? z_clean_.dim(0) : 0; }
  const Tensor& raw(Track track) const;

  void pack(TensorArchive& ar) const;
  static EnsembleStore unpack(const TensorArchive& ar);

 private:
  Tensor z_clean_;     // (N, Y)
  Tensor z_boundary_;  // (N, Y) or empty
  float momentum_ = 0.9f;
  int64_t count_clean_ = 0;
  int64_t count_boundary_ = 0;
};

struct RampSchedule {
  float base_weight = 0.0f;
  int activation_epoch = 90;
  int ramp_length = 10;
  float te_momentum = 0.9f;
};

// 0 before activation; base_weight * exp(-5 (1 - tau)^2) with
// tau = min(1, (epoch - activation + 1) / ramp_length) afterwards.
float ramp_weight(const RampSchedule& schedule, int epoch);

// Squared l2 distance per row. Gradient flows into p only.
std::vector<float> te_penalty(const PredictionBatch& p, const Tensor& z_hat);

// d(sum of per-row penalties)/d(logits), with z_hat held constant:
// row g = 2 (p .* d - (p . d) p), d = p - z_hat.
Tensor te_penalty_logit_grad(const PredictionBatch& p, const Tensor& z_hat);

}  // namespace advtrain
