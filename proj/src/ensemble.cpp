#include "advtrain/ensemble.hpp"

#include <cmath>

#include "advtrain/errors.hpp"

namespace advtrain {

EnsembleStore::EnsembleStore(int64_t num_samples, int64_t num_classes, float momentum,
                             bool with_boundary)
    : z_clean_({num_samples, num_classes}), momentum_(momentum) {
  if (momentum < 0.0f || momentum >= 1.0f)
    throw ConfigError("ensemble momentum must lie in [0,1)");
  if (with_boundary) z_boundary_ = Tensor({num_samples, num_classes});
}

void EnsembleStore::update(Track track, const std::vector<int64_t>& sample_ids,
                           const PredictionBatch& p) {
  Tensor& z = track == Track::clean ? z_clean_ : z_boundary_;
  if (z.numel() == 0) throw UsageError("boundary track not allocated");
  int64_t n = z.dim(0), y = z.dim(1);
  if (p.classes() != y) throw InputError("prediction class count mismatch");
  if (static_cast<int64_t>(sample_ids.size()) != p.size())
    throw InputError("sample_ids / prediction row count mismatch");
  for (size_t i = 0; i < sample_ids.size(); ++i) {
    int64_t id = sample_ids[i];
    if (id < 0 || id >= n) throw InputError("sample id out of range: " + std::to_string(id));
    float* zr = z.ptr() + id * y;
    const float* pr = p.probs.ptr() + static_cast<int64_t>(i) * y;
    for (int64_t j = 0; j < y; ++j)
      zr[j] = momentum_ * zr[j] + (1.0f - momentum_) * pr[j];
  }
}

void EnsembleStore::end_epoch(Track track) {
  if (track == Track::clean)
    ++count_clean_;
  else if (z_boundary_.numel() == 0)
    throw UsageError("boundary track not allocated");
  else
    ++count_boundary_;
}

int64_t EnsembleStore::update_count(Track track) const {
  return track == Track::clean ? count_clean_ : count_boundary_;
}

const Tensor& EnsembleStore::raw(Track track) const {
  return track == Track::clean ? z_clean_ : z_boundary_;
}

Tensor EnsembleStore::normalized(Track track, const std::vector<int64_t>& sample_ids) const {
  const Tensor& z = track == Track::clean ? z_clean_ : z_boundary_;
  if (z.numel() == 0) throw UsageError("boundary track not allocated");
  int64_t t = update_count(track);
  if (t < 1) throw UsageError("normalized() requested before any ensemble update");
  int64_t n = z.dim(0), y = z.dim(1);
  float denom = 1.0f - std::pow(momentum_, static_cast<float>(t));
  Tensor out({static_cast<int64_t>(sample_ids.size()), y});
  for (size_t i = 0; i < sample_ids.size(); ++i) {
    int64_t id = sample_ids[i];
    if (id < 0 || id >= n) throw InputError("sample id out of range: " + std::to_string(id));
    const float* zr = z.ptr() + id * y;
    float* o = out.ptr() + static_cast<int64_t>(i) * y;
    for (int64_t j = 0; j < y; ++j) o[j] = zr[j] / denom;
  }
  return out;
}

void EnsembleStore::pack(TensorArchive& ar) const {
  ar.tensors["ensemble/z_clean"] = z_clean_;
  if (z_boundary_.numel() > 0) ar.tensors["ensemble/z_boundary"] = z_boundary_;
  ar.meta_num["ensemble/momentum"] = momentum_;
  ar.meta_num["ensemble/count_clean"] = static_cast<double>(count_clean_);
  ar.meta_num["ensemble/count_boundary"] = static_cast<double>(count_boundary_);
}

EnsembleStore EnsembleStore::unpack(const TensorArchive& ar) {
  EnsembleStore s;
  auto it = ar.tensors.find("ensemble/z_clean");
  if (it == ar.tensors.end()) throw UsageError("archive holds no ensemble store");
  s.z_clean_ = it->second;
  auto bt = ar.tensors.find("ensemble/z_boundary");
  if (bt != ar.tensors.end()) s.z_boundary_ = bt->second;
  s.momentum_ = static_cast<float>(ar.num("ensemble/momentum"));
  s.count_clean_ = static_cast<int64_t>(ar.num("ensemble/count_clean"));
  s.count_boundary_ = static_cast<int64_t>(ar.num("ensemble/count_boundary"));
  return s;
}

float ramp_weight(const RampSchedule& schedule, int epoch) {
  if (epoch < schedule.activation_epoch) return 0.0f;
  float tau = std::min(1.0f, static_cast<float>(epoch - schedule.activation_epoch + 1) /
                                 static_cast<float>(schedule.ramp_length));
  return schedule.base_weight * std::exp(-5.0f * (1.0f - tau) * (1.0f - tau));
}

std::vector<float> te_penalty(const PredictionBatch& p, const Tensor& z_hat) {
  if (z_hat.shape != p.probs.shape)
    throw InputError("te_penalty: shape mismatch " + z_hat.shape_str() + " vs " +
                     p.probs.shape_str());
  int64_t b = p.size(), y = p.classes();
  std::vector<float> out(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    const float* pr = p.probs.ptr() + i * y;
    const float* zr = z_hat.ptr() + i * y;
    double s = 0.0;
    for (int64_t j = 0; j < y; ++j) {
      double d = static_cast<double>(pr[j]) - zr[j];
      s += d * d;
    }
    out[static_cast<size_t>(i)] = static_cast<float>(s);
  }
  return out;
}

Tensor te_penalty_logit_grad(const PredictionBatch& p, const Tensor& z_hat) {
  if (z_hat.shape != p.probs.shape) throw InputError("te_penalty_logit_grad: shape mismatch");
  int64_t b = p.size(), y = p.classes();
  Tensor g(p.probs.shape);
  for (int64_t i = 0; i < b; ++i) {
    const float* pr = p.probs.ptr() + i * y;
    const float* zr = z_hat.ptr() + i * y;
    float* gr = g.ptr() + i * y;
    double pd = 0.0;
    for (int64_t j = 0; j < y; ++j) pd += static_cast<double>(pr[j]) * (pr[j] - zr[j]);
    for (int64_t j = 0; j < y; ++j)
      gr[j] = 2.0f * (pr[j] * (pr[j] - zr[j]) - static_cast<float>(pd) * pr[j]);
  }
  return g;
}

}  // namespace advtrain
