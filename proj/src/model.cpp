#include "advtrain/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "advtrain/errors.hpp"

namespace advtrain {

void LabeledBatch::validate(int64_t num_classes) const {
  if (inputs.rank() != 4) throw InputError("batch inputs must be (B,C,H,W)");
  int64_t b = inputs.dim(0);
  if (static_cast<int64_t>(labels.size()) != b || static_cast<int64_t>(sample_ids.size()) != b)
    throw InputError("batch labels/sample_ids size mismatch");
  for (float v : inputs.data)
    if (v < 0.0f || v > 1.0f) throw InputError("batch inputs must lie in [0,1]");
  for (int y : labels)
    if (y < 0 || y >= num_classes) throw InputError("label out of range");
  std::set<int64_t> ids(sample_ids.begin(), sample_ids.end());
  if (static_cast<int64_t>(ids.size()) != b)
    throw InputError("sample_ids must be unique within a batch");
}

int PredictionBatch::argmax_row(int64_t row) const {
  int64_t y = classes();
  const float* p = logits.ptr() + row * y;
  return static_cast<int>(std::max_element(p, p + y) - p);
}

void softmax_rows(const Tensor& logits, Tensor& probs) {
  probs = Tensor(logits.shape);
  int64_t b = logits.dim(0), y = logits.dim(1);
  for (int64_t i = 0; i < b; ++i) {
    const float* l = logits.ptr() + i * y;
    float* p = probs.ptr() + i * y;
    float m = *std::max_element(l, l + y);
    double sum = 0.0;
    for (int64_t j = 0; j < y; ++j) {
      p[j] = std::exp(l[j] - m);
      sum += p[j];
    }
    float inv = static_cast<float>(1.0 / sum);
    for (int64_t j = 0; j < y; ++j) p[j] *= inv;
  }
}

PredictionBatch ModelState::forward(const Tensor& inputs, bool train) {
  PredictionBatch out;
  out.logits = net->forward(inputs, train);
  softmax_rows(out.logits, out.probs);
  return out;
}

Tensor ModelState::backward(const Tensor& grad_logits) { return net->backward(grad_logits); }

std::vector<nn::ParamRef> ModelState::parameters() {
  std::vector<nn::ParamRef> out;
  net->collect_params("", out);
  return out;
}

std::vector<nn::BufferRef> ModelState::buffers() {
  std::vector<nn::BufferRef> out;
  net->collect_buffers("", out);
  return out;
}

void ModelState::zero_grad() {
  for (auto& p : parameters()) p.grad->zero();
}

void ModelState::check_finite() const {
  auto* self = const_cast<ModelState*>(this);
  for (auto& p : self->parameters())
    if (!p.value->all_finite())
      throw NumericError("non-finite parameter tensor: " + p.name, {});
}

static std::unique_ptr<nn::Sequential> make_small_cnn(int64_t classes) {
  using namespace nn;
  auto net = std::make_unique<Sequential>();
  const int64_t ch[4] = {16, 32, 64, 64};
  int64_t in = 3;
  for (int i = 0; i < 4; ++i) {
    int stride = i == 0 ? 1 : 2;
    auto blk = std::make_unique<Sequential>();
    blk->add("conv", std::make_unique<Conv2d>(in, ch[i], 3, stride, 1));
    blk->add("bn", std::make_unique<BatchNorm2d>(ch[i]));
    blk->add("relu", std::make_unique<ReLU>());
    net->add("block" + std::to_string(i + 1), std::move(blk));
    in = ch[i];
  }
  net->add("pool", std::make_unique<GlobalAvgPool>());
  net->add("fc", std::make_unique<Linear>(in, classes));
  return net;
}

static std::unique_ptr<nn::Sequential> make_resnet18(int64_t classes) {
  using namespace nn;
  auto net = std::make_unique<Sequential>();
  // CIFAR-style stem: 3x3 convolution, no max-pool.
  auto stem = std::make_unique<Sequential>();
  stem->add("conv", std::make_unique<Conv2d>(3, 64, 3, 1, 1));
  stem->add("bn", std::make_unique<BatchNorm2d>(64));
  stem->add("relu", std::make_unique<ReLU>());
  net->add("stem", std::move(stem));
  const int64_t widths[4] = {64, 128, 256, 512};
  int64_t in = 64;
  for (int stage = 0; stage < 4; ++stage) {
    auto s = std::make_unique<Sequential>();
    int stride = stage == 0 ? 1 : 2;
    s->add("0", std::make_unique<BasicBlock>(in, widths[stage], stride));
    s->add("1", std::make_unique<BasicBlock>(widths[stage], widths[stage], 1));
    net->add("layer" + std::to_string(stage + 1), std::move(s));
    in = widths[stage];
  }
  net->add("pool", std::make_unique<GlobalAvgPool>());
  net->add("fc", std::make_unique<Linear>(512, classes));
  return net;
}

ModelState build_model(const std::string& architecture, int64_t class_count, uint64_t seed) {
  if (class_count <= 0) throw std::invalid_argument("class_count must be positive");
  ModelState m;
  m.architecture = architecture;
  m.num_classes = class_count;
  if (architecture == "small_cnn") {
    m.net = make_small_cnn(class_count);
  } else if (architecture == "resnet18") {
    m.net = make_resnet18(class_count);
  } else {
    throw std::invalid_argument("unknown architecture tag: " + architecture);
  }
  std::mt19937 rng(static_cast<uint32_t>(seed));
  m.net->init(rng);
  return m;
}

std::vector<float> cross_entropy_per_sample(const PredictionBatch& predictions,
                                            const std::vector<int>& labels) {
  int64_t b = predictions.size(), y = predictions.classes();
  if (static_cast<int64_t>(labels.size()) != b)
    throw std::invalid_argument("labels size mismatch");
  std::vector<float> out(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || labels[i] >= y) throw InputError("label out of range");
    const float* l = predictions.logits.ptr() + i * y;
    float m = *std::max_element(l, l + y);
    double sum = 0.0;
    for (int64_t j = 0; j < y; ++j) sum += std::exp(static_cast<double>(l[j]) - m);
    double lse = m + std::log(sum);
    out[static_cast<size_t>(i)] = static_cast<float>(lse - l[labels[i]]);
  }
  return out;
}

float cross_entropy_mean(const PredictionBatch& predictions, const std::vector<int>& labels) {
  auto per = cross_entropy_per_sample(predictions, labels);
  double s = 0.0;
  for (float v : per) s += v;
  return per.empty() ? 0.0f : static_cast<float>(s / per.size());
}

std::vector<float> cross_entropy(const PredictionBatch& predictions,
                                 const std::vector<int>& labels, Reduction reduction) {
  if (reduction == Reduction::per_sample) return cross_entropy_per_sample(predictions, labels);
  return {cross_entropy_mean(predictions, labels)};
}

Tensor cross_entropy_logit_grad(const PredictionBatch& predictions,
                                const std::vector<int>& labels) {
  int64_t b = predictions.size(), y = predictions.classes();
  Tensor g(predictions.probs.shape);
  for (int64_t i = 0; i < b; ++i) {
    const float* p = predictions.probs.ptr() + i * y;
    float* gr = g.ptr() + i * y;
    for (int64_t j = 0; j < y; ++j) gr[j] = p[j];
    gr[labels[i]] -= 1.0f;
  }
  return g;
}

}  // namespace advtrain
