#pragma once

#include <memory>
#include <string>
#include <vector>

#include "advtrain/nn.hpp"
#include "advtrain/tensor.hpp"

namespace advtrain {

// A batch of images in [0,1] with labels and stable dataset indices.
struct LabeledBatch {
  Tensor inputs;                    // (B, C, H, W)
  std::vector<int> labels;          // in [0, Y)
  std::vector<int64_t> sample_ids;  // unique within the batch

  int64_t size() const { return inputs.rank() ? inputs.dim(0) : 0; }
  void validate(int64_t num_classes) const;
};

struct PredictionBatch {
  Tensor logits;  // (B, Y)
  Tensor probs;   // (B, Y), softmax of logits

  int64_t size() const { return logits.dim(0); }
  int64_t classes() const { return logits.dim(1); }
  int argmax_row(int64_t row) const;
};

// Differentiable classifier plus bookkeeping needed by checkpoints.
struct ModelState {
  std::string architecture;  // "resnet18" or "small_cnn"
  int64_t num_classes = 0;
  std::unique_ptr<nn::Layer> net;

  // Runs the network; train=true updates batch-norm statistics.
  PredictionBatch forward(const Tensor& inputs, bool train);
  // Backpropagates a gradient w.r.t. the logits of the last forward call.
  // Accumulates parameter gradients; returns the gradient w.r.t. the inputs.
  Tensor backward(const Tensor& grad_logits);

  std::vector<nn::ParamRef> parameters();
  std::vector<nn::BufferRef> buffers();
  void zero_grad();
  void check_finite() const;
};

// Deterministic: identical (architecture, class_count, seed) gives
// bit-identical initial parameters.
ModelState build_model(const std::string& architecture, int64_t class_count, uint64_t seed);

enum class Reduction { per_sample, mean };

// Numerically stable cross-entropy computed from logits (never log of
// materialized probabilities). per_sample returns B values, mean returns 1.
std::vector<float> cross_entropy(const PredictionBatch& predictions,
                                 const std::vector<int>& labels, Reduction reduction);
std::vector<float> cross_entropy_per_sample(const PredictionBatch& predictions,
                                            const std::vector<int>& labels);
float cross_entropy_mean(const PredictionBatch& predictions, const std::vector<int>& labels);

// d(sum of per-sample CE)/d(logits): rows p - one_hot(y).
Tensor cross_entropy_logit_grad(const PredictionBatch& predictions,
                                const std::vector<int>& labels);

void softmax_rows(const Tensor& logits, Tensor& probs);

}  // namespace advtrain
