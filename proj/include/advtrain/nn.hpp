#pragma once

#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "advtrain/tensor.hpp"

namespace advtrain::nn {

// Named view of a trainable tensor and its gradient accumulator.
struct ParamRef {
  std::string name;
  Tensor* value = nullptr;
  Tensor* grad = nullptr;
  bool perturbable = false;  // weight matrices/convolutions only, see weight_perturb
};

// Named view of a non-trainable state tensor (batch-norm running statistics).
struct BufferRef {
  std::string name;
  Tensor* value = nullptr;
};

// A differentiable layer with cached activations for one forward/backward pair.
class Layer {
 public:
  virtual ~Layer() = default;

  // train=true uses/updates batch statistics where applicable.
  virtual Tensor forward(const Tensor& x, bool train) = 0;
  // Consumes the gradient w.r.t. the last forward output, accumulates
  // parameter gradients and returns the gradient w.r.t. the input.
  virtual Tensor backward(const Tensor& grad_out) = 0;

  virtual void collect_params(const std::string& prefix, std::vector<ParamRef>& out) {}
  virtual void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {}
  virtual void init(std::mt19937& rng) {}
};

class Conv2d : public Layer {
 public:
  Conv2d(int64_t in_ch, int64_t out_ch, int kernel, int stride, int pad);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void init(std::mt19937& rng) override;

  Tensor weight;  // (out_ch, in_ch*k*k)
  Tensor grad_weight;

 private:
  int64_t in_ch_, out_ch_;
  int kernel_, stride_, pad_;
  Tensor cached_input_;
};

class BatchNorm2d : public Layer {
 public:
  explicit BatchNorm2d(int64_t channels, float momentum = 0.1f, float eps = 1e-5f);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) override;
  void init(std::mt19937& rng) override;

  Tensor gamma, beta, grad_gamma, grad_beta;
  Tensor running_mean, running_var;

 private:
  int64_t channels_;
  float momentum_, eps_;
  bool cached_train_ = false;
  Tensor cached_xhat_;
  std::vector<float> cached_invstd_;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  Tensor cached_input_;
};

class Linear : public Layer {
 public:
  Linear(int64_t in_features, int64_t out_features);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void init(std::mt19937& rng) override;

  Tensor weight;  // (out, in)
  Tensor bias;    // (out)
  Tensor grad_weight, grad_bias;

 private:
  int64_t in_, out_;
  Tensor cached_input_;
};

// (B,C,H,W) -> (B,C): mean over spatial positions.
class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;

 private:
  std::vector<int64_t> cached_shape_;
};

class Sequential : public Layer {
 public:
  void add(const std::string& name, std::unique_ptr<Layer> layer);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) override;
  void init(std::mt19937& rng) override;

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> children_;
};

// conv-bn-relu-conv-bn + identity (or 1x1 conv-bn downsample), relu.
class BasicBlock : public Layer {
 public:
  BasicBlock(int64_t in_ch, int64_t out_ch, int stride);
  Tensor forward(const Tensor& x, bool train) override;
  Tensor backward(const Tensor& grad_out) override;
  void collect_params(const std::string& prefix, std::vector<ParamRef>& out) override;
  void collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) override;
  void init(std::mt19937& rng) override;

 private:
  Conv2d conv1_;
  BatchNorm2d bn1_;
  ReLU relu1_;
  Conv2d conv2_;
  BatchNorm2d bn2_;
  bool has_down_;
  std::unique_ptr<Conv2d> down_conv_;
  std::unique_ptr<BatchNorm2d> down_bn_;
  Tensor cached_sum_;  // pre-activation of the final relu
};

}  // namespace advtrain::nn
