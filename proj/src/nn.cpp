#include "advtrain/nn.hpp"

#include <Eigen/Dense>
#include <cmath>

namespace advtrain::nn {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(int64_t in_ch, int64_t out_ch, int kernel, int stride, int pad)
    : weight({out_ch, in_ch * kernel * kernel}),
      grad_weight({out_ch, in_ch * kernel * kernel}),
      in_ch_(in_ch),
      out_ch_(out_ch),
      kernel_(kernel),
      stride_(stride),
      pad_(pad) {}

void Conv2d::init(std::mt19937& rng) {
  // He initialization, fan_out mode.
  float std = std::sqrt(2.0f / static_cast<float>(kernel_ * kernel_ * out_ch_));
  std::normal_distribution<float> dist(0.0f, std);
  for (auto& v : weight.data) v = dist(rng);
}

void Conv2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &grad_weight, true});
}

static void im2col(const float* x, int64_t C, int64_t H, int64_t W, int k, int stride, int pad,
                   int64_t OH, int64_t OW, float* col) {
  // col is (C*k*k, OH*OW) row-major
  for (int64_t c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        float* row = col + ((c * k + kh) * k + kw) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
          int64_t ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) {
            for (int64_t ow = 0; ow < OW; ++ow) row[oh * OW + ow] = 0.0f;
            continue;
          }
          const float* src = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            int64_t iw = ow * stride - pad + kw;
            row[oh * OW + ow] = (iw >= 0 && iw < W) ? src[iw] : 0.0f;
          }
        }
      }
    }
  }
}

static void col2im_add(const float* col, int64_t C, int64_t H, int64_t W, int k, int stride,
                       int pad, int64_t OH, int64_t OW, float* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const float* row = col + ((c * k + kh) * k + kw) * OH * OW;
        for (int64_t oh = 0; oh < OH; ++oh) {
          int64_t ih = oh * stride - pad + kh;
          if (ih < 0 || ih >= H) continue;
          float* dst = x + (c * H + ih) * W;
          for (int64_t ow = 0; ow < OW; ++ow) {
            int64_t iw = ow * stride - pad + kw;
            if (iw >= 0 && iw < W) dst[iw] += row[oh * OW + ow];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, bool /*train*/) {
  if (x.rank() != 4 || x.dim(1) != in_ch_)
    throw std::invalid_argument("Conv2d: bad input shape " + x.shape_str());
  int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  int64_t OH = (H + 2 * pad_ - kernel_) / stride_ + 1;
  int64_t OW = (W + 2 * pad_ - kernel_) / stride_ + 1;
  cached_input_ = x;
  Tensor out({B, out_ch_, OH, OW});
  int64_t klen = in_ch_ * kernel_ * kernel_;
  RowMat col(klen, OH * OW);
  ConstMapMat Wm(weight.ptr(), out_ch_, klen);
  for (int64_t b = 0; b < B; ++b) {
    im2col(x.ptr() + b * in_ch_ * H * W, in_ch_, H, W, kernel_, stride_, pad_, OH, OW, col.data());
    MapMat Om(out.ptr() + b * out_ch_ * OH * OW, out_ch_, OH * OW);
    Om.noalias() = Wm * col;
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const Tensor& x = cached_input_;
  int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  int64_t OH = grad_out.dim(2), OW = grad_out.dim(3);
  int64_t klen = in_ch_ * kernel_ * kernel_;
  Tensor gx(x.shape);
  RowMat col(klen, OH * OW);
  RowMat gcol(klen, OH * OW);
  ConstMapMat Wm(weight.ptr(), out_ch_, klen);
  MapMat gWm(grad_weight.ptr(), out_ch_, klen);
  for (int64_t b = 0; b < B; ++b) {
    ConstMapMat Gm(grad_out.ptr() + b * out_ch_ * OH * OW, out_ch_, OH * OW);
    im2col(x.ptr() + b * in_ch_ * H * W, in_ch_, H, W, kernel_, stride_, pad_, OH, OW, col.data());
    gWm.noalias() += Gm * col.transpose();
    gcol.noalias() = Wm.transpose() * Gm;
    col2im_add(gcol.data(), in_ch_, H, W, kernel_, stride_, pad_, OH, OW,
               gx.ptr() + b * in_ch_ * H * W);
  }
  return gx;
}

// ---------------------------------------------------------------------------
// BatchNorm2d
// ---------------------------------------------------------------------------

BatchNorm2d::BatchNorm2d(int64_t channels, float momentum, float eps)
    : gamma({channels}),
      beta({channels}),
      grad_gamma({channels}),
      grad_beta({channels}),
      running_mean({channels}),
      running_var({channels}),
      channels_(channels),
      momentum_(momentum),
      eps_(eps) {
  gamma.fill(1.0f);
  running_var.fill(1.0f);
}

void BatchNorm2d::init(std::mt19937& /*rng*/) {
  gamma.fill(1.0f);
  beta.zero();
  running_mean.zero();
  running_var.fill(1.0f);
}

void BatchNorm2d::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".gamma", &gamma, &grad_gamma, false});
  out.push_back({prefix + ".beta", &beta, &grad_beta, false});
}

void BatchNorm2d::collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {
  out.push_back({prefix + ".running_mean", &running_mean});
  out.push_back({prefix + ".running_var", &running_var});
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
  int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if (C != channels_) throw std::invalid_argument("BatchNorm2d: channel mismatch");
  int64_t spatial = H * W;
  int64_t n = B * spatial;
  Tensor out(x.shape);
  cached_xhat_ = Tensor(x.shape);
  cached_invstd_.assign(static_cast<size_t>(C), 0.0f);
  cached_train_ = train;
  for (int64_t c = 0; c < C; ++c) {
    float mean, invstd;
    if (train) {
      double sum = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const float* p = x.ptr() + (b * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) sum += p[i];
      }
      mean = static_cast<float>(sum / n);
      double var_sum = 0.0;
      for (int64_t b = 0; b < B; ++b) {
        const float* p = x.ptr() + (b * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          double d = p[i] - mean;
          var_sum += d * d;
        }
      }
      float var = static_cast<float>(var_sum / n);
      invstd = 1.0f / std::sqrt(var + eps_);
      float unbiased = n > 1 ? static_cast<float>(var_sum / (n - 1)) : var;
      running_mean[c] = (1.0f - momentum_) * running_mean[c] + momentum_ * mean;
      running_var[c] = (1.0f - momentum_) * running_var[c] + momentum_ * unbiased;
    } else {
      mean = running_mean[c];
      invstd = 1.0f / std::sqrt(running_var[c] + eps_);
    }
    cached_invstd_[static_cast<size_t>(c)] = invstd;
    float g = gamma[c], bta = beta[c];
    for (int64_t b = 0; b < B; ++b) {
      const float* p = x.ptr() + (b * C + c) * spatial;
      float* xh = cached_xhat_.ptr() + (b * C + c) * spatial;
      float* o = out.ptr() + (b * C + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i) {
        xh[i] = (p[i] - mean) * invstd;
        o[i] = g * xh[i] + bta;
      }
    }
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  int64_t B = grad_out.dim(0), C = grad_out.dim(1);
  int64_t spatial = grad_out.dim(2) * grad_out.dim(3);
  int64_t n = B * spatial;
  Tensor gx(grad_out.shape);
  for (int64_t c = 0; c < C; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int64_t b = 0; b < B; ++b) {
      const float* dy = grad_out.ptr() + (b * C + c) * spatial;
      const float* xh = cached_xhat_.ptr() + (b * C + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i) {
        sum_dy += dy[i];
        sum_dy_xhat += static_cast<double>(dy[i]) * xh[i];
      }
    }
    grad_gamma[c] += static_cast<float>(sum_dy_xhat);
    grad_beta[c] += static_cast<float>(sum_dy);
    float g = gamma[c];
    float invstd = cached_invstd_[static_cast<size_t>(c)];
    if (cached_train_) {
      float k = g * invstd / static_cast<float>(n);
      for (int64_t b = 0; b < B; ++b) {
        const float* dy = grad_out.ptr() + (b * C + c) * spatial;
        const float* xh = cached_xhat_.ptr() + (b * C + c) * spatial;
        float* out = gx.ptr() + (b * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i)
          out[i] = k * (static_cast<float>(n) * dy[i] - static_cast<float>(sum_dy) -
                        xh[i] * static_cast<float>(sum_dy_xhat));
      }
    } else {
      float k = g * invstd;
      for (int64_t b = 0; b < B; ++b) {
        const float* dy = grad_out.ptr() + (b * C + c) * spatial;
        float* out = gx.ptr() + (b * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) out[i] = k * dy[i];
      }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, bool /*train*/) {
  cached_input_ = x;
  Tensor out(x.shape);
  for (int64_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
  return out;
}

Tensor ReLU::backward(const Tensor& grad_out) {
  Tensor gx(grad_out.shape);
  for (int64_t i = 0; i < grad_out.numel(); ++i)
    gx[i] = cached_input_[i] > 0.0f ? grad_out[i] : 0.0f;
  return gx;
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(int64_t in_features, int64_t out_features)
    : weight({out_features, in_features}),
      bias({out_features}),
      grad_weight({out_features, in_features}),
      grad_bias({out_features}),
      in_(in_features),
      out_(out_features) {}

void Linear::init(std::mt19937& rng) {
  float bound = 1.0f / std::sqrt(static_cast<float>(in_));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& v : weight.data) v = dist(rng);
  for (auto& v : bias.data) v = dist(rng);
}

void Linear::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  out.push_back({prefix + ".weight", &weight, &grad_weight, true});
  out.push_back({prefix + ".bias", &bias, &grad_bias, false});
}

Tensor Linear::forward(const Tensor& x, bool /*train*/) {
  if (x.rank() != 2 || x.dim(1) != in_)
    throw std::invalid_argument("Linear: bad input shape " + x.shape_str());
  int64_t B = x.dim(0);
  cached_input_ = x;
  Tensor out({B, out_});
  ConstMapMat Xm(x.ptr(), B, in_);
  ConstMapMat Wm(weight.ptr(), out_, in_);
  MapMat Om(out.ptr(), B, out_);
  Om.noalias() = Xm * Wm.transpose();
  Om.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.ptr(), out_);
  return out;
}

Tensor Linear::backward(const Tensor& grad_out) {
  int64_t B = grad_out.dim(0);
  ConstMapMat Gm(grad_out.ptr(), B, out_);
  ConstMapMat Xm(cached_input_.ptr(), B, in_);
  ConstMapMat Wm(weight.ptr(), out_, in_);
  MapMat gWm(grad_weight.ptr(), out_, in_);
  gWm.noalias() += Gm.transpose() * Xm;
  Eigen::Map<Eigen::RowVectorXf>(grad_bias.ptr(), out_) += Gm.colwise().sum();
  Tensor gx({B, in_});
  MapMat gXm(gx.ptr(), B, in_);
  gXm.noalias() = Gm * Wm;
  return gx;
}

// ---------------------------------------------------------------------------
// GlobalAvgPool
// ---------------------------------------------------------------------------

Tensor GlobalAvgPool::forward(const Tensor& x, bool /*train*/) {
  int64_t B = x.dim(0), C = x.dim(1), spatial = x.dim(2) * x.dim(3);
  cached_shape_ = x.shape;
  Tensor out({B, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const float* p = x.ptr() + (b * C + c) * spatial;
      double s = 0.0;
      for (int64_t i = 0; i < spatial; ++i) s += p[i];
      out[b * C + c] = static_cast<float>(s / spatial);
    }
  return out;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  int64_t B = cached_shape_[0], C = cached_shape_[1];
  int64_t spatial = cached_shape_[2] * cached_shape_[3];
  Tensor gx(cached_shape_);
  float inv = 1.0f / static_cast<float>(spatial);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      float g = grad_out[b * C + c] * inv;
      float* p = gx.ptr() + (b * C + c) * spatial;
      for (int64_t i = 0; i < spatial; ++i) p[i] = g;
    }
  return gx;
}

// ---------------------------------------------------------------------------
// Sequential
// ---------------------------------------------------------------------------

void Sequential::add(const std::string& name, std::unique_ptr<Layer> layer) {
  children_.emplace_back(name, std::move(layer));
}

Tensor Sequential::forward(const Tensor& x, bool train) {
  Tensor h = x;
  for (auto& [name, layer] : children_) h = layer->forward(h, train);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = children_.rbegin(); it != children_.rend(); ++it) g = it->second->backward(g);
  return g;
}

void Sequential::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  for (auto& [name, layer] : children_)
    layer->collect_params(prefix.empty() ? name : prefix + "." + name, out);
}

void Sequential::collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {
  for (auto& [name, layer] : children_)
    layer->collect_buffers(prefix.empty() ? name : prefix + "." + name, out);
}

void Sequential::init(std::mt19937& rng) {
  for (auto& [name, layer] : children_) layer->init(rng);
}

// ---------------------------------------------------------------------------
// BasicBlock
// ---------------------------------------------------------------------------

BasicBlock::BasicBlock(int64_t in_ch, int64_t out_ch, int stride)
    : conv1_(in_ch, out_ch, 3, stride, 1),
      bn1_(out_ch),
      conv2_(out_ch, out_ch, 3, 1, 1),
      bn2_(out_ch),
      has_down_(stride != 1 || in_ch != out_ch) {
  if (has_down_) {
    down_conv_ = std::make_unique<Conv2d>(in_ch, out_ch, 1, stride, 0);
    down_bn_ = std::make_unique<BatchNorm2d>(out_ch);
  }
}

Tensor BasicBlock::forward(const Tensor& x, bool train) {
  Tensor h = relu1_.forward(bn1_.forward(conv1_.forward(x, train), train), train);
  Tensor s = bn2_.forward(conv2_.forward(h, train), train);
  Tensor id = has_down_ ? down_bn_->forward(down_conv_->forward(x, train), train) : x;
  cached_sum_ = s + id;
  Tensor out(cached_sum_.shape);
  for (int64_t i = 0; i < out.numel(); ++i)
    out[i] = cached_sum_[i] > 0.0f ? cached_sum_[i] : 0.0f;
  return out;
}

Tensor BasicBlock::backward(const Tensor& grad_out) {
  Tensor g(grad_out.shape);
  for (int64_t i = 0; i < g.numel(); ++i) g[i] = cached_sum_[i] > 0.0f ? grad_out[i] : 0.0f;
  Tensor gx_main = conv1_.backward(bn1_.backward(relu1_.backward(conv2_.backward(bn2_.backward(g)))));
  Tensor gx_id = has_down_ ? down_conv_->backward(down_bn_->backward(g)) : g;
  return gx_main + gx_id;
}

void BasicBlock::collect_params(const std::string& prefix, std::vector<ParamRef>& out) {
  conv1_.collect_params(prefix + ".conv1", out);
  bn1_.collect_params(prefix + ".bn1", out);
  conv2_.collect_params(prefix + ".conv2", out);
  bn2_.collect_params(prefix + ".bn2", out);
  if (has_down_) {
    down_conv_->collect_params(prefix + ".down_conv", out);
    down_bn_->collect_params(prefix + ".down_bn", out);
  }
}

void BasicBlock::collect_buffers(const std::string& prefix, std::vector<BufferRef>& out) {
  bn1_.collect_buffers(prefix + ".bn1", out);
  bn2_.collect_buffers(prefix + ".bn2", out);
  if (has_down_) down_bn_->collect_buffers(prefix + ".down_bn", out);
}

void BasicBlock::init(std::mt19937& rng) {
  conv1_.init(rng);
  bn1_.init(rng);
  conv2_.init(rng);
  bn2_.init(rng);
  if (has_down_) {
    down_conv_->init(rng);
    down_bn_->init(rng);
  }
}

}  // namespace advtrain::nn
