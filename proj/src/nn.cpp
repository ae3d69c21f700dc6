#include "posegraph/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace posegraph {

void check_softplus_beta(double beta) {
  if (!(beta >= 0.5 && beta <= 2.0)) {
    throw Error("SoftPlus beta must lie in [0.5, 2], got " + std::to_string(beta));
  }
}

void check_relu_eps(double eps) {
  if (!(eps > 0.0 && eps <= 0.01)) {
    throw Error("ReLU epsilon must lie in (0, 0.01], got " + std::to_string(eps));
  }
}

double softplus(double x, double beta) {
  const double z = beta * x;
  // log(1 + e^z) = max(z, 0) + log1p(e^-|z|), stable for any z.
  return (std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)))) / beta;
}

namespace {

double logistic(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

double inverse_softplus(double y, double beta) {
  check_softplus_beta(beta);
  if (!(y > 0.0)) throw Error("inverse_softplus needs a positive value");
  const double z = beta * y;
  if (z > 30.0) return y + std::log1p(-std::exp(-z)) / beta;
  return std::log(std::expm1(z)) / beta;
}

Tensor softplus_fwd(const Tensor& x, double beta) {
  check_softplus_beta(beta);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = softplus(x[i], beta);
  return out;
}

Tensor softplus_bwd(const Tensor& x, const Tensor& grad_out, double beta) {
  check_softplus_beta(beta);
  require_same_shape(x, grad_out, "softplus_bwd");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = grad_out[i] * logistic(beta * x[i]);
  return g;
}

Tensor relu_eps_fwd(const Tensor& x, double eps) {
  check_relu_eps(eps);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::max(x[i], eps);
  return out;
}

Tensor relu_eps_bwd(const Tensor& x, const Tensor& grad_out, double eps) {
  check_relu_eps(eps);
  require_same_shape(x, grad_out, "relu_eps_bwd");
  Tensor g(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) g[i] = x[i] >= eps ? grad_out[i] : 0.0;
  return g;
}

// ---------------------------------------------------------------------------

namespace {

void check_conv_shapes(const Tensor& input, const Tensor& weights, const Tensor& biases,
                       int& in, int& out, int& k) {
  out = biases.channels();
  in = input.channels();
  k = weights.height();
  if (weights.width() != k || weights.channels() != in * out || biases.height() != 1 ||
      biases.width() != 1) {
    throw Error("conv layer shape mismatch: input " + to_string(input.shape()) + ", weights " +
                to_string(weights.shape()) + ", biases " + to_string(biases.shape()));
  }
}

// out(y+i, x+j) += k(i,j) * g(y,x); the adjoint of correlate_accumulate.
void scatter_accumulate(std::span<const double> grad, int g_h, int g_w,
                        std::span<const double> kernel, int k_h, int k_w,
                        std::span<double> out, int out_w) {
  for (int i = 0; i < k_h; ++i) {
    for (int j = 0; j < k_w; ++j) {
      const double k = kernel[static_cast<std::size_t>(i) * k_w + j];
      if (k == 0.0) continue;
      for (int y = 0; y < g_h; ++y) {
        const double* src = grad.data() + static_cast<std::size_t>(y) * g_w;
        double* dst = out.data() + static_cast<std::size_t>(y + i) * out_w + j;
        for (int x = 0; x < g_w; ++x) dst[x] += k * src[x];
      }
    }
  }
}

}  // namespace

Tensor conv_layer_fwd(const Tensor& input, const Tensor& weights, const Tensor& biases, int pad) {
  int in = 0, out = 0, k = 0;
  check_conv_shapes(input, weights, biases, in, out, k);
  const Tensor padded = pad > 0 ? zero_pad(input, pad, pad, pad, pad) : input;
  const int oh = padded.height() - k + 1;
  const int ow = padded.width() - k + 1;
  if (oh <= 0 || ow <= 0) {
    throw Error("conv layer kernel " + std::to_string(k) + " larger than input " +
                to_string(padded.shape()));
  }
  Tensor result(out, oh, ow);
  for (int o = 0; o < out; ++o) {
    auto dst = result.channel(o);
    std::fill(dst.begin(), dst.end(), biases[o]);
    for (int i = 0; i < in; ++i) {
      correlate_accumulate(padded.channel(i), padded.height(), padded.width(),
                           weights.channel(o * in + i), k, k, dst, oh, ow);
    }
  }
  return result;
}

ConvGrads conv_layer_bwd(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                         int pad) {
  const int out = grad_out.channels();
  const int in = input.channels();
  const int k = weights.height();
  if (weights.channels() != in * out) throw Error("conv_layer_bwd: weight shape mismatch");
  const Tensor padded = pad > 0 ? zero_pad(input, pad, pad, pad, pad) : input;
  const int oh = grad_out.height();
  const int ow = grad_out.width();
  if (oh != padded.height() - k + 1 || ow != padded.width() - k + 1) {
    throw Error("conv_layer_bwd: gradient shape mismatch");
  }
  ConvGrads g{Tensor(padded.shape()), Tensor(weights.shape()), Tensor(out, 1, 1)};
  for (int o = 0; o < out; ++o) {
    auto go = grad_out.channel(o);
    g.biases[o] = std::accumulate(go.begin(), go.end(), 0.0);
    for (int i = 0; i < in; ++i) {
      correlate_accumulate(padded.channel(i), padded.height(), padded.width(), go, oh, ow,
                           g.weights.channel(o * in + i), k, k);
      scatter_accumulate(go, oh, ow, weights.channel(o * in + i), k, k, g.input.channel(i),
                         padded.width());
    }
  }
  if (pad > 0) g.input = crop(g.input, pad, pad, input.height(), input.width());
  return g;
}

// ---------------------------------------------------------------------------

namespace {

const Tensor& lcn_kernel() {
  static const Tensor k = gaussian_kernel(kLcnRadius, kLcnSigma);
  return k;
}

}  // namespace

Tensor lcn_fwd(const Tensor& input) {
  LcnLayer layer;
  return layer.forward(input);
}

Tensor LcnLayer::forward(const Tensor& input) {
  const Tensor& kernel = lcn_kernel();
  if (input.height() < kernel.height() || input.width() < kernel.width()) {
    throw Error("LCN input " + to_string(input.shape()) + " smaller than the 9x9 kernel");
  }
  const Tensor cover = kernel_coverage(input.height(), input.width(), kernel);
  const std::size_t n = input.shape().plane();
  planes_.assign(static_cast<std::size_t>(input.channels()), {});
  Tensor out(input.shape());
  for (int c = 0; c < input.channels(); ++c) {
    Plane& p = planes_[c];
    const Tensor x = input.channel_tensor(c);
    const Tensor local_sum = correlate_same(x, kernel);
    p.centered = Tensor(x.shape());
    Tensor sq(x.shape());
    for (std::size_t i = 0; i < n; ++i) {
      p.centered[i] = x[i] - local_sum[i] / cover[i];
      sq[i] = p.centered[i] * p.centered[i];
    }
    const Tensor var_sum = correlate_same(sq, kernel);
    p.local_std = Tensor(x.shape());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      p.local_std[i] = std::sqrt(std::max(var_sum[i] / cover[i], 0.0));
      total += p.local_std[i];
    }
    p.mean_std = total / static_cast<double>(n);
    p.divisor = Tensor(x.shape());
    auto dst = out.channel(c);
    for (std::size_t i = 0; i < n; ++i) {
      p.divisor[i] = std::max({p.local_std[i], p.mean_std, kLcnFloor});
      dst[i] = p.centered[i] / p.divisor[i];
    }
  }
  return out;
}

Tensor LcnLayer::backward(const Tensor& grad_out) {
  if (static_cast<int>(planes_.size()) != grad_out.channels()) {
    throw Error("LcnLayer::backward without matching forward");
  }
  const Tensor& kernel = lcn_kernel();
  const Tensor cover = kernel_coverage(grad_out.height(), grad_out.width(), kernel);
  const std::size_t n = grad_out.shape().plane();
  Tensor grad_in(grad_out.shape());
  for (int c = 0; c < grad_out.channels(); ++c) {
    const Plane& p = planes_[c];
    auto g = grad_out.channel(c);
    Tensor g_centered(1, grad_out.height(), grad_out.width());
    Tensor g_std(g_centered.shape());
    double g_mean_std = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double den = p.divisor[i];
      g_centered[i] = g[i] / den;
      const double g_den = -g[i] * p.centered[i] / (den * den);
      // Subgradient of max(): ties go to the local term, then the image mean.
      if (p.local_std[i] >= p.mean_std && p.local_std[i] >= kLcnFloor) {
        g_std[i] += g_den;
      } else if (p.mean_std >= kLcnFloor) {
        g_mean_std += g_den;
      }
    }
    Tensor g_var_over_cover(g_centered.shape());
    for (std::size_t i = 0; i < n; ++i) {
      const double gs = g_std[i] + g_mean_std / static_cast<double>(n);
      const double s = p.local_std[i];
      g_var_over_cover[i] = s > 0.0 ? gs / (2.0 * s) / cover[i] : 0.0;
    }
    // The Gaussian kernel is symmetric, so same-size correlation is self-adjoint.
    const Tensor g_sq = correlate_same(g_var_over_cover, kernel);
    for (std::size_t i = 0; i < n; ++i) g_centered[i] += 2.0 * p.centered[i] * g_sq[i];
    Tensor g_over_cover(g_centered.shape());
    for (std::size_t i = 0; i < n; ++i) g_over_cover[i] = g_centered[i] / cover[i];
    const Tensor g_mean = correlate_same(g_over_cover, kernel);
    auto dst = grad_in.channel(c);
    for (std::size_t i = 0; i < n; ++i) dst[i] = g_centered[i] - g_mean[i];
  }
  return grad_in;
}

// ---------------------------------------------------------------------------

void Layer::zero_grad() {
  for (Parameter* p : parameters()) p->grad.fill(0.0);
}

ConvLayer::ConvLayer(int in_channels, int out_channels, int kernel, int pad, std::string name)
    : in_(in_channels),
      out_(out_channels),
      k_(kernel),
      pad_(pad),
      weights_(name + ".weight", Tensor(in_channels * out_channels, kernel, kernel)),
      biases_(name + ".bias", Tensor(out_channels, 1, 1)) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || pad < 0) {
    throw Error("ConvLayer: invalid geometry");
  }
}

void ConvLayer::init(std::mt19937_64& rng, double gain) {
  const double stddev = gain * std::sqrt(2.0 / static_cast<double>(in_ * k_ * k_));
  weights_.value = random_normal(weights_.value.shape(), rng, stddev);
  biases_.value.fill(0.0);
}

Tensor ConvLayer::forward(const Tensor& input) {
  input_ = input;
  return conv_layer_fwd(input, weights_.value, biases_.value, pad_);
}

Tensor ConvLayer::backward(const Tensor& grad_out) {
  ConvGrads g = conv_layer_bwd(input_, weights_.value, grad_out, pad_);
  axpy(weights_.grad, 1.0, g.weights);
  axpy(biases_.grad, 1.0, g.biases);
  return std::move(g.input);
}

Tensor MaxPoolLayer::forward(const Tensor& input) {
  input_shape_ = input.shape();
  PoolResult r = maxpool2(input);
  argmax_ = std::move(r.argmax);
  return std::move(r.pooled);
}

Tensor MaxPoolLayer::backward(const Tensor& grad_out) {
  return maxpool2_backward(grad_out, argmax_, input_shape_);
}

ReluEpsLayer::ReluEpsLayer(double eps) : eps_(eps) { check_relu_eps(eps); }

Tensor ReluEpsLayer::forward(const Tensor& input) {
  input_ = input;
  return relu_eps_fwd(input, eps_);
}

Tensor ReluEpsLayer::backward(const Tensor& grad_out) {
  return relu_eps_bwd(input_, grad_out, eps_);
}

SoftPlusLayer::SoftPlusLayer(double beta) : beta_(beta) { check_softplus_beta(beta); }

Tensor SoftPlusLayer::forward(const Tensor& input) {
  input_ = input;
  return softplus_fwd(input, beta_);
}

Tensor SoftPlusLayer::backward(const Tensor& grad_out) {
  return softplus_bwd(input_, grad_out, beta_);
}

Tensor LogLayer::forward(const Tensor& input) {
  input_ = input;
  return log(input);
}

Tensor LogLayer::backward(const Tensor& grad_out) {
  require_same_shape(input_, grad_out, "LogLayer::backward");
  Tensor g(grad_out.shape());
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = grad_out[i] / input_[i];
  return g;
}

Tensor ExpLayer::forward(const Tensor& input) {
  output_ = exp(input);
  return output_;
}

Tensor ExpLayer::backward(const Tensor& grad_out) { return mul(grad_out, output_); }

UpsampleLayer::UpsampleLayer(int factor, UpsampleMethod method) : factor_(factor), method_(method) {
  if (factor < 1) throw Error("UpsampleLayer factor must be >= 1");
}

Tensor UpsampleLayer::forward(const Tensor& input) {
  input_shape_ = input.shape();
  return upsample(input, factor_, method_);
}

Tensor UpsampleLayer::backward(const Tensor& grad_out) {
  return upsample_backward(grad_out, factor_, method_, input_shape_);
}

Sequential::Sequential(const Sequential& other) {
  layers_.reserve(other.layers_.size());
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential tmp(other);
    layers_ = std::move(tmp.layers_);
  }
  return *this;
}

Tensor Sequential::forward(const Tensor& input) {
  Tensor x = input;
  for (auto& l : layers_) x = l->forward(x);
  return x;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) {
    auto p = l->parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

// ---------------------------------------------------------------------------

LossAndGrad mse_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "mse_loss");
  if (pred.empty()) throw Error("mse_loss on empty tensors");
  const double n = static_cast<double>(pred.size());
  LossAndGrad r{0.0, Tensor(pred.shape())};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - target[i];
    r.loss += d * d;
    r.grad[i] = 2.0 * d / n;
  }
  r.loss /= n;
  return r;
}

Tensor random_normal(Shape shape, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Tensor random_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor t(shape);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

namespace {

double projected_loss(Layer& layer, const Tensor& input, const Tensor& projection) {
  const Tensor out = layer.forward(input);
  if (!out.all_finite()) throw Error("grad_check: non-finite forward output");
  require_same_shape(out, projection, "grad_check");
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out[i] * projection[i];
  return s;
}

std::vector<std::size_t> pick_entries(std::size_t n, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  if (n > limit) {
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(limit);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

}  // namespace

GradCheckReport grad_check(Layer& layer, const Tensor& input, std::uint64_t seed,
                           GradCheckOptions options) {
  std::mt19937_64 rng(seed);
  const Tensor probe = layer.forward(input);
  const Tensor projection = random_normal(probe.shape(), rng);

  layer.zero_grad();
  layer.forward(input);
  const Tensor input_grad = layer.backward(projection);
  if (!input_grad.all_finite()) throw Error("grad_check: non-finite input gradient");

  std::vector<Parameter*> params = layer.parameters();
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Parameter* p : params) {
    if (!p->grad.all_finite()) throw Error("grad_check: non-finite gradient for " + p->name);
    analytic.push_back(p->grad);
  }

  GradCheckReport report;
  auto compare = [&](double a, double numeric, const std::string& where) {
    if (!std::isfinite(numeric)) throw Error("grad_check: non-finite loss near " + where);
    const double denom = std::max({std::abs(a), std::abs(numeric), options.denominator_floor});
    const double err = std::abs(a - numeric) / denom;
    ++report.entries_checked;
    if (err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_entry = where;
    }
  };

  const double h = options.step;
  Tensor x = input;
  const std::size_t input_entries = options.check_input ? options.max_entries_per_tensor : 0;
  for (std::size_t i : pick_entries(x.size(), input_entries, rng)) {
    const double orig = x[i];
    x[i] = orig + h;
    const double lp = projected_loss(layer, x, projection);
    x[i] = orig - h;
    const double lm = projected_loss(layer, x, projection);
    x[i] = orig;
    compare(input_grad[i], (lp - lm) / (2.0 * h), "input[" + std::to_string(i) + "]");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& value = params[p]->value;
    for (std::size_t i : pick_entries(value.size(), options.max_entries_per_tensor, rng)) {
      const double orig = value[i];
      value[i] = orig + h;
      const double lp = projected_loss(layer, input, projection);
      value[i] = orig - h;
      const double lm = projected_loss(layer, input, projection);
      value[i] = orig;
      compare(analytic[p][i], (lp - lm) / (2.0 * h),
              params[p]->name + "[" + std::to_string(i) + "]");
    }
  }
  // Leave the layer's cache consistent with the unperturbed input.
  layer.forward(input);
  return report;
}

}  // namespace posegraph
