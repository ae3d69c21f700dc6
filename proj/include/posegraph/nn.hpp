#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "posegraph/conv.hpp"
#include "posegraph/tensor.hpp"

namespace posegraph {

// ---------------------------------------------------------------------------
// Elementwise activations

/// (1/beta) * log(1 + exp(beta * x)); beta must lie in [0.5, 2].
Tensor softplus_fwd(const Tensor& x, double beta);
/// grad_out * logistic(beta * x)
Tensor softplus_bwd(const Tensor& x, const Tensor& grad_out, double beta);
double softplus(double x, double beta);
double inverse_softplus(double y, double beta);
void check_softplus_beta(double beta);

/// max(x, eps); eps must lie in (0, 0.01].
Tensor relu_eps_fwd(const Tensor& x, double eps);
/// Passes the gradient where x >= eps (the kink itself counts as active).
Tensor relu_eps_bwd(const Tensor& x, const Tensor& grad_out, double eps);
void check_relu_eps(double eps);

// ---------------------------------------------------------------------------
// Multi-channel convolution. Weights are stored as (out*in) x k x k, where
// plane o*in + i holds the kernel from input channel i to output channel o.

struct ConvGrads {
  Tensor input;
  Tensor weights;
  Tensor biases;
};

Tensor conv_layer_fwd(const Tensor& input, const Tensor& weights, const Tensor& biases,
                      int pad);
ConvGrads conv_layer_bwd(const Tensor& input, const Tensor& weights, const Tensor& grad_out,
                         int pad);

// ---------------------------------------------------------------------------
// Local contrast normalization (per channel): subtract a 9x9 sigma=2 Gaussian
// weighted local mean, then divide by max(local weighted std, mean local std
// over the image). Both weighted sums renormalize the kernel at the borders.

inline constexpr int kLcnRadius = 4;
inline constexpr double kLcnSigma = 2.0;
/// Lower bound on the divisor, reached only by (near) constant images.
inline constexpr double kLcnFloor = 1e-4;

Tensor lcn_fwd(const Tensor& input);

// ---------------------------------------------------------------------------
// Layers

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
};

enum class LayerKind { conv, maxpool, relu_eps, softplus, log, exp, lcn, upsample, sequential,
                       spatial };

/// A differentiable stage. forward() caches what backward() needs; backward()
/// must follow a forward() on the same input, accumulates into parameter
/// gradients, and returns the gradient with respect to the input.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual LayerKind kind() const = 0;
  virtual Tensor forward(const Tensor& input) = 0;
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<Parameter*> parameters() { return {}; }
  virtual std::unique_ptr<Layer> clone() const = 0;

  void zero_grad();
};

class ConvLayer final : public Layer {
 public:
  ConvLayer(int in_channels, int out_channels, int kernel, int pad = 0, std::string name = "conv");

  LayerKind kind() const override { return LayerKind::conv; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override { return {&weights_, &biases_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ConvLayer>(*this); }

  /// He-style normal initialization, zero biases.
  void init(std::mt19937_64& rng, double gain = 1.0);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  int kernel() const { return k_; }
  int pad() const { return pad_; }
  Parameter& weights() { return weights_; }
  Parameter& biases() { return biases_; }

 private:
  int in_;
  int out_;
  int k_;
  int pad_;
  Parameter weights_;
  Parameter biases_;
  Tensor input_;
};

class MaxPoolLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::maxpool; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<MaxPoolLayer>(*this); }

 private:
  Shape input_shape_;
  std::vector<std::uint32_t> argmax_;
};

class ReluEpsLayer final : public Layer {
 public:
  explicit ReluEpsLayer(double eps);
  LayerKind kind() const override { return LayerKind::relu_eps; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReluEpsLayer>(*this); }
  double eps() const { return eps_; }

 private:
  double eps_;
  Tensor input_;
};

class SoftPlusLayer final : public Layer {
 public:
  explicit SoftPlusLayer(double beta);
  LayerKind kind() const override { return LayerKind::softplus; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<SoftPlusLayer>(*this); }

 private:
  double beta_;
  Tensor input_;
};

class LogLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::log; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LogLayer>(*this); }

 private:
  Tensor input_;
};

class ExpLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::exp; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ExpLayer>(*this); }

 private:
  Tensor output_;
};

class LcnLayer final : public Layer {
 public:
  LayerKind kind() const override { return LayerKind::lcn; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<LcnLayer>(*this); }

 private:
  struct Plane {
    Tensor centered;   // x - local mean
    Tensor local_std;  // s
    Tensor divisor;    // max(s, mean s, floor)
    double mean_std = 0.0;
  };
  std::vector<Plane> planes_;
};

class UpsampleLayer final : public Layer {
 public:
  UpsampleLayer(int factor, UpsampleMethod method);
  LayerKind kind() const override { return LayerKind::upsample; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<UpsampleLayer>(*this); }

 private:
  int factor_;
  UpsampleMethod method_;
  Shape input_shape_;
};

class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) = default;
  Sequential& operator=(Sequential&&) = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  void push(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  LayerKind kind() const override { return LayerKind::sequential; }
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Sequential>(*this); }

  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

// ---------------------------------------------------------------------------
// Criterion and verification

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;
};

/// Mean squared error over every element; grad = 2 (pred - target) / N.
LossAndGrad mse_loss(const Tensor& pred, const Tensor& target);

struct GradCheckOptions {
  double step = 1e-5;
  /// Entries checked per tensor (input and each parameter); sampled with the
  /// seed when a tensor has more.
  std::size_t max_entries_per_tensor = 64;
  /// Absolute floor of the relative-error denominator.
  double denominator_floor = 1e-6;
  /// Off for layers that do not propagate an input gradient.
  bool check_input = true;
};

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t entries_checked = 0;
  std::string worst_entry;
};

/// Compares analytic input and parameter gradients of L = sum(r * f(x)), with
/// r drawn from the seed, against central differences. Throws if any value is
/// non-finite.
GradCheckReport grad_check(Layer& layer, const Tensor& input, std::uint64_t seed,
                           GradCheckOptions options = {});

/// Normal(0, stddev) tensor from a seeded generator.
Tensor random_normal(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
Tensor random_uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

}  // namespace posegraph
