#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "posegraph/nn.hpp"
#include "posegraph/selftest.hpp"

using namespace posegraph;

TEST_CASE("softplus closed forms") {
  const Tensor zero(1, 1, 1);
  CHECK(softplus_fwd(zero, 1.0)[0] == doctest::Approx(std::numbers::ln2).epsilon(1e-15));
  CHECK(softplus_fwd(zero, 2.0)[0] == doctest::Approx(0.5 * std::numbers::ln2).epsilon(1e-15));
  CHECK(std::abs(softplus_fwd(Tensor(1, 1, 1, 50.0), 1.0)[0] - 50.0) < 1e-12);
  CHECK(inverse_softplus(softplus(0.3, 1.5), 1.5) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK_THROWS_AS(softplus_fwd(zero, 0.4), Error);
  CHECK_THROWS_AS(softplus_fwd(zero, 2.5), Error);
}

TEST_CASE("softplus is positive and strictly increasing") {
  Tensor x(1, 1, 401);
  for (int i = 0; i < 401; ++i) x[i] = -30.0 + 0.15 * i;
  for (double beta : {0.5, 1.0, 2.0}) {
    const Tensor y = softplus_fwd(x, beta);
    for (int i = 0; i < 401; ++i) {
      CHECK(y[i] > 0.0);
      if (i > 0) CHECK(y[i] > y[i - 1]);
    }
  }
}

TEST_CASE("relu_eps floor") {
  const Tensor x = Tensor::from_rows({{-5.0, 3.0, 0.005, 0.01}});
  const Tensor y = relu_eps_fwd(x, 0.01);
  CHECK(y == Tensor::from_rows({{0.01, 3.0, 0.01, 0.01}}));
  const Tensor g = relu_eps_bwd(x, Tensor(1, 1, 4, 1.0), 0.01);
  CHECK(g == Tensor::from_rows({{0.0, 1.0, 0.0, 1.0}}));
  std::mt19937_64 rng(1);
  for (double v : relu_eps_fwd(random_normal({1, 20, 20}, rng, 10.0), 1e-3).values()) {
    CHECK(v >= 1e-3);
  }
  CHECK_THROWS_AS(relu_eps_fwd(x, 0.0), Error);
  CHECK_THROWS_AS(relu_eps_fwd(x, 0.02), Error);
}

TEST_CASE("conv layer forward examples") {
  std::mt19937_64 rng(2);
  const Tensor x = random_normal({2, 5, 5}, rng);
  // Zero weights, bias b: constant map b per output channel.
  const Tensor b = Tensor(Shape{3, 1, 1}, std::vector<double>{0.5, -1.0, 2.0});
  const Tensor out = conv_layer_fwd(x, Tensor(6, 3, 3), b, 0);
  REQUIRE(out.shape() == Shape{3, 3, 3});
  for (int c = 0; c < 3; ++c) {
    for (double v : out.channel(c)) CHECK(v == b[c]);
  }
  // Delta kernel from input channel 1 to output channel 0: pass-through.
  Tensor w(2, 3, 3);
  w.at(1, 1, 1) = 1.0;
  CHECK(conv_layer_fwd(x, w, Tensor(1, 1, 1), 1) == x.channel_tensor(1));
  CHECK_THROWS_AS(conv_layer_fwd(x, Tensor(5, 3, 3), Tensor(3, 1, 1), 0), Error);
}

TEST_CASE("conv layer gradients match finite differences") {
  for (int s = 0; s < 5; ++s) {
    std::mt19937_64 rng(30 + s);
    ConvLayer layer(3, 2, 3, 1);
    layer.init(rng);
    CHECK(grad_check(layer, random_normal({3, 6, 7}, rng), rng()).max_relative_error < 1e-4);
  }
}

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(3);
  ConvLayer linear(2, 2, 1);
  linear.init(rng);
  CHECK(grad_check(linear, random_normal({2, 5, 5}, rng), 1).max_relative_error < 1e-8);

  Sequential stack;
  stack.add<ConvLayer>(1, 2, 3).init(rng);
  stack.add<SoftPlusLayer>(1.0);
  stack.add<ConvLayer>(2, 1, 3).init(rng);
  stack.add<SoftPlusLayer>(0.5);
  const GradCheckReport rep = grad_check(stack, random_normal({1, 9, 9}, rng), 2);
  CHECK(rep.max_relative_error < 1e-4);
  CHECK(rep.entries_checked > 0);
}

TEST_CASE("grad_check catches a wrong backward") {
  // Same forward as ExpLayer, deliberately wrong backward.
  struct BrokenExp final : Layer {
    Tensor out;
    LayerKind kind() const override { return LayerKind::exp; }
    Tensor forward(const Tensor& x) override { return out = exp(x); }
    Tensor backward(const Tensor& g) override { return scale(mul(g, out), 1.01); }
    std::unique_ptr<Layer> clone() const override { return std::make_unique<BrokenExp>(*this); }
  } broken;
  std::mt19937_64 rng(4);
  CHECK(grad_check(broken, random_normal({1, 3, 3}, rng), 5).max_relative_error > 1e-3);
}

TEST_CASE("every layer, the detector and the spatial network pass the gradient suite") {
  const CheckResult r = check_gradients(5);
  INFO(format_check(r));
  CHECK(r.passed);
}

TEST_CASE("lcn examples and invariance") {
  const Tensor flat(1, 12, 12, 3.0);
  // Zero up to rounding in the local mean, divided by the 1e-4 floor.
  CHECK(lcn_fwd(flat).max_abs() < 1e-10);

  std::mt19937_64 rng(5);
  const Tensor x = random_normal({2, 16, 14}, rng);
  CHECK(max_abs_diff(lcn_fwd(x), lcn_fwd(add(x, 4.5))) < 1e-12);

  // +-1 checkerboard: the Gaussian-weighted local mean vanishes up to the
  // alternating kernel sum, the local std is 1, so the response is +-1.
  Tensor board(1, 24, 24);
  for (int y = 0; y < 24; ++y)
    for (int c = 0; c < 24; ++c) board.at(0, y, c) = (y + c) % 2 ? 1.0 : -1.0;
  const Tensor out = lcn_fwd(board);
  for (int y = kLcnRadius; y < 24 - kLcnRadius; ++y) {
    for (int c = kLcnRadius; c < 24 - kLcnRadius; ++c) {
      CHECK(out.at(0, y, c) == doctest::Approx(board.at(0, y, c)).epsilon(1e-3));
    }
  }
  CHECK_THROWS_AS(lcn_fwd(Tensor(1, 8, 20)), Error);
}

TEST_CASE("mse loss") {
  std::mt19937_64 rng(6);
  const Tensor t = random_normal({2, 4, 5}, rng);
  const LossAndGrad same = mse_loss(t, t);
  CHECK(same.loss == 0.0);
  CHECK(same.grad.max_abs() == 0.0);
  CHECK(mse_loss(add(t, 0.3), t).loss == doctest::Approx(0.09).epsilon(1e-12));

  const Tensor p = random_normal({2, 4, 5}, rng);
  double sum = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x) sum += (p.at(c, y, x) - t.at(c, y, x)) * (p.at(c, y, x) - t.at(c, y, x));
  const LossAndGrad lg = mse_loss(p, t);
  CHECK(lg.loss == doctest::Approx(sum / 40.0).epsilon(1e-14));
  for (std::size_t i = 0; i < p.size(); ++i) {
    CHECK(lg.grad[i] == doctest::Approx(2.0 * (p[i] - t[i]) / 40.0).epsilon(1e-14));
  }
  CHECK_THROWS_AS(mse_loss(p, Tensor(1, 4, 5)), Error);
}

TEST_CASE("parameter gradients keep their parameter shapes") {
  std::mt19937_64 rng(7);
  Sequential s;
  s.add<ConvLayer>(1, 3, 5).init(rng);
  s.add<ReluEpsLayer>(1e-3);
  s.add<MaxPoolLayer>();
  const Tensor out = s.forward(random_normal({1, 12, 12}, rng));
  s.backward(Tensor(out.shape(), 1.0));
  for (Parameter* p : s.parameters()) CHECK(p->grad.shape() == p->value.shape());
  s.zero_grad();
  for (Parameter* p : s.parameters()) CHECK(p->grad.max_abs() == 0.0);
}
