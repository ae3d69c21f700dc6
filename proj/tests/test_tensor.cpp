#include <cmath>
#include <random>

#include "doctest.h"
#include "posegraph/nn.hpp"
#include "posegraph/tensor.hpp"

using namespace posegraph;

TEST_CASE("elementwise ops on small vectors") {
  const Tensor a = Tensor::from_rows({{1, 2}});
  const Tensor b = Tensor::from_rows({{3, 4}});
  CHECK(add(a, b) == Tensor::from_rows({{4, 6}}));
  CHECK(sub(b, a) == Tensor::from_rows({{2, 2}}));
  CHECK(mul(a, b) == Tensor::from_rows({{3, 8}}));
  CHECK(scale(a, 0.0) == Tensor::from_rows({{0, 0}}));
  CHECK(log(exp(Tensor::from_rows({{0.5}})))[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(elementwise(ElementwiseOp::add, a, 1.5) == Tensor::from_rows({{2.5, 3.5}}));
}

TEST_CASE("elementwise errors") {
  CHECK_THROWS_AS(add(Tensor(1, 1, 2), Tensor(1, 2, 1)), Error);
  CHECK_THROWS_AS(log(Tensor::from_rows({{1.0, 0.0}})), Error);
  CHECK_THROWS_AS(log(Tensor::from_rows({{-1.0}})), Error);
  CHECK_THROWS_AS(Tensor::from_rows({{1, 2}, {3}}), Error);
  CHECK_THROWS_AS(Tensor(Shape{1, 2, 2}, std::vector<double>{1, 2, 3}), Error);
}

TEST_CASE("exp and log round trip on positive tensors") {
  std::mt19937_64 rng(3);
  for (int s = 0; s < 5; ++s) {
    const Tensor t = random_uniform({2, 5, 7}, rng, 1e-3, 50.0);
    const Tensor r = exp(log(t));
    for (std::size_t i = 0; i < t.size(); ++i) {
      CHECK(std::abs(r[i] - t[i]) <= 1e-12 * std::max(1.0, t[i]));
    }
  }
}

TEST_CASE("argmax2d tie rule and constructed maxima") {
  const ArgMax one = argmax2d(Tensor::from_rows({{5}}), 0);
  CHECK(one.row == 0);
  CHECK(one.col == 0);
  CHECK(one.value == 5);

  const ArgMax flat = argmax2d(Tensor(1, 4, 6, 2.5), 0);
  CHECK(flat.row == 0);
  CHECK(flat.col == 0);
  CHECK(flat.value == 2.5);

  Tensor t(2, 8, 10, -1.0);
  t.at(1, 3, 7) = 4.0;
  t.at(0, 5, 5) = 9.0;  // other channel must not interfere
  const ArgMax m = argmax2d(t, 1);
  CHECK(m.row == 3);
  CHECK(m.col == 7);
  CHECK(m.value == 4.0);
  CHECK_THROWS_AS(argmax2d(t, 2), Error);
}

TEST_CASE("argmax2d is invariant to a constant offset") {
  std::mt19937_64 rng(9);
  for (int s = 0; s < 10; ++s) {
    const Tensor t = random_normal({1, 9, 11}, rng);
    const ArgMax a = argmax2d(t, 0), b = argmax2d(add(t, 17.25), 0);
    CHECK(a.row == b.row);
    CHECK(a.col == b.col);
  }
}

TEST_CASE("shape bookkeeping") {
  Tensor t(3, 4, 5);
  CHECK(t.size() == 60);
  CHECK(t.shape().plane() == 20);
  t.at(2, 3, 4) = 1.0;
  CHECK(t[59] == 1.0);
  CHECK(t.channel_tensor(2).sum() == 1.0);
  Tensor plane(1, 4, 5, 2.0);
  t.set_channel(0, plane);
  CHECK(t.sum() == 41.0);
  CHECK(concat_channels({plane, plane}).shape() == Shape{2, 4, 5});
  CHECK(max_abs_diff(plane, Tensor(1, 4, 5)) == 2.0);
  Tensor bad(1, 1, 1, std::nan(""));
  CHECK_FALSE(bad.all_finite());
}
