#include <cmath>
#include <random>

#include "doctest.h"
#include "posegraph/detector.hpp"
#include "posegraph/selftest.hpp"

using namespace posegraph;

namespace {

DetectorConfig small_config(int banks) {
  DetectorConfig c;
  c.num_banks = banks;
  c.stages = {{5, 4, true}, {5, 6, true}};
  c.fc_kernel = 5;
  c.fc_features = 8;
  c.num_joints = 3;
  return c;
}

Tensor random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return random_uniform({1, h, w}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("pyramid construction") {
  const Tensor img = random_image(64, 64, 1);
  const PyramidInput one = build_pyramid(img, 1);
  REQUIRE(one.banks.size() == 1);
  CHECK(one.banks[0] == lcn_fwd(img));

  const PyramidInput three = build_pyramid(img, 3);
  REQUIRE(three.banks.size() == 3);
  CHECK(three.banks[0].shape() == Shape{1, 64, 64});
  CHECK(three.banks[1].shape() == Shape{1, 32, 32});
  CHECK(three.banks[2].shape() == Shape{1, 16, 16});

  for (const Tensor& b : build_pyramid(Tensor(1, 64, 64, 0.8), 3).banks) CHECK(b.max_abs() < 1e-10);
  CHECK_THROWS_AS(build_pyramid(Tensor(1, 62, 64), 3), Error);
}

TEST_CASE("geometry of the default and preset configurations") {
  const DetectorConfig d;
  CHECK(d.pool_factor() == 4);
  CHECK(d.stage_field() == 16);
  CHECK(d.window() == 32);
  CHECK(DetectorConfig::large_preset(7).window() == 64);

  const auto layout = bank_layout(d, 64, 64);
  REQUIRE(layout.size() == 3);
  const int pads[3] = {14, 10, 8}, cells[3] = {20, 10, 5};
  for (int b = 0; b < 3; ++b) {
    CHECK(layout[b].rows.pad_lo == pads[b]);
    CHECK(layout[b].rows.pad_hi == pads[b]);
    CHECK(layout[b].cols.features == cells[b]);
  }
  CHECK_THROWS_AS(bank_layout(d, 62, 64), Error);

  DetectorConfig bad = d;
  bad.stages = {{4, 8, true}};
  CHECK_THROWS_AS(bad.validate(), Error);
  CHECK(DetectorConfig::from_config(d.to_config()) == d);
}

TEST_CASE("dense forward output shape and constant head") {
  PartDetector det(small_config(3));
  det.init(2);
  const HeatMapSet maps = det.evaluate_image(random_image(64, 48, 3));
  CHECK(maps.maps.shape() == Shape{3, 16, 12});
  CHECK(maps.stride == 4);

  // Zero output weights and bias b: the heat-map is b everywhere.
  Sequential& head = det.head();
  auto& out = static_cast<ConvLayer&>(head.layer(head.size() - 1));
  out.weights().value.fill(0.0);
  out.biases().value.fill(0.25);
  for (double v : det.evaluate_image(random_image(64, 64, 4)).maps.values()) CHECK(v == 0.25);
}

TEST_CASE("single-bank dense forward equals the sliding window, 3 seeds") {
  const CheckResult r = check_dense_vs_sliding(3);
  INFO(format_check(r));
  CHECK(r.passed);
}

TEST_CASE("multi-bank dense forward equals the sliding window") {
  for (int banks : {2, 3}) {
    PartDetector det(small_config(banks));
    det.init(10 + banks);
    const Tensor img = random_image(64, 64, 20 + banks);
    CHECK(max_abs_diff(det.evaluate_image(img).maps, sliding_window_forward(img, det).maps) < 1e-9);
  }
}

TEST_CASE("image the size of the window") {
  // The padded grid still has one cell per pooling stride, and the dense
  // pass agrees with the per-cell windows. Two banks: the third level of a
  // 32 x 32 image would be smaller than the LCN kernel.
  DetectorConfig cfg;
  cfg.num_banks = 2;
  PartDetector det(cfg);
  det.init(5);
  const Tensor img = random_image(32, 32, 6);
  const HeatMapSet dense = det.evaluate_image(img);
  CHECK(dense.maps.shape() == Shape{7, 8, 8});
  CHECK(max_abs_diff(dense.maps, sliding_window_forward(img, det).maps) < 1e-6);

  const PartDetector three(DetectorConfig{});
  CHECK_THROWS_AS(three.evaluate_image(img), Error);
}

TEST_CASE("shifting the input by the pooling factor shifts the output by one cell") {
  DetectorConfig cfg = small_config(1);
  PartDetector det(cfg);
  det.init(7);
  std::mt19937_64 rng(8);
  // Content framed by enough zeros that neither LCN pass reaches the border,
  // so every statistic translates exactly.
  Tensor a(1, 64, 64), b(1, 64, 64);
  for (int y = 12; y < 52; ++y) {
    for (int x = 12; x < 48; ++x) {
      const double v = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
      a.at(0, y, x) = v;
      b.at(0, y, x + 4) = v;
    }
  }
  const Tensor ma = det.evaluate_image(a).maps, mb = det.evaluate_image(b).maps;
  double worst = 0.0;
  for (int j = 0; j < 3; ++j)
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 15; ++c) worst = std::max(worst, std::abs(mb.at(j, r, c + 1) - ma.at(j, r, c)));
  CHECK(worst < 1e-9);
}

TEST_CASE("adding a constant to the image leaves the heat-maps unchanged") {
  PartDetector det(small_config(3));
  det.init(9);
  const Tensor img = random_image(64, 64, 10);
  CHECK(max_abs_diff(det.evaluate_image(img).maps, det.evaluate_image(add(img, 0.3)).maps) < 1e-9);
}

TEST_CASE("extract_joints") {
  HeatMapSet maps{Tensor(2, 16, 16), 4};
  maps.maps.at(0, 3, 7) = 1.0;
  const auto joints = extract_joints(maps);
  REQUIRE(joints.size() == 2);
  // Cell (3, 7) covers rows 12..15 and columns 28..31.
  CHECK(joints[0].v == 13.5);
  CHECK(joints[0].u == 29.5);
  // All-equal channel resolves to cell (0, 0).
  CHECK(joints[1].v == 1.5);
  CHECK(joints[1].u == 1.5);

  std::mt19937_64 rng(11);
  for (int i = 0; i < 20; ++i) {
    const double u = std::uniform_real_distribution<double>(0.0, 63.0)(rng);
    const double v = std::uniform_real_distribution<double>(0.0, 63.0)(rng);
    const HeatMapSet g{render_gaussian({16, 16, 4}, u, v, 1.0), 4};
    const JointEstimate e = extract_joints(g)[0];
    CHECK(std::abs(e.u - u) <= 4.0);
    CHECK(std::abs(e.v - v) <= 4.0);
  }
}

TEST_CASE("detector model round trip") {
  PartDetector det(small_config(2));
  det.init(12);
  const ParamFile f{detector_meta(det.config()), detector_tensors(det)};
  const PartDetector back = detector_from_file(decode_param_file(encode_param_file(f)));
  CHECK(back.config() == det.config());
  const Tensor img = random_image(32, 32, 13);
  CHECK(back.evaluate_image(img).maps == det.evaluate_image(img).maps);

  ParamFile missing = f;
  missing.tensors.pop_back();
  CHECK_THROWS_AS(detector_from_file(missing), Error);
}

TEST_CASE("forward rejects mismatched pyramids") {
  PartDetector det(small_config(2));
  det.init(1);
  CHECK_THROWS_AS(det.forward(build_pyramid(random_image(32, 32, 1), 1)), Error);
}
