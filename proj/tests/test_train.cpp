#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "posegraph/log.hpp"
#include "posegraph/train.hpp"

using namespace posegraph;

namespace {

// Silences warnings (clamped joints, redrawn scales) for one scope.
struct QuietWarnings {
  WarningSink prev = set_warning_sink([](const std::string&) {});
  ~QuietWarnings() { set_warning_sink(prev); }
};

DetectorConfig tiny_detector() {
  DetectorConfig c;
  c.num_banks = 1;
  c.stages = {{5, 4, true}, {5, 6, true}};
  c.fc_kernel = 5;
  c.fc_features = 8;
  c.num_joints = JointSchema::upper_body().size();
  return c;
}

SpatialConfig tiny_spatial() {
  SpatialConfig s;
  s.kernel_size = 17;
  return s;
}

TrainConfig tiny_train(int det_epochs, int sp_epochs, int uni_epochs) {
  TrainConfig t;
  t.detector_epochs = det_epochs;
  t.spatial_epochs = sp_epochs;
  t.unified_epochs = uni_epochs;
  t.validation_fraction = 0.25;
  return t;
}

const Dataset& tiny_dataset() {
  static const Dataset d = generate_dataset(SyntheticSceneConfig{}, 12, 3);
  return d;
}

std::vector<double> flat(const std::vector<Parameter*>& ps) {
  std::vector<double> out;
  for (const Parameter* p : ps) out.insert(out.end(), p->value.values().begin(), p->value.values().end());
  return out;
}

std::vector<double> flat(PartDetector d) { return flat(d.parameters()); }

}  // namespace

TEST_CASE("nesterov step") {
  SUBCASE("zero momentum is plain gradient descent") {
    Tensor p(1, 1, 3), g(1, 1, 3);
    p[0] = 1.0, p[1] = -2.0, p[2] = 0.5;
    g[0] = 0.1, g[1] = 0.2, g[2] = -0.3;
    OptimizerState s = make_optimizer_state({&p});
    nesterov_step({&p}, {&g}, s, 0.5, 0.0);
    CHECK(p[0] == doctest::Approx(0.95));
    CHECK(p[1] == doctest::Approx(-2.1));
    CHECK(p[2] == doctest::Approx(0.65));
  }
  SUBCASE("zero learning rate leaves the parameters alone") {
    Tensor p(1, 2, 2, 1.5), g(1, 2, 2, 7.0);
    OptimizerState s = make_optimizer_state({&p});
    for (int i = 0; i < 5; ++i) nesterov_step({&p}, {&g}, s, 0.0, 0.9);
    for (double v : p.values()) CHECK(v == 1.5);
  }
  SUBCASE("quadratic bowl matches a scalar simulation") {
    // f(x) = 0.5 k x^2, gradient at the lookahead point x + mu v.
    const double k = 2.0, lr = 0.05, mu = 0.9;
    Parameter param("x", Tensor(1, 1, 1, 3.0));
    NesterovOptimizer opt({&param}, lr, mu);
    double x = 3.0, v = 0.0;
    for (int it = 0; it < 300; ++it) {
      opt.begin_step();
      param.grad[0] = k * param.value[0];
      opt.step();
      v = mu * v - lr * k * (x + mu * v);
      x += v;
      CHECK(param.value[0] == doctest::Approx(x).epsilon(1e-12));
    }
    CHECK(std::abs(param.value[0]) < 1e-3);
  }
  SUBCASE("misuse throws") {
    Parameter param("x", Tensor(1, 1, 1));
    NesterovOptimizer opt({&param}, 0.1, 0.5);
    CHECK_THROWS_AS(opt.step(), Error);
    opt.begin_step();
    CHECK_THROWS_AS(opt.begin_step(), Error);
    CHECK_THROWS_AS(NesterovOptimizer({&param}, 0.1, 1.0), Error);
  }
}

TEST_CASE("render_target") {
  Annotation a;
  a.image_id = "t";
  a.joints = {{9.5, 5.5, true}, {21.5, 13.5, true}, {0.0, 0.0, false}};
  const HeatMapGeometry geo{8, 8, 4};
  const HeatMapSet t = render_target(a, geo, 1.0);
  REQUIRE(t.maps.shape() == Shape{3, 8, 8});
  // (9.5, 5.5) is the center of cell (1, 2); (21.5, 13.5) of cell (3, 5).
  CHECK(t.maps.at(0, 1, 2) == doctest::Approx(1.0));
  CHECK(t.maps.at(0, 1, 3) == doctest::Approx(std::exp(-0.5)));
  CHECK(t.maps.at(0, 2, 3) == doctest::Approx(std::exp(-1.0)));
  CHECK(t.maps.at(1, 3, 5) == doctest::Approx(1.0));
  CHECK(t.maps.at(1, 1, 2) == doctest::Approx(std::exp(-0.5 * 13.0)));
  CHECK(t.maps.channel_tensor(2).max_abs() == 0.0);

  // A joint's channel does not depend on the other joints.
  Annotation only = a;
  only.joints[1].visible = false;
  CHECK(max_abs_diff(render_target(only, geo, 1.0).maps.channel_tensor(0), t.maps.channel_tensor(0)) == 0.0);
}

TEST_CASE("augmentation") {
  const JointSchema schema = JointSchema::upper_body();
  const Dataset& d = tiny_dataset();
  const Tensor& img = d.images[0];
  const Annotation& ann = d.annotations[0];
  const int h = img.height(), w = img.width();

  SUBCASE("identity transform") {
    CHECK(transform_grid(img, {}) == img);
    CHECK(transform_annotation(ann, schema, {}, h, w) == ann);
  }
  SUBCASE("flipping twice is the identity") {
    const AugmentTransform f{true, 1.0};
    const Tensor twice = transform_grid(transform_grid(img, f), f);
    CHECK(max_abs_diff(twice, img) < 1e-12);
    const Annotation back = transform_annotation(transform_annotation(ann, schema, f, h, w), schema, f, h, w);
    for (std::size_t j = 0; j < ann.joints.size(); ++j) {
      CHECK(back.joints[j].u == doctest::Approx(ann.joints[j].u));
      CHECK(back.joints[j].v == doctest::Approx(ann.joints[j].v));
    }
  }
  SUBCASE("mirror coordinates and left/right swap") {
    Annotation a = ann;
    const int ls = schema.index_of("lsho"), rs = schema.index_of("rsho");
    a.joints[ls].u = 5.0;
    const Annotation m = transform_annotation(a, schema, {true, 1.0}, 32, 32);
    CHECK(m.joints[rs].u == doctest::Approx(26.0));
    CHECK(m.joints[rs].v == doctest::Approx(a.joints[ls].v));
  }
  SUBCASE("scaling keeps the pixel under each joint") {
    const AugmentTransform s{false, 1.1};
    const Tensor out = transform_grid(img, s);
    const Annotation moved = transform_annotation(ann, schema, s, h, w);
    CHECK(moved.joints[0].u - 0.5 * (w - 1) == doctest::Approx(1.1 * (ann.joints[0].u - 0.5 * (w - 1))));
    CHECK(out.shape() == img.shape());
  }
  SUBCASE("drawn transforms keep visible joints inside") {
    AugmentConfig cfg;
    cfg.scale_min = 0.7;
    cfg.scale_max = 1.3;
    std::mt19937_64 rng(1);
    QuietWarnings quiet;
    for (std::size_t i = 0; i < d.size(); ++i) {
      for (int k = 0; k < 5; ++k) {
        const auto t = draw_transform(cfg, d.annotations[i], h, w, rng);
        for (const auto& j : transform_annotation(d.annotations[i], schema, t, h, w).joints) {
          if (!j.visible) continue;
          CHECK(j.u >= 0.0);
          CHECK(j.u <= w - 1.0);
          CHECK(j.v >= 0.0);
          CHECK(j.v <= h - 1.0);
        }
      }
    }
  }
  SUBCASE("bad ranges are rejected") {
    AugmentConfig cfg;
    cfg.scale_min = 0.5;
    CHECK_THROWS_AS(cfg.validate(), Error);
    cfg = {};
    cfg.flip_prob = 1.5;
    CHECK_THROWS_AS(cfg.validate(), Error);
  }
}

TEST_CASE("unified model equals the composed stages") {
  QuietWarnings quiet;
  const Dataset& d = tiny_dataset();
  PartDetector det(tiny_detector());
  det.init(4);
  const SpatialConfig sc = tiny_spatial();
  const auto params = init_spatial_params(d.annotations, d.schema, sc, det.stride(), 0.1);
  SpatialModel spatial(params);
  const PoseModel model(det, spatial);
  for (std::size_t i = 0; i < 3; ++i) {
    const HeatMapSet unary = det.evaluate_image(d.images[i]);
    SpatialModel s2(params);
    const Tensor composed = s2.forward(spatial_input(unary, d.annotations[i], true));
    CHECK(max_abs_diff(model.evaluate(d.images[i], d.annotations[i]).maps, composed) < 1e-10);
  }
}

TEST_CASE("staged training") {
  QuietWarnings quiet;
  const Dataset& d = tiny_dataset();

  SUBCASE("no epochs: no metrics, models equal their initialization") {
    const TrainResult r = train_staged(d, tiny_detector(), tiny_spatial(), tiny_train(0, 0, 0));
    CHECK(r.metrics.empty());
    const TrainResult again = train_staged(d, tiny_detector(), tiny_spatial(), tiny_train(0, 0, 0));
    CHECK(flat(r.detector) == flat(again.detector));
    CHECK(r.spatial.kernels == again.spatial.kernels);
  }

  SUBCASE("stage 2 lowers the training loss on a frozen detector") {
    TrainConfig cfg = tiny_train(0, 4, 0);
    cfg.augment.flip_prob = 0.0;
    cfg.augment.scale_min = cfg.augment.scale_max = 1.0;
    const TrainResult r = train_staged(d, tiny_detector(), tiny_spatial(), cfg);
    std::vector<double> train_mse;
    for (const auto& row : r.metrics)
      if (row.stage == 2 && row.split == "train") train_mse.push_back(row.mse);
    REQUIRE(train_mse.size() == 4);
    CHECK(train_mse.back() < train_mse.front());
  }

  SUBCASE("deterministic, also across thread counts") {
    TrainConfig cfg = tiny_train(1, 1, 1);
    cfg.batch_size = 2;
    const TrainResult a = train_staged(d, tiny_detector(), tiny_spatial(), cfg);
    const TrainResult b = train_staged(d, tiny_detector(), tiny_spatial(), cfg);
    cfg.threads = 2;
    const TrainResult c = train_staged(d, tiny_detector(), tiny_spatial(), cfg);
    for (const TrainResult* other : {&b, &c}) {
      CHECK(flat(a.detector) == flat(other->detector));
      CHECK(a.spatial.kernels == other->spatial.kernels);
      CHECK(a.spatial.biases == other->spatial.biases);
      PoseModel ua = a.unified, uo = other->unified;
      CHECK(flat(ua.parameters()) == flat(uo.parameters()));
      REQUIRE(a.metrics.size() == other->metrics.size());
      for (std::size_t i = 0; i < a.metrics.size(); ++i) CHECK(a.metrics[i].mse == other->metrics[i].mse);
    }
  }

  SUBCASE("metric rows") {
    const TrainResult r = train_staged(d, tiny_detector(), tiny_spatial(), tiny_train(2, 1, 1));
    REQUIRE(r.metrics.size() == 8);
    CHECK(r.metrics[0].stage == 1);
    CHECK(r.metrics[0].split == "train");
    CHECK(r.metrics[1].split == "val");
    CHECK(r.metrics[3].epoch == 2);
    CHECK(r.metrics[7].stage == 3);
    CHECK(r.metrics[0].det_rates.size() == 3);
    CHECK(metrics_header({0.1, 0.5}) == "stage,epoch,split,mse,det_rate@0.1,det_rate@0.5\n");
  }

  SUBCASE("divergence names the stage") {
    TrainConfig cfg = tiny_train(2, 0, 0);
    cfg.learning_rate = 1e12;
    try {
      train_staged(d, tiny_detector(), tiny_spatial(), cfg);
      FAIL("expected divergence");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("stage 1") != std::string::npos);
    }
  }

  SUBCASE("mismatched inputs") {
    DetectorConfig wrong = tiny_detector();
    wrong.num_joints = 3;
    CHECK_THROWS_AS(train_staged(d, wrong, tiny_spatial(), tiny_train(0, 0, 0)), Error);
    CHECK_THROWS_AS(train_staged(Dataset{d.schema, {}, {}}, tiny_detector(), tiny_spatial(), tiny_train(0, 0, 0)), Error);
  }
}

TEST_CASE("model files round trip") {
  QuietWarnings quiet;
  const Dataset& d = tiny_dataset();
  const auto dir = std::filesystem::temp_directory_path() / "posegraph_test_train";
  std::filesystem::create_directories(dir);
  const TrainResult r = train_staged(d, tiny_detector(), tiny_spatial(), tiny_train(0, 0, 0));

  save_detector(dir / "d.model", r.detector);
  CHECK(flat(load_detector(dir / "d.model")) == flat(r.detector));

  save_spatial(dir / "s.model", r.spatial);
  const SpatialModelParams s = load_spatial(dir / "s.model");
  CHECK(s.kernels == r.spatial.kernels);
  CHECK(s.biases == r.spatial.biases);
  CHECK(s.outputs == r.spatial.outputs);

  save_pose_model(dir / "u.model", r.unified);
  const PoseModel u = load_pose_model(dir / "u.model");
  CHECK(max_abs_diff(u.evaluate(d.images[0], d.annotations[0]).maps,
                     r.unified.evaluate(d.images[0], d.annotations[0]).maps) == 0.0);

  CHECK_THROWS_AS(load_detector(dir / "s.model"), Error);
  CHECK_THROWS_AS(load_pose_model(dir / "missing.model"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("train config") {
  TrainConfig t;
  t.learning_rate = 0.003;
  t.unified_epochs = 5;
  t.seed = 12345678901234ULL;
  t.augment.flip_prob = 0.0;
  const TrainConfig back = TrainConfig::from_config(t.to_config());
  CHECK(back.learning_rate == 0.003);
  CHECK(back.unified_epochs == 5);
  CHECK(back.seed == 12345678901234ULL);
  CHECK(back.augment.flip_prob == 0.0);
  CHECK(t.stage3_detector_rate() == doctest::Approx(3e-6));
  CHECK(t.stage3_spatial_rate() == doctest::Approx(0.1 * t.spatial_learning_rate));

  TrainConfig bad;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = {};
  bad.momentum = 1.0;
  CHECK_THROWS_AS(bad.validate(), Error);
}
