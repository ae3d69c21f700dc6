#include <unistd.h>

#include <filesystem>
#include <random>

#include "doctest.h"
#include "posegraph/eval.hpp"
#include "posegraph/selftest.hpp"
#include "posegraph/serialize.hpp"

using namespace posegraph;

namespace {

const JointSchema kOne{{"head"}, {}};

Annotation gt(const std::string& id, double u, double v, double torso_h) {
  Annotation a;
  a.image_id = id;
  a.joints = {{u, v, true}};
  a.torso = {0, 0, 5, torso_h};
  return a;
}

Prediction pred(const std::string& id, double u, double v) { return {id, {{u, v, true}}}; }

}  // namespace

TEST_CASE("perfect predictions are detected at every radius") {
  std::vector<Annotation> g{gt("a", 3, 4, 10), gt("b", 7, 1, 20)};
  std::vector<Prediction> p{pred("b", 7, 1), pred("a", 3, 4)};
  const DetectionCurve c = detection_rate(p, g, kOne, default_radii(), "m");
  for (double r : c.mean) CHECK(r == 1.0);
}

TEST_CASE("a single error of half the torso height steps at r = 0.5") {
  const DetectionCurve c = detection_rate({pred("a", 3, 9)}, {gt("a", 3, 4, 10)}, kOne,
                                          {0.0, 0.45, 0.49, 0.5, 0.55, 1.0}, "m");
  CHECK(c.rates[0] == std::vector<double>{0, 0, 0, 1, 1, 1});
}

TEST_CASE("four errors, two within r = 0.25") {
  std::vector<Annotation> g;
  std::vector<Prediction> p;
  const double errs[4] = {0.1, 0.2, 0.4, 0.8};
  for (int i = 0; i < 4; ++i) {
    const std::string id = "i" + std::to_string(i);
    g.push_back(gt(id, 10, 10, 10));
    p.push_back(pred(id, 10 + 10 * errs[i], 10));
  }
  CHECK(detection_rate(p, g, kOne, {0.25}, "m").rate("head", 0) == 0.5);
}

TEST_CASE("matches a counting oracle on random sets, monotone in r") {
  const CheckResult r = check_detection_metric(100, 11);
  INFO(format_check(r));
  CHECK(r.passed);
}

TEST_CASE("invisible joints are excluded and the mean pools joints") {
  const JointSchema two{{"a", "b"}, {}};
  Annotation g;
  g.image_id = "x";
  g.joints = {{0, 0, true}, {50, 50, false}};
  g.torso = {0, 0, 4, 10};
  const Prediction p{"x", {{0, 0, true}, {0, 0, true}}};
  const DetectionCurve c = detection_rate({p}, {g}, two, {0.1}, "m");
  CHECK(c.rate("a", 0) == 1.0);
  CHECK(c.mean[0] == 1.0);
}

TEST_CASE("scaling everything by a common factor leaves the curve unchanged") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(0.0, 40.0);
  std::vector<Annotation> g, g2;
  std::vector<Prediction> p, p2;
  for (int i = 0; i < 30; ++i) {
    const std::string id = std::to_string(i);
    const double u = d(rng), v = d(rng), h = 5 + d(rng), pu = d(rng), pv = d(rng);
    g.push_back(gt(id, u, v, h));
    g2.push_back(gt(id, 4 * u, 4 * v, 4 * h));
    p.push_back(pred(id, pu, pv));
    p2.push_back(pred(id, 4 * pu, 4 * pv));
  }
  const auto radii = default_radii();
  CHECK(detection_rate(p, g, kOne, radii, "m").rates == detection_rate(p2, g2, kOne, radii, "m").rates);
}

TEST_CASE("detection_rate input errors") {
  CHECK_THROWS_AS(detection_rate({pred("a", 0, 0)}, {gt("b", 0, 0, 1)}, kOne, {0.1}, "m"), Error);
  CHECK_THROWS_AS(detection_rate({pred("a", 0, 0), pred("a", 0, 0)},
                                 {gt("a", 0, 0, 1), gt("a", 0, 0, 1)}, kOne, {0.1}, "m"),
                  Error);
  CHECK_THROWS_AS(detection_rate({pred("a", 0, 0)}, {gt("a", 0, 0, 0)}, kOne, {0.1}, "m"), Error);
  CHECK_THROWS_AS(detection_rate({}, {gt("a", 0, 0, 1)}, kOne, {0.1}, "m"), Error);
}

TEST_CASE("curve CSV") {
  const DetectionCurve none = detection_rate({pred("a", 0, 0)}, {gt("a", 0, 0, 1)}, kOne, {}, "m");
  CHECK(format_curves({none}) == "radius,joint,rate,model_tag\n");

  const DetectionCurve one = detection_rate({pred("a", 0, 0)}, {gt("a", 0, 0, 1)}, kOne, {0.5}, "m");
  CHECK(format_curves({one}) == "radius,joint,rate,model_tag\n0.5,head,1,m\n");

  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> d(0.0, 30.0);
  const JointSchema two{{"a", "b"}, {}};
  std::vector<Annotation> g;
  std::vector<Prediction> p;
  for (int i = 0; i < 7; ++i) {
    Annotation a;
    a.image_id = std::to_string(i);
    a.joints = {{d(rng), d(rng), true}, {d(rng), d(rng), i % 3 != 0}};
    a.torso = {0, 0, 3, 3 + d(rng)};
    g.push_back(a);
    p.push_back({a.image_id, {{d(rng), d(rng), true}, {d(rng), d(rng), true}}});
  }
  const std::vector<DetectionCurve> curves{detection_rate(p, g, two, default_radii(), "unary"),
                                           detection_rate(p, g, two, {0.1, 0.3}, "spatial")};
  const auto path = std::filesystem::temp_directory_path() /
                    ("posegraph_curves_" + std::to_string(::getpid()) + ".csv");
  emit_curves(curves, path);
  const std::vector<DetectionCurve> back = read_curves(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].model_tag == curves[i].model_tag);
    CHECK(back[i].radii == curves[i].radii);
    CHECK(back[i].joints == curves[i].joints);
    CHECK(back[i].rates == curves[i].rates);
    CHECK(back[i].mean == curves[i].mean);
  }
  CHECK_THROWS_AS(parse_curves("radius,joint\n", "inline"), Error);
}
