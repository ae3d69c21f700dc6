#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "posegraph/data.hpp"
#include "posegraph/nn.hpp"
#include "posegraph/serialize.hpp"

using namespace posegraph;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() /
                     ("posegraph_data_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Scene scene_with(int distractors, double noise, std::uint64_t seed) {
  SyntheticSceneConfig c;
  c.num_distractors = distractors;
  c.noise = noise;
  std::mt19937_64 rng(seed);
  return generate_scene(c, rng);
}

}  // namespace

TEST_CASE("a clean single-figure scene") {
  const SyntheticSceneConfig cfg;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Scene s = scene_with(0, 0.0, seed);
    const Annotation& a = s.annotation;
    REQUIRE(a.joints.size() == 7);
    CHECK(a.torso.h > 0.0);
    // Every annotated joint sits on ink.
    for (const auto& j : a.joints) {
      CHECK(j.visible);
      CHECK(j.u >= cfg.margin);
      CHECK(j.u <= cfg.width - 1 - cfg.margin);
      const int y = static_cast<int>(std::lround(j.v)), x = static_cast<int>(std::lround(j.u));
      CHECK(s.image.at(0, y, x) >= 0.5 * cfg.intensity * (1.0 - cfg.intensity_jitter));
    }
    // No ink outside the labeled figure's extent: exactly one figure.
    double u0 = a.torso.u, u1 = a.torso.u + a.torso.w, v0 = a.torso.v, v1 = a.torso.v + a.torso.h;
    for (const auto& j : a.joints) {
      u0 = std::min(u0, j.u), u1 = std::max(u1, j.u);
      v0 = std::min(v0, j.v), v1 = std::max(v1, j.v);
    }
    const double pad = cfg.head_radius + cfg.limb_thickness + 1.0;
    for (int y = 0; y < cfg.height; ++y)
      for (int x = 0; x < cfg.width; ++x) {
        if (x < u0 - pad || x > u1 + pad || y < v0 - pad || y > v1 + pad) {
          CHECK(s.image.at(0, y, x) == 0.0);
        }
      }
  }
}

TEST_CASE("generation is deterministic") {
  const Scene a = scene_with(2, 0.05, 42), b = scene_with(2, 0.05, 42);
  CHECK(a.image == b.image);
  CHECK(a.annotation == b.annotation);
  CHECK_FALSE(scene_with(2, 0.05, 43).image == a.image);
}

TEST_CASE("distractors add ink around the same labeled figure") {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Scene alone = scene_with(0, 0.0, seed), crowd = scene_with(2, 0.0, seed);
    CHECK(alone.annotation == crowd.annotation);
    CHECK(crowd.image.sum() > alone.image.sum());
  }
}

TEST_CASE("scene configuration validation and config round trip") {
  SyntheticSceneConfig c;
  CHECK(SyntheticSceneConfig::from_config(c.to_config()).to_config() == c.to_config());
  c.height = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  SyntheticSceneConfig crowded;
  crowded.num_distractors = 40;
  std::mt19937_64 rng(1);
  CHECK_THROWS_AS(generate_scene(crowded, rng), Error);
}

TEST_CASE("generate_dataset seeds each scene independently") {
  const SyntheticSceneConfig c;
  const Dataset big = generate_dataset(c, 5, 9), small = generate_dataset(c, 3, 9);
  CHECK(big.size() == 5);
  CHECK(big.annotations[0].image_id == "000000");
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(big.images[i] == small.images[i]);
    CHECK(big.annotations[i] == small.annotations[i]);
  }
  CHECK(generate_dataset(c, 0, 9).size() == 0);
}

TEST_CASE("torso map") {
  Annotation a;
  a.torso = {20, 24, 8, 12};  // center (24, 30) -> cell (7, 6) at stride 4
  const HeatMapGeometry geo{16, 16, 4};
  const Tensor m = render_torso_map(a, geo);
  CHECK(m.shape() == Shape{1, 16, 16});
  const ArgMax peak = argmax2d(m, 0);
  CHECK(peak.row == 7);
  CHECK(peak.col == 6);
  CHECK(peak.value == 1.0);

  // Moving the torso by whole cells translates the map.
  Annotation b = a;
  b.torso.u += 8;
  b.torso.v -= 4;
  const Tensor n = render_torso_map(b, geo);
  for (int y = 3; y < 12; ++y)
    for (int x = 3; x < 12; ++x) CHECK(n.at(0, y - 1, x + 2) == doctest::Approx(m.at(0, y, x)).epsilon(1e-15));

  a.torso.h = 0;
  CHECK_THROWS_AS(render_torso_map(a, geo), Error);
}

TEST_CASE("dataset round trip") {
  const fs::path dir = scratch("roundtrip");
  const Dataset ds = generate_dataset(SyntheticSceneConfig{}, 2, 3);
  write_dataset(dir, ds);
  CHECK(read_dataset(dir) == ds);
  fs::remove_all(dir);
}

TEST_CASE("a missing annotation line names the image") {
  const fs::path dir = scratch("missing");
  write_dataset(dir, generate_dataset(SyntheticSceneConfig{}, 2, 3));
  const fs::path ann = dir / "annotations.jsonl";
  std::string text = read_text_file(ann);
  text = text.substr(0, text.rfind('\n', text.size() - 2) + 1);  // drop the last line
  write_text_file(ann, text);
  try {
    read_dataset(dir);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("000001") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("PGM scaling") {
  const fs::path dir = scratch("pgm");
  std::mt19937_64 rng(4);
  const Tensor img = random_uniform({1, 9, 13}, rng, 0.0, 1.0);
  write_pgm(dir / "a.pgm", img, 65535);
  const Tensor back = read_pgm(dir / "a.pgm");
  CHECK(max_abs_diff(back, img) <= 0.5 / 65535 + 1e-15);
  CHECK(back == quantize(img, 65535));

  write_pgm(dir / "b.pgm", img, 255);
  const Tensor b8 = read_pgm(dir / "b.pgm");
  CHECK(b8 == quantize(img, 255));

  write_text_file(dir / "bad.pgm", "P2\n1 1\n255\n0\n");
  CHECK_THROWS_AS(read_pgm(dir / "bad.pgm"), Error);
  fs::remove_all(dir);
}
