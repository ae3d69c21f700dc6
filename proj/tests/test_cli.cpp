#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "json.hpp"
#include "posegraph/app.hpp"
#include "posegraph/data.hpp"
#include "posegraph/serialize.hpp"
#include "posegraph/tensor.hpp"

using namespace posegraph;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "posegraph_test_cli";

// Runs the executable; returns its exit status, output in `log`.
int run(const std::string& args, std::string* log = nullptr) {
  const fs::path out = kRoot / "stdout.txt";
  const std::string cmd = std::string("\"") + POSEGRAPH_CLI + "\" " + args + " > \"" + out.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  if (log) *log = read_text_file(out);
  return status;
}

std::string bytes(const fs::path& p) { return read_text_file(p); }

// A small configuration that trains in seconds.
fs::path small_config() {
  const fs::path p = kRoot / "small.ini";
  write_text_file(p,
                  "[data]\ncount = 16\n"
                  "[detector]\nnum_banks = 1\nstage_kernels = 5,5\nstage_features = 4,6\n"
                  "stage_pool = 1,1\nfc_features = 8\n"
                  "[spatial]\nkernel_size = 17\n"
                  "[train]\ndetector_epochs = 1\nspatial_epochs = 1\nunified_epochs = 1\n"
                  "validation_fraction = 0.25\n");
  return p;
}

struct Fixture {
  Fixture() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
  }
};

}  // namespace

TEST_CASE_FIXTURE(Fixture, "gen") {
  SUBCASE("empty dataset still gets a manifest") {
    REQUIRE(run("gen --out " + (kRoot / "empty").string() + " --set data.count=0") == 0);
    const json m = json::parse(bytes(kRoot / "empty" / "manifest.json"));
    CHECK(m["command"] == "gen");
    CHECK(m["count"] == 0);
    CHECK(m.contains("config_hash"));
    CHECK(read_dataset(kRoot / "empty").size() == 0);
  }
  SUBCASE("same seed, same bytes; the requested number of pairs") {
    REQUIRE(run("gen --seed 5 --out " + (kRoot / "a").string()) == 0);
    REQUIRE(run("gen --seed 5 --out " + (kRoot / "b").string()) == 0);
    int pgm = 0;
    for (const auto& e : fs::recursive_directory_iterator(kRoot / "a")) {
      if (!e.is_regular_file()) continue;
      const fs::path twin = kRoot / "b" / fs::relative(e.path(), kRoot / "a");
      REQUIRE(fs::exists(twin));
      CHECK(bytes(e.path()) == bytes(twin));
      pgm += e.path().extension() == ".pgm";
    }
    CHECK(pgm == 100);
    const Dataset a = read_dataset(kRoot / "a");
    CHECK(a.size() == 100);
    CHECK(a.annotations.back().image_id == "000099");

    REQUIRE(run("gen --seed 6 --set data.count=3 --out " + (kRoot / "c").string()) == 0);
    CHECK(bytes(kRoot / "a" / "images" / "000000.pgm") != bytes(kRoot / "c" / "images" / "000000.pgm"));
  }
  SUBCASE("configuration errors") {
    std::string log;
    CHECK(run("gen --out " + (kRoot / "x").string() + " --set data.bogus=1", &log) != 0);
    CHECK(log.find("unknown configuration key 'data.bogus'") != std::string::npos);
    CHECK(run("gen --out " + (kRoot / "x").string() + " --set data.noise=-1", &log) != 0);
    CHECK(log.find("error:") != std::string::npos);
    CHECK(run("nosuchcommand") != 0);
  }
}

TEST_CASE("configuration layering") {
  const fs::path p = fs::temp_directory_path() / "posegraph_layering.ini";
  write_text_file(p, "[train]\nlearning_rate = 0.5\nseed = 9\n");
  RunOptions o;
  o.config_path = p;
  CHECK(resolve_config(o).at("train.learning_rate") == "0.5");
  o.seed = 4;
  CHECK(resolve_config(o).at("train.seed") == "4");
  CHECK(resolve_config(o).at("data.seed") == "4");
  o.overrides = {"train.seed=11"};
  CHECK(resolve_config(o).at("train.seed") == "11");
  o.overrides = {"train.nothing=1"};
  CHECK_THROWS_AS(resolve_config(o), Error);
  fs::remove(p);
}

TEST_CASE_FIXTURE(Fixture, "train, resume, eval and infer") {
  const fs::path cfg = small_config();
  const fs::path data = kRoot / "data", run_dir = kRoot / "run";
  REQUIRE(run("gen --config " + cfg.string() + " --out " + data.string()) == 0);

  SUBCASE("zero epochs writes the models and an empty metric table") {
    REQUIRE(run("train --config " + cfg.string() + " --dataset " + data.string() + " --out " +
                run_dir.string() +
                " --set train.detector_epochs=0 --set train.spatial_epochs=0 --set train.unified_epochs=0") == 0);
    for (const char* f : {"detector.model", "spatial.model", "unified.model", "manifest.json", "config.ini"}) {
      CHECK(fs::exists(run_dir / f));
    }
    CHECK(bytes(run_dir / "metrics.csv") == "stage,epoch,split,mse,det_rate@0.1,det_rate@0.25,det_rate@0.5\n");
    CHECK(json::parse(bytes(run_dir / "manifest.json"))["stages_completed"] == 3);
  }

  SUBCASE("full pipeline") {
    const std::string train_args = "train --config " + cfg.string() + " --dataset " + data.string() +
                                   " --out " + run_dir.string();
    REQUIRE(run(train_args) == 0);
    const std::string metrics = bytes(run_dir / "metrics.csv");
    int rows = 0;
    for (char c : metrics) rows += c == '\n';
    CHECK(rows == 1 + 6);

    // Resume with the same stage-1 settings: the detector is reused as is.
    const std::string det_before = bytes(run_dir / "detector.model");
    const auto stamp = fs::last_write_time(run_dir / "detector.model");
    std::this_thread::sleep_for(std::chrono::milliseconds(20));
    REQUIRE(run(train_args + " --resume --set train.unified_epochs=2") == 0);
    CHECK(bytes(run_dir / "detector.model") == det_before);
    CHECK(fs::last_write_time(run_dir / "detector.model") == stamp);
    int rows_after = 0;
    for (char c : bytes(run_dir / "metrics.csv")) rows_after += c == '\n';
    CHECK(rows_after == 1 + 4 + 4);  // stages 1-2 kept, stage 3 rerun for 2 epochs

    // A different stage-1 setting is refused.
    std::string log;
    CHECK(run(train_args + " --resume --set train.learning_rate=0.5", &log) != 0);
    CHECK(log.find("resume refused") != std::string::npos);

    // Evaluation of the detector and the unified model on fresh scenes.
    REQUIRE(run("gen --seed 77 --set data.count=8 --out " + (kRoot / "test").string()) == 0);
    REQUIRE(run("eval --dataset " + (kRoot / "test").string() + " --model " +
                    (run_dir / "detector.model").string() + " --model " +
                    (run_dir / "unified.model").string() + " --out " + (kRoot / "eval").string(),
                &log) == 0);
    CHECK(log.find("detector: mse") != std::string::npos);
    CHECK(log.find("unified: mse") != std::string::npos);
    const std::string curves = bytes(kRoot / "eval" / "curves.csv");
    CHECK(curves.find(",detector\n") != std::string::npos);
    CHECK(curves.find(",unified\n") != std::string::npos);

    // Inference with both models.
    const Dataset test = read_dataset(kRoot / "test");
    const TorsoBox& t = test.annotations[0].torso;
    const std::string img = (kRoot / "test" / "images" / "000000.pgm").string();
    const std::string torso = std::to_string(t.u) + "," + std::to_string(t.v) + "," +
                              std::to_string(t.w) + "," + std::to_string(t.h);
    for (const char* model : {"detector.model", "unified.model"}) {
      const fs::path out = kRoot / (std::string("infer_") + model);
      REQUIRE(run("infer --model " + (run_dir / model).string() + " --image " + img +
                  " --torso " + torso + " --out " + out.string()) == 0);
      const json pred = json::parse(bytes(out / "prediction.json"));
      REQUIRE(pred["joints"].size() == 7);
      CHECK(pred["joints"][0]["name"] == "head");
      // The dumped heat-maps agree with the reported positions.
      const ParamFile maps = read_param_file(out / "heatmaps.pgnn");
      const Tensor& hm = maps.get("heatmaps");
      const int stride = pred["stride"].get<int>();
      for (int j = 0; j < 7; ++j) {
        const ArgMax am = argmax2d(hm, j);
        CHECK(pred["joints"][j]["u"].get<double>() == doctest::Approx(stride * am.col + (stride - 1) / 2.0));
        CHECK(pred["joints"][j]["v"].get<double>() == doctest::Approx(stride * am.row + (stride - 1) / 2.0));
        CHECK(pred["joints"][j]["confidence"].get<double>() == doctest::Approx(am.value));
      }
    }
    // The unified model needs the torso box.
    CHECK(run("infer --model " + (run_dir / "unified.model").string() + " --image " + img +
              " --out " + (kRoot / "infer_x").string(), &log) != 0);
    CHECK(log.find("torso") != std::string::npos);
  }

  SUBCASE("resume without a previous run") {
    std::string log;
    CHECK(run("train --config " + cfg.string() + " --dataset " + data.string() + " --out " +
              (kRoot / "none").string() + " --resume", &log) != 0);
    CHECK(log.find("no previous run") != std::string::npos);
  }
}

TEST_CASE_FIXTURE(Fixture, "selftest") {
  std::string log;
  CHECK(run("selftest", &log) == 0);
  CHECK(log.find("selftest: all checks passed") != std::string::npos);
  CHECK(run("selftest --sabotage-fft", &log) != 0);
  CHECK(log.find("FAIL fft_equivalence") != std::string::npos);
}
