#include "posegraph/selftest.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>

#include "posegraph/conv.hpp"
#include "posegraph/detector.hpp"
#include "posegraph/eval.hpp"
#include "posegraph/nn.hpp"
#include "posegraph/spatial.hpp"

namespace posegraph {

namespace {

using Clock = std::chrono::steady_clock;

CheckResult timed(const std::string& name, double threshold,
                  const std::function<void(CheckResult&)>& body) {
  CheckResult r;
  r.name = name;
  r.threshold = threshold;
  const auto start = Clock::now();
  try {
    body(r);
  } catch (const std::exception& e) {
    r.passed = false;
    r.detail = std::string("error: ") + e.what();
  }
  r.seconds = std::chrono::duration<double>(Clock::now() - start).count();
  return r;
}

// Lets the gradient checker drive the detector: the input replaces bank 0
// of a fixed pyramid, and only parameter gradients are compared.
class DetectorAdapter final : public Layer {
 public:
  DetectorAdapter(PartDetector detector, PyramidInput pyramid)
      : detector_(std::move(detector)), pyramid_(std::move(pyramid)) {}

  LayerKind kind() const override { return LayerKind::sequential; }
  Tensor forward(const Tensor& input) override {
    pyramid_.banks[0] = input;
    return detector_.forward(pyramid_).maps;
  }
  Tensor backward(const Tensor& grad_out) override {
    detector_.backward(grad_out);
    return Tensor(pyramid_.banks[0].shape());
  }
  std::vector<Parameter*> parameters() override { return detector_.parameters(); }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<DetectorAdapter>(*this); }

 private:
  PartDetector detector_;
  PyramidInput pyramid_;
};

SpatialModelParams random_spatial_params(int joints, int kernel, std::mt19937_64& rng,
                                         bool nonnegative) {
  JointSet set;
  for (int j = 0; j < joints; ++j) set.names.push_back("j" + std::to_string(j));
  SpatialModelParams p(set, set.names, kernel, 1.0, 0.01);
  if (nonnegative) {
    p.kernels = random_uniform(p.kernels.shape(), rng, 0.0, 1.0);
    p.biases = random_uniform(p.biases.shape(), rng, 0.0, 0.1);
  } else {
    p.kernels = random_normal(p.kernels.shape(), rng);
    p.biases = random_normal(p.biases.shape(), rng);
  }
  return p;
}

}  // namespace

std::string format_check(const CheckResult& r) {
  char buf[128];
  std::snprintf(buf, sizeof buf, " measured=%.3g threshold=%.3g [%.1f s]", r.measured,
                r.threshold, r.seconds);
  std::string line = std::string(r.passed ? "PASS " : "FAIL ") + r.name + buf;
  if (!r.detail.empty()) line += " (" + r.detail + ")";
  return line;
}

CheckResult check_gradients(int seeds) {
  return timed("gradients", 1e-4, [&](CheckResult& r) {
    struct Case {
      std::string name;
      std::function<std::unique_ptr<Layer>(std::mt19937_64&)> make;
      std::function<Tensor(std::mt19937_64&)> input;
      GradCheckOptions options{};
    };
    auto normal = [](Shape s) { return [s](std::mt19937_64& g) { return random_normal(s, g); }; };
    auto uniform = [](Shape s, double lo, double hi) {
      return [=](std::mt19937_64& g) { return random_uniform(s, g, lo, hi); };
    };
    auto conv = [](int in, int out, int k, int pad) {
      return [=](std::mt19937_64& g) {
        auto c = std::make_unique<ConvLayer>(in, out, k, pad);
        c->init(g);
        axpy(c->biases().value, 1.0, random_normal(c->biases().value.shape(), g, 0.1));
        return std::unique_ptr<Layer>(std::move(c));
      };
    };
    auto spatial = [](SpatialMode mode, ConvRoute route) {
      return [=](std::mt19937_64& g) {
        auto m = std::make_unique<SpatialModel>(
            random_spatial_params(2, 5, g, mode == SpatialMode::bypass), mode);
        m->set_route(route);
        return std::unique_ptr<Layer>(std::move(m));
      };
    };
    auto detector = [](int banks) {
      return [=](std::mt19937_64& g) {
        DetectorConfig c;
        c.num_banks = banks;
        c.stages = {{3, 2, true}};
        c.fc_kernel = 3;
        c.fc_features = 3;
        c.num_joints = 2;
        PartDetector d(c);
        d.init(g());
        // Nonzero biases so the ReLUeps units are not all on one side.
        for (Parameter* p : d.parameters()) {
          if (p->name.ends_with(".bias")) p->value = random_normal(p->value.shape(), g, 0.1);
        }
        PyramidInput pyr = build_pyramid(random_uniform({1, 20, 20}, g, 0.0, 1.0), banks);
        return std::unique_ptr<Layer>(std::make_unique<DetectorAdapter>(d, pyr));
      };
    };
    GradCheckOptions params_only;
    params_only.check_input = false;

    std::vector<Case> cases = {
        {"conv3x3_pad1", conv(2, 3, 3, 1), normal({2, 7, 7})},
        {"conv5x5_valid", conv(1, 2, 5, 0), normal({1, 9, 9})},
        {"maxpool", [](auto&) { return std::unique_ptr<Layer>(std::make_unique<MaxPoolLayer>()); },
         normal({2, 6, 6})},
        {"relu_eps", [](auto&) { return std::unique_ptr<Layer>(std::make_unique<ReluEpsLayer>(1e-3)); },
         normal({2, 5, 5})},
        {"softplus_b0.5", [](auto&) { return std::unique_ptr<Layer>(std::make_unique<SoftPlusLayer>(0.5)); },
         normal({1, 5, 5})},
        {"softplus_b2", [](auto&) { return std::unique_ptr<Layer>(std::make_unique<SoftPlusLayer>(2.0)); },
         normal({1, 5, 5})},
        {"log", [](auto&) { return std::unique_ptr<Layer>(std::make_unique<LogLayer>()); },
         uniform({2, 4, 4}, 0.5, 2.0)},
        {"exp", [](auto&) { return std::unique_ptr<Layer>(std::make_unique<ExpLayer>()); },
         normal({2, 4, 4})},
        {"lcn", [](auto&) { return std::unique_ptr<Layer>(std::make_unique<LcnLayer>()); },
         normal({2, 12, 12})},
        {"upsample_nearest",
         [](auto&) {
           return std::unique_ptr<Layer>(std::make_unique<UpsampleLayer>(2, UpsampleMethod::nearest));
         },
         normal({2, 4, 4})},
        {"upsample_bilinear",
         [](auto&) {
           return std::unique_ptr<Layer>(std::make_unique<UpsampleLayer>(2, UpsampleMethod::bilinear));
         },
         normal({2, 4, 5})},
        {"sequential",
         [](std::mt19937_64& g) {
           auto s = std::make_unique<Sequential>();
           s->add<ConvLayer>(1, 3, 3).init(g);
           s->add<ReluEpsLayer>(1e-3);
           s->add<MaxPoolLayer>();
           s->add<ConvLayer>(3, 2, 3).init(g);
           return std::unique_ptr<Layer>(std::move(s));
         },
         normal({1, 10, 10})},
        {"spatial_direct", spatial(SpatialMode::trained, ConvRoute::direct),
         uniform({2, 8, 8}, 0.05, 1.0)},
        {"spatial_fft", spatial(SpatialMode::trained, ConvRoute::fft), uniform({2, 8, 8}, 0.05, 1.0)},
        {"spatial_bypass", spatial(SpatialMode::bypass, ConvRoute::direct),
         uniform({2, 8, 8}, 0.05, 1.0)},
        {"detector_1bank", detector(1), uniform({1, 20, 20}, -1.0, 1.0), params_only},
        {"detector_2bank", detector(2), uniform({1, 20, 20}, -1.0, 1.0), params_only},
    };

    std::string worst;
    for (const auto& c : cases) {
      for (int s = 0; s < seeds; ++s) {
        std::mt19937_64 rng(1000 + 17 * static_cast<std::uint64_t>(s));
        auto layer = c.make(rng);
        const Tensor x = c.input(rng);
        const GradCheckReport rep = grad_check(*layer, x, rng(), c.options);
        if (rep.max_relative_error >= r.measured) {
          r.measured = rep.max_relative_error;
          worst = c.name + " seed " + std::to_string(s) + " at " + rep.worst_entry;
        }
      }
    }
    r.passed = r.measured < r.threshold;
    r.detail = std::to_string(cases.size()) + " layers x " + std::to_string(seeds) +
               " seeds; worst " + worst;
  });
}

CheckResult check_fft_equivalence(int cases, std::uint64_t seed) {
  return timed("fft_equivalence", 1e-9, [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    int larger = 0;
    for (int i = 0; i < cases; ++i) {
      // Kernel heights sweep 3..65; widths are drawn independently.
      const int kh = 3 + 2 * static_cast<int>(std::lround(31.0 * i / std::max(cases - 1, 1)));
      const int kw = 3 + 2 * std::uniform_int_distribution<int>(0, (kh - 3) / 2)(rng);
      const int h = std::uniform_int_distribution<int>(4, 72)(rng);
      const int w = std::uniform_int_distribution<int>(4, 72)(rng);
      const int channels = std::uniform_int_distribution<int>(1, 2)(rng);
      const Tensor input = random_normal({channels, h, w}, rng);
      const ConvKernel kernel(random_normal({1, kh, kw}, rng));
      PaddingSpec padding;
      switch (i % 3) {
        case 0: padding = PaddingSpec::same(); break;
        case 1: padding = PaddingSpec::full(); break;
        default: {
          // Valid mode with enough padding to keep the output non-empty.
          const int need = std::max({0, (kh - h + 1) / 2 + 1, (kw - w + 1) / 2 + 1});
          padding = PaddingSpec::valid(need + std::uniform_int_distribution<int>(0, 3)(rng));
        }
      }
      larger += kh > h || kw > w;
      const double d = max_abs_diff(conv2d_fft(input, kernel, padding),
                                    conv2d_direct(input, kernel, padding));
      r.measured = std::max(r.measured, d);
    }
    // Both spatial-model routes on a map narrower than the kernel.
    std::mt19937_64 g(seed + 1);
    SpatialModel direct(random_spatial_params(3, 33, g, false));
    SpatialModel fft = direct;
    direct.set_route(ConvRoute::direct);
    fft.set_route(ConvRoute::fft);
    const Tensor unary = random_uniform({3, 16, 12}, g, 0.0, 1.0);
    const Tensor a = direct.forward(unary), b = fft.forward(unary);
    double rel = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      rel = std::max(rel, std::abs(a[i] - b[i]) / std::max(std::abs(a[i]), 1e-300));
    }
    r.measured = std::max(r.measured, rel);
    r.passed = r.measured <= r.threshold;
    char buf[160];
    std::snprintf(buf, sizeof buf, "%d cases, %d with kernel larger than input; spatial routes rel %.3g",
                  cases, larger, rel);
    r.detail = buf;
  });
}

CheckResult check_dense_vs_sliding(int seeds) {
  return timed("dense_vs_sliding", 1e-6, [&](CheckResult& r) {
    DetectorConfig config;
    config.num_banks = 1;
    for (int s = 0; s < seeds; ++s) {
      PartDetector det(config);
      det.init(100 + static_cast<std::uint64_t>(s));
      std::mt19937_64 rng(200 + static_cast<std::uint64_t>(s));
      const Tensor image = random_uniform({1, 64, 64}, rng, 0.0, 1.0);
      const HeatMapSet dense = det.evaluate_image(image);
      const HeatMapSet slide = sliding_window_forward(image, det);
      r.measured = std::max(r.measured, max_abs_diff(dense.maps, slide.maps));
    }
    r.passed = r.measured <= r.threshold;
    r.detail = std::to_string(seeds) + " seeds, 64x64 input, window " +
               std::to_string(config.window());
  });
}

CheckResult check_oracle_bypass(int seeds) {
  return timed("oracle_bypass", 1e-10, [&](CheckResult& r) {
    for (int s = 0; s < seeds; ++s) {
      std::mt19937_64 rng(300 + static_cast<std::uint64_t>(s));
      const int kernel = 3 + 2 * (s % 4);
      const SpatialModelParams params = random_spatial_params(3, kernel, rng, true);
      const HeatMapSet unaries{random_uniform({3, 8, 8}, rng, 0.0, 1.0), 4};
      const SpatialOracleResult exact = mrf_oracle(unaries, params);
      SpatialModel model(params, SpatialMode::bypass);
      const Tensor out = model.forward(unaries.maps);
      for (int a = 0; a < 3; ++a) {
        for (int y = 0; y < 8; ++y) {
          for (int x = 0; x < 8; ++x) {
            const double want = exact.marginals.maps.at(a, y, x) * exact.partition[a];
            const double got = out.at(a, y, x);
            r.measured = std::max(r.measured, std::abs(got - want) / std::abs(want));
          }
        }
      }
    }
    r.passed = r.measured <= r.threshold;
    r.detail = std::to_string(seeds) + " seeds, 8x8 maps, 3 joints, kernels 3..9";
  });
}

CheckResult check_bias_rescue() {
  const double eps = 0.01;
  return timed("bias_rescue", 10 * eps, [&](CheckResult& r) {
    // Face two cells above the shoulder. The detector found the face at
    // (4, 4) but missed the shoulder at (6, 4) entirely; a weak spurious
    // shoulder response sits in a far corner.
    JointSet inputs{{"face", "shoulder"}, false};
    auto face_max = [&](double shoulder_bias) {
      SpatialModelParams p(inputs, {"face"}, 5, 1.0, eps);
      const double tiny = 1e-9;
      Tensor self(1, 5, 5, tiny), from_shoulder(1, 5, 5, tiny);
      self.at(0, 2, 2) = 1.0;
      from_shoulder.at(0, 0, 2) = 1.0;  // face at offset (-2, 0) from the shoulder
      for (auto* k : {&self, &from_shoulder}) {
        for (double& v : k->values()) v = inverse_softplus(v, p.beta);
      }
      p.set_kernel(0, 0, self);
      p.set_kernel(0, 1, from_shoulder);
      p.bias(0, 0) = inverse_softplus(tiny, p.beta);
      p.bias(0, 1) = inverse_softplus(shoulder_bias, p.beta);
      Tensor unary(2, 9, 9);
      unary.at(0, 4, 4) = 1.0;
      unary.at(1, 0, 8) = 0.3;
      SpatialModel model(p, SpatialMode::trained);
      const Tensor out = model.forward(unary);
      return argmax2d(out, 0).value;
    };
    const double rescued = face_max(0.5);
    const double unrescued = face_max(1e-9);
    r.measured = rescued;
    r.passed = rescued > r.threshold && unrescued < r.threshold;
    char buf[80];
    std::snprintf(buf, sizeof buf, "without bias the face peak is %.3g", unrescued);
    r.detail = buf;
  });
}

CheckResult check_detection_metric(int sets, std::uint64_t seed) {
  return timed("detection_metric", 0.0, [&](CheckResult& r) {
    std::mt19937_64 rng(seed);
    auto uni = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
    std::size_t mismatches = 0, non_monotone = 0;
    for (int s = 0; s < sets; ++s) {
      const int nj = uni(1, 4), ni = uni(1, 8);
      JointSchema schema;
      for (int j = 0; j < nj; ++j) schema.names.push_back("p" + std::to_string(j));
      // Radii i/20 and integer offsets keep every comparison exact, so the
      // counter can work in integers: hit <=> 400 (du^2 + dv^2) <= i^2 h^2.
      std::vector<int> radius_steps;
      for (int i = 0; i <= 20; ++i) {
        if (uni(0, 1)) radius_steps.push_back(i);
      }
      if (radius_steps.empty()) radius_steps.push_back(uni(0, 20));
      std::vector<double> radii;
      for (int i : radius_steps) radii.push_back(i / 20.0);

      std::vector<Annotation> gt;
      std::vector<Prediction> pred;
      std::vector<std::vector<long>> hits(nj, std::vector<long>(radii.size(), 0));
      std::vector<long> visible(nj, 0);
      for (int n = 0; n < ni; ++n) {
        Annotation a;
        a.image_id = "img" + std::to_string(n);
        const int h = uni(4, 20);
        a.torso = {0.0, 0.0, 10.0, static_cast<double>(h)};
        Prediction p{a.image_id, {}};
        for (int j = 0; j < nj; ++j) {
          const int u = uni(0, 63), v = uni(0, 63);
          const bool vis = n == 0 || uni(0, 4) > 0;
          a.joints.push_back({static_cast<double>(u), static_cast<double>(v), vis});
          const int du = uni(-h, h), dv = uni(-h, h);
          p.joints.push_back({static_cast<double>(u + du), static_cast<double>(v + dv), true});
          if (!vis) continue;
          ++visible[j];
          for (std::size_t ri = 0; ri < radii.size(); ++ri) {
            const long i = radius_steps[ri];
            hits[j][ri] += 400L * (du * du + dv * dv) <= i * i * h * h;
          }
        }
        gt.push_back(a);
        pred.push_back(p);
      }
      std::shuffle(pred.begin(), pred.end(), rng);
      const DetectionCurve c = detection_rate(pred, gt, schema, radii, "t");
      long total_visible = 0;
      for (long v : visible) total_visible += v;
      for (std::size_t ri = 0; ri < radii.size(); ++ri) {
        long pooled = 0;
        for (int j = 0; j < nj; ++j) {
          pooled += hits[j][ri];
          mismatches += c.rates[j][ri] != static_cast<double>(hits[j][ri]) / visible[j];
          if (ri > 0) non_monotone += c.rates[j][ri] < c.rates[j][ri - 1];
        }
        mismatches += c.mean[ri] != static_cast<double>(pooled) / total_visible;
        if (ri > 0) non_monotone += c.mean[ri] < c.mean[ri - 1];
      }
    }
    r.measured = static_cast<double>(mismatches + non_monotone);
    r.passed = mismatches == 0 && non_monotone == 0;
    r.detail = std::to_string(sets) + " sets; " + std::to_string(mismatches) + " mismatches, " +
               std::to_string(non_monotone) + " monotonicity violations";
  });
}

std::vector<CheckResult> run_selftest() {
  return {check_gradients(),      check_fft_equivalence(), check_dense_vs_sliding(),
          check_oracle_bypass(),  check_bias_rescue(),     check_detection_metric()};
}

}  // namespace posegraph
