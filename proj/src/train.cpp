#include "posegraph/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <thread>

#include "posegraph/log.hpp"

namespace posegraph {

// ---------------------------------------------------------------------------
// Optimizer

OptimizerState make_optimizer_state(const std::vector<const Tensor*>& params) {
  OptimizerState s;
  for (const Tensor* p : params) s.velocity.emplace_back(p->shape());
  return s;
}

void nesterov_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                   OptimizerState& state, double lr, double mu) {
  if (params.size() != grads.size() || params.size() != state.velocity.size()) {
    throw Error("nesterov_step: parameter, gradient and state counts differ");
  }
  if (!(mu >= 0.0 && mu < 1.0)) throw Error("nesterov_step: momentum must lie in [0, 1)");
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(*params[i], *grads[i], "nesterov_step");
    require_same_shape(*params[i], state.velocity[i], "nesterov_step");
    if (!grads[i]->all_finite()) throw Error("nesterov_step: non-finite gradient");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& v = state.velocity[i];
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    for (std::size_t k = 0; k < p.size(); ++k) {
      v[k] = mu * v[k] - lr * g[k];
      p[k] += v[k];
    }
  }
}

NesterovOptimizer::NesterovOptimizer(std::vector<Parameter*> params, double lr, double mu)
    : params_(std::move(params)), lr_(lr), mu_(mu) {
  if (!(mu >= 0.0 && mu < 1.0)) throw Error("momentum must lie in [0, 1)");
  if (!(lr >= 0.0)) throw Error("learning rate must be nonnegative");
  std::vector<const Tensor*> values;
  for (const Parameter* p : params_) values.push_back(&p->value);
  state_ = make_optimizer_state(values);
}

void NesterovOptimizer::begin_step() {
  if (in_step_) throw Error("NesterovOptimizer: begin_step() called twice");
  saved_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) {
    saved_.push_back(params_[i]->value);
    axpy(params_[i]->value, mu_, state_.velocity[i]);
    params_[i]->grad.fill(0.0);
  }
  in_step_ = true;
}

void NesterovOptimizer::step() {
  if (!in_step_) throw Error("NesterovOptimizer: step() without begin_step()");
  std::vector<Tensor*> values;
  std::vector<const Tensor*> grads;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    params_[i]->value = std::move(saved_[i]);
    values.push_back(&params_[i]->value);
    grads.push_back(&params_[i]->grad);
  }
  in_step_ = false;
  nesterov_step(values, grads, state_, lr_, mu_);
  for (Parameter* p : params_) p->grad.fill(0.0);
}

// ---------------------------------------------------------------------------
// Targets and augmentation

HeatMapSet render_target(const Annotation& annotation, const HeatMapGeometry& geometry,
                         double sigma) {
  const double img_w = static_cast<double>(geometry.width) * geometry.stride;
  const double img_h = static_cast<double>(geometry.height) * geometry.stride;
  HeatMapSet out{Tensor(static_cast<int>(annotation.joints.size()), geometry.height,
                        geometry.width),
                 geometry.stride};
  for (std::size_t j = 0; j < annotation.joints.size(); ++j) {
    const JointAnnotation& ja = annotation.joints[j];
    if (!ja.visible) continue;
    if (ja.u < 0.0 || ja.v < 0.0 || ja.u > img_w - 1.0 || ja.v > img_h - 1.0) {
      warn("image '" + annotation.image_id + "': joint " + std::to_string(j) +
           " lies outside the image and is clamped to the border");
    }
    out.maps.set_channel(static_cast<int>(j), render_gaussian(geometry, ja.u, ja.v, sigma));
  }
  return out;
}

void AugmentConfig::validate() const {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw Error("flip_prob must lie in [0, 1]");
  if (!(scale_min >= 0.7 && scale_max <= 1.3 && scale_min <= scale_max)) {
    throw Error("scale range must satisfy 0.7 <= scale_min <= scale_max <= 1.3");
  }
}

namespace {

bool joints_inside(const Annotation& a, int height, int width) {
  for (const auto& j : a.joints) {
    if (!j.visible) continue;
    if (j.u < 0.0 || j.v < 0.0 || j.u > width - 1.0 || j.v > height - 1.0) return false;
  }
  return true;
}

}  // namespace

AugmentTransform draw_transform(const AugmentConfig& config, const Annotation& annotation,
                                int height, int width, std::mt19937_64& rng) {
  config.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> scale(config.scale_min, config.scale_max);
  AugmentTransform t;
  t.flip = unit(rng) < config.flip_prob;
  for (int attempt = 0; attempt < 10; ++attempt) {
    t.scale = scale(rng);
    // Flipping never moves a joint out of the frame, so only the scale matters.
    AugmentTransform probe{false, t.scale};
    Annotation moved = annotation;
    const double cu = (width - 1) / 2.0, cv = (height - 1) / 2.0;
    for (auto& j : moved.joints) {
      j.u = cu + probe.scale * (j.u - cu);
      j.v = cv + probe.scale * (j.v - cv);
    }
    if (joints_inside(moved, height, width)) return t;
  }
  t.scale = 1.0;
  return t;
}

Tensor transform_grid(const Tensor& grid, const AugmentTransform& t,
                      const std::vector<int>& channel_perm) {
  if (!(t.scale > 0.0)) throw Error("transform scale must be positive");
  const int h = grid.height(), w = grid.width();
  if (t.flip && !channel_perm.empty() &&
      static_cast<int>(channel_perm.size()) != grid.channels()) {
    throw Error("channel permutation does not match the channel count");
  }
  const double cy = (h - 1) / 2.0, cx = (w - 1) / 2.0;
  Tensor out(grid.shape());
  for (int c = 0; c < grid.channels(); ++c) {
    const int src_c = t.flip && !channel_perm.empty() ? channel_perm[static_cast<std::size_t>(c)] : c;
    for (int y = 0; y < h; ++y) {
      const double sy = cy + (y - cy) / t.scale;
      const double fy = std::floor(sy);
      const int y0 = static_cast<int>(fy);
      const double wy = sy - fy;
      for (int x = 0; x < w; ++x) {
        const double dx = (x - cx) / t.scale;
        const double sx = t.flip ? cx - dx : cx + dx;
        const double fx = std::floor(sx);
        const int x0 = static_cast<int>(fx);
        const double wx = sx - fx;
        double acc = 0.0;
        for (int a = 0; a < 2; ++a) {
          const int yy = y0 + a;
          const double ky = a ? wy : 1.0 - wy;
          if (ky == 0.0 || yy < 0 || yy >= h) continue;
          for (int b = 0; b < 2; ++b) {
            const int xx = x0 + b;
            const double kx = b ? wx : 1.0 - wx;
            if (kx == 0.0 || xx < 0 || xx >= w) continue;
            acc += ky * kx * grid.at(src_c, yy, xx);
          }
        }
        out.at(c, y, x) = acc;
      }
    }
  }
  return out;
}

Annotation transform_annotation(const Annotation& annotation, const JointSchema& schema,
                                const AugmentTransform& t, int height, int width) {
  Annotation out = annotation;
  const double cu = (width - 1) / 2.0, cv = (height - 1) / 2.0;
  if (t.flip) {
    const auto perm = schema.flip_permutation();
    if (perm.size() != annotation.joints.size()) {
      throw Error("annotation joint count does not match the schema");
    }
    for (std::size_t k = 0; k < perm.size(); ++k) {
      out.joints[k] = annotation.joints[static_cast<std::size_t>(perm[k])];
      out.joints[k].u = (width - 1) - out.joints[k].u;
    }
    out.torso.u = (width - 1) - (annotation.torso.u + annotation.torso.w);
  }
  if (t.scale != 1.0) {
    for (auto& j : out.joints) {
      j.u = cu + t.scale * (j.u - cu);
      j.v = cv + t.scale * (j.v - cv);
    }
    out.torso.u = cu + t.scale * (out.torso.u - cu);
    out.torso.v = cv + t.scale * (out.torso.v - cv);
    out.torso.w *= t.scale;
    out.torso.h *= t.scale;
  }
  return out;
}

std::pair<Tensor, Annotation> augment(const Tensor& image, const Annotation& annotation,
                                      const JointSchema& schema, const AugmentConfig& config,
                                      std::mt19937_64& rng) {
  const AugmentTransform t =
      draw_transform(config, annotation, image.height(), image.width(), rng);
  return {transform_grid(image, t),
          transform_annotation(annotation, schema, t, image.height(), image.width())};
}

// ---------------------------------------------------------------------------
// Unified model

PoseModel::PoseModel(PartDetector detector, SpatialModel spatial)
    : detector_(std::move(detector)),
      spatial_(std::move(spatial)),
      num_joints_(detector_.config().num_joints) {
  const int expected = num_joints_ + (spatial_.inputs().has_torso ? 1 : 0);
  if (spatial_.inputs().size() != expected) {
    throw Error("spatial model expects " + std::to_string(spatial_.inputs().size()) +
                " inputs but the detector provides " + std::to_string(expected));
  }
}

Tensor spatial_input(const HeatMapSet& detector_maps, const Annotation& annotation,
                     bool with_torso) {
  if (!with_torso) return detector_maps.maps;
  return concat_channels({detector_maps.maps, render_torso_map(annotation, detector_maps.geometry())});
}

HeatMapSet PoseModel::forward(const PyramidInput& pyramid, const Tensor& torso_map) {
  const HeatMapSet unary = detector_.forward(pyramid);
  const Tensor input = uses_torso() ? concat_channels({unary.maps, torso_map}) : unary.maps;
  return {spatial_.forward(input), unary.stride};
}

void PoseModel::backward(const Tensor& grad_maps) {
  const Tensor g = spatial_.backward(grad_maps);
  Tensor g_det(num_joints_, g.height(), g.width());
  std::copy(g.data(), g.data() + g_det.size(), g_det.data());
  detector_.backward(g_det);
}

HeatMapSet PoseModel::evaluate(const Tensor& image, const Annotation& annotation) const {
  PoseModel copy(*this);
  const PyramidInput pyr = build_pyramid(image, detector_.config().num_banks);
  Tensor torso;
  if (uses_torso()) {
    const int s = detector_.stride();
    torso = render_torso_map(annotation, {image.height() / s, image.width() / s, s});
  }
  return copy.forward(pyr, torso);
}

std::vector<Parameter*> PoseModel::parameters() {
  auto out = detector_.parameters();
  auto s = spatial_.parameters();
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

void PoseModel::zero_grad() {
  detector_.zero_grad();
  spatial_.zero_grad();
}

// ---------------------------------------------------------------------------
// Training configuration and metrics

double TrainConfig::stage3_detector_rate() const {
  return unified_learning_rate > 0.0 ? unified_learning_rate : 1e-3 * learning_rate;
}

double TrainConfig::stage3_spatial_rate() const {
  return unified_spatial_learning_rate > 0.0 ? unified_spatial_learning_rate
                                             : 0.1 * spatial_learning_rate;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0 && spatial_learning_rate >= 0.0 && unified_learning_rate >= 0.0 &&
        unified_spatial_learning_rate >= 0.0)) {
    throw Error("learning rates must be nonnegative");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw Error("momentum must lie in [0, 1)");
  if (batch_size < 1) throw Error("batch_size must be positive");
  if (detector_epochs < 0 || spatial_epochs < 0 || unified_epochs < 0) {
    throw Error("epoch counts must be nonnegative");
  }
  if (!(target_sigma > 0.0)) throw Error("target_sigma must be positive");
  augment.validate();
  if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
    throw Error("validation_fraction must lie in [0, 1)");
  }
  if (threads < 1) throw Error("threads must be positive");
}

ConfigMap TrainConfig::to_config() const {
  std::vector<std::string> radii;
  for (double r : report_radii) radii.push_back(format_double(r));
  return {{"train.learning_rate", format_double(learning_rate)},
          {"train.spatial_learning_rate", format_double(spatial_learning_rate)},
          {"train.unified_learning_rate", format_double(unified_learning_rate)},
          {"train.unified_spatial_learning_rate", format_double(unified_spatial_learning_rate)},
          {"train.momentum", format_double(momentum)},
          {"train.batch_size", std::to_string(batch_size)},
          {"train.detector_epochs", std::to_string(detector_epochs)},
          {"train.spatial_epochs", std::to_string(spatial_epochs)},
          {"train.unified_epochs", std::to_string(unified_epochs)},
          {"train.target_sigma", format_double(target_sigma)},
          {"train.flip_prob", format_double(augment.flip_prob)},
          {"train.scale_min", format_double(augment.scale_min)},
          {"train.scale_max", format_double(augment.scale_max)},
          {"train.seed", std::to_string(seed)},
          {"train.validation_fraction", format_double(validation_fraction)},
          {"train.report_radii", join(radii, ',')}};
}

TrainConfig TrainConfig::from_config(const ConfigMap& config) {
  TrainConfig t;
  auto has = [&](const char* k) { return config.count(k) > 0; };
  if (has("train.learning_rate")) t.learning_rate = get_double(config, "train.learning_rate");
  if (has("train.spatial_learning_rate"))
    t.spatial_learning_rate = get_double(config, "train.spatial_learning_rate");
  if (has("train.unified_learning_rate"))
    t.unified_learning_rate = get_double(config, "train.unified_learning_rate");
  if (has("train.unified_spatial_learning_rate"))
    t.unified_spatial_learning_rate = get_double(config, "train.unified_spatial_learning_rate");
  if (has("train.momentum")) t.momentum = get_double(config, "train.momentum");
  if (has("train.batch_size")) t.batch_size = get_int(config, "train.batch_size");
  if (has("train.detector_epochs")) t.detector_epochs = get_int(config, "train.detector_epochs");
  if (has("train.spatial_epochs")) t.spatial_epochs = get_int(config, "train.spatial_epochs");
  if (has("train.unified_epochs")) t.unified_epochs = get_int(config, "train.unified_epochs");
  if (has("train.target_sigma")) t.target_sigma = get_double(config, "train.target_sigma");
  if (has("train.flip_prob")) t.augment.flip_prob = get_double(config, "train.flip_prob");
  if (has("train.scale_min")) t.augment.scale_min = get_double(config, "train.scale_min");
  if (has("train.scale_max")) t.augment.scale_max = get_double(config, "train.scale_max");
  if (has("train.seed")) {
    const std::string& s = get_string(config, "train.seed");
    try {
      t.seed = std::stoull(s);
    } catch (const std::exception&) {
      throw Error("config key 'train.seed' expects an unsigned integer, got '" + s + "'");
    }
  }
  if (has("train.validation_fraction"))
    t.validation_fraction = get_double(config, "train.validation_fraction");
  if (has("train.report_radii")) t.report_radii = get_double_list(config, "train.report_radii");
  t.validate();
  return t;
}

std::string metrics_header(const std::vector<double>& radii) {
  std::string h = "stage,epoch,split,mse";
  for (double r : radii) h += ",det_rate@" + format_double(r);
  return h + "\n";
}

std::string format_metric_row(const MetricRow& row) {
  std::string s = std::to_string(row.stage) + "," + std::to_string(row.epoch) + "," + row.split +
                  "," + format_double(row.mse);
  for (double r : row.det_rates) s += "," + format_double(r);
  return s + "\n";
}

int threads_from_env() {
  const char* v = std::getenv("POSEGRAPH_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) {
    warn(std::string("ignoring invalid POSEGRAPH_THREADS='") + v + "'");
    return 1;
  }
  return static_cast<int>(std::min<long>(n, 256));
}

Prediction predict_from_maps(const std::string& image_id, const HeatMapSet& maps) {
  Prediction p{image_id, {}};
  for (const auto& j : extract_joints(maps)) p.joints.push_back({j.u, j.v, true});
  return p;
}

// ---------------------------------------------------------------------------
// Training internals

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t x = seed;
  for (std::uint64_t v : {a, b, c}) {
    x ^= v + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
    // splitmix64 finalizer
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    x ^= x >> 31;
  }
  return x;
}

// Runs fn(worker, slot) for every slot in [0, n); slot i goes to worker
// i % threads. The first exception is rethrown on the calling thread.
template <class Fn>
void run_slots(int threads, std::size_t n, Fn&& fn) {
  const int t = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  if (t <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(0, i);
    return;
  }
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(t));
  std::vector<std::thread> pool;
  for (int w = 0; w < t; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = static_cast<std::size_t>(w); i < n; i += static_cast<std::size_t>(t)) {
          fn(w, i);
        }
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct SampleResult {
  double loss = 0.0;
  Prediction prediction;
  Annotation truth;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

Split split_dataset(std::size_t n, double validation_fraction) {
  const auto nval = static_cast<std::size_t>(std::ceil(validation_fraction * n));
  Split s;
  for (std::size_t i = 0; i < n; ++i) (i + nval < n ? s.train : s.val).push_back(i);
  return s;
}

std::vector<Annotation> annotations_of(const Dataset& d, const std::vector<std::size_t>& idx) {
  std::vector<Annotation> out;
  for (std::size_t i : idx) out.push_back(d.annotations[i]);
  return out;
}

std::vector<double> rates_at(const std::vector<Prediction>& preds,
                             const std::vector<Annotation>& truth, const JointSchema& schema,
                             const std::vector<double>& radii) {
  if (preds.empty()) return std::vector<double>(radii.size(), 0.0);
  return detection_rate(preds, truth, schema, radii).mean;
}

// One epoch of mini-batch training. `Model` provides parameters() and
// zero_grad(); `sample` computes the loss of one sample on a worker copy,
// accumulating that copy's gradients. Per-sample gradients are summed in
// sample order, so the result does not depend on the thread count.
template <class Model, class SampleFn>
std::vector<SampleResult> run_epoch(Model& model, std::vector<NesterovOptimizer*> optimizers,
                                    const std::vector<std::size_t>& order, int batch_size,
                                    int threads, SampleFn&& sample) {
  std::vector<SampleResult> results(order.size());
  std::vector<Model> workers;
  for (int w = 0; w < threads; ++w) workers.push_back(model);
  const auto main_params = model.parameters();
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t count = std::min(order.size() - start, static_cast<std::size_t>(batch_size));
    for (auto* opt : optimizers) opt->begin_step();
    for (auto& w : workers) {
      auto wp = w.parameters();
      for (std::size_t i = 0; i < wp.size(); ++i) wp[i]->value = main_params[i]->value;
    }
    std::vector<std::vector<Tensor>> grads(count);
    run_slots(threads, count, [&](int w, std::size_t slot) {
      Model& m = workers[static_cast<std::size_t>(w)];
      m.zero_grad();
      results[start + slot] = sample(m, order[start + slot]);
      for (Parameter* p : m.parameters()) grads[slot].push_back(p->grad);
    });
    const double inv = 1.0 / static_cast<double>(count);
    for (std::size_t slot = 0; slot < count; ++slot) {
      if (!std::isfinite(results[start + slot].loss)) throw Error("loss is not finite");
      for (std::size_t i = 0; i < main_params.size(); ++i) {
        axpy(main_params[i]->grad, inv, grads[slot][i]);
      }
    }
    for (auto* opt : optimizers) opt->step();
  }
  return results;
}

MetricRow summarize(int stage, int epoch, const std::string& split,
                    const std::vector<SampleResult>& results, const JointSchema& schema,
                    const std::vector<double>& radii) {
  MetricRow row{stage, epoch, split, 0.0, {}};
  std::vector<Prediction> preds;
  std::vector<Annotation> truth;
  for (const auto& r : results) {
    row.mse += r.loss;
    preds.push_back(r.prediction);
    truth.push_back(r.truth);
  }
  if (!results.empty()) row.mse /= static_cast<double>(results.size());
  row.det_rates = rates_at(preds, truth, schema, radii);
  return row;
}

MetricRow eval_row(int stage, int epoch, const EvalOutput& e, const Dataset& d,
                   const std::vector<std::size_t>& idx, const std::vector<double>& radii) {
  return {stage, epoch, "val", e.mse, rates_at(e.predictions, annotations_of(d, idx), d.schema, radii)};
}

HeatMapGeometry map_geometry(const Tensor& image, int stride) {
  return {image.height() / stride, image.width() / stride, stride};
}

std::vector<std::size_t> shuffled(std::vector<std::size_t> order, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

// Spatial-model evaluation on stored detector heat-maps.
EvalOutput evaluate_spatial(const SpatialModel& model, const Dataset& d,
                            const std::vector<HeatMapSet>& cache,
                            const std::vector<std::size_t>& idx, double sigma, int threads) {
  EvalOutput out;
  out.predictions.resize(idx.size());
  std::vector<double> losses(idx.size());
  std::vector<SpatialModel> workers(static_cast<std::size_t>(std::max(threads, 1)), model);
  run_slots(threads, idx.size(), [&](int w, std::size_t k) {
    const std::size_t i = idx[k];
    const HeatMapSet& maps = cache[i];
    const Tensor input = spatial_input(maps, d.annotations[i], model.inputs().has_torso);
    HeatMapSet pred{workers[static_cast<std::size_t>(w)].forward(input), maps.stride};
    losses[k] = mse_loss(pred.maps, render_target(d.annotations[i], maps.geometry(), sigma).maps).loss;
    out.predictions[k] = predict_from_maps(d.annotations[i].image_id, pred);
  });
  for (double l : losses) out.mse += l;
  if (!idx.empty()) out.mse /= static_cast<double>(idx.size());
  return out;
}

void check_dataset(const Dataset& d, const DetectorConfig& dc) {
  if (d.images.size() != d.annotations.size()) throw Error("dataset images and annotations differ in count");
  if (dc.num_joints != d.schema.size()) {
    throw Error("detector predicts " + std::to_string(dc.num_joints) + " joints, schema has " +
                std::to_string(d.schema.size()));
  }
}

}  // namespace

EvalOutput evaluate_detector(const PartDetector& detector, const Dataset& dataset,
                             const std::vector<std::size_t>& indices, double target_sigma,
                             int threads) {
  EvalOutput out;
  out.predictions.resize(indices.size());
  std::vector<double> losses(indices.size());
  std::vector<PartDetector> workers(static_cast<std::size_t>(std::max(threads, 1)), detector);
  run_slots(threads, indices.size(), [&](int w, std::size_t k) {
    const std::size_t i = indices[k];
    const HeatMapSet maps = workers[static_cast<std::size_t>(w)].forward_image(dataset.images[i]);
    losses[k] = mse_loss(maps.maps, render_target(dataset.annotations[i], maps.geometry(),
                                                  target_sigma).maps)
                    .loss;
    out.predictions[k] = predict_from_maps(dataset.annotations[i].image_id, maps);
  });
  for (double l : losses) out.mse += l;
  if (!indices.empty()) out.mse /= static_cast<double>(indices.size());
  return out;
}

EvalOutput evaluate_pose_model(const PoseModel& model, const Dataset& dataset,
                               const std::vector<std::size_t>& indices, double target_sigma,
                               int threads) {
  EvalOutput out;
  out.predictions.resize(indices.size());
  std::vector<double> losses(indices.size());
  run_slots(threads, indices.size(), [&](int, std::size_t k) {
    const std::size_t i = indices[k];
    const HeatMapSet maps = model.evaluate(dataset.images[i], dataset.annotations[i]);
    losses[k] = mse_loss(maps.maps, render_target(dataset.annotations[i], maps.geometry(),
                                                  target_sigma).maps)
                    .loss;
    out.predictions[k] = predict_from_maps(dataset.annotations[i].image_id, maps);
  });
  for (double l : losses) out.mse += l;
  if (!indices.empty()) out.mse /= static_cast<double>(indices.size());
  return out;
}

TrainResult train_staged(const Dataset& dataset, const DetectorConfig& detector_config,
                         const SpatialConfig& spatial_config, const TrainConfig& cfg,
                         const TrainHooks& hooks) {
  cfg.validate();
  spatial_config.validate();
  check_dataset(dataset, detector_config);
  if (dataset.size() == 0) throw Error("cannot train on an empty dataset");
  const JointSchema& schema = dataset.schema;
  const Split split = split_dataset(dataset.size(), cfg.validation_fraction);
  if (split.train.empty()) throw Error("no training images after the validation split");
  const int threads = cfg.threads;
  const auto& radii = cfg.report_radii;
  const auto perm = schema.flip_permutation();

  auto emit = [&](TrainResult& r, MetricRow row) {
    if (hooks.on_metric) hooks.on_metric(row);
    r.metrics.push_back(std::move(row));
  };
  auto guarded = [](int stage, int epoch, auto&& body) {
    try {
      body();
    } catch (const Error& e) {
      throw Error("training failed in stage " + std::to_string(stage) + ", epoch " +
                  std::to_string(epoch) + ": " + e.what());
    }
  };

  // ---- stage 1: part detector on images
  PartDetector detector(detector_config);
  detector.init(mix_seed(cfg.seed, 1, 0, 0));
  TrainResult result{detector, {}, PoseModel(detector, SpatialModel(SpatialModelParams(
                                                 JointSet::from_schema(schema, spatial_config.use_torso),
                                                 schema.names, spatial_config.kernel_size,
                                                 spatial_config.beta, spatial_config.eps))),
                     {}};
  if (hooks.resume_detector) {
    if (!(hooks.resume_detector->config() == detector_config)) {
      throw Error("resumed detector was trained with a different configuration");
    }
    detector = *hooks.resume_detector;
  } else {
    NesterovOptimizer opt(detector.parameters(), cfg.learning_rate, cfg.momentum);
    for (int epoch = 1; epoch <= cfg.detector_epochs; ++epoch) {
      guarded(1, epoch, [&] {
        const auto order = shuffled(split.train, mix_seed(cfg.seed, 1, epoch, 0xffff));
        const auto res = run_epoch(detector, {&opt}, order, cfg.batch_size, threads,
                                   [&](PartDetector& m, std::size_t i) {
          std::mt19937_64 rng(mix_seed(cfg.seed, 1, epoch, i));
          auto [img, ann] = augment(dataset.images[i], dataset.annotations[i], schema, cfg.augment, rng);
          const HeatMapSet out = m.forward_image(img);
          const LossAndGrad lg = mse_loss(out.maps, render_target(ann, out.geometry(), cfg.target_sigma).maps);
          m.backward(lg.grad);
          return SampleResult{lg.loss, predict_from_maps(ann.image_id, out), ann};
        });
        emit(result, summarize(1, epoch, "train", res, schema, radii));
        const EvalOutput ev = evaluate_detector(detector, dataset, split.val, cfg.target_sigma, threads);
        emit(result, eval_row(1, epoch, ev, dataset, split.val, radii));
      });
    }
  }
  result.detector = detector;
  if (hooks.on_stage_done) hooks.on_stage_done(1, result);

  // ---- heat-map cache
  const int stride = detector.stride();
  std::vector<HeatMapSet> cache(dataset.size());
  run_slots(threads, dataset.size(), [&](int, std::size_t i) {
    cache[i] = detector.evaluate_image(dataset.images[i]);
  });
  if (!cfg.cache_dir.empty()) {
    std::filesystem::create_directories(cfg.cache_dir);
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto path = cfg.cache_dir / (dataset.annotations[i].image_id + ".pgnn");
      write_param_file(path, {"[heatmap]\nstride = " + std::to_string(stride) + "\n",
                              {{"heatmaps", cache[i].maps}}});
    }
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      const auto path = cfg.cache_dir / (dataset.annotations[i].image_id + ".pgnn");
      const ParamFile f = read_param_file(path);
      cache[i] = {f.get("heatmaps"), get_int(parse_ini(f.meta, path.string()), "heatmap.stride")};
    }
  }

  // ---- stage 2: spatial model on stored heat-maps
  SpatialModelParams init_params;
  if (hooks.resume_spatial && hooks.resume_detector) {
    init_params = *hooks.resume_spatial;
  } else {
    double mass = 0.0;
    std::size_t count = 0;
    for (std::size_t i : split.train) {
      for (double v : relu_eps_fwd(cache[i].maps, spatial_config.eps).values()) mass += v;
      count += cache[i].maps.size();
    }
    init_params = init_spatial_params(annotations_of(dataset, split.train), schema, spatial_config,
                                      stride, mass / static_cast<double>(count));
    std::vector<Tensor> inputs, targets;
    for (std::size_t i : split.train) {
      inputs.push_back(spatial_input(cache[i], dataset.annotations[i], spatial_config.use_torso));
      targets.push_back(render_target(dataset.annotations[i], cache[i].geometry(), cfg.target_sigma).maps);
    }
    calibrate_output_scale(init_params, inputs, targets);
  }
  SpatialModel spatial(init_params);
  const bool torso = spatial_config.use_torso;
  if (!(hooks.resume_spatial && hooks.resume_detector)) {
    NesterovOptimizer opt(spatial.parameters(), cfg.spatial_learning_rate, cfg.momentum);
    std::vector<int> input_perm = perm;
    for (int epoch = 1; epoch <= cfg.spatial_epochs; ++epoch) {
      guarded(2, epoch, [&] {
        const auto order = shuffled(split.train, mix_seed(cfg.seed, 2, epoch, 0xffff));
        const auto res = run_epoch(spatial, {&opt}, order, cfg.batch_size, threads,
                                   [&](SpatialModel& m, std::size_t i) {
          std::mt19937_64 rng(mix_seed(cfg.seed, 2, epoch, i));
          const Tensor& img = dataset.images[i];
          const AugmentTransform t = draw_transform(cfg.augment, dataset.annotations[i],
                                                    img.height(), img.width(), rng);
          const Annotation ann = transform_annotation(dataset.annotations[i], schema, t,
                                                      img.height(), img.width());
          const HeatMapSet maps{transform_grid(cache[i].maps, t, input_perm), cache[i].stride};
          const Tensor input = spatial_input(maps, ann, torso);
          const HeatMapSet out{m.forward(input), maps.stride};
          const LossAndGrad lg = mse_loss(out.maps, render_target(ann, out.geometry(), cfg.target_sigma).maps);
          m.backward(lg.grad);
          return SampleResult{lg.loss, predict_from_maps(ann.image_id, out), ann};
        });
        emit(result, summarize(2, epoch, "train", res, schema, radii));
        const EvalOutput ev = evaluate_spatial(spatial, dataset, cache, split.val, cfg.target_sigma, threads);
        emit(result, eval_row(2, epoch, ev, dataset, split.val, radii));
      });
    }
  }
  result.spatial = spatial.params();
  result.unified = PoseModel(detector, spatial);
  if (hooks.on_stage_done) hooks.on_stage_done(2, result);

  // ---- stage 3: unified fine-tuning
  PoseModel model(detector, spatial);
  {
    NesterovOptimizer det_opt(model.detector().parameters(), cfg.stage3_detector_rate(), cfg.momentum);
    NesterovOptimizer sp_opt(model.spatial().parameters(), cfg.stage3_spatial_rate(), cfg.momentum);
    for (int epoch = 1; epoch <= cfg.unified_epochs; ++epoch) {
      guarded(3, epoch, [&] {
        const auto order = shuffled(split.train, mix_seed(cfg.seed, 3, epoch, 0xffff));
        // Both optimizers see the parameters in the model's own order.
        std::vector<NesterovOptimizer*> opts{&det_opt, &sp_opt};
        const auto res = run_epoch(model, opts, order, cfg.batch_size, threads,
                                   [&](PoseModel& m, std::size_t i) {
          std::mt19937_64 rng(mix_seed(cfg.seed, 3, epoch, i));
          auto [img, ann] = augment(dataset.images[i], dataset.annotations[i], schema, cfg.augment, rng);
          const HeatMapGeometry geo = map_geometry(img, stride);
          const Tensor torso_map = torso ? render_torso_map(ann, geo) : Tensor();
          const HeatMapSet out = m.forward(build_pyramid(img, detector_config.num_banks), torso_map);
          const LossAndGrad lg = mse_loss(out.maps, render_target(ann, geo, cfg.target_sigma).maps);
          m.backward(lg.grad);
          return SampleResult{lg.loss, predict_from_maps(ann.image_id, out), ann};
        });
        emit(result, summarize(3, epoch, "train", res, schema, radii));
        const EvalOutput ev = evaluate_pose_model(model, dataset, split.val, cfg.target_sigma, threads);
        emit(result, eval_row(3, epoch, ev, dataset, split.val, radii));
      });
    }
  }
  result.unified = model;
  if (hooks.on_stage_done) hooks.on_stage_done(3, result);
  return result;
}

// ---------------------------------------------------------------------------
// Model files

void save_detector(const std::filesystem::path& path, const PartDetector& detector) {
  write_param_file(path, {detector_meta(detector.config()), detector_tensors(detector)});
}

void save_spatial(const std::filesystem::path& path, const SpatialModelParams& params) {
  write_param_file(path, {spatial_meta(params), spatial_tensors(params)});
}

void save_pose_model(const std::filesystem::path& path, const PoseModel& model) {
  const SpatialModelParams sp = model.spatial().params();
  ParamFile f{detector_meta(model.detector().config()) + "\n" + spatial_meta(sp),
              detector_tensors(model.detector())};
  for (auto& t : spatial_tensors(sp)) f.tensors.push_back(std::move(t));
  write_param_file(path, f);
}

PartDetector load_detector(const std::filesystem::path& path) {
  try {
    return detector_from_file(read_param_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

SpatialModelParams load_spatial(const std::filesystem::path& path) {
  try {
    return spatial_from_file(read_param_file(path));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

PoseModel load_pose_model(const std::filesystem::path& path) {
  try {
    const ParamFile f = read_param_file(path);
    return PoseModel(detector_from_file(f), SpatialModel(spatial_from_file(f)));
  } catch (const Error& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace posegraph
