#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "posegraph/config.hpp"
#include "posegraph/data.hpp"
#include "posegraph/detector.hpp"
#include "posegraph/eval.hpp"
#include "posegraph/spatial.hpp"

namespace posegraph {

// ---------------------------------------------------------------------------
// Nesterov momentum, lookahead form:
//
//   v <- mu v - lr grad f(theta + mu v)
//   theta <- theta + v

struct OptimizerState {
  std::vector<Tensor> velocity;
};

OptimizerState make_optimizer_state(const std::vector<const Tensor*>& params);

/// `grads` must be evaluated at the lookahead point theta + mu v.
void nesterov_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads,
                   OptimizerState& state, double lr, double mu);

/// Drives nesterov_step over layer parameters: begin_step() moves the
/// parameters to the lookahead point, where the caller accumulates
/// gradients; step() restores theta, applies the update and zeroes the
/// gradients.
class NesterovOptimizer {
 public:
  NesterovOptimizer(std::vector<Parameter*> params, double lr, double mu);

  void begin_step();
  void step();

  double learning_rate() const { return lr_; }
  double momentum() const { return mu_; }
  const OptimizerState& state() const { return state_; }

 private:
  std::vector<Parameter*> params_;
  double lr_;
  double mu_;
  OptimizerState state_;
  std::vector<Tensor> saved_;
  bool in_step_ = false;
};

// ---------------------------------------------------------------------------
// Targets and augmentation

/// One Gaussian channel per schema joint, peak 1 at the cell nearest the
/// joint; invisible joints give an all-zero channel. Joints outside the
/// image are clamped to the border with a warning.
HeatMapSet render_target(const Annotation& annotation, const HeatMapGeometry& geometry,
                         double sigma);

struct AugmentConfig {
  double flip_prob = 0.5;
  double scale_min = 0.9;
  double scale_max = 1.1;

  void validate() const;
};

/// Horizontal mirror, then isotropic scaling about the image center.
struct AugmentTransform {
  bool flip = false;
  double scale = 1.0;
};

/// Draws a transform, redrawing the scale (up to 10 tries, then 1.0) while
/// any visible joint would leave the frame.
AugmentTransform draw_transform(const AugmentConfig& config, const Annotation& annotation,
                                int height, int width, std::mt19937_64& rng);

/// Applies the transform to a grid (image or heat-maps). Output pixels map
/// back through the inverse transform and sample bilinearly, zero outside.
/// With a flip, output channel c takes input channel channel_perm[c] (an
/// empty permutation keeps the channel order).
Tensor transform_grid(const Tensor& grid, const AugmentTransform& t,
                      const std::vector<int>& channel_perm = {});

/// Mirrors u -> (width - 1) - u and swaps left/right labels per the schema,
/// then scales about ((width - 1) / 2, (height - 1) / 2).
Annotation transform_annotation(const Annotation& annotation, const JointSchema& schema,
                                const AugmentTransform& t, int height, int width);

std::pair<Tensor, Annotation> augment(const Tensor& image, const Annotation& annotation,
                                      const JointSchema& schema, const AugmentConfig& config,
                                      std::mt19937_64& rng);

// ---------------------------------------------------------------------------
// Unified model: detector heat-maps (plus the torso map) feed the spatial
// model.

class PoseModel {
 public:
  PoseModel(PartDetector detector, SpatialModel spatial);

  /// `torso_map` is ignored when the spatial model has no torso input.
  HeatMapSet forward(const PyramidInput& pyramid, const Tensor& torso_map);
  void backward(const Tensor& grad_maps);

  HeatMapSet evaluate(const Tensor& image, const Annotation& annotation) const;

  std::vector<Parameter*> parameters();
  void zero_grad();

  PartDetector& detector() { return detector_; }
  const PartDetector& detector() const { return detector_; }
  SpatialModel& spatial() { return spatial_; }
  const SpatialModel& spatial() const { return spatial_; }
  bool uses_torso() const { return spatial_.inputs().has_torso; }

 private:
  PartDetector detector_;
  SpatialModel spatial_;
  int num_joints_;
};

/// Spatial-model input: detector maps plus, if requested, the torso map
/// (default width of one cell, independent of the target sigma).
Tensor spatial_input(const HeatMapSet& detector_maps, const Annotation& annotation,
                     bool with_torso);

// ---------------------------------------------------------------------------
// Staged training

struct TrainConfig {
  double learning_rate = 0.02;           // stage 1
  double spatial_learning_rate = 0.05;   // stage 2
  /// Stage 3 rates; zero means 1e-3 x the stage-1 rate and 0.1 x the
  /// stage-2 rate. Detector gradients arrive scaled by 1 / message through
  /// the log stage, so the detector needs a much smaller step than alone.
  double unified_learning_rate = 0.0;
  double unified_spatial_learning_rate = 0.0;
  double momentum = 0.9;
  int batch_size = 1;
  int detector_epochs = 10;
  int spatial_epochs = 10;
  int unified_epochs = 2;
  double target_sigma = 1.0;
  AugmentConfig augment;
  std::uint64_t seed = 1;
  double validation_fraction = 0.1;
  std::vector<double> report_radii{0.1, 0.25, 0.5};
  int threads = 1;
  /// Heat-map cache for stage 2; required when spatial_epochs > 0.
  std::filesystem::path cache_dir;

  double stage3_detector_rate() const;
  double stage3_spatial_rate() const;
  void validate() const;

  ConfigMap to_config() const;
  /// Reads the train.* keys; missing keys keep their defaults.
  static TrainConfig from_config(const ConfigMap& config);
};

struct MetricRow {
  int stage = 0;
  int epoch = 0;
  std::string split;
  double mse = 0.0;
  std::vector<double> det_rates;  // one per TrainConfig::report_radii
};

std::string metrics_header(const std::vector<double>& radii);
std::string format_metric_row(const MetricRow& row);

struct TrainResult {
  PartDetector detector;
  SpatialModelParams spatial;
  PoseModel unified;
  std::vector<MetricRow> metrics;
};

struct TrainHooks {
  /// Called after each stage (1, 2, 3) with the models so far.
  std::function<void(int stage, const TrainResult&)> on_stage_done;
  /// Called for every metric row as it is produced.
  std::function<void(const MetricRow&)> on_metric;
  /// If set, stage 1 is skipped and this detector is used instead.
  const PartDetector* resume_detector = nullptr;
  /// If set (together with resume_detector), stage 2 is skipped too.
  const SpatialModelParams* resume_spatial = nullptr;
};

/// Stage 1 trains the detector on images; its heat-maps are cached to disk;
/// stage 2 trains the spatial model on the cached (augmented) heat-maps;
/// stage 3 back-propagates through both. The last validation_fraction of the
/// dataset is held out for the "val" metric rows. Throws on a non-finite loss
/// with the stage and epoch.
TrainResult train_staged(const Dataset& dataset, const DetectorConfig& detector_config,
                         const SpatialConfig& spatial_config, const TrainConfig& train_config,
                         const TrainHooks& hooks = {});

/// Mean squared error of a loss-producing model over a set of images,
/// together with the argmax predictions.
struct EvalOutput {
  double mse = 0.0;
  std::vector<Prediction> predictions;
};

EvalOutput evaluate_detector(const PartDetector& detector, const Dataset& dataset,
                             const std::vector<std::size_t>& indices, double target_sigma,
                             int threads = 1);
EvalOutput evaluate_pose_model(const PoseModel& model, const Dataset& dataset,
                               const std::vector<std::size_t>& indices, double target_sigma,
                               int threads = 1);

/// Predictions from heat-maps (argmax, mapped to image coordinates).
Prediction predict_from_maps(const std::string& image_id, const HeatMapSet& maps);

/// Worker count from POSEGRAPH_THREADS (default 1).
int threads_from_env();

// ---------------------------------------------------------------------------
// Model files

void save_detector(const std::filesystem::path& path, const PartDetector& detector);
void save_spatial(const std::filesystem::path& path, const SpatialModelParams& params);
void save_pose_model(const std::filesystem::path& path, const PoseModel& model);
PartDetector load_detector(const std::filesystem::path& path);
SpatialModelParams load_spatial(const std::filesystem::path& path);
PoseModel load_pose_model(const std::filesystem::path& path);

}  // namespace posegraph
