#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "posegraph/config.hpp"
#include "posegraph/heatmap.hpp"
#include "posegraph/nn.hpp"
#include "posegraph/serialize.hpp"

// Convolutional part detector.
//
// Each resolution bank runs its own valid-convolution stages (conv, ReLUeps,
// optional 2x max-pool) over an LCN-normalized pyramid level. Lower banks are
// nearest-upsampled to the bank-0 feature grid, cropped so cell centers line
// up, and summed. A shared head then applies the fully-connected layers as
// convolutions: F x F -> fc_features (ReLUeps), then 1 x 1 -> joints (linear).
//
// The image is zero padded per bank so that the output grid has exactly
// image_size / pool_factor cells, cell (r, c) centered on image pixel
// pool_factor * c + (pool_factor - 1) / 2.

namespace posegraph {

struct ConvStageSpec {
  int kernel = 5;
  int features = 16;
  bool pool = true;

  friend bool operator==(const ConvStageSpec&, const ConvStageSpec&) = default;
};

struct DetectorConfig {
  int num_banks = 3;
  std::vector<ConvStageSpec> stages{{5, 16, true}, {5, 32, true}};
  int fc_kernel = 5;
  int fc_features = 128;
  int num_joints = 7;
  double relu_eps = 1e-3;

  /// Product of the pooling strides.
  int pool_factor() const;
  /// Receptive field of the per-bank stages alone.
  int stage_field() const;
  /// Receptive field of one output cell at bank 0: the sliding window size.
  int window() const;
  void validate() const;

  /// Scaled-up preset matching the 64x64 window of the original design.
  static DetectorConfig large_preset(int num_joints);

  ConfigMap to_config() const;
  static DetectorConfig from_config(const ConfigMap& config);

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

/// Zero padding and crop offset of one bank along one image axis.
struct BankAxis {
  int pad_lo = 0;
  int pad_hi = 0;
  /// Offset of the bank-0 feature grid inside the upsampled bank features.
  int offset = 0;
  /// Bank feature cells produced along this axis.
  int features = 0;
};

struct BankLayout {
  BankAxis rows;
  BankAxis cols;
};

/// Layout of every bank for an image of the given size. Throws if the size
/// is not divisible by the pooling factor and by 2^(num_banks-1).
std::vector<BankLayout> bank_layout(const DetectorConfig& config, int height, int width);

struct PyramidInput {
  /// Bank b: image downsampled by 2^b with anti-aliasing, then LCN.
  std::vector<Tensor> banks;
};

PyramidInput build_pyramid(const Tensor& image, int num_banks);

class PartDetector {
 public:
  explicit PartDetector(DetectorConfig config);

  /// He initialization from the seed; biases zero.
  void init(std::uint64_t seed);

  const DetectorConfig& config() const { return config_; }
  int stride() const { return config_.pool_factor(); }

  /// Dense evaluation (stages run once over the whole padded image). Caches
  /// intermediate values for backward().
  HeatMapSet forward(const PyramidInput& pyramid);
  HeatMapSet forward_image(const Tensor& image) { return forward(build_pyramid(image, config_.num_banks)); }
  /// Accumulates parameter gradients for the last forward().
  void backward(const Tensor& grad_maps);

  /// Reentrant evaluation on a private copy.
  HeatMapSet evaluate(const PyramidInput& pyramid) const;
  HeatMapSet evaluate_image(const Tensor& image) const;

  std::vector<Parameter*> parameters();
  void zero_grad();

  Sequential& bank(int b) { return banks_[static_cast<std::size_t>(b)]; }
  const Sequential& bank(int b) const { return banks_[static_cast<std::size_t>(b)]; }
  Sequential& head() { return head_; }
  const Sequential& head() const { return head_; }

 private:
  DetectorConfig config_;
  std::vector<Sequential> banks_;
  Sequential head_;

  // forward() cache
  std::vector<BankLayout> layout_;
  std::vector<Shape> bank_feature_shapes_;
};

/// Reference evaluation: for every output cell, crop the part of each padded
/// bank that cell depends on, run the bank stages on the crop alone,
/// upsample, sum and apply the head to the F x F block. Matches the dense
/// forward pass everywhere.
HeatMapSet sliding_window_forward(const Tensor& image, const PartDetector& detector);

struct JointEstimate {
  int joint = 0;
  double u = 0.0;  // image column
  double v = 0.0;  // image row
};

/// Per-channel argmax (first maximum in row-major order) mapped to the
/// center of that heat-map cell in image coordinates.
std::vector<JointEstimate> extract_joints(const HeatMapSet& maps);

/// Model file contents: tensors named "<prefix>.<layer>.weight|bias" plus a
/// [detector] INI block.
std::vector<NamedTensor> detector_tensors(const PartDetector& detector);
std::string detector_meta(const DetectorConfig& config);
PartDetector detector_from_file(const ParamFile& file);

}  // namespace posegraph
