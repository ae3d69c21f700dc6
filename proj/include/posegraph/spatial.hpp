#pragma once

#include <string>
#include <vector>

#include "posegraph/config.hpp"
#include "posegraph/conv.hpp"
#include "posegraph/data.hpp"
#include "posegraph/heatmap.hpp"
#include "posegraph/nn.hpp"
#include "posegraph/serialize.hpp"

// Spatial model over joint heat-maps.
//
// Every ordered pair (A, v) carries a prior kernel whose cell center + d holds
// the likelihood of A sitting at offset d from v. The message from v to A is
// that prior convolved (true convolution, zero padded to the map size) with
// v's unary map, plus a background bias. The exact model multiplies the
// messages and normalizes; the trainable model works with energies:
//
//   out_A = exp( sum_v log( SoftPlus(k_{A|v}) * ReLUeps(e_v) + SoftPlus(b_{v->A}) ) )

namespace posegraph {

/// Ordered joint names; the optional trailing virtual torso joint receives
/// the rendered torso map as its unary.
struct JointSet {
  std::vector<std::string> names;
  bool has_torso = false;

  int size() const { return static_cast<int>(names.size()); }
  int index_of(const std::string& name) const;
  void validate() const;

  static JointSet from_schema(const JointSchema& schema, bool with_torso);
};

inline constexpr const char* kTorsoJointName = "torso";

/// Narrower prior kernels always take the direct path; wider ones switch to
/// the FFT when its estimated cost is lower (large heat-maps).
inline constexpr int kFftMinKernel = 17;

struct SpatialConfig {
  int kernel_size = 33;
  double beta = 1.0;
  double eps = 0.01;
  bool use_torso = true;

  void validate() const;

  ConfigMap to_config() const;
  /// Reads the spatial.* keys; missing keys keep their defaults.
  static SpatialConfig from_config(const ConfigMap& config);
};

/// Priors and biases for every (output A, input v) pair. Plane a * |V| + v of
/// `kernels` holds e_{A|v}; `biases` is (|A|*|V|) x 1 x 1. In the trained model
/// both live in pre-SoftPlus space; the exact oracle reads them directly as
/// nonnegative probabilities.
struct SpatialModelParams {
  JointSet inputs;
  std::vector<std::string> outputs;
  int kernel_size = 33;
  double beta = 1.0;
  double eps = 0.01;
  Tensor kernels;
  Tensor biases;

  SpatialModelParams() = default;
  SpatialModelParams(JointSet inputs, std::vector<std::string> outputs, int kernel_size,
                     double beta, double eps);

  int num_inputs() const { return inputs.size(); }
  int num_outputs() const { return static_cast<int>(outputs.size()); }
  int pair_index(int a, int v) const { return a * num_inputs() + v; }
  Tensor kernel(int a, int v) const { return kernels.channel_tensor(pair_index(a, v)); }
  void set_kernel(int a, int v, const Tensor& k) { kernels.set_channel(pair_index(a, v), k); }
  double& bias(int a, int v) { return biases[static_cast<std::size_t>(pair_index(a, v))]; }
  double bias(int a, int v) const { return biases[static_cast<std::size_t>(pair_index(a, v))]; }

  void validate() const;
};

// ---------------------------------------------------------------------------
// Exact sum-product marginal

struct SpatialOracleResult {
  HeatMapSet marginals;
  std::vector<double> partition;  // Z per output joint
};

/// p_A = (1/Z) prod_v (p_{A|v} * p_v + b_{v->A}) with direct loops and zero
/// padding. Unaries and the raw kernels/biases must be nonnegative.
SpatialOracleResult mrf_oracle(const HeatMapSet& unaries, const SpatialModelParams& params);

// ---------------------------------------------------------------------------
// Trainable energy network

enum class SpatialMode {
  trained,  // SoftPlus on weights and biases, ReLUeps on unaries
  bypass,   // both stages replaced by identity; used to compare with the oracle
};

enum class ConvRoute { automatic, direct, fft };

class SpatialModel final : public Layer {
 public:
  explicit SpatialModel(SpatialModelParams params, SpatialMode mode = SpatialMode::trained);
  SpatialModel(const SpatialModel& other);
  SpatialModel& operator=(const SpatialModel& other);

  LayerKind kind() const override { return LayerKind::spatial; }
  /// input: |V| x H x W unary energies; output: |A| x H x W energies.
  Tensor forward(const Tensor& input) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Parameter*> parameters() override { return {&kernels_, &biases_}; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<SpatialModel>(*this); }

  HeatMapSet forward(const HeatMapSet& unaries);

  void set_mode(SpatialMode mode) { mode_ = mode; }
  void set_route(ConvRoute route) { route_ = route; }
  SpatialMode mode() const { return mode_; }

  /// Copy of the parameters with the current tensor values.
  SpatialModelParams params() const;
  const JointSet& inputs() const { return meta_.inputs; }
  const std::vector<std::string>& outputs() const { return meta_.outputs; }
  int kernel_size() const { return meta_.kernel_size; }

  /// Message tensors (|A|*|V| x H x W, plane a*|V|+v) of the last forward pass.
  const Tensor& last_messages() const { return messages_; }

 private:
  bool use_fft(int height, int width) const;
  /// Same-size correlation with implicit zero padding.
  Tensor correlate_same(const Tensor& map, const Tensor& kernel) const;
  /// Gradient of correlate_same(map, k) with respect to k, given the output
  /// gradient.
  Tensor kernel_gradient(const Tensor& map, const Tensor& grad) const;

  SpatialModelParams meta_;  // names and hyperparameters; tensors live below
  SpatialMode mode_;
  ConvRoute route_ = ConvRoute::automatic;
  Parameter kernels_;
  Parameter biases_;

  Tensor input_;
  Tensor unary_;        // stage output applied to the input
  Tensor weights_;      // stage output applied to the kernels
  Tensor bias_values_;  // stage output applied to the biases
  Tensor messages_;
  Tensor output_;
};

/// Log-space sum stage: out_a = sum_v logs[a*|V|+v]. Its backward hands every
/// input the upstream gradient unchanged, independent of the other inputs.
Tensor log_sum_stage(const Tensor& log_messages, int num_outputs, int num_inputs);
Tensor log_sum_stage_backward(const Tensor& grad_out, int num_inputs);

// ---------------------------------------------------------------------------
// Initialization

/// Normalized histogram (sum 1) of heat-map-cell displacements
/// loc_A - loc_v over the annotations, binned at kernel center + d.
/// Displacements beyond the kernel are clamped with a warning.
Tensor displacement_histogram(const std::vector<Annotation>& annotations,
                              const JointSchema& schema, const std::string& target,
                              const std::string& source, int kernel_size, int stride);

/// Histogram plus a uniform 1/K^2 floor, renormalized, mapped through the
/// inverse SoftPlus so that SoftPlus(kernel) reproduces it.
ConvKernel init_from_histogram(const std::vector<Annotation>& annotations,
                               const JointSchema& schema, const std::string& target,
                               const std::string& source, int kernel_size, int stride,
                               double beta);

/// All priors from histograms; biases set to inverse-SoftPlus(0.01 * unary_mass).
SpatialModelParams init_spatial_params(const std::vector<Annotation>& annotations,
                                       const JointSchema& schema, const SpatialConfig& config,
                                       int stride, double unary_mass);

/// Multiplies the SoftPlus-domain kernels and bias of every pair (A, v) by
/// c_A^(1/|V|), which scales output A by c_A, where c_A is the least-squares
/// fit of the current energies to the targets. The histogram shapes are
/// untouched; this only moves the initial energies to the target scale,
/// since the product of |V| normalized messages is otherwise too small to
/// produce useful gradients. Returns the factors c_A.
std::vector<double> calibrate_output_scale(SpatialModelParams& params,
                                           const std::vector<Tensor>& inputs,
                                           const std::vector<Tensor>& targets);

/// Model-file encoding: tensors spatial.kernels / spatial.biases plus a meta
/// block with names, hyperparameters, and the pair-index table.
std::vector<NamedTensor> spatial_tensors(const SpatialModelParams& params);
std::string spatial_meta(const SpatialModelParams& params);
SpatialModelParams spatial_from_file(const ParamFile& file);

/// Joint location in image pixels used for displacement statistics; the
/// virtual torso joint resolves to the torso-box center.
std::pair<double, double> joint_location(const Annotation& annotation, const JointSchema& schema,
                                         const std::string& name);

}  // namespace posegraph
