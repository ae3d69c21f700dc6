#include "posegraph/spatial.hpp"

#include <cmath>
#include <set>

#include "posegraph/config.hpp"
#include "posegraph/log.hpp"

namespace posegraph {

int JointSet::index_of(const std::string& name) const {
  for (int i = 0; i < size(); ++i) {
    if (names[i] == name) return i;
  }
  return -1;
}

void JointSet::validate() const {
  if (names.empty()) throw Error("joint set must contain at least one joint");
  std::set<std::string> seen;
  for (const auto& n : names) {
    if (!seen.insert(n).second) throw Error("duplicate joint '" + n + "' in joint set");
  }
  if (has_torso && names.back() != kTorsoJointName) {
    throw Error("the virtual torso joint must be the last input");
  }
}

JointSet JointSet::from_schema(const JointSchema& schema, bool with_torso) {
  JointSet s{schema.names, with_torso};
  if (with_torso) s.names.emplace_back(kTorsoJointName);
  s.validate();
  return s;
}

void SpatialConfig::validate() const {
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw Error("spatial kernel size must be odd and positive");
  }
  check_softplus_beta(beta);
  check_relu_eps(eps);
}

ConfigMap SpatialConfig::to_config() const {
  return {{"spatial.kernel_size", std::to_string(kernel_size)},
          {"spatial.beta", format_double(beta)},
          {"spatial.eps", format_double(eps)},
          {"spatial.use_torso", use_torso ? "true" : "false"}};
}

SpatialConfig SpatialConfig::from_config(const ConfigMap& config) {
  SpatialConfig c;
  auto has = [&](const char* k) { return config.count(k) > 0; };
  if (has("spatial.kernel_size")) c.kernel_size = get_int(config, "spatial.kernel_size");
  if (has("spatial.beta")) c.beta = get_double(config, "spatial.beta");
  if (has("spatial.eps")) c.eps = get_double(config, "spatial.eps");
  if (has("spatial.use_torso")) c.use_torso = get_bool(config, "spatial.use_torso");
  c.validate();
  return c;
}

SpatialModelParams::SpatialModelParams(JointSet in, std::vector<std::string> out, int k,
                                       double b, double e)
    : inputs(std::move(in)),
      outputs(std::move(out)),
      kernel_size(k),
      beta(b),
      eps(e),
      kernels(static_cast<int>(outputs.size()) * inputs.size(), k, k),
      biases(static_cast<int>(outputs.size()) * inputs.size(), 1, 1) {
  validate();
}

void SpatialModelParams::validate() const {
  inputs.validate();
  if (outputs.empty()) throw Error("spatial model needs at least one output joint");
  for (const auto& o : outputs) {
    if (inputs.index_of(o) < 0) throw Error("output joint '" + o + "' is not an input");
  }
  SpatialConfig{kernel_size, beta, eps}.validate();
  const int pairs = num_outputs() * num_inputs();
  if (kernels.shape() != Shape{pairs, kernel_size, kernel_size} ||
      biases.shape() != Shape{pairs, 1, 1}) {
    throw Error("spatial parameter tensors do not match " + std::to_string(pairs) + " pairs of " +
                std::to_string(kernel_size) + "x" + std::to_string(kernel_size));
  }
}

// ---------------------------------------------------------------------------

SpatialOracleResult mrf_oracle(const HeatMapSet& unaries, const SpatialModelParams& params) {
  params.validate();
  const Tensor& p = unaries.maps;
  if (p.channels() != params.num_inputs()) {
    throw Error("mrf_oracle: expected " + std::to_string(params.num_inputs()) +
                " unary channels, got " + std::to_string(p.channels()));
  }
  for (double v : p.values()) {
    if (v < 0.0) throw Error("mrf_oracle: negative unary entry");
  }
  for (double v : params.kernels.values()) {
    if (v < 0.0) throw Error("mrf_oracle: negative prior entry");
  }
  for (double v : params.biases.values()) {
    if (v < 0.0) throw Error("mrf_oracle: negative bias");
  }
  const int h = p.height(), w = p.width();
  const int k = params.kernel_size, c = k / 2;
  SpatialOracleResult result{{Tensor(params.num_outputs(), h, w), unaries.stride}, {}};
  for (int a = 0; a < params.num_outputs(); ++a) {
    Tensor product(1, h, w, 1.0);
    for (int v = 0; v < params.num_inputs(); ++v) {
      const int plane = params.pair_index(a, v);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          // message(y, x) = sum_d prior(center + d) * p_v((y, x) - d)
          double m = 0.0;
          for (int dy = -c; dy <= c; ++dy) {
            for (int dx = -c; dx <= c; ++dx) {
              const int sy = y - dy, sx = x - dx;
              if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
              m += params.kernels.at(plane, c + dy, c + dx) * p.at(v, sy, sx);
            }
          }
          product.at(0, y, x) *= m + params.biases[static_cast<std::size_t>(plane)];
        }
      }
    }
    const double z = product.sum();
    if (!(z > 0.0)) throw Error("mrf_oracle: partition function is zero for output " +
                                params.outputs[a]);
    result.partition.push_back(z);
    result.marginals.maps.set_channel(a, scale(product, 1.0 / z));
  }
  return result;
}

// ---------------------------------------------------------------------------

Tensor log_sum_stage(const Tensor& log_messages, int num_outputs, int num_inputs) {
  if (log_messages.channels() != num_outputs * num_inputs) {
    throw Error("log_sum_stage: channel count mismatch");
  }
  Tensor out(num_outputs, log_messages.height(), log_messages.width());
  for (int a = 0; a < num_outputs; ++a) {
    auto dst = out.channel(a);
    // Fixed joint order keeps the reduction bitwise reproducible.
    for (int v = 0; v < num_inputs; ++v) {
      auto src = log_messages.channel(a * num_inputs + v);
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
  return out;
}

Tensor log_sum_stage_backward(const Tensor& grad_out, int num_inputs) {
  Tensor g(grad_out.channels() * num_inputs, grad_out.height(), grad_out.width());
  for (int a = 0; a < grad_out.channels(); ++a) {
    auto src = grad_out.channel(a);
    for (int v = 0; v < num_inputs; ++v) {
      auto dst = g.channel(a * num_inputs + v);
      std::copy(src.begin(), src.end(), dst.begin());
    }
  }
  return g;
}

// ---------------------------------------------------------------------------

SpatialModel::SpatialModel(SpatialModelParams params, SpatialMode mode)
    : meta_(std::move(params)), mode_(mode) {
  meta_.validate();
  kernels_ = Parameter("spatial.kernels", meta_.kernels);
  biases_ = Parameter("spatial.biases", meta_.biases);
  meta_.kernels = Tensor();
  meta_.biases = Tensor();
}

SpatialModel::SpatialModel(const SpatialModel& other) = default;
SpatialModel& SpatialModel::operator=(const SpatialModel& other) = default;

SpatialModelParams SpatialModel::params() const {
  SpatialModelParams p = meta_;
  p.kernels = kernels_.value;
  p.biases = biases_.value;
  return p;
}

namespace {

// out(y, x) = sum_{i,j} k(i, j) * map(y + i - c, x + j - c), zero outside the
// map. Equivalent to a valid correlation of the zero-padded map, but never
// touches the padding.
Tensor correlate_same_bounded(const Tensor& map, const Tensor& kernel) {
  const int h = map.height(), w = map.width(), K = kernel.height(), c = K / 2;
  Tensor out(1, h, w);
  const double* in = map.data();
  const double* k = kernel.data();
  double* o = out.data();
  for (int y = 0; y < h; ++y) {
    const int i0 = std::max(0, c - y), i1 = std::min(K, h + c - y);
    for (int i = i0; i < i1; ++i) {
      const double* irow = in + static_cast<std::ptrdiff_t>(y + i - c) * w;
      const double* krow = k + static_cast<std::ptrdiff_t>(i) * K;
      double* orow = o + static_cast<std::ptrdiff_t>(y) * w;
      for (int x = 0; x < w; ++x) {
        const int j0 = std::max(0, c - x), j1 = std::min(K, w + c - x);
        const double* src = irow + x - c;
        double acc = 0.0;
        for (int j = j0; j < j1; ++j) acc += krow[j] * src[j];
        orow[x] += acc;
      }
    }
  }
  return out;
}

// G(i, j) = sum_{y,x} g(y, x) * map(y + i - c, x + j - c): the kernel
// gradient of correlate_same_bounded.
Tensor kernel_gradient_bounded(const Tensor& map, const Tensor& grad, int K) {
  const int h = map.height(), w = map.width(), c = K / 2;
  Tensor out(1, K, K);
  const double* in = map.data();
  const double* g = grad.data();
  for (int i = 0; i < K; ++i) {
    const int y0 = std::max(0, c - i), y1 = std::min(h, h + c - i);
    for (int y = y0; y < y1; ++y) {
      const double* irow = in + static_cast<std::ptrdiff_t>(y + i - c) * w;
      const double* grow = g + static_cast<std::ptrdiff_t>(y) * w;
      double* orow = out.data() + static_cast<std::ptrdiff_t>(i) * K;
      for (int j = 0; j < K; ++j) {
        const int x0 = std::max(0, c - j), x1 = std::min(w, w + c - j);
        const double* src = irow + j - c;
        double acc = 0.0;
        for (int x = x0; x < x1; ++x) acc += grow[x] * src[x];
        orow[j] += acc;
      }
    }
  }
  return out;
}

}  // namespace

bool SpatialModel::use_fft(int height, int width) const {
  switch (route_) {
    case ConvRoute::direct: return false;
    case ConvRoute::fft: return true;
    case ConvRoute::automatic: {
      const int K = meta_.kernel_size;
      if (K < kFftMinKernel) return false;
      // Rough operation counts; the FFT constant is calibrated so that small
      // maps (where most kernel taps fall into the padding) stay direct.
      const double n = static_cast<double>(next_pow2(static_cast<std::size_t>(height + K - 1))) *
                       static_cast<double>(next_pow2(static_cast<std::size_t>(width + K - 1)));
      const double direct = static_cast<double>(std::min(height, K)) * std::min(width, K) *
                            height * width;
      return direct > 20.0 * n * std::log2(n);
    }
  }
  return false;
}

Tensor SpatialModel::correlate_same(const Tensor& map, const Tensor& kernel) const {
  if (!use_fft(map.height(), map.width())) return correlate_same_bounded(map, kernel);
  const int c = kernel.height() / 2;
  return correlate_valid_fft(zero_pad(map, c, c, c, c), kernel);
}

Tensor SpatialModel::kernel_gradient(const Tensor& map, const Tensor& grad) const {
  const int K = meta_.kernel_size;
  if (!use_fft(map.height(), map.width())) return kernel_gradient_bounded(map, grad, K);
  const int c = K / 2;
  return correlate_valid_fft(zero_pad(map, c, c, c, c), grad);
}

HeatMapSet SpatialModel::forward(const HeatMapSet& unaries) {
  return {forward(unaries.maps), unaries.stride};
}

Tensor SpatialModel::forward(const Tensor& input) {
  const int nv = meta_.num_inputs();
  const int na = meta_.num_outputs();
  if (input.channels() != nv) {
    throw Error("spatial model expects " + std::to_string(nv) + " unary channels, got " +
                std::to_string(input.channels()));
  }
  input_ = input;
  if (mode_ == SpatialMode::trained) {
    unary_ = relu_eps_fwd(input, meta_.eps);
    weights_ = softplus_fwd(kernels_.value, meta_.beta);
    bias_values_ = softplus_fwd(biases_.value, meta_.beta);
  } else {
    unary_ = input;
    weights_ = kernels_.value;
    bias_values_ = biases_.value;
  }

  messages_ = Tensor(na * nv, input.height(), input.width());
  Tensor logs(messages_.shape());
  for (int v = 0; v < nv; ++v) {
    const Tensor r = unary_.channel_tensor(v);
    for (int a = 0; a < na; ++a) {
      const int pair = meta_.pair_index(a, v);
      // True convolution == correlation with the rotated prior.
      const Tensor m = correlate_same(r, flip180(weights_.channel_tensor(pair)));
      auto dst = messages_.channel(pair);
      auto log_dst = logs.channel(pair);
      const double b = bias_values_[static_cast<std::size_t>(pair)];
      for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] = m[i] + b;
        if (!(dst[i] > 0.0) || !std::isfinite(dst[i])) {
          throw Error("spatial model: log stage input " + std::to_string(dst[i]) +
                      " is not positive and finite (message " + meta_.inputs.names[v] + "->" +
                      meta_.outputs[a] + ")");
        }
        log_dst[i] = std::log(dst[i]);
      }
    }
  }
  const Tensor sums = log_sum_stage(logs, na, nv);
  output_ = exp(sums);
  if (!output_.all_finite()) throw Error("spatial model: exp stage overflowed");
  return output_;
}

Tensor SpatialModel::backward(const Tensor& grad_out) {
  require_same_shape(grad_out, output_, "SpatialModel::backward");
  const int nv = meta_.num_inputs();
  const int na = meta_.num_outputs();
  const Tensor grad_sum = mul(grad_out, output_);
  const Tensor grad_logs = log_sum_stage_backward(grad_sum, nv);

  Tensor grad_unary(unary_.shape());
  Tensor grad_weights(weights_.shape());
  Tensor grad_bias_values(bias_values_.shape());
  for (int v = 0; v < nv; ++v) {
    const Tensor r = unary_.channel_tensor(v);
    auto gu = grad_unary.channel(v);
    for (int a = 0; a < na; ++a) {
      const int pair = meta_.pair_index(a, v);
      Tensor gm(1, unary_.height(), unary_.width());
      auto gl = grad_logs.channel(pair);
      auto m = messages_.channel(pair);
      double gb = 0.0;
      for (std::size_t i = 0; i < gm.size(); ++i) {
        gm[i] = gl[i] / m[i];
        gb += gm[i];
      }
      grad_bias_values[static_cast<std::size_t>(pair)] = gb;
      const Tensor gr = correlate_same(gm, weights_.channel_tensor(pair));
      for (std::size_t i = 0; i < gu.size(); ++i) gu[i] += gr[i];
      grad_weights.set_channel(pair, flip180(kernel_gradient(r, gm)));
    }
  }
  if (mode_ == SpatialMode::trained) {
    axpy(kernels_.grad, 1.0, softplus_bwd(kernels_.value, grad_weights, meta_.beta));
    axpy(biases_.grad, 1.0, softplus_bwd(biases_.value, grad_bias_values, meta_.beta));
    return relu_eps_bwd(input_, grad_unary, meta_.eps);
  }
  axpy(kernels_.grad, 1.0, grad_weights);
  axpy(biases_.grad, 1.0, grad_bias_values);
  return grad_unary;
}

// ---------------------------------------------------------------------------

std::pair<double, double> joint_location(const Annotation& annotation, const JointSchema& schema,
                                         const std::string& name) {
  if (name == kTorsoJointName) return {annotation.torso.center_u(), annotation.torso.center_v()};
  const int j = schema.index_of(name);
  if (j < 0) throw Error("unknown joint '" + name + "'");
  const auto& ja = annotation.joints.at(static_cast<std::size_t>(j));
  return {ja.u, ja.v};
}

namespace {

bool joint_visible(const Annotation& annotation, const JointSchema& schema,
                   const std::string& name) {
  if (name == kTorsoJointName) return annotation.torso.h > 0.0;
  const int j = schema.index_of(name);
  return j >= 0 && annotation.joints.at(static_cast<std::size_t>(j)).visible;
}

}  // namespace

Tensor displacement_histogram(const std::vector<Annotation>& annotations,
                              const JointSchema& schema, const std::string& target,
                              const std::string& source, int kernel_size, int stride) {
  if (kernel_size < 1 || kernel_size % 2 == 0) throw Error("kernel size must be odd");
  if (stride < 1) throw Error("stride must be positive");
  const HeatMapGeometry geo{0, 0, stride};
  const int c = kernel_size / 2;
  Tensor hist(1, kernel_size, kernel_size);
  int count = 0;
  int clamped = 0;
  for (const auto& ann : annotations) {
    if (!joint_visible(ann, schema, target) || !joint_visible(ann, schema, source)) continue;
    const auto [ua, va] = joint_location(ann, schema, target);
    const auto [uv, vv] = joint_location(ann, schema, source);
    int du = static_cast<int>(std::lround(geo.to_cell(ua))) -
             static_cast<int>(std::lround(geo.to_cell(uv)));
    int dv = static_cast<int>(std::lround(geo.to_cell(va))) -
             static_cast<int>(std::lround(geo.to_cell(vv)));
    if (std::abs(du) > c || std::abs(dv) > c) {
      ++clamped;
      du = std::clamp(du, -c, c);
      dv = std::clamp(dv, -c, c);
    }
    hist.at(0, c + dv, c + du) += 1.0;
    ++count;
  }
  if (count == 0) {
    throw Error("no annotated examples for displacement " + target + "|" + source);
  }
  if (clamped > 0) {
    warn(std::to_string(clamped) + " displacements " + target + "|" + source +
         " exceed the " + std::to_string(kernel_size) + "-cell kernel and were clamped");
  }
  return scale(hist, 1.0 / count);
}

ConvKernel init_from_histogram(const std::vector<Annotation>& annotations,
                               const JointSchema& schema, const std::string& target,
                               const std::string& source, int kernel_size, int stride,
                               double beta) {
  Tensor p = displacement_histogram(annotations, schema, target, source, kernel_size, stride);
  const double floor = 1.0 / (static_cast<double>(kernel_size) * kernel_size);
  p = add(p, floor);
  p = scale(p, 1.0 / p.sum());
  for (double& v : p.values()) v = inverse_softplus(v, beta);
  return ConvKernel(std::move(p));
}

SpatialModelParams init_spatial_params(const std::vector<Annotation>& annotations,
                                       const JointSchema& schema, const SpatialConfig& config,
                                       int stride, double unary_mass) {
  config.validate();
  if (!(unary_mass > 0.0)) throw Error("unary mass must be positive");
  SpatialModelParams params(JointSet::from_schema(schema, config.use_torso), schema.names,
                            config.kernel_size, config.beta, config.eps);
  const double bias = inverse_softplus(0.01 * unary_mass, config.beta);
  for (int a = 0; a < params.num_outputs(); ++a) {
    for (int v = 0; v < params.num_inputs(); ++v) {
      const ConvKernel k = init_from_histogram(annotations, schema, params.outputs[a],
                                               params.inputs.names[v], config.kernel_size,
                                               stride, config.beta);
      params.set_kernel(a, v, k.weights());
      params.bias(a, v) = bias;
    }
  }
  return params;
}

std::vector<double> calibrate_output_scale(SpatialModelParams& params,
                                           const std::vector<Tensor>& inputs,
                                           const std::vector<Tensor>& targets) {
  if (inputs.size() != targets.size()) throw Error("calibration: input/target count mismatch");
  const int na = params.num_outputs(), nv = params.num_inputs();
  std::vector<double> cross(static_cast<std::size_t>(na)), self(static_cast<std::size_t>(na));
  SpatialModel model(params);
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const Tensor out = model.forward(inputs[n]);
    require_same_shape(out, targets[n], "calibrate_output_scale");
    for (int a = 0; a < na; ++a) {
      auto o = out.channel(a);
      auto t = targets[n].channel(a);
      for (std::size_t i = 0; i < o.size(); ++i) {
        cross[static_cast<std::size_t>(a)] += o[i] * t[i];
        self[static_cast<std::size_t>(a)] += o[i] * o[i];
      }
    }
  }
  std::vector<double> factors;
  for (int a = 0; a < na; ++a) {
    double c = cross[static_cast<std::size_t>(a)] / self[static_cast<std::size_t>(a)];
    if (!(c > 0.0) || !std::isfinite(c)) {
      warn("spatial calibration skipped for output " + params.outputs[a]);
      c = 1.0;
    }
    factors.push_back(c);
    const double f = std::pow(c, 1.0 / nv);
    for (int v = 0; v < nv; ++v) {
      const int pair = params.pair_index(a, v);
      for (double& k : params.kernels.channel(pair)) {
        k = inverse_softplus(f * softplus(k, params.beta), params.beta);
      }
      double& b = params.biases[static_cast<std::size_t>(pair)];
      b = inverse_softplus(f * softplus(b, params.beta), params.beta);
    }
  }
  return factors;
}

// ---------------------------------------------------------------------------

std::vector<NamedTensor> spatial_tensors(const SpatialModelParams& params) {
  return {{"spatial.kernels", params.kernels}, {"spatial.biases", params.biases}};
}

std::string spatial_meta(const SpatialModelParams& params) {
  std::vector<std::string> pairs;
  for (int a = 0; a < params.num_outputs(); ++a) {
    for (int v = 0; v < params.num_inputs(); ++v) {
      pairs.push_back(params.outputs[a] + "|" + params.inputs.names[v]);
    }
  }
  ConfigMap m{{"spatial.inputs", join(params.inputs.names, ',')},
              {"spatial.has_torso", params.inputs.has_torso ? "true" : "false"},
              {"spatial.outputs", join(params.outputs, ',')},
              {"spatial.kernel_size", std::to_string(params.kernel_size)},
              {"spatial.beta", format_double(params.beta)},
              {"spatial.eps", format_double(params.eps)},
              {"spatial.pairs", join(pairs, ',')}};
  return format_ini(m);
}

SpatialModelParams spatial_from_file(const ParamFile& file) {
  const ConfigMap m = parse_ini(file.meta, "spatial model meta");
  JointSet inputs{split(get_string(m, "spatial.inputs"), ','), get_bool(m, "spatial.has_torso")};
  SpatialModelParams p(inputs, split(get_string(m, "spatial.outputs"), ','),
                       get_int(m, "spatial.kernel_size"), get_double(m, "spatial.beta"),
                       get_double(m, "spatial.eps"));
  const auto pairs = split(get_string(m, "spatial.pairs"), ',');
  if (static_cast<int>(pairs.size()) != p.num_outputs() * p.num_inputs()) {
    throw Error("spatial model pair table has " + std::to_string(pairs.size()) + " entries");
  }
  for (int a = 0; a < p.num_outputs(); ++a) {
    for (int v = 0; v < p.num_inputs(); ++v) {
      if (pairs[static_cast<std::size_t>(p.pair_index(a, v))] !=
          p.outputs[a] + "|" + p.inputs.names[v]) {
        throw Error("spatial model pair table out of order at " + p.outputs[a] + "|" +
                    p.inputs.names[v]);
      }
    }
  }
  p.kernels = file.get("spatial.kernels");
  p.biases = file.get("spatial.biases");
  p.validate();
  return p;
}

}  // namespace posegraph
