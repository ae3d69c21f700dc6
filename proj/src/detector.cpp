#include "posegraph/detector.hpp"

#include <cmath>
#include <random>

namespace posegraph {

int DetectorConfig::pool_factor() const {
  int p = 1;
  for (const auto& s : stages) {
    if (s.pool) p *= 2;
  }
  return p;
}

namespace {

// Input extent the bank stages need to produce `cells` feature cells.
int required_input(const DetectorConfig& cfg, int cells) {
  int n = cells;
  for (auto it = cfg.stages.rbegin(); it != cfg.stages.rend(); ++it) {
    if (it->pool) n *= 2;
    n += it->kernel - 1;
  }
  return n;
}

}  // namespace

int DetectorConfig::stage_field() const { return required_input(*this, 1); }

int DetectorConfig::window() const { return stage_field() + pool_factor() * (fc_kernel - 1); }

void DetectorConfig::validate() const {
  if (num_banks < 1 || num_banks > 4) throw Error("detector: num_banks must lie in [1, 4]");
  if (stages.empty()) throw Error("detector: at least one convolution stage is required");
  for (const auto& s : stages) {
    if (s.kernel < 1 || s.features < 1) throw Error("detector: invalid convolution stage");
  }
  if (fc_kernel < 1 || fc_features < 1) throw Error("detector: invalid fully-connected stage");
  if (num_joints < 1) throw Error("detector: num_joints must be positive");
  check_relu_eps(relu_eps);
  if (window() % pool_factor() != 0) {
    throw Error("detector: window " + std::to_string(window()) +
                " is not divisible by the pooling factor " + std::to_string(pool_factor()));
  }
  if ((window() - pool_factor()) % 2 != 0) {
    throw Error("detector: window and pooling factor must have equal parity");
  }
}

DetectorConfig DetectorConfig::large_preset(int num_joints) {
  DetectorConfig c;
  c.num_banks = 3;
  c.stages = {{5, 128, true}, {5, 128, true}, {5, 128, false}};
  c.fc_kernel = 9;
  c.fc_features = 512;
  c.num_joints = num_joints;
  return c;
}

ConfigMap DetectorConfig::to_config() const {
  std::vector<std::string> k, f, p;
  for (const auto& s : stages) {
    k.push_back(std::to_string(s.kernel));
    f.push_back(std::to_string(s.features));
    p.push_back(s.pool ? "1" : "0");
  }
  return {{"detector.num_banks", std::to_string(num_banks)},
          {"detector.stage_kernels", join(k, ',')},
          {"detector.stage_features", join(f, ',')},
          {"detector.stage_pool", join(p, ',')},
          {"detector.fc_kernel", std::to_string(fc_kernel)},
          {"detector.fc_features", std::to_string(fc_features)},
          {"detector.num_joints", std::to_string(num_joints)},
          {"detector.relu_eps", format_double(relu_eps)}};
}

DetectorConfig DetectorConfig::from_config(const ConfigMap& config) {
  DetectorConfig c;
  c.num_banks = get_int(config, "detector.num_banks");
  const auto k = get_int_list(config, "detector.stage_kernels");
  const auto f = get_int_list(config, "detector.stage_features");
  const auto p = get_int_list(config, "detector.stage_pool");
  if (k.size() != f.size() || k.size() != p.size()) {
    throw Error("detector.stage_kernels, stage_features and stage_pool differ in length");
  }
  c.stages.clear();
  for (std::size_t i = 0; i < k.size(); ++i) c.stages.push_back({k[i], f[i], p[i] != 0});
  c.fc_kernel = get_int(config, "detector.fc_kernel");
  c.fc_features = get_int(config, "detector.fc_features");
  c.num_joints = get_int(config, "detector.num_joints");
  c.relu_eps = get_double(config, "detector.relu_eps");
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

namespace {

// Bank b feature cell k sees bank pixels [P k - pad, P k - pad + Rc), centered
// on P k - pad + (Rc - 1) / 2, and bank pixel j sits at image pixel
// 2^b j + (2^b - 1) / 2 (integer division, as in the downsampler). The
// nearest-upsampled block of cell k spans grid cells 2^b k - d ... and is
// matched to the bank-0 cells covering the same image location; the
// half-integer part is rounded (the upscale-then-add approximation).
BankAxis axis_layout(const DetectorConfig& cfg, int b, int extent) {
  const int P = cfg.pool_factor();
  const int rc = cfg.stage_field();
  const int grid = extent / P + cfg.fc_kernel - 1;
  const int pad0 = (cfg.window() - P) / 2;
  BankAxis a;
  if (b == 0) {
    a.pad_lo = pad0;
    a.features = grid;
    a.pad_hi = required_input(cfg, grid) - extent - pad0;
    return a;
  }
  const int f = 1 << b;
  const int decimation = (f - 1) / 2;
  for (int d = 0;; ++d) {
    const double num = f * (rc - 1) / 2.0 + decimation - P * (f - 1) / 2.0 + P * d -
                       (rc - 1) / 2.0 + pad0;
    const long pad = std::lround(num / f);
    if (pad >= 0) {
      a.pad_lo = static_cast<int>(pad);
      a.offset = d;
      break;
    }
  }
  int cells = (a.offset + grid + f - 1) / f;
  while (required_input(cfg, cells) - extent / f - a.pad_lo < 0) ++cells;
  a.features = cells;
  a.pad_hi = required_input(cfg, cells) - extent / f - a.pad_lo;
  return a;
}

int bank_factor(int b) { return 1 << b; }

}  // namespace

std::vector<BankLayout> bank_layout(const DetectorConfig& config, int height, int width) {
  config.validate();
  const int P = config.pool_factor();
  const int f = bank_factor(config.num_banks - 1);
  for (int extent : {height, width}) {
    if (extent % P != 0 || extent % f != 0) {
      throw Error("detector: image " + std::to_string(height) + "x" + std::to_string(width) +
                  " must be divisible by the pooling factor " + std::to_string(P) + " and by " +
                  std::to_string(f));
    }
  }
  std::vector<BankLayout> out;
  for (int b = 0; b < config.num_banks; ++b) {
    out.push_back({axis_layout(config, b, height), axis_layout(config, b, width)});
  }
  return out;
}

PyramidInput build_pyramid(const Tensor& image, int num_banks) {
  if (num_banks < 1) throw Error("build_pyramid: num_banks must be positive");
  const int f = bank_factor(num_banks - 1);
  if (image.height() % f != 0 || image.width() % f != 0) {
    throw Error("build_pyramid: image " + to_string(image.shape()) + " is not divisible by " +
                std::to_string(f));
  }
  PyramidInput p;
  for (int b = 0; b < num_banks; ++b) {
    p.banks.push_back(lcn_fwd(b == 0 ? image : antialias_downsample(image, bank_factor(b))));
  }
  return p;
}

// ---------------------------------------------------------------------------

PartDetector::PartDetector(DetectorConfig config) : config_(std::move(config)) {
  config_.validate();
  for (int b = 0; b < config_.num_banks; ++b) {
    Sequential s;
    int in = 1;
    for (std::size_t i = 0; i < config_.stages.size(); ++i) {
      const auto& st = config_.stages[i];
      s.add<ConvLayer>(in, st.features, st.kernel, 0,
                       "bank" + std::to_string(b) + ".conv" + std::to_string(i));
      s.add<ReluEpsLayer>(config_.relu_eps);
      if (st.pool) s.add<MaxPoolLayer>();
      in = st.features;
    }
    banks_.push_back(std::move(s));
  }
  head_.add<ConvLayer>(config_.stages.back().features, config_.fc_features, config_.fc_kernel, 0,
                       "head.fc");
  head_.add<ReluEpsLayer>(config_.relu_eps);
  head_.add<ConvLayer>(config_.fc_features, config_.num_joints, 1, 0, "head.out");
}

void PartDetector::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto init_seq = [&](Sequential& s) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s.layer(i).kind() == LayerKind::conv) static_cast<ConvLayer&>(s.layer(i)).init(rng);
    }
  };
  for (auto& b : banks_) init_seq(b);
  init_seq(head_);
  // A quiet output layer keeps the initial maps near the mostly-zero targets.
  auto& out = static_cast<ConvLayer&>(head_.layer(head_.size() - 1));
  out.weights().value = scale(out.weights().value, 0.1);
}

HeatMapSet PartDetector::forward(const PyramidInput& pyramid) {
  if (static_cast<int>(pyramid.banks.size()) != config_.num_banks) {
    throw Error("detector: pyramid has " + std::to_string(pyramid.banks.size()) +
                " banks, config expects " + std::to_string(config_.num_banks));
  }
  const Tensor& base = pyramid.banks[0];
  if (base.channels() != 1) throw Error("detector: expects a single-channel image");
  layout_ = bank_layout(config_, base.height(), base.width());
  bank_feature_shapes_.clear();
  const int grid_h = layout_[0].rows.features;
  const int grid_w = layout_[0].cols.features;
  Tensor merged(config_.stages.back().features, grid_h, grid_w);
  for (int b = 0; b < config_.num_banks; ++b) {
    const BankLayout& L = layout_[static_cast<std::size_t>(b)];
    const Tensor& img = pyramid.banks[static_cast<std::size_t>(b)];
    if (img.height() * bank_factor(b) != base.height() ||
        img.width() * bank_factor(b) != base.width()) {
      throw Error("detector: pyramid bank " + std::to_string(b) + " has the wrong size");
    }
    const Tensor padded =
        zero_pad(img, L.rows.pad_lo, L.rows.pad_hi, L.cols.pad_lo, L.cols.pad_hi);
    Tensor feat = banks_[static_cast<std::size_t>(b)].forward(padded);
    bank_feature_shapes_.push_back(feat.shape());
    if (b > 0) feat = upsample(feat, bank_factor(b), UpsampleMethod::nearest);
    axpy(merged, 1.0, crop(feat, L.rows.offset, L.cols.offset, grid_h, grid_w));
  }
  return {head_.forward(merged), stride()};
}

void PartDetector::backward(const Tensor& grad_maps) {
  if (layout_.empty()) throw Error("detector: backward() without forward()");
  const Tensor g_merged = head_.backward(grad_maps);
  for (int b = 0; b < config_.num_banks; ++b) {
    const BankLayout& L = layout_[static_cast<std::size_t>(b)];
    const Shape& fs = bank_feature_shapes_[static_cast<std::size_t>(b)];
    const int f = bank_factor(b);
    const int up_h = fs.height * f, up_w = fs.width * f;
    Tensor g_up = zero_pad(g_merged, L.rows.offset, up_h - L.rows.offset - g_merged.height(),
                           L.cols.offset, up_w - L.cols.offset - g_merged.width());
    if (b > 0) g_up = upsample_backward(g_up, f, UpsampleMethod::nearest, fs);
    banks_[static_cast<std::size_t>(b)].backward(g_up);
  }
}

HeatMapSet PartDetector::evaluate(const PyramidInput& pyramid) const {
  PartDetector copy(*this);
  return copy.forward(pyramid);
}

HeatMapSet PartDetector::evaluate_image(const Tensor& image) const {
  return evaluate(build_pyramid(image, config_.num_banks));
}

std::vector<Parameter*> PartDetector::parameters() {
  std::vector<Parameter*> out;
  for (auto& b : banks_) {
    auto p = b.parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  auto h = head_.parameters();
  out.insert(out.end(), h.begin(), h.end());
  return out;
}

void PartDetector::zero_grad() {
  for (Parameter* p : parameters()) p->grad.fill(0.0);
}

// ---------------------------------------------------------------------------

HeatMapSet sliding_window_forward(const Tensor& image, const PartDetector& detector) {
  const DetectorConfig& cfg = detector.config();
  const int window = cfg.window();
  if (image.height() < window || image.width() < window) {
    throw Error("sliding_window_forward: image " + to_string(image.shape()) +
                " is smaller than the " + std::to_string(window) + "x" + std::to_string(window) +
                " window");
  }
  const int P = cfg.pool_factor();
  const int rc = cfg.stage_field();
  const int F = cfg.fc_kernel;
  const auto layout = bank_layout(cfg, image.height(), image.width());
  const PyramidInput pyr = build_pyramid(image, cfg.num_banks);

  std::vector<Tensor> padded;
  std::vector<Sequential> banks;
  for (int b = 0; b < cfg.num_banks; ++b) {
    const BankLayout& L = layout[static_cast<std::size_t>(b)];
    padded.push_back(zero_pad(pyr.banks[static_cast<std::size_t>(b)], L.rows.pad_lo,
                              L.rows.pad_hi, L.cols.pad_lo, L.cols.pad_hi));
    banks.push_back(detector.bank(b));
  }
  Sequential head = detector.head();

  const int out_h = image.height() / P;
  const int out_w = image.width() / P;
  HeatMapSet result{Tensor(cfg.num_joints, out_h, out_w), P};
  for (int r = 0; r < out_h; ++r) {
    for (int c = 0; c < out_w; ++c) {
      Tensor block(cfg.stages.back().features, F, F);
      for (int b = 0; b < cfg.num_banks; ++b) {
        const BankLayout& L = layout[static_cast<std::size_t>(b)];
        const int f = bank_factor(b);
        // Upsampled cells r + offset ... r + offset + F - 1 come from bank
        // feature cells k0 ... k1.
        const int ur = r + L.rows.offset, uc = c + L.cols.offset;
        const int kr0 = ur / f, kr1 = (ur + F - 1) / f;
        const int kc0 = uc / f, kc1 = (uc + F - 1) / f;
        const Tensor patch = crop(padded[static_cast<std::size_t>(b)], P * kr0, P * kc0,
                                  P * (kr1 - kr0) + rc, P * (kc1 - kc0) + rc);
        Tensor feat = banks[static_cast<std::size_t>(b)].forward(patch);
        if (f > 1) feat = upsample(feat, f, UpsampleMethod::nearest);
        axpy(block, 1.0, crop(feat, ur - f * kr0, uc - f * kc0, F, F));
      }
      const Tensor out = head.forward(block);
      for (int j = 0; j < cfg.num_joints; ++j) result.maps.at(j, r, c) = out.at(j, 0, 0);
    }
  }
  return result;
}

std::vector<JointEstimate> extract_joints(const HeatMapSet& maps) {
  const HeatMapGeometry geo = maps.geometry();
  std::vector<JointEstimate> out;
  for (int j = 0; j < maps.num_joints(); ++j) {
    const ArgMax m = argmax2d(maps.maps, j);
    out.push_back({j, geo.cell_center(m.col), geo.cell_center(m.row)});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<NamedTensor> detector_tensors(const PartDetector& detector) {
  PartDetector copy(detector);
  std::vector<NamedTensor> out;
  for (const Parameter* p : copy.parameters()) out.push_back({p->name, p->value});
  return out;
}

std::string detector_meta(const DetectorConfig& config) { return format_ini(config.to_config()); }

PartDetector detector_from_file(const ParamFile& file) {
  const ConfigMap meta = parse_ini(file.meta, "detector model meta");
  PartDetector det(DetectorConfig::from_config(meta));
  for (Parameter* p : det.parameters()) {
    const Tensor* t = file.find(p->name);
    if (!t) throw Error("detector model is missing tensor '" + p->name + "'");
    if (t->shape() != p->value.shape()) {
      throw Error("detector tensor '" + p->name + "' has shape " + to_string(t->shape()) +
                  ", expected " + to_string(p->value.shape()));
    }
    p->value = *t;
  }
  return det;
}

}  // namespace posegraph
