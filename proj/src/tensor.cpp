#include "posegraph/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace posegraph {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << s.channels << "x" << s.height << "x" << s.width;
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
  if (shape.channels < 0 || shape.height < 0 || shape.width < 0) {
    throw Error("negative tensor dimension: " + to_string(shape));
  }
  data_.assign(shape.size(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (data_.size() != shape.size()) {
    throw Error("tensor data length " + std::to_string(data_.size()) +
                " does not match shape " + to_string(shape));
  }
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
  const int h = static_cast<int>(rows.size());
  const int w = h == 0 ? 0 : static_cast<int>(rows.front().size());
  Tensor t(1, h, w);
  for (int y = 0; y < h; ++y) {
    if (static_cast<int>(rows[y].size()) != w) throw Error("ragged rows in Tensor::from_rows");
    for (int x = 0; x < w; ++x) t.at(0, y, x) = rows[y][x];
  }
  return t;
}

std::span<double> Tensor::channel(int c) {
  if (c < 0 || c >= shape_.channels) throw Error("channel index out of range");
  return std::span<double>(data_).subspan(c * shape_.plane(), shape_.plane());
}

std::span<const double> Tensor::channel(int c) const {
  if (c < 0 || c >= shape_.channels) throw Error("channel index out of range");
  return std::span<const double>(data_).subspan(c * shape_.plane(), shape_.plane());
}

Tensor Tensor::channel_tensor(int c) const {
  auto src = channel(c);
  return Tensor(Shape{1, shape_.height, shape_.width}, std::vector<double>(src.begin(), src.end()));
}

void Tensor::set_channel(int c, const Tensor& plane) {
  if (plane.height() != height() || plane.width() != width() || plane.channels() != 1) {
    throw Error("set_channel: plane shape " + to_string(plane.shape()) + " vs " +
                to_string(shape_));
  }
  std::copy(plane.data_.begin(), plane.data_.end(), channel(c).begin());
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double Tensor::sum() const {
  double s = 0.0;
  for (double v : data_) s += v;
  return s;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                to_string(b.shape()));
  }
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "elementwise");
  Tensor out(a.shape());
  const std::size_t n = a.size();
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
      break;
    case ElementwiseOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
      break;
    case ElementwiseOp::mul:
    case ElementwiseOp::scale:
      for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
      break;
    case ElementwiseOp::exp:
    case ElementwiseOp::log:
      throw Error("elementwise: exp/log are unary");
  }
  return out;
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, double b) {
  Tensor out(a.shape());
  const std::size_t n = a.size();
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b;
      break;
    case ElementwiseOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b;
      break;
    case ElementwiseOp::mul:
    case ElementwiseOp::scale:
      for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b;
      break;
    case ElementwiseOp::exp:
      for (std::size_t i = 0; i < n; ++i) out[i] = std::exp(a[i]);
      break;
    case ElementwiseOp::log:
      for (std::size_t i = 0; i < n; ++i) {
        if (!(a[i] > 0.0)) {
          throw Error("log of non-positive element " + std::to_string(a[i]) + " at index " +
                      std::to_string(i));
        }
        out[i] = std::log(a[i]);
      }
      break;
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }
Tensor add(const Tensor& a, double b) { return elementwise(ElementwiseOp::add, a, b); }
Tensor scale(const Tensor& a, double s) { return elementwise(ElementwiseOp::scale, a, s); }
Tensor exp(const Tensor& a) { return elementwise(ElementwiseOp::exp, a, 0.0); }
Tensor log(const Tensor& a) { return elementwise(ElementwiseOp::log, a, 0.0); }

void axpy(Tensor& a, double s, const Tensor& b) {
  require_same_shape(a, b, "axpy");
  double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < a.size(); ++i) pa[i] += s * pb[i];
}

ArgMax argmax2d(const Tensor& t, int channel) {
  if (t.empty() || t.height() == 0 || t.width() == 0) throw Error("argmax2d on empty tensor");
  if (channel < 0 || channel >= t.channels()) throw Error("argmax2d: channel out of range");
  auto plane = t.channel(channel);
  std::size_t best = 0;
  for (std::size_t i = 1; i < plane.size(); ++i) {
    if (plane[i] > plane[best]) best = i;
  }
  return ArgMax{static_cast<int>(best / t.width()), static_cast<int>(best % t.width()),
                plane[best]};
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
  if (parts.empty()) return {};
  int channels = 0;
  for (const auto& p : parts) {
    if (p.height() != parts[0].height() || p.width() != parts[0].width()) {
      throw Error("concat_channels: spatial size mismatch");
    }
    channels += p.channels();
  }
  Tensor out(channels, parts[0].height(), parts[0].width());
  double* dst = out.data();
  for (const auto& p : parts) dst = std::copy(p.data(), p.data() + p.size(), dst);
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace posegraph
