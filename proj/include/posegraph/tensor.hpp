#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace posegraph {

/// Raised for every contract violation in the library (shape mismatch,
/// out-of-range hyperparameter, malformed file, non-finite value).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  std::size_t plane() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense channels x height x width grid of doubles, row-major.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(int channels, int height, int width, double fill = 0.0)
      : Tensor(Shape{channels, height, width}, fill) {}
  Tensor(Shape shape, std::vector<double> data);

  /// Single-channel tensor from nested rows; all rows must have equal length.
  static Tensor from_rows(const std::vector<std::vector<double>>& rows);

  const Shape& shape() const { return shape_; }
  int channels() const { return shape_.channels; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
  const double& at(int c, int y, int x) const { return data_[index(c, y, x)]; }
  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> channel(int c);
  std::span<const double> channel(int c) const;

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  /// Copy of a single channel as a 1-channel tensor.
  Tensor channel_tensor(int c) const;
  void set_channel(int c, const Tensor& plane);

  void fill(double v);
  double sum() const;
  double max_abs() const;
  bool all_finite() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * shape_.height + static_cast<std::size_t>(y)) *
               shape_.width +
           static_cast<std::size_t>(x);
  }

  Shape shape_{};
  std::vector<double> data_;
};

enum class ElementwiseOp { add, sub, mul, scale, exp, log };

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
Tensor elementwise(ElementwiseOp op, const Tensor& a, double b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor scale(const Tensor& a, double s);
Tensor exp(const Tensor& a);
/// Throws when any element is <= 0.
Tensor log(const Tensor& a);

/// a += s * b, in place.
void axpy(Tensor& a, double s, const Tensor& b);

struct ArgMax {
  int row = 0;
  int col = 0;
  double value = 0.0;
};

/// Location of the largest element of one channel. Ties resolve to the first
/// element in row-major order.
ArgMax argmax2d(const Tensor& t, int channel);

/// Stacks tensors of equal spatial size along the channel axis.
Tensor concat_channels(const std::vector<Tensor>& parts);

double max_abs_diff(const Tensor& a, const Tensor& b);

void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

}  // namespace posegraph
