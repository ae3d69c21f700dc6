#pragma once

#include <cstdint>
#include <vector>

#include "posegraph/tensor.hpp"

// Convolution convention used throughout the library: correlation, i.e.
//
//   out(y, x) = sum_{i,j} kernel(i, j) * padded_input(y + i, x + j)
//
// with no kernel flip. Callers that need a true convolution (the spatial
// priors) rotate the kernel by 180 degrees with flip180().

namespace posegraph {

/// Single-channel kernel with odd height and width, so the center pixel is
/// well defined.
class ConvKernel {
 public:
  explicit ConvKernel(Tensor weights);

  int height() const { return weights_.height(); }
  int width() const { return weights_.width(); }
  int center_row() const { return height() / 2; }
  int center_col() const { return width() / 2; }
  const Tensor& weights() const { return weights_; }

  static ConvKernel delta(int size, int dy = 0, int dx = 0);

 private:
  Tensor weights_;
};

struct PaddingSpec {
  enum class Mode { valid, same, full };

  Mode mode = Mode::valid;
  /// Explicit zero padding per side; only used in valid mode.
  int pad = 0;

  static PaddingSpec valid(int pad = 0) { return {Mode::valid, pad}; }
  static PaddingSpec same() { return {Mode::same, 0}; }
  static PaddingSpec full() { return {Mode::full, 0}; }

  /// Per-side padding (rows, cols) this padding mode implies for a given kernel size.
  int rows_for(int kernel_height) const;
  int cols_for(int kernel_width) const;
};

Tensor zero_pad(const Tensor& input, int top, int bottom, int left, int right);
Tensor crop(const Tensor& input, int top, int left, int height, int width);
Tensor flip180(const Tensor& t);

/// Valid correlation of every input channel with one single-channel kernel
/// of arbitrary (possibly even) size. Output (H-KH+1) x (W-KW+1).
Tensor correlate_valid_direct(const Tensor& input, const Tensor& kernel);
Tensor correlate_valid_fft(const Tensor& input, const Tensor& kernel);

/// Accumulates kernel-weighted correlation of one input plane into `out`:
/// out(y,x) += sum kernel(i,j) * in(y+i, x+j). Hot loop of the conv layers.
void correlate_accumulate(std::span<const double> in, int in_h, int in_w,
                          std::span<const double> kernel, int k_h, int k_w,
                          std::span<double> out, int out_h, int out_w);

Tensor conv2d_direct(const Tensor& input, const ConvKernel& kernel, PaddingSpec padding);
Tensor conv2d_fft(const Tensor& input, const ConvKernel& kernel, PaddingSpec padding);

/// In-place radix-2 complex FFT over interleaved (re, im) pairs.
/// `n` must be a power of two.
void fft_inplace(std::span<double> interleaved, std::size_t n, bool inverse);
std::size_t next_pow2(std::size_t n);

struct PoolResult {
  Tensor pooled;
  /// Flat index into the source tensor of each pooled element's maximum.
  std::vector<std::uint32_t> argmax;
};

PoolResult maxpool2(const Tensor& input);
Tensor maxpool2_backward(const Tensor& grad_pooled, const std::vector<std::uint32_t>& argmax,
                         const Shape& input_shape);

enum class UpsampleMethod { nearest, bilinear };

Tensor upsample(const Tensor& input, int factor, UpsampleMethod method);
/// Adjoint of upsample(); maps an output-sized gradient back to input size.
Tensor upsample_backward(const Tensor& grad_out, int factor, UpsampleMethod method,
                         const Shape& input_shape);

/// Normalized (sum 1) square Gaussian kernel of size 2*radius+1.
Tensor gaussian_kernel(int radius, double sigma);

/// Same-size correlation with zero padding.
Tensor correlate_same(const Tensor& input, const Tensor& kernel);

/// Same-size weighted average where each output is divided by the kernel
/// mass that falls inside the image (edge renormalization).
Tensor blur_renormalized(const Tensor& input, const Tensor& kernel);

/// Per-pixel kernel mass inside the image, the divisor used above.
Tensor kernel_coverage(int height, int width, const Tensor& kernel);

/// Gaussian blur (sigma = 0.5 * factor, radius 2 * factor) then keep every
/// factor-th pixel starting at (factor - 1) / 2.
Tensor antialias_downsample(const Tensor& input, int factor);

/// Test hook: when enabled, correlate_valid_fft perturbs its output so the
/// equivalence checks have a failure to detect.
void set_fft_sabotage(bool enabled);

}  // namespace posegraph
