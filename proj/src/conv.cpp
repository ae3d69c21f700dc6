#include "posegraph/conv.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>

namespace posegraph {

namespace {

std::atomic<bool> g_fft_sabotage{false};

bool is_odd(int v) { return v % 2 == 1; }

// Two taps per output sample; nearest uses a single tap with weight 1.
struct Tap {
  int i0 = 0;
  int i1 = 0;
  double w0 = 1.0;
  double w1 = 0.0;
};

std::vector<Tap> resample_taps(int in_len, int factor, UpsampleMethod method) {
  const int out_len = in_len * factor;
  std::vector<Tap> taps(static_cast<std::size_t>(out_len));
  for (int o = 0; o < out_len; ++o) {
    Tap& t = taps[o];
    if (method == UpsampleMethod::nearest || in_len == 1 || factor == 1) {
      t.i0 = t.i1 = o / factor;
      continue;
    }
    // Corner-aligned: first and last samples map onto the input endpoints.
    const double src = static_cast<double>(o) * (in_len - 1) / (out_len - 1);
    const int lo = std::min(static_cast<int>(std::floor(src)), in_len - 1);
    const int hi = std::min(lo + 1, in_len - 1);
    const double frac = src - lo;
    t.i0 = lo;
    t.i1 = hi;
    t.w0 = 1.0 - frac;
    t.w1 = frac;
  }
  return taps;
}

}  // namespace

void set_fft_sabotage(bool enabled) { g_fft_sabotage = enabled; }

ConvKernel::ConvKernel(Tensor weights) : weights_(std::move(weights)) {
  if (weights_.channels() != 1) throw Error("ConvKernel must have one channel");
  if (!is_odd(weights_.height()) || !is_odd(weights_.width())) {
    throw Error("ConvKernel dimensions must be odd, got " + to_string(weights_.shape()));
  }
}

ConvKernel ConvKernel::delta(int size, int dy, int dx) {
  Tensor w(1, size, size);
  const int c = size / 2;
  if (std::abs(dy) > c || std::abs(dx) > c) throw Error("delta offset outside kernel");
  w.at(0, c + dy, c + dx) = 1.0;
  return ConvKernel(std::move(w));
}

int PaddingSpec::rows_for(int kernel_height) const {
  if (pad < 0) throw Error("negative padding");
  switch (mode) {
    case Mode::valid: return pad;
    case Mode::same: return (kernel_height - 1) / 2;
    case Mode::full: return kernel_height - 1;
  }
  return 0;
}

int PaddingSpec::cols_for(int kernel_width) const { return rows_for(kernel_width); }

Tensor zero_pad(const Tensor& input, int top, int bottom, int left, int right) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw Error("zero_pad: negative pad");
  const int h = input.height() + top + bottom;
  const int w = input.width() + left + right;
  Tensor out(input.channels(), h, w);
  for (int c = 0; c < input.channels(); ++c) {
    for (int y = 0; y < input.height(); ++y) {
      const double* src = &input.data()[(static_cast<std::size_t>(c) * input.height() + y) *
                                        input.width()];
      std::copy(src, src + input.width(), &out.at(c, y + top, left));
    }
  }
  return out;
}

Tensor crop(const Tensor& input, int top, int left, int height, int width) {
  if (top < 0 || left < 0 || top + height > input.height() || left + width > input.width()) {
    throw Error("crop window outside tensor " + to_string(input.shape()));
  }
  Tensor out(input.channels(), height, width);
  for (int c = 0; c < input.channels(); ++c) {
    for (int y = 0; y < height; ++y) {
      const double* src = &input.at(c, top + y, left);
      std::copy(src, src + width, &out.at(c, y, 0));
    }
  }
  return out;
}

Tensor flip180(const Tensor& t) {
  Tensor out(t.shape());
  for (int c = 0; c < t.channels(); ++c) {
    for (int y = 0; y < t.height(); ++y) {
      for (int x = 0; x < t.width(); ++x) {
        out.at(c, t.height() - 1 - y, t.width() - 1 - x) = t.at(c, y, x);
      }
    }
  }
  return out;
}

void correlate_accumulate(std::span<const double> in, int in_h, int in_w,
                          std::span<const double> kernel, int k_h, int k_w,
                          std::span<double> out, int out_h, int out_w) {
  for (int i = 0; i < k_h; ++i) {
    for (int j = 0; j < k_w; ++j) {
      const double k = kernel[static_cast<std::size_t>(i) * k_w + j];
      if (k == 0.0) continue;
      for (int y = 0; y < out_h; ++y) {
        const double* src = in.data() + static_cast<std::size_t>(y + i) * in_w + j;
        double* dst = out.data() + static_cast<std::size_t>(y) * out_w;
        for (int x = 0; x < out_w; ++x) dst[x] += k * src[x];
      }
    }
  }
  (void)in_h;
}

Tensor correlate_valid_direct(const Tensor& input, const Tensor& kernel) {
  if (kernel.channels() != 1) throw Error("correlate: kernel must have one channel");
  const int out_h = input.height() - kernel.height() + 1;
  const int out_w = input.width() - kernel.width() + 1;
  if (out_h <= 0 || out_w <= 0) {
    throw Error("kernel " + to_string(kernel.shape()) + " larger than padded input " +
                to_string(input.shape()));
  }
  Tensor out(input.channels(), out_h, out_w);
  for (int c = 0; c < input.channels(); ++c) {
    correlate_accumulate(input.channel(c), input.height(), input.width(), kernel.values(),
                         kernel.height(), kernel.width(), out.channel(c), out_h, out_w);
  }
  return out;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

void fft_inplace(std::span<double> a, std::size_t n, bool inverse) {
  if (n == 0 || (n & (n - 1)) != 0) throw Error("fft size must be a power of two");
  if (a.size() < 2 * n) throw Error("fft buffer too small");
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(a[2 * i], a[2 * j]);
      std::swap(a[2 * i + 1], a[2 * j + 1]);
    }
  }
  const double sign = inverse ? 1.0 : -1.0;
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const std::size_t half = len / 2;
    for (std::size_t k = 0; k < half; ++k) {
      // Twiddles computed directly per index to avoid drift from repeated
      // multiplication.
      const double ang = sign * 2.0 * std::numbers::pi * static_cast<double>(k) /
                         static_cast<double>(len);
      const double wr = std::cos(ang);
      const double wi = std::sin(ang);
      for (std::size_t s = 0; s < n; s += len) {
        const std::size_t p = 2 * (s + k);
        const std::size_t q = 2 * (s + k + half);
        const double tr = a[q] * wr - a[q + 1] * wi;
        const double ti = a[q] * wi + a[q + 1] * wr;
        a[q] = a[p] - tr;
        a[q + 1] = a[p + 1] - ti;
        a[p] += tr;
        a[p + 1] += ti;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < 2 * n; ++i) a[i] *= inv;
  }
}

namespace {

// 2D transform of an nh x nw interleaved complex grid.
void fft2d(std::vector<double>& grid, std::size_t nh, std::size_t nw, bool inverse) {
  for (std::size_t r = 0; r < nh; ++r) {
    fft_inplace(std::span<double>(grid).subspan(2 * r * nw, 2 * nw), nw, inverse);
  }
  std::vector<double> col(2 * nh);
  for (std::size_t c = 0; c < nw; ++c) {
    for (std::size_t r = 0; r < nh; ++r) {
      col[2 * r] = grid[2 * (r * nw + c)];
      col[2 * r + 1] = grid[2 * (r * nw + c) + 1];
    }
    fft_inplace(col, nh, inverse);
    for (std::size_t r = 0; r < nh; ++r) {
      grid[2 * (r * nw + c)] = col[2 * r];
      grid[2 * (r * nw + c) + 1] = col[2 * r + 1];
    }
  }
}

}  // namespace

Tensor correlate_valid_fft(const Tensor& input, const Tensor& kernel) {
  if (kernel.channels() != 1) throw Error("correlate: kernel must have one channel");
  const int out_h = input.height() - kernel.height() + 1;
  const int out_w = input.width() - kernel.width() + 1;
  if (out_h <= 0 || out_w <= 0) {
    throw Error("kernel " + to_string(kernel.shape()) + " larger than padded input " +
                to_string(input.shape()));
  }
  // Circular correlation on N >= H never wraps into the valid region.
  const std::size_t nh = next_pow2(static_cast<std::size_t>(input.height()));
  const std::size_t nw = next_pow2(static_cast<std::size_t>(input.width()));

  std::vector<double> kf(2 * nh * nw, 0.0);
  for (int y = 0; y < kernel.height(); ++y) {
    for (int x = 0; x < kernel.width(); ++x) kf[2 * (y * nw + x)] = kernel.at(0, y, x);
  }
  fft2d(kf, nh, nw, false);

  Tensor out(input.channels(), out_h, out_w);
  std::vector<double> buf(2 * nh * nw);
  for (int c = 0; c < input.channels(); ++c) {
    std::fill(buf.begin(), buf.end(), 0.0);
    for (int y = 0; y < input.height(); ++y) {
      for (int x = 0; x < input.width(); ++x) buf[2 * (y * nw + x)] = input.at(c, y, x);
    }
    fft2d(buf, nh, nw, false);
    for (std::size_t i = 0; i < nh * nw; ++i) {
      // in * conj(kernel)
      const double ar = buf[2 * i], ai = buf[2 * i + 1];
      const double br = kf[2 * i], bi = -kf[2 * i + 1];
      buf[2 * i] = ar * br - ai * bi;
      buf[2 * i + 1] = ar * bi + ai * br;
    }
    fft2d(buf, nh, nw, true);
    for (int y = 0; y < out_h; ++y) {
      for (int x = 0; x < out_w; ++x) out.at(c, y, x) = buf[2 * (y * nw + x)];
    }
  }
  if (g_fft_sabotage) {
    for (double& v : out.values()) v += 1e-3;
  }
  return out;
}

namespace {

template <typename Correlate>
Tensor conv2d_impl(const Tensor& input, const ConvKernel& kernel, PaddingSpec padding,
                   Correlate&& correlate) {
  const int pr = padding.rows_for(kernel.height());
  const int pc = padding.cols_for(kernel.width());
  if (input.height() + 2 * pr < kernel.height() || input.width() + 2 * pc < kernel.width()) {
    throw Error("kernel " + to_string(kernel.weights().shape()) + " larger than padded input " +
                to_string(input.shape()));
  }
  if (pr == 0 && pc == 0) return correlate(input, kernel.weights());
  return correlate(zero_pad(input, pr, pr, pc, pc), kernel.weights());
}

}  // namespace

Tensor conv2d_direct(const Tensor& input, const ConvKernel& kernel, PaddingSpec padding) {
  return conv2d_impl(input, kernel, padding, correlate_valid_direct);
}

Tensor conv2d_fft(const Tensor& input, const ConvKernel& kernel, PaddingSpec padding) {
  return conv2d_impl(input, kernel, padding, correlate_valid_fft);
}

PoolResult maxpool2(const Tensor& input) {
  if (input.height() % 2 != 0 || input.width() % 2 != 0) {
    throw Error("maxpool2 requires even dimensions, got " + to_string(input.shape()));
  }
  const int oh = input.height() / 2;
  const int ow = input.width() / 2;
  PoolResult r{Tensor(input.channels(), oh, ow), {}};
  r.argmax.resize(r.pooled.size());
  std::size_t o = 0;
  for (int c = 0; c < input.channels(); ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x, ++o) {
        std::size_t best = (static_cast<std::size_t>(c) * input.height() + 2 * y) * input.width() +
                           2 * x;
        for (int dy = 0; dy < 2; ++dy) {
          for (int dx = 0; dx < 2; ++dx) {
            const std::size_t idx =
                (static_cast<std::size_t>(c) * input.height() + 2 * y + dy) * input.width() +
                2 * x + dx;
            if (input[idx] > input[best]) best = idx;
          }
        }
        r.pooled[o] = input[best];
        r.argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return r;
}

Tensor maxpool2_backward(const Tensor& grad_pooled, const std::vector<std::uint32_t>& argmax,
                         const Shape& input_shape) {
  if (argmax.size() != grad_pooled.size()) throw Error("maxpool2_backward: index size mismatch");
  Tensor g(input_shape);
  for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += grad_pooled[i];
  return g;
}

Tensor upsample(const Tensor& input, int factor, UpsampleMethod method) {
  if (factor < 1) throw Error("upsample factor must be >= 1");
  if (factor == 1) return input;
  const auto ty = resample_taps(input.height(), factor, method);
  const auto tx = resample_taps(input.width(), factor, method);
  const int oh = input.height() * factor;
  const int ow = input.width() * factor;
  Tensor out(input.channels(), oh, ow);
  for (int c = 0; c < input.channels(); ++c) {
    for (int y = 0; y < oh; ++y) {
      const Tap& a = ty[y];
      for (int x = 0; x < ow; ++x) {
        const Tap& b = tx[x];
        out.at(c, y, x) = a.w0 * (b.w0 * input.at(c, a.i0, b.i0) + b.w1 * input.at(c, a.i0, b.i1)) +
                          a.w1 * (b.w0 * input.at(c, a.i1, b.i0) + b.w1 * input.at(c, a.i1, b.i1));
      }
    }
  }
  return out;
}

Tensor upsample_backward(const Tensor& grad_out, int factor, UpsampleMethod method,
                         const Shape& input_shape) {
  if (factor < 1) throw Error("upsample factor must be >= 1");
  if (grad_out.height() != input_shape.height * factor ||
      grad_out.width() != input_shape.width * factor ||
      grad_out.channels() != input_shape.channels) {
    throw Error("upsample_backward: gradient shape does not match input shape x factor");
  }
  if (factor == 1) return grad_out;
  const auto ty = resample_taps(input_shape.height, factor, method);
  const auto tx = resample_taps(input_shape.width, factor, method);
  Tensor g(input_shape);
  for (int c = 0; c < grad_out.channels(); ++c) {
    for (int y = 0; y < grad_out.height(); ++y) {
      const Tap& a = ty[y];
      for (int x = 0; x < grad_out.width(); ++x) {
        const Tap& b = tx[x];
        const double v = grad_out.at(c, y, x);
        g.at(c, a.i0, b.i0) += a.w0 * b.w0 * v;
        g.at(c, a.i0, b.i1) += a.w0 * b.w1 * v;
        g.at(c, a.i1, b.i0) += a.w1 * b.w0 * v;
        g.at(c, a.i1, b.i1) += a.w1 * b.w1 * v;
      }
    }
  }
  return g;
}

Tensor gaussian_kernel(int radius, double sigma) {
  if (radius < 0 || !(sigma > 0.0)) throw Error("gaussian_kernel: bad radius or sigma");
  const int size = 2 * radius + 1;
  Tensor k(1, size, size);
  for (int y = -radius; y <= radius; ++y) {
    for (int x = -radius; x <= radius; ++x) {
      k.at(0, y + radius, x + radius) = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
    }
  }
  return scale(k, 1.0 / k.sum());
}

Tensor correlate_same(const Tensor& input, const Tensor& kernel) {
  const int pr = kernel.height() / 2;
  const int pc = kernel.width() / 2;
  return correlate_valid_direct(
      zero_pad(input, pr, kernel.height() - 1 - pr, pc, kernel.width() - 1 - pc), kernel);
}

Tensor kernel_coverage(int height, int width, const Tensor& kernel) {
  return correlate_same(Tensor(1, height, width, 1.0), kernel);
}

Tensor blur_renormalized(const Tensor& input, const Tensor& kernel) {
  Tensor blurred = correlate_same(input, kernel);
  const Tensor cover = kernel_coverage(input.height(), input.width(), kernel);
  for (int c = 0; c < blurred.channels(); ++c) {
    auto plane = blurred.channel(c);
    for (std::size_t i = 0; i < plane.size(); ++i) plane[i] /= cover[i];
  }
  return blurred;
}

Tensor antialias_downsample(const Tensor& input, int factor) {
  if (factor < 1) throw Error("antialias_downsample: factor must be >= 1");
  if (input.height() % factor != 0 || input.width() % factor != 0) {
    throw Error("antialias_downsample: dims " + to_string(input.shape()) +
                " not divisible by " + std::to_string(factor));
  }
  const Tensor blurred = blur_renormalized(input, gaussian_kernel(2 * factor, 0.5 * factor));
  const int oh = input.height() / factor;
  const int ow = input.width() / factor;
  const int offset = (factor - 1) / 2;
  Tensor out(input.channels(), oh, ow);
  for (int c = 0; c < input.channels(); ++c) {
    for (int y = 0; y < oh; ++y) {
      for (int x = 0; x < ow; ++x) {
        out.at(c, y, x) = blurred.at(c, y * factor + offset, x * factor + offset);
      }
    }
  }
  return out;
}

}  // namespace posegraph
