#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "densecount/error.hpp"
#include "densecount/tensor.hpp"

namespace densecount::nn {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

// Unfolds one image [C,H,W] into [C*kh*kw, H*W] with zero "same" padding.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, T* cols) {
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto H = static_cast<std::ptrdiff_t>(height);
  const auto W = static_cast<std::ptrdiff_t>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    const T* plane = img + c * height * width;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* row = cols + ((c * kh + ky) * kw + kx) * height * width;
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(ky) - ph;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(kx) - pw;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -ox);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(W, W - ox);
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          T* dst = row + y * W;
          const std::ptrdiff_t iy = y + oy;
          if (iy < 0 || iy >= H) {
            std::fill(dst, dst + W, T{0});
            continue;
          }
          std::fill(dst, dst + x_lo, T{0});
          const T* src = plane + iy * W + ox;
          std::copy(src + x_lo, src + x_hi, dst + x_lo);
          std::fill(dst + x_hi, dst + W, T{0});
        }
      }
    }
  }
}

// Adjoint of im2col: scatters-adds columns back into an image.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, T* img) {
  const auto ph = static_cast<std::ptrdiff_t>(kh / 2);
  const auto pw = static_cast<std::ptrdiff_t>(kw / 2);
  const auto H = static_cast<std::ptrdiff_t>(height);
  const auto W = static_cast<std::ptrdiff_t>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    T* plane = img + c * height * width;
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* row = cols + ((c * kh + ky) * kw + kx) * height * width;
        const std::ptrdiff_t oy = static_cast<std::ptrdiff_t>(ky) - ph;
        const std::ptrdiff_t ox = static_cast<std::ptrdiff_t>(kx) - pw;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -ox);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(W, W - ox);
        for (std::ptrdiff_t y = 0; y < H; ++y) {
          const std::ptrdiff_t iy = y + oy;
          if (iy < 0 || iy >= H) continue;
          const T* src = row + y * W;
          T* dst = plane + iy * W + ox;
          for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) dst[x] += src[x];
        }
      }
    }
  }
}

template <typename T>
void check_conv_shapes(const Dims4& in, const BasicTensor<T>& weight, const BasicTensor<T>& bias,
                       const char* op) {
  const Dims4 wd = dims4(weight, op);
  if (wd.c != in.c)
    throw UsageError(std::string(op) + ": weight expects " + std::to_string(wd.c) +
                     " input channels, input has " + std::to_string(in.c));
  if (wd.h % 2 == 0 || wd.w % 2 == 0)
    throw UsageError(std::string(op) + ": kernel extents must be odd");
  if (bias.rank() != 1 || bias.dim(0) != wd.n)
    throw UsageError(std::string(op) + ": bias shape " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(wd.n) + " output channels");
}

}  // namespace detail

// ---- convolution ---------------------------------------------------------

/// Stride-1 cross-correlation with zero "same" padding.
/// input [B,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout] -> [B,Cout,H,W].
template <typename T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& input, const BasicTensor<T>& weight,
                              const BasicTensor<T>& bias) {
  const Dims4 in = dims4(input, "conv2d_forward");
  detail::check_conv_shapes(in, weight, bias, "conv2d_forward");
  const std::size_t cout = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  const std::size_t k = in.c * kh * kw;
  const std::size_t hw = in.plane();

  BasicTensor<T> out({in.n, cout, in.h, in.w});
  std::vector<T> cols(k * hw);
  detail::ConstMapMat<T> wmat(weight.data(), static_cast<Eigen::Index>(cout),
                              static_cast<Eigen::Index>(k));
  for (std::size_t b = 0; b < in.n; ++b) {
    const T* src = input.data() + b * in.c * hw;
    T* dst = out.data() + b * cout * hw;
    detail::MapMat<T> omat(dst, static_cast<Eigen::Index>(cout), static_cast<Eigen::Index>(hw));
    if (kh == 1 && kw == 1) {
      detail::ConstMapMat<T> imat(src, static_cast<Eigen::Index>(in.c),
                                  static_cast<Eigen::Index>(hw));
      omat.noalias() = wmat * imat;
    } else {
      detail::im2col(src, in.c, in.h, in.w, kh, kw, cols.data());
      detail::ConstMapMat<T> cmat(cols.data(), static_cast<Eigen::Index>(k),
                                  static_cast<Eigen::Index>(hw));
      omat.noalias() = wmat * cmat;
    }
    for (std::size_t o = 0; o < cout; ++o) {
      const T bv = bias[o];
      T* row = dst + o * hw;
      for (std::size_t i = 0; i < hw; ++i) row[i] += bv;
    }
  }
  ensure_finite(out, "conv2d_forward");
  return out;
}

template <typename T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicTensor<T> weight;
  BasicTensor<T> bias;
};

/// Gradients of conv2d_forward with respect to input, weight and bias.
template <typename T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& input,
                             const BasicTensor<T>& weight) {
  const Dims4 in = dims4(input, "conv2d_backward");
  const Dims4 wd = dims4(weight, "conv2d_backward");
  const Dims4 go = dims4(grad_out, "conv2d_backward");
  if (wd.c != in.c || go.n != in.n || go.c != wd.n || go.h != in.h || go.w != in.w)
    throw UsageError("conv2d_backward: grad_out " + shape_str(grad_out.shape()) +
                     " inconsistent with input " + shape_str(input.shape()) + " and weight " +
                     shape_str(weight.shape()));
  const std::size_t cout = wd.n, kh = wd.h, kw = wd.w;
  const std::size_t k = in.c * kh * kw;
  const std::size_t hw = in.plane();
  const bool pointwise = kh == 1 && kw == 1;

  ConvGrads<T> g{BasicTensor<T>(input.shape()), BasicTensor<T>(weight.shape()),
                 BasicTensor<T>({cout})};
  detail::ConstMapMat<T> wmat(weight.data(), static_cast<Eigen::Index>(cout),
                              static_cast<Eigen::Index>(k));
  detail::MapMat<T> gw(g.weight.data(), static_cast<Eigen::Index>(cout),
                       static_cast<Eigen::Index>(k));
  std::vector<T> cols(pointwise ? 0 : k * hw);
  std::vector<T> gcols(pointwise ? 0 : k * hw);
  std::vector<double> gbias(cout, 0.0);

  for (std::size_t b = 0; b < in.n; ++b) {
    const T* src = input.data() + b * in.c * hw;
    const T* gsrc = grad_out.data() + b * cout * hw;
    detail::ConstMapMat<T> gomat(gsrc, static_cast<Eigen::Index>(cout),
                                 static_cast<Eigen::Index>(hw));
    T* gin = g.input.data() + b * in.c * hw;
    if (pointwise) {
      detail::ConstMapMat<T> imat(src, static_cast<Eigen::Index>(in.c),
                                  static_cast<Eigen::Index>(hw));
      gw.noalias() += gomat * imat.transpose();
      detail::MapMat<T> gimat(gin, static_cast<Eigen::Index>(in.c),
                              static_cast<Eigen::Index>(hw));
      gimat.noalias() = wmat.transpose() * gomat;
    } else {
      detail::im2col(src, in.c, in.h, in.w, kh, kw, cols.data());
      detail::ConstMapMat<T> cmat(cols.data(), static_cast<Eigen::Index>(k),
                                  static_cast<Eigen::Index>(hw));
      gw.noalias() += gomat * cmat.transpose();
      detail::MapMat<T> gcmat(gcols.data(), static_cast<Eigen::Index>(k),
                              static_cast<Eigen::Index>(hw));
      gcmat.noalias() = wmat.transpose() * gomat;
      detail::col2im(gcols.data(), in.c, in.h, in.w, kh, kw, gin);
    }
    for (std::size_t o = 0; o < cout; ++o) {
      const T* row = gsrc + o * hw;
      double s = 0.0;
      for (std::size_t i = 0; i < hw; ++i) s += static_cast<double>(row[i]);
      gbias[o] += s;
    }
  }
  for (std::size_t o = 0; o < cout; ++o) g.bias[o] = static_cast<T>(gbias[o]);
  ensure_finite(g.input, "conv2d_backward");
  ensure_finite(g.weight, "conv2d_backward");
  return g;
}

// ---- pooling / upsampling ------------------------------------------------

template <typename T>
struct MaxPoolResult {
  BasicTensor<T> output;
  // Position of the max inside each 2x2 block: 0..3, row-major.
  std::vector<std::uint8_t> argmax;
  Shape input_shape;
};

/// 2x2 non-overlapping max pooling. Ties go to the first element in
/// row-major order.
template <typename T>
MaxPoolResult<T> maxpool2x2_forward(const BasicTensor<T>& input) {
  const Dims4 d = dims4(input, "maxpool2x2_forward");
  if (d.h % 2 != 0 || d.w % 2 != 0)
    throw UsageError("maxpool2x2_forward: spatial dims must be even, got " +
                     shape_str(input.shape()));
  const std::size_t oh = d.h / 2, ow = d.w / 2;
  MaxPoolResult<T> r{BasicTensor<T>({d.n, d.c, oh, ow}), {}, input.shape()};
  r.argmax.resize(r.output.size());
  std::size_t o = 0;
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    const T* plane = input.data() + p * d.plane();
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x, ++o) {
        const T* tl = plane + (2 * y) * d.w + 2 * x;
        const T cand[4] = {tl[0], tl[1], tl[d.w], tl[d.w + 1]};
        std::uint8_t best = 0;
        for (std::uint8_t i = 1; i < 4; ++i)
          if (cand[i] > cand[best]) best = i;
        r.output[o] = cand[best];
        r.argmax[o] = best;
      }
    }
  }
  return r;
}

template <typename T>
BasicTensor<T> maxpool2x2_backward(const BasicTensor<T>& grad_out,
                                   std::span<const std::uint8_t> argmax,
                                   const Shape& input_shape) {
  BasicTensor<T> grad_in(input_shape);
  const Dims4 d = dims4(grad_in, "maxpool2x2_backward");
  const Dims4 g = dims4(grad_out, "maxpool2x2_backward");
  if (g.n != d.n || g.c != d.c || g.h * 2 != d.h || g.w * 2 != d.w || argmax.size() != grad_out.size())
    throw UsageError("maxpool2x2_backward: grad_out " + shape_str(grad_out.shape()) +
                     " inconsistent with input " + shape_str(input_shape));
  std::size_t o = 0;
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    T* plane = grad_in.data() + p * d.plane();
    for (std::size_t y = 0; y < g.h; ++y) {
      for (std::size_t x = 0; x < g.w; ++x, ++o) {
        const std::size_t dy = argmax[o] / 2, dx = argmax[o] % 2;
        plane[(2 * y + dy) * d.w + 2 * x + dx] += grad_out[o];
      }
    }
  }
  return grad_in;
}

template <typename T>
BasicTensor<T> upsample_nearest2x_forward(const BasicTensor<T>& input) {
  const Dims4 d = dims4(input, "upsample_nearest2x_forward");
  const std::size_t ow = d.w * 2;
  BasicTensor<T> out({d.n, d.c, d.h * 2, ow});
  for (std::size_t p = 0; p < d.n * d.c; ++p) {
    const T* src = input.data() + p * d.plane();
    T* dst = out.data() + p * d.plane() * 4;
    for (std::size_t y = 0; y < d.h; ++y) {
      T* r0 = dst + (2 * y) * ow;
      for (std::size_t x = 0; x < d.w; ++x) r0[2 * x] = r0[2 * x + 1] = src[y * d.w + x];
      std::copy(r0, r0 + ow, r0 + ow);
    }
  }
  return out;
}

// Adjoint of replication: each 2x2 block sums into one pixel.
template <typename T>
BasicTensor<T> upsample_nearest2x_backward(const BasicTensor<T>& grad_out) {
  const Dims4 g = dims4(grad_out, "upsample_nearest2x_backward");
  if (g.h % 2 != 0 || g.w % 2 != 0)
    throw UsageError("upsample_nearest2x_backward: spatial dims must be even");
  const std::size_t h = g.h / 2, w = g.w / 2;
  BasicTensor<T> out({g.n, g.c, h, w});
  for (std::size_t p = 0; p < g.n * g.c; ++p) {
    const T* src = grad_out.data() + p * g.plane();
    T* dst = out.data() + p * h * w;
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const T* tl = src + (2 * y) * g.w + 2 * x;
        dst[y * w + x] = (tl[0] + tl[1]) + (tl[g.w] + tl[g.w + 1]);
      }
  }
  return out;
}

// ---- elementwise / structural -------------------------------------------

template <typename T>
BasicTensor<T> relu_forward(const BasicTensor<T>& x) {
  BasicTensor<T> y = x;
  for (T& v : y.storage()) v = v > T{0} ? v : T{0};
  return y;
}

// Subgradient 0 at x == 0.
template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& grad_out, const BasicTensor<T>& x) {
  if (grad_out.shape() != x.shape()) throw UsageError("relu_backward: shape mismatch");
  BasicTensor<T> g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (!(x[i] > T{0})) g[i] = T{0};
  return g;
}

template <typename T>
BasicTensor<T> concat_channels_forward(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const Dims4 da = dims4(a, "concat_channels_forward");
  const Dims4 db = dims4(b, "concat_channels_forward");
  if (da.n != db.n || da.h != db.h || da.w != db.w)
    throw UsageError("concat_channels_forward: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  BasicTensor<T> out({da.n, da.c + db.c, da.h, da.w});
  const std::size_t sa = da.c * da.plane(), sb = db.c * db.plane();
  for (std::size_t n = 0; n < da.n; ++n) {
    T* dst = out.data() + n * (sa + sb);
    std::copy_n(a.data() + n * sa, sa, dst);
    std::copy_n(b.data() + n * sb, sb, dst + sa);
  }
  return out;
}

/// Splits a concatenated gradient back into the first `channels_a` channels
/// and the rest.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> concat_channels_backward(const BasicTensor<T>& grad,
                                                                   std::size_t channels_a) {
  const Dims4 d = dims4(grad, "concat_channels_backward");
  if (channels_a > d.c) throw UsageError("concat_channels_backward: split beyond channel count");
  const std::size_t cb = d.c - channels_a;
  BasicTensor<T> ga({d.n, channels_a, d.h, d.w});
  BasicTensor<T> gb({d.n, cb, d.h, d.w});
  const std::size_t sa = channels_a * d.plane(), sb = cb * d.plane();
  for (std::size_t n = 0; n < d.n; ++n) {
    const T* src = grad.data() + n * (sa + sb);
    std::copy_n(src, sa, ga.data() + n * sa);
    std::copy_n(src + sa, sb, gb.data() + n * sb);
  }
  return {std::move(ga), std::move(gb)};
}

// ---- loss ----------------------------------------------------------------

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> grad;
};

/// Per-element RMSE over the whole batch: sqrt(mean((pred - target)^2)).
/// The gradient is (pred - target) / (N * loss), and zero when loss is zero.
template <typename T>
LossResult<T> rmse_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target) {
  if (pred.shape() != target.shape())
    throw UsageError("rmse_loss: pred " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  if (pred.size() == 0) throw UsageError("rmse_loss: empty tensors");
  if (!target.all_finite()) throw NumericError("rmse_loss: non-finite target");
  const double n = static_cast<double>(pred.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = static_cast<double>(pred[i]) - static_cast<double>(target[i]);
    sq += d * d;
  }
  LossResult<T> r{std::sqrt(sq / n), BasicTensor<T>(pred.shape())};
  if (!std::isfinite(r.loss)) throw NumericError("rmse_loss: non-finite loss");
  if (r.loss > 0.0) {
    const double denom = n * r.loss;
    for (std::size_t i = 0; i < pred.size(); ++i)
      r.grad[i] = static_cast<T>(
          (static_cast<double>(pred[i]) - static_cast<double>(target[i])) / denom);
  }
  return r;
}

// ---- parameters & optimizer ---------------------------------------------

template <typename T>
struct ParamTensor {
  std::string name;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  BasicTensor<T> adam_m;
  BasicTensor<T> adam_v;

  ParamTensor() = default;
  ParamTensor(std::string n, BasicTensor<T> v)
      : name(std::move(n)),
        value(std::move(v)),
        grad(value.shape()),
        adam_m(value.shape()),
        adam_v(value.shape()) {}

  void zero_grad() { grad.fill(T{0}); }
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update; `step` is 1-based.
template <typename T>
void adam_step(std::span<ParamTensor<T>> params, const AdamConfig& cfg, long step) {
  if (step < 1) throw UsageError("adam_step: step index must be >= 1");
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (auto& p : params) {
    if (p.grad.shape() != p.value.shape() || p.adam_m.shape() != p.value.shape() ||
        p.adam_v.shape() != p.value.shape())
      throw UsageError("adam_step: inconsistent state shapes for '" + p.name + "'");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      const double m = cfg.beta1 * static_cast<double>(p.adam_m[i]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(p.adam_v[i]) + (1.0 - cfg.beta2) * g * g;
      p.adam_m[i] = static_cast<T>(m);
      p.adam_v[i] = static_cast<T>(v);
      const double update = cfg.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - update);
    }
  }
}

/// Zero-mean Gaussian with variance 2 / fan_in, where fan_in is the product
/// of all extents after the first.
template <typename T>
BasicTensor<T> he_init(const Shape& shape, std::uint64_t seed) {
  if (shape.empty()) throw UsageError("he_init: empty shape");
  std::size_t fan_in = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) fan_in *= shape[i];
  if (shape.size() == 1) fan_in = shape[0];
  if (fan_in == 0) throw UsageError("he_init: zero fan-in");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  BasicTensor<T> t(shape);
  for (T& v : t.storage()) v = static_cast<T>(dist(rng));
  return t;
}

}  // namespace densecount::nn
