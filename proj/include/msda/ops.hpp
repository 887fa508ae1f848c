#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "msda/tensor.hpp"

// Differentiable operators. Every op takes the Graph it records into; if no
// operand requires a gradient the op is computed without recording.

namespace msda {

namespace detail {

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMatrix>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op,
                         const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " +
                     std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

inline void require_finite(const Tensor& t, const char* op) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw std::domain_error(std::string(op) + ": non-finite input value");
    }
  }
}

// col[k][n*P + p], k = (c*kh + ky)*kw + kx
inline void im2col(std::span<const double> x, std::size_t n_batch,
                   std::size_t channels, std::size_t h, std::size_t w,
                   std::size_t kh, std::size_t kw, std::size_t stride,
                   std::size_t pad, std::size_t ho, std::size_t wo,
                   std::vector<double>& col) {
  const std::size_t plane = ho * wo;
  const std::size_t cols = n_batch * plane;
  col.assign(channels * kh * kw * cols, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        double* row = col.data() + ((c * kh + ky) * kw + kx) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          const double* src = x.data() + (n * channels + c) * h * w;
          double* dst = row + n * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* src_row = src + iy * w;
            double* dst_row = dst + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                              static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst_row[ox] = src_row[ix];
            }
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, std::size_t n_batch,
                       std::size_t channels, std::size_t h, std::size_t w,
                       std::size_t kh, std::size_t kw, std::size_t stride,
                       std::size_t pad, std::size_t ho, std::size_t wo,
                       std::span<double> dx) {
  const std::size_t plane = ho * wo;
  const std::size_t cols = n_batch * plane;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ky = 0; ky < kh; ++ky) {
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const double* row = col + ((c * kh + ky) * kw + kx) * cols;
        for (std::size_t n = 0; n < n_batch; ++n) {
          double* dst = dx.data() + (n * channels + c) * h * w;
          const double* src = row + n * plane;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(pad);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            double* dst_row = dst + iy * w;
            const double* src_row = src + oy * wo;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                              static_cast<std::ptrdiff_t>(pad);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst_row[ix] += src_row[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t pad = 0;
};

/// Cross-correlation of an NCHW input with an OIHW weight plus optional
/// per-channel bias (pass an undefined Tensor for no bias).
inline Tensor conv2d(Graph& g, const Tensor& input, const Tensor& weight,
                     const Tensor& bias, Conv2dOptions opt = {}) {
  detail::require_rank(input, 4, "conv2d", "input");
  detail::require_rank(weight, 4, "conv2d", "weight");
  if (opt.stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2),
                    w = input.dim(3);
  const std::size_t cout = weight.dim(0), kh = weight.dim(2),
                    kw = weight.dim(3);
  if (n == 0 || h == 0 || w == 0 || kh == 0 || kw == 0 || cout == 0) {
    throw ShapeError("conv2d: zero extent in input " + shape_str(input.shape()) +
                     " or weight " + shape_str(weight.shape()));
  }
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: input has " + std::to_string(cin) +
                     " channels but weight " + shape_str(weight.shape()) +
                     " expects " + std::to_string(weight.dim(1)));
  }
  if (h + 2 * opt.pad < kh || w + 2 * opt.pad < kw) {
    throw ShapeError("conv2d: kernel " + shape_str(weight.shape()) +
                     " larger than padded input " + shape_str(input.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) +
                     " does not match " + std::to_string(cout) +
                     " output channels");
  }
  const std::size_t ho = (h + 2 * opt.pad - kh) / opt.stride + 1;
  const std::size_t wo = (w + 2 * opt.pad - kw) / opt.stride + 1;
  const std::size_t plane = ho * wo;
  const std::size_t cols = n * plane;
  const std::size_t k = cin * kh * kw;

  auto col = std::make_shared<std::vector<double>>();
  detail::im2col(input.values(), n, cin, h, w, kh, kw, opt.stride, opt.pad, ho,
                 wo, *col);
  detail::RowMatrix prod(cout, cols);
  if (k > 0) {
    prod.noalias() = detail::ConstRowMap(weight.values().data(), cout, k) *
                     detail::ConstRowMap(col->data(), k, cols);
  } else {
    prod.setZero();
  }

  Tensor out = Tensor::zeros({n, cout, ho, wo});
  auto y = out.mutable_values();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t o = 0; o < cout; ++o) {
      const double bo = bias.defined() ? bias.values()[o] : 0.0;
      const double* src = prod.data() + o * cols + b * plane;
      double* dst = y.data() + (b * cout + o) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + bo;
    }
  }

  if (!Graph::any_requires_grad({&input, &weight, &bias})) return out;
  g.record("conv2d", {input, weight, bias}, out,
           [input, weight, bias, out, col, n, cin, h, w, cout, kh, kw, ho, wo,
            plane, cols, k, opt]() mutable {
             auto gy = out.grad();
             detail::RowMatrix gmat(cout, cols);
             for (std::size_t b = 0; b < n; ++b) {
               for (std::size_t o = 0; o < cout; ++o) {
                 std::copy_n(gy.data() + (b * cout + o) * plane, plane,
                             gmat.data() + o * cols + b * plane);
               }
             }
             if (bias.defined() && bias.requires_grad()) {
               auto gb = bias.mutable_grad();
               for (std::size_t o = 0; o < cout; ++o) gb[o] += gmat.row(o).sum();
             }
             if (k == 0) return;
             if (weight.requires_grad()) {
               detail::RowMap gw(weight.mutable_grad().data(), cout, k);
               gw.noalias() +=
                   gmat * detail::ConstRowMap(col->data(), k, cols).transpose();
             }
             if (input.requires_grad()) {
               detail::RowMatrix gcol(k, cols);
               gcol.noalias() =
                   detail::ConstRowMap(weight.values().data(), cout, k)
                       .transpose() *
                   gmat;
               detail::col2im_add(gcol.data(), n, cin, h, w, kh, kw,
                                  opt.stride, opt.pad, ho, wo,
                                  input.mutable_grad());
             }
           });
  return out;
}

/// Stride-2, 3x3, pad-1 convolution; halves both spatial extents.
inline Tensor downsample_conv(Graph& g, const Tensor& input,
                              const Tensor& weight, const Tensor& bias) {
  detail::require_rank(input, 4, "downsample_conv", "input");
  if (input.dim(2) % 2 != 0 || input.dim(3) % 2 != 0) {
    throw ShapeError("downsample_conv: spatial extents must be even, got " +
                     shape_str(input.shape()));
  }
  if (weight.rank() != 4 || weight.dim(2) != 3 || weight.dim(3) != 3) {
    throw ShapeError("downsample_conv: weight must be Cout x Cin x 3 x 3, got " +
                     shape_str(weight.shape()));
  }
  return conv2d(g, input, weight, bias, {.stride = 2, .pad = 1});
}

inline constexpr double kLeakySlope = 0.1;

inline Tensor leaky_relu(Graph& g, const Tensor& x,
                         double slope = kLeakySlope) {
  if (!(slope >= 0.0 && slope < 1.0)) {
    throw std::invalid_argument("leaky_relu: slope must lie in [0, 1)");
  }
  detail::require_finite(x, "leaky_relu");
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = xv[i] > 0.0 ? xv[i] : slope * xv[i];
  }
  if (!Graph::any_requires_grad({&x})) return out;
  g.record("leaky_relu", {x}, out, [x, out, slope]() mutable {
    auto xv = x.values();
    auto gy = out.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += xv[i] > 0.0 ? gy[i] : slope * gy[i];
    }
  });
  return out;
}

inline double stable_sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor sigmoid(Graph& g, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto xv = x.values();
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(xv[i]);
  if (!Graph::any_requires_grad({&x})) return out;
  g.record("sigmoid", {x}, out, [x, out]() mutable {
    auto yv = out.values();
    auto gy = out.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      gx[i] += gy[i] * yv[i] * (1.0 - yv[i]);
    }
  });
  return out;
}

inline Tensor upsample_nearest(Graph& g, const Tensor& x, std::size_t factor) {
  detail::require_rank(x, 4, "upsample_nearest", "input");
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be >= 1");
  const std::size_t nc = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = h * factor, wo = w * factor;
  Tensor out = Tensor::zeros({x.dim(0), x.dim(1), ho, wo});
  auto xv = x.values();
  auto y = out.mutable_values();
  for (std::size_t p = 0; p < nc; ++p) {
    for (std::size_t oy = 0; oy < ho; ++oy) {
      for (std::size_t ox = 0; ox < wo; ++ox) {
        y[(p * ho + oy) * wo + ox] = xv[(p * h + oy / factor) * w + ox / factor];
      }
    }
  }
  if (!Graph::any_requires_grad({&x})) return out;
  g.record("upsample_nearest", {x}, out,
           [x, out, nc, h, w, ho, wo, factor]() mutable {
             auto gy = out.grad();
             auto gx = x.mutable_grad();
             for (std::size_t p = 0; p < nc; ++p) {
               for (std::size_t oy = 0; oy < ho; ++oy) {
                 for (std::size_t ox = 0; ox < wo; ++ox) {
                   gx[(p * h + oy / factor) * w + ox / factor] +=
                       gy[(p * ho + oy) * wo + ox];
                 }
               }
             }
           });
  return out;
}

inline Tensor concat_channels(Graph& g, const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 4, "concat_channels", "first operand");
  detail::require_rank(b, 4, "concat_channels", "second operand");
  if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) || a.dim(3) != b.dim(3)) {
    throw ShapeError("concat_channels: N/H/W disagree between " +
                     shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t n = a.dim(0), ca = a.dim(1), cb = b.dim(1),
                    plane = a.dim(2) * a.dim(3);
  Tensor out = Tensor::zeros({n, ca + cb, a.dim(2), a.dim(3)});
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.values().data() + i * ca * plane, ca * plane,
                y.data() + i * (ca + cb) * plane);
    std::copy_n(b.values().data() + i * cb * plane, cb * plane,
                y.data() + (i * (ca + cb) + ca) * plane);
  }
  if (!Graph::any_requires_grad({&a, &b})) return out;
  g.record("concat_channels", {a, b}, out,
           [a, b, out, n, ca, cb, plane]() mutable {
             auto gy = out.grad();
             for (std::size_t i = 0; i < n; ++i) {
               const double* src = gy.data() + i * (ca + cb) * plane;
               if (a.requires_grad()) {
                 double* ga = a.mutable_grad().data() + i * ca * plane;
                 for (std::size_t j = 0; j < ca * plane; ++j) ga[j] += src[j];
               }
               if (b.requires_grad()) {
                 double* gb = b.mutable_grad().data() + i * cb * plane;
                 const double* sb = src + ca * plane;
                 for (std::size_t j = 0; j < cb * plane; ++j) gb[j] += sb[j];
               }
             }
           });
  return out;
}

enum class Reduction { kSum, kMean };

inline constexpr double kBceEps = 1e-7;

/// Binary cross entropy of probabilities `p` against targets `t`. `p` is
/// clamped to [eps, 1 - eps]; clamped entries pass no gradient.
inline Tensor bce(Graph& g, const Tensor& p, const Tensor& t,
                  Reduction reduction = Reduction::kSum) {
  if (p.shape() != t.shape()) {
    throw ShapeError("bce: probability shape " + shape_str(p.shape()) +
                     " differs from target shape " + shape_str(t.shape()));
  }
  auto pv = p.values();
  auto tv = t.values();
  double total = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (!(pv[i] >= 0.0 && pv[i] <= 1.0)) {
      throw std::domain_error("bce: probability outside [0, 1]");
    }
    const double pc = std::clamp(pv[i], kBceEps, 1.0 - kBceEps);
    total -= tv[i] * std::log(pc) + (1.0 - tv[i]) * std::log(1.0 - pc);
  }
  const double scale =
      reduction == Reduction::kMean ? 1.0 / static_cast<double>(pv.size()) : 1.0;
  Tensor out = Tensor::scalar(total * scale);
  if (!Graph::any_requires_grad({&p})) return out;
  g.record("bce", {p, t}, out, [p, t, out, scale]() mutable {
    auto pv = p.values();
    auto tv = t.values();
    auto gp = p.mutable_grad();
    const double up = out.grad()[0] * scale;
    for (std::size_t i = 0; i < gp.size(); ++i) {
      if (pv[i] < kBceEps || pv[i] > 1.0 - kBceEps) continue;
      gp[i] += up * (-tv[i] / pv[i] + (1.0 - tv[i]) / (1.0 - pv[i]));
    }
  });
  return out;
}

/// Gradient reversal: forward is an exact copy of `x`; backward hands
/// -lambda times the upstream gradient to `x`.
inline Tensor grl(Graph& g, const Tensor& x, double lambda) {
  if (!(lambda > 0.0)) {
    throw std::invalid_argument("grl: lambda must be positive");
  }
  Tensor out(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  if (!Graph::any_requires_grad({&x})) return out;
  g.record("grl", {x}, out, [x, out, lambda]() mutable {
    auto gy = out.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += -lambda * gy[i];
  });
  return out;
}

/// Forward copy with unit backward; the neutral stand-in for grl.
inline Tensor identity(Graph& g, const Tensor& x) {
  Tensor out(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  if (!Graph::any_requires_grad({&x})) return out;
  g.record("identity", {x}, out, [x, out]() mutable {
    auto gy = out.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
  });
  return out;
}

/// Forward copy that blocks every gradient (the lambda = 0 case of grl).
inline Tensor stop_gradient(const Tensor& x) {
  return Tensor(x.shape(),
                std::vector<double>(x.values().begin(), x.values().end()));
}

inline Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
  Tensor out = Tensor::zeros(a.shape());
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] + b.values()[i];
  if (!Graph::any_requires_grad({&a, &b})) return out;
  g.record("add", {a, b}, out, [a, b, out]() mutable {
    auto gy = out.grad();
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto gt = t->mutable_grad();
      for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += gy[i];
    }
  });
  return out;
}

inline Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " differ");
  }
  Tensor out = Tensor::zeros(a.shape());
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a.values()[i] * b.values()[i];
  if (!Graph::any_requires_grad({&a, &b})) return out;
  g.record("mul", {a, b}, out, [a, b, out]() mutable {
    auto gy = out.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * b.values()[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * a.values()[i];
    }
  });
  return out;
}

inline Tensor scale(Graph& g, const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape());
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = factor * x.values()[i];
  if (!Graph::any_requires_grad({&x})) return out;
  g.record("scale", {x}, out, [x, out, factor]() mutable {
    auto gy = out.grad();
    auto gx = x.mutable_grad();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += factor * gy[i];
  });
  return out;
}

inline Tensor sum(Graph& g, const Tensor& x) {
  double total = 0.0;
  for (double v : x.values()) total += v;
  Tensor out = Tensor::scalar(total);
  if (!Graph::any_requires_grad({&x})) return out;
  g.record("sum", {x}, out, [x, out]() mutable {
    const double up = out.grad()[0];
    for (double& gx : x.mutable_grad()) gx += up;
  });
  return out;
}

/// Gathers batch rows (axis 0) in the given order.
inline Tensor select_rows(Graph& g, const Tensor& x,
                          std::vector<std::size_t> rows) {
  if (x.rank() == 0) throw ShapeError("select_rows: rank-0 input");
  const std::size_t stride = x.numel() / x.dim(0);
  for (auto r : rows) {
    if (r >= x.dim(0)) {
      throw ShapeError("select_rows: row " + std::to_string(r) +
                       " out of range for " + shape_str(x.shape()));
    }
  }
  if (rows.empty()) throw ShapeError("select_rows: empty row list");
  Shape shape = x.shape();
  shape[0] = rows.size();
  Tensor out = Tensor::zeros(shape);
  auto y = out.mutable_values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(x.values().data() + rows[i] * stride, stride,
                y.data() + i * stride);
  }
  if (!Graph::any_requires_grad({&x})) return out;
  g.record("select_rows", {x}, out,
           [x, out, rows = std::move(rows), stride]() mutable {
             auto gy = out.grad();
             auto gx = x.mutable_grad();
             for (std::size_t i = 0; i < rows.size(); ++i) {
               for (std::size_t j = 0; j < stride; ++j) {
                 gx[rows[i] * stride + j] += gy[i * stride + j];
               }
             }
           });
  return out;
}

inline void backward(Graph& g, const Tensor& loss) { g.backward(loss); }

}  // namespace msda
