#include "poisonforge/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <memory>
#include <string>

#include "blas.hpp"
#include "poisonforge/errors.hpp"

namespace poisonforge::ops {
namespace {

template <class T>
void ensure_finite(std::string_view op, std::span<const T> values) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite output");
  }
}

template <class T>
BasicTensor<T> make_output(std::string_view op, Shape shape, std::vector<T> values, bool track) {
  ensure_finite<T>(op, values);
  return BasicTensor<T>(std::move(shape), std::move(values), track);
}

template <class T>
void record(std::vector<BasicTensor<T>> inputs, const BasicTensor<T>& out,
            std::function<void()> fn) {
  BasicTape<T>::active()->record(std::move(inputs), out, std::move(fn));
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_rank(std::string_view op, const Shape& s, std::size_t rank, const char* what) {
  if (s.size() != rank) {
    shape_fail(op, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                       shape_to_string(s));
  }
}

struct ConvGeom {
  std::size_t n, c, h, w;      // image batch
  std::size_t kh, kw, stride, pad;
  std::size_t oh, ow;          // sliding-window grid
  std::size_t rows() const { return c * kh * kw; }
  std::size_t cols() const { return n * oh * ow; }
};

// cols[(c*kh+i)*kw+j][(n*oh+y)*ow+x] = image[n][c][y*stride+i-pad][x*stride+j-pad]
template <class T>
void im2col(const T* image, const ConvGeom& g, T* cols) {
  const std::size_t len = g.cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* dst = cols + ((c * g.kh + i) * g.kw + j) * len;
        for (std::size_t n = 0; n < g.n; ++n) {
          const T* src = image + (n * g.c + c) * g.h * g.w;
          for (std::size_t y = 0; y < g.oh; ++y) {
            const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + i) - pad;
            T* row = dst + (n * g.oh + y) * g.ow;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
              std::fill(row, row + g.ow, T(0));
              continue;
            }
            const T* srow = src + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t x = 0; x < g.ow; ++x) {
              const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + j) - pad;
              row[x] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w))
                           ? T(0)
                           : srow[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds cols back into image.
template <class T>
void col2im(const T* cols, const ConvGeom& g, T* image) {
  const std::size_t len = g.cols();
  const auto pad = static_cast<std::ptrdiff_t>(g.pad);
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* src = cols + ((c * g.kh + i) * g.kw + j) * len;
        for (std::size_t n = 0; n < g.n; ++n) {
          T* dst = image + (n * g.c + c) * g.h * g.w;
          for (std::size_t y = 0; y < g.oh; ++y) {
            const auto iy = static_cast<std::ptrdiff_t>(y * g.stride + i) - pad;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
            const T* row = src + (n * g.oh + y) * g.ow;
            T* drow = dst + static_cast<std::size_t>(iy) * g.w;
            for (std::size_t x = 0; x < g.ow; ++x) {
              const auto ix = static_cast<std::ptrdiff_t>(x * g.stride + j) - pad;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
              drow[static_cast<std::size_t>(ix)] += row[x];
            }
          }
        }
      }
    }
  }
}

// [N,C,P] <-> [C, N*P]
template <class T>
void nchw_to_cmajor(const T* src, std::size_t n, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(src + (b * c + ch) * p, p, dst + ch * n * p + b * p);
}

template <class T>
void cmajor_to_nchw(const T* src, std::size_t n, std::size_t c, std::size_t p, T* dst) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(src + ch * n * p + b * p, p, dst + (b * c + ch) * p);
}

template <class T>
void accumulate(std::span<T> dst, std::span<const T> src, T factor = T(1)) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += factor * src[i];
}

template <class T>
BasicTensor<T> elementwise_binary(std::string_view op, const BasicTensor<T>& a,
                                  const BasicTensor<T>& b, T sign) {
  const bool scalar_b = b.numel() == 1 && a.numel() != 1;
  if (!scalar_b && a.shape() != b.shape()) {
    shape_fail(op, "operand shapes differ: " + shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<T> out(av.size());
  if (scalar_b) {
    const T s = sign * bv[0];
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + s;
  } else {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + sign * bv[i];
  }
  const bool track = should_record<T>({&a, &b});
  auto result = make_output<T>(op, a.shape(), std::move(out), track);
  if (track) {
    record<T>({a, b}, result, [a, b, result, sign, scalar_b]() mutable {
      const auto g = result.grad();
      if (a.requires_grad()) accumulate<T>(a.mutable_grad(), g);
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        if (scalar_b) {
          double s = 0.0;
          for (T v : g) s += v;
          db[0] += sign * static_cast<T>(s);
        } else {
          accumulate<T>(db, g, sign);
        }
      }
    });
  }
  return result;
}

template <class T, class Fwd, class Deriv>
BasicTensor<T> elementwise_unary(std::string_view op, const BasicTensor<T>& x, Fwd fwd,
                                 Deriv deriv_from_output) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const bool track = should_record<T>({&x});
  auto result = make_output<T>(op, x.shape(), std::move(out), track);
  if (track) {
    record<T>({x}, result, [x, result, deriv_from_output]() mutable {
      const auto g = result.grad();
      const auto y = result.values();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g[i] * deriv_from_output(y[i]);
    });
  }
  return result;
}

}  // namespace

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  constexpr std::string_view op = "matmul";
  require_rank(op, a.shape(), 2, "lhs");
  require_rank(op, b.shape(), 2, "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    shape_fail(op, "inner dimensions differ: " + shape_to_string(a.shape()) + " x " +
                       shape_to_string(b.shape()));
  }
  std::vector<T> out(m * n);
  detail::gemm(false, false, m, n, k, T(1), a.values().data(), k, b.values().data(), n, T(0),
               out.data(), n);
  const bool track = should_record<T>({&a, &b});
  auto result = make_output<T>(op, Shape{m, n}, std::move(out), track);
  if (track) {
    record<T>({a, b}, result, [a, b, result, m, n, k]() mutable {
      const T* g = result.grad().data();
      if (a.requires_grad()) {
        detail::gemm(false, true, m, k, n, T(1), g, n, b.values().data(), n, T(1),
                     a.mutable_grad().data(), k);
      }
      if (b.requires_grad()) {
        detail::gemm(true, false, k, n, m, T(1), a.values().data(), k, g, n, T(1),
                     b.mutable_grad().data(), n);
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> bias_add(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  constexpr std::string_view op = "bias_add";
  require_rank(op, x.shape(), 2, "input");
  require_rank(op, bias.shape(), 1, "bias");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (bias.dim(0) != cols) {
    shape_fail(op, "bias " + shape_to_string(bias.shape()) + " does not match input " +
                       shape_to_string(x.shape()));
  }
  const auto xv = x.values();
  const auto bv = bias.values();
  std::vector<T> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = xv[r * cols + c] + bv[c];
  const bool track = should_record<T>({&x, &bias});
  auto result = make_output<T>(op, x.shape(), std::move(out), track);
  if (track) {
    record<T>({x, bias}, result, [x, bias, result, rows, cols]() mutable {
      const auto g = result.grad();
      if (x.requires_grad()) accumulate<T>(x.mutable_grad(), g);
      if (bias.requires_grad()) {
        auto db = bias.mutable_grad();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cols; ++c) db[c] += g[r * cols + c];
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, Conv2dAttrs attrs) {
  constexpr std::string_view op = "conv2d";
  require_rank(op, x.shape(), 4, "input");
  require_rank(op, weight.shape(), 4, "kernel");
  if (attrs.stride == 0) shape_fail(op, "stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(1) != c) {
    shape_fail(op, "kernel " + shape_to_string(weight.shape()) + " expects " +
                       std::to_string(weight.dim(1)) + " input channels, input " +
                       shape_to_string(x.shape()) + " has " + std::to_string(c));
  }
  if (h + 2 * attrs.padding < kh || w + 2 * attrs.padding < kw) {
    shape_fail(op, "kernel " + shape_to_string(weight.shape()) + " larger than padded input " +
                       shape_to_string(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) {
    shape_fail(op, "bias " + shape_to_string(bias.shape()) + " does not match " +
                       std::to_string(o) + " output channels");
  }
  const ConvGeom geom{n, c, h, w, kh, kw, attrs.stride, attrs.padding,
                      (h + 2 * attrs.padding - kh) / attrs.stride + 1,
                      (w + 2 * attrs.padding - kw) / attrs.stride + 1};
  const std::size_t rows = geom.rows(), len = geom.cols(), plane = geom.oh * geom.ow;

  auto cols = std::make_shared<std::vector<T>>(rows * len);
  im2col(x.values().data(), geom, cols->data());
  std::vector<T> outmat(o * len);
  detail::gemm(false, false, o, len, rows, T(1), weight.values().data(), rows, cols->data(), len,
               T(0), outmat.data(), len);
  std::vector<T> out(o * len);
  cmajor_to_nchw(outmat.data(), n, o, plane, out.data());
  if (bias.defined()) {
    const auto bv = bias.values();
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < o; ++ch) {
        T* p = out.data() + (b * o + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) p[i] += bv[ch];
      }
  }
  const bool track = should_record<T>({&x, &weight, &bias});
  auto result = make_output<T>(op, Shape{n, o, geom.oh, geom.ow}, std::move(out), track);
  if (track) {
    std::vector<BasicTensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    record<T>(std::move(inputs), result,
              [x, weight, bias, result, cols, geom, o]() mutable {
                const std::size_t rows = geom.rows(), len = geom.cols();
                const std::size_t plane = geom.oh * geom.ow;
                std::vector<T> gmat(o * len);
                nchw_to_cmajor(result.grad().data(), geom.n, o, plane, gmat.data());
                if (weight.requires_grad()) {
                  detail::gemm(false, true, o, rows, len, T(1), gmat.data(), len, cols->data(),
                               len, T(1), weight.mutable_grad().data(), rows);
                }
                if (bias.defined() && bias.requires_grad()) {
                  auto db = bias.mutable_grad();
                  for (std::size_t ch = 0; ch < o; ++ch) {
                    double s = 0.0;
                    for (std::size_t i = 0; i < len; ++i) s += gmat[ch * len + i];
                    db[ch] += static_cast<T>(s);
                  }
                }
                if (x.requires_grad()) {
                  std::vector<T> dcols(rows * len);
                  detail::gemm(true, false, rows, len, o, T(1), weight.values().data(), rows,
                               gmat.data(), len, T(0), dcols.data(), len);
                  col2im(dcols.data(), geom, x.mutable_grad().data());
                }
              });
  }
  return result;
}

template <class T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                                const BasicTensor<T>& bias, Conv2dAttrs attrs) {
  constexpr std::string_view op = "conv_transpose2d";
  require_rank(op, x.shape(), 4, "input");
  require_rank(op, weight.shape(), 4, "kernel");
  if (attrs.stride == 0) shape_fail(op, "stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t o = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (weight.dim(0) != c) {
    shape_fail(op, "kernel " + shape_to_string(weight.shape()) + " expects " +
                       std::to_string(weight.dim(0)) + " input channels, input " +
                       shape_to_string(x.shape()) + " has " + std::to_string(c));
  }
  if ((h - 1) * attrs.stride + kh <= 2 * attrs.padding ||
      (w - 1) * attrs.stride + kw <= 2 * attrs.padding) {
    shape_fail(op, "padding " + std::to_string(attrs.padding) + " leaves an empty output");
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != o)) {
    shape_fail(op, "bias " + shape_to_string(bias.shape()) + " does not match " +
                       std::to_string(o) + " output channels");
  }
  const std::size_t out_h = (h - 1) * attrs.stride + kh - 2 * attrs.padding;
  const std::size_t out_w = (w - 1) * attrs.stride + kw - 2 * attrs.padding;
  // Geometry of the forward conv that maps the output grid back onto the input grid.
  const ConvGeom geom{n, o, out_h, out_w, kh, kw, attrs.stride, attrs.padding, h, w};
  const std::size_t rows = geom.rows(), len = geom.cols(), plane = h * w;

  auto xmat = std::make_shared<std::vector<T>>(c * len);
  nchw_to_cmajor(x.values().data(), n, c, plane, xmat->data());
  std::vector<T> cols(rows * len);
  detail::gemm(true, false, rows, len, c, T(1), weight.values().data(), rows, xmat->data(), len,
               T(0), cols.data(), len);
  std::vector<T> out(n * o * out_h * out_w, T(0));
  col2im(cols.data(), geom, out.data());
  if (bias.defined()) {
    const auto bv = bias.values();
    const std::size_t oplane = out_h * out_w;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < o; ++ch) {
        T* p = out.data() + (b * o + ch) * oplane;
        for (std::size_t i = 0; i < oplane; ++i) p[i] += bv[ch];
      }
  }
  const bool track = should_record<T>({&x, &weight, &bias});
  auto result = make_output<T>(op, Shape{n, o, out_h, out_w}, std::move(out), track);
  if (track) {
    std::vector<BasicTensor<T>> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    record<T>(std::move(inputs), result, [x, weight, bias, result, xmat, geom, c]() mutable {
      const std::size_t rows = geom.rows(), len = geom.cols();
      std::vector<T> gcols(rows * len);
      im2col(result.grad().data(), geom, gcols.data());
      if (x.requires_grad()) {
        std::vector<T> dxmat(c * len);
        detail::gemm(false, false, c, len, rows, T(1), weight.values().data(), rows,
                     gcols.data(), len, T(0), dxmat.data(), len);
        std::vector<T> dx(dxmat.size());
        cmajor_to_nchw(dxmat.data(), geom.n, c, geom.oh * geom.ow, dx.data());
        accumulate<T>(x.mutable_grad(), dx);
      }
      if (weight.requires_grad()) {
        detail::gemm(false, true, c, rows, len, T(1), xmat->data(), len, gcols.data(), len,
                     T(1), weight.mutable_grad().data(), rows);
      }
      if (bias.defined() && bias.requires_grad()) {
        const auto g = result.grad();
        const std::size_t oplane = geom.h * geom.w;
        auto db = bias.mutable_grad();
        for (std::size_t ch = 0; ch < geom.c; ++ch) {
          double s = 0.0;
          for (std::size_t b = 0; b < geom.n; ++b) {
            const T* p = g.data() + (b * geom.c + ch) * oplane;
            for (std::size_t i = 0; i < oplane; ++i) s += p[i];
          }
          db[ch] += static_cast<T>(s);
        }
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, std::size_t kernel, std::size_t stride) {
  constexpr std::string_view op = "maxpool2d";
  require_rank(op, x.shape(), 4, "input");
  if (kernel == 0 || stride == 0) shape_fail(op, "kernel and stride must be positive");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < kernel || w < kernel) {
    shape_fail(op, "window " + std::to_string(kernel) + " larger than input " +
                       shape_to_string(x.shape()));
  }
  const std::size_t oh = (h - kernel) / stride + 1, ow = (w - kernel) / stride + 1;
  const auto xv = x.values();
  std::vector<T> out(n * c * oh * ow);
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xo = 0; xo < ow; ++xo) {
        std::size_t best = base + (y * stride) * w + xo * stride;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = base + (y * stride + i) * w + xo * stride + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (plane * oh + y) * ow + xo;
        out[o] = xv[best];
        (*argmax)[o] = best;
      }
    }
  }
  const bool track = should_record<T>({&x});
  auto result = make_output<T>(op, Shape{n, c, oh, ow}, std::move(out), track);
  if (track) {
    record<T>({x}, result, [x, result, argmax]() mutable {
      const auto g = result.grad();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dx[(*argmax)[i]] += g[i];
    });
  }
  return result;
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  return elementwise_unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T y) { return y > T(0) ? T(1) : T(0); });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  return elementwise_unary<T>(
      "sigmoid", x,
      [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T y) { return y * (T(1) - y); });
}

template <class T>
BasicTensor<T> tanh(const BasicTensor<T>& x) {
  return elementwise_unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T y) { return T(1) - y * y; });
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise_binary<T>("add", a, b, T(1));
}

template <class T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise_binary<T>("sub", a, b, T(-1));
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& x, T factor) {
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = factor * xv[i];
  const bool track = should_record<T>({&x});
  auto result = make_output<T>("scale", x.shape(), std::move(out), track);
  if (track) {
    record<T>({x}, result, [x, result, factor]() mutable {
      accumulate<T>(x.mutable_grad(), result.grad(), factor);
    });
  }
  return result;
}

template <class T>
BasicTensor<T> clip(const BasicTensor<T>& x, T lo, T hi) {
  if (!(lo <= hi)) throw ShapeError("clip: lower bound exceeds upper bound");
  const auto xv = x.values();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::clamp(xv[i], lo, hi);
  const bool track = should_record<T>({&x});
  auto result = make_output<T>("clip", x.shape(), std::move(out), track);
  if (track) {
    record<T>({x}, result, [x, result, lo, hi]() mutable {
      const auto g = result.grad();
      const auto xv = x.values();
      auto dx = x.mutable_grad();
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (xv[i] > lo && xv[i] < hi) dx[i] += g[i];
    });
  }
  return result;
}

template <class T>
BasicTensor<T> concat(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  constexpr std::string_view op = "concat";
  if (parts.empty()) shape_fail(op, "no inputs");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) shape_fail(op, "axis " + std::to_string(axis) + " out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_fail(op, "rank mismatch " + shape_to_string(s));
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        shape_fail(op, "dimension " + std::to_string(d) + " differs: " + shape_to_string(first) +
                           " vs " + shape_to_string(s));
      }
    }
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  const std::size_t out_stride = out_shape[axis] * inner;
  std::vector<T> out(shape_numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t chunk = p.dim(axis) * inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + o * out_stride + offset);
    offset += chunk;
  }
  bool track = false;
  if (BasicTape<T>::active()) {
    for (const auto& p : parts) track = track || p.requires_grad();
  }
  auto result = make_output<T>(op, out_shape, std::move(out), track);
  if (track) {
    record<T>(parts, result, [parts, result, offsets, outer, inner, out_stride, axis]() mutable {
      const auto g = result.grad();
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!parts[k].requires_grad()) continue;
        const std::size_t chunk = parts[k].dim(axis) * inner;
        auto dp = parts[k].mutable_grad();
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < chunk; ++i)
            dp[o * chunk + i] += g[o * out_stride + offsets[k] + i];
      }
    });
  }
  return result;
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    shape_fail("reshape", "cannot view " + shape_to_string(x.shape()) + " as " +
                              shape_to_string(shape));
  }
  const auto xv = x.values();
  const bool track = should_record<T>({&x});
  auto result = make_output<T>("reshape", std::move(shape),
                               std::vector<T>(xv.begin(), xv.end()), track);
  if (track) {
    record<T>({x}, result,
              [x, result]() mutable { accumulate<T>(x.mutable_grad(), result.grad()); });
  }
  return result;
}

template <class T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  if (x.rank() < 1) shape_fail("flatten", "input has no batch axis");
  const std::size_t n = x.dim(0);
  return reshape(x, Shape{n, x.numel() / n});
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double s = 0.0;
  for (T v : x.values()) s += v;
  const bool track = should_record<T>({&x});
  auto result = make_output<T>("sum", Shape{1}, std::vector<T>{static_cast<T>(s)}, track);
  if (track) {
    record<T>({x}, result, [x, result]() mutable {
      const T g = result.grad()[0];
      for (T& d : x.mutable_grad()) d += g;
    });
  }
  return result;
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& x) {
  double s = 0.0;
  for (T v : x.values()) s += v;
  const double n = static_cast<double>(x.numel());
  const bool track = should_record<T>({&x});
  auto result = make_output<T>("mean", Shape{1}, std::vector<T>{static_cast<T>(s / n)}, track);
  if (track) {
    record<T>({x}, result, [x, result, n]() mutable {
      const T g = static_cast<T>(result.grad()[0] / n);
      for (T& d : x.mutable_grad()) d += g;
    });
  }
  return result;
}

namespace {

template <class T, class Value, class Deriv>
BasicTensor<T> pairwise_loss(std::string_view op, const BasicTensor<T>& a, const BasicTensor<T>& b,
                             Reduction reduction, Value value, Deriv deriv) {
  if (a.shape() != b.shape()) {
    shape_fail(op, "operand shapes differ: " + shape_to_string(a.shape()) + " vs " +
                       shape_to_string(b.shape()));
  }
  const auto av = a.values();
  const auto bv = b.values();
  double s = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) s += value(static_cast<double>(av[i]) - bv[i]);
  const double norm = reduction == Reduction::mean ? static_cast<double>(av.size()) : 1.0;
  const bool track = should_record<T>({&a, &b});
  auto result = make_output<T>(op, Shape{1}, std::vector<T>{static_cast<T>(s / norm)}, track);
  if (track) {
    record<T>({a, b}, result, [a, b, result, norm, deriv]() mutable {
      const T g = static_cast<T>(result.grad()[0] / norm);
      const auto av = a.values();
      const auto bv = b.values();
      if (a.requires_grad()) {
        auto da = a.mutable_grad();
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += g * deriv(av[i] - bv[i]);
      }
      if (b.requires_grad()) {
        auto db = b.mutable_grad();
        for (std::size_t i = 0; i < db.size(); ++i) db[i] -= g * deriv(av[i] - bv[i]);
      }
    });
  }
  return result;
}

}  // namespace

template <class T>
BasicTensor<T> l1_loss(const BasicTensor<T>& a, const BasicTensor<T>& b, Reduction reduction) {
  return pairwise_loss<T>(
      "l1_loss", a, b, reduction, [](double d) { return std::abs(d); },
      [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); });
}

template <class T>
BasicTensor<T> l2_loss(const BasicTensor<T>& a, const BasicTensor<T>& b, Reduction reduction) {
  return pairwise_loss<T>(
      "l2_loss", a, b, reduction, [](double d) { return d * d; }, [](T d) { return T(2) * d; });
}

constexpr double kClamp = 1e-7;

template <class T>
BasicTensor<T> bce_loss(const BasicTensor<T>& probs, const BasicTensor<T>& targets) {
  constexpr std::string_view op = "bce_loss";
  if (probs.shape() != targets.shape()) {
    shape_fail(op, "probabilities " + shape_to_string(probs.shape()) + " vs targets " +
                       shape_to_string(targets.shape()));
  }
  const auto pv = probs.values();
  const auto tv = targets.values();
  double s = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pv[i]), kClamp, 1.0 - kClamp);
    s -= tv[i] * std::log(p) + (1.0 - tv[i]) * std::log(1.0 - p);
  }
  const double n = static_cast<double>(pv.size());
  const bool track = should_record<T>({&probs});
  auto result = make_output<T>(op, Shape{1}, std::vector<T>{static_cast<T>(s / n)}, track);
  if (track) {
    record<T>({probs, targets}, result, [probs, targets, result, n]() mutable {
      const double g = result.grad()[0] / n;
      const auto pv = probs.values();
      const auto tv = targets.values();
      auto dp = probs.mutable_grad();
      for (std::size_t i = 0; i < dp.size(); ++i) {
        const double p = std::clamp(static_cast<double>(pv[i]), kClamp, 1.0 - kClamp);
        dp[i] += static_cast<T>(g * (p - tv[i]) / (p * (1.0 - p)));
      }
    });
  }
  return result;
}

template <class T>
std::vector<T> softmax_rows(const BasicTensor<T>& logits) {
  require_rank("softmax", logits.shape(), 2, "logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto lv = logits.values();
  std::vector<T> out(lv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = lv.data() + r * cols;
    T* o = out.data() + r * cols;
    const T mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(static_cast<double>(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c)
      o[c] = static_cast<T>(std::exp(static_cast<double>(in[c] - mx)) / z);
  }
  return out;
}

template <class T>
std::vector<int> argmax_rows(const BasicTensor<T>& logits) {
  require_rank("argmax", logits.shape(), 2, "logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  const auto lv = logits.values();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = lv.data() + r * cols;
    out[r] = static_cast<int>(std::max_element(in, in + cols) - in);
  }
  return out;
}

template <class T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  constexpr std::string_view op = "softmax_cross_entropy";
  require_rank(op, logits.shape(), 2, "logits");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (labels.size() != rows) {
    shape_fail(op, std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                       " rows");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= cols) {
      shape_fail(op, "label " + std::to_string(l) + " outside [0," + std::to_string(cols) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(softmax_rows(logits));
  const auto lv = logits.values();
  double s = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = lv.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    s += std::log(z) + mx - in[labels[r]];
  }
  const bool track = should_record<T>({&logits});
  auto result = make_output<T>(op, Shape{1}, std::vector<T>{static_cast<T>(s / rows)}, track);
  if (track) {
    std::vector<int> owned(labels.begin(), labels.end());
    record<T>({logits}, result, [logits, result, probs, owned, rows, cols]() mutable {
      const T g = static_cast<T>(result.grad()[0] / static_cast<double>(rows));
      auto dl = logits.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) {
          const T onehot = static_cast<std::size_t>(owned[r]) == c ? T(1) : T(0);
          dl[r * cols + c] += g * ((*probs)[r * cols + c] - onehot);
        }
    });
  }
  return result;
}

#define POISONFORGE_INSTANTIATE_OPS(T)                                                         \
  template BasicTensor<T> matmul(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template BasicTensor<T> bias_add(const BasicTensor<T>&, const BasicTensor<T>&);              \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&,                 \
                                 const BasicTensor<T>&, Conv2dAttrs);                          \
  template BasicTensor<T> conv_transpose2d(const BasicTensor<T>&, const BasicTensor<T>&,       \
                                           const BasicTensor<T>&, Conv2dAttrs);                \
  template BasicTensor<T> maxpool2d(const BasicTensor<T>&, std::size_t, std::size_t);          \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                         \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                      \
  template BasicTensor<T> tanh(const BasicTensor<T>&);                                         \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                   \
  template BasicTensor<T> scale(const BasicTensor<T>&, T);                                     \
  template BasicTensor<T> clip(const BasicTensor<T>&, T, T);                                   \
  template BasicTensor<T> concat(const std::vector<BasicTensor<T>>&, std::size_t);             \
  template BasicTensor<T> flatten(const BasicTensor<T>&);                                      \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                               \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                          \
  template BasicTensor<T> mean(const BasicTensor<T>&);                                         \
  template BasicTensor<T> l1_loss(const BasicTensor<T>&, const BasicTensor<T>&, Reduction);    \
  template BasicTensor<T> l2_loss(const BasicTensor<T>&, const BasicTensor<T>&, Reduction);    \
  template BasicTensor<T> bce_loss(const BasicTensor<T>&, const BasicTensor<T>&);              \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);  \
  template std::vector<T> softmax_rows(const BasicTensor<T>&);                                 \
  template std::vector<int> argmax_rows(const BasicTensor<T>&);

POISONFORGE_INSTANTIATE_OPS(float)
POISONFORGE_INSTANTIATE_OPS(double)

#undef POISONFORGE_INSTANTIATE_OPS

}  // namespace poisonforge::ops
