#pragma once

// Dense kernels used by the model, each paired with its backward pass.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <utility>

#include "mast/tensor.hpp"

namespace mast {

// ---------------------------------------------------------------------------
// Elementwise helpers

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
void add_inplace(Tensor<T>& dst, const Tensor<T>& src) {
  if (dst.shape() != src.shape()) {
    throw DimensionError("add_inplace: shape " + shape_str(dst.shape()) +
                         " vs " + shape_str(src.shape()));
  }
  T* d = dst.data();
  const T* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  Tensor<T> out = a;
  for (auto& v : out.values()) v *= factor;
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out(j, i) = a(i, j);
  return out;
}

// ---------------------------------------------------------------------------
// Matrix product

namespace detail {

// c[m×n] += a[m×k] · b[k×n]; i-k-j order keeps the inner loop contiguous.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
              std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[k×n] += aᵀ · b where a is m×k and b is m×n.
template <typename T>
void gemm_tn_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T{0}) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m×k] += a · bᵀ where a is m×n and b is k×n.
template <typename T>
void gemm_nt_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t n,
                 std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T acc{0};
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: inner extents differ, " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor<T> c({a.dim(0), b.dim(1)});
  detail::gemm_acc(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  require_finite(c, "matmul");
  return c;
}

template <typename T>
struct MatmulGrads {
  Tensor<T> da;
  Tensor<T> db;
};

/// Gradients of c = a·b given dc.
template <typename T>
MatmulGrads<T> matmul_backward(const Tensor<T>& a, const Tensor<T>& b,
                               const Tensor<T>& dc) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (dc.rank() != 2 || dc.dim(0) != m || dc.dim(1) != n) {
    throw DimensionError("matmul_backward: upstream gradient has shape " +
                         shape_str(dc.shape()));
  }
  MatmulGrads<T> g{Tensor<T>({m, k}), Tensor<T>({k, n})};
  detail::gemm_nt_acc(dc.data(), b.data(), g.da.data(), m, n, k);
  detail::gemm_tn_acc(a.data(), dc.data(), g.db.data(), m, k, n);
  return g;
}

/// y = x·W + bias for token-major x (N×in), W (in×out), bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  Tensor<T> y = matmul(x, w);
  if (bias.size() != y.dim(1)) {
    throw DimensionError("linear: bias length " + std::to_string(bias.size()) +
                         " vs output width " + std::to_string(y.dim(1)));
  }
  for (std::size_t i = 0; i < y.dim(0); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias[j];
  }
  return y;
}

/// Accumulates dW, dbias into the given tensors and returns dx.
template <typename T>
Tensor<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w,
                          const Tensor<T>& dy, Tensor<T>& dw, Tensor<T>& dbias) {
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  detail::gemm_tn_acc(x.data(), dy.data(), dw.data(), m, k, n);
  for (std::size_t i = 0; i < m; ++i) {
    const auto r = dy.row(i);
    for (std::size_t j = 0; j < n; ++j) dbias[j] += r[j];
  }
  Tensor<T> dx({m, k});
  detail::gemm_nt_acc(dy.data(), w.data(), dx.data(), m, n, k);
  return dx;
}

// ---------------------------------------------------------------------------
// Softmax

namespace detail {

struct AxisLayout {
  std::size_t outer, extent, inner;
};

template <typename T>
AxisLayout axis_layout(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) +
                         " out of range for shape " + shape_str(x.shape()));
  }
  AxisLayout l{1, x.dim(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) l.inner *= x.dim(i);
  return l;
}

}  // namespace detail

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto l = detail::axis_layout(x, axis);
  Tensor<T> y = x;
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      T* base = y.data() + o * l.extent * l.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t e = 0; e < l.extent; ++e) mx = std::max(mx, base[e * l.inner]);
      T sum{0};
      for (std::size_t e = 0; e < l.extent; ++e) {
        T& v = base[e * l.inner];
        v = std::exp(v - mx);
        sum += v;
      }
      for (std::size_t e = 0; e < l.extent; ++e) base[e * l.inner] /= sum;
    }
  }
  require_finite(y, "softmax");
  return y;
}

/// dx given the softmax output y and upstream dy.
template <typename T>
Tensor<T> softmax_backward(const Tensor<T>& y, const Tensor<T>& dy,
                           std::size_t axis) {
  const auto l = detail::axis_layout(y, axis);
  Tensor<T> dx(y.shape());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t off = o * l.extent * l.inner + in;
      T dot{0};
      for (std::size_t e = 0; e < l.extent; ++e)
        dot += y[off + e * l.inner] * dy[off + e * l.inner];
      for (std::size_t e = 0; e < l.extent; ++e) {
        const std::size_t i = off + e * l.inner;
        dx[i] = y[i] * (dy[i] - dot);
      }
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis

template <typename T>
struct LayerNormCache {
  Tensor<T> xhat;          // pre-affine normalized values
  std::vector<T> inv_std;  // one per row
};

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps,
                     LayerNormCache<T>* cache = nullptr) {
  if (x.rank() == 0 || x.empty()) {
    throw DimensionError("layer_norm: empty input");
  }
  if (eps < 0) throw ConfigError("layer_norm: eps must be non-negative");
  const std::size_t w = x.shape().back();
  if (gamma.size() != w || beta.size() != w) {
    throw DimensionError("layer_norm: affine length mismatch with last axis " +
                         std::to_string(w));
  }
  const std::size_t rows = x.size() / w;
  Tensor<T> y(x.shape());
  if (cache) {
    cache->xhat = Tensor<T>(x.shape());
    cache->inv_std.assign(rows, T{0});
  }
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data() + r * w;
    T mean{0};
    for (std::size_t j = 0; j < w; ++j) mean += xr[j];
    mean /= static_cast<T>(w);
    T var{0};
    for (std::size_t j = 0; j < w; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(w);
    const T inv = T{1} / std::sqrt(var + static_cast<T>(eps));
    T* yr = y.data() + r * w;
    for (std::size_t j = 0; j < w; ++j) {
      const T xh = (xr[j] - mean) * inv;
      if (cache) cache->xhat[r * w + j] = xh;
      yr[j] = gamma[j] * xh + beta[j];
    }
    if (cache) cache->inv_std[r] = inv;
  }
  require_finite(y, "layer_norm");
  return y;
}

/// Returns dx; accumulates into dgamma and dbeta.
template <typename T>
Tensor<T> layer_norm_backward(const LayerNormCache<T>& cache,
                              const Tensor<T>& gamma, const Tensor<T>& dy,
                              Tensor<T>& dgamma, Tensor<T>& dbeta) {
  const std::size_t w = gamma.size();
  const std::size_t rows = dy.size() / w;
  Tensor<T> dx(dy.shape());
  std::vector<T> dxhat(w);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* dyr = dy.data() + r * w;
    const T* xh = cache.xhat.data() + r * w;
    T mean_d{0}, mean_dx{0};
    for (std::size_t j = 0; j < w; ++j) {
      dgamma[j] += dyr[j] * xh[j];
      dbeta[j] += dyr[j];
      dxhat[j] = dyr[j] * gamma[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xh[j];
    }
    mean_d /= static_cast<T>(w);
    mean_dx /= static_cast<T>(w);
    T* dxr = dx.data() + r * w;
    const T inv = cache.inv_std[r];
    for (std::size_t j = 0; j < w; ++j)
      dxr[j] = inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
  }
  return dx;
}

// ---------------------------------------------------------------------------
// GELU (exact erf form)

template <typename T>
T gelu_scalar(T x) {
  return static_cast<T>(0.5) * x *
         (T{1} + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T cdf = static_cast<T>(0.5) *
                (T{1} + std::erf(x * static_cast<T>(std::numbers::sqrt2 / 2)));
  const T pdf = std::exp(static_cast<T>(-0.5) * x * x) *
                static_cast<T>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
  return cdf + x * pdf;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.values()) v = gelu_scalar(v);
  require_finite(y, "gelu");
  return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = dy[i] * gelu_grad_scalar(x[i]);
  return dx;
}

// ---------------------------------------------------------------------------
// 2D convolution (cross-correlation, zero padding)

struct Conv2dGeometry {
  std::size_t stride_h = 1, stride_w = 1, pad_h = 0, pad_w = 0;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k,
                                   std::size_t stride, std::size_t pad) {
  if (stride == 0) throw ConfigError("conv2d: stride must be positive");
  if (in + 2 * pad < k) {
    throw DimensionError("conv2d: kernel extent " + std::to_string(k) +
                         " exceeds padded input extent " +
                         std::to_string(in + 2 * pad));
  }
  return (in + 2 * pad - k) / stride + 1;
}

/// x: c_in×H×W, w: c_out×c_in×kh×kw, bias: c_out.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 const Conv2dGeometry& g) {
  require_rank(x, 3, "conv2d input");
  require_rank(w, 4, "conv2d kernel");
  const std::size_t cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != cin) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(w.dim(1)) +
                         " input channels, got " + std::to_string(cin));
  }
  if (bias.size() != cout) throw DimensionError("conv2d: bias length mismatch");
  const std::size_t Ho = conv_out_extent(H, kh, g.stride_h, g.pad_h);
  const std::size_t Wo = conv_out_extent(W, kw, g.stride_w, g.pad_w);
  Tensor<T> y({cout, Ho, Wo});
  for (std::size_t co = 0; co < cout; ++co) {
    T* yc = y.data() + co * Ho * Wo;
    for (std::size_t i = 0; i < Ho * Wo; ++i) yc[i] = bias[co];
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xc = x.data() + ci * H * W;
      const T* wk = w.data() + (co * cin + ci) * kh * kw;
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          T acc{0};
          for (std::size_t a = 0; a < kh; ++a) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride_h + a) -
                                      static_cast<std::ptrdiff_t>(g.pad_h);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t b = 0; b < kw; ++b) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride_w + b) -
                                        static_cast<std::ptrdiff_t>(g.pad_w);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
              acc += wk[a * kw + b] * xc[ih * W + iw];
            }
          }
          yc[oh * Wo + ow] += acc;
        }
      }
    }
  }
  require_finite(y, "conv2d");
  return y;
}

template <typename T>
struct Conv2dGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> dbias;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w,
                               const Tensor<T>& dy, const Conv2dGeometry& g,
                               bool need_dx = true) {
  const std::size_t cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Ho = dy.dim(1), Wo = dy.dim(2);
  Conv2dGrads<T> out{need_dx ? Tensor<T>(x.shape()) : Tensor<T>(), Tensor<T>(w.shape()),
                     Tensor<T>({cout})};
  for (std::size_t co = 0; co < cout; ++co) {
    const T* dyc = dy.data() + co * Ho * Wo;
    T bsum{0};
    for (std::size_t i = 0; i < Ho * Wo; ++i) bsum += dyc[i];
    out.dbias[co] = bsum;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* xc = x.data() + ci * H * W;
      const T* wk = w.data() + (co * cin + ci) * kh * kw;
      T* dwk = out.dw.data() + (co * cin + ci) * kh * kw;
      T* dxc = need_dx ? out.dx.data() + ci * H * W : nullptr;
      for (std::size_t oh = 0; oh < Ho; ++oh) {
        for (std::size_t ow = 0; ow < Wo; ++ow) {
          const T d = dyc[oh * Wo + ow];
          if (d == T{0}) continue;
          for (std::size_t a = 0; a < kh; ++a) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride_h + a) -
                                      static_cast<std::ptrdiff_t>(g.pad_h);
            if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
            for (std::size_t b = 0; b < kw; ++b) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride_w + b) -
                                        static_cast<std::ptrdiff_t>(g.pad_w);
              if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
              dwk[a * kw + b] += d * xc[ih * W + iw];
              if (dxc) dxc[ih * W + iw] += d * wk[a * kw + b];
            }
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient oracle

/// Central-difference gradient of a scalar function, evaluated in double.
template <typename F>
Tensor<double> finite_diff_grad(F&& f, const Tensor<double>& x, double eps = 1e-5) {
  Tensor<double> grad(x.shape());
  Tensor<double> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2 * eps);
  }
  return grad;
}

/// |a-b| / max(|a|, |b|, floor). The floor keeps near-zero gradients from
/// reporting huge relative errors out of pure rounding noise.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

}  // namespace mast
