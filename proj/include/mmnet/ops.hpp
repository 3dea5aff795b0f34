#pragma once

// Differentiable primitives. Every feature-map computation in the library is
// a composition of these. Binary elementwise ops require identical shapes; the
// only broadcast is multiplication by a scalar.

#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "mmnet/detail/gemm.hpp"
#include "mmnet/parallel.hpp"
#include "mmnet/tensor.hpp"

namespace mmnet {

enum class Mode { train, eval };

namespace detail {

// While active, every relu folds its on/off pattern into `signature`. The
// gradient checker compares signatures across perturbed evaluations to tell
// when a central difference straddles a kink.
struct KinkMonitor {
  static inline thread_local bool active = false;
  static inline thread_local std::uint64_t signature = 0;
};

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op, const char* what) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                     ", got " + shape_str(s));
  }
}

template <class T, class Fwd, class Deriv>
Tensor<T> unary(const Tensor<T>& a, const char* op, Fwd fwd, Deriv deriv) {
  const auto& x = a.values();
  std::vector<T> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = fwd(x[i]);
  return make_result<T>(a.shape(), std::move(y), {a}, op, [deriv](Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    T* gx = p.grad_buffer();
    for (std::size_t i = 0; i < out.data.size(); ++i) gx[i] += out.grad[i] * deriv(p.data[i], out.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  if (detail::KinkMonitor::active) {
    std::uint64_t sig = detail::KinkMonitor::signature;
    for (T v : a.values()) sig = (sig ^ static_cast<std::uint64_t>(v > T(0))) * 1099511628211ULL;
    detail::KinkMonitor::signature = sig;
  }
  return detail::unary(
      a, "relu", [](T x) { return x > T(0) || std::isnan(x) ? x : T(0); },  // NaN propagates
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& a) {
  return detail::unary(
      a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return detail::unary(
      a, "sigmoid",
      [](T x) {
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Tensor<T> one_minus(const Tensor<T>& a) {
  return detail::unary(
      a, "one_minus", [](T x) { return T(1) - x; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return detail::unary(
      a, "scale", [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] + b[i];
  return detail::make_result<T>(a.shape(), std::move(y), {a, b}, "add", [](detail::Node<T>& out) {
    for (auto& p : out.parents) {
      if (!p->requires_grad) continue;
      T* g = p->grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] - b[i];
  return detail::make_result<T>(a.shape(), std::move(y), {a, b}, "sub", [](detail::Node<T>& out) {
    auto& pa = *out.parents[0];
    auto& pb = *out.parents[1];
    if (pa.requires_grad) {
      T* g = pa.grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
    }
    if (pb.requires_grad) {
      T* g = pb.grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] -= out.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[i] * b[i];
  return detail::make_result<T>(a.shape(), std::move(y), {a, b}, "mul", [](detail::Node<T>& out) {
    auto& pa = *out.parents[0];
    auto& pb = *out.parents[1];
    if (pa.requires_grad) {
      T* g = pa.grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      T* g = pb.grad_buffer();
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * pa.data[i];
    }
  });
}

/// a multiplied by a one-element tensor; differentiable in both.
template <class T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: factor must have one element, got " + shape_str(s.shape()));
  const T f = s[0];
  std::vector<T> y(a.numel());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = f * a[i];
  return detail::make_result<T>(a.shape(), std::move(y), {a, s}, "scale_by", [](detail::Node<T>& out) {
    auto& pa = *out.parents[0];
    auto& ps = *out.parents[1];
    if (pa.requires_grad) {
      T* g = pa.grad_buffer();
      const T f = ps.data[0];
      for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i] * f;
    }
    if (ps.requires_grad) {
      T acc = T(0);
      for (std::size_t i = 0; i < out.grad.size(); ++i) acc += out.grad[i] * pa.data[i];
      ps.grad_buffer()[0] += acc;
    }
  });
}

enum class ElementwiseOp { relu, tanh, sigmoid, add, sub, mul, one_minus, scale };

/// Name-dispatched form of the elementwise family. `factor` is used by scale.
template <class T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const std::type_identity_t<Tensor<T>>* b = nullptr,
                      std::type_identity_t<T> factor = T(1)) {
  auto need_b = [&]() -> const Tensor<T>& {
    if (!b) throw std::invalid_argument("elementwise: binary op needs a second operand");
    return *b;
  };
  switch (op) {
    case ElementwiseOp::relu: return relu(a);
    case ElementwiseOp::tanh: return tanh(a);
    case ElementwiseOp::sigmoid: return sigmoid(a);
    case ElementwiseOp::one_minus: return one_minus(a);
    case ElementwiseOp::scale: return scale(a, factor);
    case ElementwiseOp::add: return add(a, need_b());
    case ElementwiseOp::sub: return sub(a, need_b());
    case ElementwiseOp::mul: return mul(a, need_b());
  }
  throw std::invalid_argument("elementwise: unknown op");
}

// ---------------------------------------------------------------- reductions

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.values()) acc += v;
  return detail::make_result<T>(Shape{1}, {acc}, {a}, "sum", [](detail::Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    const T go = out.grad[0];
    for (std::size_t i = 0; i < p.data.size(); ++i) g[i] += go;
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Divides each row (last axis) by max(sum, eps). Rows summing to at least eps
/// come out exactly stochastic; all-zero rows stay zero.
template <class T>
Tensor<T> row_normalize(const Tensor<T>& a, T eps) {
  if (a.ndim() < 1) throw ShapeError("row_normalize: empty shape");
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  std::vector<T> y(a.numel());
  auto denom = std::make_shared<std::vector<T>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t c = 0; c < cols; ++c) s += a[r * cols + c];
    const T d = s > eps ? s : eps;
    (*denom)[r] = s > eps ? d : -d;  // sign marks a guarded row
    for (std::size_t c = 0; c < cols; ++c) y[r * cols + c] = a[r * cols + c] / d;
  }
  return detail::make_result<T>(a.shape(), std::move(y), {a}, "row_normalize",
                                [denom, rows, cols](detail::Node<T>& out) {
                                  auto& p = *out.parents[0];
                                  if (!p.requires_grad) return;
                                  T* g = p.grad_buffer();
                                  for (std::size_t r = 0; r < rows; ++r) {
                                    const T* go = out.grad.data() + r * cols;
                                    const T* yo = out.data.data() + r * cols;
                                    T dot = T(0);
                                    for (std::size_t c = 0; c < cols; ++c) dot += go[c] * yo[c];
                                    const T d = (*denom)[r];
                                    if (d < T(0)) {  // constant denominator
                                      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += go[c] / -d;
                                      continue;
                                    }
                                    for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += (go[c] - dot) / d;
                                  }
                                });
}

// ---------------------------------------------------------------- linear algebra

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 2, "matmul", "lhs");
  detail::require_rank(b.shape(), 2, "matmul", "rhs");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> y(m * n, T(0));
  detail::gemm_nn(m, n, k, a.values().data(), b.values().data(), y.data());
  return detail::make_result<T>(Shape{m, n}, std::move(y), {a, b}, "matmul", [m, n, k](detail::Node<T>& out) {
    auto& pa = *out.parents[0];
    auto& pb = *out.parents[1];
    if (pa.requires_grad) detail::gemm_nt(m, k, n, out.grad.data(), pb.data.data(), pa.grad_buffer());
    if (pb.requires_grad) detail::gemm_tn(k, n, m, pa.data.data(), out.grad.data(), pb.grad_buffer());
  });
}

/// Batched product [B,m,k] x [B,k,n] -> [B,m,n]; batch items do not interact.
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a.shape(), 3, "bmm", "lhs");
  detail::require_rank(b.shape(), 3, "bmm", "rhs");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) {
    throw ShapeError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<T> y(batch * m * n, T(0));
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm_nn(m, n, k, a.values().data() + i * m * k, b.values().data() + i * k * n, y.data() + i * m * n);
  }
  return detail::make_result<T>(Shape{batch, m, n}, std::move(y), {a, b}, "bmm",
                                [batch, m, n, k](detail::Node<T>& out) {
                                  auto& pa = *out.parents[0];
                                  auto& pb = *out.parents[1];
                                  for (std::size_t i = 0; i < batch; ++i) {
                                    const T* go = out.grad.data() + i * m * n;
                                    if (pa.requires_grad) {
                                      detail::gemm_nt(m, k, n, go, pb.data.data() + i * k * n,
                                                      pa.grad_buffer() + i * m * k);
                                    }
                                    if (pb.requires_grad) {
                                      detail::gemm_tn(k, n, m, pa.data.data() + i * m * k, go,
                                                      pb.grad_buffer() + i * k * n);
                                    }
                                  }
                                });
}

// ---------------------------------------------------------------- layout

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return detail::make_result<T>(std::move(shape), a.values(), {a}, "reshape", [](detail::Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
  });
}

namespace detail {

// For each output flat index, the flat index of the source element.
inline std::vector<std::size_t> permute_index(const Shape& in, const std::vector<std::size_t>& perm) {
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(rank);
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out[i] = in[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  const std::size_t total = numel(in);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t flat = 0; flat < total; ++flat) {
    map[flat] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src += stride[ax];
      if (idx[ax] < out[ax]) break;
      src -= stride[ax] * out[ax];
      idx[ax] = 0;
    }
  }
  return map;
}

template <class T>
Tensor<T> gather_by_map(const Tensor<T>& a, Shape shape, std::shared_ptr<const std::vector<std::size_t>> map,
                        const char* op) {
  std::vector<T> y(map->size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = a[(*map)[i]];
  return make_result<T>(std::move(shape), std::move(y), {a}, op, [map](Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    for (std::size_t i = 0; i < out.grad.size(); ++i) g[(*map)[i]] += out.grad[i];
  });
}

}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const std::size_t rank = a.ndim();
  if (perm.size() != rank) throw ShapeError("permute: permutation rank differs from " + shape_str(a.shape()));
  std::vector<bool> used(rank, false);
  for (auto p : perm) {
    if (p >= rank || used[p]) throw ShapeError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) out[i] = a.dim(perm[i]);
  auto map = std::make_shared<const std::vector<std::size_t>>(detail::permute_index(a.shape(), perm));
  return detail::gather_by_map(a, std::move(out), std::move(map), "permute");
}

/// Swaps the last two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() < 2) throw ShapeError("transpose: rank must be at least 2");
  std::vector<std::size_t> perm(a.ndim());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a.ndim() - 1], perm[a.ndim() - 2]);
  return permute(a, perm);
}

/// Reverses the order of elements along `axis`.
template <class T>
Tensor<T> flip(const Tensor<T>& a, std::size_t axis) {
  if (axis >= a.ndim()) throw ShapeError("flip: axis out of range for " + shape_str(a.shape()));
  const auto& s = a.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  auto map = std::make_shared<std::vector<std::size_t>>(a.numel());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < len; ++l)
      for (std::size_t i = 0; i < inner; ++i)
        (*map)[(o * len + l) * inner + i] = (o * len + (len - 1 - l)) * inner + i;
  return detail::gather_by_map(a, s, std::shared_ptr<const std::vector<std::size_t>>(map), "flip");
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + shape_str(first));
  Shape out = first;
  out[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(s) + " vs " + shape_str(first));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != first[i]) {
        throw ShapeError("concat: shapes disagree off the concat axis: " + shape_str(s) + " vs " + shape_str(first));
      }
    }
    out[axis] += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];

  auto widths = std::make_shared<std::vector<std::size_t>>();
  for (const auto& p : parts) widths->push_back(p.dim(axis) * inner);
  const std::size_t row = out[axis] * inner;
  std::vector<T> y(numel(out));
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = o * row;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const T* src = parts[k].values().data() + o * (*widths)[k];
      std::copy(src, src + (*widths)[k], y.begin() + static_cast<std::ptrdiff_t>(off));
      off += (*widths)[k];
    }
  }
  return detail::make_result<T>(std::move(out), std::move(y), parts, "concat",
                                [widths, outer, row](detail::Node<T>& out) {
                                  std::size_t col = 0;
                                  for (std::size_t k = 0; k < out.parents.size(); ++k) {
                                    auto& p = *out.parents[k];
                                    const std::size_t w = (*widths)[k];
                                    if (p.requires_grad) {
                                      T* g = p.grad_buffer();
                                      for (std::size_t o = 0; o < outer; ++o) {
                                        const T* src = out.grad.data() + o * row + col;
                                        for (std::size_t i = 0; i < w; ++i) g[o * w + i] += src[i];
                                      }
                                    }
                                    col += w;
                                  }
                                });
}

/// Stacks `count` copies of `a` along a new leading axis; gradients are summed.
template <class T>
Tensor<T> expand_batch(const Tensor<T>& a, std::size_t count) {
  if (count == 0) throw ShapeError("expand_batch: count must be positive");
  Shape out{count};
  out.insert(out.end(), a.shape().begin(), a.shape().end());
  const std::size_t n = a.numel();
  std::vector<T> y(n * count);
  for (std::size_t b = 0; b < count; ++b) std::copy(a.values().begin(), a.values().end(), y.begin() + static_cast<std::ptrdiff_t>(b * n));
  return detail::make_result<T>(std::move(out), std::move(y), {a}, "expand_batch", [n, count](detail::Node<T>& out) {
    auto& p = *out.parents[0];
    if (!p.requires_grad) return;
    T* g = p.grad_buffer();
    for (std::size_t b = 0; b < count; ++b)
      for (std::size_t i = 0; i < n; ++i) g[i] += out.grad[b * n + i];
  });
}

/// [N,C,H,W] -> [N,H*W,C]: one row per pixel.
template <class T>
Tensor<T> spatial_to_rows(const Tensor<T>& x) {
  detail::require_rank(x.shape(), 4, "spatial_to_rows", "input");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  return reshape(permute(x, {0, 2, 3, 1}), Shape{n, h * w, c});
}

/// [N,H*W,C] -> [N,C,H,W]; inverse of spatial_to_rows.
template <class T>
Tensor<T> rows_to_spatial(const Tensor<T>& x, std::size_t h, std::size_t w) {
  detail::require_rank(x.shape(), 3, "rows_to_spatial", "input");
  if (x.dim(1) != h * w) throw ShapeError("rows_to_spatial: row count does not match " + std::to_string(h) + "x" + std::to_string(w));
  const auto n = x.dim(0), c = x.dim(2);
  return permute(reshape(x, Shape{n, h, w, c}), {0, 3, 1, 2});
}

// ---------------------------------------------------------------- convolution

namespace detail {

// col[(c*kh + i)*kw + j][oy*ow + ox] = x[c][oy*stride + i - pad][ox*stride + j - pad] (0 outside)
template <class T>
void im2col(const T* x, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* col) {
  const std::size_t p = oh * ow;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        T* dst = col + ((ci * kh + i) * kw + j) * p;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
          T* drow = dst + oy * ow;
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(drow, drow + ow, T(0));
            continue;
          }
          const T* srow = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
            drow[ox] = (ix < 0 || ix >= static_cast<long>(w)) ? T(0) : srow[ix];
          }
        }
      }
}

template <class T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, std::size_t kh, std::size_t kw,
            std::size_t stride, std::size_t pad, std::size_t oh, std::size_t ow, T* x) {
  const std::size_t p = oh * ow;
  for (std::size_t ci = 0; ci < c; ++ci)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        const T* src = col + ((ci * kh + i) * kw + j) * p;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          T* xrow = x + (ci * h + static_cast<std::size_t>(iy)) * w;
          const T* srow = src + oy * ow;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(w)) xrow[ix] += srow[ox];
          }
        }
      }
}

template <class T>
void transpose_into(const T* src, std::size_t rows, std::size_t cols, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

}  // namespace detail

/// 2-D cross-correlation. input [N,C,H,W], kernel [O,C,kh,kw] (odd kh, kw),
/// optional bias [O]; output [N,O,(H+2p-kh)/s+1,(W+2p-kw)/s+1].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const std::optional<std::type_identity_t<Tensor<T>>>& bias,
                 std::size_t stride, std::size_t pad) {
  detail::require_rank(input.shape(), 4, "conv2d", "input");
  detail::require_rank(kernel.shape(), 4, "conv2d", "kernel");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    throw ShapeError("conv2d: input has " + std::to_string(c) + " channels but kernel " +
                     shape_str(kernel.shape()) + " expects " + std::to_string(kernel.dim(1)));
  }
  if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd, got " + shape_str(kernel.shape()));
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (h + 2 * pad < kh || w + 2 * pad < kw) throw ShapeError("conv2d: kernel larger than padded input");
  if (bias && (bias->ndim() != 1 || bias->dim(0) != o)) {
    throw ShapeError("conv2d: bias must have shape [" + std::to_string(o) + "], got " + shape_str(bias->shape()));
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  const std::size_t ck = c * kh * kw;
  const std::size_t p = oh * ow;
  const bool pointwise = kh == 1 && kw == 1 && stride == 1 && pad == 0;

  std::vector<T> y(n * o * p, T(0));
  const T* xd = input.values().data();
  const T* kd = kernel.values().data();
  const T* bd = bias ? bias->values().data() : nullptr;
  parallel_chunks(n, [&](std::size_t, std::size_t begin, std::size_t end) {
    std::vector<T> col(pointwise ? 0 : ck * p);
    for (std::size_t b = begin; b < end; ++b) {
      const T* xb = xd + b * c * h * w;
      const T* cols = xb;
      if (!pointwise) {
        detail::im2col(xb, c, h, w, kh, kw, stride, pad, oh, ow, col.data());
        cols = col.data();
      }
      T* yb = y.data() + b * o * p;
      if (bd) {
        for (std::size_t oc = 0; oc < o; ++oc) std::fill(yb + oc * p, yb + (oc + 1) * p, bd[oc]);
      }
      detail::gemm_nn(o, p, ck, kd, cols, yb);
    }
  });

  std::vector<Tensor<T>> inputs{input, kernel};
  if (bias) inputs.push_back(*bias);
  return detail::make_result<T>(
      Shape{n, o, oh, ow}, std::move(y), std::move(inputs), "conv2d",
      [=](detail::Node<T>& out) {
        auto& px = *out.parents[0];
        auto& pk = *out.parents[1];
        detail::Node<T>* pb = out.parents.size() > 2 ? out.parents[2].get() : nullptr;
        const bool want_x = px.requires_grad;
        const bool want_k = pk.requires_grad;
        const bool want_b = pb && pb->requires_grad;
        T* gx = want_x ? px.grad_buffer() : nullptr;
        const std::size_t chunks = chunk_count(n);
        // Per-chunk partial sums merged in chunk order keep results reproducible.
        std::vector<std::vector<T>> gk_part(chunks), gb_part(chunks);
        parallel_chunks(n, [&](std::size_t chunk, std::size_t begin, std::size_t end) {
          std::vector<T> col(pointwise ? 0 : ck * p);
          std::vector<T> col_t(want_k ? ck * p : 0);
          std::vector<T> dcol(want_x && !pointwise ? ck * p : 0);
          if (want_k) gk_part[chunk].assign(o * ck, T(0));
          if (want_b) gb_part[chunk].assign(o, T(0));
          for (std::size_t b = begin; b < end; ++b) {
            const T* go = out.grad.data() + b * o * p;
            const T* xb = px.data.data() + b * c * h * w;
            if (want_k) {
              const T* cols = xb;
              if (!pointwise) {
                detail::im2col(xb, c, h, w, kh, kw, stride, pad, oh, ow, col.data());
                cols = col.data();
              }
              detail::transpose_into(cols, ck, p, col_t.data());
              detail::gemm_nn(o, ck, p, go, col_t.data(), gk_part[chunk].data());
            }
            if (want_b) {
              for (std::size_t oc = 0; oc < o; ++oc) {
                T acc = T(0);
                for (std::size_t q = 0; q < p; ++q) acc += go[oc * p + q];
                gb_part[chunk][oc] += acc;
              }
            }
            if (want_x) {
              T* gxb = gx + b * c * h * w;
              if (pointwise) {
                detail::gemm_tn(ck, p, o, pk.data.data(), go, gxb);
              } else {
                std::fill(dcol.begin(), dcol.end(), T(0));
                detail::gemm_tn(ck, p, o, pk.data.data(), go, dcol.data());
                detail::col2im(dcol.data(), c, h, w, kh, kw, stride, pad, oh, ow, gxb);
              }
            }
          }
        });
        if (want_k) {
          T* gk = pk.grad_buffer();
          for (const auto& part : gk_part)
            for (std::size_t i = 0; i < part.size(); ++i) gk[i] += part[i];
        }
        if (want_b) {
          T* gb = pb->grad_buffer();
          for (const auto& part : gb_part)
            for (std::size_t i = 0; i < part.size(); ++i) gb[i] += part[i];
        }
      });
}

// ---------------------------------------------------------------- resampling

namespace detail {

struct LerpTap {
  std::size_t lo, hi;
  double frac;
};

// Half-pixel-centre mapping: src = (dst + 0.5) * in/out - 0.5, clamped at 0.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t d = 0; d < out; ++d) {
    double src = (static_cast<double>(d) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[d] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

/// Bilinear resampling of the two trailing axes (align-corners = false).
template <class T>
Tensor<T> bilinear_resize(const Tensor<T>& input, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(input.shape(), 4, "bilinear_resize", "input");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: output extents must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (out_h == h && out_w == w) {
    return detail::make_result<T>(input.shape(), input.values(), {input}, "bilinear_resize",
                                  [](detail::Node<T>& out) {
                                    auto& p = *out.parents[0];
                                    if (!p.requires_grad) return;
                                    T* g = p.grad_buffer();
                                    for (std::size_t i = 0; i < out.grad.size(); ++i) g[i] += out.grad[i];
                                  });
  }
  auto ty = std::make_shared<const std::vector<detail::LerpTap>>(detail::lerp_taps(h, out_h));
  auto tx = std::make_shared<const std::vector<detail::LerpTap>>(detail::lerp_taps(w, out_w));
  std::vector<T> y(n * c * out_h * out_w);
  const T* xd = input.values().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const T* src = xd + plane * h * w;
    T* dst = y.data() + plane * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& vy = (*ty)[oy];
      const T fy = static_cast<T>(vy.frac);
      const T* r0 = src + vy.lo * w;
      const T* r1 = src + vy.hi * w;
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& vx = (*tx)[ox];
        const T fx = static_cast<T>(vx.frac);
        const T top = (T(1) - fx) * r0[vx.lo] + fx * r0[vx.hi];
        const T bot = (T(1) - fx) * r1[vx.lo] + fx * r1[vx.hi];
        dst[oy * out_w + ox] = (T(1) - fy) * top + fy * bot;
      }
    }
  }
  return detail::make_result<T>(
      Shape{n, c, out_h, out_w}, std::move(y), {input}, "bilinear_resize",
      [ty, tx, n, c, h, w, out_h, out_w](detail::Node<T>& out) {
        auto& p = *out.parents[0];
        if (!p.requires_grad) return;
        T* g = p.grad_buffer();
        for (std::size_t plane = 0; plane < n * c; ++plane) {
          const T* go = out.grad.data() + plane * out_h * out_w;
          T* gp = g + plane * h * w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const auto& vy = (*ty)[oy];
            const T fy = static_cast<T>(vy.frac);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const auto& vx = (*tx)[ox];
              const T fx = static_cast<T>(vx.frac);
              const T v = go[oy * out_w + ox];
              gp[vy.lo * w + vx.lo] += (T(1) - fy) * (T(1) - fx) * v;
              gp[vy.lo * w + vx.hi] += (T(1) - fy) * fx * v;
              gp[vy.hi * w + vx.lo] += fy * (T(1) - fx) * v;
              gp[vy.hi * w + vx.hi] += fy * fx * v;
            }
          }
        }
      });
}

// ---------------------------------------------------------------- normalization

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Per-channel batch normalization of [N,C,H,W]. In train mode uses batch
/// statistics and updates the running estimates in place (unbiased variance);
/// in eval mode uses the running estimates.
template <class T>
Tensor<T> batchnorm2d(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, Mode mode, double momentum = kBatchNormMomentum,
                      double eps = kBatchNormEps) {
  detail::require_rank(input.shape(), 4, "batchnorm2d", "input");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->ndim() != 1 || t->dim(0) != c) {
      throw ShapeError("batchnorm2d: per-channel tensors must have shape [" + std::to_string(c) + "], got " +
                       shape_str(t->shape()));
    }
  }
  const std::size_t m = n * hw;
  if (mode == Mode::train && m < 2) {
    throw ShapeError("batchnorm2d: train mode needs at least 2 values per channel, got " + std::to_string(m));
  }
  auto xhat = std::make_shared<std::vector<T>>(input.numel());
  auto inv_std = std::make_shared<std::vector<T>>(c);
  std::vector<T> y(input.numel());
  const T* x = input.values().data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) s += x[(b * c + ch) * hw + i];
      mu = s / static_cast<double>(m);
      double ss = 0.0;
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < hw; ++i) {
          const double d = x[(b * c + ch) * hw + i] - mu;
          ss += d * d;
        }
      var = ss / static_cast<double>(m);
      running_mean[ch] = static_cast<T>((1.0 - momentum) * running_mean[ch] + momentum * mu);
      running_var[ch] = static_cast<T>((1.0 - momentum) * running_var[ch] +
                                       momentum * var * static_cast<double>(m) / static_cast<double>(m - 1));
    } else {
      mu = running_mean[ch];
      var = running_var[ch];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
    (*inv_std)[ch] = is;
    const T mu_t = static_cast<T>(mu);
    const T gm = gamma[ch], bt = beta[ch];
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t k = (b * c + ch) * hw + i;
        const T xh = (x[k] - mu_t) * is;
        (*xhat)[k] = xh;
        y[k] = gm * xh + bt;
      }
  }
  const bool training = mode == Mode::train;
  return detail::make_result<T>(
      input.shape(), std::move(y), {input, gamma, beta}, "batchnorm2d",
      [xhat, inv_std, n, c, hw, m, training](detail::Node<T>& out) {
        auto& px = *out.parents[0];
        auto& pg = *out.parents[1];
        auto& pb = *out.parents[2];
        const T* go = out.grad.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
          double sg = 0.0, sgx = 0.0;
          for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t k = (b * c + ch) * hw + i;
              sg += go[k];
              sgx += static_cast<double>(go[k]) * (*xhat)[k];
            }
          if (pg.requires_grad) pg.grad_buffer()[ch] += static_cast<T>(sgx);
          if (pb.requires_grad) pb.grad_buffer()[ch] += static_cast<T>(sg);
          if (!px.requires_grad) continue;
          T* gx = px.grad_buffer();
          const T scale_c = pg.data[ch] * (*inv_std)[ch];
          if (training) {
            const T mean_g = static_cast<T>(sg / static_cast<double>(m));
            const T mean_gx = static_cast<T>(sgx / static_cast<double>(m));
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t k = (b * c + ch) * hw + i;
                gx[k] += scale_c * (go[k] - mean_g - (*xhat)[k] * mean_gx);
              }
          } else {
            for (std::size_t b = 0; b < n; ++b)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t k = (b * c + ch) * hw + i;
                gx[k] += scale_c * go[k];
              }
          }
        }
      });
}

}  // namespace mmnet
