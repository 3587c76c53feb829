#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mmseg/numerics/random.hpp"
#include "mmseg/numerics/tensor.hpp"

namespace mmseg {

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw DimensionError(message);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

template <typename T>
void require_rank(const Tensor<T>& t, std::size_t rank, const char* op) {
  require(t.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + shape_str(t.shape()));
}

// Source coordinate and neighbour weights for half-pixel-centre resampling.
struct LinearTap {
  std::size_t lo, hi;
  double w_lo, w_hi;
};

inline std::vector<LinearTap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<LinearTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(src);
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = lo + 1 < in ? lo + 1 : in - 1;
    const double frac = src - static_cast<double>(lo);
    taps[o] = {lo, hi, 1.0 - frac, frac};
  }
  return taps;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g) {
    for (const auto* t : {&a, &b}) {
      if (auto* sink = t->grad_sink()) {
        for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
      }
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
    }
    if (auto* sink = b.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] -= g[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i] * b.data()[i];
    }
    if (auto* sink = b.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i] * a.data()[i];
    }
  });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "div");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] / b.data()[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, b}, [a, b](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i] / b.data()[i];
    }
    if (auto* sink = b.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T bv = b.data()[i];
        (*sink)[i] -= g[i] * a.data()[i] / (bv * bv);
      }
    }
  });
}

/// Multiplies every element by a constant.
template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [a, factor](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i] * factor;
    }
  });
}

/// Multiplies every element of `a` by the single value held in `s` (shape [1]).
template <typename T>
Tensor<T> scale_by(const Tensor<T>& a, const Tensor<T>& s) {
  detail::require(s.numel() == 1, "scale_by: factor must hold one value, got " + shape_str(s.shape()));
  const T factor = s.data()[0];
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, s}, [a, s](std::span<const T> g) {
    const T f = s.data()[0];
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i] * f;
    }
    if (auto* sink = s.grad_sink()) {
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * a.data()[i];
      (*sink)[0] += acc;
    }
  });
}

/// Adds a constant tensor that never receives gradient (e.g. positional codes).
template <typename T>
Tensor<T> add_constant(const Tensor<T>& a, std::span<const T> constant) {
  detail::require(constant.size() == a.numel(), "add_constant: size mismatch with " + shape_str(a.shape()));
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + constant[i];
  return Tensor<T>::from_op(a.shape(), std::move(out), {a}, [a](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
    }
  });
}

/// Tanh-approximation GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T v = x.data()[i];
    out[i] = T(0.5) * v * (T(1) + std::tanh(kC * (v + kA * v * v * v)));
  }
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [x](std::span<const T> g) {
    auto* sink = x.grad_sink();
    if (!sink) return;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T v = x.data()[i];
      const T th = std::tanh(kC * (v + kA * v * v * v));
      const T dinner = kC * (T(1) + T(3) * kA * v * v);
      (*sink)[i] += g[i] * (T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * dinner);
    }
  });
}

/// Sum of all elements, shape [1].
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  return Tensor<T>::from_op(Shape{1}, {acc}, {a}, [a](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (auto& v : *sink) v += g[0];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  detail::require(shape_numel(shape) == a.numel(),
                  "reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  std::vector<T> out(a.data().begin(), a.data().end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), {a}, [a](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  }
  return Tensor<T>::from_op(Shape{n, m}, std::move(out), {a}, [a, m, n](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*sink)[i * n + j] += g[j * m + i];
      }
    }
  });
}

/// Concatenation along axis 0. For [C×H×W] maps this is channel concatenation.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs) {
  detail::require(!xs.empty(), "concat: no inputs");
  Shape tail(xs[0].shape().begin() + 1, xs[0].shape().end());
  std::size_t lead = 0;
  for (const auto& x : xs) {
    Shape t(x.shape().begin() + 1, x.shape().end());
    detail::require(t == tail, "concat: trailing extents differ, " + shape_str(xs[0].shape()) + " vs " +
                                   shape_str(x.shape()));
    lead += x.dim(0);
  }
  std::vector<T> out;
  out.reserve(lead * shape_numel(tail));
  for (const auto& x : xs) out.insert(out.end(), x.data().begin(), x.data().end());
  Shape shape{lead};
  shape.insert(shape.end(), tail.begin(), tail.end());
  return Tensor<T>::from_op(std::move(shape), std::move(out), xs, [xs](std::span<const T> g) {
    std::size_t offset = 0;
    for (const auto& x : xs) {
      if (auto* sink = x.grad_sink()) {
        for (std::size_t i = 0; i < x.numel(); ++i) (*sink)[i] += g[offset + i];
      }
      offset += x.numel();
    }
  });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& xs) {
  for (const auto& x : xs) detail::require_rank(x, 3, "concat_channels");
  return concat(xs);
}

/// Rows [begin, end) along axis 0.
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  detail::require(begin < end && end <= a.dim(0),
                  "slice: range [" + std::to_string(begin) + ", " + std::to_string(end) + ") invalid for " +
                      shape_str(a.shape()));
  const std::size_t stride = a.numel() / a.dim(0);
  std::vector<T> out(a.data().begin() + begin * stride, a.data().begin() + end * stride);
  Shape shape = a.shape();
  shape[0] = end - begin;
  return Tensor<T>::from_op(std::move(shape), std::move(out), {a}, [a, begin, stride](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[begin * stride + i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  std::vector<T> out(m * p, T(0));
  const T* ad = a.data().data();
  const T* bd = b.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * p;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = ad[i * k + t];
      const T* brow = bd + t * p;
      for (std::size_t j = 0; j < p; ++j) row[j] += av * brow[j];
    }
  }
  return Tensor<T>::from_op(Shape{m, p}, std::move(out), {a, b}, [a, b, m, k, p](std::span<const T> g) {
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    if (auto* sink = a.grad_sink()) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          T acc = 0;
          for (std::size_t j = 0; j < p; ++j) acc += g[i * p + j] * bd[t * p + j];
          (*sink)[i * k + t] += acc;
        }
      }
    }
    if (auto* sink = b.grad_sink()) {
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
          const T av = ad[i * k + t];
          T* srow = sink->data() + t * p;
          for (std::size_t j = 0; j < p; ++j) srow[j] += av * g[i * p + j];
        }
      }
    }
  });
}

/// Adds a length-n bias to every row of an [m×n] matrix.
template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  detail::require(a.rank() == 2 && bias.numel() == a.dim(1),
                  "add_row_bias: bias " + shape_str(bias.shape()) + " does not fit " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a.data()[i * n + j] + bias.data()[j];
  }
  return Tensor<T>::from_op(a.shape(), std::move(out), {a, bias}, [a, bias, m, n](std::span<const T> g) {
    if (auto* sink = a.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i];
    }
    if (auto* sink = bias.grad_sink()) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) (*sink)[j] += g[i * n + j];
      }
    }
  });
}

/// Row-vector linear layer: x[m×in] · w[in×out] + b[out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add_row_bias(matmul(x, w), b);
}

// ---------------------------------------------------------------------------
// Softmax

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  detail::require(axis < x.rank(), "softmax: axis " + std::to_string(axis) + " out of range for " +
                                       shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = x.data()[base];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, x.data()[base + j * inner]);
      T total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(x.data()[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  auto result = Tensor<T>::from_op(x.shape(), out, {x}, nullptr);
  if (result.requires_grad()) {
    std::weak_ptr<detail::TensorNode<T>> self = result.node();
    result.node()->backward_fn = [x, self, outer, inner, n](std::span<const T> g) {
      auto* sink = x.grad_sink();
      auto node = self.lock();
      if (!sink || !node) return;
      const auto& y = node->data;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
          const std::size_t base = o * n * inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = base + j * inner;
            (*sink)[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Feature-map ops on [C×H×W]

/// Per-pixel channel mixing: out[o,y,x] = Σ_c w[o,c]·x[c,y,x] + b[o].
template <typename T>
Tensor<T> conv1x1(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require_rank(x, 3, "conv1x1");
  detail::require(w.rank() == 2 && w.dim(1) == x.dim(0) && b.numel() == w.dim(0),
                  "conv1x1: channel mismatch, input " + shape_str(x.shape()) + ", weight " +
                      shape_str(w.shape()) + ", bias " + shape_str(b.shape()));
  const std::size_t cin = x.dim(0), cout = w.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(cout * hw);
  const T* xd = x.data().data();
  for (std::size_t o = 0; o < cout; ++o) {
    T* orow = out.data() + o * hw;
    std::fill(orow, orow + hw, b.data()[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const T wv = w.data()[o * cin + c];
      const T* xrow = xd + c * hw;
      for (std::size_t p = 0; p < hw; ++p) orow[p] += wv * xrow[p];
    }
  }
  Shape shape{cout, x.dim(1), x.dim(2)};
  return Tensor<T>::from_op(std::move(shape), std::move(out), {x, w, b},
                            [x, w, b, cin, cout, hw](std::span<const T> g) {
                              if (auto* sink = x.grad_sink()) {
                                for (std::size_t o = 0; o < cout; ++o) {
                                  for (std::size_t c = 0; c < cin; ++c) {
                                    const T wv = w.data()[o * cin + c];
                                    T* srow = sink->data() + c * hw;
                                    const T* grow = g.data() + o * hw;
                                    for (std::size_t p = 0; p < hw; ++p) srow[p] += wv * grow[p];
                                  }
                                }
                              }
                              if (auto* sink = w.grad_sink()) {
                                for (std::size_t o = 0; o < cout; ++o) {
                                  for (std::size_t c = 0; c < cin; ++c) {
                                    T acc = 0;
                                    const T* xrow = x.data().data() + c * hw;
                                    const T* grow = g.data() + o * hw;
                                    for (std::size_t p = 0; p < hw; ++p) acc += grow[p] * xrow[p];
                                    (*sink)[o * cin + c] += acc;
                                  }
                                }
                              }
                              if (auto* sink = b.grad_sink()) {
                                for (std::size_t o = 0; o < cout; ++o) {
                                  T acc = 0;
                                  for (std::size_t p = 0; p < hw; ++p) acc += g[o * hw + p];
                                  (*sink)[o] += acc;
                                }
                              }
                            });
}

/// Bilinear resize with half-pixel centres ("align corners false").
///
/// Only enlargement (or identity) is supported; sampling clamps at the border.
template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  detail::require_rank(x, 3, "upsample_bilinear");
  detail::require(out_h > 0 && out_w > 0, "upsample_bilinear: zero target extent");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  detail::require(out_h >= h && out_w >= w, "upsample_bilinear: target " + std::to_string(out_h) + "x" +
                                                std::to_string(out_w) + " smaller than input " +
                                                shape_str(x.shape()));
  const auto ty = detail::bilinear_taps(h, out_h);
  const auto tx = detail::bilinear_taps(w, out_w);
  std::vector<T> out(c * out_h * out_w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = x.data().data() + ch * h * w;
    T* dst = out.data() + ch * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const T top = T(b.w_lo) * src[a.lo * w + b.lo] + T(b.w_hi) * src[a.lo * w + b.hi];
        const T bottom = T(b.w_lo) * src[a.hi * w + b.lo] + T(b.w_hi) * src[a.hi * w + b.hi];
        dst[oy * out_w + ox] = T(a.w_lo) * top + T(a.w_hi) * bottom;
      }
    }
  }
  return Tensor<T>::from_op(Shape{c, out_h, out_w}, std::move(out), {x},
                            [x, ty, tx, c, h, w, out_h, out_w](std::span<const T> g) {
                              auto* sink = x.grad_sink();
                              if (!sink) return;
                              for (std::size_t ch = 0; ch < c; ++ch) {
                                T* dst = sink->data() + ch * h * w;
                                const T* gg = g.data() + ch * out_h * out_w;
                                for (std::size_t oy = 0; oy < out_h; ++oy) {
                                  const auto& a = ty[oy];
                                  for (std::size_t ox = 0; ox < out_w; ++ox) {
                                    const auto& b = tx[ox];
                                    const T v = gg[oy * out_w + ox];
                                    dst[a.lo * w + b.lo] += T(a.w_lo * b.w_lo) * v;
                                    dst[a.lo * w + b.hi] += T(a.w_lo * b.w_hi) * v;
                                    dst[a.hi * w + b.lo] += T(a.w_hi * b.w_lo) * v;
                                    dst[a.hi * w + b.hi] += T(a.w_hi * b.w_hi) * v;
                                  }
                                }
                              }
                            });
}

/// Per-channel mean over all spatial positions, shape [C].
template <typename T>
Tensor<T> mean_spatial(const Tensor<T>& x) {
  detail::require_rank(x, 3, "mean_spatial");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  std::vector<T> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    for (std::size_t p = 0; p < hw; ++p) acc += x.data()[ch * hw + p];
    out[ch] = acc / static_cast<T>(hw);
  }
  return Tensor<T>::from_op(Shape{c}, std::move(out), {x}, [x, c, hw](std::span<const T> g) {
    if (auto* sink = x.grad_sink()) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T v = g[ch] / static_cast<T>(hw);
        for (std::size_t p = 0; p < hw; ++p) (*sink)[ch * hw + p] += v;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Token-grid ops. Tokens are [N×C] with N = h·w in row-major grid order.

/// Flattens non-overlapping s×s patches of a [C×H×W] map into rows of
/// length s·s·C, ordered (dy, dx, c). Extents are zero-padded up to a
/// multiple of s.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& x, std::size_t stride) {
  detail::require_rank(x, 3, "extract_patches");
  detail::require(stride > 0, "extract_patches: zero stride");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t gh = (h + stride - 1) / stride, gw = (w + stride - 1) / stride;
  const std::size_t row_len = stride * stride * c;
  std::vector<T> out(gh * gw * row_len, T(0));
  // Index map from output slot to input offset (or npos for padding).
  constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::size_t> source(out.size(), npos);
  for (std::size_t py = 0; py < gh; ++py) {
    for (std::size_t px = 0; px < gw; ++px) {
      for (std::size_t dy = 0; dy < stride; ++dy) {
        for (std::size_t dx = 0; dx < stride; ++dx) {
          const std::size_t y = py * stride + dy, xx = px * stride + dx;
          if (y >= h || xx >= w) continue;
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t o = (py * gw + px) * row_len + (dy * stride + dx) * c + ch;
            source[o] = (ch * h + y) * w + xx;
            out[o] = x.data()[source[o]];
          }
        }
      }
    }
  }
  return Tensor<T>::from_op(Shape{gh * gw, row_len}, std::move(out), {x},
                            [x, source = std::move(source)](std::span<const T> g) {
                              if (auto* sink = x.grad_sink()) {
                                for (std::size_t i = 0; i < g.size(); ++i) {
                                  if (source[i] != npos) (*sink)[source[i]] += g[i];
                                }
                              }
                            });
}

/// [N×C] tokens on an h×w grid to a [C×h×w] map.
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  detail::require(tokens.rank() == 2 && tokens.dim(0) == h * w,
                  "tokens_to_map: " + shape_str(tokens.shape()) + " is not a " + std::to_string(h) + "x" +
                      std::to_string(w) + " grid");
  return reshape(transpose(tokens), Shape{tokens.dim(1), h, w});
}

/// [C×h×w] map to [N×C] tokens.
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& map) {
  detail::require_rank(map, 3, "map_to_tokens");
  return transpose(reshape(map, Shape{map.dim(0), map.dim(1) * map.dim(2)}));
}

/// Places an h×w token grid at the top-left of a zero-filled ph×pw grid.
template <typename T>
Tensor<T> pad_grid(const Tensor<T>& tokens, std::size_t h, std::size_t w, std::size_t ph, std::size_t pw) {
  detail::require(tokens.rank() == 2 && tokens.dim(0) == h * w && ph >= h && pw >= w,
                  "pad_grid: invalid grid for " + shape_str(tokens.shape()));
  if (ph == h && pw == w) return tokens;
  const std::size_t c = tokens.dim(1);
  std::vector<T> out(ph * pw * c, T(0));
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(tokens.data().begin() + y * w * c, w * c, out.begin() + y * pw * c);
  }
  return Tensor<T>::from_op(Shape{ph * pw, c}, std::move(out), {tokens},
                            [tokens, h, w, pw, c](std::span<const T> g) {
                              if (auto* sink = tokens.grad_sink()) {
                                for (std::size_t y = 0; y < h; ++y) {
                                  for (std::size_t i = 0; i < w * c; ++i) (*sink)[y * w * c + i] += g[y * pw * c + i];
                                }
                              }
                            });
}

/// Inverse of pad_grid: keeps the top-left h×w block of a ph×pw grid.
template <typename T>
Tensor<T> crop_grid(const Tensor<T>& tokens, std::size_t ph, std::size_t pw, std::size_t h, std::size_t w) {
  detail::require(tokens.rank() == 2 && tokens.dim(0) == ph * pw && ph >= h && pw >= w,
                  "crop_grid: invalid grid for " + shape_str(tokens.shape()));
  if (ph == h && pw == w) return tokens;
  const std::size_t c = tokens.dim(1);
  std::vector<T> out(h * w * c);
  for (std::size_t y = 0; y < h; ++y) {
    std::copy_n(tokens.data().begin() + y * pw * c, w * c, out.begin() + y * w * c);
  }
  return Tensor<T>::from_op(Shape{h * w, c}, std::move(out), {tokens},
                            [tokens, h, w, pw, c](std::span<const T> g) {
                              if (auto* sink = tokens.grad_sink()) {
                                for (std::size_t y = 0; y < h; ++y) {
                                  for (std::size_t i = 0; i < w * c; ++i) (*sink)[y * pw * c + i] += g[y * w * c + i];
                                }
                              }
                            });
}

/// 2×2 average pooling of an h×w token grid; odd extents are zero-padded,
/// giving a ceil(h/2)×ceil(w/2) grid.
template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& tokens, std::size_t h, std::size_t w) {
  detail::require(tokens.rank() == 2 && tokens.dim(0) == h * w,
                  "avg_pool2x2: " + shape_str(tokens.shape()) + " is not a " + std::to_string(h) + "x" +
                      std::to_string(w) + " grid");
  const std::size_t c = tokens.dim(1);
  const std::size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  std::vector<T> out(oh * ow * c, T(0));
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const T* src = tokens.data().data() + (y * w + x) * c;
      T* dst = out.data() + ((y / 2) * ow + x / 2) * c;
      for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += T(0.25) * src[ch];
    }
  }
  return Tensor<T>::from_op(Shape{oh * ow, c}, std::move(out), {tokens},
                            [tokens, h, w, ow, c](std::span<const T> g) {
                              if (auto* sink = tokens.grad_sink()) {
                                for (std::size_t y = 0; y < h; ++y) {
                                  for (std::size_t x = 0; x < w; ++x) {
                                    T* dst = sink->data() + (y * w + x) * c;
                                    const T* src = g.data() + ((y / 2) * ow + x / 2) * c;
                                    for (std::size_t ch = 0; ch < c; ++ch) dst[ch] += T(0.25) * src[ch];
                                  }
                                }
                              }
                            });
}

/// Multi-head scaled dot-product attention restricted to non-overlapping
/// window×window blocks of an h×w token grid.
///
/// q, k, v are [N×C]; head j uses channels [j·C/heads, (j+1)·C/heads).
/// h and w must be multiples of `window`.
template <typename T>
Tensor<T> windowed_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t h,
                             std::size_t w, std::size_t window, std::size_t heads) {
  detail::require(q.rank() == 2 && q.shape() == k.shape() && q.shape() == v.shape() && q.dim(0) == h * w,
                  "windowed_attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                      ", " + shape_str(v.shape()) + " do not match a " + std::to_string(h) + "x" +
                      std::to_string(w) + " grid");
  detail::require(window > 0 && h % window == 0 && w % window == 0,
                  "windowed_attention: window " + std::to_string(window) + " does not tile the grid");
  const std::size_t c = q.dim(1);
  detail::require(heads > 0 && c % heads == 0, "windowed_attention: " + std::to_string(heads) +
                                                   " heads do not divide " + std::to_string(c) + " channels");
  const std::size_t dk = c / heads;
  const std::size_t n = window * window;
  const std::size_t wins_y = h / window, wins_x = w / window;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dk));

  // Token indices per window.
  std::vector<std::size_t> members(wins_y * wins_x * n);
  for (std::size_t wy = 0; wy < wins_y; ++wy) {
    for (std::size_t wx = 0; wx < wins_x; ++wx) {
      std::size_t* m = members.data() + (wy * wins_x + wx) * n;
      for (std::size_t t = 0; t < n; ++t) m[t] = (wy * window + t / window) * w + wx * window + t % window;
    }
  }

  std::vector<T> out(q.numel(), T(0));
  std::vector<T> probs(wins_y * wins_x * heads * n * n);
  const T* qd = q.data().data();
  const T* kd = k.data().data();
  const T* vd = v.data().data();
  for (std::size_t win = 0; win < wins_y * wins_x; ++win) {
    const std::size_t* m = members.data() + win * n;
    for (std::size_t hd = 0; hd < heads; ++hd) {
      const std::size_t off = hd * dk;
      T* p = probs.data() + (win * heads + hd) * n * n;
      for (std::size_t t = 0; t < n; ++t) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t u = 0; u < n; ++u) {
          T s = 0;
          for (std::size_t j = 0; j < dk; ++j) s += qd[m[t] * c + off + j] * kd[m[u] * c + off + j];
          s *= inv_sqrt;
          p[t * n + u] = s;
          mx = std::max(mx, s);
        }
        T total = 0;
        for (std::size_t u = 0; u < n; ++u) {
          p[t * n + u] = std::exp(p[t * n + u] - mx);
          total += p[t * n + u];
        }
        for (std::size_t u = 0; u < n; ++u) p[t * n + u] /= total;
        T* o = out.data() + m[t] * c + off;
        for (std::size_t u = 0; u < n; ++u) {
          const T pu = p[t * n + u];
          const T* vr = vd + m[u] * c + off;
          for (std::size_t j = 0; j < dk; ++j) o[j] += pu * vr[j];
        }
      }
    }
  }

  return Tensor<T>::from_op(
      q.shape(), std::move(out), {q, k, v},
      [q, k, v, members = std::move(members), probs = std::move(probs), c, dk, n, heads,
       inv_sqrt](std::span<const T> g) {
        auto* gq = q.grad_sink();
        auto* gk = k.grad_sink();
        auto* gv = v.grad_sink();
        const T* qd = q.data().data();
        const T* kd = k.data().data();
        const T* vd = v.data().data();
        const std::size_t windows = members.size() / n;
        std::vector<T> dp(n), ds(n);
        for (std::size_t win = 0; win < windows; ++win) {
          const std::size_t* m = members.data() + win * n;
          for (std::size_t hd = 0; hd < heads; ++hd) {
            const std::size_t off = hd * dk;
            const T* p = probs.data() + (win * heads + hd) * n * n;
            for (std::size_t t = 0; t < n; ++t) {
              const T* go = g.data() + m[t] * c + off;
              T weighted = 0;
              for (std::size_t u = 0; u < n; ++u) {
                T acc = 0;
                const T* vr = vd + m[u] * c + off;
                for (std::size_t j = 0; j < dk; ++j) acc += go[j] * vr[j];
                dp[u] = acc;
                weighted += acc * p[t * n + u];
                if (gv) {
                  T* dv = gv->data() + m[u] * c + off;
                  const T pu = p[t * n + u];
                  for (std::size_t j = 0; j < dk; ++j) dv[j] += pu * go[j];
                }
              }
              for (std::size_t u = 0; u < n; ++u) ds[u] = p[t * n + u] * (dp[u] - weighted) * inv_sqrt;
              for (std::size_t u = 0; u < n; ++u) {
                if (gq) {
                  T* dq = gq->data() + m[t] * c + off;
                  const T* kr = kd + m[u] * c + off;
                  for (std::size_t j = 0; j < dk; ++j) dq[j] += ds[u] * kr[j];
                }
                if (gk) {
                  T* dkr = gk->data() + m[u] * c + off;
                  const T* qr = qd + m[t] * c + off;
                  for (std::size_t j = 0; j < dk; ++j) dkr[j] += ds[u] * qr[j];
                }
              }
            }
          }
        }
      });
}

/// Inverted dropout: zeroes each element with probability p and scales the
/// survivors by 1/(1-p). Masks come from `rng`, so a fixed seed reproduces them.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ArgumentError("dropout: rate must be in [0, 1)");
  if (p == 0.0) return x;
  const T keep_scale = T(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.bernoulli(p) ? T(0) : keep_scale;
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return Tensor<T>::from_op(x.shape(), std::move(out), {x}, [x, mask = std::move(mask)](std::span<const T> g) {
    if (auto* sink = x.grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) (*sink)[i] += g[i] * mask[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers

/// Per-pixel argmax over the class axis of [C×H×W]; ties go to the lower class.
template <typename T>
std::vector<std::uint8_t> argmax_channels(const Tensor<T>& logits) {
  detail::require_rank(logits, 3, "argmax_channels");
  const std::size_t c = logits.dim(0), hw = logits.dim(1) * logits.dim(2);
  std::vector<std::uint8_t> out(hw, 0);
  for (std::size_t p = 0; p < hw; ++p) {
    T best = logits.data()[p];
    for (std::size_t ch = 1; ch < c; ++ch) {
      const T v = logits.data()[ch * hw + p];
      if (v > best) {
        best = v;
        out[p] = static_cast<std::uint8_t>(ch);
      }
    }
  }
  return out;
}

}  // namespace mmseg
