#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <memory>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "snr/tensor.hpp"

namespace snr {

/// Integer pixel box, inclusive-exclusive: columns [x0, x1), rows [y0, y1).
struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

template <typename T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> inputs) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : inputs) {
    if (t == nullptr || !t->requires_grad()) continue;
    if (tape != nullptr && tape != t->tape()) throw ContractError("operands recorded on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* op) {
  // Inf and NaN are exactly the values whose exponent bits are all set; the
  // integer form of the test vectorizes.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exponent = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
  Bits bad = 0;
  for (const T x : v) bad |= (std::bit_cast<Bits>(x) & exponent) == exponent;
  if (bad) throw NumericalError(std::string(op) + ": produced a non-finite value");
}

template <typename T, typename Backward>
Tensor<T> emit(const char* op, Tape<T>* tape, Shape shape, std::vector<T> values, Backward&& backward) {
  check_finite(values, op);
  if (tape == nullptr) return Tensor<T>(std::move(shape), std::move(values));
  return tape->record(std::move(shape), std::move(values), std::forward<Backward>(backward));
}

// Calls f(parent_grad_buffer) when the parent wants a gradient.
template <typename T, typename F>
void accumulate(const NodePtr<T>& parent, F&& f) {
  if (parent && parent->requires_grad) f(parent->grad_buffer());
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw DimensionError(std::string(op) + ": shape " + to_string(a) + " vs " + to_string(b));
}

// (batch, spatial, channels) view of a rank-3 [h,w,c] or rank-4 [n,h,w,c] map.
struct MapGeometry {
  std::size_t batch, height, width, channels;
  std::size_t spatial() const { return height * width; }
};

inline MapGeometry map_geometry(const Shape& s, const char* op) {
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  throw DimensionError(std::string(op) + ": expected [h,w,c] or [n,h,w,c], got " + to_string(s));
}

// Shape of a per-(sample, channel) vector for a map: [c] or [n,c].
inline Shape channel_vector_shape(const Shape& map_shape) {
  if (map_shape.size() == 3) return {map_shape[2]};
  return {map_shape[0], map_shape[3]};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  const T *ap = a.data().data(), *bp = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] + bp[i];
  auto pa = a.node(), pb = b.node();
  return detail::emit("add", detail::tape_of({&a, &b}), a.shape(), std::move(out), [pa, pb](detail::Node<T>& self) {
    for (auto p : {pa, pb}) {
      detail::accumulate(p, [&](std::vector<T>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.size());
  const T *ap = a.data().data(), *bp = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] - bp[i];
  auto pa = a.node(), pb = b.node();
  return detail::emit("sub", detail::tape_of({&a, &b}), a.shape(), std::move(out), [pa, pb](detail::Node<T>& self) {
    detail::accumulate(pa, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    detail::accumulate(pb, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  const T *ap = a.data().data(), *bp = b.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] * bp[i];
  auto pa = a.node(), pb = b.node();
  return detail::emit("mul", detail::tape_of({&a, &b}), a.shape(), std::move(out), [pa, pb](detail::Node<T>& self) {
    detail::accumulate(pa, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    });
    detail::accumulate(pb, [&](std::vector<T>& g) {
#ifdef SNR_MUTANT_MUL_SIGN
      // Deliberately wrong, for checking that grad-check notices.
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i] * pa->value[i];
#else
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa->value[i];
#endif
    });
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  std::vector<T> out(a.size());
  const T* ap = a.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ap[i] * s;
  auto pa = a.node();
  return detail::emit("scale", detail::tape_of({&a}), a.shape(), std::move(out), [pa, s](detail::Node<T>& self) {
    detail::accumulate(pa, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
  });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, b);
}
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) {
  return sub(a, b);
}
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) {
  return mul(a, b);
}

// ---------------------------------------------------------------------------
// Activations

namespace detail {

// Clamped to the open interval (0, 1): the exact logistic value never
// reaches either endpoint, only its rounding does.
template <typename T>
T sigmoid_value(T x) {
  T s;
  if (x >= T(0)) {
    s = T(1) / (T(1) + std::exp(-x));
  } else {
    const T e = std::exp(x);
    s = e / (T(1) + e);
  }
  return std::clamp(s, std::numeric_limits<T>::denorm_min(), T(1) - std::numeric_limits<T>::epsilon() / T(2));
}

template <typename T>
T softplus_value(T x) {
  if (x > T(30)) return x;
  if (x < T(-30)) return std::exp(x);
  return std::log1p(std::exp(x));
}

}  // namespace detail

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  const T* xp = x.data().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xp[i] > T(0) ? xp[i] : T(0);
  auto px = x.node();
  return detail::emit("relu", detail::tape_of({&x}), x.shape(), std::move(out), [px](detail::Node<T>& self) {
    detail::accumulate(px, [&](std::vector<T>& g) {
      const T* xv = px->value.data();
      const T* up = self.grad.data();
      T* gp = g.data();
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += xv[i] > T(0) ? up[i] : T(0);
    });
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid_value(x[i]);
  auto px = x.node();
  return detail::emit("sigmoid", detail::tape_of({&x}), x.shape(), std::move(out), [px](detail::Node<T>& self) {
    detail::accumulate(px, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const T s = self.value[i];
        g[i] += self.grad[i] * s * (T(1) - s);
      }
    });
  });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::softplus_value(x[i]);
  auto px = x.node();
  return detail::emit("softplus", detail::tape_of({&x}), x.shape(), std::move(out), [px](detail::Node<T>& self) {
    detail::accumulate(px, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * detail::sigmoid_value(px->value[i]);
    });
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: cannot multiply " + to_string(a.shape()) + " by " + to_string(b.shape()));
  }
  const auto m = static_cast<Eigen::Index>(a.dim(0)), k = static_cast<Eigen::Index>(a.dim(1)),
             n = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(static_cast<std::size_t>(m * n));
  detail::MatMap<T>(out.data(), m, n).noalias() =
      detail::ConstMatMap<T>(a.data().data(), m, k) * detail::ConstMatMap<T>(b.data().data(), k, n);
  auto pa = a.node(), pb = b.node();
  return detail::emit("matmul", detail::tape_of({&a, &b}), Shape{a.dim(0), b.dim(1)}, std::move(out),
                      [pa, pb, m, k, n](detail::Node<T>& self) {
                        detail::ConstMatMap<T> dc(self.grad.data(), m, n);
                        detail::accumulate(pa, [&](std::vector<T>& g) {
                          detail::MatMap<T>(g.data(), m, k).noalias() +=
                              dc * detail::ConstMatMap<T>(pb->value.data(), k, n).transpose();
                        });
                        detail::accumulate(pb, [&](std::vector<T>& g) {
                          detail::MatMap<T>(g.data(), k, n).noalias() +=
                              detail::ConstMatMap<T>(pa->value.data(), m, k).transpose() * dc;
                        });
                      });
}

/// Fully connected layer y = x·Wᵀ + b for x of shape [in] or [n, in],
/// W of shape [out, in] and b of shape [out] (b may be undefined).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  if (w.rank() != 2 || (x.rank() != 1 && x.rank() != 2) || x.shape().back() != w.dim(1)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(w.shape()));
  }
  if (b.defined() && (b.rank() != 1 || b.dim(0) != w.dim(0))) {
    throw DimensionError("linear: bias " + to_string(b.shape()) + " vs weight " + to_string(w.shape()));
  }
  const auto rows = static_cast<Eigen::Index>(x.rank() == 1 ? 1 : x.dim(0));
  const auto in = static_cast<Eigen::Index>(w.dim(1)), outd = static_cast<Eigen::Index>(w.dim(0));
  std::vector<T> out(static_cast<std::size_t>(rows * outd));
  detail::MatMap<T> y(out.data(), rows, outd);
  y.noalias() = detail::ConstMatMap<T>(x.data().data(), rows, in) *
                detail::ConstMatMap<T>(w.data().data(), outd, in).transpose();
  if (b.defined()) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index o = 0; o < outd; ++o) y(r, o) += b[static_cast<std::size_t>(o)];
    }
  }
  Shape shape = x.rank() == 1 ? Shape{w.dim(0)} : Shape{x.dim(0), w.dim(0)};
  auto px = x.node(), pw = w.node(), pb = b.node();
  return detail::emit("linear", detail::tape_of({&x, &w, &b}), std::move(shape), std::move(out),
                      [px, pw, pb, rows, in, outd](detail::Node<T>& self) {
                        detail::ConstMatMap<T> dy(self.grad.data(), rows, outd);
                        detail::accumulate(px, [&](std::vector<T>& g) {
                          detail::MatMap<T>(g.data(), rows, in).noalias() +=
                              dy * detail::ConstMatMap<T>(pw->value.data(), outd, in);
                        });
                        detail::accumulate(pw, [&](std::vector<T>& g) {
                          detail::MatMap<T>(g.data(), outd, in).noalias() +=
                              dy.transpose() * detail::ConstMatMap<T>(px->value.data(), rows, in);
                        });
                        detail::accumulate(pb, [&](std::vector<T>& g) {
                          for (Eigen::Index r = 0; r < rows; ++r) {
                            for (Eigen::Index o = 0; o < outd; ++o) g[static_cast<std::size_t>(o)] += dy(r, o);
                          }
                        });
                      });
}

// ---------------------------------------------------------------------------
// Convolution (channel-last, cross-correlation)

/// x: [h,w,cin] or [n,h,w,cin]; kernel: [kh,kw,cin,cout]. Output spatial size
/// is floor((h + 2·pad − kh)/stride) + 1 per axis.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, std::size_t stride = 1, std::size_t pad = 0) {
  const auto g = detail::map_geometry(x.shape(), "conv2d");
  if (kernel.rank() != 4 || kernel.dim(2) != g.channels) {
    throw DimensionError("conv2d: kernel " + to_string(kernel.shape()) + " does not match input " +
                         to_string(x.shape()));
  }
  const std::size_t kh = kernel.dim(0), kw = kernel.dim(1), cin = g.channels, cout = kernel.dim(3);
  if (stride == 0 || kh == 0 || kw == 0 || kh > g.height + 2 * pad || kw > g.width + 2 * pad) {
    throw DimensionError("conv2d: invalid geometry, kernel " + to_string(kernel.shape()) + " on input " +
                         to_string(x.shape()) + " with pad " + std::to_string(pad) + ", stride " +
                         std::to_string(stride));
  }
  const std::size_t oh = (g.height + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (g.width + 2 * pad - kw) / stride + 1;
  const std::size_t rows = g.batch * oh * ow, patch = kh * kw * cin;

  auto cols = std::make_shared<std::vector<T>>(rows * patch, T(0));
  const auto& xv = x.values();
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        T* dst = cols->data() + ((n * oh + oy) * ow + ox) * patch;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            const T* src = xv.data() + ((n * g.height + static_cast<std::size_t>(iy)) * g.width +
                                        static_cast<std::size_t>(ix)) * cin;
            std::copy(src, src + cin, dst + (ky * kw + kx) * cin);
          }
        }
      }
    }
  }
  const auto R = static_cast<Eigen::Index>(rows), P = static_cast<Eigen::Index>(patch),
             C = static_cast<Eigen::Index>(cout);
  std::vector<T> out(rows * cout);
  detail::MatMap<T>(out.data(), R, C).noalias() =
      detail::ConstMatMap<T>(cols->data(), R, P) * detail::ConstMatMap<T>(kernel.data().data(), P, C);

  Shape shape = x.rank() == 3 ? Shape{oh, ow, cout} : Shape{g.batch, oh, ow, cout};
  auto px = x.node(), pk = kernel.node();
  return detail::emit(
      "conv2d", detail::tape_of({&x, &kernel}), std::move(shape), std::move(out),
      [px, pk, cols, g, kh, kw, cin, oh, ow, stride, pad, R, P, C](detail::Node<T>& self) {
        detail::ConstMatMap<T> dy(self.grad.data(), R, C);
        detail::accumulate(pk, [&](std::vector<T>& gk) {
          detail::MatMap<T>(gk.data(), P, C).noalias() += detail::ConstMatMap<T>(cols->data(), R, P).transpose() * dy;
        });
        detail::accumulate(px, [&](std::vector<T>& gx) {
          std::vector<T> dcols(static_cast<std::size_t>(R * P));
          detail::MatMap<T>(dcols.data(), R, P).noalias() =
              dy * detail::ConstMatMap<T>(pk->value.data(), P, C).transpose();
          const std::size_t patch = static_cast<std::size_t>(P);
          for (std::size_t n = 0; n < g.batch; ++n) {
            for (std::size_t oy = 0; oy < oh; ++oy) {
              for (std::size_t ox = 0; ox < ow; ++ox) {
                const T* src = dcols.data() + ((n * oh + oy) * ow + ox) * patch;
                for (std::size_t ky = 0; ky < kh; ++ky) {
                  const std::ptrdiff_t iy =
                      static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                  for (std::size_t kx = 0; kx < kw; ++kx) {
                    const std::ptrdiff_t ix =
                        static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
                    T* dst = gx.data() + ((n * g.height + static_cast<std::size_t>(iy)) * g.width +
                                          static_cast<std::size_t>(ix)) * cin;
                    const T* s = src + (ky * kw + kx) * cin;
                    for (std::size_t c = 0; c < cin; ++c) dst[c] += s[c];
                  }
                }
              }
            }
          }
        });
      });
}

// ---------------------------------------------------------------------------
// Channel-wise ops on [h,w,c] / [n,h,w,c] maps

/// x + b with b of shape [c] added at every position of the last axis.
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.rank() == 0 || b.rank() != 1 || b.dim(0) != x.shape().back()) {
    throw DimensionError("add_channel_bias: " + to_string(x.shape()) + " vs " + to_string(b.shape()));
  }
  const std::size_t c = b.dim(0), positions = c ? x.size() / c : 0;
  std::vector<T> out(x.values());
  const T* bp = b.data().data();
  for (std::size_t p = 0; p < positions; ++p) {
    T* o = out.data() + p * c;
    for (std::size_t k = 0; k < c; ++k) o[k] += bp[k];
  }
  auto px = x.node(), pb = b.node();
  return detail::emit("add_channel_bias", detail::tape_of({&x, &b}), x.shape(), std::move(out),
                      [px, pb, c, positions](detail::Node<T>& self) {
                        detail::accumulate(px, [&](std::vector<T>& g) {
                          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                        });
                        detail::accumulate(pb, [&](std::vector<T>& g) {
                          for (std::size_t p = 0; p < positions; ++p) {
                            const T* d = self.grad.data() + p * c;
                            for (std::size_t k = 0; k < c; ++k) g[k] += d[k];
                          }
                        });
                      });
}

/// γ_k · x(..., k) + β_k with γ, β of shape [c].
template <typename T>
Tensor<T> channel_affine(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta) {
  if (x.rank() == 0 || gamma.shape() != Shape{x.shape().back()} || beta.shape() != gamma.shape()) {
    throw DimensionError("channel_affine: " + to_string(x.shape()) + " with gamma " + to_string(gamma.shape()) +
                         ", beta " + to_string(beta.shape()));
  }
  const std::size_t c = gamma.dim(0), positions = c ? x.size() / c : 0;
  std::vector<T> out(x.size());
  const T *xp = x.data().data(), *gp = gamma.data().data(), *bp = beta.data().data();
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t k = 0; k < c; ++k) out[p * c + k] = gp[k] * xp[p * c + k] + bp[k];
  }
  auto px = x.node(), pg = gamma.node(), pb = beta.node();
  return detail::emit("channel_affine", detail::tape_of({&x, &gamma, &beta}), x.shape(), std::move(out),
                      [px, pg, pb, c, positions](detail::Node<T>& self) {
                        const T* d = self.grad.data();
                        detail::accumulate(px, [&](std::vector<T>& g) {
                          const T* gm = pg->value.data();
                          for (std::size_t p = 0; p < positions; ++p)
                            for (std::size_t k = 0; k < c; ++k) g[p * c + k] += d[p * c + k] * gm[k];
                        });
                        detail::accumulate(pg, [&](std::vector<T>& g) {
                          const T* xv = px->value.data();
                          for (std::size_t p = 0; p < positions; ++p)
                            for (std::size_t k = 0; k < c; ++k) g[k] += d[p * c + k] * xv[p * c + k];
                        });
                        detail::accumulate(pb, [&](std::vector<T>& g) {
                          for (std::size_t p = 0; p < positions; ++p)
                            for (std::size_t k = 0; k < c; ++k) g[k] += d[p * c + k];
                        });
                      });
}

/// out(:,:,k) = a_k · x(:,:,k). For a batch [n,h,w,c], `a` is [n,c].
template <typename T>
Tensor<T> scale_channels(const Tensor<T>& x, const Tensor<T>& a) {
  const auto g = detail::map_geometry(x.shape(), "scale_channels");
  if (a.shape() != detail::channel_vector_shape(x.shape())) {
    throw DimensionError("scale_channels: gate " + to_string(a.shape()) + " does not match map " +
                         to_string(x.shape()));
  }
  const std::size_t hw = g.spatial(), c = g.channels;
  const T* xp = x.data().data();
  const T* ap = a.data().data();
  std::vector<T> out(x.size());
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t base = (n * hw + p) * c;
      for (std::size_t k = 0; k < c; ++k) out[base + k] = ap[n * c + k] * xp[base + k];
    }
  }
  auto px = x.node(), pa = a.node();
  return detail::emit("scale_channels", detail::tape_of({&x, &a}), x.shape(), std::move(out),
                      [px, pa, g, hw, c](detail::Node<T>& self) {
                        detail::accumulate(px, [&](std::vector<T>& gx) {
                          for (std::size_t n = 0; n < g.batch; ++n)
                            for (std::size_t p = 0; p < hw; ++p)
                              for (std::size_t k = 0; k < c; ++k) {
                                const std::size_t i = (n * hw + p) * c + k;
                                gx[i] += self.grad[i] * pa->value[n * c + k];
                              }
                        });
                        detail::accumulate(pa, [&](std::vector<T>& ga) {
                          for (std::size_t n = 0; n < g.batch; ++n)
                            for (std::size_t p = 0; p < hw; ++p)
                              for (std::size_t k = 0; k < c; ++k) {
                                const std::size_t i = (n * hw + p) * c + k;
                                ga[n * c + k] += self.grad[i] * px->value[i];
                              }
                        });
                      });
}

/// Per-channel mean over spatial positions: [h,w,c] → [c], [n,h,w,c] → [n,c].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  const auto g = detail::map_geometry(x.shape(), "global_avg_pool");
  if (g.spatial() == 0) throw DimensionError("global_avg_pool: empty spatial extent");
  const std::size_t hw = g.spatial(), c = g.channels;
  std::vector<T> out(g.batch * c, T(0));
  for (std::size_t n = 0; n < g.batch; ++n) {
    T* acc = out.data() + n * c;
    for (std::size_t p = 0; p < hw; ++p) {
      const T* src = x.data().data() + (n * hw + p) * c;
      for (std::size_t k = 0; k < c; ++k) acc[k] += src[k];
    }
    for (std::size_t k = 0; k < c; ++k) acc[k] /= static_cast<T>(hw);
  }
  auto px = x.node();
  return detail::emit("global_avg_pool", detail::tape_of({&x}), detail::channel_vector_shape(x.shape()),
                      std::move(out), [px, g, hw, c](detail::Node<T>& self) {
                        detail::accumulate(px, [&](std::vector<T>& gx) {
                          const T inv = T(1) / static_cast<T>(hw);
                          for (std::size_t n = 0; n < g.batch; ++n)
                            for (std::size_t p = 0; p < hw; ++p)
                              for (std::size_t k = 0; k < c; ++k)
                                gx[(n * hw + p) * c + k] += self.grad[n * c + k] * inv;
                        });
                      });
}

/// Per-channel mean over the pixels of `box` in a single [h,w,c] map.
template <typename T>
Tensor<T> region_avg_pool(const Tensor<T>& x, const Box& box) {
  if (x.rank() != 3) throw DimensionError("region_avg_pool: expected [h,w,c], got " + to_string(x.shape()));
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (!(box.x0 < box.x1 && box.x1 <= w && box.y0 < box.y1 && box.y1 <= h)) {
    throw GeometryError("region_avg_pool: box (" + std::to_string(box.x0) + "," + std::to_string(box.y0) + "," +
                        std::to_string(box.x1) + "," + std::to_string(box.y1) + ") invalid for map " +
                        to_string(x.shape()));
  }
  const std::size_t count = (box.x1 - box.x0) * (box.y1 - box.y0);
  std::vector<T> out(c, T(0));
  for (std::size_t y = box.y0; y < box.y1; ++y) {
    for (std::size_t xx = box.x0; xx < box.x1; ++xx) {
      const T* src = x.data().data() + (y * w + xx) * c;
      for (std::size_t k = 0; k < c; ++k) out[k] += src[k];
    }
  }
  for (std::size_t k = 0; k < c; ++k) out[k] /= static_cast<T>(count);
  auto px = x.node();
  return detail::emit("region_avg_pool", detail::tape_of({&x}), Shape{c}, std::move(out),
                      [px, box, w, c, count](detail::Node<T>& self) {
                        detail::accumulate(px, [&](std::vector<T>& gx) {
                          const T inv = T(1) / static_cast<T>(count);
                          for (std::size_t y = box.y0; y < box.y1; ++y)
                            for (std::size_t xx = box.x0; xx < box.x1; ++xx)
                              for (std::size_t k = 0; k < c; ++k) gx[(y * w + xx) * c + k] += self.grad[k] * inv;
                        });
                      });
}

template <typename T>
struct ChannelStats {
  Tensor<T> mu;
  Tensor<T> sigma;
};

/// Population mean and sqrt(variance + eps) per sample and channel.
template <typename T>
ChannelStats<T> channel_stats(const Tensor<T>& x, T eps) {
  const auto g = detail::map_geometry(x.shape(), "channel_stats");
  if (g.spatial() == 0) throw DimensionError("channel_stats: empty spatial extent");
  const std::size_t hw = g.spatial(), c = g.channels;
  const T* xp = x.data().data();
  std::vector<T> mu(g.batch * c, T(0)), sigma(g.batch * c, T(0));
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) mu[n * c + k] += xp[(n * hw + p) * c + k];
    for (std::size_t k = 0; k < c; ++k) mu[n * c + k] /= static_cast<T>(hw);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) {
        const T d = xp[(n * hw + p) * c + k] - mu[n * c + k];
        sigma[n * c + k] += d * d;
      }
    for (std::size_t k = 0; k < c; ++k) sigma[n * c + k] = std::sqrt(sigma[n * c + k] / static_cast<T>(hw) + eps);
  }
  Tape<T>* tape = detail::tape_of({&x});
  auto px = x.node();
  const Shape vshape = detail::channel_vector_shape(x.shape());
  Tensor<T> mu_t = detail::emit("channel_stats", tape, vshape, mu, [px, g, hw, c](detail::Node<T>& self) {
    detail::accumulate(px, [&](std::vector<T>& gx) {
      const T inv = T(1) / static_cast<T>(hw);
      for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t p = 0; p < hw; ++p)
          for (std::size_t k = 0; k < c; ++k) gx[(n * hw + p) * c + k] += self.grad[n * c + k] * inv;
    });
  });
  Tensor<T> sigma_t = detail::emit("channel_stats", tape, vshape, std::move(sigma),
                                   [px, g, hw, c, mu = std::move(mu)](detail::Node<T>& self) {
                                     detail::accumulate(px, [&](std::vector<T>& gx) {
                                       for (std::size_t n = 0; n < g.batch; ++n)
                                         for (std::size_t p = 0; p < hw; ++p)
                                           for (std::size_t k = 0; k < c; ++k) {
                                             const std::size_t i = (n * hw + p) * c + k, j = n * c + k;
                                             gx[i] += self.grad[j] * (px->value[i] - mu[j]) /
                                                      (static_cast<T>(hw) * self.value[j]);
                                           }
                                     });
                                   });
  return {std::move(mu_t), std::move(sigma_t)};
}

/// (x − μ)/σ per sample and channel, with σ = sqrt(var + eps). Fused so the
/// backward pass is one sweep.
template <typename T>
Tensor<T> normalize_channels(const Tensor<T>& x, T eps) {
  const auto g = detail::map_geometry(x.shape(), "normalize_channels");
  if (g.spatial() == 0) throw DimensionError("normalize_channels: empty spatial extent");
  const std::size_t hw = g.spatial(), c = g.channels;
  const T* xp = x.data().data();
  std::vector<T> mu(g.batch * c, T(0)), inv_sigma(g.batch * c, T(0));
  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) mu[n * c + k] += xp[(n * hw + p) * c + k];
    for (std::size_t k = 0; k < c; ++k) mu[n * c + k] /= static_cast<T>(hw);
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) {
        const T d = xp[(n * hw + p) * c + k] - mu[n * c + k];
        inv_sigma[n * c + k] += d * d;
      }
    for (std::size_t k = 0; k < c; ++k)
      inv_sigma[n * c + k] = T(1) / std::sqrt(inv_sigma[n * c + k] / static_cast<T>(hw) + eps);
  }
  std::vector<T> out(x.size());
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t p = 0; p < hw; ++p)
      for (std::size_t k = 0; k < c; ++k) {
        const std::size_t i = (n * hw + p) * c + k;
        out[i] = (xp[i] - mu[n * c + k]) * inv_sigma[n * c + k];
      }
  auto px = x.node();
  return detail::emit("normalize_channels", detail::tape_of({&x}), x.shape(), std::move(out),
                      [px, g, hw, c, inv_sigma = std::move(inv_sigma)](detail::Node<T>& self) {
                        detail::accumulate(px, [&](std::vector<T>& gx) {
                          // dx = (1/σ)(dy − mean(dy) − x̂·mean(dy·x̂))
                          std::vector<T> mean_g(c), mean_gx(c);
                          for (std::size_t n = 0; n < g.batch; ++n) {
                            std::fill(mean_g.begin(), mean_g.end(), T(0));
                            std::fill(mean_gx.begin(), mean_gx.end(), T(0));
                            for (std::size_t p = 0; p < hw; ++p)
                              for (std::size_t k = 0; k < c; ++k) {
                                const std::size_t i = (n * hw + p) * c + k;
                                mean_g[k] += self.grad[i];
                                mean_gx[k] += self.grad[i] * self.value[i];
                              }
                            for (std::size_t k = 0; k < c; ++k) {
                              mean_g[k] /= static_cast<T>(hw);
                              mean_gx[k] /= static_cast<T>(hw);
                            }
                            for (std::size_t p = 0; p < hw; ++p)
                              for (std::size_t k = 0; k < c; ++k) {
                                const std::size_t i = (n * hw + p) * c + k;
                                gx[i] += inv_sigma[n * c + k] *
                                         (self.grad[i] - mean_g[k] - self.value[i] * mean_gx[k]);
                              }
                          }
                        });
                      });
}

// ---------------------------------------------------------------------------
// Softmax, entropy, reductions

/// Max-subtracted softmax along the last axis.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("softmax: need K >= 1");
  const std::size_t k = x.shape().back(), rows = x.size() / k;
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = x.data().data() + r * k;
    T* dst = out.data() + r * k;
    const T m = *std::max_element(src, src + k);
    T s = T(0);
    for (std::size_t j = 0; j < k; ++j) s += dst[j] = std::exp(src[j] - m);
    for (std::size_t j = 0; j < k; ++j) dst[j] /= s;
  }
  auto px = x.node();
  return detail::emit("softmax", detail::tape_of({&x}), x.shape(), std::move(out),
                      [px, rows, k](detail::Node<T>& self) {
                        detail::accumulate(px, [&](std::vector<T>& gx) {
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* p = self.value.data() + r * k;
                            const T* dy = self.grad.data() + r * k;
                            T dot = T(0);
                            for (std::size_t j = 0; j < k; ++j) dot += dy[j] * p[j];
                            for (std::size_t j = 0; j < k; ++j) gx[r * k + j] += p[j] * (dy[j] - dot);
                          }
                        });
                      });
}

inline constexpr double kEntropyClamp = 1e-12;

/// H(p) = −Σ p_k ln max(p_k, 1e-12) along the last axis; [K] → scalar,
/// [..., K] → [...]. Rows must be probability vectors (sum 1 ± 1e-5).
template <typename T>
Tensor<T> entropy(const Tensor<T>& p) {
  if (p.rank() == 0 || p.shape().back() == 0) throw DimensionError("entropy: need K >= 1");
  const std::size_t k = p.shape().back(), rows = p.size() / k;
  const T clamp = static_cast<T>(kEntropyClamp);
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    T total = T(0), h = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      const T v = p[r * k + j];
      if (!(v >= T(0))) throw ContractError("entropy: negative probability");
      total += v;
      h -= v * std::log(std::max(v, clamp));
    }
    if (std::abs(total - T(1)) > T(1e-5)) {
      throw ContractError("entropy: probabilities sum to " + std::to_string(static_cast<double>(total)));
    }
    out[r] = h;
  }
  Shape shape(p.shape().begin(), p.shape().end() - 1);
  auto pp = p.node();
  return detail::emit("entropy", detail::tape_of({&p}), std::move(shape), std::move(out),
                      [pp, rows, k, clamp](detail::Node<T>& self) {
                        detail::accumulate(pp, [&](std::vector<T>& g) {
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < k; ++j) {
                              const T v = pp->value[r * k + j];
                              const T d = v > clamp ? -(std::log(v) + T(1)) : -std::log(clamp);
                              g[r * k + j] += self.grad[r] * d;
                            }
                        });
                      });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = T(0);
  for (const T v : x.data()) s += v;
  auto px = x.node();
  return detail::emit("sum", detail::tape_of({&x}), Shape{}, std::vector<T>{s}, [px](detail::Node<T>& self) {
    detail::accumulate(px, [&](std::vector<T>& g) {
      for (auto& v : g) v += self.grad[0];
    });
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw DimensionError("mean: empty tensor");
  T s = T(0);
  for (const T v : x.data()) s += v;
  const T n = static_cast<T>(x.size());
  auto px = x.node();
  return detail::emit("mean", detail::tape_of({&x}), Shape{}, std::vector<T>{s / n}, [px, n](detail::Node<T>& self) {
    detail::accumulate(px, [&](std::vector<T>& g) {
      for (auto& v : g) v += self.grad[0] / n;
    });
  });
}

/// Mean over the last axis: [..., m] → [...].
template <typename T>
Tensor<T> mean_last(const Tensor<T>& x) {
  if (x.rank() == 0 || x.shape().back() == 0) throw DimensionError("mean_last: empty last axis");
  const std::size_t m = x.shape().back(), rows = x.size() / m;
  std::vector<T> out(rows, T(0));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < m; ++j) out[r] += x[r * m + j];
    out[r] /= static_cast<T>(m);
  }
  Shape shape(x.shape().begin(), x.shape().end() - 1);
  auto px = x.node();
  return detail::emit("mean_last", detail::tape_of({&x}), std::move(shape), std::move(out),
                      [px, m, rows](detail::Node<T>& self) {
                        detail::accumulate(px, [&](std::vector<T>& g) {
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < m; ++j) g[r * m + j] += self.grad[r] / static_cast<T>(m);
                        });
                      });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  auto px = x.node();
  return detail::emit("reshape", detail::tape_of({&x}), std::move(shape), x.values(), [px](detail::Node<T>& self) {
    detail::accumulate(px, [&](std::vector<T>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
  });
}

/// Stacks equally-shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("stack: no tensors");
  const Shape inner = parts.front().shape();
  std::vector<T> out;
  out.reserve(parts.size() * numel(inner));
  Tape<T>* tape = nullptr;
  std::vector<detail::NodePtr<T>> nodes;
  for (const auto& p : parts) {
    detail::require_same_shape(inner, p.shape(), "stack");
    out.insert(out.end(), p.data().begin(), p.data().end());
    if (Tape<T>* t = detail::tape_of({&p})) {
      if (tape != nullptr && tape != t) throw ContractError("stack: operands recorded on different tapes");
      tape = t;
    }
    nodes.push_back(p.node());
  }
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  const std::size_t block = numel(inner);
  return detail::emit("stack", tape, std::move(shape), std::move(out),
                      [nodes = std::move(nodes), block](detail::Node<T>& self) {
                        for (std::size_t b = 0; b < nodes.size(); ++b) {
                          detail::accumulate(nodes[b], [&](std::vector<T>& g) {
                            for (std::size_t i = 0; i < block; ++i) g[i] += self.grad[b * block + i];
                          });
                        }
                      });
}

/// Mean over rows of −log softmax(logits)[label]; logits [K] or [n,K].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 1 && logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be [K] or [n,K], got " + to_string(logits.shape()));
  }
  const std::size_t k = logits.shape().back(), rows = logits.size() / k;
  if (labels.size() != rows) throw DimensionError("cross_entropy: label count does not match logits rows");
  std::vector<T> probs(logits.size());
  T loss = T(0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[r]) + " outside [0," + std::to_string(k) +
                          ")");
    }
    const T* z = logits.data().data() + r * k;
    const T m = *std::max_element(z, z + k);
    T s = T(0);
    for (std::size_t j = 0; j < k; ++j) s += probs[r * k + j] = std::exp(z[j] - m);
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= s;
    loss += (m + std::log(s)) - z[labels[r]];
  }
  loss /= static_cast<T>(rows);
  auto pl = logits.node();
  return detail::emit("cross_entropy", detail::tape_of({&logits}), Shape{}, std::vector<T>{loss},
                      [pl, probs = std::move(probs), labels, rows, k](detail::Node<T>& self) {
                        detail::accumulate(pl, [&](std::vector<T>& g) {
                          const T s = self.grad[0] / static_cast<T>(rows);
                          for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < k; ++j)
                              g[r * k + j] += s * (probs[r * k + j] - (j == labels[r] ? T(1) : T(0)));
                        });
                      });
}

/// Row-wise argmax of a [n,K] (or [K]) tensor, ties to the lowest index.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& x) {
  const std::size_t k = x.shape().back(), rows = x.size() / k;
  std::vector<std::size_t> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (x[r * k + j] > x[r * k + best]) best = j;
    out[r] = best;
  }
  return out;
}

}  // namespace snr
