#pragma once

// Differentiable elementwise, reduction and normalization ops.
//
// Binary ops accept either equal shapes or a rank-1 right operand of length
// shape[0] broadcast along the leading (channel) axis.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "karina/engine/tensor.hpp"

namespace karina {

namespace detail {

enum class Broadcast { Same, Channel };

template <class T>
Broadcast check_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::Same;
  if (b.rank() == 1 && a.rank() >= 1 && b.dim(0) == a.dim(0)) return Broadcast::Channel;
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                   to_string(b.shape()) + " (right operand must match or be [" +
                   (a.rank() ? std::to_string(a.dim(0)) : std::string("?")) + "])");
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto mode = detail::check_binary(a, b, "add");
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  const std::size_t inner = mode == detail::Broadcast::Same ? av.size() : av.size() / b.dim(0);
  if (mode == detail::Broadcast::Same) {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  } else {
    for (std::size_t c = 0; c < b.dim(0); ++c)
      for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] = av[c * inner + i] + bv[c];
  }
  return Tensor<T>::make_result(
      a.shape(), std::move(out), "add", {a.node(), b.node()}, [mode, inner](auto& self) {
        auto& ga = self.inputs[0];
        auto& gb = self.inputs[1];
        if (ga->requires_grad) {
          auto& g = ga->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (gb->requires_grad) {
          auto& g = gb->ensure_grad();
          if (mode == detail::Broadcast::Same) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
          } else {
            for (std::size_t c = 0; c < g.size(); ++c) {
              T s = 0;
              for (std::size_t i = 0; i < inner; ++i) s += self.grad[c * inner + i];
              g[c] += s;
            }
          }
        }
      });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto mode = detail::check_binary(a, b, "mul");
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  const std::size_t inner = mode == detail::Broadcast::Same ? av.size() : av.size() / b.dim(0);
  if (mode == detail::Broadcast::Same) {
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  } else {
    for (std::size_t c = 0; c < b.dim(0); ++c)
      for (std::size_t i = 0; i < inner; ++i) out[c * inner + i] = av[c * inner + i] * bv[c];
  }
  return Tensor<T>::make_result(
      a.shape(), std::move(out), "mul", {a.node(), b.node()}, [mode, inner](auto& self) {
        auto& na = self.inputs[0];
        auto& nb = self.inputs[1];
        const auto& A = *na->value;
        const auto& B = *nb->value;
        if (na->requires_grad) {
          auto& g = na->ensure_grad();
          if (mode == detail::Broadcast::Same) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B[i];
          } else {
            for (std::size_t c = 0; c < B.size(); ++c)
              for (std::size_t i = 0; i < inner; ++i)
                g[c * inner + i] += self.grad[c * inner + i] * B[c];
          }
        }
        if (nb->requires_grad) {
          auto& g = nb->ensure_grad();
          if (mode == detail::Broadcast::Same) {
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A[i];
          } else {
            for (std::size_t c = 0; c < g.size(); ++c) {
              T s = 0;
              for (std::size_t i = 0; i < inner; ++i)
                s += self.grad[c * inner + i] * A[c * inner + i];
              g[c] += s;
            }
          }
        }
      });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  const auto av = a.data();
  const auto bv = b.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), "sub", {a.node(), b.node()},
                                [](auto& self) {
                                  if (self.inputs[0]->requires_grad) {
                                    auto& g = self.inputs[0]->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (self.inputs[1]->requires_grad) {
                                    auto& g = self.inputs[1]->ensure_grad();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  const auto av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * s;
  return Tensor<T>::make_result(a.shape(), std::move(out), "scale", {a.node()}, [s](auto& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
  });
}

namespace detail {

/// Elementwise op with derivative computed from the saved input.
template <class T, class F, class DF>
Tensor<T> pointwise(const Tensor<T>& x, const char* op, F f, DF df) {
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  return Tensor<T>::make_result(x.shape(), std::move(out), op, {x.node()}, [df](auto& self) {
    const auto& X = *self.inputs[0]->value;
    auto& g = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * df(X[i]);
  });
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace detail

/// Exact GELU: x * Phi(x) with the erf form of the normal CDF.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
  return detail::pointwise(
      x, "gelu", [](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [](T v) {
        return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) +
               v * inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
      });
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::pointwise(
      x, "sigmoid", [](T v) { return detail::sigmoid_scalar(v); },
      [](T v) {
        const T s = detail::sigmoid_scalar(v);
        return s * (T(1) - s);
      });
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  return detail::pointwise(
      x, "relu", [](T v) { return v > T(0) ? v : T(0); },
      [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> square(const Tensor<T>& x) {
  return detail::pointwise(x, "square", [](T v) { return v * v; }, [](T v) { return T(2) * v; });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (T v : x.data()) s += v;
  return Tensor<T>::make_result(Shape{1}, {s}, "sum", {x.node()}, [](auto& self) {
    auto& g = self.inputs[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Per-channel spatial mean of [C,H,W] (or [N,C,H,W]) giving [C] (or [N,C]).
///
/// Each plane is reduced as column sums first, then the column sums are added
/// in sorted order, so a longitude roll of the input yields a bit-identical mean.
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 3 && x.rank() != 4)
    throw ShapeError("global_avg_pool expects [C,H,W] or [N,C,H,W], got " + to_string(x.shape()));
  const std::size_t H = x.dim(x.rank() - 2);
  const std::size_t W = x.dim(x.rank() - 1);
  if (H == 0 || W == 0) throw ShapeError("global_avg_pool: zero spatial extent");
  const std::size_t planes = x.numel() / (H * W);
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  const auto xv = x.data();
  std::vector<T> out(planes);
  std::vector<T> cols(W);
  for (std::size_t p = 0; p < planes; ++p) {
    std::fill(cols.begin(), cols.end(), T(0));
    const T* src = xv.data() + p * H * W;
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) cols[w] += src[h * W + w];
    std::sort(cols.begin(), cols.end());
    T s = 0;
    for (T v : cols) s += v;
    out[p] = s / static_cast<T>(H * W);
  }
  const std::size_t hw = H * W;
  return Tensor<T>::make_result(std::move(out_shape), std::move(out), "global_avg_pool",
                                {x.node()}, [hw](auto& self) {
                                  auto& g = self.inputs[0]->ensure_grad();
                                  const T inv = T(1) / static_cast<T>(hw);
                                  for (std::size_t p = 0; p < self.grad.size(); ++p) {
                                    const T d = self.grad[p] * inv;
                                    for (std::size_t i = 0; i < hw; ++i) g[p * hw + i] += d;
                                  }
                                });
}

/// Normalizes the channel vector at every spatial point of x[C,...] to zero
/// mean and unit (biased) variance, then applies gamma[C], beta[C].
template <class T>
Tensor<T> layer_norm_channels(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                              T eps = T(1e-6)) {
  if (x.rank() < 1 || x.dim(0) == 0) throw ShapeError("layer_norm_channels: need C >= 1");
  const std::size_t C = x.dim(0);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
    throw ShapeError("layer_norm_channels: gamma/beta must be [" + std::to_string(C) + "], got " +
                     to_string(gamma.shape()) + " / " + to_string(beta.shape()));
  if (!(eps > T(0))) throw std::invalid_argument("layer_norm_channels: eps must be > 0");
  const std::size_t P = x.numel() / C;
  const auto xv = x.data();
  const auto gv = gamma.data();
  const auto bv = beta.data();

  std::vector<T> mu(P, T(0)), var(P, T(0));
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) mu[p] += xv[c * P + p];
  for (auto& m : mu) m /= static_cast<T>(C);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) {
      const T d = xv[c * P + p] - mu[p];
      var[p] += d * d;
    }
  std::vector<T> rstd(P);
  for (std::size_t p = 0; p < P; ++p) rstd[p] = T(1) / std::sqrt(var[p] / static_cast<T>(C) + eps);

  std::vector<T> xhat(x.numel()), out(x.numel());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t p = 0; p < P; ++p) {
      const T h = (xv[c * P + p] - mu[p]) * rstd[p];
      xhat[c * P + p] = h;
      out[c * P + p] = gv[c] * h + bv[c];
    }

  return Tensor<T>::make_result(
      x.shape(), std::move(out), "layer_norm_channels", {x.node(), gamma.node(), beta.node()},
      [C, P, xhat = std::move(xhat), rstd = std::move(rstd)](auto& self) {
        const auto& dy = self.grad;
        auto& nx = self.inputs[0];
        auto& ng = self.inputs[1];
        auto& nb = self.inputs[2];
        const auto& G = *ng->value;
        if (ng->requires_grad) {
          auto& g = ng->ensure_grad();
          for (std::size_t c = 0; c < C; ++c) {
            T s = 0;
            for (std::size_t p = 0; p < P; ++p) s += dy[c * P + p] * xhat[c * P + p];
            g[c] += s;
          }
        }
        if (nb->requires_grad) {
          auto& g = nb->ensure_grad();
          for (std::size_t c = 0; c < C; ++c) {
            T s = 0;
            for (std::size_t p = 0; p < P; ++p) s += dy[c * P + p];
            g[c] += s;
          }
        }
        if (nx->requires_grad) {
          auto& g = nx->ensure_grad();
          std::vector<T> m1(P, T(0)), m2(P, T(0));
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) {
              const T dh = dy[c * P + p] * G[c];
              m1[p] += dh;
              m2[p] += dh * xhat[c * P + p];
            }
          const T invC = T(1) / static_cast<T>(C);
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t p = 0; p < P; ++p) {
              const T dh = dy[c * P + p] * G[c];
              g[c * P + p] +=
                  rstd[p] * (dh - m1[p] * invC - xhat[c * P + p] * m2[p] * invC);
            }
        }
      });
}

/// Affine map v[In] -> W[Out,In] v + b[Out].
template <class T>
Tensor<T> linear(const Tensor<T>& v, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (v.rank() != 1 || weight.rank() != 2 || weight.dim(1) != v.dim(0) ||
      bias.shape() != Shape{weight.dim(0)})
    throw ShapeError("linear: input " + to_string(v.shape()) + ", weight " +
                     to_string(weight.shape()) + ", bias " + to_string(bias.shape()));
  const std::size_t O = weight.dim(0), I = weight.dim(1);
  const auto x = v.data();
  const auto w = weight.data();
  const auto b = bias.data();
  std::vector<T> out(O);
  for (std::size_t o = 0; o < O; ++o) {
    T s = b[o];
    for (std::size_t i = 0; i < I; ++i) s += w[o * I + i] * x[i];
    out[o] = s;
  }
  return Tensor<T>::make_result(
      Shape{O}, std::move(out), "linear", {v.node(), weight.node(), bias.node()},
      [O, I](auto& self) {
        auto& nv = self.inputs[0];
        auto& nw = self.inputs[1];
        auto& nb = self.inputs[2];
        const auto& X = *nv->value;
        const auto& Wt = *nw->value;
        if (nv->requires_grad) {
          auto& g = nv->ensure_grad();
          for (std::size_t i = 0; i < I; ++i) {
            T s = 0;
            for (std::size_t o = 0; o < O; ++o) s += Wt[o * I + i] * self.grad[o];
            g[i] += s;
          }
        }
        if (nw->requires_grad) {
          auto& g = nw->ensure_grad();
          for (std::size_t o = 0; o < O; ++o)
            for (std::size_t i = 0; i < I; ++i) g[o * I + i] += self.grad[o] * X[i];
        }
        if (nb->requires_grad) {
          auto& g = nb->ensure_grad();
          for (std::size_t o = 0; o < O; ++o) g[o] += self.grad[o];
        }
      });
}

/// Mean of squared differences over all elements.
template <class T>
Tensor<T> l2_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("l2_loss: shape mismatch " + to_string(pred.shape()) + " vs " +
                     to_string(target.shape()));
  const auto p = pred.data();
  const auto t = target.data();
  T s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T d = p[i] - t[i];
    s += d * d;
  }
  const T n = static_cast<T>(p.size());
  return Tensor<T>::make_result(Shape{1}, {s / n}, "l2_loss", {pred.node(), target.node()},
                                [n](auto& self) {
                                  const auto& P = *self.inputs[0]->value;
                                  const auto& Q = *self.inputs[1]->value;
                                  const T k = T(2) * self.grad[0] / n;
                                  for (int side = 0; side < 2; ++side) {
                                    auto& node = self.inputs[side];
                                    if (!node->requires_grad) continue;
                                    auto& g = node->ensure_grad();
                                    const T sgn = side == 0 ? T(1) : T(-1);
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += sgn * k * (P[i] - Q[i]);
                                  }
                                });
}

/// Squared error over [C,H,W] weighted by row_weights[H] and a 0/1 channel
/// mask[C], normalized by (active channels * H * W).
template <class T>
Tensor<T> weighted_l2_loss(const Tensor<T>& pred, const Tensor<T>& target,
                           std::span<const double> row_weights, std::span<const int> channel_mask) {
  if (pred.shape() != target.shape() || pred.rank() != 3)
    throw ShapeError("weighted_l2_loss: need equal [C,H,W] shapes, got " +
                     to_string(pred.shape()) + " vs " + to_string(target.shape()));
  const std::size_t C = pred.dim(0), H = pred.dim(1), W = pred.dim(2);
  if (row_weights.size() != H || channel_mask.size() != C)
    throw ShapeError("weighted_l2_loss: weights/mask length mismatch");
  std::vector<T> wts(C * H);
  std::size_t active = 0;
  for (std::size_t c = 0; c < C; ++c) {
    active += channel_mask[c] ? 1 : 0;
    for (std::size_t h = 0; h < H; ++h)
      wts[c * H + h] = channel_mask[c] ? static_cast<T>(row_weights[h]) : T(0);
  }
  if (active == 0) throw std::invalid_argument("weighted_l2_loss: every channel masked out");
  const T n = static_cast<T>(active * H * W);
  const auto p = pred.data();
  const auto t = target.data();
  T s = 0;
  for (std::size_t r = 0; r < C * H; ++r)
    for (std::size_t w = 0; w < W; ++w) {
      const T d = p[r * W + w] - t[r * W + w];
      s += wts[r] * d * d;
    }
  return Tensor<T>::make_result(
      Shape{1}, {s / n}, "weighted_l2_loss", {pred.node(), target.node()},
      [n, W, wts = std::move(wts)](auto& self) {
        const auto& P = *self.inputs[0]->value;
        const auto& Q = *self.inputs[1]->value;
        const T k = T(2) * self.grad[0] / n;
        for (int side = 0; side < 2; ++side) {
          auto& node = self.inputs[side];
          if (!node->requires_grad) continue;
          auto& g = node->ensure_grad();
          const T sgn = side == 0 ? T(1) : T(-1);
          for (std::size_t r = 0; r < wts.size(); ++r)
            for (std::size_t w = 0; w < W; ++w)
              g[r * W + w] += sgn * k * wts[r] * (P[r * W + w] - Q[r * W + w]);
        }
      });
}

}  // namespace karina
