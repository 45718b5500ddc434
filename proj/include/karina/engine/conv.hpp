#pragma once

// Index-gather and stride-1 "valid" cross-correlation, the two primitives
// every padded convolution in the network is built from.

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "karina/engine/tensor.hpp"

namespace karina {

/// Gathers each [H,W] plane of x[C,H,W] into [C,out_h,out_w] through `index`
/// (flat source offsets within a plane, -1 = zero fill). Backward scatter-adds.
template <class T>
Tensor<T> gather_planes(const Tensor<T>& x, std::shared_ptr<const std::vector<std::int32_t>> index,
                        std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 3) throw ShapeError("gather_planes expects [C,H,W], got " + to_string(x.shape()));
  if (index->size() != out_h * out_w) throw ShapeError("gather_planes: index table size mismatch");
  const std::size_t C = x.dim(0), plane = x.dim(1) * x.dim(2), out_plane = out_h * out_w;
  const auto xv = x.data();
  const auto& idx = *index;
  std::vector<T> out(C * out_plane);
  for (std::size_t c = 0; c < C; ++c) {
    const T* src = xv.data() + c * plane;
    T* dst = out.data() + c * out_plane;
    for (std::size_t j = 0; j < out_plane; ++j) dst[j] = idx[j] < 0 ? T(0) : src[idx[j]];
  }
  return Tensor<T>::make_result(Shape{C, out_h, out_w}, std::move(out), "pad", {x.node()},
                                [index, C, plane, out_plane](auto& self) {
                                  auto& g = self.inputs[0]->ensure_grad();
                                  const auto& id = *index;
                                  for (std::size_t c = 0; c < C; ++c)
                                    for (std::size_t j = 0; j < out_plane; ++j)
                                      if (id[j] >= 0)
                                        g[c * plane + id[j]] += self.grad[c * out_plane + j];
                                });
}

namespace detail {

// out[j] += w * src[j] for j < n
template <class T>
inline void axpy(T* __restrict out, const T* __restrict src, T w, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] += w * src[j];
}

template <class T>
inline void axpy4(T* __restrict e0, T* __restrict e1, T* __restrict e2, T* __restrict e3,
                  const T* __restrict src, T w0, T w1, T w2, T w3, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    const T v = src[j];
    e0[j] += w0 * v;
    e1[j] += w1 * v;
    e2[j] += w2 * v;
    e3[j] += w3 * v;
  }
}

// out[j] += (w0*d0[j] + w1*d1[j]) + (w2*d2[j] + w3*d3[j])
template <class T>
inline void gather4(T* __restrict out, const T* __restrict d0, const T* __restrict d1,
                    const T* __restrict d2, const T* __restrict d3, T w0, T w1, T w2, T w3,
                    std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) out[j] += (w0 * d0[j] + w1 * d1[j]) + (w2 * d2[j] + w3 * d3[j]);
}

template <class T>
inline T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T acc[8] = {};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
  T tail = 0;
  for (; j < n; ++j) tail += a[j] * b[j];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

}  // namespace detail

/// Stride-1 valid cross-correlation of xp[Cin,Hp,Wp] with weight[Cout,Cin/groups,k,k]
/// plus bias[Cout], giving [Cout, Hp-k+1, Wp-k+1].
///
/// Every output element accumulates bias first, then taps in (ci, kh, kw)
/// order, independent of its position; shifted inputs give bit-identical
/// shifted outputs.
template <class T>
Tensor<T> conv2d_valid(const Tensor<T>& xp, const Tensor<T>& weight, const Tensor<T>& bias,
                       std::size_t groups) {
  if (xp.rank() != 3 || weight.rank() != 4)
    throw ShapeError("conv2d: input must be [C,H,W] and weight [Cout,Cin/g,k,k]; got " +
                     to_string(xp.shape()) + " and " + to_string(weight.shape()));
  const std::size_t Cin = xp.dim(0), Hp = xp.dim(1), Wp = xp.dim(2);
  const std::size_t Cout = weight.dim(0), cig = weight.dim(1), K = weight.dim(2);
  if (weight.dim(3) != K) throw ShapeError("conv2d: kernel must be square");
  if (groups == 0 || Cin % groups != 0 || Cout % groups != 0 || cig * groups != Cin)
    throw ShapeError("conv2d: weight " + to_string(weight.shape()) + " incompatible with " +
                     std::to_string(Cin) + " input channels in " + std::to_string(groups) +
                     " groups");
  if (bias.shape() != Shape{Cout})
    throw ShapeError("conv2d: bias must be [" + std::to_string(Cout) + "], got " +
                     to_string(bias.shape()));
  if (Hp < K || Wp < K) throw ShapeError("conv2d: kernel larger than padded input");
  const std::size_t Ho = Hp - K + 1, Wo = Wp - K + 1;
  const std::size_t L = (Ho - 1) * Wp + Wo;  // flat extent covering every valid output
  const std::size_t coutg = Cout / groups;
  const std::size_t plane = Hp * Wp;
  const auto X = xp.data();
  const auto Wt = weight.data();
  const auto B = bias.data();

  std::vector<T> ext(Cout * L);
  for (std::size_t co = 0; co < Cout; ++co) std::fill_n(ext.data() + co * L, L, B[co]);

  for (std::size_t g = 0; g < groups; ++g) {
    std::size_t co = g * coutg;
    const std::size_t co_end = co + coutg;
    for (; co + 4 <= co_end; co += 4) {
      T* e0 = ext.data() + co * L;
      T* e1 = e0 + L;
      T* e2 = e1 + L;
      T* e3 = e2 + L;
      for (std::size_t cl = 0; cl < cig; ++cl) {
        const T* src_c = X.data() + (g * cig + cl) * plane;
        for (std::size_t kh = 0; kh < K; ++kh)
          for (std::size_t kw = 0; kw < K; ++kw) {
            const std::size_t tap = (cl * K + kh) * K + kw;
            const T w0 = Wt[(co + 0) * cig * K * K + tap];
            const T w1 = Wt[(co + 1) * cig * K * K + tap];
            const T w2 = Wt[(co + 2) * cig * K * K + tap];
            const T w3 = Wt[(co + 3) * cig * K * K + tap];
            detail::axpy4(e0, e1, e2, e3, src_c + kh * Wp + kw, w0, w1, w2, w3, L);
          }
      }
    }
    for (; co < co_end; ++co) {
      T* e = ext.data() + co * L;
      for (std::size_t cl = 0; cl < cig; ++cl) {
        const T* src_c = X.data() + (g * cig + cl) * plane;
        for (std::size_t kh = 0; kh < K; ++kh)
          for (std::size_t kw = 0; kw < K; ++kw)
            detail::axpy(e, src_c + kh * Wp + kw, Wt[co * cig * K * K + (cl * K + kh) * K + kw], L);
      }
    }
  }

  std::vector<T> out(Cout * Ho * Wo);
  for (std::size_t co = 0; co < Cout; ++co)
    for (std::size_t h = 0; h < Ho; ++h)
      std::copy_n(ext.data() + co * L + h * Wp, Wo, out.data() + (co * Ho + h) * Wo);

  return Tensor<T>::make_result(
      Shape{Cout, Ho, Wo}, std::move(out), "conv2d", {xp.node(), weight.node(), bias.node()},
      [=](auto& self) {
        auto& nx = self.inputs[0];
        auto& nw = self.inputs[1];
        auto& nb = self.inputs[2];
        const auto& Xv = *nx->value;
        const auto& Wv = *nw->value;
        std::vector<T> dext(Cout * L, T(0));
        for (std::size_t co = 0; co < Cout; ++co)
          for (std::size_t h = 0; h < Ho; ++h)
            std::copy_n(self.grad.data() + (co * Ho + h) * Wo, Wo, dext.data() + co * L + h * Wp);

        if (nb->requires_grad) {
          auto& gb = nb->ensure_grad();
          for (std::size_t co = 0; co < Cout; ++co) {
            T s = 0;
            const T* d = self.grad.data() + co * Ho * Wo;
            for (std::size_t i = 0; i < Ho * Wo; ++i) s += d[i];
            gb[co] += s;
          }
        }
        if (nw->requires_grad) {
          auto& gw = nw->ensure_grad();
          for (std::size_t co = 0; co < Cout; ++co) {
            const std::size_t g = co / coutg;
            for (std::size_t cl = 0; cl < cig; ++cl) {
              const T* src_c = Xv.data() + (g * cig + cl) * plane;
              for (std::size_t kh = 0; kh < K; ++kh)
                for (std::size_t kw = 0; kw < K; ++kw)
                  gw[co * cig * K * K + (cl * K + kh) * K + kw] +=
                      detail::dot(dext.data() + co * L, src_c + kh * Wp + kw, L);
            }
          }
        }
        if (nx->requires_grad) {
          auto& gx = nx->ensure_grad();
          for (std::size_t ci = 0; ci < Cin; ++ci) {
            const std::size_t g = ci / cig, cl = ci % cig;
            T* dst_c = gx.data() + ci * plane;
            for (std::size_t kh = 0; kh < K; ++kh)
              for (std::size_t kw = 0; kw < K; ++kw) {
                T* dst = dst_c + kh * Wp + kw;
                std::size_t co = g * coutg;
                const std::size_t co_end = co + coutg;
                const std::size_t tap = (cl * K + kh) * K + kw;
                for (; co + 4 <= co_end; co += 4) {
                  const T w0 = Wv[(co + 0) * cig * K * K + tap];
                  const T w1 = Wv[(co + 1) * cig * K * K + tap];
                  const T w2 = Wv[(co + 2) * cig * K * K + tap];
                  const T w3 = Wv[(co + 3) * cig * K * K + tap];
                  const T* d0 = dext.data() + co * L;
                  detail::gather4(dst, d0, d0 + L, d0 + 2 * L, d0 + 3 * L, w0, w1, w2, w3, L);
                }
                for (; co < co_end; ++co)
                  detail::axpy(dst, dext.data() + co * L, Wv[co * cig * K * K + tap], L);
              }
          }
        }
      });
}

}  // namespace karina
