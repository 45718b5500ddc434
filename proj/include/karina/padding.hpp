#pragma once

// Boundary handling for [C,H,W] lat-lon fields.
//
// Every mode is a gather through a precomputed index table: each padded cell
// is either a copy of one interior cell or zero.
//
//   Zero              all pad cells zero
//   CircularZeroPole  longitude wraps; pole-side pad rows zero
//   Geocyclic         longitude wraps; pad row k beyond a pole copies interior
//                     row k-1 from that pole, shifted half way around (W/2)

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "karina/engine/conv.hpp"
#include "karina/engine/tensor.hpp"
#include "karina/grid.hpp"

namespace karina {

enum class PaddingMode { Zero, CircularZeroPole, Geocyclic };

inline std::string to_string(PaddingMode m) {
  switch (m) {
    case PaddingMode::Zero: return "zero";
    case PaddingMode::CircularZeroPole: return "circular";
    case PaddingMode::Geocyclic: return "geocyclic";
  }
  return "?";
}

inline PaddingMode parse_padding_mode(const std::string& s) {
  if (s == "zero") return PaddingMode::Zero;
  if (s == "circular") return PaddingMode::CircularZeroPole;
  if (s == "geocyclic") return PaddingMode::Geocyclic;
  throw std::invalid_argument("unknown padding mode '" + s + "' (zero|circular|geocyclic)");
}

/// Source table for one (pad, H, W, mode): entry (i, j) of the padded plane is
/// a flat offset r*W + c into the interior plane, or -1 for zero fill.
struct IndexMap {
  std::size_t pad = 0, height = 0, width = 0;
  PaddingMode mode = PaddingMode::Zero;
  std::shared_ptr<const std::vector<std::int32_t>> table;

  std::size_t padded_height() const { return height + 2 * pad; }
  std::size_t padded_width() const { return width + 2 * pad; }
  std::int32_t at(std::size_t i, std::size_t j) const { return (*table)[i * padded_width() + j]; }
};

inline IndexMap index_map(std::size_t pad, std::size_t height, std::size_t width, PaddingMode mode) {
  if (pad < 1) throw std::invalid_argument("padding: pad width must be >= 1");
  if (height == 0 || width == 0) throw std::invalid_argument("padding: empty plane");
  if (mode == PaddingMode::Geocyclic) {
    if (width % 2 != 0)
      throw std::invalid_argument("geocyclic padding needs an even width, got " +
                                  std::to_string(width));
    if (pad > height)
      throw std::invalid_argument("geocyclic padding: pad " + std::to_string(pad) +
                                  " exceeds height " + std::to_string(height));
  }
  const std::size_t Hp = height + 2 * pad, Wp = width + 2 * pad;
  const auto H = static_cast<std::int64_t>(height), W = static_cast<std::int64_t>(width);
  const auto P = static_cast<std::int64_t>(pad);
  std::vector<std::int32_t> t(Hp * Wp, -1);

  // Longitude-padded interior rows: column j of the padded row reads (j - p) mod W.
  auto lon_source = [&](std::int64_t j) { return ((j - P) % W + W) % W; };
  if (mode != PaddingMode::Zero) {
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t j = 0; j < static_cast<std::int64_t>(Wp); ++j)
        t[(r + P) * Wp + j] = static_cast<std::int32_t>(r * W + lon_source(j));
  } else {
    for (std::int64_t r = 0; r < H; ++r)
      for (std::int64_t c = 0; c < W; ++c) t[(r + P) * Wp + c + P] = static_cast<std::int32_t>(r * W + c);
  }

  if (mode == PaddingMode::Geocyclic) {
    // Pole rows: take an already longitude-padded interior row and roll it by W/2.
    const std::int64_t half = W / 2;
    for (std::int64_t k = 1; k <= P; ++k) {
      const std::int64_t north_dst = P - k, north_src = P + (k - 1);
      const std::int64_t south_dst = P + H - 1 + k, south_src = P + H - k;
      for (std::int64_t j = 0; j < static_cast<std::int64_t>(Wp); ++j) {
        // Column j of the rolled row is column j + W/2 of the source row, taken
        // modulo the W-periodic longitude axis.
        const std::int64_t jj = P + ((j - P + half) % W + W) % W;
        t[north_dst * Wp + j] = t[north_src * Wp + jj];
        t[south_dst * Wp + j] = t[south_src * Wp + jj];
      }
    }
  }

  IndexMap m;
  m.pad = pad;
  m.height = height;
  m.width = width;
  m.mode = mode;
  m.table = std::make_shared<const std::vector<std::int32_t>>(std::move(t));
  return m;
}

inline IndexMap index_map(std::size_t pad, const GridSpec& grid, PaddingMode mode) {
  return index_map(pad, grid.n_lat, grid.n_lon, mode);
}

/// Process-wide cache of index tables; tables are immutable once built.
inline IndexMap cached_index_map(std::size_t pad, std::size_t height, std::size_t width,
                                 PaddingMode mode) {
  static std::mutex mu;
  static std::map<std::tuple<std::size_t, std::size_t, std::size_t, int>, IndexMap> cache;
  const auto key = std::make_tuple(pad, height, width, static_cast<int>(mode));
  std::lock_guard lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  return cache.emplace(key, index_map(pad, height, width, mode)).first->second;
}

template <class T>
Tensor<T> pad(const Tensor<T>& x, std::size_t p, PaddingMode mode) {
  if (x.rank() != 3) throw ShapeError("pad expects [C,H,W], got " + to_string(x.shape()));
  const auto m = cached_index_map(p, x.dim(1), x.dim(2), mode);
  return gather_planes(x, m.table, m.padded_height(), m.padded_width());
}

template <class T>
Tensor<T> pad_geocyclic(const Tensor<T>& x, std::size_t p) {
  return pad(x, p, PaddingMode::Geocyclic);
}
template <class T>
Tensor<T> pad_circular_zero_pole(const Tensor<T>& x, std::size_t p) {
  return pad(x, p, PaddingMode::CircularZeroPole);
}
template <class T>
Tensor<T> pad_zero(const Tensor<T>& x, std::size_t p) {
  return pad(x, p, PaddingMode::Zero);
}

/// Interior [C,H,W] of a padded [C,H+2p,W+2p] tensor (not recorded).
template <class T>
Tensor<T> crop_center(const Tensor<T>& x, std::size_t p) {
  if (x.rank() != 3 || x.dim(1) < 2 * p || x.dim(2) < 2 * p)
    throw ShapeError("crop_center: cannot remove " + std::to_string(p) + " from " +
                     to_string(x.shape()));
  const std::size_t C = x.dim(0), Hp = x.dim(1), Wp = x.dim(2), H = Hp - 2 * p, W = Wp - 2 * p;
  const auto v = x.data();
  std::vector<T> out(C * H * W);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t w = 0; w < W; ++w) out[(c * H + h) * W + w] = v[(c * Hp + h + p) * Wp + w + p];
  return Tensor<T>(Shape{C, H, W}, std::move(out));
}

/// Rolls x[C,H,W] eastward by s columns: out[.., c] = x[.., (c - s) mod W].
template <class T>
Tensor<T> roll_lon(const Tensor<T>& x, std::int64_t s) {
  if (x.rank() != 3) throw ShapeError("roll_lon expects [C,H,W]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const auto Wi = static_cast<std::int64_t>(W);
  const auto v = x.data();
  std::vector<T> out(v.size());
  for (std::size_t ch = 0; ch < C * H; ++ch)
    for (std::int64_t c = 0; c < Wi; ++c)
      out[ch * W + c] = v[ch * W + static_cast<std::size_t>(((c - s) % Wi + Wi) % Wi)];
  return Tensor<T>(x.shape(), std::move(out));
}

/// Rolls a padded [C,H+2p,W+2p] tensor by s on its W-periodic longitude axis:
/// padded column j holds longitude index j - p, so it reads column
/// p + ((j - p - s) mod W).
template <class T>
Tensor<T> roll_lon_padded(const Tensor<T>& xp, std::size_t p, std::int64_t s) {
  if (xp.rank() != 3 || xp.dim(2) <= 2 * p) throw ShapeError("roll_lon_padded: bad shape");
  const std::size_t C = xp.dim(0), Hp = xp.dim(1), Wp = xp.dim(2);
  const auto W = static_cast<std::int64_t>(Wp - 2 * p);
  const auto P = static_cast<std::int64_t>(p);
  const auto v = xp.data();
  std::vector<T> out(v.size());
  for (std::size_t ch = 0; ch < C * Hp; ++ch)
    for (std::int64_t j = 0; j < static_cast<std::int64_t>(Wp); ++j)
      out[ch * Wp + j] = v[ch * Wp + static_cast<std::size_t>(P + ((j - P - s) % W + W) % W)];
  return Tensor<T>(xp.shape(), std::move(out));
}

}  // namespace karina
