#pragma once

// Regular, pole-excluding latitude-longitude grid.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace karina {

struct GridSpec {
  std::size_t n_lat = 0;
  std::size_t n_lon = 0;
  std::vector<double> lat_centers;  // degrees, index 0 northernmost
  std::vector<double> lon_centers;  // degrees east, starting at 0
  std::vector<double> row_weights;  // cos(lat), normalized to unit mean

  /// Equal-angle grid with cell centers offset half a cell from the poles
  /// (72 x 144 gives the 2.5 degree layout, centers at +-88.75).
  static GridSpec regular(std::size_t n_lat, std::size_t n_lon) {
    if (n_lat == 0 || n_lon == 0) throw std::invalid_argument("GridSpec: empty grid");
    if (n_lon % 2 != 0)
      throw std::invalid_argument("GridSpec: n_lon must be even, got " + std::to_string(n_lon));
    GridSpec g;
    g.n_lat = n_lat;
    g.n_lon = n_lon;
    const double dlat = 180.0 / static_cast<double>(n_lat);
    const double dlon = 360.0 / static_cast<double>(n_lon);
    for (std::size_t j = 0; j < n_lat; ++j)
      g.lat_centers.push_back(90.0 - (static_cast<double>(j) + 0.5) * dlat);
    for (std::size_t i = 0; i < n_lon; ++i) g.lon_centers.push_back(static_cast<double>(i) * dlon);
    g.row_weights = normalized_cos_weights(g.lat_centers);
    return g;
  }

  static std::vector<double> normalized_cos_weights(const std::vector<double>& lats) {
    std::vector<double> w(lats.size());
    double total = 0.0;
    for (std::size_t j = 0; j < lats.size(); ++j) {
      w[j] = std::cos(lats[j] * std::numbers::pi / 180.0);
      total += w[j];
    }
    const double m = total / static_cast<double>(lats.size());
    for (auto& v : w) v /= m;
    return w;
  }

  double lat_spacing() const { return 180.0 / static_cast<double>(n_lat); }
  double lon_spacing() const { return 360.0 / static_cast<double>(n_lon); }
  std::size_t points() const { return n_lat * n_lon; }

  bool operator==(const GridSpec& o) const { return n_lat == o.n_lat && n_lon == o.n_lon; }
};

}  // namespace karina
