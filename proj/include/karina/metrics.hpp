#pragma once

// Verification scores on lat-lon planes: latitude-weighted RMSE, anomaly
// correlation against a harmonic climatology, member regression maps and
// box area averages. All arithmetic is in double.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "karina/data.hpp"
#include "karina/grid.hpp"

namespace karina {

class MetricError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// w_j = cos(lat_j) / mean_j cos(lat_j).
inline std::vector<double> latitude_weights(const GridSpec& g) {
  return GridSpec::normalized_cos_weights(g.lat_centers);
}

namespace detail {

inline void check_plane(std::span<const double> a, const GridSpec& g, const char* what) {
  if (a.size() != g.points())
    throw MetricError(std::string(what) + ": field has " + std::to_string(a.size()) + " values, grid has " +
                      std::to_string(g.points()));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(a[i]))
      throw MetricError(std::string(what) + ": non-finite value at row " + std::to_string(i / g.n_lon) +
                        ", column " + std::to_string(i % g.n_lon));
}

}  // namespace detail

/// sqrt( sum_ij w_j (y_ij - yhat_ij)^2 / (n_lat n_lon) ) for one channel plane.
/// `weighted = false` uses w_j = 1.
inline double weighted_rmse(std::span<const double> forecast, std::span<const double> truth, const GridSpec& g,
                            bool weighted = true) {
  detail::check_plane(forecast, g, "weighted_rmse forecast");
  detail::check_plane(truth, g, "weighted_rmse truth");
  double s = 0.0;
  for (std::size_t j = 0; j < g.n_lat; ++j) {
    const double w = weighted ? g.row_weights[j] : 1.0;
    double row = 0.0;
    for (std::size_t i = 0; i < g.n_lon; ++i) {
      const double d = truth[j * g.n_lon + i] - forecast[j * g.n_lon + i];
      row += d * d;
    }
    s += w * row;
  }
  return std::sqrt(s / static_cast<double>(g.points()));
}

/// RMSE restricted to the given rows (same normalization over the selected cells).
inline double weighted_rmse_rows(std::span<const double> forecast, std::span<const double> truth, const GridSpec& g,
                                 const std::vector<std::size_t>& rows, bool weighted = true) {
  detail::check_plane(forecast, g, "weighted_rmse forecast");
  detail::check_plane(truth, g, "weighted_rmse truth");
  if (rows.empty()) throw MetricError("weighted_rmse_rows: no rows selected");
  double s = 0.0;
  for (auto j : rows) {
    if (j >= g.n_lat) throw MetricError("weighted_rmse_rows: row out of range");
    const double w = weighted ? g.row_weights[j] : 1.0;
    for (std::size_t i = 0; i < g.n_lon; ++i) {
      const double d = truth[j * g.n_lon + i] - forecast[j * g.n_lon + i];
      s += w * d * d;
    }
  }
  return std::sqrt(s / static_cast<double>(rows.size() * g.n_lon));
}

/// The `k` rows nearest each pole (2k rows, or every row when 2k >= n_lat).
inline std::vector<std::size_t> polar_rows(const GridSpec& g, std::size_t k) {
  std::vector<std::size_t> rows;
  for (std::size_t j = 0; j < g.n_lat; ++j)
    if (j < k || j + k >= g.n_lat) rows.push_back(j);
  return rows;
}

// ---------------------------------------------------------------------------
// Harmonic climatology

inline constexpr std::size_t kHarmonics = 3;
inline constexpr std::size_t kClimTerms = 1 + 2 * kHarmonics;
inline constexpr double kYearDays = 365.25;

/// Basis row [1, cos(2 pi k d / 365.25), sin(...)]_{k=1..3}; d is days since 1970-01-01.
inline std::array<double, kClimTerms> harmonic_basis(double day) {
  std::array<double, kClimTerms> b{};
  b[0] = 1.0;
  for (std::size_t k = 1; k <= kHarmonics; ++k) {
    const double a = 2.0 * std::numbers::pi * static_cast<double>(k) * day / kYearDays;
    b[2 * k - 1] = std::cos(a);
    b[2 * k] = std::sin(a);
  }
  return b;
}

/// Per (channel, point) coefficients a0, (a1, b1), (a2, b2), (a3, b3).
struct ClimatologyTable {
  std::vector<std::string> channels;
  std::size_t n_lat = 0, n_lon = 0;
  std::vector<double> coeffs;  // [channel][point][term]
  std::int32_t fit_first_date = 0, fit_last_date = 0;

  std::size_t plane() const { return n_lat * n_lon; }

  double value(std::size_t channel, std::size_t point, double day) const {
    const auto b = harmonic_basis(day);
    const double* c = coeffs.data() + (channel * plane() + point) * kClimTerms;
    double v = 0.0;
    for (std::size_t t = 0; t < kClimTerms; ++t) v += c[t] * b[t];
    return v;
  }

  std::vector<double> plane_at(std::size_t channel, double day) const {
    if (channel >= channels.size()) throw MetricError("climatology: channel index out of range");
    const auto b = harmonic_basis(day);
    std::vector<double> out(plane());
    for (std::size_t p = 0; p < plane(); ++p) {
      const double* c = coeffs.data() + (channel * plane() + p) * kClimTerms;
      double v = 0.0;
      for (std::size_t t = 0; t < kClimTerms; ++t) v += c[t] * b[t];
      out[p] = v;
    }
    return out;
  }

  std::size_t channel_index(const std::string& name) const {
    for (std::size_t c = 0; c < channels.size(); ++c)
      if (channels[c] == name) return c;
    throw MetricError("climatology has no channel '" + name + "'");
  }
};

/// Least-squares harmonic fit of every series column. `values` is
/// row-major [n_time][n_series]; returns [n_series][kClimTerms].
inline std::vector<double> fit_harmonics(const std::vector<double>& days, const std::vector<double>& values,
                                         std::size_t n_series) {
  const std::size_t n = days.size();
  if (n == 0 || values.size() != n * n_series) throw MetricError("fit_harmonics: size mismatch");
  const auto [lo, hi] = std::minmax_element(days.begin(), days.end());
  if (*hi - *lo + 1.0 < 2.0 * kYearDays)
    throw MetricError("climatology fit needs at least two annual cycles (" + std::to_string(2.0 * kYearDays) +
                      " days), got " + std::to_string(*hi - *lo + 1.0));
  Eigen::MatrixXd X(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kClimTerms));
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = harmonic_basis(days[i]);
    for (std::size_t t = 0; t < kClimTerms; ++t) X(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t)) = b[t];
  }
  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> Y(
      values.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n_series));
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(X);
  if (qr.rank() < static_cast<Eigen::Index>(kClimTerms)) throw MetricError("climatology fit: degenerate sampling");
  const Eigen::MatrixXd C = qr.solve(Eigen::MatrixXd(Y));  // [terms][series]
  std::vector<double> out(n_series * kClimTerms);
  for (std::size_t s = 0; s < n_series; ++s)
    for (std::size_t t = 0; t < kClimTerms; ++t)
      out[s * kClimTerms + t] = C(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(s));
  return out;
}

/// Fits the mean plus three annual harmonics at every (channel, point) of `series`.
inline ClimatologyTable fit_climatology(const GridFile& series) {
  if (series.n_time() == 0) throw MetricError("climatology fit: empty series");
  std::vector<double> days(series.dates.begin(), series.dates.end());
  std::vector<double> values(series.data.begin(), series.data.end());
  ClimatologyTable t;
  t.channels = series.channels;
  t.n_lat = series.n_lat;
  t.n_lon = series.n_lon;
  t.coeffs = fit_harmonics(days, values, series.frame_size());
  t.fit_first_date = *std::min_element(series.dates.begin(), series.dates.end());
  t.fit_last_date = *std::max_element(series.dates.begin(), series.dates.end());
  return t;
}

// ---------------------------------------------------------------------------
// Anomaly correlation

/// Correlation of anomalies X' = truth - clim and Y' = forecast - clim, each
/// centered by its (weighted) spatial mean, with row weights in every sum.
inline double acc(std::span<const double> forecast, std::span<const double> truth, std::span<const double> clim,
                  const GridSpec& g, bool weighted = true) {
  detail::check_plane(forecast, g, "acc forecast");
  detail::check_plane(truth, g, "acc truth");
  detail::check_plane(clim, g, "acc climatology");
  const std::size_t P = g.points();
  std::vector<double> xa(P), ya(P);
  double wsum = 0.0, xm = 0.0, ym = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    const double w = weighted ? g.row_weights[p / g.n_lon] : 1.0;
    xa[p] = truth[p] - clim[p];
    ya[p] = forecast[p] - clim[p];
    xm += w * xa[p];
    ym += w * ya[p];
    wsum += w;
  }
  xm /= wsum;
  ym /= wsum;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t p = 0; p < P; ++p) {
    const double w = weighted ? g.row_weights[p / g.n_lon] : 1.0;
    const double dx = xa[p] - xm, dy = ya[p] - ym;
    sxy += w * dx * dy;
    sxx += w * dx * dx;
    syy += w * dy * dy;
  }
  if (!(sxx > 0.0) || !(syy > 0.0)) throw MetricError("acc: zero anomaly variance, correlation undefined");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

// ---------------------------------------------------------------------------
// Regression map and area averages

/// r(p) = sum_m (Z_m - Zbar)(x_m(p) - xbar(p)) / sqrt(sum_m (Z_m - Zbar)^2).
/// `members[m]` is member m's deviation field; `negate` reports the -sigma map.
inline std::vector<double> regression_map(const std::vector<double>& z, const std::vector<std::vector<double>>& members,
                                          bool negate = false) {
  const std::size_t M = z.size();
  if (M < 2) throw MetricError("regression_map: need at least 2 members");
  if (members.size() != M) throw MetricError("regression_map: one field per member required");
  const std::size_t P = members[0].size();
  for (const auto& f : members)
    if (f.size() != P) throw MetricError("regression_map: member fields differ in size");
  double zbar = 0.0;
  for (double v : z) zbar += v;
  zbar /= static_cast<double>(M);
  double szz = 0.0;
  for (double v : z) szz += (v - zbar) * (v - zbar);
  if (!(szz > 0.0)) throw MetricError("regression_map: zero variance in the index series");
  const double norm = std::sqrt(szz);
  std::vector<double> out(P);
  for (std::size_t p = 0; p < P; ++p) {
    double xbar = 0.0;
    for (std::size_t m = 0; m < M; ++m) xbar += members[m][p];
    xbar /= static_cast<double>(M);
    double s = 0.0;
    for (std::size_t m = 0; m < M; ++m) s += (z[m] - zbar) * (members[m][p] - xbar);
    out[p] = (negate ? -s : s) / norm;
  }
  return out;
}

/// Lat-lon box in degrees; longitudes may be given west-negative.
struct RegionBox {
  double lat_min = -90.0, lat_max = 90.0;
  double lon_min = 0.0, lon_max = 360.0;

  static RegionBox north_atlantic() { return {30.0, 45.0, -40.0, -10.0}; }

  bool contains(double lat, double lon) const {
    if (lat < lat_min || lat > lat_max) return false;
    if (lon_max - lon_min >= 360.0) return true;
    auto wrap = [](double x) {
      double r = std::fmod(x, 360.0);
      return r < 0.0 ? r + 360.0 : r;
    };
    const double a = wrap(lon_min), b = wrap(lon_max), l = wrap(lon);
    return a <= b ? (l >= a && l <= b) : (l >= a || l <= b);
  }
};

/// Latitude-weighted mean over cells whose centers lie in the box (inclusive).
inline double area_average(std::span<const double> field, const RegionBox& box, const GridSpec& g) {
  detail::check_plane(field, g, "area_average");
  double s = 0.0, w = 0.0;
  for (std::size_t j = 0; j < g.n_lat; ++j)
    for (std::size_t i = 0; i < g.n_lon; ++i)
      if (box.contains(g.lat_centers[j], g.lon_centers[i])) {
        s += g.row_weights[j] * field[j * g.n_lon + i];
        w += g.row_weights[j];
      }
  if (w == 0.0) throw MetricError("area_average: box contains no grid cell centers");
  return s / w;
}

}  // namespace karina
