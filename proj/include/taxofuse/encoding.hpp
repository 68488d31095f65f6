#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <string>

#include "taxofuse/error.hpp"

namespace taxofuse {

// Observation metadata as recorded: degrees, degrees, meters, day of year.
struct RawContext {
  double longitude = 0.0;
  double latitude = 0.0;
  double altitude = 0.0;
  double day_of_year = 0.0;
};

// Network input for the context branch: (t1, t2, x, y, z).
struct ContextVector {
  static constexpr std::size_t kDim = 5;
  double t1 = 0.0, t2 = 1.0, x = 0.0, y = 0.0, z = 0.0;

  std::array<double, kDim> as_array() const { return {t1, t2, x, y, z}; }
};

struct AxisBounds {
  double min = -1.0;
  double max = 1.0;
};

struct NormalizationBounds {
  AxisBounds longitude, latitude, altitude;

  void validate() const {
    auto check = [](const AxisBounds& a, const char* axis) {
      if (!(std::isfinite(a.min) && std::isfinite(a.max) && a.min < a.max))
        throw DataError(std::string("degenerate normalization bounds on ") + axis + " axis (min " +
                        std::to_string(a.min) + ", max " + std::to_string(a.max) + ")");
    };
    check(longitude, "longitude");
    check(latitude, "latitude");
    check(altitude, "altitude");
  }
};

// Cyclic day-of-year code on the unit circle, period 365 days in every year.
inline std::pair<double, double> encode_day_of_year(double t) {
  const double angle = 2.0 * std::numbers::pi * t / 365.0;
  return {std::sin(angle), std::cos(angle)};
}

// Per-axis min/max over the given (training) contexts.
inline NormalizationBounds fit_bounds(std::span<const RawContext> contexts) {
  if (contexts.empty()) throw DataError("cannot fit normalization bounds on zero observations");
  NormalizationBounds b{{contexts[0].longitude, contexts[0].longitude},
                        {contexts[0].latitude, contexts[0].latitude},
                        {contexts[0].altitude, contexts[0].altitude}};
  auto widen = [](AxisBounds& a, double v) {
    if (!std::isfinite(v)) throw DataError("non-finite coordinate while fitting bounds");
    a.min = std::min(a.min, v);
    a.max = std::max(a.max, v);
  };
  for (const auto& c : contexts) {
    widen(b.longitude, c.longitude);
    widen(b.latitude, c.latitude);
    widen(b.altitude, c.altitude);
  }
  b.validate();
  return b;
}

// Affine map of [min, max] onto [-1, 1]; values outside are clamped.
inline double rescale_axis(double v, const AxisBounds& a) {
  double r = 2.0 * (v - a.min) / (a.max - a.min) - 1.0;
  return std::clamp(r, -1.0, 1.0);
}

inline ContextVector normalize_context(const RawContext& raw, const NormalizationBounds& bounds) {
  bounds.validate();
  if (!(std::isfinite(raw.longitude) && std::isfinite(raw.latitude) && std::isfinite(raw.altitude) &&
        std::isfinite(raw.day_of_year)))
    throw DataError("non-finite observation context");
  auto [t1, t2] = encode_day_of_year(raw.day_of_year);
  return ContextVector{t1, t2, rescale_axis(raw.longitude, bounds.longitude),
                       rescale_axis(raw.latitude, bounds.latitude),
                       rescale_axis(raw.altitude, bounds.altitude)};
}

}  // namespace taxofuse
