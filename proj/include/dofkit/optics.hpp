#pragma once

#include <array>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <stdexcept>
#include <string>
#include <string_view>

#include "dofkit/image.hpp"

namespace dofkit {

// Per-image lens state. Aperture is normalized to the image's longest side;
// focus is a normalized disparity (1 = nearest point of the scene, 0 = the
// farthest, which a click on the background resolves to).
struct LensParams {
  double aperture = 0.0;
  double focus = 0.5;

  void validate() const {
    if (!std::isfinite(aperture) || aperture < 0.0) {
      throw std::domain_error("aperture must be finite and >= 0");
    }
    if (!std::isfinite(focus) || focus < 0.0 || focus > 1.0) {
      throw std::domain_error("focus must lie in [0, 1]");
    }
  }

  friend bool operator==(const LensParams&, const LensParams&) = default;
};

enum class CocShape { circle, pentagon, hexagon };

inline std::string_view to_string(CocShape shape) {
  switch (shape) {
    case CocShape::circle: return "circle";
    case CocShape::pentagon: return "pentagon";
    case CocShape::hexagon: return "hexagon";
  }
  return "circle";
}

inline CocShape parse_shape(std::string_view name) {
  if (name == "circle") return CocShape::circle;
  if (name == "pentagon") return CocShape::pentagon;
  if (name == "hexagon") return CocShape::hexagon;
  throw std::invalid_argument("unknown CoC shape '" + std::string(name) + "'");
}

// Distance (px) beyond the CoC radius at which a circular scatter stops.
inline constexpr double kSupportMargin = 2.0;

struct CoCProfile {
  double alpha = 4.0;
  CocShape shape = CocShape::circle;
  double shape_rotation = 0.0;
  double max_radius_px = 64.0;

  void validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw std::domain_error("alpha must be > 0");
    if (!(max_radius_px >= 1.0)) throw std::domain_error("max_radius_px must be >= 1");
    if (!std::isfinite(shape_rotation)) throw std::domain_error("shape_rotation must be finite");
  }
};

struct GammaSpec {
  double gamma = 2.2;

  void validate() const {
    if (!(gamma > 0.0) || !std::isfinite(gamma)) throw std::domain_error("gamma must be > 0");
  }
};

// Pixels of blur per unit of normalized aperture and unit disparity difference.
inline double aperture_px_scale(int width, int height) {
  return static_cast<double>(width > height ? width : height);
}

inline double coc_radius_disparity(const LensParams& lens, double disparity, double px_scale) {
  if (!(px_scale > 0.0)) throw std::domain_error("px_scale must be > 0");
  return px_scale * lens.aperture * std::abs(lens.focus - disparity);
}

// CoC radius in pixels of a point at depth `depth`, with disparity normalized
// over `range`.
inline double coc_radius(const LensParams& lens, double depth, const DisparityRange& range,
                         double px_scale) {
  if (!(depth > 0.0) || !std::isfinite(depth)) throw std::domain_error("depth must be > 0");
  return coc_radius_disparity(lens, range.normalize(depth), px_scale);
}

// 1/2 + 1/2 tanh(alpha (r - l)), evaluated as the equivalent logistic
// 1 / (1 + exp(-2 alpha (r - l))) so the tail stays positive.
inline double confuse_weight(double radius, double distance, double alpha) {
  return 1.0 / (1.0 + std::exp(-2.0 * alpha * (radius - distance)));
}

// d confuse_weight / d radius.
inline double confuse_weight_dr(double weight, double alpha) {
  return 2.0 * alpha * weight * (1.0 - weight);
}

namespace detail {

inline int polygon_sides(CocShape shape) {
  switch (shape) {
    case CocShape::pentagon: return 5;
    case CocShape::hexagon: return 6;
    case CocShape::circle: break;
  }
  return 0;
}

}  // namespace detail

// Regular polygon with circumradius `radius`, first vertex at angle
// `rotation`. Boundary points count as inside.
inline bool inside_regular_polygon(int sides, double rotation, double dx, double dy,
                                   double radius) {
  if (dx == 0.0 && dy == 0.0) return true;
  const double apothem = radius * std::cos(std::numbers::pi / sides);
  const double step = 2.0 * std::numbers::pi / sides;
  for (int k = 0; k < sides; ++k) {
    // Outward normal of edge k sits halfway between vertices k and k+1.
    const double theta = rotation + (k + 0.5) * step;
    if (dx * std::cos(theta) + dy * std::sin(theta) > apothem + 1e-12) return false;
  }
  return true;
}

// Binary aperture-shape mask applied to a scatter weight. The circle keeps
// the confuse tail out to the support margin, exclusive.
inline double shape_mask(const CoCProfile& profile, double dx, double dy, double radius) {
  if (profile.shape == CocShape::circle) {
    return std::hypot(dx, dy) < radius + kSupportMargin ? 1.0 : 0.0;
  }
  return inside_regular_polygon(detail::polygon_sides(profile.shape), profile.shape_rotation, dx,
                                dy, radius)
             ? 1.0
             : 0.0;
}

// Confuse weight at the support edge. Scatter weights subtract it so they
// reach zero continuously where the support ends.
inline double support_floor(double alpha) {
  return 1.0 / (1.0 + std::exp(2.0 * alpha * kSupportMargin));
}

// Weight a source of CoC radius `radius` deposits at offset (dx, dy).
inline double scatter_weight(const CoCProfile& profile, double dx, double dy, double radius) {
  if (shape_mask(profile, dx, dy, radius) == 0.0) return 0.0;
  const double w = confuse_weight(radius, std::hypot(dx, dy), profile.alpha) - support_floor(profile.alpha);
  return std::max(w, 0.0);
}

template <typename Out, typename In>
struct GammaResult {
  Out image;
  std::size_t clamped = 0;
};

namespace detail {

template <typename Out, typename In>
GammaResult<Out, In> apply_power(const In& in, double exponent) {
  GammaResult<Out, In> result{Out(in.width(), in.height(), in.channels()), 0};
  auto src = in.values();
  auto dst = result.image.values();
  for (std::size_t i = 0; i < src.size(); ++i) {
    double v = src[i];
    if (!(v >= 0.0)) {  // also catches NaN
      v = 0.0;
      ++result.clamped;
    } else if (v > 1.0) {
      v = 1.0;
      ++result.clamped;
    }
    dst[i] = std::pow(v, exponent);
  }
  return result;
}

}  // namespace detail

inline GammaResult<LinearImage, DisplayImage> gamma_decode(const DisplayImage& image,
                                                           const GammaSpec& gamma = {}) {
  gamma.validate();
  return detail::apply_power<LinearImage>(image, gamma.gamma);
}

inline GammaResult<DisplayImage, LinearImage> gamma_encode(const LinearImage& image,
                                                           const GammaSpec& gamma = {}) {
  gamma.validate();
  return detail::apply_power<DisplayImage>(image, 1.0 / gamma.gamma);
}

}  // namespace dofkit
