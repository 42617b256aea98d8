#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dofkit/image.hpp"
#include "dofkit/optics.hpp"
#include "dofkit/parallel.hpp"

namespace dofkit {

struct RenderOptions {
  unsigned threads = 0;  // 0: hardware concurrency
  // Disparity normalization; defaults to the depth map's own min/max.
  std::optional<DisparityRange> disparity_range;
  // Optional per-pixel multiplier on the aperture (adaptation reweighting).
  std::span<const double> aperture_scale;
};

struct RenderStats {
  std::size_t clamped_radii = 0;   // sources whose CoC exceeded max_radius_px
  std::size_t clamped_inputs = 0;  // input samples clamped into [0, 1] before decoding
  double max_radius_px = 0.0;
};

struct RenderResult {
  DisplayImage image;
  LinearImage linear;
  RenderStats stats;
};

// Partials of the display-space output with respect to the lens parameters.
struct RenderGradients {
  DisplayImage d_aperture;
  DisplayImage d_focus;
};

struct RenderGradResult {
  DisplayImage image;
  LinearImage linear;
  RenderGradients gradients;
  RenderStats stats;
};

// Per-pixel effective aperture A' = A * psi.
struct ApertureField {
  int width = 0;
  int height = 0;
  std::vector<double> values;
};

inline ApertureField apply_adaptation_aperture(const LensParams& lens, const DepthMap& depth,
                                               std::span<const double> psi) {
  lens.validate();
  if (psi.size() != depth.pixel_count()) {
    throw std::invalid_argument("adaptation field size does not match depth map");
  }
  ApertureField field{depth.width(), depth.height(), std::vector<double>(psi.size())};
  for (std::size_t i = 0; i < psi.size(); ++i) {
    if (!(psi[i] > 0.0 && psi[i] <= 1.0)) throw std::domain_error("psi must lie in (0, 1]");
    field.values[i] = lens.aperture * psi[i];
  }
  return field;
}

namespace detail {

inline constexpr int kBandRows = 8;

struct SourceRadii {
  std::vector<double> radius;
  std::vector<double> d_aperture;
  std::vector<double> d_focus;
  std::size_t clamped = 0;
  double max_radius = 0.0;
};

inline SourceRadii source_radii(std::span<const double> disparity, double px_scale,
                                const LensParams& lens, std::span<const double> aperture_scale,
                                double max_radius) {
  const std::size_t n = disparity.size();
  SourceRadii out;
  out.radius.resize(n);
  out.d_aperture.resize(n);
  out.d_focus.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double scale = aperture_scale.empty() ? 1.0 : aperture_scale[i];
    const double diff = lens.focus - disparity[i];
    const double sign = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
    double r = px_scale * lens.aperture * scale * std::abs(diff);
    double da = px_scale * scale * std::abs(diff);
    double df = px_scale * lens.aperture * scale * sign;
    if (r > max_radius) {
      r = max_radius;
      da = df = 0.0;
      ++out.clamped;
    }
    out.radius[i] = r;
    out.d_aperture[i] = da;
    out.d_focus[i] = df;
    out.max_radius = std::max(out.max_radius, r);
  }
  return out;
}

inline int half_window(double radius) {
  return static_cast<int>(std::ceil(radius)) + static_cast<int>(kSupportMargin);
}

// Precomputed half-plane normals for polygonal apertures.
struct PolygonMask {
  int sides = 0;
  double apothem_ratio = 1.0;
  std::vector<double> nx, ny;

  explicit PolygonMask(const CoCProfile& profile) : sides(polygon_sides(profile.shape)) {
    if (sides == 0) return;
    apothem_ratio = std::cos(std::numbers::pi / sides);
    const double step = 2.0 * std::numbers::pi / sides;
    for (int k = 0; k < sides; ++k) {
      const double theta = profile.shape_rotation + (k + 0.5) * step;
      nx.push_back(std::cos(theta));
      ny.push_back(std::sin(theta));
    }
  }

  bool inside(double dx, double dy, double radius) const {
    if (dx == 0.0 && dy == 0.0) return true;
    const double limit = radius * apothem_ratio + 1e-12;
    for (int k = 0; k < sides; ++k) {
      if (dx * nx[k] + dy * ny[k] > limit) return false;
    }
    return true;
  }
};

// Accumulator layout per pixel: [N_r N_g N_b Phi] and, with gradients,
// followed by the same four quantities differentiated by A and then by F.
template <bool WithGrad>
inline constexpr int kAccWidth = WithGrad ? 12 : 4;

template <bool WithGrad>
std::vector<double> scatter(const LinearImage& linear, const SourceRadii& radii,
                            const CoCProfile& profile, unsigned threads) {
  constexpr int K = kAccWidth<WithGrad>;
  const int width = linear.width();
  const int height = linear.height();
  const double alpha = profile.alpha;
  const bool circle = profile.shape == CocShape::circle;
  const PolygonMask polygon(profile);
  auto color = linear.values();

  std::vector<double> acc(static_cast<std::size_t>(width) * height * K, 0.0);
  const int bands = (height + kBandRows - 1) / kBandRows;

  struct Band {
    int row0 = 0;
    int rows = 0;
    std::vector<double> buf;
  };

  // Targets deeper than this inside the CoC get weight 1 - O(1e-16); they are
  // accumulated through per-row difference arrays instead of one exp each.
  const double interior = 18.0 / alpha;
  const double tail = support_floor(alpha);
  const double core_w = 1.0 - tail;

  auto compute = [&](int b) {
    const int y0 = b * kBandRows;
    const int y1 = std::min(height, y0 + kBandRows);
    int halo = 0;
    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < width; ++x) {
        halo = std::max(halo, half_window(radii.radius[static_cast<std::size_t>(y) * width + x]));
      }
    }
    Band band;
    band.row0 = std::max(0, y0 - halo);
    const int row1 = std::min(height, y1 + halo);
    band.rows = row1 - band.row0;
    band.buf.assign(static_cast<std::size_t>(band.rows) * width * K, 0.0);
    std::vector<double> runs;
    if (circle) runs.assign(static_cast<std::size_t>(band.rows) * (width + 1) * 4, 0.0);

    for (int y = y0; y < y1; ++y) {
      for (int x = 0; x < width; ++x) {
        const std::size_t src = static_cast<std::size_t>(y) * width + x;
        const double r = radii.radius[src];
        const double* c = &color[src * 3];
        const double gA = WithGrad ? radii.d_aperture[src] : 0.0;
        const double gF = WithGrad ? radii.d_focus[src] : 0.0;

        // A zero-radius source keeps its energy at the source pixel, so A = 0
        // is an exact identity. Its derivative still covers the window: that is
        // the one-sided derivative of the r > 0 branch.
        const bool self_only = r == 0.0;
        if (self_only) {
          double* out = &band.buf[(static_cast<std::size_t>(y - band.row0) * width + x) * K];
          const double w = 0.5;
          out[0] += w * c[0];
          out[1] += w * c[1];
          out[2] += w * c[2];
          out[3] += w;
          if constexpr (!WithGrad) continue;
          if (gA == 0.0 && gF == 0.0) continue;
        }

        const int h = half_window(r);
        const double reach = r + kSupportMargin;
        const double core = self_only ? -1.0 : r - interior;
        const int ty0 = std::max(0, y - h);
        const int ty1 = std::min(height - 1, y + h);
        for (int ty = ty0; ty <= ty1; ++ty) {
          const double dy = ty - y;
          int span = h;
          int inner = -1;
          if (circle) {
            const double rem = reach * reach - dy * dy;
            if (rem < 0.0) continue;
            span = std::min(h, static_cast<int>(std::floor(std::sqrt(rem))));
            const double rem_in = core * core - dy * dy;
            if (core > 0.0 && rem_in >= 0.0) {
              inner = static_cast<int>(std::floor(std::sqrt(rem_in)));
            }
          }
          const int tx0 = std::max(0, x - span);
          const int tx1 = std::min(width - 1, x + span);
          double* row = &band.buf[static_cast<std::size_t>(ty - band.row0) * width * K];
          if (inner >= 0) {
            const int ix0 = std::max(0, x - inner);
            const int ix1 = std::min(width - 1, x + inner);
            double* run = &runs[static_cast<std::size_t>(ty - band.row0) * (width + 1) * 4];
            double* open = run + static_cast<std::size_t>(ix0) * 4;
            double* close = run + static_cast<std::size_t>(ix1 + 1) * 4;
            open[0] += core_w * c[0];
            open[1] += core_w * c[1];
            open[2] += core_w * c[2];
            open[3] += core_w;
            close[0] -= core_w * c[0];
            close[1] -= core_w * c[1];
            close[2] -= core_w * c[2];
            close[3] -= core_w;
          }
          for (int tx = tx0; tx <= tx1; ++tx) {
            const double dx = tx - x;
            if (inner >= 0 && std::abs(dx) <= inner) {
              tx = x + inner;  // skip the interior run
              continue;
            }
            const double l = std::sqrt(dx * dx + dy * dy);
            if (circle) {
              if (l >= reach) continue;
            } else if (!polygon.inside(dx, dy, r)) {
              continue;
            }
            const double lambda = 1.0 / (1.0 + std::exp(2.0 * alpha * (l - r)));
            const double w = std::max(lambda - tail, 0.0);
            double* out = row + static_cast<std::size_t>(tx) * K;
            if (!self_only) {
              out[0] += w * c[0];
              out[1] += w * c[1];
              out[2] += w * c[2];
              out[3] += w;
            }
            if constexpr (WithGrad) {
              const double g = w > 0.0 ? confuse_weight_dr(lambda, alpha) : 0.0;
              const double wa = g * gA;
              const double wf = g * gF;
              out[4] += wa * c[0];
              out[5] += wa * c[1];
              out[6] += wa * c[2];
              out[7] += wa;
              out[8] += wf * c[0];
              out[9] += wf * c[1];
              out[10] += wf * c[2];
              out[11] += wf;
            }
          }
        }
      }
    }

    // Fold the interior runs into the accumulator.
    if (circle) {
      for (int ry = 0; ry < band.rows; ++ry) {
        const double* run = &runs[static_cast<std::size_t>(ry) * (width + 1) * 4];
        double* row = &band.buf[static_cast<std::size_t>(ry) * width * K];
        double sum[4] = {0.0, 0.0, 0.0, 0.0};
        for (int tx = 0; tx < width; ++tx) {
          for (int k = 0; k < 4; ++k) {
            sum[k] += run[tx * 4 + k];
            row[static_cast<std::size_t>(tx) * K + k] += sum[k];
          }
        }
      }
    }
    return band;
  };

  auto commit = [&](int, Band band) {
    double* dst = &acc[static_cast<std::size_t>(band.row0) * width * K];
    for (std::size_t i = 0; i < band.buf.size(); ++i) dst[i] += band.buf[i];
  };

  ordered_parallel_for(bands, threads, compute, commit);
  return acc;
}

inline void check_inputs(const LensParams& lens, const CoCProfile& profile) {
  lens.validate();
  profile.validate();
}

}  // namespace detail

// A scene prepared for repeated defocus renders: decoded linear color,
// normalized disparity and the aperture pixel scale.
class DefocusScene {
 public:
  DefocusScene(const DisplayImage& color, const DepthMap& depth, const GammaSpec& gamma = {},
               std::optional<DisparityRange> range = std::nullopt)
      : gamma_(gamma) {
    require_same_dims(color, depth, "render_defocus");
    if (color.channels() != 3) throw std::invalid_argument("render_defocus: expected RGB input");
    auto decoded = gamma_decode(color, gamma);
    linear_ = std::move(decoded.image);
    clamped_inputs_ = decoded.clamped;
    range_ = range.value_or(DisparityRange::of(depth));
    disparity_ = normalized_disparity(depth, range_);
    px_scale_ = aperture_px_scale(depth.width(), depth.height());
  }

  DefocusScene(LinearImage linear, std::vector<double> disparity, const GammaSpec& gamma = {})
      : gamma_(gamma), linear_(std::move(linear)), disparity_(std::move(disparity)) {
    gamma.validate();
    if (disparity_.size() != linear_.pixel_count() || linear_.channels() != 3) {
      throw std::invalid_argument("render_defocus: disparity/color mismatch");
    }
    px_scale_ = aperture_px_scale(linear_.width(), linear_.height());
  }

  const LinearImage& linear() const noexcept { return linear_; }
  std::span<const double> disparity() const noexcept { return disparity_; }
  const DisparityRange& range() const noexcept { return range_; }
  double px_scale() const noexcept { return px_scale_; }
  const GammaSpec& gamma() const noexcept { return gamma_; }
  int width() const noexcept { return linear_.width(); }
  int height() const noexcept { return linear_.height(); }

  RenderResult render(const LensParams& lens, const CoCProfile& profile = {},
                      const RenderOptions& opts = {}) const {
    detail::check_inputs(lens, profile);
    const auto radii = radii_for(lens, profile, opts);
    const auto acc = detail::scatter<false>(linear_, radii, profile, opts.threads);

    RenderResult result{DisplayImage(width(), height(), 3), LinearImage(width(), height(), 3),
                        stats_for(radii)};
    auto lin = result.linear.values();
    auto out = result.image.values();
    const double inv_gamma = 1.0 / gamma_.gamma;
    for (std::size_t p = 0; p < linear_.pixel_count(); ++p) {
      const double* a = &acc[p * 4];
      for (int c = 0; c < 3; ++c) {
        const double v = a[c] / a[3];
        lin[p * 3 + c] = v;
        out[p * 3 + c] = std::pow(v, inv_gamma);
      }
    }
    return result;
  }

  RenderGradResult render_grad(const LensParams& lens, const CoCProfile& profile = {},
                               const RenderOptions& opts = {}) const {
    detail::check_inputs(lens, profile);
    const auto radii = radii_for(lens, profile, opts);
    const auto acc = detail::scatter<true>(linear_, radii, profile, opts.threads);

    RenderGradResult result{DisplayImage(width(), height(), 3), LinearImage(width(), height(), 3),
                            {DisplayImage(width(), height(), 3), DisplayImage(width(), height(), 3)},
                            stats_for(radii)};
    auto lin = result.linear.values();
    auto out = result.image.values();
    auto dA = result.gradients.d_aperture.values();
    auto dF = result.gradients.d_focus.values();
    const double inv_gamma = 1.0 / gamma_.gamma;
    for (std::size_t p = 0; p < linear_.pixel_count(); ++p) {
      const double* a = &acc[p * 12];
      const double phi = a[3];
      for (int c = 0; c < 3; ++c) {
        const double v = a[c] / phi;
        const double dv_da = (a[4 + c] - v * a[7]) / phi;
        const double dv_df = (a[8 + c] - v * a[11]) / phi;
        const double enc = std::pow(v, inv_gamma);
        // d(v^(1/g))/dv = enc / (g v); a black pixel has no usable slope.
        const double slope = v > 0.0 ? inv_gamma * enc / v : 0.0;
        const std::size_t k = p * 3 + c;
        lin[k] = v;
        out[k] = enc;
        dA[k] = slope * dv_da;
        dF[k] = slope * dv_df;
      }
    }
    return result;
  }

 private:
  detail::SourceRadii radii_for(const LensParams& lens, const CoCProfile& profile,
                                const RenderOptions& opts) const {
    if (!opts.aperture_scale.empty()) {
      if (opts.aperture_scale.size() != disparity_.size()) {
        throw std::invalid_argument("aperture field size does not match image");
      }
      for (double s : opts.aperture_scale) {
        if (!std::isfinite(s) || s < 0.0) throw std::domain_error("aperture field must be >= 0");
      }
    }
    return detail::source_radii(disparity_, px_scale_, lens, opts.aperture_scale,
                                profile.max_radius_px);
  }

  RenderStats stats_for(const detail::SourceRadii& radii) const {
    return {radii.clamped, clamped_inputs_, radii.max_radius};
  }

  GammaSpec gamma_;
  LinearImage linear_;
  std::vector<double> disparity_;
  DisparityRange range_{};
  double px_scale_ = 1.0;
  std::size_t clamped_inputs_ = 0;
};

inline RenderResult render_defocus(const DisplayImage& color, const DepthMap& depth,
                                   const LensParams& lens, const CoCProfile& profile = {},
                                   const GammaSpec& gamma = {}, const RenderOptions& opts = {}) {
  detail::check_inputs(lens, profile);
  return DefocusScene(color, depth, gamma, opts.disparity_range).render(lens, profile, opts);
}

// Render with a per-pixel aperture field (A' from apply_adaptation_aperture).
inline RenderResult render_defocus(const DisplayImage& color, const DepthMap& depth,
                                   const ApertureField& aperture, double focus,
                                   const CoCProfile& profile = {}, const GammaSpec& gamma = {},
                                   RenderOptions opts = {}) {
  if (aperture.width != depth.width() || aperture.height != depth.height()) {
    throw std::invalid_argument("aperture field dimensions differ from depth map");
  }
  opts.aperture_scale = aperture.values;
  return render_defocus(color, depth, LensParams{1.0, focus}, profile, gamma, opts);
}

inline RenderGradResult render_defocus_grad(const DisplayImage& color, const DepthMap& depth,
                                            const LensParams& lens, const CoCProfile& profile = {},
                                            const GammaSpec& gamma = {},
                                            const RenderOptions& opts = {}) {
  detail::check_inputs(lens, profile);
  return DefocusScene(color, depth, gamma, opts.disparity_range).render_grad(lens, profile, opts);
}

inline constexpr int kOracleMaxSide = 64;

// Reference renderer: every source/target pair, no radius clamp, no banding.
inline RenderResult render_defocus_oracle(const DisplayImage& color, const DepthMap& depth,
                                          const LensParams& lens, const CoCProfile& profile = {},
                                          const GammaSpec& gamma = {},
                                          const RenderOptions& opts = {}) {
  detail::check_inputs(lens, profile);
  require_same_dims(color, depth, "render_defocus_oracle");
  const int width = color.width();
  const int height = color.height();
  if (width > kOracleMaxSide || height > kOracleMaxSide) {
    throw std::invalid_argument("render_defocus_oracle: image larger than 64x64");
  }
  const auto decoded = gamma_decode(color, gamma);
  const auto disparity =
      normalized_disparity(depth, opts.disparity_range.value_or(DisparityRange::of(depth)));
  const double px_scale = aperture_px_scale(width, height);
  const std::size_t n = static_cast<std::size_t>(width) * height;

  RenderResult result{DisplayImage(width, height, 3), LinearImage(width, height, 3), {}};
  result.stats.clamped_inputs = decoded.clamped;
  for (std::size_t j = 0; j < n; ++j) {
    const int xj = static_cast<int>(j % width);
    const int yj = static_cast<int>(j / width);
    double num[3] = {0.0, 0.0, 0.0};
    double phi = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double scale = opts.aperture_scale.empty() ? 1.0 : opts.aperture_scale[i];
      const double r = coc_radius_disparity(lens, disparity[i], px_scale) * scale;
      double w = 0.0;
      if (r == 0.0) {
        w = i == j ? 0.5 : 0.0;
      } else {
        const double dx = xj - static_cast<int>(i % width);
        const double dy = yj - static_cast<int>(i / width);
        w = scatter_weight(profile, dx, dy, r);
      }
      for (int c = 0; c < 3; ++c) num[c] += w * decoded.image.values()[i * 3 + c];
      phi += w;
    }
    for (int c = 0; c < 3; ++c) {
      const double v = num[c] / phi;
      result.linear.values()[j * 3 + c] = v;
      result.image.values()[j * 3 + c] = std::pow(v, 1.0 / gamma.gamma);
    }
  }
  return result;
}

}  // namespace dofkit
