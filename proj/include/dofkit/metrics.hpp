#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <vector>

#include "dofkit/image.hpp"

namespace dofkit {

// Returned by psnr() for identical images.
inline constexpr double kPsnrInfinity = std::numeric_limits<double>::infinity();

template <typename Space>
double mse(const BasicImage<Space>& x, const BasicImage<Space>& y) {
  require_same_shape(x, y, "mse");
  auto a = x.values();
  auto b = y.values();
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

template <typename Space>
double psnr(const BasicImage<Space>& x, const BasicImage<Space>& y, double peak = 1.0) {
  const double err = mse(x, y);
  if (err == 0.0) return kPsnrInfinity;
  return 10.0 * std::log10(peak * peak / err);
}

template <typename Space>
double l1(const BasicImage<Space>& x, const BasicImage<Space>& y) {
  require_same_shape(x, y, "l1");
  auto a = x.values();
  auto b = y.values();
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) sum += std::abs(a[i] - b[i]);
  return sum / static_cast<double>(a.size());
}

struct SsimConfig {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }

  std::vector<double> kernel() const {
    if (window <= 0 || window % 2 == 0) throw std::invalid_argument("SSIM window must be odd");
    if (!(k1 > 0.0) || !(k2 > 0.0) || !(sigma > 0.0)) {
      throw std::invalid_argument("SSIM constants must be positive");
    }
    std::vector<double> g(window);
    const int half = window / 2;
    double sum = 0.0;
    for (int i = 0; i < window; ++i) {
      g[i] = std::exp(-0.5 * (i - half) * (i - half) / (sigma * sigma));
      sum += g[i];
    }
    for (double& v : g) v /= sum;
    return g;
  }
};

struct SsimResult {
  double mean = 0.0;
  int width = 0;
  int height = 0;
  // Channel-averaged SSIM at each window center; zero outside the valid region.
  std::vector<double> map;
  std::vector<std::uint8_t> valid;
  std::size_t valid_count = 0;
};

namespace detail {

// Separable "valid" correlation of one plane with a 1-D kernel in x and y.
inline std::vector<double> blur_valid(std::span<const double> plane, int width, int height,
                                      std::span<const double> g) {
  const int k = static_cast<int>(g.size());
  const int ow = width - k + 1;
  const int oh = height - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += g[i] * plane[static_cast<std::size_t>(y) * width + x + i];
      tmp[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(ow) * oh);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      double s = 0.0;
      for (int i = 0; i < k; ++i) s += g[i] * tmp[static_cast<std::size_t>(y + i) * ow + x];
      out[static_cast<std::size_t>(y) * ow + x] = s;
    }
  }
  return out;
}

// Adjoint of blur_valid: spreads a valid-region field back over the full plane.
inline std::vector<double> blur_valid_adjoint(std::span<const double> field, int width, int height,
                                              std::span<const double> g) {
  const int k = static_cast<int>(g.size());
  const int ow = width - k + 1;
  const int oh = height - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(ow) * height, 0.0);
  for (int y = 0; y < oh; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double v = field[static_cast<std::size_t>(y) * ow + x];
      for (int i = 0; i < k; ++i) tmp[static_cast<std::size_t>(y + i) * ow + x] += g[i] * v;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(width) * height, 0.0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < ow; ++x) {
      const double v = tmp[static_cast<std::size_t>(y) * ow + x];
      for (int i = 0; i < k; ++i) out[static_cast<std::size_t>(y) * width + x + i] += g[i] * v;
    }
  }
  return out;
}

inline std::vector<double> channel_plane(std::span<const double> values, int channels, int c) {
  std::vector<double> plane(values.size() / channels);
  for (std::size_t p = 0; p < plane.size(); ++p) plane[p] = values[p * channels + c];
  return plane;
}

// Local statistics of one channel pair over the valid region.
struct SsimStats {
  std::vector<double> mx, my, xx, yy, xy;
};

inline SsimStats ssim_stats(std::span<const double> x, std::span<const double> y, int width,
                            int height, std::span<const double> g) {
  std::vector<double> x2(x.size()), y2(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    x2[i] = x[i] * x[i];
    y2[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  return {blur_valid(x, width, height, g), blur_valid(y, width, height, g),
          blur_valid(x2, width, height, g), blur_valid(y2, width, height, g),
          blur_valid(xy, width, height, g)};
}

template <typename Space>
void require_ssim_size(const BasicImage<Space>& x, const SsimConfig& cfg) {
  if (x.width() < cfg.window || x.height() < cfg.window) {
    throw std::invalid_argument("ssim: image smaller than the SSIM window");
  }
}

}  // namespace detail

template <typename Space>
SsimResult ssim(const BasicImage<Space>& x, const BasicImage<Space>& y,
                const SsimConfig& cfg = {}) {
  require_same_shape(x, y, "ssim");
  detail::require_ssim_size(x, cfg);
  const auto g = cfg.kernel();
  const int w = x.width();
  const int h = x.height();
  const int half = cfg.window / 2;
  const int ow = w - cfg.window + 1;
  const int oh = h - cfg.window + 1;
  const double c1 = cfg.c1();
  const double c2 = cfg.c2();

  SsimResult result;
  result.width = w;
  result.height = h;
  result.map.assign(static_cast<std::size_t>(w) * h, 0.0);
  result.valid.assign(static_cast<std::size_t>(w) * h, 0);
  result.valid_count = static_cast<std::size_t>(ow) * oh;

  for (int c = 0; c < x.channels(); ++c) {
    const auto px = detail::channel_plane(x.values(), x.channels(), c);
    const auto py = detail::channel_plane(y.values(), y.channels(), c);
    const auto s = detail::ssim_stats(px, py, w, h, g);
    for (int v = 0; v < oh; ++v) {
      for (int u = 0; u < ow; ++u) {
        const std::size_t k = static_cast<std::size_t>(v) * ow + u;
        const double mx = s.mx[k];
        const double my = s.my[k];
        const double vx = s.xx[k] - mx * mx;
        const double vy = s.yy[k] - my * my;
        const double cov = s.xy[k] - mx * my;
        const double value = ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
                             ((mx * mx + my * my + c1) * (vx + vy + c2));
        result.map[static_cast<std::size_t>(v + half) * w + (u + half)] += value;
      }
    }
  }

  double total = 0.0;
  for (int v = 0; v < oh; ++v) {
    for (int u = 0; u < ow; ++u) {
      const std::size_t idx = static_cast<std::size_t>(v + half) * w + (u + half);
      result.valid[idx] = 1;
      result.map[idx] /= x.channels();
      total += result.map[idx];
    }
  }
  result.mean = total / static_cast<double>(result.valid_count);
  return result;
}

// Gradient with respect to x of sum_p weight_p * SSIM_p, where SSIM_p is the
// channel-averaged map value at window center p. `weights` is full-size;
// entries outside the valid region are ignored. Empty weights means 1.
template <typename Space>
BasicImage<Space> ssim_weighted_gradient(const BasicImage<Space>& x, const BasicImage<Space>& y,
                                         std::span<const double> weights,
                                         const SsimConfig& cfg = {}) {
  require_same_shape(x, y, "ssim_weighted_gradient");
  detail::require_ssim_size(x, cfg);
  const auto g = cfg.kernel();
  const int w = x.width();
  const int h = x.height();
  const int half = cfg.window / 2;
  const int ow = w - cfg.window + 1;
  const int oh = h - cfg.window + 1;
  const double c1 = cfg.c1();
  const double c2 = cfg.c2();
  const int channels = x.channels();

  BasicImage<Space> grad(w, h, channels);
  std::vector<double> a(static_cast<std::size_t>(ow) * oh);
  std::vector<double> b(a.size());
  std::vector<double> e(a.size());
  for (int c = 0; c < channels; ++c) {
    const auto px = detail::channel_plane(x.values(), channels, c);
    const auto py = detail::channel_plane(y.values(), channels, c);
    const auto s = detail::ssim_stats(px, py, w, h, g);
    for (int v = 0; v < oh; ++v) {
      for (int u = 0; u < ow; ++u) {
        const std::size_t k = static_cast<std::size_t>(v) * ow + u;
        const double wt =
            (weights.empty() ? 1.0 : weights[static_cast<std::size_t>(v + half) * w + u + half]) /
            channels;
        const double mx = s.mx[k];
        const double my = s.my[k];
        const double a1 = 2.0 * mx * my + c1;
        const double a2 = 2.0 * (s.xy[k] - mx * my) + c2;
        const double b1 = mx * mx + my * my + c1;
        const double b2 = (s.xx[k] - mx * mx) + (s.yy[k] - my * my) + c2;
        const double val = (a1 * a2) / (b1 * b2);
        // Partials with respect to the local mean, E[x^2] and E[xy].
        a[k] = wt * val * (2.0 * my / a1 - 2.0 * mx / b1 - 2.0 * my / a2 + 2.0 * mx / b2);
        b[k] = wt * val * (-1.0 / b2);
        e[k] = wt * val * (2.0 / a2);
      }
    }
    const auto ta = detail::blur_valid_adjoint(a, w, h, g);
    const auto tb = detail::blur_valid_adjoint(b, w, h, g);
    const auto te = detail::blur_valid_adjoint(e, w, h, g);
    auto out = grad.values();
    for (std::size_t p = 0; p < px.size(); ++p) {
      out[p * channels + c] = ta[p] + 2.0 * px[p] * tb[p] + py[p] * te[p];
    }
  }
  return grad;
}

}  // namespace dofkit
