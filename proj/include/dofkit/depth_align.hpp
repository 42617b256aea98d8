#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <vector>

#include "dofkit/image.hpp"

namespace dofkit {

struct SparseSample {
  int x = 0;
  int y = 0;
  double depth = 0.0;
};

// Sparse metric depth samples (e.g. projected SfM points) for one view.
struct SparseDepth {
  int width = 0;
  int height = 0;
  std::vector<SparseSample> samples;

  void validate() const {
    if (width <= 0 || height <= 0) throw std::invalid_argument("sparse depth: invalid dimensions");
    for (const auto& s : samples) {
      if (s.x < 0 || s.y < 0 || s.x >= width || s.y >= height) {
        throw std::out_of_range("sparse depth: sample outside image bounds");
      }
      if (!std::isfinite(s.depth) || s.depth <= 0.0) {
        throw std::domain_error("sparse depth: sample depth must be finite and > 0");
      }
    }
  }
};

// Dense depth prior alignment: aligned = exp(log_scale) * pred + bias.
struct AlignmentParams {
  double log_scale = 0.0;
  double bias = 0.0;
};

inline DepthMap apply_alignment(const DepthMap& pred, const AlignmentParams& params) {
  std::vector<double> out(pred.values().begin(), pred.values().end());
  const double scale = std::exp(params.log_scale);
  for (double& v : out) v = scale * v + params.bias;
  return DepthMap(pred.width(), pred.height(), std::move(out));
}

struct LossWeights {
  double w_depth = 0.01;
  double w_normal = 0.05;
  // w_depth decays geometrically to w_depth * final_ratio at the last iteration.
  double final_ratio = 0.1;

  double depth_weight_at(int iteration, int max_iters) const {
    if (max_iters <= 0) throw std::domain_error("max_iters must be > 0");
    const double t = std::clamp(static_cast<double>(iteration) / max_iters, 0.0, 1.0);
    return w_depth * std::pow(final_ratio, t);
  }

  void validate() const {
    if (!(w_depth >= 0.0) || !(w_normal >= 0.0)) throw std::domain_error("loss weights must be >= 0");
    if (!(final_ratio > 0.0)) throw std::domain_error("final_ratio must be > 0");
  }
};

namespace detail {

inline void check_sparse_against(const DepthMap& pred, const SparseDepth& sparse) {
  sparse.validate();
  if (sparse.width != pred.width() || sparse.height != pred.height()) {
    throw std::invalid_argument("sparse depth dimensions differ from the dense prediction");
  }
  if (sparse.samples.empty()) throw std::invalid_argument("sparse depth has no samples");
}

}  // namespace detail

// (1/2M) sum (log(e^s * pred) - log(sparse))^2 over the M sparse samples.
inline double silog_loss(const DepthMap& pred, const SparseDepth& sparse, double log_scale) {
  detail::check_sparse_against(pred, sparse);
  double sum = 0.0;
  for (const auto& s : sparse.samples) {
    const double residual = log_scale + std::log(pred.at(s.x, s.y)) - std::log(s.depth);
    sum += residual * residual;
  }
  return sum / (2.0 * static_cast<double>(sparse.samples.size()));
}

// Closed-form minimizer of silog_loss over the log-scale.
inline AlignmentParams fit_scale(const DepthMap& pred, const SparseDepth& sparse) {
  detail::check_sparse_against(pred, sparse);
  if (sparse.samples.size() < 2) throw std::invalid_argument("fit_scale needs at least 2 samples");
  double sum = 0.0;
  for (const auto& s : sparse.samples) sum += std::log(s.depth) - std::log(pred.at(s.x, s.y));
  return {sum / static_cast<double>(sparse.samples.size()), 0.0};
}

// Mean squared difference between two depth maps.
inline double depth_loss(const DepthMap& depth, const DepthMap& prior) {
  if (depth.width() != prior.width() || depth.height() != prior.height()) {
    throw std::invalid_argument("depth_loss: dimension mismatch");
  }
  auto a = depth.values();
  auto b = prior.values();
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

// Per-pixel squared difference; its mean is depth_loss.
inline std::vector<double> depth_loss_map(const DepthMap& depth, const DepthMap& prior) {
  if (depth.width() != prior.width() || depth.height() != prior.height()) {
    throw std::invalid_argument("depth_loss_map: dimension mismatch");
  }
  std::vector<double> out(depth.pixel_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double d = depth.values()[i] - prior.values()[i];
    out[i] = d * d;
  }
  return out;
}

using Normal = std::array<double, 3>;

struct NormalField {
  int width = 0;
  int height = 0;
  std::vector<Normal> normals;
};

// Unit normals of the depth surface z = d(x, y) with unit pixel spacing.
// Central differences inside, one-sided at the borders.
inline NormalField normal_from_depth(const DepthMap& depth) {
  const int w = depth.width();
  const int h = depth.height();
  if (w < 2 || h < 2) throw std::invalid_argument("normal_from_depth needs at least 2x2 pixels");
  NormalField field{w, h, std::vector<Normal>(depth.pixel_count())};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double gx;
      if (x == 0) {
        gx = depth.at(1, y) - depth.at(0, y);
      } else if (x == w - 1) {
        gx = depth.at(w - 1, y) - depth.at(w - 2, y);
      } else {
        gx = 0.5 * (depth.at(x + 1, y) - depth.at(x - 1, y));
      }
      double gy;
      if (y == 0) {
        gy = depth.at(x, 1) - depth.at(x, 0);
      } else if (y == h - 1) {
        gy = depth.at(x, h - 1) - depth.at(x, h - 2);
      } else {
        gy = 0.5 * (depth.at(x, y + 1) - depth.at(x, y - 1));
      }
      const double norm = std::sqrt(gx * gx + gy * gy + 1.0);
      field.normals[static_cast<std::size_t>(y) * w + x] = {-gx / norm, -gy / norm, 1.0 / norm};
    }
  }
  return field;
}

// sum_i w_i (1 - n_i . n_hat_i). Empty weights means w == 1.
inline double normal_consistency(const NormalField& n, const NormalField& n_hat,
                                 std::span<const double> weights = {}) {
  if (n.width != n_hat.width || n.height != n_hat.height ||
      n.normals.size() != n_hat.normals.size()) {
    throw std::invalid_argument("normal_consistency: dimension mismatch");
  }
  if (!weights.empty() && weights.size() != n.normals.size()) {
    throw std::invalid_argument("normal_consistency: weight field size mismatch");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < n.normals.size(); ++i) {
    const double w = weights.empty() ? 1.0 : weights[i];
    if (w < 0.0) throw std::domain_error("normal_consistency: weights must be >= 0");
    const auto& a = n.normals[i];
    const auto& b = n_hat.normals[i];
    sum += w * (1.0 - (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]));
  }
  return sum;
}

// mean_p psi_p * (rec_p + w_d * depth_p) + w_n * normal.
inline double total_loss(std::span<const double> rec, std::span<const double> depth,
                         double normal, std::span<const double> psi, const LossWeights& weights) {
  weights.validate();
  if (rec.size() != psi.size() || depth.size() != psi.size()) {
    throw std::invalid_argument("total_loss: field sizes differ from psi");
  }
  if (psi.empty()) throw std::invalid_argument("total_loss: empty fields");
  double sum = 0.0;
  for (std::size_t p = 0; p < psi.size(); ++p) {
    sum += psi[p] * (rec[p] + weights.w_depth * depth[p]);
  }
  return sum / static_cast<double>(psi.size()) + weights.w_normal * normal;
}

// Scalar losses broadcast over a psi field.
inline double total_loss(double rec, double depth, double normal, std::span<const double> psi,
                         const LossWeights& weights) {
  const std::vector<double> r(psi.size(), rec);
  const std::vector<double> d(psi.size(), depth);
  return total_loss(r, d, normal, psi, weights);
}

}  // namespace dofkit
