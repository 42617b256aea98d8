#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dofkit/image.hpp"
#include "dofkit/metrics.hpp"
#include "dofkit/optics.hpp"
#include "dofkit/render.hpp"

namespace dofkit {

template <typename Space>
double dssim(const BasicImage<Space>& x, const BasicImage<Space>& y, const SsimConfig& cfg = {}) {
  return (1.0 - ssim(x, y, cfg).mean) / 2.0;
}

// (1 - lambda) * L1 + lambda * D-SSIM.
template <typename Space>
double loss_rec(const BasicImage<Space>& render, const BasicImage<Space>& observed,
                double lambda_rec = 0.2) {
  if (lambda_rec < 0.0 || lambda_rec > 1.0) throw std::domain_error("lambda_rec must be in [0, 1]");
  require_same_shape(render, observed, "loss_rec");
  double value = (1.0 - lambda_rec) * l1(render, observed);
  if (lambda_rec > 0.0) value += lambda_rec * dssim(render, observed);
  return value;
}

// Per-pixel reconstruction loss whose pixel mean equals loss_rec. The D-SSIM
// part is the SSIM map on its valid region, rescaled by N / N_valid.
template <typename Space>
std::vector<double> loss_rec_map(const BasicImage<Space>& render,
                                 const BasicImage<Space>& observed, double lambda_rec = 0.2) {
  require_same_shape(render, observed, "loss_rec_map");
  const std::size_t n = render.pixel_count();
  const int channels = render.channels();
  std::vector<double> out(n, 0.0);
  auto a = render.values();
  auto b = observed.values();
  for (std::size_t p = 0; p < n; ++p) {
    double s = 0.0;
    for (int c = 0; c < channels; ++c) s += std::abs(a[p * channels + c] - b[p * channels + c]);
    out[p] = (1.0 - lambda_rec) * s / channels;
  }
  if (lambda_rec > 0.0) {
    const auto s = ssim(render, observed);
    const double scale = static_cast<double>(n) / static_cast<double>(s.valid_count);
    for (std::size_t p = 0; p < n; ++p) {
      if (s.valid[p]) out[p] += lambda_rec * scale * (1.0 - s.map[p]) / 2.0;
    }
  }
  return out;
}

struct FitConfig {
  double lambda_rec = 0.2;
  double adapt_a = 15.0;
  double adapt_b = 0.3;
  std::optional<int> adapt_t;  // default: max_iters / 3
  int max_iters = 150;
  double step_aperture = 0.05;
  double step_focus = 0.02;
  double init_aperture = 0.3;
  double init_focus = 0.5;
  double tolerance = 5e-4;
  int convergence_window = 50;
  // Coarse (aperture, focus) sweep that picks the descent start point; the
  // configured init point is always one of the candidates.
  bool init_sweep = true;
  CoCProfile profile{};
  GammaSpec gamma{};
  unsigned threads = 0;

  int adaptation_threshold() const { return adapt_t.value_or(max_iters / 3); }

  void validate() const {
    if (!(lambda_rec >= 0.0 && lambda_rec <= 1.0)) throw std::domain_error("lambda_rec must be in [0, 1]");
    if (!(adapt_a > 0.0)) throw std::domain_error("adapt_a must be > 0");
    if (!std::isfinite(adapt_b)) throw std::domain_error("adapt_b must be finite");
    if (adapt_t && *adapt_t < 0) throw std::domain_error("adapt_t must be >= 0");
    if (max_iters <= 0) throw std::domain_error("max_iters must be > 0");
    if (!(step_aperture > 0.0) || !(step_focus > 0.0)) throw std::domain_error("step sizes must be > 0");
    if (!(tolerance > 0.0)) throw std::domain_error("tolerance must be > 0");
    if (convergence_window <= 0) throw std::domain_error("convergence_window must be > 0");
    profile.validate();
    gamma.validate();
  }
};

// Box constraints applied to the fitted parameters.
inline constexpr double kMaxAperture = 2.0;
inline constexpr double kMinFocus = 0.01;
inline constexpr double kStallTrust = 1e-3;

inline LensParams project_lens(LensParams lens) {
  lens.aperture = std::clamp(lens.aperture, 0.0, kMaxAperture);
  lens.focus = std::clamp(lens.focus, kMinFocus, 1.0);
  return lens;
}

inline double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Step-gated sigmoid weight: 1 before the threshold iteration, then
// 1 / (1 + exp(-a (x - b))) elementwise.
inline std::vector<double> adaptation_weight(std::span<const double> x, int iterations,
                                             const FitConfig& cfg) {
  std::vector<double> psi(x.size(), 1.0);
  if (iterations < cfg.adaptation_threshold()) return psi;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] >= 0.0)) throw std::domain_error("adaptation input must be >= 0");
    psi[i] = logistic(cfg.adapt_a * (x[i] - cfg.adapt_b));
  }
  return psi;
}

// |focus - disparity| per pixel, the argument of the adaptation weight.
inline std::vector<double> focus_offset(std::span<const double> disparity, double focus) {
  std::vector<double> x(disparity.size());
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = std::abs(focus - disparity[i]);
  return x;
}

struct Objective {
  double value = 0.0;
  double d_aperture = 0.0;
  double d_focus = 0.0;
  DisplayImage render;
};

// Psi-weighted reconstruction objective of a scene rendered with `lens`:
// mean_p psi_p * l_rec,p, where the aperture is also reweighted by psi. psi is
// held fixed (not differentiated). Empty psi means psi == 1.
inline Objective reconstruction_objective(const DefocusScene& scene, const DisplayImage& observed,
                                          const LensParams& lens, const FitConfig& cfg,
                                          std::span<const double> psi, bool with_gradient) {
  require_same_shape(scene.linear(), observed, "reconstruction_objective");
  RenderOptions opts;
  opts.threads = cfg.threads;
  opts.aperture_scale = psi;

  const double lambda = cfg.lambda_rec;
  const std::size_t n = observed.pixel_count();
  const int channels = observed.channels();
  const auto weight = [&](std::size_t p) { return psi.empty() ? 1.0 : psi[p]; };

  auto eval = [&](const DisplayImage& render, DisplayImage* grad_out) {
    auto a = render.values();
    auto b = observed.values();
    double l1_sum = 0.0;
    const double l1_scale = (1.0 - lambda) / static_cast<double>(n * channels);
    for (std::size_t p = 0; p < n; ++p) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t k = p * channels + c;
        const double d = a[k] - b[k];
        l1_sum += weight(p) * std::abs(d);
        if (grad_out) {
          grad_out->values()[k] = l1_scale * weight(p) * (d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0));
        }
      }
    }
    double value = l1_scale * l1_sum;
    if (lambda > 0.0) {
      const auto s = ssim(render, observed);
      double acc = 0.0;
      for (std::size_t p = 0; p < n; ++p) {
        if (s.valid[p]) acc += weight(p) * (1.0 - s.map[p]) / 2.0;
      }
      const double inv_valid = 1.0 / static_cast<double>(s.valid_count);
      value += lambda * acc * inv_valid;
      if (grad_out) {
        const auto g = ssim_weighted_gradient(render, observed, psi);
        auto out = grad_out->values();
        auto gv = g.values();
        for (std::size_t k = 0; k < out.size(); ++k) out[k] -= lambda * 0.5 * inv_valid * gv[k];
      }
    }
    return value;
  };

  Objective result;
  if (!with_gradient) {
    auto r = scene.render(lens, cfg.profile, opts);
    result.value = eval(r.image, nullptr);
    result.render = std::move(r.image);
    return result;
  }
  auto r = scene.render_grad(lens, cfg.profile, opts);
  DisplayImage grad(observed.width(), observed.height(), channels);
  result.value = eval(r.image, &grad);
  auto g = grad.values();
  auto dA = r.gradients.d_aperture.values();
  auto dF = r.gradients.d_focus.values();
  for (std::size_t k = 0; k < g.size(); ++k) {
    result.d_aperture += g[k] * dA[k];
    result.d_focus += g[k] * dF[k];
  }
  result.render = std::move(r.image);
  return result;
}

struct FitStep {
  int iteration = 0;
  double aperture = 0.0;
  double focus = 0.0;
  double loss = 0.0;       // plain reconstruction loss at (aperture, focus)
  double objective = 0.0;  // the (possibly psi-weighted) value being minimized
  bool adapted = false;
};

struct FitTrace {
  std::vector<FitStep> steps;
  bool converged = false;
  int converged_at = -1;
  int adaptation_start = -1;
  double psi_min = 1.0;
  double psi_mean = 1.0;
  double psi_max = 1.0;
};

struct FitResult {
  LensParams lens;
  FitTrace trace;
};

class FitDivergence : public std::runtime_error {
 public:
  FitDivergence(const std::string& what, FitTrace trace)
      : std::runtime_error(what), trace_(std::move(trace)) {}
  const FitTrace& trace() const noexcept { return trace_; }

 private:
  FitTrace trace_;
};

namespace detail {

struct AdamState {
  double m[2] = {0.0, 0.0};
  double v[2] = {0.0, 0.0};
  int t = 0;

  void reset() { *this = AdamState{}; }
};

inline constexpr int kMaxBacktracks = 3;

inline LensParams sweep_start(const DefocusScene& scene, const DisplayImage& observed,
                              const FitConfig& cfg) {
  LensParams best = project_lens({cfg.init_aperture, cfg.init_focus});
  double best_value = reconstruction_objective(scene, observed, best, cfg, {}, false).value;
  for (double aperture : {0.1, 0.2, 0.35, 0.5, 0.7, 1.0, 1.4}) {
    for (int k = 1; k <= 9; ++k) {
      const LensParams candidate{aperture, 0.1 * k};
      const double value = reconstruction_objective(scene, observed, candidate, cfg, {}, false).value;
      if (value < best_value) {
        best_value = value;
        best = candidate;
      }
    }
  }
  return best;
}

}  // namespace detail

// Recovers (aperture, focus) of `observed` given the all-in-focus `sharp`
// image and its depth by minimizing the reconstruction loss of the defocus
// renderer. Each iteration takes an Adam direction and backtracks until the
// objective does not increase, so the objective trace is monotone within a
// phase. The adaptation phase starts once the parameters converged and the
// threshold iteration is reached. Returns the parameters with the lowest
// plain reconstruction loss.
inline FitResult fit_lens(const DefocusScene& scene, const DisplayImage& observed,
                          const FitConfig& cfg = {}) {
  cfg.validate();
  require_same_shape(scene.linear(), observed, "fit_lens");
  for (double v : observed.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::domain_error("fit_lens: observed values must be in [0, 1]");
  }

  FitTrace trace;
  LensParams lens = cfg.init_sweep ? detail::sweep_start(scene, observed, cfg)
                                   : project_lens({cfg.init_aperture, cfg.init_focus});
  LensParams best = lens;
  double best_loss = std::numeric_limits<double>::infinity();
  detail::AdamState adam;
  const double lr[2] = {cfg.step_aperture, cfg.step_focus};
  constexpr double beta1 = 0.9;
  constexpr double beta2 = 0.999;
  constexpr double eps = 1e-12;
  bool adapted = false;
  double trust = 1.0;  // shrinks when no backtracked step decreases the objective
  std::vector<double> psi;
  std::optional<Objective> cached;  // gradient evaluation at `lens`, when still valid

  const int threshold = cfg.adaptation_threshold();
  for (int it = 0; it < cfg.max_iters; ++it) {
    if (adapted) {
      psi = adaptation_weight(focus_offset(scene.disparity(), lens.focus), it, cfg);
      cached.reset();
    }
    Objective current = cached ? std::move(*cached)
                               : reconstruction_objective(scene, observed, lens, cfg, psi, true);
    cached.reset();
    RenderOptions plain_opts;
    plain_opts.threads = cfg.threads;
    const double plain = adapted ? loss_rec(scene.render(lens, cfg.profile, plain_opts).image,
                                            observed, cfg.lambda_rec)
                                 : current.value;
    if (!std::isfinite(current.value) || !std::isfinite(plain) ||
        !std::isfinite(current.d_aperture) || !std::isfinite(current.d_focus)) {
      throw FitDivergence("fit_lens: loss diverged at iteration " + std::to_string(it),
                          std::move(trace));
    }
    trace.steps.push_back({it, lens.aperture, lens.focus, plain, current.value, adapted});
    if (plain < best_loss) {
      best_loss = plain;
      best = lens;
    }

    const int window = cfg.convergence_window;
    if (!trace.converged && it >= window) {
      const auto& past = trace.steps[static_cast<std::size_t>(it - window)];
      const double change =
          std::max(std::abs(lens.aperture - past.aperture), std::abs(lens.focus - past.focus));
      if (change < cfg.tolerance) {
        trace.converged = true;
        trace.converged_at = it;
      }
    }
    if (!adapted && trace.converged && it + 1 >= threshold) {
      adapted = true;
      trace.adaptation_start = it + 1;
      adam.reset();
      trust = 1.0;
    }

    // Adam direction with a cosine-decayed step.
    const double grad[2] = {current.d_aperture, current.d_focus};
    ++adam.t;
    const double decay =
        0.05 + 0.95 * 0.5 * (1.0 + std::cos(std::numbers::pi * it / cfg.max_iters));
    double step[2];
    for (int k = 0; k < 2; ++k) {
      adam.m[k] = beta1 * adam.m[k] + (1.0 - beta1) * grad[k];
      adam.v[k] = beta2 * adam.v[k] + (1.0 - beta2) * grad[k] * grad[k];
      const double mhat = adam.m[k] / (1.0 - std::pow(beta1, adam.t));
      const double vhat = adam.v[k] / (1.0 - std::pow(beta2, adam.t));
      step[k] = trust * lr[k] * decay * mhat / (std::sqrt(vhat) + eps);
    }

    // The next iteration reuses the accepted trial's gradient unless psi
    // will be recomputed.
    bool accepted = false;
    for (int bt = 0; bt <= detail::kMaxBacktracks && !accepted; ++bt) {
      const double shrink = std::ldexp(1.0, -bt);
      const LensParams trial =
          project_lens({lens.aperture - shrink * step[0], lens.focus - shrink * step[1]});
      if (trial == lens) break;
      auto eval = reconstruction_objective(scene, observed, trial, cfg, psi, !adapted);
      if (std::isfinite(eval.value) && eval.value <= current.value) {
        lens = trial;
        accepted = true;
        if (!adapted) cached = std::move(eval);
      }
    }
    if (!accepted) {
      adam.reset();
      trust *= 0.25;
      if (!adapted) cached = std::move(current);
    }
    // No step of meaningful size decreases the objective any more.
    if (adapted && trust < kStallTrust) break;
  }

  if (adapted) {
    const auto final_psi =
        adaptation_weight(focus_offset(scene.disparity(), lens.focus), cfg.max_iters, cfg);
    trace.psi_min = *std::min_element(final_psi.begin(), final_psi.end());
    trace.psi_max = *std::max_element(final_psi.begin(), final_psi.end());
    double sum = 0.0;
    for (double v : final_psi) sum += v;
    trace.psi_mean = sum / static_cast<double>(final_psi.size());
  }
  return {best, std::move(trace)};
}

inline FitResult fit_lens(const DisplayImage& sharp, const DepthMap& depth,
                          const DisplayImage& observed, const FitConfig& cfg = {}) {
  require_same_dims(sharp, depth, "fit_lens");
  return fit_lens(DefocusScene(sharp, depth, cfg.gamma), observed, cfg);
}

struct LensError {
  double aperture = 0.0;
  double focus = 0.0;
};

// Mean absolute aperture and focus errors over paired parameter lists.
inline LensError lens_error(std::span<const LensParams> fitted, std::span<const LensParams> truth) {
  if (fitted.size() != truth.size()) throw std::invalid_argument("lens_error: length mismatch");
  if (fitted.empty()) throw std::invalid_argument("lens_error: need at least one pair");
  LensError err;
  for (std::size_t i = 0; i < fitted.size(); ++i) {
    err.aperture += std::abs(truth[i].aperture - fitted[i].aperture);
    err.focus += std::abs(truth[i].focus - fitted[i].focus);
  }
  err.aperture /= static_cast<double>(fitted.size());
  err.focus /= static_cast<double>(fitted.size());
  return err;
}

}  // namespace dofkit
