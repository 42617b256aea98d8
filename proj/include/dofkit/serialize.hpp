#pragma once

#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

#include "dofkit/lens_fit.hpp"
#include "dofkit/optics.hpp"

namespace dofkit {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

// Raised on schema violations; `field` names the offending key.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

namespace detail {

inline double json_number(const Json& obj, const std::string& key) {
  const auto& v = obj.at(key);
  if (!v.is_number()) throw ConfigError(key, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) throw ConfigError(key, "must be finite");
  return d;
}

inline int json_int(const Json& obj, const std::string& key) {
  const auto& v = obj.at(key);
  if (!v.is_number_integer()) throw ConfigError(key, "expected an integer");
  return v.get<int>();
}

inline bool json_bool(const Json& obj, const std::string& key) {
  const auto& v = obj.at(key);
  if (!v.is_boolean()) throw ConfigError(key, "expected true or false");
  return v.get<bool>();
}

inline std::string json_string(const Json& obj, const std::string& key) {
  const auto& v = obj.at(key);
  if (!v.is_string()) throw ConfigError(key, "expected a string");
  return v.get<std::string>();
}

inline void reject_unknown(const Json& obj, const std::set<std::string>& known) {
  for (const auto& [key, _] : obj.items()) {
    if (!known.contains(key)) throw ConfigError(key, "unknown field");
  }
}

// Re-throws a validate() failure as a field diagnostic.
template <typename F>
void check_field(const std::string& field, F&& check) {
  try {
    check();
  } catch (const std::exception& e) {
    throw ConfigError(field, e.what());
  }
}

}  // namespace detail

inline FitConfig fit_config_from_json(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("<root>", "config must be a JSON object");
  detail::reject_unknown(doc, {"lambda_rec", "adapt_a", "adapt_b", "adapt_t", "max_iters",
                               "step_aperture", "step_focus", "init_aperture", "init_focus",
                               "tolerance", "convergence_window", "init_sweep", "alpha", "shape",
                               "shape_rotation", "max_radius_px", "gamma", "threads"});
  FitConfig cfg;
  auto num = [&](const char* key, double& out) {
    if (doc.contains(key)) out = detail::json_number(doc, key);
  };
  auto integer = [&](const char* key, int& out) {
    if (doc.contains(key)) out = detail::json_int(doc, key);
  };
  num("lambda_rec", cfg.lambda_rec);
  num("adapt_a", cfg.adapt_a);
  num("adapt_b", cfg.adapt_b);
  if (doc.contains("adapt_t")) cfg.adapt_t = detail::json_int(doc, "adapt_t");
  integer("max_iters", cfg.max_iters);
  num("step_aperture", cfg.step_aperture);
  num("step_focus", cfg.step_focus);
  num("init_aperture", cfg.init_aperture);
  num("init_focus", cfg.init_focus);
  num("tolerance", cfg.tolerance);
  integer("convergence_window", cfg.convergence_window);
  if (doc.contains("init_sweep")) cfg.init_sweep = detail::json_bool(doc, "init_sweep");
  num("alpha", cfg.profile.alpha);
  if (doc.contains("shape")) {
    detail::check_field("shape", [&] { cfg.profile.shape = parse_shape(detail::json_string(doc, "shape")); });
  }
  num("shape_rotation", cfg.profile.shape_rotation);
  num("max_radius_px", cfg.profile.max_radius_px);
  num("gamma", cfg.gamma.gamma);
  if (doc.contains("threads")) {
    const int t = detail::json_int(doc, "threads");
    if (t < 0) throw ConfigError("threads", "must be >= 0");
    cfg.threads = static_cast<unsigned>(t);
  }

  detail::check_field("lambda_rec", [&] {
    if (!(cfg.lambda_rec >= 0.0 && cfg.lambda_rec <= 1.0)) throw std::domain_error("must be in [0, 1]");
  });
  detail::check_field("adapt_a", [&] { if (!(cfg.adapt_a > 0.0)) throw std::domain_error("must be > 0"); });
  detail::check_field("adapt_t", [&] { if (cfg.adapt_t && *cfg.adapt_t < 0) throw std::domain_error("must be >= 0"); });
  detail::check_field("max_iters", [&] { if (cfg.max_iters <= 0) throw std::domain_error("must be > 0"); });
  detail::check_field("step_aperture", [&] { if (!(cfg.step_aperture > 0.0)) throw std::domain_error("must be > 0"); });
  detail::check_field("step_focus", [&] { if (!(cfg.step_focus > 0.0)) throw std::domain_error("must be > 0"); });
  detail::check_field("init_aperture", [&] { if (cfg.init_aperture < 0.0) throw std::domain_error("must be >= 0"); });
  detail::check_field("init_focus", [&] {
    if (!(cfg.init_focus > 0.0 && cfg.init_focus <= 1.0)) throw std::domain_error("must lie in (0, 1]");
  });
  detail::check_field("tolerance", [&] { if (!(cfg.tolerance > 0.0)) throw std::domain_error("must be > 0"); });
  detail::check_field("convergence_window", [&] {
    if (cfg.convergence_window <= 0) throw std::domain_error("must be > 0");
  });
  detail::check_field("alpha", [&] { if (!(cfg.profile.alpha > 0.0)) throw std::domain_error("must be > 0"); });
  detail::check_field("max_radius_px", [&] {
    if (!(cfg.profile.max_radius_px >= 1.0)) throw std::domain_error("must be >= 1");
  });
  detail::check_field("gamma", [&] { cfg.gamma.validate(); });
  return cfg;
}

inline FitConfig parse_fit_config(const std::string& text) {
  Json doc;
  try {
    doc = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError("<root>", std::string("malformed JSON: ") + e.what());
  }
  return fit_config_from_json(doc);
}

inline OrderedJson lens_to_json(const LensParams& lens) {
  return OrderedJson{{"aperture", lens.aperture}, {"focus", lens.focus}};
}

inline LensParams lens_from_json(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("<root>", "lens must be an object");
  LensParams lens{detail::json_number(doc, "aperture"), detail::json_number(doc, "focus")};
  detail::check_field("lens", [&] { lens.validate(); });
  return lens;
}

inline OrderedJson fit_result_to_json(const FitResult& fit) {
  const auto& t = fit.trace;
  return OrderedJson{{"aperture", fit.lens.aperture},
                     {"focus", fit.lens.focus},
                     {"iterations", t.steps.size()},
                     {"converged", t.converged},
                     {"converged_at", t.converged_at},
                     {"adaptation_start", t.adaptation_start},
                     {"final_loss", t.steps.empty() ? 0.0 : t.steps.back().loss},
                     {"psi", {{"min", t.psi_min}, {"mean", t.psi_mean}, {"max", t.psi_max}}}};
}

// One JSON object per line.
inline std::string trace_to_jsonl(const FitTrace& trace) {
  std::string out;
  for (const auto& s : trace.steps) {
    out += OrderedJson{{"iteration", s.iteration}, {"aperture", s.aperture}, {"focus", s.focus},
                       {"loss", s.loss}, {"objective", s.objective}, {"adapted", s.adapted}}
               .dump();
    out += '\n';
  }
  return out;
}

// JSON has no infinity; the PSNR sentinel is written as the string "inf".
inline Json metric_to_json(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

inline double metric_from_json(const Json& v) {
  if (v.is_string()) {
    if (v == "inf") return std::numeric_limits<double>::infinity();
    if (v == "-inf") return -std::numeric_limits<double>::infinity();
    throw ConfigError("metric", "unexpected string '" + v.get<std::string>() + "'");
  }
  return v.get<double>();
}

}  // namespace dofkit
