#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "dofkit/io.hpp"
#include "dofkit/lens_fit.hpp"
#include "dofkit/metrics.hpp"
#include "dofkit/render.hpp"
#include "dofkit/serialize.hpp"

namespace dofkit {

namespace fs = std::filesystem;

inline constexpr int kManifestVersion = 1;
inline constexpr const char* kRendererTag = "dofkit-render/1";
inline constexpr int kTestEvery = 8;

enum class Assignment { grid, round_robin };

inline std::string_view to_string(Assignment a) {
  return a == Assignment::grid ? "grid" : "round_robin";
}

inline Assignment parse_assignment(std::string_view s) {
  if (s == "grid") return Assignment::grid;
  if (s == "round_robin") return Assignment::round_robin;
  throw std::invalid_argument("unknown assignment '" + std::string(s) + "'");
}

// Paths are relative to the manifest's directory.
struct ManifestEntry {
  std::string image;   // defocused observation
  std::string source;  // all-in-focus input
  std::string depth;
  std::string split;   // "train" or "test"
  double gt_aperture = 0.0;
  double gt_focus = 0.5;

  LensParams lens() const { return {gt_aperture, gt_focus}; }
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  int version = kManifestVersion;
  std::string renderer = kRendererTag;
  std::string scene;
  std::string aperture_normalization = "longest_side";
  DisparityRange disparity_range{};
  CoCProfile profile{};
  GammaSpec gamma{};
  Assignment assignment = Assignment::grid;
  std::vector<ManifestEntry> entries;

  std::vector<const ManifestEntry*> split(std::string_view name) const {
    std::vector<const ManifestEntry*> out;
    for (const auto& e : entries) {
      if (e.split == name) out.push_back(&e);
    }
    return out;
  }
};

// Supplementary preset grid: focus on background, mid-ground and foreground,
// each with a small and a large aperture.
inline std::vector<LensParams> default_preset_grid() {
  std::vector<LensParams> grid;
  for (double f : {0.2, 0.5, 0.8}) {
    for (double a : {0.5, 1.0}) grid.push_back({a, f});
  }
  return grid;
}

inline Json manifest_to_json(const DatasetManifest& m) {
  Json entries = Json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"image", e.image},
                       {"source", e.source},
                       {"depth", e.depth},
                       {"split", e.split},
                       {"gt_aperture", e.gt_aperture},
                       {"gt_focus", e.gt_focus}});
  }
  return Json{{"version", m.version},
              {"renderer", m.renderer},
              {"scene", m.scene},
              {"aperture_normalization", m.aperture_normalization},
              {"aperture_px_scale", "max(width, height)"},
              {"disparity_range", {{"near", m.disparity_range.near_depth}, {"far", m.disparity_range.far_depth}}},
              {"alpha", m.profile.alpha},
              {"shape", std::string(to_string(m.profile.shape))},
              {"shape_rotation", m.profile.shape_rotation},
              {"max_radius_px", m.profile.max_radius_px},
              {"gamma", m.gamma.gamma},
              {"assignment", std::string(to_string(m.assignment))},
              {"entries", std::move(entries)}};
}

// Keys are sorted and numbers use shortest round-trip formatting, so
// write -> read -> write is byte-identical.
inline std::string dump_manifest(const DatasetManifest& m) { return manifest_to_json(m).dump(2) + "\n"; }

inline DatasetManifest manifest_from_json(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("<root>", "manifest must be an object");
  DatasetManifest m;
  try {
    m.version = doc.at("version").get<int>();
    if (m.version != kManifestVersion) {
      throw ConfigError("version", "unsupported manifest version " + std::to_string(m.version));
    }
    m.renderer = doc.at("renderer").get<std::string>();
    m.scene = doc.at("scene").get<std::string>();
    m.aperture_normalization = doc.at("aperture_normalization").get<std::string>();
    if (m.aperture_normalization != "longest_side") {
      throw ConfigError("aperture_normalization", "only 'longest_side' is supported");
    }
    const auto& range = doc.at("disparity_range");
    m.disparity_range = {range.at("near").get<double>(), range.at("far").get<double>()};
    m.profile.alpha = doc.at("alpha").get<double>();
    m.profile.shape = parse_shape(doc.at("shape").get<std::string>());
    m.profile.shape_rotation = doc.value("shape_rotation", 0.0);
    m.profile.max_radius_px = doc.value("max_radius_px", CoCProfile{}.max_radius_px);
    m.gamma.gamma = doc.at("gamma").get<double>();
    m.assignment = parse_assignment(doc.value("assignment", std::string("grid")));
    for (const auto& e : doc.at("entries")) {
      ManifestEntry entry{e.at("image").get<std::string>(), e.at("source").get<std::string>(),
                          e.at("depth").get<std::string>(), e.at("split").get<std::string>(),
                          e.at("gt_aperture").get<double>(), e.at("gt_focus").get<double>()};
      if (entry.split != "train" && entry.split != "test") {
        throw ConfigError("entries.split", "must be 'train' or 'test'");
      }
      detail::check_field("entries.gt", [&] { entry.lens().validate(); });
      m.entries.push_back(std::move(entry));
    }
  } catch (const Json::exception& e) {
    throw ConfigError("manifest", e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError("manifest", e.what());
  }
  if (!(m.disparity_range.near_depth > 0.0) ||
      !(m.disparity_range.far_depth >= m.disparity_range.near_depth)) {
    throw ConfigError("disparity_range", "must satisfy 0 < near <= far");
  }
  detail::check_field("alpha", [&] { m.profile.validate(); });
  detail::check_field("gamma", [&] { m.gamma.validate(); });
  return m;
}

inline void write_manifest(const fs::path& path, const DatasetManifest& m) {
  write_text(path, dump_manifest(m));
}

// Loads a manifest and checks that every referenced file exists.
inline DatasetManifest read_manifest(const fs::path& path) {
  Json doc;
  try {
    doc = Json::parse(read_text(path));
  } catch (const Json::parse_error& e) {
    throw ConfigError("<root>", path.string() + ": malformed JSON: " + e.what());
  }
  auto m = manifest_from_json(doc);
  const auto dir = path.parent_path();
  for (const auto& e : m.entries) {
    for (const auto* rel : {&e.image, &e.source, &e.depth}) {
      if (!fs::exists(dir / *rel)) throw IoError(path.string() + ": missing referenced file '" + *rel + "'");
    }
  }
  return m;
}

// PFM stores float32; rendering from the rounded values keeps the stored
// depth and the synthesized observation consistent.
inline DepthMap float_rounded(const DepthMap& depth) {
  std::vector<double> v(depth.values().begin(), depth.values().end());
  for (double& d : v) d = static_cast<float>(d);
  return DepthMap(depth.width(), depth.height(), std::move(v));
}

inline std::string preset_tag(const LensParams& lens) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "A%.3f_F%.3f", lens.aperture, lens.focus);
  return buf;
}

struct SceneSource {
  std::string stem;
  fs::path image;
  fs::path depth;
};

// Pairs <scene>/images/<stem>.png with <scene>/depth/<stem>.pfm (or .png with
// `depth_png_range`), sorted by stem.
inline std::vector<SceneSource> list_scene_sources(const fs::path& scene_dir) {
  const auto images = scene_dir / "images";
  if (!fs::is_directory(images)) throw IoError(scene_dir.string() + ": missing images/ directory");
  std::vector<SceneSource> out;
  for (const auto& item : fs::directory_iterator(images)) {
    if (item.path().extension() != ".png") continue;
    const auto stem = item.path().stem().string();
    fs::path depth = scene_dir / "depth" / (stem + ".pfm");
    if (!fs::exists(depth)) depth = scene_dir / "depth" / (stem + ".png");
    if (!fs::exists(depth)) throw IoError(scene_dir.string() + ": no depth map for image '" + stem + "'");
    out.push_back({stem, item.path(), depth});
  }
  if (out.empty()) throw IoError(scene_dir.string() + ": no PNG images found");
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.stem < b.stem; });
  return out;
}

struct SynthOptions {
  std::vector<LensParams> grid = default_preset_grid();
  CoCProfile profile{};
  GammaSpec gamma{};
  Assignment assignment = Assignment::grid;
  unsigned threads = 0;
  std::optional<DepthEncoding> depth_png_range;  // for 16-bit PNG depth inputs
  std::string scene_name;                        // default: input directory name
};

// Writes <out>/<scene>/{images,depth,manifest.json}. Source images are copied
// alongside as images/<stem>.png; observations are images/<stem>_<preset>.png.
inline DatasetManifest synthesize_dataset(const fs::path& scene_dir, const fs::path& out_dir,
                                          const SynthOptions& opts = {}) {
  if (opts.grid.empty()) throw std::invalid_argument("synthesize_dataset: empty preset grid");
  for (const auto& lens : opts.grid) lens.validate();
  opts.profile.validate();
  opts.gamma.validate();

  const auto sources = list_scene_sources(scene_dir);
  std::vector<DisplayImage> colors;
  std::vector<DepthMap> depths;
  for (const auto& s : sources) {
    colors.push_back(read_png(s.image));
    depths.push_back(float_rounded(read_depth(s.depth, opts.depth_png_range)));
    require_same_dims(colors.back(), depths.back(), ("synthesize_dataset: " + s.stem).c_str());
  }

  DatasetManifest m;
  m.scene = opts.scene_name.empty() ? fs::absolute(scene_dir).lexically_normal().filename().string()
                                    : opts.scene_name;
  if (m.scene.empty()) m.scene = "scene";
  m.profile = opts.profile;
  m.gamma = opts.gamma;
  m.assignment = opts.assignment;
  double near = depths.front().min_depth();
  double far = depths.front().max_depth();
  for (const auto& d : depths) {
    near = std::min(near, d.min_depth());
    far = std::max(far, d.max_depth());
  }
  m.disparity_range = {near, far};

  const auto root = out_dir / m.scene;
  fs::create_directories(root / "images");
  fs::create_directories(root / "depth");
  RenderOptions render_opts;
  render_opts.threads = opts.threads;
  render_opts.disparity_range = m.disparity_range;

  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& stem = sources[i].stem;
    const std::string source_rel = "images/" + stem + ".png";
    const std::string depth_rel = "depth/" + stem + ".pfm";
    write_png(root / source_rel, colors[i]);
    write_pfm(root / depth_rel, depths[i]);
    const std::string split = i % kTestEvery == 0 ? "test" : "train";

    std::vector<LensParams> presets;
    if (opts.assignment == Assignment::grid) {
      presets = opts.grid;
    } else {
      presets.push_back(opts.grid[i % opts.grid.size()]);
    }
    const DefocusScene scene(colors[i], depths[i], opts.gamma, m.disparity_range);
    for (const auto& lens : presets) {
      const std::string image_rel = "images/" + stem + "_" + preset_tag(lens) + ".png";
      write_png(root / image_rel, scene.render(lens, opts.profile, render_opts).image);
      m.entries.push_back({image_rel, source_rel, depth_rel, split, lens.aperture, lens.focus});
    }
  }
  write_manifest(root / "manifest.json", m);
  return m;
}

struct SynthesisScore {
  double psnr = 0.0;
  double ssim = 0.0;
};

// Renders `preset` from the all-in-focus input and scores it against a
// reference defocused image.
inline SynthesisScore validate_synthesis(const DisplayImage& sharp, const DepthMap& depth,
                                         const LensParams& preset, const DisplayImage& reference,
                                         const CoCProfile& profile = {}, const GammaSpec& gamma = {},
                                         const RenderOptions& opts = {}) {
  require_same_shape(sharp, reference, "validate_synthesis");
  const auto render = render_defocus(sharp, depth, preset, profile, gamma, opts).image;
  return {psnr(render, reference), ssim(render, reference).mean};
}

// ---------------------------------------------------------------------------
// Fitted parameters and evaluation

// Fitted lens per observation, keyed by the manifest entry's image path.
using FittedParams = std::map<std::string, LensParams>;

inline std::string dump_fitted(const std::string& scene, const FittedParams& fitted) {
  Json entries = Json::array();
  for (const auto& [image, lens] : fitted) {
    entries.push_back({{"image", image}, {"aperture", lens.aperture}, {"focus", lens.focus}});
  }
  return Json{{"version", kManifestVersion}, {"scene", scene}, {"entries", std::move(entries)}}.dump(2) + "\n";
}

inline FittedParams parse_fitted(const std::string& text) {
  FittedParams out;
  try {
    const auto doc = Json::parse(text);
    for (const auto& e : doc.at("entries")) {
      out[e.at("image").get<std::string>()] = lens_from_json(e);
    }
  } catch (const Json::exception& e) {
    throw ConfigError("fitted", e.what());
  }
  return out;
}

// Fits every test observation of a manifest from its all-in-focus source.
inline FittedParams fit_dataset(const DatasetManifest& m, const fs::path& root, FitConfig cfg) {
  cfg.profile = m.profile;
  cfg.gamma = m.gamma;
  FittedParams fitted;
  for (const auto* e : m.split("test")) {
    const DefocusScene scene(read_png(root / e->source), read_pfm(root / e->depth), m.gamma,
                             m.disparity_range);
    fitted[e->image] = fit_lens(scene, read_png(root / e->image), cfg).lens;
  }
  return fitted;
}

// Re-renders each test source with its fitted lens into renders_dir, using the
// observation's file name.
inline void render_fitted(const DatasetManifest& m, const fs::path& root, const FittedParams& fitted,
                          const fs::path& renders_dir, unsigned threads = 0) {
  RenderOptions opts;
  opts.threads = threads;
  opts.disparity_range = m.disparity_range;
  for (const auto* e : m.split("test")) {
    const auto it = fitted.find(e->image);
    if (it == fitted.end()) throw IoError("no fitted parameters for '" + e->image + "'");
    const auto image = render_defocus(read_png(root / e->source), read_pfm(root / e->depth), it->second,
                                      m.profile, m.gamma, opts)
                           .image;
    write_png(renders_dir / fs::path(e->image).filename(), image);
  }
}

struct EvalRow {
  std::string scene;
  std::string image;
  double psnr = 0.0;
  double ssim = 0.0;
  double delta_aperture = 0.0;
  double delta_focus = 0.0;
};

struct EvalSummary {
  std::string scene;
  std::size_t count = 0;
  double psnr = 0.0;
  double ssim = 0.0;
  double delta_aperture = 0.0;
  double delta_focus = 0.0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::vector<EvalSummary> scenes;
  EvalSummary mean;
};

struct EvalInput {
  DatasetManifest manifest;
  fs::path root;         // manifest directory
  FittedParams fitted;
  fs::path renders_dir;  // one PNG per test observation, same file name
};

namespace detail {

inline EvalSummary summarize(std::string scene, std::span<const EvalRow> rows,
                             std::span<const LensParams> fitted, std::span<const LensParams> truth) {
  EvalSummary s;
  s.scene = std::move(scene);
  s.count = rows.size();
  for (const auto& r : rows) {
    s.psnr += r.psnr;
    s.ssim += r.ssim;
  }
  s.psnr /= static_cast<double>(rows.size());
  s.ssim /= static_cast<double>(rows.size());
  const auto err = lens_error(fitted, truth);
  s.delta_aperture = err.aperture;
  s.delta_focus = err.focus;
  return s;
}

}  // namespace detail

// Scores test renders against the manifest's observations. PSNR of identical
// images is the infinity sentinel, which propagates into the means.
inline EvalReport eval_refocus(std::span<const EvalInput> inputs) {
  if (inputs.empty()) throw std::invalid_argument("eval_refocus: no scenes");
  EvalReport report;
  std::vector<LensParams> all_fit;
  std::vector<LensParams> all_truth;
  for (const auto& in : inputs) {
    const auto tests = in.manifest.split("test");
    if (tests.empty()) throw std::invalid_argument("eval_refocus: scene '" + in.manifest.scene + "' has no test entries");
    std::vector<EvalRow> rows;
    std::vector<LensParams> fit;
    std::vector<LensParams> truth;
    for (const auto* e : tests) {
      const auto render_path = in.renders_dir / fs::path(e->image).filename();
      if (!fs::exists(render_path)) throw IoError("eval_refocus: missing render '" + render_path.string() + "'");
      const auto it = in.fitted.find(e->image);
      if (it == in.fitted.end()) throw IoError("eval_refocus: no fitted parameters for '" + e->image + "'");
      const auto render = read_png(render_path);
      const auto observed = read_png(in.root / e->image);
      const LensParams f[1] = {it->second};
      const LensParams t[1] = {e->lens()};
      const auto err = lens_error(f, t);
      rows.push_back({in.manifest.scene, e->image, psnr(render, observed), ssim(render, observed).mean,
                      err.aperture, err.focus});
      fit.push_back(it->second);
      truth.push_back(e->lens());
    }
    report.scenes.push_back(detail::summarize(in.manifest.scene, rows, fit, truth));
    report.rows.insert(report.rows.end(), rows.begin(), rows.end());
    all_fit.insert(all_fit.end(), fit.begin(), fit.end());
    all_truth.insert(all_truth.end(), truth.begin(), truth.end());
  }
  report.mean = detail::summarize("mean", report.rows, all_fit, all_truth);
  return report;
}

inline Json eval_report_to_json(const EvalReport& r) {
  auto summary = [](const EvalSummary& s) {
    return Json{{"scene", s.scene},
                {"count", s.count},
                {"psnr", metric_to_json(s.psnr)},
                {"ssim", s.ssim},
                {"delta_aperture", s.delta_aperture},
                {"delta_focus", s.delta_focus}};
  };
  Json rows = Json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"scene", row.scene},
                    {"image", row.image},
                    {"psnr", metric_to_json(row.psnr)},
                    {"ssim", row.ssim},
                    {"delta_aperture", row.delta_aperture},
                    {"delta_focus", row.delta_focus}});
  }
  Json scenes = Json::array();
  for (const auto& s : r.scenes) scenes.push_back(summary(s));
  return Json{{"rows", std::move(rows)}, {"scenes", std::move(scenes)}, {"mean", summary(r.mean)}};
}

inline std::string eval_report_table(const EvalReport& r) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-36s %9s %8s %8s %8s\n", "scene", "image", "PSNR", "SSIM",
                "dA", "dF");
  out += line;
  auto row = [&](const std::string& scene, const std::string& image, double p, double s, double da,
                 double df) {
    std::snprintf(line, sizeof line, "%-16s %-36s %9.3f %8.5f %8.5f %8.5f\n", scene.c_str(), image.c_str(),
                  p, s, da, df);
    out += line;
  };
  for (const auto& x : r.rows) row(x.scene, x.image, x.psnr, x.ssim, x.delta_aperture, x.delta_focus);
  for (const auto& s : r.scenes) row(s.scene, "(scene mean)", s.psnr, s.ssim, s.delta_aperture, s.delta_focus);
  row("all", "(mean)", r.mean.psnr, r.mean.ssim, r.mean.delta_aperture, r.mean.delta_focus);
  return out;
}

}  // namespace dofkit
