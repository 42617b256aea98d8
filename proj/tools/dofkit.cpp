#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "dofkit/dofkit.hpp"
#include "dofkit/service.hpp"

namespace fs = std::filesystem;
using namespace dofkit;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitBadConfig = 2;

struct RenderArgs {
  std::string image;
  std::string depth;
  double aperture = 0.0;
  std::optional<double> focus;
  std::vector<int> focus_pixel;
  std::string shape = "circle";
  std::string out;
  bool grid = false;
  double alpha = CoCProfile{}.alpha;
  double gamma = GammaSpec{}.gamma;
  double max_radius = CoCProfile{}.max_radius_px;
  unsigned threads = 0;
  std::vector<double> depth_range;
};

std::optional<DepthEncoding> depth_encoding(const std::vector<double>& range) {
  if (range.empty()) return std::nullopt;
  return DepthEncoding{range[0], range[1]};
}

int run_render(const RenderArgs& a) {
  const auto color = read_png(a.image);
  const auto depth = read_depth(a.depth, depth_encoding(a.depth_range));
  CoCProfile profile;
  profile.alpha = a.alpha;
  profile.shape = parse_shape(a.shape);
  profile.max_radius_px = a.max_radius;
  const GammaSpec gamma{a.gamma};
  RenderOptions opts;
  opts.threads = a.threads;
  const DefocusScene scene(color, depth, gamma);

  if (a.grid) {
    // Same presets, names and code path as `dataset synth`.
    const auto stem = fs::path(a.image).stem().string();
    for (const auto& lens : default_preset_grid()) {
      const auto path = fs::path(a.out) / (stem + "_" + preset_tag(lens) + ".png");
      write_png(path, scene.render(lens, profile, opts).image);
      std::cout << path.string() << "\n";
    }
    return 0;
  }

  double focus = 0.0;
  if (a.focus) {
    focus = *a.focus;
  } else if (a.focus_pixel.size() == 2) {
    const int x = a.focus_pixel[0];
    const int y = a.focus_pixel[1];
    if (x < 0 || y < 0 || x >= depth.width() || y >= depth.height()) {
      throw std::out_of_range("--focus-pixel outside the image");
    }
    focus = scene.disparity()[static_cast<std::size_t>(y) * depth.width() + x];
  } else {
    throw std::invalid_argument("one of --focus or --focus-pixel is required");
  }
  const auto result = scene.render({a.aperture, focus}, profile, opts);
  write_png(a.out, result.image);
  if (result.stats.clamped_radii > 0) {
    std::cerr << "warning: " << result.stats.clamped_radii << " CoC radii clamped to " << a.max_radius << " px\n";
  }
  return 0;
}

struct FitArgs {
  std::string sharp;
  std::string depth;
  std::string observed;
  std::string config;
  std::string trace_out;
  std::string out;
  std::vector<double> depth_range;
};

int run_fit(const FitArgs& a) {
  FitConfig cfg;
  if (!a.config.empty()) {
    try {
      cfg = parse_fit_config(read_text(a.config));
    } catch (const ConfigError& e) {
      std::cerr << "error: invalid config '" << a.config << "': " << e.what() << "\n";
      return kExitBadConfig;
    }
  }
  const auto sharp = read_png(a.sharp);
  const auto depth = read_depth(a.depth, depth_encoding(a.depth_range));
  const auto observed = read_png(a.observed);
  const auto fit = fit_lens(sharp, depth, observed, cfg);
  const auto text = fit_result_to_json(fit).dump(2) + "\n";
  if (!a.trace_out.empty()) write_text(a.trace_out, trace_to_jsonl(fit.trace));
  if (a.out.empty()) {
    std::cout << text;
  } else {
    write_text(a.out, text);
    std::printf("aperture = %.6f\nfocus = %.6f\n", fit.lens.aperture, fit.lens.focus);
  }
  return 0;
}

struct SynthArgs {
  std::string scene;
  std::string out;
  std::vector<double> apertures;
  std::vector<double> focuses;
  std::string shape = "circle";
  double alpha = CoCProfile{}.alpha;
  double gamma = GammaSpec{}.gamma;
  std::string assignment = "grid";
  unsigned threads = 0;
  std::vector<double> depth_range;
};

int run_synth(const SynthArgs& a) {
  SynthOptions opts;
  if (!a.apertures.empty() || !a.focuses.empty()) {
    opts.grid.clear();
    const auto fs_ = a.focuses.empty() ? std::vector<double>{0.2, 0.5, 0.8} : a.focuses;
    const auto as_ = a.apertures.empty() ? std::vector<double>{0.5, 1.0} : a.apertures;
    for (double f : fs_) {
      for (double ap : as_) opts.grid.push_back({ap, f});
    }
  }
  opts.profile.shape = parse_shape(a.shape);
  opts.profile.alpha = a.alpha;
  opts.gamma.gamma = a.gamma;
  opts.assignment = parse_assignment(a.assignment);
  opts.threads = a.threads;
  opts.depth_png_range = depth_encoding(a.depth_range);
  const auto m = synthesize_dataset(a.scene, a.out, opts);
  std::cout << (fs::path(a.out) / m.scene / "manifest.json").string() << ": " << m.entries.size()
            << " observations\n";
  return 0;
}

struct DatasetFitArgs {
  std::string manifest;
  std::string config;
  std::string out;
  std::string renders;
  unsigned threads = 0;
};

int run_dataset_fit(const DatasetFitArgs& a) {
  FitConfig cfg;
  if (!a.config.empty()) {
    try {
      cfg = parse_fit_config(read_text(a.config));
    } catch (const ConfigError& e) {
      std::cerr << "error: invalid config '" << a.config << "': " << e.what() << "\n";
      return kExitBadConfig;
    }
  }
  cfg.threads = a.threads;
  const auto m = read_manifest(a.manifest);
  const auto root = fs::path(a.manifest).parent_path();
  const auto fitted = fit_dataset(m, root, cfg);
  write_text(a.out, dump_fitted(m.scene, fitted));
  if (!a.renders.empty()) render_fitted(m, root, fitted, a.renders, a.threads);
  return 0;
}

struct EvalArgs {
  std::vector<std::string> manifests;
  std::vector<std::string> fitted;
  std::vector<std::string> renders;
  std::string out;
};

int run_eval(const EvalArgs& a) {
  if (a.fitted.size() != a.manifests.size() || a.renders.size() != a.manifests.size()) {
    throw std::invalid_argument("--manifest, --fitted and --renders must be given once per scene");
  }
  std::vector<EvalInput> inputs;
  for (std::size_t i = 0; i < a.manifests.size(); ++i) {
    inputs.push_back({read_manifest(a.manifests[i]), fs::path(a.manifests[i]).parent_path(),
                      parse_fitted(read_text(a.fitted[i])), a.renders[i]});
  }
  const auto report = eval_refocus(inputs);
  const auto json = eval_report_to_json(report).dump(2) + "\n";
  // Keep stdout parseable when it carries the JSON report.
  if (a.out.empty()) {
    std::cout << json;
    std::cerr << eval_report_table(report);
  } else {
    write_text(a.out, json);
    std::cout << eval_report_table(report);
  }
  return 0;
}

struct AlignArgs {
  std::string pred;
  std::string sparse;
  std::string out;
  std::vector<double> depth_range;
};

int run_align(const AlignArgs& a) {
  const auto pred = read_depth(a.pred, depth_encoding(a.depth_range));
  const auto sparse = read_sparse(a.sparse, pred.width(), pred.height());
  const auto params = fit_scale(pred, sparse);
  std::printf("s* = %.6f\nscale = %.6f\nsilog = %.9g\n", params.log_scale, std::exp(params.log_scale),
              silog_loss(pred, sparse, params.log_scale));
  if (!a.out.empty()) write_pfm(a.out, apply_alignment(pred, params));
  return 0;
}

int run_serve(unsigned threads) {
  const auto addr = listen_address_from_env();
  Service service(threads);
  httplib::Server server;
  bind_routes(server, service);
  std::cerr << "listening on " << addr.host << ":" << addr.port << "\n";
  if (!server.listen(addr.host, addr.port)) {
    std::cerr << "error: cannot bind " << addr.host << ":" << addr.port << "\n";
    return kExitFailure;
  }
  return 0;
}

void add_depth_range(CLI::App* cmd, std::vector<double>& range) {
  cmd->add_option("--depth-range", range, "near far depth for 16-bit PNG depth maps")->expected(2);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Depth-of-field rendering, lens fitting and dataset tools"};
  app.require_subcommand(1);

  RenderArgs render;
  auto* cmd_render = app.add_subcommand("render", "Render a defocused image");
  cmd_render->add_option("--image", render.image, "all-in-focus PNG")->required()->check(CLI::ExistingFile);
  cmd_render->add_option("--depth", render.depth, "depth map (.pfm or 16-bit .png)")->required()->check(CLI::ExistingFile);
  cmd_render->add_option("--aperture", render.aperture, "aperture (normalized to the longest side)")
      ->check(CLI::NonNegativeNumber);
  auto* focus_opt = cmd_render->add_option("--focus", render.focus, "focus as normalized disparity in [0, 1]");
  cmd_render->add_option("--focus-pixel", render.focus_pixel, "focus on pixel X Y")->expected(2)->excludes(focus_opt);
  cmd_render->add_option("--shape", render.shape, "circle, pentagon or hexagon")
      ->check(CLI::IsMember({"circle", "pentagon", "hexagon"}));
  cmd_render->add_option("--out", render.out, "output PNG (directory with --grid)")->required();
  cmd_render->add_flag("--grid", render.grid, "render the 6 dataset presets");
  cmd_render->add_option("--alpha", render.alpha, "confuse-function sharpness");
  cmd_render->add_option("--gamma", render.gamma, "display gamma");
  cmd_render->add_option("--max-radius", render.max_radius, "CoC radius clamp in pixels");
  cmd_render->add_option("--threads", render.threads, "worker threads (0: all cores)");
  add_depth_range(cmd_render, render.depth_range);

  FitArgs fit;
  auto* cmd_fit = app.add_subcommand("fit", "Fit aperture and focus to an observed image");
  cmd_fit->add_option("--sharp", fit.sharp)->required()->check(CLI::ExistingFile);
  cmd_fit->add_option("--depth", fit.depth)->required()->check(CLI::ExistingFile);
  cmd_fit->add_option("--observed", fit.observed)->required()->check(CLI::ExistingFile);
  cmd_fit->add_option("--config", fit.config, "FitConfig JSON")->check(CLI::ExistingFile);
  cmd_fit->add_option("--trace-out", fit.trace_out, "per-iteration trace (JSON lines)");
  cmd_fit->add_option("--out", fit.out, "fitted parameters JSON (default: stdout)");
  add_depth_range(cmd_fit, fit.depth_range);

  auto* cmd_dataset = app.add_subcommand("dataset", "Synthesize, fit and evaluate datasets");
  cmd_dataset->require_subcommand(1);
  SynthArgs synth;
  auto* cmd_synth = cmd_dataset->add_subcommand("synth", "Render preset observations for a scene");
  cmd_synth->add_option("--scene", synth.scene, "directory with images/ and depth/")->required()->check(CLI::ExistingDirectory);
  cmd_synth->add_option("--out", synth.out)->required();
  cmd_synth->add_option("--apertures", synth.apertures, "aperture presets (default 0.5 1.0)");
  cmd_synth->add_option("--focuses", synth.focuses, "focus presets (default 0.2 0.5 0.8)");
  cmd_synth->add_option("--shape", synth.shape)->check(CLI::IsMember({"circle", "pentagon", "hexagon"}));
  cmd_synth->add_option("--alpha", synth.alpha);
  cmd_synth->add_option("--gamma", synth.gamma);
  cmd_synth->add_option("--assignment", synth.assignment, "grid or round_robin")
      ->check(CLI::IsMember({"grid", "round_robin"}));
  cmd_synth->add_option("--threads", synth.threads);
  add_depth_range(cmd_synth, synth.depth_range);

  DatasetFitArgs dfit;
  auto* cmd_dfit = cmd_dataset->add_subcommand("fit", "Fit every test observation of a manifest");
  cmd_dfit->add_option("--manifest", dfit.manifest)->required()->check(CLI::ExistingFile);
  cmd_dfit->add_option("--config", dfit.config)->check(CLI::ExistingFile);
  cmd_dfit->add_option("--out", dfit.out, "fitted parameters JSON")->required();
  cmd_dfit->add_option("--renders", dfit.renders, "also write refocused test renders here");
  cmd_dfit->add_option("--threads", dfit.threads);

  EvalArgs eval;
  auto* cmd_eval = cmd_dataset->add_subcommand("eval", "Score fitted parameters and test renders");
  cmd_eval->add_option("--manifest", eval.manifests)->required()->check(CLI::ExistingFile);
  cmd_eval->add_option("--fitted", eval.fitted)->required()->check(CLI::ExistingFile);
  cmd_eval->add_option("--renders", eval.renders)->required();
  cmd_eval->add_option("--out", eval.out, "EvalReport JSON (default: stdout)");

  AlignArgs align;
  auto* cmd_align = app.add_subcommand("align-depth", "Fit the log-scale aligning a dense prior to sparse depth");
  cmd_align->add_option("--pred", align.pred)->required()->check(CLI::ExistingFile);
  cmd_align->add_option("--sparse", align.sparse, "CSV (x,y,depth) or JSON")->required()->check(CLI::ExistingFile);
  cmd_align->add_option("--out", align.out, "aligned depth PFM");
  add_depth_range(cmd_align, align.depth_range);

  unsigned serve_threads = 0;
  auto* cmd_serve = app.add_subcommand("serve", "HTTP service (DOFKIT_ADDR, DOFKIT_PORT)");
  cmd_serve->add_option("--threads", serve_threads, "render threads per request");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*cmd_render) return run_render(render);
    if (*cmd_fit) return run_fit(fit);
    if (*cmd_synth) return run_synth(synth);
    if (*cmd_dfit) return run_dataset_fit(dfit);
    if (*cmd_eval) return run_eval(eval);
    if (*cmd_align) return run_align(align);
    if (*cmd_serve) return run_serve(serve_threads);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitFailure;
}
