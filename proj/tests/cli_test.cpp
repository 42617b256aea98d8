#include <gtest/gtest.h>

#include <cstdio>
#include <random>

#include "dofkit/dataset.hpp"
#include "test_support.hpp"

using namespace dofkit;
namespace fs = std::filesystem;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

// Runs the CLI with stdout captured; stderr goes to a side file.
Run cli(const std::string& args, const fs::path& scratch) {
  const auto err = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + DOFKIT_CLI_PATH + "\" " + args + " 2>\"" + err.string() + "\"";
  Run r;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n = 0;
  while ((n = std::fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int raw = ::pclose(pipe);
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  return r;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

struct Inputs {
  fs::path image;
  fs::path depth;
};

Inputs write_inputs(const fs::path& dir, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Inputs in{dir / "scene" / "images" / "view.png", dir / "scene" / "depth" / "view.pfm"};
  write_png(in.image, fixtures::textured_image(rng, size, size));
  write_pfm(in.depth, fixtures::layered_depth(rng, size, size, 1.0, 9.0));
  return in;
}

}  // namespace

TEST(Cli, ZeroApertureRenderReproducesInput) {
  const auto dir = fixtures::scratch_dir("cli_identity");
  const auto in = write_inputs(dir, 24, 1);
  const auto r = cli("render --image " + q(in.image) + " --depth " + q(in.depth) +
                         " --aperture 0 --focus 0.5 --out " + q(dir / "out.png"),
                     dir);
  ASSERT_EQ(r.status, 0);
  EXPECT_EQ(read_file(dir / "out.png"), read_file(in.image));
}

TEST(Cli, GridRenderMatchesSynthesizedDataset) {
  const auto dir = fixtures::scratch_dir("cli_grid");
  const auto in = write_inputs(dir, 24, 2);
  ASSERT_EQ(cli("render --grid --image " + q(in.image) + " --depth " + q(in.depth) + " --out " + q(dir / "grid"), dir)
                .status,
            0);
  const auto m = synthesize_dataset(dir / "scene", dir / "synth");
  ASSERT_EQ(m.entries.size(), 6u);
  for (const auto& e : m.entries) {
    EXPECT_EQ(read_file(dir / "grid" / fs::path(e.image).filename()), read_file(dir / "synth" / "scene" / e.image))
        << e.image;
  }
}

TEST(Cli, FocusPixelPutsThatPixelInFocus) {
  const auto dir = fixtures::scratch_dir("cli_pixel");
  const auto in = write_inputs(dir, 20, 3);
  const auto depth = read_pfm(in.depth);
  const double rho = DisparityRange::of(depth).normalize(depth.at(5, 7));
  char focus[40];
  std::snprintf(focus, sizeof focus, "%.17g", rho);
  const std::string common = "render --image " + q(in.image) + " --depth " + q(in.depth) + " --aperture 0.6 ";
  ASSERT_EQ(cli(common + "--focus-pixel 5 7 --out " + q(dir / "a.png"), dir).status, 0);
  ASSERT_EQ(cli(common + "--focus " + focus + " --out " + q(dir / "b.png"), dir).status, 0);
  EXPECT_EQ(read_file(dir / "a.png"), read_file(dir / "b.png"));
  EXPECT_NE(cli(common + "--focus-pixel 20 0 --out " + q(dir / "c.png"), dir).status, 0);
}

TEST(Cli, RenderIsByteIdenticalAcrossRunsAndThreads) {
  const auto dir = fixtures::scratch_dir("cli_repeat");
  const auto in = write_inputs(dir, 32, 4);
  const std::string common = "render --image " + q(in.image) + " --depth " + q(in.depth) + " --aperture 0.9 --focus 0.3 ";
  for (const char* threads : {"1", "2", "8"}) {
    ASSERT_EQ(cli(common + "--threads " + threads + " --out " + q(dir / (std::string("t") + threads + ".png")), dir).status, 0);
  }
  ASSERT_EQ(cli(common + "--threads 8 --out " + q(dir / "again.png"), dir).status, 0);
  const auto ref = read_file(dir / "t1.png");
  EXPECT_EQ(read_file(dir / "t2.png"), ref);
  EXPECT_EQ(read_file(dir / "t8.png"), ref);
  EXPECT_EQ(read_file(dir / "again.png"), ref);
}

TEST(Cli, MalformedConfigExitsWithUsageError) {
  const auto dir = fixtures::scratch_dir("cli_config");
  const auto in = write_inputs(dir, 16, 5);
  write_text(dir / "bad.json", "{\"max_iters\": -3}");
  write_text(dir / "broken.json", "{max_iters");
  write_text(dir / "unknown.json", "{\"learning_rate\": 0.1}");
  const std::string common = "fit --sharp " + q(in.image) + " --depth " + q(in.depth) + " --observed " + q(in.image);
  EXPECT_EQ(cli(common + " --config " + q(dir / "bad.json"), dir).status, 2);
  EXPECT_EQ(cli(common + " --config " + q(dir / "broken.json"), dir).status, 2);
  EXPECT_EQ(cli(common + " --config " + q(dir / "unknown.json"), dir).status, 2);
  EXPECT_NE(read_text(dir / "stderr.txt").find("learning_rate"), std::string::npos);
}

TEST(Cli, FitRecoversRenderedLens) {
  const auto dir = fixtures::scratch_dir("cli_fit");
  const auto in = write_inputs(dir, 32, 6);
  ASSERT_EQ(cli("render --image " + q(in.image) + " --depth " + q(in.depth) + " --aperture 0.8 --focus 0.5 --out " +
                    q(dir / "obs.png"),
                dir)
                .status,
            0);
  write_text(dir / "cfg.json", "{\"threads\": 2}");
  const auto r = cli("fit --sharp " + q(in.image) + " --depth " + q(in.depth) + " --observed " + q(dir / "obs.png") +
                         " --config " + q(dir / "cfg.json") + " --trace-out " + q(dir / "trace.jsonl"),
                     dir);
  ASSERT_EQ(r.status, 0);
  const auto doc = Json::parse(r.out);
  EXPECT_NEAR(doc["aperture"].get<double>(), 0.8, 0.05);
  EXPECT_NEAR(doc["focus"].get<double>(), 0.5, 0.02);
  const auto trace = read_text(dir / "trace.jsonl");
  EXPECT_EQ(static_cast<std::size_t>(std::count(trace.begin(), trace.end(), '\n')), doc["iterations"].get<std::size_t>());
}

TEST(Cli, AlignDepthPrintsLogScale) {
  const auto dir = fixtures::scratch_dir("cli_align");
  std::mt19937_64 rng(7);
  const auto sparse_depth = fixtures::random_depth(rng, 8, 6, 1.0, 5.0);
  std::vector<double> pred(sparse_depth.values().begin(), sparse_depth.values().end());
  for (double& v : pred) v *= 2.0;
  write_pfm(dir / "pred.pfm", DepthMap(8, 6, pred));
  std::string csv = "x,y,depth\n";
  for (int y = 0; y < 6; y += 2) {
    for (int x = 0; x < 8; x += 3) {
      char line[80];
      // PFM stores float32; write the sample the prediction actually halves to.
      std::snprintf(line, sizeof line, "%d,%d,%.17g\n", x, y,
                    static_cast<double>(static_cast<float>(2.0 * sparse_depth.at(x, y))) / 2.0);
      csv += line;
    }
  }
  write_text(dir / "sparse.csv", csv);
  const auto r = cli("align-depth --pred " + q(dir / "pred.pfm") + " --sparse " + q(dir / "sparse.csv") + " --out " +
                         q(dir / "aligned.pfm"),
                     dir);
  ASSERT_EQ(r.status, 0);
  EXPECT_NE(r.out.find("s* = -0.693147"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(dir / "aligned.pfm"));
}

TEST(Cli, DatasetPipelineOnPerfectFits) {
  const auto dir = fixtures::scratch_dir("cli_dataset");
  write_inputs(dir, 24, 8);
  ASSERT_EQ(cli("dataset synth --scene " + q(dir / "scene") + " --out " + q(dir / "ds") + " --threads 2", dir).status, 0);
  const auto manifest = dir / "ds" / "scene" / "manifest.json";
  const auto m = read_manifest(manifest);
  FittedParams truth;
  for (const auto* e : m.split("test")) truth[e->image] = e->lens();
  write_text(dir / "fitted.json", dump_fitted(m.scene, truth));
  render_fitted(m, manifest.parent_path(), truth, dir / "renders");
  const auto r = cli("dataset eval --manifest " + q(manifest) + " --fitted " + q(dir / "fitted.json") + " --renders " +
                         q(dir / "renders"),
                     dir);
  ASSERT_EQ(r.status, 0);
  const auto report = Json::parse(r.out);
  EXPECT_EQ(report["mean"]["delta_aperture"].get<double>(), 0.0);
  EXPECT_EQ(report["mean"]["delta_focus"].get<double>(), 0.0);
  EXPECT_EQ(report["mean"]["psnr"], "inf");

  // Two eval runs write identical reports.
  ASSERT_EQ(cli("dataset eval --manifest " + q(manifest) + " --fitted " + q(dir / "fitted.json") + " --renders " +
                    q(dir / "renders") + " --out " + q(dir / "r1.json"),
                dir)
                .status,
            0);
  ASSERT_EQ(cli("dataset eval --manifest " + q(manifest) + " --fitted " + q(dir / "fitted.json") + " --renders " +
                    q(dir / "renders") + " --out " + q(dir / "r2.json"),
                dir)
                .status,
            0);
  EXPECT_EQ(read_file(dir / "r1.json"), read_file(dir / "r2.json"));
}

TEST(Cli, MissingArgumentsFail) {
  const auto dir = fixtures::scratch_dir("cli_usage");
  EXPECT_NE(cli("render --aperture 0.1", dir).status, 0);
  EXPECT_NE(cli("no-such-command", dir).status, 0);
  EXPECT_EQ(cli("--help", dir).status, 0);
}
