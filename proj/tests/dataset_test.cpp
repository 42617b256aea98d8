#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dofkit/dataset.hpp"
#include "test_support.hpp"

using namespace dofkit;
namespace fs = std::filesystem;

namespace {

// Writes <dir>/images/<stem>.png and <dir>/depth/<stem>.pfm for `count` views.
fs::path make_scene(const fs::path& dir, int count, int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (int i = 0; i < count; ++i) {
    const std::string stem = "view" + std::to_string(i);
    write_png(dir / "images" / (stem + ".png"), fixtures::textured_image(rng, size, size));
    write_pfm(dir / "depth" / (stem + ".pfm"), fixtures::layered_depth(rng, size, size, 1.0, 8.0));
  }
  return dir;
}

Bytes file_bytes(const fs::path& p) { return read_file(p); }

}  // namespace

TEST(Synthesize, DefaultGridGivesSixObservationsPerImage) {
  const auto root = fixtures::scratch_dir("synth_grid");
  const auto scene = make_scene(root / "src" / "garden", 2, 24, 1);
  const auto m = synthesize_dataset(scene, root / "out");
  EXPECT_EQ(m.scene, "garden");
  ASSERT_EQ(m.entries.size(), 12u);
  EXPECT_EQ(m.split("test").size(), 6u);
  EXPECT_EQ(m.split("train").size(), 6u);
  for (const auto& e : m.entries) {
    EXPECT_TRUE(fs::exists(root / "out" / "garden" / e.image)) << e.image;
  }
  // The manifest on disk reads back to the same value.
  const auto back = read_manifest(root / "out" / "garden" / "manifest.json");
  EXPECT_EQ(back.entries, m.entries);
  EXPECT_EQ(dump_manifest(back), dump_manifest(m));
}

TEST(Synthesize, PresetGridOrder) {
  const auto grid = default_preset_grid();
  ASSERT_EQ(grid.size(), 6u);
  EXPECT_EQ(grid.front(), (LensParams{0.5, 0.2}));
  EXPECT_EQ(grid[1], (LensParams{1.0, 0.2}));
  EXPECT_EQ(grid.back(), (LensParams{1.0, 0.8}));
}

TEST(Synthesize, RoundRobinAssignsOnePresetPerImage) {
  const auto root = fixtures::scratch_dir("synth_rr");
  const auto scene = make_scene(root / "src" / "s", 3, 16, 2);
  SynthOptions opts;
  opts.assignment = Assignment::round_robin;
  const auto m = synthesize_dataset(scene, root / "out", opts);
  ASSERT_EQ(m.entries.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(m.entries[i].lens(), default_preset_grid()[i]);
}

TEST(Synthesize, ByteIdenticalAcrossThreadCounts) {
  const auto root = fixtures::scratch_dir("synth_threads");
  const auto scene = make_scene(root / "src" / "s", 1, 32, 3);
  std::vector<Bytes> reference;
  std::string manifest;
  for (unsigned threads : {1u, 2u, 8u}) {
    SynthOptions opts;
    opts.threads = threads;
    const auto out = root / ("out" + std::to_string(threads));
    const auto m = synthesize_dataset(scene, out, opts);
    std::vector<Bytes> files;
    for (const auto& e : m.entries) files.push_back(file_bytes(out / "s" / e.image));
    const auto text = read_text(out / "s" / "manifest.json");
    if (reference.empty()) {
      reference = files;
      manifest = text;
    } else {
      EXPECT_EQ(files, reference) << threads;
      EXPECT_EQ(text, manifest) << threads;
    }
  }
}

TEST(Synthesize, ZeroAperturePresetReproducesSource) {
  const auto root = fixtures::scratch_dir("synth_zero");
  const auto scene = make_scene(root / "src" / "s", 1, 20, 4);
  SynthOptions opts;
  opts.grid = {{0.0, 0.5}};
  const auto m = synthesize_dataset(scene, root / "out", opts);
  const auto dir = root / "out" / "s";
  EXPECT_EQ(file_bytes(dir / m.entries[0].image), file_bytes(dir / m.entries[0].source));
}

TEST(Synthesize, ObservationsAgreeWithOracleRender) {
  const auto root = fixtures::scratch_dir("synth_oracle");
  const auto scene = make_scene(root / "src" / "s", 1, 24, 5);
  const auto m = synthesize_dataset(scene, root / "out");
  const auto dir = root / "out" / "s";
  for (const auto& e : m.entries) {
    const auto sharp = read_png(dir / e.source);
    const auto depth = read_pfm(dir / e.depth);
    RenderOptions opts;
    opts.disparity_range = m.disparity_range;
    const auto oracle = render_defocus_oracle(sharp, depth, e.lens(), m.profile, m.gamma, opts).image;
    // The stored observation is quantized to 8 bits; the oracle is not.
    EXPECT_LE(fixtures::max_abs_diff(read_png(dir / e.image).values(), oracle.values()), 0.5 / 255.0 + 1e-9);
    const auto score = validate_synthesis(sharp, depth, e.lens(), quantize_image(oracle), m.profile, m.gamma, opts);
    EXPECT_GT(score.psnr, 50.0) << e.image;
  }
}

TEST(Synthesize, MissingDepthIsAnError) {
  const auto root = fixtures::scratch_dir("synth_missing");
  std::mt19937_64 rng(6);
  write_png(root / "s" / "images" / "a.png", fixtures::random_image(rng, 8, 8));
  EXPECT_THROW(synthesize_dataset(root / "s", root / "out"), IoError);
}

TEST(Fitted, RoundTrip) {
  const FittedParams fitted{{"images/a_A0.500_F0.200.png", {0.51, 0.19}}, {"images/b.png", {1.0, 0.8}}};
  EXPECT_EQ(parse_fitted(dump_fitted("s", fitted)), fitted);
}

class EvalFixture : public ::testing::Test {
 protected:
  void SetUp() override {
    root = fixtures::scratch_dir(::testing::UnitTest::GetInstance()->current_test_info()->name());
    const auto scene = make_scene(root / "src" / "s", 1, 24, 7);
    manifest = synthesize_dataset(scene, root / "out");
    dir = root / "out" / "s";
    for (const auto* e : manifest.split("test")) truth[e->image] = e->lens();
  }

  fs::path root, dir;
  DatasetManifest manifest;
  FittedParams truth;
};

TEST_F(EvalFixture, PerfectRendersScoreExactly) {
  render_fitted(manifest, dir, truth, root / "renders");
  const EvalInput in[1] = {{manifest, dir, truth, root / "renders"}};
  const auto report = eval_refocus(in);
  ASSERT_EQ(report.rows.size(), 6u);
  for (const auto& row : report.rows) {
    EXPECT_EQ(row.psnr, kPsnrInfinity);
    EXPECT_EQ(row.ssim, 1.0);
    EXPECT_EQ(row.delta_aperture, 0.0);
    EXPECT_EQ(row.delta_focus, 0.0);
  }
  EXPECT_EQ(report.mean.psnr, kPsnrInfinity);
  EXPECT_EQ(eval_report_to_json(report)["mean"]["psnr"], "inf");
}

TEST_F(EvalFixture, LensErrorMatchesDirectComputation) {
  FittedParams fitted = truth;
  std::vector<LensParams> fit, gt;
  double bump = 0.01;
  for (auto& [image, lens] : fitted) {
    gt.push_back(lens);
    lens.aperture += bump;
    lens.focus -= bump / 2;
    fit.push_back(lens);
    bump += 0.01;
  }
  render_fitted(manifest, dir, fitted, root / "renders");
  const EvalInput in[1] = {{manifest, dir, fitted, root / "renders"}};
  const auto report = eval_refocus(in);
  // Rows follow manifest order, which need not match map order; compare means.
  const auto direct = lens_error(fit, gt);
  EXPECT_NEAR(report.mean.delta_aperture, direct.aperture, 1e-15);
  EXPECT_NEAR(report.mean.delta_focus, direct.focus, 1e-15);
  for (const auto& row : report.rows) EXPECT_LT(row.psnr, kPsnrInfinity);
}

TEST_F(EvalFixture, MissingRenderIsAnError) {
  render_fitted(manifest, dir, truth, root / "renders");
  fs::remove(root / "renders" / fs::path(manifest.split("test").front()->image).filename());
  const EvalInput in[1] = {{manifest, dir, truth, root / "renders"}};
  EXPECT_THROW(eval_refocus(in), IoError);
}

TEST_F(EvalFixture, MissingFittedEntryIsAnError) {
  FittedParams partial = truth;
  partial.erase(partial.begin());
  EXPECT_THROW(render_fitted(manifest, dir, partial, root / "renders"), IoError);
}

TEST_F(EvalFixture, ClosedLoopFitReproducesObservations) {
  FitConfig cfg;
  cfg.max_iters = 60;
  DatasetManifest one = manifest;
  // Fit a single observation to keep the test short.
  one.entries.erase(one.entries.begin() + 1, one.entries.end());
  const auto fitted = fit_dataset(one, dir, cfg);
  render_fitted(one, dir, fitted, root / "renders");
  const EvalInput in[1] = {{one, dir, fitted, root / "renders"}};
  const auto report = eval_refocus(in);
  EXPECT_GT(report.mean.psnr, 35.0);
  EXPECT_LT(report.mean.delta_aperture, 0.05);
  EXPECT_LT(report.mean.delta_focus, 0.02);
}
