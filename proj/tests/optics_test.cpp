#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "dofkit/optics.hpp"
#include "test_support.hpp"

using namespace dofkit;

TEST(CocRadius, InFocusPointHasZeroRadius) {
  EXPECT_EQ(coc_radius_disparity({1.0, 0.5}, 0.5, 64.0), 0.0);
}

TEST(CocRadius, DisparityDifferenceTimesAperture) {
  // 2 * |0.5 - 1.0| * 1
  EXPECT_DOUBLE_EQ(coc_radius_disparity({2.0, 0.5}, 1.0, 1.0), 1.0);
}

TEST(CocRadius, ZeroApertureNeverBlurs) {
  const DisparityRange range{1.0, 10.0};
  for (double d : {0.5, 1.0, 3.0, 10.0, 100.0}) EXPECT_EQ(coc_radius({0.0, 0.3}, d, range, 128.0), 0.0);
}

TEST(CocRadius, NonPositiveDepthIsDomainError) {
  const DisparityRange range{1.0, 10.0};
  EXPECT_THROW(coc_radius({1.0, 0.5}, 0.0, range, 1.0), std::domain_error);
  EXPECT_THROW(coc_radius({1.0, 0.5}, -2.0, range, 1.0), std::domain_error);
  EXPECT_THROW(coc_radius_disparity({1.0, 0.5}, 0.5, 0.0), std::domain_error);
}

TEST(CocRadius, ZeroExactlyAtFocalDisparity) {
  const DisparityRange range{2.0, 8.0};
  const double d = 4.0;
  const double rho = range.normalize(d);
  EXPECT_EQ(coc_radius({1.3, rho}, d, range, 50.0), 0.0);
  EXPECT_GT(coc_radius({1.3, rho}, d * 1.01, range, 50.0), 0.0);
}

TEST(CocRadius, LinearInAperture) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 100; ++i) {
    const double rho = u(rng);
    const double f = 0.01 + 0.99 * u(rng);
    const double a = u(rng);
    const double k = 3.0 * u(rng);
    EXPECT_NEAR(coc_radius_disparity({k * a, f}, rho, 64.0), k * coc_radius_disparity({a, f}, rho, 64.0), 1e-12);
  }
}

TEST(Disparity, NearestIsOneFarthestIsZero) {
  const DisparityRange range{1.0, 10.0};
  EXPECT_EQ(range.normalize(1.0), 1.0);
  EXPECT_EQ(range.normalize(10.0), 0.0);
  // (1/2 - 1/10) / (1 - 1/10)
  EXPECT_NEAR(range.normalize(2.0), 0.4 / 0.9, 1e-15);
  EXPECT_EQ(DisparityRange({3.0, 3.0}).normalize(3.0), 1.0);
}

TEST(ConfuseWeight, HalfAtBoundary) {
  EXPECT_DOUBLE_EQ(confuse_weight(3.0, 3.0, 4.0), 0.5);
}

TEST(ConfuseWeight, ReferenceValue) {
  // 1/2 + 1/2 tanh(4), evaluated at 50 digits.
  EXPECT_NEAR(confuse_weight(2.0, 1.0, 4.0), 0.99966464986953352, 1e-15);
}

TEST(ConfuseWeight, TailIsTiny) {
  const double w = confuse_weight(0.0, 10.0, 4.0);
  EXPECT_GT(w, 0.0);
  EXPECT_LT(w, 1e-17);
}

TEST(ConfuseWeight, MatchesTanhForm) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int i = 0; i < 1000; ++i) {
    const double r = u(rng), l = u(rng), alpha = 0.5 + u(rng);
    EXPECT_NEAR(confuse_weight(r, l, alpha), 0.5 + 0.5 * std::tanh(alpha * (r - l)), 1e-15);
  }
}

TEST(ConfuseWeight, MonotoneAndBounded) {
  double prev = 0.0;
  for (double r = 0.0; r <= 6.0; r += 0.25) {
    const double w = confuse_weight(r, 3.0, 4.0);
    EXPECT_GT(w, prev);
    EXPECT_LT(w, 1.0 + 1e-16);
    prev = w;
    EXPECT_GE(confuse_weight(r, 0.0, 4.0), 0.5);
    EXPECT_GT(confuse_weight(2.0, r, 4.0), confuse_weight(2.0, r + 0.25, 4.0));
  }
}

TEST(ConfuseWeight, DerivativeMatchesFiniteDifference) {
  const double alpha = 4.0, l = 2.0, h = 1e-6;
  for (double r : {1.5, 1.9, 2.0, 2.3}) {
    const double fd = (confuse_weight(r + h, l, alpha) - confuse_weight(r - h, l, alpha)) / (2 * h);
    EXPECT_NEAR(confuse_weight_dr(confuse_weight(r, l, alpha), alpha), fd, 1e-8);
  }
}

TEST(ShapeMask, CenterAlwaysInside) {
  for (auto shape : {CocShape::circle, CocShape::pentagon, CocShape::hexagon}) {
    CoCProfile p;
    p.shape = shape;
    EXPECT_EQ(shape_mask(p, 0.0, 0.0, 3.0), 1.0);
  }
}

TEST(ShapeMask, CircleOutside) {
  EXPECT_EQ(shape_mask(CoCProfile{}, 5.0, 0.0, 3.0), 0.0);
  EXPECT_EQ(shape_mask(CoCProfile{}, 3.0 + kSupportMargin - 0.01, 0.0, 3.0), 1.0);
  EXPECT_EQ(shape_mask(CoCProfile{}, 3.0 + kSupportMargin, 0.0, 3.0), 0.0);
}

TEST(ScatterWeight, VanishesContinuouslyAtSupportEdge) {
  const CoCProfile p;
  const double r = 3.0;
  EXPECT_EQ(scatter_weight(p, r + kSupportMargin, 0.0, r), 0.0);
  EXPECT_LT(scatter_weight(p, r + kSupportMargin - 1e-6, 0.0, r), 1e-11);
  EXPECT_NEAR(scatter_weight(p, r, 0.0, r), 0.5 - support_floor(p.alpha), 1e-15);
  // Tail offset is e^-16 for the default alpha.
  EXPECT_NEAR(support_floor(p.alpha), 1.0 / (1.0 + std::exp(16.0)), 1e-22);
}

TEST(ShapeMask, HexagonVertexVersusEdge) {
  CoCProfile p;
  p.shape = CocShape::hexagon;
  const double r = 10.0;
  // Vertex at angle 0: 0.9 r along it is inside.
  EXPECT_EQ(shape_mask(p, 0.9 * r, 0.0, r), 1.0);
  // Edge midpoint direction (30 deg) sits at the apothem 0.866 r.
  const double t = std::numbers::pi / 6.0;
  EXPECT_EQ(shape_mask(p, 0.9 * r * std::cos(t), 0.9 * r * std::sin(t), r), 0.0);
  EXPECT_EQ(shape_mask(p, 0.85 * r * std::cos(t), 0.85 * r * std::sin(t), r), 1.0);
  // Rotating by 30 deg swaps the two cases.
  p.shape_rotation = t;
  EXPECT_EQ(shape_mask(p, 0.9 * r, 0.0, r), 0.0);
}

TEST(ShapeMask, PolygonMatchesAngularOracle) {
  // Independent classification: radius of the polygon boundary along angle phi
  // is apothem / cos(phi - nearest edge normal).
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int sides : {5, 6}) {
    CoCProfile p;
    p.shape = sides == 5 ? CocShape::pentagon : CocShape::hexagon;
    p.shape_rotation = 0.3;
    const double r = 7.0;
    const double step = 2.0 * std::numbers::pi / sides;
    for (int i = 0; i < 2000; ++i) {
      const double dx = 8.0 * u(rng), dy = 8.0 * u(rng);
      double phi = std::atan2(dy, dx) - p.shape_rotation;
      phi = std::fmod(phi + 8.0 * std::numbers::pi, step);
      const double boundary = r * std::cos(std::numbers::pi / sides) / std::cos(phi - step / 2.0);
      const double dist = std::hypot(dx, dy);
      if (std::abs(dist - boundary) < 1e-9) continue;
      EXPECT_EQ(shape_mask(p, dx, dy, r), dist < boundary ? 1.0 : 0.0) << dx << "," << dy;
    }
  }
}

TEST(ShapeNames, RoundTrip) {
  for (auto s : {CocShape::circle, CocShape::pentagon, CocShape::hexagon}) EXPECT_EQ(parse_shape(to_string(s)), s);
  EXPECT_THROW(parse_shape("octagon"), std::invalid_argument);
}

TEST(Gamma, FixedPointsAndReference) {
  DisplayImage img(3, 1, 1, std::vector<double>{0.0, 1.0, 0.5});
  const auto lin = gamma_decode(img).image;
  EXPECT_EQ(lin.values()[0], 0.0);
  EXPECT_EQ(lin.values()[1], 1.0);
  EXPECT_NEAR(lin.values()[2], 0.21763764082403103, 1e-15);
}

TEST(Gamma, RoundTrip) {
  std::mt19937_64 rng(5);
  const auto img = fixtures::random_image(rng, 32, 32);
  const auto back = gamma_encode(gamma_decode(img).image).image;
  EXPECT_LT(fixtures::max_abs_diff(img.values(), back.values()), 1e-6);
}

TEST(Gamma, OutOfRangeIsClampedAndCounted) {
  DisplayImage img(4, 1, 1, std::vector<double>{-0.5, 1.5, 0.25, std::nan("")});
  const auto r = gamma_decode(img);
  EXPECT_EQ(r.clamped, 3u);
  EXPECT_EQ(r.image.values()[0], 0.0);
  EXPECT_EQ(r.image.values()[1], 1.0);
  EXPECT_EQ(r.image.values()[3], 0.0);
}

TEST(LensParams, Validation) {
  EXPECT_NO_THROW((LensParams{0.0, 1.0}.validate()));
  EXPECT_THROW((LensParams{-0.1, 0.5}.validate()), std::domain_error);
  EXPECT_NO_THROW((LensParams{0.5, 0.0}.validate()));
  EXPECT_THROW((LensParams{0.5, -0.01}.validate()), std::domain_error);
  EXPECT_THROW((LensParams{0.5, 1.01}.validate()), std::domain_error);
  CoCProfile bad;
  bad.alpha = 0.0;
  EXPECT_THROW(bad.validate(), std::domain_error);
  bad = {};
  bad.max_radius_px = 0.5;
  EXPECT_THROW(bad.validate(), std::domain_error);
  EXPECT_THROW((GammaSpec{0.0}.validate()), std::domain_error);
}

TEST(DepthMapType, RejectsInvalidValues) {
  EXPECT_THROW(DepthMap(2, 1, {1.0, 0.0}), std::domain_error);
  EXPECT_THROW(DepthMap(2, 1, {1.0, std::nan("")}), std::domain_error);
  EXPECT_THROW(DepthMap(2, 2, {1.0, 1.0}), std::invalid_argument);
}
