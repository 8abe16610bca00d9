#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "knudsen/core.hpp"

using namespace knudsen;

namespace {

// Independent oracle: bisection on |x - eps s w| - 1 over s in [0, 2/eps].
// The backward ray starts inside the disk, so the distance crosses 1 once.
double exit_time_bisection(DiskPoint x, Direction w, double eps) {
  auto gap = [&](double s) { return std::hypot(x.x1 - eps * s * w.w1, x.x2 - eps * s * w.w2) - 1.0; };
  double lo = 0.0, hi = 2.5 / eps;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (gap(mid) < 0.0 ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST(Epsilon, RejectsOutOfRange) {
  EXPECT_THROW(Epsilon(0.0), DomainError);
  EXPECT_THROW(Epsilon(1.0), DomainError);
  EXPECT_THROW(Epsilon(-0.2), DomainError);
  EXPECT_DOUBLE_EQ(Epsilon(0.1).value(), 0.1);
}

TEST(WrapAngle, LandsInHalfOpenInterval) {
  for (double a : {-10.0, -kPi, kPi, 3 * kPi, 0.0, 7.0}) {
    const double w = wrap_angle(a);
    EXPECT_GE(w, -kPi);
    EXPECT_LT(w, kPi);
    EXPECT_NEAR(std::remainder(w - a, kTwoPi), 0.0, 1e-12);
  }
  EXPECT_DOUBLE_EQ(wrap_angle(kPi), -kPi);
}

TEST(ExitTime, ClosedFormExamples) {
  EXPECT_NEAR(exit_time({0.0, 0.0}, {1.0, 0.0}, 0.1), 10.0, 1e-12);
  EXPECT_NEAR(exit_time({0.5, 0.0}, {1.0, 0.0}, 0.1), 15.0, 1e-12);
}

TEST(ExitTime, BoundaryInflowIsZeroOutflowIsChord) {
  EXPECT_DOUBLE_EQ(exit_time({1.0, 0.0}, {-1.0, 0.0}, 0.1), 0.0);
  EXPECT_NEAR(exit_time({1.0, 0.0}, {1.0, 0.0}, 0.1), 20.0, 1e-12);
}

TEST(ExitTime, MatchesBisectionOracleOnRandomInputs) {
  std::mt19937_64 rng(12345);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 100; ++k) {
    const double r = std::sqrt(u(rng)) * 0.999;
    const double th = kTwoPi * u(rng);
    const double xi = kTwoPi * u(rng);
    const double eps = 0.05 + 0.9 * u(rng);
    const DiskPoint x = DiskPoint::from_polar(r, th);
    const Direction w = VelocityAngle{xi}.direction();
    const double s = exit_time(x, w, eps);
    EXPECT_NEAR(s, exit_time_bisection(x, w, eps), 1e-10 / eps) << "case " << k;
    // The hit point is on the inflow or grazing set.
    const DiskPoint hit{x.x1 - eps * s * w.w1, x.x2 - eps * s * w.w2};
    EXPECT_NEAR(hit.radius(), 1.0, 1e-12);
    EXPECT_LE(dot(hit, w), 1e-12);
  }
}

TEST(ExitTime, OutsideDiskThrows) { EXPECT_THROW(exit_time({1.1, 0.0}, {1.0, 0.0}, 0.1), DomainError); }

TEST(ClassifyBoundary, SignOfNormalComponent) {
  EXPECT_EQ(classify_boundary({1.0, 0.0}, {-1.0, 0.0}), BoundaryClass::inflow);
  EXPECT_EQ(classify_boundary({1.0, 0.0}, {1.0, 0.0}), BoundaryClass::outflow);
  EXPECT_EQ(classify_boundary({1.0, 0.0}, {0.0, 1.0}), BoundaryClass::grazing);
  EXPECT_THROW(classify_boundary({0.5, 0.0}, {1.0, 0.0}), DomainError);
}

TEST(VelocityAngle, RotatedAngleGivesNormalComponent) {
  // w . n = -sin(phi): inflow exactly when sin(phi) > 0.
  for (double th : {-2.0, 0.3, 1.7}) {
    for (double xi : {-2.5, -0.4, 0.9, 3.0}) {
      const VelocityAngle v{xi};
      const DiskPoint x0 = DiskPoint::from_polar(1.0, th);
      EXPECT_NEAR(dot(x0, v.direction()), -std::sin(v.phi(th)), 1e-14);
    }
  }
  const VelocityAngle back = VelocityAngle::from_direction(VelocityAngle{0.7}.direction());
  EXPECT_NEAR(back.xi, 0.7, 1e-14);
}

TEST(AngularGrid, MidpointNodesAndWeights) {
  const AngularGrid g(16);
  double wsum = 0.0;
  double min_sin = 1.0;
  for (int j = 0; j < g.size(); ++j) {
    wsum += g.weight();
    min_sin = std::min(min_sin, std::abs(std::sin(g.node(j))));
    EXPECT_GT(std::abs(std::cos(g.node(j))), 0.0);
  }
  EXPECT_NEAR(wsum, kTwoPi, 1e-14);
  EXPECT_GT(min_sin, 0.0);
  EXPECT_NEAR(g.node(0), -kPi + kPi / 16, 1e-15);
}

TEST(VelocityAverage, ConstantsHarmonicsAndHalfMeasure) {
  const AngularGrid g(32);
  std::vector<double> c(32, 2.5), cosv(32), half(32);
  for (int j = 0; j < 32; ++j) {
    cosv[j] = std::cos(g.node(j));
    half[j] = std::sin(g.node(j)) > 0.0 ? 1.0 : 0.0;
  }
  EXPECT_NEAR(velocity_average(g, c), 2.5, 1e-14);
  EXPECT_NEAR(velocity_average(g, cosv), 0.0, 1e-14);
  EXPECT_NEAR(velocity_average(g, half), 0.5, 1e-14);
  EXPECT_THROW(velocity_average(g, std::span<const double>{}), DomainError);
}

TEST(VelocityAverage, ExactForLowDegreeTrigonometricPolynomials) {
  const AngularGrid g(12);
  std::vector<double> v(12);
  for (int j = 0; j < 12; ++j) v[j] = 1.0 + std::cos(3 * g.node(j)) + std::sin(11 * g.node(j));
  EXPECT_NEAR(velocity_average(g, v), 1.0, 1e-14);
}

TEST(LayerFrame, BoundaryCentreAndRoundTrip) {
  EXPECT_NEAR(to_layer_frame({1.0, 0.0}, {0.3}, 0.1).eta, 0.0, 1e-15);
  EXPECT_NEAR(to_layer_frame({0.0, 0.0}, {0.3}, 0.1).eta, 10.0, 1e-12);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 50; ++k) {
    const DiskPoint x = DiskPoint::from_polar(0.05 + 0.9 * u(rng), kTwoPi * u(rng) - kPi);
    const VelocityAngle w{kTwoPi * u(rng) - kPi};
    const LayerPoint p = to_layer_frame(x, w, 0.2);
    auto [x2, w2] = from_layer_frame(p, 0.2);
    EXPECT_NEAR(x2.x1, x.x1, 1e-12);
    EXPECT_NEAR(x2.x2, x.x2, 1e-12);
    EXPECT_NEAR(std::remainder(w2.xi - w.xi, kTwoPi), 0.0, 1e-12);
  }
}

TEST(RefinedOffsets, GradedAndBounded) {
  const auto d = refined_offsets(1.0, 0.001, 0.05, 1.3);
  EXPECT_EQ(d.front(), 0.0);
  EXPECT_EQ(d.back(), 1.0);
  EXPECT_NEAR(d[1], 0.001, 1e-15);
  for (std::size_t i = 2; i + 1 < d.size(); ++i) {
    const double r = (d[i] - d[i - 1]) / (d[i - 1] - d[i - 2]);
    EXPECT_LE(r, 2.0 + 1e-12);
    EXPECT_GE(r, 1.0 - 1e-12);
  }
  EXPECT_THROW(refined_offsets(1.0, 0.01, 0.1, 2.5), ConfigurationError);
}

TEST(PolarInterpolation, ReproducesBilinearData) {
  SpaceTimeGrid g;
  g.r = {0.0, 0.5, 1.0};
  g.n_theta = 8;
  g.t = {0.0};
  g.validate();
  std::vector<double> v(3 * 8);
  for (int i = 0; i < 3; ++i)
    for (int m = 0; m < 8; ++m) v[i * 8 + m] = 2.0 * g.r[i] + 1.0;
  const auto s = polar_stencil(g, 0.75, 0.4);
  EXPECT_NEAR(interpolate_polar(g, v, s), 2.5, 1e-14);
}

TEST(ParallelFor, CoversEveryIndexOnce) {
  std::vector<int> hits(101, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  for (int h : hits) EXPECT_EQ(h, 1);
}
