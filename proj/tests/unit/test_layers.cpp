#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "knudsen/layers.hpp"

using namespace knudsen;

namespace {

LayerSettings small_layer() {
  LayerSettings s;
  s.eta_nodes = milne_eta_nodes(40.0, 0.05, 0.4, 1.2);
  s.n_phi = 32;
  return s;
}

ExpansionConfig constant_config(double c, int order) {
  ExpansionConfig cfg;
  cfg.eps = 0.2;
  cfg.order = order;
  cfg.g = [c](double, double, double) { return c; };
  cfg.h = [c](DiskPoint, VelocityAngle) { return c; };
  cfg.grid = make_expansion_grid(0.5, 10, 8, 0.05);
  cfg.layer = small_layer();
  return cfg;
}

ExpansionConfig test_config(double eps, LayerKind kind, int order = 0) {
  ExpansionConfig cfg;
  cfg.eps = eps;
  cfg.kind = kind;
  cfg.order = order;
  cfg.g = [](double t, double, double phi) { return t * t * std::exp(-t) * std::cos(phi); };
  cfg.h = [](DiskPoint, VelocityAngle) { return 0.0; };
  cfg.grid = make_expansion_grid(1.0, 10, 8, 0.05);
  cfg.layer = small_layer();
  return cfg;
}

}  // namespace

TEST(InitialLayer0, ClosedForm) {
  const auto iso = build_initial_layer0([](DiskPoint x, VelocityAngle) { return x.x1 + 2.0; }, 16);
  EXPECT_NEAR(iso.value(0.3, {0.2, 0.1}, {0.7}), 0.0, 1e-15);

  const auto l = build_initial_layer0([](DiskPoint, VelocityAngle w) { return std::cos(w.xi); }, 16);
  for (double tau : {0.0, 0.5, 3.0})
    for (double xi : {-2.0, 0.1, 1.3}) EXPECT_NEAR(l.value(tau, {0.1, 0.4}, {xi}), std::exp(-tau) * std::cos(xi), 1e-15);

  auto h = [](DiskPoint x, VelocityAngle w) { return x.x1 * std::sin(2 * w.xi) + 1.0 + std::cos(w.xi) * x.x2; };
  const auto m = build_initial_layer0(h, 16);
  const DiskPoint x{0.3, -0.5};
  EXPECT_NEAR(m.value(0.0, x, {0.9}), h(x, {0.9}) - 1.0, 1e-15);
}

TEST(InitialLayer1, TrapezoidMatchesClosedForm) {
  // h = a + b cos(xi) + c sin(xi) with a = x1^2 + x2, b = x1 x2, c = x1^2.
  auto h = [](DiskPoint x, VelocityAngle w) {
    return x.x1 * x.x1 + x.x2 + x.x1 * x.x2 * std::cos(w.xi) + x.x1 * x.x1 * std::sin(w.xi);
  };
  auto l0 = std::make_shared<const InitialLayer0>(h, 32);
  const InitialLayer1 l1(l0);
  const DiskPoint x{0.4, -0.3};
  // Oracle: w = (-sin xi, -cos xi), grad b = (x2, x1), grad c = (2 x1, 0).
  const double Q = -(x.x1 + 2.0 * x.x1) / 2.0;
  for (double xi : {-1.1, 0.4, 2.7}) {
    const double s = std::sin(xi), c = std::cos(xi);
    const double q = -s * c * x.x2 - c * c * x.x1 - s * s * 2.0 * x.x1;
    const double f0 = -s * 2.0 * x.x1 - c * 1.0;
    for (double tau : {0.0, 0.3, 1.0, 4.0}) {
      const double e = std::exp(-tau);
      const double F1 = e * f0 - tau * e * q - Q * ((1.0 - e) - tau * e);
      const double expected = F1 - (-Q);
      EXPECT_NEAR(l1.value(tau, x, {xi}), expected, 2e-5) << "tau=" << tau << " xi=" << xi;
    }
  }
  EXPECT_NEAR(l1.far_value(x), -Q, 2e-5);
}

TEST(BoundaryLayer0, ConstantDatumGivesZeroLayer) {
  const auto b = build_boundary_layer0(0.2, [](double, double, double) { return 1.5; }, LayerKind::geometric,
                                       {0.0, 0.5, 1.0}, 8, small_layer());
  EXPECT_EQ(b.rank(), 1u);
  EXPECT_NEAR(b.f_inf(0.7, 0.3), 1.5, 1e-10);
  for (double eta : {0.0, 0.3, 2.0})
    for (double phi : {-2.0, 0.2, 1.5}) EXPECT_NEAR(b.layer(0.7, eta, 0.3, phi), 0.0, 1e-10);
}

TEST(BoundaryLayer0, TestDatumIsRankOneAndVanishesAtTimeZero) {
  const auto cfg = test_config(0.2, LayerKind::geometric);
  const auto b = build_boundary_layer0(cfg.eps, cfg.g, cfg.kind, cfg.grid.t, cfg.grid.n_theta, cfg.layer);
  EXPECT_EQ(b.rank(), 1u);
  for (double eta : {0.0, 0.5, 3.0})
    for (double phi : {-1.0, 0.5, 2.0}) EXPECT_EQ(b.layer(0.0, eta, 0.0, phi), 0.0);
  // cos(phi) data have zero far field by the phi -> pi - phi antisymmetry.
  EXPECT_NEAR(b.f_inf(1.0, 0.4), 0.0, 1e-10);
  // At the wall on the inflow set the layer reproduces the datum.
  EXPECT_NEAR(b.layer(1.0, 0.0, 0.4, 0.7), std::exp(-1.0) * std::cos(0.7), 1e-10);
}

TEST(BoundaryLayer0, LowRankSplitMatchesSampleSolves) {
  auto g = [](double t, double th, double phi) { return std::cos(th) * std::sin(phi) + t * std::cos(2 * phi) + 1.0; };
  const std::vector<double> ts{0.0, 0.5, 1.0};
  const auto fam = build_boundary_layer0(0.2, g, LayerKind::geometric, ts, 8, small_layer());
  EXPECT_LE(fam.rank(), 3u);
  const LayerSettings set = small_layer();
  auto op = std::make_shared<const MilneOperator>(ForceField(0.2, ForceKind::geometric), set.eta_nodes, set.n_phi);
  for (std::size_t k : {std::size_t{1}, std::size_t{2}})
    for (int m : {0, 3, 5}) {
      const double th = fam.theta(m);
      const auto direct = solve_milne(op, [&](double phi) { return g(ts[k], th, phi); }, {});
      EXPECT_NEAR(fam.f_inf(k, m), direct.f_inf(), 1e-9);
      for (double eta : {0.0, 0.7, 4.0})
        for (double phi : {-2.5, 0.3, 1.9}) EXPECT_NEAR(fam.f(ts[k], eta, th, phi), direct.evaluate(eta, phi), 1e-9);
    }
}

TEST(BoundaryLayer0, VanishesBeyondCutoffSupport) {
  const auto cfg = test_config(0.2, LayerKind::geometric);
  const auto b = build_boundary_layer0(cfg.eps, cfg.g, cfg.kind, cfg.grid.t, cfg.grid.n_theta, cfg.layer);
  EXPECT_EQ(b.layer(1.0, 0.375 / 0.2, 0.0, 0.3), 0.0);
  EXPECT_EQ(b.layer(1.0, 0.4 / 0.2, 0.0, 0.3), 0.0);
}

TEST(Expansion, ConstantDataGiveTheConstant) {
  for (int order : {0, 1}) {
    const auto b = build_expansion(constant_config(2.25, order));
    for (double t : {0.0, 0.01, 0.3, 0.5})
      for (double r : {0.0, 0.5, 0.97, 1.0})
        for (double xi : {-2.0, 0.5, 2.9}) {
          EXPECT_NEAR(evaluate_expansion(b, t, DiskPoint::from_polar(r, 0.8), {xi}), 2.25, 1e-10)
              << "order " << order << " t=" << t << " r=" << r;
        }
  }
}

TEST(Expansion, TestDatumHasZeroInteriorAndInitialLayer) {
  const auto b = build_expansion(test_config(0.2, LayerKind::geometric));
  for (double v : b.interior0->values()) EXPECT_NEAR(v, 0.0, 1e-10);
  for (double t : {0.0, 0.4, 1.0}) {
    const auto terms = expansion_terms(b, t, DiskPoint::from_polar(0.95, 0.2), {0.4});
    EXPECT_EQ(terms.initial, 0.0);
    EXPECT_NEAR(terms.interior, 0.0, 1e-10);
  }
}

TEST(Expansion, DeepInteriorHasNoLayers) {
  const auto b = build_expansion(test_config(0.2, LayerKind::geometric));
  const auto terms = expansion_terms(b, 1.0, DiskPoint::from_polar(0.5, 1.0), {0.3});
  EXPECT_EQ(terms.boundary, 0.0);
  EXPECT_EQ(terms.initial, 0.0);
}

TEST(Expansion, TotalIsSumOfComponents) {
  ExpansionConfig cfg = test_config(0.2, LayerKind::classical);
  cfg.h = [](DiskPoint x, VelocityAngle w) { return 0.1 * (1.0 - x.radius() * x.radius()) * std::cos(w.xi); };
  const auto b = build_expansion(cfg);
  for (double t : {0.01, 0.5})
    for (double r : {0.3, 0.9, 0.99}) {
      const DiskPoint x = DiskPoint::from_polar(r, -0.4);
      const VelocityAngle w{1.1};
      const LayerPoint lp = to_layer_frame(x, w, cfg.eps);
      const double sum = b.interior0->value(t, x) + b.initial0->value(t / (cfg.eps * cfg.eps), x, w) +
                         b.boundary0->layer(t, lp.eta, lp.theta, lp.phi);
      EXPECT_NEAR(evaluate_expansion(b, t, x, w), sum, 1e-12);
    }
}

TEST(Expansion, ClassicalAndGeometricCoincideWithoutForce) {
  const auto cfg = test_config(0.2, LayerKind::classical);
  const auto a = build_boundary_layer0(cfg.eps, cfg.g, LayerKind::classical, cfg.grid.t, 8, cfg.layer);
  auto op = std::make_shared<const MilneOperator>(ForceField(cfg.eps, ForceKind::none), cfg.layer.eta_nodes,
                                                  cfg.layer.n_phi);
  const auto ref = solve_milne(op, [](double phi) { return std::cos(phi); }, {});
  for (double eta : {0.1, 1.0})
    for (double phi : {0.2, 2.0}) EXPECT_NEAR(a.f(1.0, eta, 0.0, phi), std::exp(-1.0) * ref.evaluate(eta, phi), 1e-12);
}

TEST(Order1, ThetaIndependentDatumHasNoSourceSolves) {
  const auto b = build_expansion(test_config(0.2, LayerKind::geometric, 1));
  ASSERT_TRUE(b.boundary1);
  // No theta dependence, so no source solves; U0 = 0 makes the datum w.grad U0 vanish too.
  EXPECT_LE(b.boundary1->rank(), 1u);
  for (double eta : {0.0, 0.5})
    for (double phi : {0.3, 2.0}) EXPECT_NEAR(b.boundary1->layer(0.6, eta, 0.1, phi), 0.0, 1e-12);
  for (double v : b.interior1->values()) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(Order1, ThetaDependentDataGiveSourceBasis) {
  ExpansionConfig cfg = test_config(0.25, LayerKind::geometric, 1);
  cfg.g = [](double t, double th, double phi) { return t * std::sin(th) * (1.0 + 0.5 * std::cos(phi)); };
  cfg.grid = make_expansion_grid(0.3, 8, 8, 0.1);
  const auto b = build_expansion(cfg);
  EXPECT_GT(b.boundary1->rank(), 0u);
  const double v = evaluate_expansion(b, 0.3, DiskPoint::from_polar(0.98, 1.0), {0.5});
  EXPECT_TRUE(std::isfinite(v));
}

TEST(Order1, TooFewThetaSamplesRejected) {
  ExpansionConfig cfg = test_config(0.2, LayerKind::geometric, 1);
  cfg.grid = make_expansion_grid(0.5, 8, 4, 0.1);
  EXPECT_THROW(build_expansion(cfg), ConfigurationError);
}
