#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "knudsen/experiments.hpp"

using namespace knudsen;

namespace {

ConvergenceOptions small_study(StudyData data) {
  ConvergenceOptions o;
  o.data = std::move(data);
  o.T = 0.2;
  o.transport_grid = {.n_phi = 16, .deta_target = 0.5, .dr_max = 0.1, .r_ratio = 1.4};
  o.transport.dtau = 0.5;
  o.expansion_n_r = 10;
  o.expansion_n_theta = 8;
  o.expansion_dt = 0.02;
  o.layer.eta_nodes = milne_eta_nodes(40.0, 0.05, 0.4, 1.2);
  o.layer.n_phi = 32;
  o.evaluation.n_theta = 2;
  o.evaluation.layer_times = {0.1, 0.2};
  o.threads = 2;
  return o;
}

GapOptions small_gap() {
  GapOptions o;
  o.n_phi = 32;
  o.h_max = 0.4;
  o.ratio = 1.2;
  return o;
}

}  // namespace

TEST(PointAsymptotics, WeightsAtUnitDepth) {
  // Reference weights e^{-1} and e^{1 - sqrt(3)} evaluated at 30 digits.
  // With ubar0 = G + 1 each prediction equals G + 1 - weight.
  const double eps = 0.03;
  const double G = counterexample_datum(eps);
  const double Gs = counterexample_datum(std::sqrt(3.0) * eps);
  const PointPrediction p = milne_point_asymptotics(1.0, eps, G + 1.0, Gs + 1.0);
  EXPECT_NEAR(G + 1.0 - p.u, 0.3678794, 1e-7);
  EXPECT_NEAR(Gs + 1.0 - p.U, 0.4809217, 1e-7);
}

TEST(PointAsymptotics, WallAndFarLimits) {
  const double eps = 0.05;
  const PointPrediction wall = milne_point_asymptotics(0.0, eps, 1.7, 2.3);
  EXPECT_DOUBLE_EQ(wall.u, counterexample_datum(eps));
  EXPECT_DOUBLE_EQ(wall.U, counterexample_datum(eps));
  const PointPrediction far = milne_point_asymptotics(2000.0, eps, 1.7, 2.3);
  EXPECT_NEAR(far.u, 1.7, 1e-12);
  EXPECT_NEAR(far.U, 2.3, 1e-12);
}

TEST(CounterexampleGap, WallAveragesAndMaximumPrinciple) {
  const GapOptions opt = small_gap();
  for (ForceKind k : {ForceKind::none, ForceKind::geometric}) {
    MilneProblem p;
    p.eps = 0.04;
    p.force_kind = k;
    p.H = counterexample_datum;
    p.eta_nodes = gap_eta_nodes(0.04, opt);
    p.n_phi = opt.n_phi;
    const MilneSolution s = solve_milne(p);
    EXPECT_GE(s.fbar()[0], 2.0 - std::exp(-1.0) / 2.0);
    EXPECT_LE(s.fbar()[0], 2.0 + std::exp(-1.0) / 2.0);
    for (std::size_t i = 0; i < s.eta_nodes().size(); ++i)
      for (int j = 0; j < s.angles().size(); ++j) {
        EXPECT_GE(s.at(i, j), 1.0);
        EXPECT_LE(s.at(i, j), 3.0);
      }
  }
}

TEST(CounterexampleGap, GapGrowsWithDepthNearTheWall) {
  const GapOptions opt = small_gap();
  double last = 0.0;
  for (double n : {0.25, 0.5, 1.0}) {
    const GapReport r = counterexample_gap(n, {0.04}, opt);
    ASSERT_EQ(r.rows.size(), 1u);
    const GapRow& row = r.rows[0];
    EXPECT_DOUBLE_EQ(row.n, n);
    EXPECT_NEAR(row.gap, std::abs(row.u_geometric - row.u_classical), 1e-15);
    EXPECT_GT(row.gap, last);
    last = row.gap;
  }
}

TEST(CounterexampleGap, EtaGridResolvesTheDepth) {
  for (double depth : {0.01, 0.04, 0.25}) {
    const auto nodes = gap_eta_nodes(depth);
    EXPECT_GE(std::count_if(nodes.begin(), nodes.end(), [depth](double v) { return v <= depth; }), 8);
  }
}

TEST(CounterexampleGap, RejectsBadInput) {
  EXPECT_THROW(counterexample_gap(1.0, {0.02, 0.04}), ConfigurationError);
  EXPECT_THROW(counterexample_gap(-1.0, {0.04}), ConfigurationError);
  GapOptions opt = small_gap();
  opt.eta_max = 1.0;
  EXPECT_THROW(counterexample_gap(100.0, {0.04}, opt), ConfigurationError);
}

TEST(EvaluationProbes, NearWallAndGrazingPoints) {
  const double eps = 0.1;
  EvaluationSpec spec;
  spec.n_theta = 3;
  const AngularGrid angles(8);
  const auto probes = evaluation_probes(eps, 1.0, angles, spec);
  const std::size_t near_wall = (5 + 2) * 5 * 3 * 8;
  const std::size_t grazing = 2 * 6 * 5 * 3 * 4;
  ASSERT_EQ(probes.size(), near_wall + grazing);
  double min_mu = 1.0, min_t = 1.0;
  for (const Probe& p : probes) {
    min_mu = std::min(min_mu, p.x.mu());
    min_t = std::min(min_t, p.t);
    EXPECT_TRUE(p.x.inside());
  }
  EXPECT_NEAR(min_mu, 0.1 * eps * eps, 1e-14);
  EXPECT_NEAR(min_t, 0.5 * eps * eps, 1e-16);
}

TEST(ConvergenceStudy, ConstantDataReproduced) {
  const auto reports =
      convergence_study({0.3, 0.2}, {LayerKind::geometric, LayerKind::classical}, 0, small_study(constant_datum(1.5)));
  ASSERT_EQ(reports.size(), 2u);
  for (const auto& r : reports) {
    ASSERT_EQ(r.rows.size(), 2u);
    EXPECT_GT(r.rows[0].eps, r.rows[1].eps);
    for (const auto& row : r.rows) {
      EXPECT_LE(row.error_linf, 1e-8);
      EXPECT_EQ(row.grid_id.find(','), std::string::npos);
    }
  }
  EXPECT_EQ(reports[0].rows[0].kind, LayerKind::geometric);
  EXPECT_EQ(reports[1].rows[0].kind, LayerKind::classical);
}

TEST(ConvergenceStudy, FirstOrderConstantDataReproduced) {
  const auto r = convergence_study({0.3}, LayerKind::geometric, 1, small_study(constant_datum(0.7)));
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_EQ(r.rows[0].order, 1);
  EXPECT_LE(r.rows[0].error_linf, 1e-8);
}

TEST(ConvergenceStudy, TestDatumErrorIsFiniteAndPositive) {
  const auto r = convergence_study({0.3}, LayerKind::geometric, 0, small_study(test_datum()));
  ASSERT_EQ(r.rows.size(), 1u);
  EXPECT_GT(r.rows[0].error_linf, 0.0);
  EXPECT_LT(r.rows[0].error_linf, 0.2);
}

TEST(ConvergenceStudy, RejectsNonDecreasingEpsList) {
  EXPECT_THROW(convergence_study({0.1, 0.2}, LayerKind::geometric, 0), ConfigurationError);
  EXPECT_THROW(convergence_study({0.1, 0.1}, LayerKind::geometric, 0), ConfigurationError);
  EXPECT_THROW(convergence_study({}, LayerKind::geometric, 0), ConfigurationError);
}

TEST(ConvergenceStudy, FailureNamesTheEps) {
  auto opt = small_study(constant_datum(1.0));
  opt.transport_grid.n_theta = 3;  // not compatible with 16 velocity nodes
  try {
    convergence_study({0.3}, LayerKind::geometric, 0, opt);
    FAIL() << "expected a StudyError";
  } catch (const StudyError& e) {
    EXPECT_DOUBLE_EQ(e.eps(), 0.3);
    EXPECT_NE(std::string(e.what()).find("0.3"), std::string::npos);
  }
}

TEST(ErrorNorm, RejectsFieldBeyondHorizon) {
  const auto opt = small_study(constant_datum(1.0));
  TransportProblem tp;
  tp.eps = 0.3;
  tp.g = opt.data.g;
  tp.h = opt.data.h;
  tp.T = 0.2;
  auto field =
      solve_transport(tp, make_transport_grid(0.3, 0.2, opt.transport_grid, 0.5), AngularGrid(16), {.dtau = 0.5}).first;
  ExpansionConfig cfg;
  cfg.eps = 0.3;
  cfg.g = opt.data.g;
  cfg.h = opt.data.h;
  cfg.grid = make_expansion_grid(0.1, 10, 8, 0.02);
  cfg.layer = opt.layer;
  const ExpansionBundle b = build_expansion(cfg);
  EXPECT_THROW(error_norm(field, b), ConfigurationError);
  EXPECT_THROW(error_norm(field, ExpansionBundle{}), ConfigurationError);
}
