#pragma once

// Experiments comparing the kinetic solution with its asymptotic expansion:
// a convergence study over eps for geometric and classical layers, and the
// half-space counterexample evaluated at (eta, phi) = (n eps, eps).

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "knudsen/core.hpp"
#include "knudsen/errors.hpp"
#include "knudsen/layers.hpp"
#include "knudsen/milne.hpp"
#include "knudsen/transport.hpp"

namespace knudsen {

/// Boundary and initial data of a convergence study.
struct StudyData {
  std::string name;
  BoundaryDatum g;
  InitialDatum h;
};

/// g = t^2 e^{-t} cos(phi), h = 0. Since g(0) = 0 the data satisfy the
/// improved compatibility condition.
inline StudyData test_datum() {
  StudyData d;
  d.name = "counterexample";
  d.g = [](double t, double, double phi) { return t * t * std::exp(-t) * std::cos(phi); };
  d.h = [](DiskPoint, VelocityAngle) { return 0.0; };
  return d;
}

/// g = h = c.
inline StudyData constant_datum(double c) {
  StudyData d;
  d.name = "constant";
  d.g = [c](double, double, double) { return c; };
  d.h = [c](DiskPoint, VelocityAngle) { return c; };
  return d;
}

/// Phase points added to the transport grid nodes when measuring errors.
struct EvaluationSpec {
  std::vector<double> mu_factors{0.5, 1.0, 2.0, 4.0, 8.0};    // mu = eps * c
  std::vector<double> time_factors{0.5, 1.0, 2.0, 4.0, 8.0};  // t = eps^2 * c
  std::vector<double> layer_depths{0.1, 0.25, 0.5, 1.0, 2.0, 3.0};  // mu = n * eps^2
  std::vector<double> grazing{0.1, 0.25, 0.5, 1.0, 2.0};  // phi = +-c eps and +-(pi - c eps)
  std::vector<double> layer_times{0.5, 1.0};
  int n_theta = 4;  // wall angles per point, offset from the grid nodes
};

/// Evaluation probes for one eps: near-wall points at every velocity node
/// and near-initial time, plus grazing points at depth O(eps^2) in mu on
/// both the incoming (sin phi > 0) and outgoing (sin phi < 0) side.
inline std::vector<Probe> evaluation_probes(double eps, double T, const AngularGrid& angles,
                                            const EvaluationSpec& spec = {}) {
  if (!(eps > 0.0 && eps < 1.0)) throw ConfigurationError("evaluation_probes: eps must lie in (0, 1)");
  if (!(T > 0.0)) throw ConfigurationError("evaluation_probes: T must be positive");
  if (spec.n_theta < 1) throw ConfigurationError("evaluation_probes: n_theta must be positive");
  std::vector<double> thetas;
  for (int m = 0; m < spec.n_theta; ++m) thetas.push_back(-kPi + (m + 0.37) * kTwoPi / spec.n_theta);

  std::vector<double> times;
  for (double c : spec.time_factors)
    if (c * eps * eps <= T) times.push_back(c * eps * eps);
  times.push_back(0.5 * T);
  times.push_back(T);

  std::vector<Probe> out;
  for (double t : times)
    for (double c : spec.mu_factors) {
      const double mu = c * eps;
      if (mu >= 1.0) continue;
      for (double theta : thetas)
        for (int j = 0; j < angles.size(); ++j)
          out.push_back({t, DiskPoint::from_polar(1.0 - mu, theta), VelocityAngle{angles.node(j)}, 0.0});
    }
  for (double t : spec.layer_times) {
    if (t > T) continue;
    for (double n : spec.layer_depths)
      for (double c : spec.grazing)
        for (double theta : thetas)
          for (double phi : {c * eps, kPi - c * eps, -c * eps, -kPi + c * eps})
            out.push_back({t, DiskPoint::from_polar(1.0 - n * eps * eps, theta), VelocityAngle::from_phi(phi, theta),
                           0.0});
  }
  return out;
}

/// Sup of |u - expansion| over the stored grid nodes and probes of the field.
///
/// The bundle must cover the time range of the field.
inline double error_norm(const KineticField& u, const ExpansionBundle& b, int threads = default_thread_count()) {
  if (!b.initial0 || !b.boundary0 || !b.interior0) throw ConfigurationError("error_norm: incomplete expansion bundle");
  if (b.order >= 1 && (!b.initial1 || !b.boundary1 || !b.interior1))
    throw ConfigurationError("error_norm: incomplete first-order terms");
  const SpaceTimeGrid& g = u.grid();
  const double horizon = b.interior0->grid().t.back();
  const double tol = 1e-12 * std::max(1.0, horizon);
  if (g.t.back() > horizon + tol)
    throw ConfigurationError("error_norm: field times extend beyond the expansion horizon");
  if (g.r.back() > 1.0 + kBoundaryTol) throw ConfigurationError("error_norm: field grid leaves the unit disk");
  for (const Probe& p : u.probes())
    if (p.t < 0.0 || p.t > horizon + tol) throw ConfigurationError("error_norm: probe time outside the expansion horizon");

  const int nphi = u.angles().size();
  const std::size_t rows = g.t.size() * g.r.size();
  std::vector<double> row_max(rows, 0.0);
  parallel_for(rows, threads, [&](std::size_t row) {
    const std::size_t k = row / g.r.size();
    const std::size_t i = row % g.r.size();
    const double t = std::min(g.t[k], horizon);
    double e = 0.0;
    for (int m = 0; m < g.n_theta; ++m) {
      const DiskPoint x = DiskPoint::from_polar(std::min(g.r[i], 1.0), g.theta(m));
      for (int j = 0; j < nphi; ++j)
        e = std::max(e, std::abs(u.at(k, i, m, j) - evaluate_expansion(b, t, x, VelocityAngle{u.angles().node(j)})));
    }
    row_max[row] = e;
  });
  const auto& probes = u.probes();
  std::vector<double> probe_err(probes.size(), 0.0);
  parallel_for(probes.size(), threads, [&](std::size_t q) {
    const Probe& p = probes[q];
    probe_err[q] = std::abs(p.value - evaluate_expansion(b, std::min(p.t, horizon), p.x, p.w));
  });
  double e = 0.0;
  for (double v : row_max) e = std::max(e, v);
  for (double v : probe_err) e = std::max(e, v);
  return e;
}

/// Options of a convergence study. Grids scale with eps: the transport grid
/// has radial spacing eps * deta_target at the wall and time step dtau * eps^2,
/// the layer problems use layer_eta_nodes(eps).
struct ConvergenceOptions {
  StudyData data = test_datum();
  double T = 1.0;
  TransportGridSpec transport_grid{.n_phi = 64};
  TransportOptions transport{};
  int expansion_n_r = 40;
  int expansion_n_theta = 32;
  double expansion_dt = 0.005;
  LayerSettings layer{};  // empty eta_nodes means layer_eta_nodes(eps, layer_deta)
  double layer_deta = 0.02;
  EvaluationSpec evaluation{};
  int threads = default_thread_count();
};

struct ConvergenceRow {
  double eps = 0.0;
  LayerKind kind = LayerKind::geometric;
  int order = 0;
  double error_linf = 0.0;
  std::string grid_id;
};

struct ConvergenceReport {
  std::vector<ConvergenceRow> rows;
};

namespace detail {

inline std::string eps_label(double eps) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), eps);
  return std::string(buf, res.ptr);
}

inline void check_eps_list(const std::vector<double>& eps, const char* who) {
  if (eps.empty()) throw ConfigurationError(std::string(who) + ": empty eps list");
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (!(eps[i] > 0.0 && eps[i] < 1.0)) throw ConfigurationError(std::string(who) + ": eps must lie in (0, 1)");
    if (i > 0 && !(eps[i] < eps[i - 1]))
      throw ConfigurationError(std::string(who) + ": eps list must be strictly decreasing");
  }
}

/// Compact, comma-free description of the transport and expansion grids.
inline std::string grid_id(const SpaceTimeGrid& tg, int n_phi, const SpaceTimeGrid& eg, int n_eta) {
  std::ostringstream os;
  os << "tr" << tg.r.size() << "x" << tg.n_theta << "x" << n_phi << "x" << tg.t.size() << "-ex" << eg.r.size() << "x"
     << eg.n_theta << "x" << eg.t.size() << "-eta" << n_eta;
  return os.str();
}

}  // namespace detail

/// Runs the study for several layer kinds, sharing one transport solve per
/// eps. Returns one report per kind, in the order of `kinds`.
inline std::vector<ConvergenceReport> convergence_study(const std::vector<double>& eps_list,
                                                        const std::vector<LayerKind>& kinds, int order,
                                                        const ConvergenceOptions& opt = {}) {
  detail::check_eps_list(eps_list, "convergence_study");
  if (kinds.empty()) throw ConfigurationError("convergence_study: no layer kind requested");
  if (order != 0 && order != 1) throw ConfigurationError("convergence_study: order must be 0 or 1");
  if (!opt.data.g || !opt.data.h) throw ConfigurationError("convergence_study: missing data");

  std::vector<ConvergenceReport> reports(kinds.size());
  for (double eps : eps_list) {
    try {
      TransportProblem tp;
      tp.eps = eps;
      tp.g = opt.data.g;
      tp.h = opt.data.h;
      tp.T = opt.T;
      TransportOptions topt = opt.transport;
      topt.threads = opt.threads;
      const SpaceTimeGrid tg = make_transport_grid(eps, opt.T, opt.transport_grid, topt.dtau);
      const AngularGrid angles(opt.transport_grid.n_phi);
      const auto probes = evaluation_probes(eps, opt.T, angles, opt.evaluation);
      auto [field, report] = solve_transport(tp, tg, angles, topt, probes);

      for (std::size_t q = 0; q < kinds.size(); ++q) {
        ExpansionConfig cfg;
        cfg.eps = eps;
        cfg.kind = kinds[q];
        cfg.order = order;
        cfg.g = opt.data.g;
        cfg.h = opt.data.h;
        cfg.grid = make_expansion_grid(tg.t.back(), opt.expansion_n_r, opt.expansion_n_theta, opt.expansion_dt);
        cfg.layer = opt.layer;
        if (cfg.layer.eta_nodes.empty()) cfg.layer.eta_nodes = layer_eta_nodes(eps, opt.layer_deta);
        cfg.layer.milne.threads = opt.threads;
        const ExpansionBundle bundle = build_expansion(cfg);
        ConvergenceRow row;
        row.eps = eps;
        row.kind = kinds[q];
        row.order = order;
        row.error_linf = error_norm(field, bundle, opt.threads);
        row.grid_id = detail::grid_id(tg, angles.size(), cfg.grid, static_cast<int>(cfg.layer.eta_nodes.size()));
        reports[q].rows.push_back(std::move(row));
      }
    } catch (const Error& e) {
      throw StudyError("convergence_study failed at eps = " + detail::eps_label(eps) + ": " + e.what(), eps);
    }
  }
  return reports;
}

inline ConvergenceReport convergence_study(const std::vector<double>& eps_list, LayerKind kind, int order,
                                           const ConvergenceOptions& opt = {}) {
  return convergence_study(eps_list, std::vector<LayerKind>{kind}, order, opt).front();
}

/// Wall datum of the counterexample at t = 1: G(phi) = e^{-1} cos(phi) + 2.
inline double counterexample_datum(double phi) { return std::exp(-1.0) * std::cos(phi) + 2.0; }

/// Closed-form predictions of the classical and geometric layers at
/// (eta, phi) = (n eps, eps), given the wall averages ubar(0) and Ubar(0).
struct PointPrediction {
  double u = 0.0;
  double U = 0.0;
};

inline PointPrediction milne_point_asymptotics(double n, double eps, double ubar0, double Ubar0) {
  const double wu = std::exp(-n);
  const double s = std::sqrt(1.0 + 2.0 * n);
  const double wU = std::exp(1.0 - s);
  return {(1.0 - wu) * ubar0 + wu * counterexample_datum(eps), (1.0 - wU) * Ubar0 + wU * counterexample_datum(s * eps)};
}

struct GapOptions {
  double eta_max = 40.0;
  double h_max = 0.25;
  double ratio = 1.1;
  int min_nodes = 8;  // eta nodes required in [0, n eps]
  int n_phi = 64;
  MilneOptions milne{};
};

struct GapRow {
  double eps = 0.0;
  double n = 0.0;
  double u_classical = 0.0;
  double u_geometric = 0.0;
  double pred_classical = 0.0;
  double pred_geometric = 0.0;
  double gap = 0.0;
  double ubar0_classical = 0.0;
  double ubar0_geometric = 0.0;
};

struct GapReport {
  std::vector<GapRow> rows;
};

/// Eta grid with at least opt.min_nodes nodes in [0, depth].
inline std::vector<double> gap_eta_nodes(double depth, const GapOptions& opt = {}) {
  // Geometric spacing h, h r, ..., so min_nodes steps span h (r^min_nodes - 1) / (r - 1).
  const double span = (std::pow(opt.ratio, opt.min_nodes) - 1.0) / (opt.ratio - 1.0);
  const double h_min = depth > 0.0 ? std::min(0.02, 0.99 * depth / span) : 0.02;
  return milne_eta_nodes(opt.eta_max, h_min, opt.h_max, opt.ratio);
}

/// Classical and geometric layer solves with datum G, read off at
/// (n eps, eps) and compared with the closed forms.
inline GapReport counterexample_gap(double n, const std::vector<double>& eps_list, const GapOptions& opt = {}) {
  if (!(n >= 0.0)) throw ConfigurationError("counterexample_gap: n must be nonnegative");
  detail::check_eps_list(eps_list, "counterexample_gap");
  GapReport out;
  for (double eps : eps_list) {
    const double eta = n * eps;
    if (eta >= opt.eta_max) throw ConfigurationError("counterexample_gap: point (n eps, eps) lies outside the eta grid");
    try {
      const auto nodes = gap_eta_nodes(eta, opt);
      const auto inside = std::count_if(nodes.begin(), nodes.end(), [eta](double v) { return v <= eta; });
      if (n > 0.0 && inside < opt.min_nodes)
        throw ConfigurationError("counterexample_gap: eta grid under-resolves [0, n eps]");
      double value[2], wall[2];
      for (int q = 0; q < 2; ++q) {
        MilneProblem p;
        p.eps = eps;
        p.force_kind = q == 0 ? ForceKind::none : ForceKind::geometric;
        p.H = counterexample_datum;
        p.eta_nodes = nodes;
        p.n_phi = opt.n_phi;
        const MilneSolution s = solve_milne(p, opt.milne);
        value[q] = s.evaluate(eta, eps);
        wall[q] = s.fbar()[0];
      }
      const PointPrediction pred = milne_point_asymptotics(n, eps, wall[0], wall[1]);
      out.rows.push_back(
          {eps, n, value[0], value[1], pred.u, pred.U, std::abs(value[1] - value[0]), wall[0], wall[1]});
    } catch (const Error& e) {
      throw StudyError("counterexample_gap failed at eps = " + detail::eps_label(eps) + ": " + e.what(), eps);
    }
  }
  return out;
}

}  // namespace knudsen
