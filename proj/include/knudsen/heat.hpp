#pragma once

// Heat equation du/dt = D * Laplace(u) on the unit disk with Dirichlet data,
// discretized by implicit Euler in time and a finite-volume 5-point polar
// stencil in space. The centre is one control volume coupled to the first
// ring. Every step matrix is an M-matrix, so the discrete maximum principle
// holds.

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knudsen/core.hpp"
#include "knudsen/errors.hpp"

namespace knudsen {

using DiskFunction = std::function<double(DiskPoint x)>;
using BoundaryFunction = std::function<double(double t, double theta)>;

/// Whether data depend on the polar angle.
enum class HeatSymmetry { automatic, radial, general };

struct HeatProblem {
  DiskFunction initial;
  BoundaryFunction dirichlet;
  double T = 1.0;
  double diffusivity = 1.0;
  HeatSymmetry symmetry = HeatSymmetry::automatic;
  bool check_corner = true;  // validate initial = dirichlet(0) on the boundary
};

/// Tolerance for initial(x0) = dirichlet(0, theta(x0)).
inline constexpr double kHeatCornerTol = 1e-8;

/// Scalar samples u[t_k, r_i, theta_m] on a SpaceTimeGrid.
class ScalarFieldTime {
 public:
  explicit ScalarFieldTime(SpaceTimeGrid grid) : grid_(std::move(grid)) {
    values_.assign(grid_.t.size() * grid_.n_space(), 0.0);
  }

  const SpaceTimeGrid& grid() const noexcept { return grid_; }

  double& at(std::size_t k, std::size_t i, int m) { return values_[(k * grid_.r.size() + i) * nt() + std::size_t(m)]; }
  double at(std::size_t k, std::size_t i, int m) const {
    return values_[(k * grid_.r.size() + i) * nt() + std::size_t(m)];
  }
  std::span<double> level(std::size_t k) { return std::span<double>(values_).subspan(k * grid_.n_space(), grid_.n_space()); }
  std::span<const double> level(std::size_t k) const {
    return std::span<const double>(values_).subspan(k * grid_.n_space(), grid_.n_space());
  }
  std::span<const double> values() const noexcept { return values_; }

  /// Linear in time, bilinear in (r, theta).
  double value(double t, DiskPoint x) const {
    const auto [k0, c] = time_bracket(t);
    const PolarStencil s = polar_stencil(grid_, x.radius(), x.theta());
    double v = (1.0 - c) * interpolate_polar(grid_, level(k0), s);
    if (c > 0.0) v += c * interpolate_polar(grid_, level(k0 + 1), s);
    return v;
  }

  /// Level index and fraction with t = (1 - c) t_k + c t_{k+1}.
  std::pair<std::size_t, double> time_bracket(double t) const {
    const auto& tt = grid_.t;
    const double tol = 1e-12 * std::max(1.0, tt.back());
    if (t < -tol || t > tt.back() + tol) throw DomainError("time outside the field's grid");
    t = std::clamp(t, 0.0, tt.back());
    if (tt.size() == 1) return {0, 0.0};
    const std::size_t k = locate_cell(tt, t);
    const double c = (t - tt[k]) / (tt[k + 1] - tt[k]);
    if (c <= 0.0) return {k, 0.0};
    if (c >= 1.0) return {k + 1, 0.0};
    return {k, c};
  }

 private:
  std::size_t nt() const { return static_cast<std::size_t>(grid_.n_theta); }
  SpaceTimeGrid grid_;
  std::vector<double> values_;
};

/// Throws ValidationError when the data disagree at the boundary at t = 0.
inline void validate_heat_compatibility(const HeatProblem& p, int samples = 64) {
  if (!p.initial || !p.dirichlet) throw ValidationError("heat problem needs initial and boundary data");
  for (int m = 0; m < samples; ++m) {
    const double theta = -kPi + kTwoPi * m / samples;
    const double a = p.initial(DiskPoint::from_polar(1.0, theta));
    const double b = p.dirichlet(0.0, theta);
    if (!(std::abs(a - b) <= kHeatCornerTol)) {
      throw ValidationError("heat corner compatibility violated at theta=" + std::to_string(theta));
    }
  }
}

/// True when both data are independent of theta on sampled points.
inline bool heat_data_radial(const HeatProblem& p, const SpaceTimeGrid& grid) {
  constexpr int kAngles = 13;
  auto flat = [](const std::vector<double>& v) {
    const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *hi - *lo <= 1e-14 * std::max(1.0, std::max(std::abs(*lo), std::abs(*hi)));
  };
  std::vector<double> v(kAngles);
  for (double r : {0.3, 0.7, 0.95, 1.0}) {
    for (int m = 0; m < kAngles; ++m) v[std::size_t(m)] = p.initial(DiskPoint::from_polar(r, -kPi + kTwoPi * (m + 0.37) / kAngles));
    if (!flat(v)) return false;
  }
  const std::size_t nk = grid.t.size();
  for (std::size_t k : {std::size_t{0}, nk / 3, nk / 2, nk - 1}) {
    for (int m = 0; m < kAngles; ++m) v[std::size_t(m)] = p.dirichlet(grid.t[k], -kPi + kTwoPi * (m + 0.37) / kAngles);
    if (!flat(v)) return false;
  }
  return true;
}

namespace detail {

/// Finite-volume geometry per unit angle for the radial nodes.
struct RadialVolumes {
  std::vector<double> volume;  // control-volume area per radian
  std::vector<double> outer;   // conductance to node i + 1 per radian
  std::vector<double> arc;     // radial width over r, for angular fluxes
};

inline RadialVolumes radial_volumes(const std::vector<double>& r) {
  const std::size_t n = r.size();
  RadialVolumes v;
  v.volume.assign(n, 0.0);
  v.outer.assign(n, 0.0);
  v.arc.assign(n, 0.0);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double rh = 0.5 * (r[i] + r[i + 1]);
    v.outer[i] = rh / (r[i + 1] - r[i]);
  }
  v.volume[0] = 0.5 * std::pow(0.5 * r[1], 2);
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double lo = 0.5 * (r[i - 1] + r[i]);
    const double hi = 0.5 * (r[i] + r[i + 1]);
    v.volume[i] = 0.5 * (hi * hi - lo * lo);
    v.arc[i] = (hi - lo) / r[i];
  }
  return v;
}

using SparseMatrix = Eigen::SparseMatrix<double>;
using SparseSolver = Eigen::SparseLU<SparseMatrix>;

/// Implicit Euler stepper; factorizations are cached per step length.
class HeatStepper {
 public:
  HeatStepper(const SpaceTimeGrid& grid, double diffusivity, bool radial)
      : grid_(grid), D_(diffusivity), radial_(radial), fv_(radial_volumes(grid.r)) {
    nr_ = grid.r.size();
    nt_ = radial ? 1 : grid.n_theta;
    n_unknown_ = radial ? nr_ - 1 : 1 + (nr_ - 2) * std::size_t(nt_);
  }

  /// Advances u (laid out [i * nt + m], nt = 1 for radial) by dt with
  /// boundary values `bc` on the outer ring.
  void step(std::vector<double>& u, std::span<const double> bc, double dt) {
    SparseSolver& lu = solver(dt);
    Eigen::VectorXd rhs(static_cast<Eigen::Index>(n_unknown_));
    const double dth = kTwoPi / nt_;
    const std::size_t nt = std::size_t(nt_);
    // Centre.
    rhs[0] = volume_center() / dt * u[0];
    for (std::size_t i = 1; i + 1 < nr_; ++i) {
      for (std::size_t m = 0; m < nt; ++m) {
        double b = fv_.volume[i] * (radial_ ? 1.0 : dth) / dt * u[i * nt + m];
        if (i + 2 == nr_) b += D_ * fv_.outer[i] * (radial_ ? 1.0 : dth) * bc[m];
        rhs[Eigen::Index(unknown(i, m))] = b;
      }
    }
    Eigen::VectorXd x = lu.solve(rhs);
    if (lu.info() != Eigen::Success || !x.allFinite()) throw NumericError("heat step: linear solve failed");
    for (std::size_t m = 0; m < nt; ++m) u[m] = x[0];
    for (std::size_t i = 1; i + 1 < nr_; ++i)
      for (std::size_t m = 0; m < nt; ++m) u[i * nt + m] = x[Eigen::Index(unknown(i, m))];
    for (std::size_t m = 0; m < nt; ++m) u[(nr_ - 1) * nt + m] = bc[m];
  }

 private:
  std::size_t unknown(std::size_t i, std::size_t m) const { return radial_ ? i : 1 + (i - 1) * std::size_t(nt_) + m; }

  // Centre volume in the units of the ring rows: per radian when radial,
  // the whole centre disk otherwise.
  double volume_center() const { return fv_.volume[0] * (radial_ ? 1.0 : kTwoPi); }

  SparseSolver& solver(double dt) {
    auto it = cache_.find(dt);
    if (it != cache_.end()) return *it->second;
    const double dth = kTwoPi / nt_;
    const std::size_t nt = std::size_t(nt_);
    const double ang = radial_ ? 1.0 : dth;
    std::vector<Eigen::Triplet<double>> trip;
    auto add = [&](std::size_t a, std::size_t b, double v) {
      trip.emplace_back(Eigen::Index(a), Eigen::Index(b), v);
    };
    // Centre row: flux to each first-ring node.
    {
      const double c = D_ * fv_.outer[0] * (radial_ ? 1.0 : dth);
      double diag = volume_center() / dt;
      for (std::size_t m = 0; m < nt; ++m) {
        diag += c;
        if (nr_ > 2) add(0, unknown(1, m), -c);
      }
      add(0, 0, diag);
    }
    for (std::size_t i = 1; i + 1 < nr_; ++i) {
      for (std::size_t m = 0; m < nt; ++m) {
        const std::size_t row = unknown(i, m);
        const double cin = D_ * fv_.outer[i - 1] * ang;
        const double cout = D_ * fv_.outer[i] * ang;
        double diag = fv_.volume[i] * ang / dt + cin + cout;
        add(row, i == 1 ? 0 : unknown(i - 1, m), -cin);
        if (i + 2 < nr_) add(row, unknown(i + 1, m), -cout);
        if (!radial_) {
          const double ca = D_ * fv_.arc[i] / dth;
          diag += 2.0 * ca;
          add(row, unknown(i, (m + 1) % nt), -ca);
          add(row, unknown(i, (m + nt - 1) % nt), -ca);
        }
        add(row, row, diag);
      }
    }
    const auto n = static_cast<Eigen::Index>(n_unknown_);
    SparseMatrix A(n, n);
    A.setFromTriplets(trip.begin(), trip.end());
    auto lu = std::make_unique<SparseSolver>();
    lu->compute(A);
    if (lu->info() != Eigen::Success) throw NumericError("heat step: factorization failed");
    return *cache_.emplace(dt, std::move(lu)).first->second;
  }

  const SpaceTimeGrid& grid_;
  double D_;
  bool radial_;
  RadialVolumes fv_;
  std::size_t nr_ = 0;
  int nt_ = 1;
  std::size_t n_unknown_ = 0;
  std::map<double, std::unique_ptr<SparseSolver>> cache_;
};

}  // namespace detail

/// Solves the heat problem on the grid's radial nodes, theta nodes and time
/// levels (each level is one implicit Euler step).
inline ScalarFieldTime solve_heat_disk(const HeatProblem& problem, const SpaceTimeGrid& grid) {
  grid.validate();
  if (!(problem.diffusivity > 0.0)) throw ConfigurationError("heat: diffusivity must be positive");
  if (problem.check_corner) {
    validate_heat_compatibility(problem);
  } else if (!problem.initial || !problem.dirichlet) {
    throw ValidationError("heat problem needs initial and boundary data");
  }
  const bool radial = problem.symmetry == HeatSymmetry::radial ||
                      (problem.symmetry == HeatSymmetry::automatic && heat_data_radial(problem, grid));
  ScalarFieldTime out(grid);
  const std::size_t nr = grid.r.size();
  const std::size_t nt = radial ? 1 : std::size_t(grid.n_theta);
  std::vector<double> u(nr * nt), bc(nt);
  for (std::size_t i = 0; i < nr; ++i)
    for (std::size_t m = 0; m < nt; ++m) u[i * nt + m] = problem.initial(DiskPoint::from_polar(grid.r[i], grid.theta(int(m))));
  for (std::size_t m = 0; m < nt; ++m) u[m] = problem.initial({0.0, 0.0});
  auto store = [&](std::size_t k) {
    for (std::size_t i = 0; i < nr; ++i)
      for (int m = 0; m < grid.n_theta; ++m) out.at(k, i, m) = u[i * nt + (radial ? 0 : std::size_t(m))];
  };
  store(0);
  detail::HeatStepper stepper(grid, problem.diffusivity, radial);
  for (std::size_t k = 1; k < grid.t.size(); ++k) {
    for (std::size_t m = 0; m < nt; ++m) bc[m] = problem.dirichlet(grid.t[k], grid.theta(int(m)));
    stepper.step(u, bc, grid.t[k] - grid.t[k - 1]);
    store(k);
  }
  return out;
}

/// Gradient of the field at the boundary point (cos theta, sin theta).
struct BoundaryGradient {
  double dr = 0.0;      // radial derivative
  double dtheta = 0.0;  // angular derivative over r (r = 1)

  /// Cartesian components (d/dx1, d/dx2).
  Direction cartesian(double theta) const {
    return {dr * std::cos(theta) - dtheta * std::sin(theta), dr * std::sin(theta) + dtheta * std::cos(theta)};
  }
};

/// One-sided three-point radial difference and centred angular difference
/// at r = 1, linear in time and theta between samples.
inline BoundaryGradient gradient_at_boundary(const ScalarFieldTime& field, double t, double theta) {
  const SpaceTimeGrid& g = field.grid();
  if (!std::isfinite(theta)) throw DomainError("gradient_at_boundary: theta must be finite");
  const auto [k0, c] = field.time_bracket(t);
  const std::size_t n = g.r.size();
  const double h1 = g.r[n - 1] - g.r[n - 2];
  const double h2 = g.r[n - 1] - g.r[n - 3];
  // d/dr at r_{n-1} from nodes n-1, n-2, n-3 (exact for quadratics).
  const double a0 = (h1 + h2) / (h1 * h2);
  const double a1 = -h2 / (h1 * (h2 - h1));
  const double a2 = h1 / (h2 * (h2 - h1));
  const int nt = g.n_theta;
  const double dth = g.dtheta();
  auto node_grad = [&](std::size_t k, int m) {
    BoundaryGradient b;
    b.dr = a0 * field.at(k, n - 1, m) + a1 * field.at(k, n - 2, m) + a2 * field.at(k, n - 3, m);
    b.dtheta = (field.at(k, n - 1, (m + 1) % nt) - field.at(k, n - 1, (m + nt - 1) % nt)) / (2.0 * dth);
    return b;
  };
  const double pos = (wrap_angle(theta) + kPi) / dth;
  const double fl = std::floor(pos);
  const double b = pos - fl;
  const int m0 = ((int(fl) % nt) + nt) % nt;
  const int m1 = (m0 + 1) % nt;
  auto at_time = [&](std::size_t k) {
    const BoundaryGradient p = node_grad(k, m0), q = node_grad(k, m1);
    return BoundaryGradient{(1.0 - b) * p.dr + b * q.dr, (1.0 - b) * p.dtheta + b * q.dtheta};
  };
  BoundaryGradient out = at_time(k0);
  if (c > 0.0) {
    const BoundaryGradient o2 = at_time(k0 + 1);
    out.dr = (1.0 - c) * out.dr + c * o2.dr;
    out.dtheta = (1.0 - c) * out.dtheta + c * o2.dtheta;
  }
  return out;
}

}  // namespace knudsen
