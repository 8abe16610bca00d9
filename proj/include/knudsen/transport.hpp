#pragma once

// Kinetic solver for
//
//   eps^2 du/dt + eps w.grad(u) + (1 + lambda) u - ubar = f   in the unit disk,
//   u = g on the inflow boundary,   u(0) = h,
//
// by the Duhamel representation along straight characteristics. Each
// update traces a node back over at most `stride` fast-time steps (or to
// the boundary, or to t = 0), starts from the data or from a stored level,
// and integrates the attenuated source ubar + f with exponential-linear
// weights. The current-level ubar enters only at the node itself, so the
// implicit part is a scalar fixed point per space node.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knudsen/core.hpp"
#include "knudsen/errors.hpp"
#include "knudsen/milne.hpp"

namespace knudsen {

using BoundaryDatum = std::function<double(double t, double theta, double phi)>;
using InitialDatum = std::function<double(DiskPoint x, VelocityAngle w)>;
using VolumeSource = std::function<double(double t, DiskPoint x, VelocityAngle w)>;

struct TransportProblem {
  double eps = 0.1;
  BoundaryDatum g;
  InitialDatum h;
  VolumeSource f;  // empty means zero
  double T = 1.0;
  double lambda = 0.0;
};

/// Tolerance for the matching of h and g(0) on the inflow set.
inline constexpr double kCompatibilityTol = 1e-10;

/// Checks h(x0, w) = g(0, x0, w) on sampled inflow points; with `improved`
/// also checks that this common value is one constant.
inline void validate_compatibility(const TransportProblem& p, bool improved, int samples = 64) {
  if (!p.g || !p.h) throw ValidationError("transport problem needs both boundary and initial data");
  std::optional<double> constant;
  for (int m = 0; m < samples; ++m) {
    const double theta = -kPi + kTwoPi * m / samples;
    const DiskPoint x0 = DiskPoint::from_polar(1.0, theta);
    for (int j = 0; j < samples; ++j) {
      const double phi = (j + 0.5) * kPi / samples;  // sin(phi) > 0
      const VelocityAngle w = VelocityAngle::from_phi(phi, theta);
      const double gv = p.g(0.0, theta, phi);
      const double hv = p.h(x0, w);
      if (std::abs(gv - hv) > kCompatibilityTol) {
        throw ValidationError("compatibility condition violated: h(x0, w) != g(0, x0, w) at theta=" +
                              std::to_string(theta) + ", phi=" + std::to_string(phi));
      }
      if (improved) {
        if (!constant) constant = gv;
        if (std::abs(gv - *constant) > kCompatibilityTol) {
          throw ValidationError("improved compatibility condition violated: inflow data at t=0 are not constant");
        }
      }
    }
  }
}

struct TransportOptions {
  double dtau = 0.25;   // step in fast time tau = t / eps^2
  int stride = 32;      // longest backward path, in steps
  double tol = 1e-12;   // sup change of ubar in the per-step fixed point
  int max_iter = 100;
  int threads = default_thread_count();
  bool extrapolate_lambda = false;  // with lambda > 0: return 2 u(lambda/2) - u(lambda)
};

struct SolveReport {
  std::vector<int> iterations;  // per step, the most any node needed
  double max_residual = 0.0;    // last fixed-point change, worst over steps
  double max_contraction = 0.0; // worst observed ratio of successive changes
  double wall_seconds = 0.0;
  std::size_t steps = 0;
};

/// Grid controls for the kinetic solve.
struct TransportGridSpec {
  int n_phi = 32;
  int n_theta = 0;            // 0 means n_phi
  double deta_target = 0.25;  // finest radial spacing is eps * deta_target
  double dr_max = 0.05;
  double r_ratio = 1.25;
  double dt_max = 0.05;       // coarsest spacing of stored time levels
};

/// Stored times: 0, dt, 2dt, 4dt, ... doubling until dt_max, then uniform,
/// all on multiples of dt = eps^2 dtau and ending at the first multiple >= T.
inline std::vector<double> transport_time_nodes(double eps, double T, double dtau, double dt_max) {
  const double dt = eps * eps * dtau;
  const auto nsteps = static_cast<std::int64_t>(std::ceil(T / dt - 1e-9));
  const auto stride_max = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(dt_max / dt)));
  std::vector<double> t{0.0};
  std::int64_t k = 0;
  while (k < nsteps) {
    k = std::min(nsteps, k == 0 ? 1 : std::min(2 * k, k + stride_max));
    t.push_back(static_cast<double>(k) * dt);
  }
  return t;
}

inline SpaceTimeGrid make_transport_grid(double eps, double T, const TransportGridSpec& spec, double dtau = 0.25) {
  SpaceTimeGrid g;
  const double h_min = std::min(eps * spec.deta_target, spec.dr_max);
  const auto d = refined_offsets(1.0, h_min, spec.dr_max, spec.r_ratio);
  g.r.resize(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) g.r[i] = 1.0 - d[d.size() - 1 - i];
  g.r.front() = 0.0;
  g.n_theta = spec.n_theta > 0 ? spec.n_theta : spec.n_phi;
  g.t = transport_time_nodes(eps, T, dtau, spec.dt_max);
  return g;
}

namespace detail {

/// Bilinear stencil relative to theta index 0, rotated at use.
struct RotStencil {
  std::uint32_t i0;
  std::int32_t m0;
  std::int32_t m1;
  double a;
  double b;
};

/// Backward path of node (i, theta_0) in direction j, reused for every
/// theta node by rotation.
struct PathPlan {
  double tb = 0.0;       // exit time in tau
  double length = 0.0;   // min(tb, stride * dtau)
  int full = 0;          // full dtau segments inside `length`
  double partial = 0.0;  // remaining segment length
  bool hits_boundary = false;
  double exit_theta_offset = 0.0;  // exit angle minus theta_0
  double exit_phi = 0.0;
  std::vector<RotStencil> samples;  // k = 1..full, then the endpoint
};

}  // namespace detail

/// Time-stepping engine shared by the solver and the residual check.
class TransportEngine {
 public:
  TransportEngine(const TransportProblem& problem, const SpaceTimeGrid& grid, const AngularGrid& angles,
                  const TransportOptions& opt)
      : p_(problem), grid_(grid), angles_(angles), opt_(opt) {
    if (!(problem.eps > 0.0 && problem.eps < 1.0)) throw ConfigurationError("transport: eps must lie in (0, 1)");
    if (!(opt.dtau > 0.0) || opt.stride < 1) throw ConfigurationError("transport: need dtau > 0 and stride >= 1");
    if (!(opt.tol > 0.0)) throw ConfigurationError("transport: tol must be positive");
    if (problem.lambda < 0.0) throw ConfigurationError("transport: lambda must be nonnegative");
    grid_.validate();
    nphi_ = angles_.size();
    ntheta_ = grid_.n_theta;
    if (nphi_ % ntheta_ != 0) throw ConfigurationError("transport: n_theta must divide n_phi");
    q_ = nphi_ / ntheta_;
    eps_ = problem.eps;
    dt_ = eps_ * eps_ * opt.dtau;
    kappa_ = 1.0 + problem.lambda;
    full_w_ = exp_linear_weights(opt.dtau, kappa_);
    decay_.resize(static_cast<std::size_t>(opt.stride) + 2);
    for (std::size_t k = 0; k < decay_.size(); ++k) decay_[k] = std::exp(-kappa_ * opt.dtau * static_cast<double>(k));
    for (double t : grid_.t) {
      const double k = std::round(t / dt_);
      if (std::abs(k * dt_ - t) > 1e-9 * dt_ * std::max(1.0, k)) {
        throw ConfigurationError("transport: stored times must be multiples of eps^2 * dtau");
      }
      levels_.push_back(static_cast<std::int64_t>(k));
    }
    build_plans();
  }

  double dt() const noexcept { return dt_; }
  std::int64_t steps() const noexcept { return levels_.back(); }
  const std::vector<std::int64_t>& stored_levels() const noexcept { return levels_; }
  std::size_t n_space() const noexcept { return grid_.n_space(); }
  std::size_t n_phase() const noexcept { return grid_.n_space() * static_cast<std::size_t>(nphi_); }
  int nphi() const noexcept { return nphi_; }
  int ring_size() const noexcept { return opt_.stride + 2; }

  DiskPoint node_point(std::size_t i, int m) const { return DiskPoint::from_polar(grid_.r[i], grid_.theta(m)); }

  /// Affine update of one space node at step n: u_j = K_j + C_j * ubar_n.
  /// `ubar_at(level)` and `u_at(level)` return the stored scalar and phase
  /// arrays of earlier levels.
  template <typename UbarAt, typename UAt>
  void node_update(std::int64_t n, std::size_t i, int m, UbarAt&& ubar_at, UAt&& u_at, double* K, double* C) const {
    const double t_n = static_cast<double>(n) * dt_;
    const double tau_n = static_cast<double>(n) * opt_.dtau;
    const DiskPoint x = node_point(i, m);
    for (int j = 0; j < nphi_; ++j) {
      const int jr = (j + m * q_) % nphi_;
      const detail::PathPlan& plan = plans_[i * static_cast<std::size_t>(nphi_) + static_cast<std::size_t>(jr)];
      const VelocityAngle wa{angles_.node(j)};
      const Direction w = wa.direction();
      const bool truncated = tau_n < plan.length;
      const int full = truncated ? static_cast<int>(n) : plan.full;
      const double partial = truncated ? 0.0 : plan.partial;
      const double length = truncated ? tau_n : plan.length;

      auto source = [&](double sigma) {
        if (!p_.f) return 0.0;
        const DiskPoint y{x.x1 - eps_ * sigma * w.w1, x.x2 - eps_ * sigma * w.w2};
        return p_.f(t_n - eps_ * eps_ * sigma, y, wa);
      };
      auto ubar_sample = [&](const detail::RotStencil& s, std::int64_t level) {
        return interp(ubar_at(level), s, m, 1, 0);
      };

      double acc = 0.0;
      // sigma = 0 sample: the current level enters through C.
      const ExpLinearWeights first = full > 0 ? full_w_ : exp_linear_weights(partial, kappa_);
      C[j] = first.a;
      acc += first.a * source(0.0);
      for (int k = 1; k <= full; ++k) {
        double wk = decay_[static_cast<std::size_t>(k - 1)] * full_w_.b;
        if (k < full) {
          wk += decay_[static_cast<std::size_t>(k)] * full_w_.a;
        } else if (partial > 0.0) {
          wk += decay_[static_cast<std::size_t>(k)] * exp_linear_weights(partial, kappa_).a;
        }
        const double sigma = k * opt_.dtau;
        acc += wk * (ubar_sample(plan.samples[static_cast<std::size_t>(k - 1)], n - k) + source(sigma));
      }
      if (partial > 0.0) {
        const double wk = std::exp(-kappa_ * full * opt_.dtau) * exp_linear_weights(partial, kappa_).b;
        const detail::RotStencil& s = plan.samples.back();
        const double lev = static_cast<double>(n) - length / opt_.dtau;
        const auto l0 = std::min(static_cast<std::int64_t>(std::floor(lev)), n - 1);
        const double fr = lev - static_cast<double>(l0);
        double ub = (1.0 - fr) * ubar_sample(s, l0);
        if (l0 + 1 < n) {
          ub += fr * ubar_sample(s, l0 + 1);
        } else {
          // Level n is not known yet at the foot, which lies within one step
          // of the node: use the node's own ubar shifted by the foot-node
          // difference of level n - 1.
          const std::size_t node = i * static_cast<std::size_t>(ntheta_) + static_cast<std::size_t>(m);
          ub += fr * (ubar_sample(s, l0) - ubar_at(l0)[node]);
          C[j] += wk * fr;
        }
        acc += wk * (ub + source(length));
      }
      // Start value at the far end of the path.
      double start;
      if (truncated) {
        const DiskPoint y{x.x1 - eps_ * length * w.w1, x.x2 - eps_ * length * w.w2};
        start = p_.h(y, wa);
      } else if (plan.hits_boundary) {
        start = p_.g(t_n - eps_ * eps_ * plan.tb, wrap_angle(grid_.theta(m) + plan.exit_theta_offset), plan.exit_phi);
      } else {
        start = interp(u_at(n - opt_.stride), plan.samples.back(), m, nphi_, j);
      }
      K[j] = acc + std::exp(-kappa_ * length) * start;
    }
  }

  /// Value at an arbitrary phase point and time in (t_{n-1}, t_n], from the
  /// history arrays up to level n.
  template <typename UbarAt, typename UAt>
  double point_value(double t, DiskPoint x, VelocityAngle wa, std::int64_t n, UbarAt&& ubar_at, UAt&& u_at) const {
    const Direction w = wa.direction();
    const double tb = exit_time(x, w, eps_);
    const double tau = t / (eps_ * eps_);
    const double cap = opt_.stride * opt_.dtau;
    const double length = std::min({tb, tau, cap});
    const double level_t = t / dt_;  // fractional level of the evaluation time
    auto ubar_point = [&](double sigma) {
      const DiskPoint y{x.x1 - eps_ * sigma * w.w1, x.x2 - eps_ * sigma * w.w2};
      const PolarStencil s = polar_stencil(grid_, y.radius(), y.theta());
      const double lev = std::clamp(level_t - sigma / opt_.dtau, 0.0, static_cast<double>(n));
      const auto l0 = std::min(static_cast<std::int64_t>(std::floor(lev)), n);
      const double fr = lev - static_cast<double>(l0);
      double v = (1.0 - fr) * interpolate_polar(grid_, ubar_at(l0), s);
      if (fr > 0.0) v += fr * interpolate_polar(grid_, ubar_at(l0 + 1), s);
      if (p_.f) v += p_.f(t - eps_ * eps_ * sigma, y, wa);
      return v;
    };
    double acc = 0.0;
    double sigma0 = 0.0;
    double v0 = ubar_point(0.0);
    while (sigma0 < length) {
      const double d = std::min(opt_.dtau, length - sigma0);
      const double v1 = ubar_point(sigma0 + d);
      const ExpLinearWeights wt = exp_linear_weights(d, kappa_);
      acc += std::exp(-kappa_ * sigma0) * (wt.a * v0 + wt.b * v1);
      sigma0 += d;
      v0 = v1;
    }
    const DiskPoint y{x.x1 - eps_ * length * w.w1, x.x2 - eps_ * length * w.w2};
    double start;
    if (length == tb) {
      const double theta_b = y.theta();
      start = p_.g(t - eps_ * eps_ * tb, theta_b, wa.phi(theta_b));
    } else if (length == tau) {
      start = p_.h(y, wa);
    } else {
      // Stored phase level at time t - eps^2 * cap, interpolated in time,
      // space and angle.
      const double lev = level_t - static_cast<double>(opt_.stride);
      const auto l0 = static_cast<std::int64_t>(std::floor(lev));
      const double fr = lev - static_cast<double>(l0);
      start = (1.0 - fr) * phase_point(u_at(l0), y, wa.xi);
      if (fr > 0.0) start += fr * phase_point(u_at(l0 + 1), y, wa.xi);
    }
    return acc + std::exp(-kappa_ * length) * start;
  }

 private:
  /// Bilinear value of a rotated stencil. `stride`/`offset` select either a
  /// scalar array (1, 0) or one angle of a phase array (n_phi, j).
  double interp(std::span<const double> v, const detail::RotStencil& s, int m, int stride, int offset) const {
    const std::size_t nt = static_cast<std::size_t>(ntheta_);
    const std::size_t m0 = static_cast<std::size_t>((s.m0 + m) % ntheta_);
    const std::size_t m1 = static_cast<std::size_t>((s.m1 + m) % ntheta_);
    const std::size_t st = static_cast<std::size_t>(stride);
    const std::size_t off = static_cast<std::size_t>(offset);
    const std::size_t base0 = s.i0 * nt;
    const std::size_t base1 = base0 + nt;
    const double v0 = (1.0 - s.b) * v[(base0 + m0) * st + off] + s.b * v[(base0 + m1) * st + off];
    if (s.a == 0.0) return v0;
    const double v1 = (1.0 - s.b) * v[(base1 + m0) * st + off] + s.b * v[(base1 + m1) * st + off];
    return (1.0 - s.a) * v0 + s.a * v1;
  }

  double phase_point(std::span<const double> u, DiskPoint y, double xi) const {
    const PolarStencil s = polar_stencil(grid_, y.radius(), y.theta());
    auto [j0, c] = angles_.locate(xi);
    const int j1 = (j0 + 1) % nphi_;
    auto at = [&](std::size_t i, int mm, int j) {
      return u[(i * static_cast<std::size_t>(ntheta_) + static_cast<std::size_t>(mm)) * static_cast<std::size_t>(nphi_) +
               static_cast<std::size_t>(j)];
    };
    auto ang = [&](std::size_t i, int mm) { return (1.0 - c) * at(i, mm, j0) + c * at(i, mm, j1); };
    const double v0 = (1.0 - s.b) * ang(s.i0, s.m0) + s.b * ang(s.i0, s.m1);
    const double v1 = (1.0 - s.b) * ang(s.i0 + 1, s.m0) + s.b * ang(s.i0 + 1, s.m1);
    return (1.0 - s.a) * v0 + s.a * v1;
  }

  detail::RotStencil rot_stencil(DiskPoint y) const {
    const PolarStencil s = polar_stencil(grid_, y.radius(), y.theta());
    return {static_cast<std::uint32_t>(s.i0), s.m0, s.m1, s.a, s.b};
  }

  void build_plans() {
    const std::size_t nr = grid_.r.size();
    plans_.resize(nr * static_cast<std::size_t>(nphi_));
    const double cap = opt_.stride * opt_.dtau;
    for (std::size_t i = 0; i < nr; ++i) {
      const DiskPoint x = node_point(i, 0);
      for (int j = 0; j < nphi_; ++j) {
        detail::PathPlan& plan = plans_[i * static_cast<std::size_t>(nphi_) + static_cast<std::size_t>(j)];
        const VelocityAngle wa{angles_.node(j)};
        const Direction w = wa.direction();
        plan.tb = exit_time(x, w, eps_);
        plan.hits_boundary = plan.tb <= cap;
        plan.length = std::min(plan.tb, cap);
        plan.full = static_cast<int>(std::floor(plan.length / opt_.dtau + 1e-12));
        plan.full = std::min(plan.full, opt_.stride);
        plan.partial = plan.length - plan.full * opt_.dtau;
        if (plan.partial < 1e-12 * opt_.dtau) plan.partial = 0.0;
        for (int k = 1; k <= plan.full; ++k) {
          const double sigma = k * opt_.dtau;
          plan.samples.push_back(rot_stencil({x.x1 - eps_ * sigma * w.w1, x.x2 - eps_ * sigma * w.w2}));
        }
        if (plan.partial > 0.0 || plan.samples.empty()) {
          plan.samples.push_back(
              rot_stencil({x.x1 - eps_ * plan.length * w.w1, x.x2 - eps_ * plan.length * w.w2}));
        }
        if (plan.hits_boundary) {
          const DiskPoint y{x.x1 - eps_ * plan.tb * w.w1, x.x2 - eps_ * plan.tb * w.w2};
          plan.exit_theta_offset = wrap_angle(y.theta() - grid_.theta(0));
          plan.exit_phi = wa.phi(y.theta());
        }
      }
    }
  }

  TransportProblem p_;
  SpaceTimeGrid grid_;
  AngularGrid angles_;
  TransportOptions opt_;
  int nphi_ = 0, ntheta_ = 0, q_ = 1;
  double eps_ = 0.1, dt_ = 0.0, kappa_ = 1.0;
  ExpLinearWeights full_w_{};
  std::vector<double> decay_;
  std::vector<std::int64_t> levels_;
  std::vector<detail::PathPlan> plans_;
};

namespace detail {

inline KineticField solve_transport_once(const TransportProblem& problem, const SpaceTimeGrid& grid,
                                         const AngularGrid& angles, const TransportOptions& opt,
                                         const std::vector<Probe>& probes, SolveReport& report) {
  TransportEngine eng(problem, grid, angles, opt);
  KineticField field(grid, angles);
  field.probes() = probes;
  const int nphi = angles.size();
  const std::size_t nspace = eng.n_space();
  const std::size_t nphase = eng.n_phase();
  const auto ring = static_cast<std::size_t>(eng.ring_size());
  std::vector<std::vector<double>> u_ring(ring, std::vector<double>(nphase));
  std::vector<std::vector<double>> ub_ring(ring, std::vector<double>(nspace));
  auto slot = [&](std::int64_t level) { return static_cast<std::size_t>(level) % ring; };
  auto ubar_at = [&](std::int64_t level) -> std::span<const double> { return ub_ring[slot(level)]; };
  auto u_at = [&](std::int64_t level) -> std::span<const double> { return u_ring[slot(level)]; };

  // Level 0 from the initial datum.
  for (std::size_t p = 0; p < nspace; ++p) {
    const std::size_t i = p / static_cast<std::size_t>(grid.n_theta);
    const int m = static_cast<int>(p % static_cast<std::size_t>(grid.n_theta));
    const DiskPoint x = eng.node_point(i, m);
    double* u = u_ring[0].data() + p * static_cast<std::size_t>(nphi);
    for (int j = 0; j < nphi; ++j) u[j] = problem.h(x, VelocityAngle{angles.node(j)});
    ub_ring[0][p] = velocity_average(angles, {u, static_cast<std::size_t>(nphi)});
  }
  std::copy(u_ring[0].begin(), u_ring[0].end(), field.level(0).begin());

  // Probes sorted by time so each is evaluated once its level is available.
  std::vector<std::size_t> order(probes.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return probes[a].t < probes[b].t; });
  std::size_t next_probe = 0;
  auto eval_probes_up_to = [&](std::int64_t n) {
    const double t_n = static_cast<double>(n) * eng.dt();
    while (next_probe < order.size() && field.probes()[order[next_probe]].t <= t_n * (1.0 + 1e-12)) {
      Probe& pr = field.probes()[order[next_probe]];
      if (pr.t <= 0.0) {
        pr.value = problem.h(pr.x, pr.w);
      } else {
        pr.value = eng.point_value(pr.t, pr.x, pr.w, n, ubar_at, u_at);
      }
      ++next_probe;
    }
  };
  for (const Probe& pr : probes) {
    if (!(pr.x.inside())) throw DomainError("probe outside the unit disk");
    if (pr.t < 0.0 || pr.t > grid.t.back() * (1.0 + 1e-12)) throw DomainError("probe time outside the grid");
  }
  eval_probes_up_to(0);

  const auto start = std::chrono::steady_clock::now();
  const std::int64_t nsteps = eng.steps();
  std::size_t stored = 1;
  report.iterations.assign(static_cast<std::size_t>(nsteps), 0);
  std::vector<int> node_iters(nspace);
  std::vector<double> node_change(nspace), node_ratio(nspace);
  for (std::int64_t n = 1; n <= nsteps; ++n) {
    std::vector<double>& u_new = u_ring[slot(n)];
    std::vector<double>& ub_new = ub_ring[slot(n)];
    const std::vector<double>& ub_prev = ub_ring[slot(n - 1)];
    parallel_for(nspace, opt.threads, [&](std::size_t p) {
      const std::size_t i = p / static_cast<std::size_t>(grid.n_theta);
      const int m = static_cast<int>(p % static_cast<std::size_t>(grid.n_theta));
      double* K = u_new.data() + p * static_cast<std::size_t>(nphi);
      std::vector<double> C(static_cast<std::size_t>(nphi));
      eng.node_update(n, i, m, ubar_at, u_at, K, C.data());
      double Kbar = 0.0, Cbar = 0.0;
      for (int j = 0; j < nphi; ++j) {
        Kbar += K[j];
        Cbar += C[static_cast<std::size_t>(j)];
      }
      Kbar /= nphi;
      Cbar /= nphi;
      // Fixed point ubar = Kbar + Cbar * ubar, started from the previous level.
      double ub = ub_prev[p];
      double change = 0.0, prev_change = 0.0, ratio = 0.0;
      int it = 0;
      while (true) {
        const double next = Kbar + Cbar * ub;
        change = std::abs(next - ub);
        if (it > 0 && prev_change > 0.0) ratio = std::max(ratio, change / prev_change);
        prev_change = change;
        ub = next;
        ++it;
        if (change <= opt.tol || it >= opt.max_iter) break;
      }
      for (int j = 0; j < nphi; ++j) K[j] += C[static_cast<std::size_t>(j)] * ub;
      ub_new[p] = velocity_average(angles, {K, static_cast<std::size_t>(nphi)});
      node_iters[p] = it;
      node_change[p] = change;
      node_ratio[p] = ratio;
    });
    int worst_it = 0;
    for (std::size_t p = 0; p < nspace; ++p) {
      worst_it = std::max(worst_it, node_iters[p]);
      report.max_residual = std::max(report.max_residual, node_change[p]);
      report.max_contraction = std::max(report.max_contraction, node_ratio[p]);
      if (node_change[p] > opt.tol) {
        throw IterationError("transport fixed point did not converge at step " + std::to_string(n), node_change[p],
                             node_iters[p]);
      }
      if (!std::isfinite(ub_new[p])) throw NumericError("transport produced non-finite values");
    }
    report.iterations[static_cast<std::size_t>(n - 1)] = worst_it;
    if (stored < eng.stored_levels().size() && eng.stored_levels()[stored] == n) {
      std::copy(u_new.begin(), u_new.end(), field.level(stored).begin());
      ++stored;
    }
    eval_probes_up_to(n);
  }
  report.steps = static_cast<std::size_t>(nsteps);
  report.wall_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return field;
}

}  // namespace detail

/// Solves the kinetic problem on the given grids. Probes are extra phase
/// points evaluated with the same characteristic formula; their values are
/// returned in the field.
inline std::pair<KineticField, SolveReport> solve_transport(const TransportProblem& problem,
                                                            const SpaceTimeGrid& grid, const AngularGrid& angles,
                                                            const TransportOptions& opt = {},
                                                            const std::vector<Probe>& probes = {},
                                                            bool require_improved_compatibility = false) {
  validate_compatibility(problem, require_improved_compatibility);
  if (grid.t.back() > problem.T + problem.eps * problem.eps * opt.dtau) {
    throw ConfigurationError("transport: grid extends past the horizon T");
  }
  SolveReport report;
  if (!(opt.extrapolate_lambda && problem.lambda > 0.0)) {
    KineticField field = detail::solve_transport_once(problem, grid, angles, opt, probes, report);
    return {std::move(field), std::move(report)};
  }
  TransportProblem half = problem;
  half.lambda = 0.5 * problem.lambda;
  SolveReport r_half;
  KineticField a = detail::solve_transport_once(problem, grid, angles, opt, probes, report);
  KineticField b = detail::solve_transport_once(half, grid, angles, opt, probes, r_half);
  auto va = a.values();
  auto vb = b.values();
  for (std::size_t k = 0; k < va.size(); ++k) vb[k] = 2.0 * vb[k] - va[k];
  for (std::size_t k = 0; k < b.probes().size(); ++k) {
    b.probes()[k].value = 2.0 * b.probes()[k].value - a.probes()[k].value;
  }
  report.wall_seconds += r_half.wall_seconds;
  report.max_residual = std::max(report.max_residual, r_half.max_residual);
  report.max_contraction = std::max(report.max_contraction, r_half.max_contraction);
  return {std::move(b), std::move(report)};
}

/// Defect of the solver's own update formula: for every stored level n >= 1
/// and node, |u_n - (K + C ubar_n)| with K, C built from the stored history.
/// The field must hold every time step (dense output).
inline double residual(const KineticField& field, const TransportProblem& problem, const TransportOptions& opt = {}) {
  TransportEngine eng(problem, field.grid(), field.angles(), opt);
  const auto& levels = eng.stored_levels();
  for (std::size_t k = 0; k < levels.size(); ++k) {
    if (levels[k] != static_cast<std::int64_t>(k)) {
      throw ConfigurationError("residual needs a field stored at every time step");
    }
  }
  const int nphi = field.angles().size();
  const std::size_t nspace = eng.n_space();
  std::vector<std::vector<double>> ubar(levels.size(), std::vector<double>(nspace));
  for (std::size_t k = 0; k < levels.size(); ++k) {
    for (std::size_t p = 0; p < nspace; ++p) {
      ubar[k][p] = velocity_average(field.angles(), field.level(k).subspan(p * static_cast<std::size_t>(nphi),
                                                                           static_cast<std::size_t>(nphi)));
    }
  }
  auto ubar_at = [&](std::int64_t l) -> std::span<const double> { return ubar[static_cast<std::size_t>(l)]; };
  auto u_at = [&](std::int64_t l) -> std::span<const double> { return field.level(static_cast<std::size_t>(l)); };
  double worst = 0.0;
  std::vector<double> K(static_cast<std::size_t>(nphi)), C(static_cast<std::size_t>(nphi));
  for (std::size_t k = 1; k < levels.size(); ++k) {
    for (std::size_t p = 0; p < nspace; ++p) {
      const std::size_t i = p / static_cast<std::size_t>(field.grid().n_theta);
      const int m = static_cast<int>(p % static_cast<std::size_t>(field.grid().n_theta));
      eng.node_update(static_cast<std::int64_t>(k), i, m, ubar_at, u_at, K.data(), C.data());
      const auto u = field.level(k).subspan(p * static_cast<std::size_t>(nphi), static_cast<std::size_t>(nphi));
      for (int j = 0; j < nphi; ++j) {
        const double d = u[static_cast<std::size_t>(j)] - (K[static_cast<std::size_t>(j)] +
                                                         C[static_cast<std::size_t>(j)] * ubar[k][p]);
        worst = std::max(worst, std::abs(d));
      }
    }
  }
  return worst;
}

}  // namespace knudsen
