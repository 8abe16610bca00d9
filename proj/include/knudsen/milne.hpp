#pragma once

// Half-space layer problem in (eta, phi):
//
//   sin(phi) df/deta + F(eps; eta) cos(phi) df/dphi + f - fbar = S,
//   f(0, phi) = H(phi) for sin(phi) > 0,   f -> f_inf as eta -> infinity,
//
// with F = -eps psi(eps eta) / (1 - eps eta) for the geometric correction and
// F = 0 for the classical layer. The solver traces characteristics in arc
// length, assembles the linear map fbar -> fbar that one sweep induces, and
// solves the resulting fixed point.

#include <Eigen/Dense>
#include <algorithm>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knudsen/core.hpp"
#include "knudsen/errors.hpp"

namespace knudsen {

enum class ForceKind { geometric, none };

inline const char* to_string(ForceKind k) { return k == ForceKind::geometric ? "geometric" : "none"; }

/// C1 smoothstep cutoff: 1 on [0, a], 0 on [b, inf), monotone in between.
inline double smooth_cutoff(double mu, double a, double b) {
  if (mu <= a) return 1.0;
  if (mu >= b) return 0.0;
  const double s = (mu - a) / (b - a);
  return 1.0 - s * s * (3.0 - 2.0 * s);
}

/// Cutoff for the force: 1 on [0, 1/2], 0 on [3/4, inf).
inline double cutoff_psi(double mu) { return smooth_cutoff(mu, 0.5, 0.75); }
/// Cutoff applied to boundary layers: 1 on [0, 1/4], 0 on [3/8, inf).
inline double cutoff_psi0(double mu) { return smooth_cutoff(mu, 0.25, 0.375); }

/// Force F(eps; eta) along the normal direction, or zero.
///
/// A custom callable may replace the closed form; the sweep code never
/// branches on the kind, so a zero callable and ForceKind::none take the
/// same path.
class ForceField {
 public:
  ForceField(double eps, ForceKind kind) : eps_(eps), kind_(kind) {}
  ForceField(double eps, std::function<double(double)> custom)
      : eps_(eps), kind_(ForceKind::geometric), custom_(std::move(custom)) {}

  double eps() const noexcept { return eps_; }
  ForceKind kind() const noexcept { return kind_; }

  double operator()(double eta) const {
    if (custom_) return custom_(eta);
    if (kind_ == ForceKind::none) return 0.0;
    const double mu = eps_ * eta;
    if (mu >= 0.75) return 0.0;
    return -eps_ * cutoff_psi(mu) / (1.0 - mu);
  }

 private:
  double eps_;
  ForceKind kind_;
  std::function<double(double)> custom_;
};

struct ForceValue {
  double F = 0.0;
  /// exp(int_0^eta F), the factor that makes cos(phi) * expV conserved.
  double expV = 1.0;
};

/// Force and potential factor for the geometric correction.
inline ForceValue force_profile(double eps, double eta) {
  if (!(eps > 0.0 && eps < 1.0)) throw DomainError("force_profile: eps must lie in (0, 1)");
  if (eta < 0.0) throw DomainError("force_profile: eta must be nonnegative");
  const ForceField force(eps, ForceKind::geometric);
  ForceValue out;
  out.F = force(eta);
  const double mu = eps * eta;
  if (mu <= 0.5) {
    out.expV = 1.0 - mu;
    return out;
  }
  // Across the transition band psi/(1 - mu) is smooth, so Gauss-Kronrod
  // converges to round-off quickly.
  auto integrand = [](double m) { return cutoff_psi(m) / (1.0 - m); };
  const double upper = std::min(mu, 0.75);
  const double band = boost::math::quadrature::gauss_kronrod<double, 21>::integrate(integrand, 0.5, upper, 15, 1e-14);
  out.expV = 0.5 * std::exp(-band);
  return out;
}

/// Sampled characteristic path.
struct CharacteristicPath {
  std::vector<double> s;
  std::vector<double> eta;
  std::vector<double> phi;
  bool exited = false;  // reached eta = 0 before the requested arc length
};

namespace detail {

struct PhaseState {
  double eta;
  double phi;
};

/// One RK4 step of d(eta)/ds = dir sin(phi), d(phi)/ds = dir F(eta) cos(phi).
inline PhaseState rk4_step(const ForceField& force, PhaseState y, double h, double dir) {
  auto rhs = [&](const PhaseState& p) {
    return PhaseState{dir * std::sin(p.phi), dir * force(p.eta) * std::cos(p.phi)};
  };
  const PhaseState k1 = rhs(y);
  const PhaseState k2 = rhs({y.eta + 0.5 * h * k1.eta, y.phi + 0.5 * h * k1.phi});
  const PhaseState k3 = rhs({y.eta + 0.5 * h * k2.eta, y.phi + 0.5 * h * k2.phi});
  const PhaseState k4 = rhs({y.eta + h * k3.eta, y.phi + h * k3.phi});
  return {y.eta + h / 6.0 * (k1.eta + 2.0 * k2.eta + 2.0 * k3.eta + k4.eta),
          y.phi + h / 6.0 * (k1.phi + 2.0 * k2.phi + 2.0 * k3.phi + k4.phi)};
}

/// Shortens a step that overshoots the level eta = target so that it ends on
/// the level. Secant iteration on the step size, each trial a full RK4 step.
inline std::pair<double, PhaseState> land_on_level(const ForceField& force, PhaseState y, double h, double dir,
                                                   double target) {
  double h_lo = 0.0, e_lo = y.eta - target;
  double h_hi = h;
  PhaseState hi = rk4_step(force, y, h, dir);
  double e_hi = hi.eta - target;
  PhaseState best = hi;
  double h_best = h;
  for (int it = 0; it < 60; ++it) {
    const double denom = e_lo - e_hi;
    double h_try = denom != 0.0 ? h_lo + (h_hi - h_lo) * e_lo / denom : 0.5 * (h_lo + h_hi);
    if (!(h_try > std::min(h_lo, h_hi) && h_try < std::max(h_lo, h_hi))) h_try = 0.5 * (h_lo + h_hi);
    const PhaseState p = rk4_step(force, y, h_try, dir);
    const double e = p.eta - target;
    best = p;
    h_best = h_try;
    if (std::abs(e) <= 1e-15 * (1.0 + std::abs(target))) break;
    // Keep a bracket: e_lo has the sign of the start, e_hi the opposite one.
    if ((e > 0.0) == (e_lo > 0.0)) {
      h_lo = h_try;
      e_lo = e;
    } else {
      h_hi = h_try;
      e_hi = e;
    }
    if (std::abs(h_hi - h_lo) <= 1e-16 * h) break;
  }
  best.eta = target;
  return {h_best, best};
}

}  // namespace detail

/// Integrates a characteristic of the layer operator with RK4 in arc length.
///
/// A negative `arc` traces backward. The path stops early, flagged `exited`,
/// if it reaches eta = 0; the last sample then lies exactly on eta = 0.
inline CharacteristicPath trace_characteristic(double eta0, double phi0, double eps, ForceKind kind, double arc,
                                               double ds = 0.01) {
  if (eta0 < 0.0) throw DomainError("trace_characteristic: eta0 must be nonnegative");
  if (!(ds > 0.0)) throw ConfigurationError("trace_characteristic: step must be positive");
  const ForceField force(eps, kind);
  const double dir = arc < 0.0 ? -1.0 : 1.0;
  const double length = std::abs(arc);
  CharacteristicPath path;
  detail::PhaseState y{eta0, phi0};
  double s = 0.0;
  path.s.push_back(0.0);
  path.eta.push_back(y.eta);
  path.phi.push_back(y.phi);
  while (s < length) {
    const double h = std::min(ds, length - s);
    detail::PhaseState next = detail::rk4_step(force, y, h, dir);
    double taken = h;
    if (next.eta < 0.0) {
      if (y.eta <= 0.0) {
        // Starts on the wall heading out: the path leaves at once.
        path.exited = true;
        break;
      }
      std::tie(taken, next) = detail::land_on_level(force, y, h, dir, 0.0);
      path.exited = true;
    }
    s += taken;
    y = next;
    path.s.push_back(dir * s);
    path.eta.push_back(y.eta);
    path.phi.push_back(y.phi);
    if (path.exited) break;
  }
  return path;
}

/// Weights of int_0^d e^{-s} v(s) ds for v linear between v(0) and v(d):
/// the integral equals a * v(0) + b * v(d).
struct ExpLinearWeights {
  double a;
  double b;
};

inline ExpLinearWeights exp_linear_weights(double d, double kappa = 1.0) {
  const double x = kappa * d;
  if (x < 1e-4) {
    // Series: a = d (1/2 - x/6 + x^2/24), b = d (1/2 - x/3 + x^2/8)
    return {d * (0.5 - x / 6.0 + x * x / 24.0), d * (0.5 - x / 3.0 + x * x / 8.0)};
  }
  const double em = -std::expm1(-x);  // 1 - e^{-x}
  const double q = em / x;
  return {(1.0 - q) / kappa, (q - std::exp(-x)) / kappa};
}

/// Boundary datum H(phi) for sin(phi) > 0, and source S(eta, phi).
using MilneDatum = std::function<double(double)>;
using MilneSource = std::function<double(double, double)>;

/// Problem definition. The eta nodes start at 0 and end at eta_max.
struct MilneProblem {
  double eps = 0.1;
  ForceKind force_kind = ForceKind::geometric;
  MilneDatum H;
  MilneSource S;                  // empty means zero
  double source_bound_M = 0.0;    // |S| <= M e^{-K eta}, declared by the caller
  double source_bound_K = 0.0;
  std::vector<double> eta_nodes;
  int n_phi = 64;

  void validate() const {
    if (!(eps > 0.0 && eps < 1.0)) throw ConfigurationError("Milne problem: eps must lie in (0, 1)");
    if (!H) throw ConfigurationError("Milne problem: boundary datum H is required");
    if (eta_nodes.size() < 3 || eta_nodes.front() != 0.0) {
      throw ConfigurationError("Milne problem: eta nodes must start at 0 with at least 3 nodes");
    }
    for (std::size_t i = 1; i < eta_nodes.size(); ++i) {
      if (!(eta_nodes[i] > eta_nodes[i - 1])) throw ConfigurationError("Milne problem: eta nodes must increase");
    }
    if (eta_nodes.back() < 20.0) throw ConfigurationError("Milne problem: eta_max must be at least 20");
    if (n_phi < 4 || n_phi % 2 != 0) throw ConfigurationError("Milne problem: n_phi must be even and >= 4");
  }
};

/// Graded eta nodes: spacing h_min at the wall growing by `ratio` up to h_max.
inline std::vector<double> milne_eta_nodes(double eta_max = 40.0, double h_min = 0.02, double h_max = 0.2,
                                           double ratio = 1.1) {
  return refined_offsets(eta_max, h_min, h_max, ratio);
}

enum class MilneAcceleration { direct, none };

struct MilneOptions {
  double tol = 1e-12;
  int max_iter = 200000;
  MilneAcceleration acceleration = MilneAcceleration::direct;
  double sigma_max = 40.0;  // optical depth after which a path is cut
  int threads = 1;
};

/// Least-squares fit of log D(eta) = c - K0 eta.
struct DecayFit {
  std::optional<double> K0;  // empty when the solution is already constant
  double r_squared = 0.0;
  std::size_t points = 0;
};

struct FarField {
  double f_inf = 0.0;
  DecayFit fit;
  bool truncation_warning = false;
};

namespace detail {

enum class PathEnd { wall, top, absorbed };

/// Result of one backward trace: the end and the linear weights of fbar.
struct PathRecord {
  PathEnd end = PathEnd::absorbed;
  double sigma = 0.0;    // optical length of the path
  double eta_end = 0.0;
  double phi_end = 0.0;
};

/// Traces backward from (eta, phi) and reports, for each step, the
/// endpoints and the optical offset so that callers can accumulate
/// exponential-linear weights.
template <typename StepFn>
PathRecord trace_backward(const ForceField& force, std::span<const double> nodes, double eta, double phi,
                          double sigma_max, StepFn&& on_step) {
  const double eta_max = nodes.back();
  PathRecord rec;
  detail::PhaseState y{eta, phi};
  if (eta <= 0.0 && std::sin(phi) > 0.0) {
    rec.end = PathEnd::wall;
    rec.phi_end = phi;
    return rec;
  }
  if (eta >= eta_max && std::sin(phi) < 0.0) {
    rec.end = PathEnd::top;
    rec.eta_end = eta_max;
    rec.phi_end = phi;
    return rec;
  }
  double sigma = 0.0;
  while (true) {
    const std::size_t c = locate_cell(nodes, std::clamp(y.eta, 0.0, eta_max));
    const double h_loc = nodes[c + 1] - nodes[c];
    const double sn = std::abs(std::sin(y.phi));
    double h = sn > 0.25 ? h_loc / sn : 4.0 * h_loc;
    h = std::min(h, sigma_max - sigma);
    detail::PhaseState next = rk4_step(force, y, h, -1.0);
    PathEnd end = PathEnd::absorbed;
    bool stop = false;
    if (next.eta <= 0.0) {
      std::tie(h, next) = land_on_level(force, y, h, -1.0, 0.0);
      end = PathEnd::wall;
      stop = true;
    } else if (next.eta >= eta_max) {
      std::tie(h, next) = land_on_level(force, y, h, -1.0, eta_max);
      end = PathEnd::top;
      stop = true;
    } else if (sigma + h >= sigma_max) {
      stop = true;
    }
    on_step(sigma, h, y, next);
    sigma += h;
    y = next;
    if (stop) {
      rec.end = end;
      rec.sigma = sigma;
      rec.eta_end = y.eta;
      rec.phi_end = y.phi;
      return rec;
    }
  }
}

/// Linear interpolation weights of a nodal profile at eta.
inline std::pair<std::size_t, double> eta_weights(std::span<const double> nodes, double eta) {
  const double e = std::clamp(eta, 0.0, nodes.back());
  const std::size_t c = locate_cell(nodes, e);
  const double a = (e - nodes[c]) / (nodes[c + 1] - nodes[c]);
  return {c, a};
}

inline double interpolate_profile(std::span<const double> nodes, std::span<const double> v, double eta) {
  auto [c, a] = eta_weights(nodes, eta);
  return (1.0 - a) * v[c] + a * v[c + 1];
}

}  // namespace detail

/// Fits the exponential approach of `decay` (a nonnegative profile on
/// `nodes`) to zero over the window where it exceeds the noise floor.
inline DecayFit fit_decay(std::span<const double> nodes, std::span<const double> decay, double scale) {
  DecayFit fit;
  const double floor = 1e3 * std::numeric_limits<double>::epsilon() * std::max(1.0, scale);
  const double eta_max = nodes.back();
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    // Mid-range: skip the wall transient and the tail used for f_inf.
    if (nodes[i] < 1.0 || nodes[i] > 0.9 * eta_max) continue;
    if (!(decay[i] > floor)) continue;
    xs.push_back(nodes[i]);
    ys.push_back(std::log(decay[i]));
  }
  fit.points = xs.size();
  if (xs.size() < 3) return fit;
  const double n = static_cast<double>(xs.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sx += xs[i];
    sy += ys[i];
  }
  const double mx = sx / n, my = sy / n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    sxy += (xs[i] - mx) * (ys[i] - my);
    syy += (ys[i] - my) * (ys[i] - my);
  }
  if (sxx <= 0.0) return fit;
  const double slope = sxy / sxx;
  fit.K0 = -slope;
  fit.r_squared = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
  return fit;
}

/// Far-field limit from the top 10% of the eta range and the decay fit of
/// D(eta) = max_j |f(eta, phi_j) - f_inf|.
inline FarField extract_far_field(std::span<const double> nodes, std::span<const double> fbar,
                                  std::span<const double> decay_of_f_minus) {
  FarField out;
  const double eta_max = nodes.back();
  double sum = 0.0;
  int count = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i] >= 0.9 * eta_max) {
      sum += fbar[i];
      ++count;
    }
  }
  out.f_inf = sum / count;
  out.truncation_warning = std::abs(fbar.back() - out.f_inf) > 1e-6 * (1.0 + std::abs(out.f_inf));
  out.fit = fit_decay(nodes, decay_of_f_minus, std::abs(out.f_inf));
  return out;
}

/// Fixed part of a Milne solve for one (eps, force, grid): the linear map
/// fbar -> fbar of one sweep, its LU factors, and how each node's backward
/// path ends. Reused across data.
class MilneOperator {
 public:
  MilneOperator(ForceField force, std::vector<double> eta_nodes, int n_phi, double sigma_max = 40.0,
                int threads = 1)
      : force_(std::move(force)), nodes_(std::move(eta_nodes)), angles_(n_phi), sigma_max_(sigma_max) {
    assemble(threads);
  }

  const ForceField& force() const noexcept { return force_; }
  std::span<const double> nodes() const noexcept { return nodes_; }
  const AngularGrid& angles() const noexcept { return angles_; }
  double sigma_max() const noexcept { return sigma_max_; }
  const Eigen::MatrixXd& sweep_matrix() const noexcept { return M_; }

  /// Average over phi of the wall contribution e^{-sigma} H(phi_end).
  Eigen::VectorXd datum_vector(const MilneDatum& H) const {
    const std::size_t n = nodes_.size();
    const int nphi = angles_.size();
    Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int j = 0; j < nphi; ++j) {
        const detail::PathRecord& r = records_[i * static_cast<std::size_t>(nphi) + static_cast<std::size_t>(j)];
        if (r.end == detail::PathEnd::wall) acc += std::exp(-r.sigma) * H(r.phi_end);
      }
      c[static_cast<Eigen::Index>(i)] = acc * angles_.weight() / kTwoPi;
    }
    return c;
  }

  /// Average over phi of int e^{-sigma} S along each node's path.
  Eigen::VectorXd source_vector(const MilneSource& S, int threads) const {
    const std::size_t n = nodes_.size();
    const int nphi = angles_.size();
    Eigen::VectorXd c = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    parallel_for(n, threads, [&](std::size_t i) {
      double acc = 0.0;
      for (int j = 0; j < nphi; ++j) acc += path_value(nodes_[i], angles_.node(j), nullptr, {}, &S);
      c[static_cast<Eigen::Index>(i)] = acc * angles_.weight() / kTwoPi;
    });
    return c;
  }

  Eigen::VectorXd solve_direct(const Eigen::VectorXd& rhs) const { return lu_.solve(rhs); }

  /// Value of f at (eta, phi) given the datum, the converged fbar profile and
  /// an optional source; null H means the datum contributes zero.
  double path_value(double eta, double phi, const MilneDatum* H, std::span<const double> fbar,
                    const MilneSource* S) const {
    double value = 0.0;
    const bool use_fbar = !fbar.empty();
    const bool use_S = S != nullptr && static_cast<bool>(*S);
    detail::PathRecord rec = detail::trace_backward(
        force_, nodes_, eta, phi, sigma_max_,
        [&](double sigma, double h, const detail::PhaseState& p0, const detail::PhaseState& p1) {
          const ExpLinearWeights w = exp_linear_weights(h);
          const double damp = std::exp(-sigma);
          if (use_fbar) {
            value += damp * (w.a * detail::interpolate_profile(nodes_, fbar, p0.eta) +
                             w.b * detail::interpolate_profile(nodes_, fbar, p1.eta));
          }
          if (use_S) value += damp * (w.a * (*S)(p0.eta, p0.phi) + w.b * (*S)(p1.eta, p1.phi));
        });
    const double tail = std::exp(-rec.sigma);
    switch (rec.end) {
      case detail::PathEnd::wall:
        if (H != nullptr) value += tail * (*H)(rec.phi_end);
        break;
      case detail::PathEnd::top:
        if (use_fbar) value += tail * fbar.back();
        break;
      case detail::PathEnd::absorbed:
        // The path ended inside; its last point carries the isotropic part.
        if (use_fbar) value += tail * detail::interpolate_profile(nodes_, fbar, rec.eta_end);
        break;
    }
    return value;
  }

 private:
  void assemble(int threads) {
    const std::size_t n = nodes_.size();
    const int nphi = angles_.size();
    M_ = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    records_.assign(n * static_cast<std::size_t>(nphi), {});
    const double wnorm = angles_.weight() / kTwoPi;
    parallel_for(n, threads, [&](std::size_t i) {
      std::vector<double> row(n, 0.0);
      for (int j = 0; j < nphi; ++j) {
        auto add = [&](double eta, double weight) {
          auto [c, a] = detail::eta_weights(nodes_, eta);
          row[c] += (1.0 - a) * weight;
          row[c + 1] += a * weight;
        };
        detail::PathRecord rec = detail::trace_backward(
            force_, nodes_, nodes_[i], angles_.node(j), sigma_max_,
            [&](double sigma, double h, const detail::PhaseState& p0, const detail::PhaseState& p1) {
              const ExpLinearWeights w = exp_linear_weights(h);
              const double damp = std::exp(-sigma);
              add(p0.eta, damp * w.a);
              add(p1.eta, damp * w.b);
            });
        const double tail = std::exp(-rec.sigma);
        if (rec.end == detail::PathEnd::top) row[n - 1] += tail;
        if (rec.end == detail::PathEnd::absorbed) add(rec.eta_end, tail);
        records_[i * static_cast<std::size_t>(nphi) + static_cast<std::size_t>(j)] = rec;
      }
      for (std::size_t k = 0; k < n; ++k) {
        M_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = row[k] * wnorm;
      }
    });
    const Eigen::MatrixXd A = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)) - M_;
    lu_ = A.partialPivLu();
  }

  ForceField force_;
  std::vector<double> nodes_;
  AngularGrid angles_;
  double sigma_max_;
  Eigen::MatrixXd M_;
  Eigen::PartialPivLU<Eigen::MatrixXd> lu_;
  std::vector<detail::PathRecord> records_;
};

/// Converged layer solution.
class MilneSolution {
 public:
  MilneSolution(std::shared_ptr<const MilneOperator> op, MilneDatum H, MilneSource S, std::vector<double> fbar,
                std::vector<double> f, FarField far, int iterations, double residual)
      : op_(std::move(op)), H_(std::move(H)), S_(std::move(S)), fbar_(std::move(fbar)), f_(std::move(f)),
        far_(far), iterations_(iterations), residual_(residual) {
    const int nphi = op_->angles().size();
    flux_.resize(fbar_.size());
    for (std::size_t i = 0; i < fbar_.size(); ++i) {
      double acc = 0.0;
      for (int j = 0; j < nphi; ++j) acc += std::sin(op_->angles().node(j)) * at(i, j);
      flux_[i] = acc * op_->angles().weight();
    }
  }

  std::span<const double> eta_nodes() const noexcept { return op_->nodes(); }
  const AngularGrid& angles() const noexcept { return op_->angles(); }
  std::span<const double> fbar() const noexcept { return fbar_; }
  std::span<const double> flux_profile() const noexcept { return flux_; }
  double at(std::size_t i, int j) const {
    return f_[i * static_cast<std::size_t>(op_->angles().size()) + static_cast<std::size_t>(j)];
  }
  double f_inf() const noexcept { return far_.f_inf; }
  const DecayFit& decay_fit() const noexcept { return far_.fit; }
  bool truncation_warning() const noexcept { return far_.truncation_warning; }
  int iterations() const noexcept { return iterations_; }
  double residual() const noexcept { return residual_; }
  const MilneOperator& op() const noexcept { return *op_; }
  double eps() const noexcept { return op_->force().eps(); }

  /// f at an arbitrary phase point, reconstructed along its characteristic.
  /// Points above eta_max take the far-field value.
  double evaluate(double eta, double phi) const {
    if (eta < 0.0) throw DomainError("Milne evaluate: eta must be nonnegative");
    if (eta >= op_->nodes().back()) return far_.f_inf;
    return op_->path_value(eta, wrap_angle(phi), &H_, fbar_, S_ ? &S_ : nullptr);
  }

 private:
  std::shared_ptr<const MilneOperator> op_;
  MilneDatum H_;
  MilneSource S_;
  std::vector<double> fbar_;
  std::vector<double> f_;
  std::vector<double> flux_;
  FarField far_;
  int iterations_;
  double residual_;
};

/// Weighted flux sum_j w_j sin(phi_j) f(eta_i, phi_j).
inline double flux(const MilneSolution& sol, std::size_t i) {
  if (i >= sol.flux_profile().size()) throw DomainError("flux: eta index out of range");
  return sol.flux_profile()[i];
}

/// Solves with a prebuilt operator, for the given datum and source.
inline MilneSolution solve_milne(std::shared_ptr<const MilneOperator> op, MilneDatum H, MilneSource S,
                                 const MilneOptions& opt = {}) {
  if (!(opt.tol > 0.0)) throw ConfigurationError("Milne solve: tol must be positive");
  const std::size_t n = op->nodes().size();
  Eigen::VectorXd c = op->datum_vector(H);
  if (S) c += op->source_vector(S, opt.threads);
  const Eigen::MatrixXd& M = op->sweep_matrix();

  Eigen::VectorXd fbar;
  int iterations = 0;
  double change = 0.0;
  if (opt.acceleration == MilneAcceleration::direct) {
    fbar = op->solve_direct(c);
    // Source-iteration check on the direct answer; one refinement pass if
    // the sweep does not reproduce it.
    for (iterations = 1; iterations <= std::max(1, opt.max_iter); ++iterations) {
      Eigen::VectorXd next = M * fbar + c;
      change = (next - fbar).lpNorm<Eigen::Infinity>();
      if (change <= opt.tol) {
        fbar = next;
        break;
      }
      if (iterations >= 3) throw IterationError("Milne direct solve did not reproduce its fixed point", change, iterations);
      fbar += op->solve_direct(next - fbar);
    }
  } else {
    fbar = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    for (iterations = 1;; ++iterations) {
      Eigen::VectorXd next = M * fbar + c;
      change = (next - fbar).lpNorm<Eigen::Infinity>();
      fbar = next;
      if (change <= opt.tol) break;
      if (iterations >= opt.max_iter) throw IterationError("Milne source iteration did not converge", change, iterations);
    }
  }
  if (!fbar.allFinite()) throw NumericError("Milne solve produced non-finite values");

  std::vector<double> fb(fbar.data(), fbar.data() + n);
  const int nphi = op->angles().size();
  std::vector<double> f(n * static_cast<std::size_t>(nphi));
  const MilneSource* Sp = S ? &S : nullptr;
  parallel_for(n, opt.threads, [&](std::size_t i) {
    for (int j = 0; j < nphi; ++j) {
      f[i * static_cast<std::size_t>(nphi) + static_cast<std::size_t>(j)] =
          op->path_value(op->nodes()[i], op->angles().node(j), &H, fb, Sp);
    }
  });

  // Provisional f_inf from the tail, then the decay profile against it.
  double tail_sum = 0.0;
  int tail_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (op->nodes()[i] >= 0.9 * op->nodes().back()) {
      tail_sum += fb[i];
      ++tail_count;
    }
  }
  const double f_inf = tail_sum / tail_count;
  std::vector<double> decay(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < nphi; ++j) {
      decay[i] = std::max(decay[i], std::abs(f[i * static_cast<std::size_t>(nphi) + static_cast<std::size_t>(j)] - f_inf));
    }
  }
  FarField far = extract_far_field(op->nodes(), fb, decay);
  return MilneSolution(std::move(op), std::move(H), std::move(S), std::move(fb), std::move(f), far, iterations, change);
}

/// Solves a layer problem with an explicit force field.
inline MilneSolution solve_milne_with_force(const MilneProblem& problem, ForceField force,
                                            const MilneOptions& opt = {}) {
  problem.validate();
  auto op = std::make_shared<const MilneOperator>(std::move(force), problem.eta_nodes, problem.n_phi, opt.sigma_max,
                                                  opt.threads);
  return solve_milne(std::move(op), problem.H, problem.S, opt);
}

/// Solves a layer problem with the force given by its kind.
inline MilneSolution solve_milne(const MilneProblem& problem, const MilneOptions& opt = {}) {
  return solve_milne_with_force(problem, ForceField(problem.eps, problem.force_kind), opt);
}

}  // namespace knudsen
