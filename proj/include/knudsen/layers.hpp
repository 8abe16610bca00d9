#pragma once

// Asymptotic expansion of the kinetic solution at orders 0 and 1:
//
//   u ~ U0 + I0 + B0 + eps * (U1 + I1 + B1),
//
// with interior terms from the heat solver, initial layers in the fast time
// tau = t / eps^2 and boundary layers from layer problems in the stretched
// frame (eta, theta, phi). Geometric layers carry the curvature force,
// classical layers use F = 0.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "knudsen/core.hpp"
#include "knudsen/errors.hpp"
#include "knudsen/heat.hpp"
#include "knudsen/milne.hpp"
#include "knudsen/transport.hpp"

namespace knudsen {

enum class LayerKind { geometric, classical };

inline const char* to_string(LayerKind k) { return k == LayerKind::geometric ? "geometric" : "classical"; }

inline ForceKind force_kind(LayerKind k) { return k == LayerKind::geometric ? ForceKind::geometric : ForceKind::none; }

/// Diffusion coefficient of the interior equation: the velocity average of
/// w1^2 over the unit circle.
inline constexpr double kInteriorDiffusivity = 0.5;

/// Layer grid reaching past the support of psi0 with a margin of 10.
inline std::vector<double> layer_eta_nodes(double eps, double h_min = 0.02, double h_max = 0.2, double ratio = 1.1) {
  return milne_eta_nodes(std::max(40.0, 0.375 / eps + 10.0), h_min, h_max, ratio);
}

/// Central-difference gradient of a scalar function of x.
inline Direction numeric_gradient(const std::function<double(DiskPoint)>& f, DiskPoint x, double h = 1e-6) {
  return {(f({x.x1 + h, x.x2}) - f({x.x1 - h, x.x2})) / (2.0 * h),
          (f({x.x1, x.x2 + h}) - f({x.x1, x.x2 - h})) / (2.0 * h)};
}

/// Zeroth-order initial layer e^{-tau} (h - hbar).
class InitialLayer0 {
 public:
  InitialLayer0(InitialDatum h, int n_phi) : h_(std::move(h)), angles_(n_phi) {
    if (!h_) throw ConfigurationError("initial layer needs an initial datum");
  }

  double hbar(DiskPoint x) const {
    std::vector<double> v(static_cast<std::size_t>(angles_.size()));
    for (int j = 0; j < angles_.size(); ++j) v[std::size_t(j)] = h_(x, {angles_.node(j)});
    return velocity_average(angles_, v);
  }

  double value(double tau, DiskPoint x, VelocityAngle w) const {
    if (tau > 745.0) return 0.0;
    return std::exp(-tau) * (h_(x, w) - hbar(x));
  }

  const InitialDatum& datum() const noexcept { return h_; }
  const AngularGrid& angles() const noexcept { return angles_; }

 private:
  InitialDatum h_;
  AngularGrid angles_;
};

inline InitialLayer0 build_initial_layer0(InitialDatum h, int n_phi = 64) { return InitialLayer0(std::move(h), n_phi); }

/// First-order initial layer F1(tau) - F1(inf), with
///   d/dtau avg F1 = -avg(w.grad I0),
///   F1(tau) = e^{-tau} F1(0) + int_0^tau (avg F1 - w.grad I0)(s) e^{s - tau} ds,
///   F1(0) = w.grad U0(0) = w.grad hbar,
/// integrated by the trapezoidal rule on a grid refined near s = 0.
class InitialLayer1 {
 public:
  explicit InitialLayer1(std::shared_ptr<const InitialLayer0> l0, double s_max = 50.0) : l0_(std::move(l0)) {
    if (!l0_) throw ConfigurationError("first-order initial layer needs the zeroth-order one");
    const auto d = refined_offsets(s_max, 1e-4, 0.01, 1.1);
    s_.assign(d.begin(), d.end());
  }

  double value(double tau, DiskPoint x, VelocityAngle w) const {
    const Data d = data(x, w);
    return integrate(std::min(tau, s_.back()), d) - far(d);
  }

  /// F1(inf, x), the initial datum of the first-order interior term.
  double far_value(DiskPoint x) const {
    const Data d = data(x, VelocityAngle{0.0});
    return far(d);
  }

 private:
  struct Data {
    double f0 = 0.0;  // w.grad hbar
    double q = 0.0;   // w.grad (h - hbar)
    double Q = 0.0;   // avg over w of q
  };

  Data data(DiskPoint x, VelocityAngle w) const {
    const auto& h = l0_->datum();
    const AngularGrid& ang = l0_->angles();
    auto hbar = [&](DiskPoint y) { return l0_->hbar(y); };
    const Direction gb = numeric_gradient(hbar, x, 1e-5);
    auto q_at = [&](VelocityAngle v) {
      const Direction wv = v.direction();
      const Direction gh = numeric_gradient([&](DiskPoint y) { return h(y, v); }, x, 1e-5);
      return wv.w1 * (gh.w1 - gb.w1) + wv.w2 * (gh.w2 - gb.w2);
    };
    Data d;
    const Direction wd = w.direction();
    d.f0 = wd.w1 * gb.w1 + wd.w2 * gb.w2;
    d.q = q_at(w);
    std::vector<double> qs(static_cast<std::size_t>(ang.size()));
    for (int j = 0; j < ang.size(); ++j) qs[std::size_t(j)] = q_at({ang.node(j)});
    d.Q = velocity_average(ang, qs);
    return d;
  }

  // F1(tau), with avg F1 and the Duhamel integral advanced together.
  double integrate(double tau, const Data& d) const {
    double avg = 0.0;  // avg F1 at the current node; avg F1(0) = 0 since U0 is isotropic
    double acc = 0.0;  // int_0^s (avg F1 - q e^{-s'}) e^{s' - tau} ds'
    double s_prev = 0.0;
    double g_prev = (avg - d.q) * std::exp(-tau);
    for (std::size_t k = 1; k < s_.size() && s_prev < tau; ++k) {
      const double s = std::min(s_[k], tau);
      const double ds = s - s_prev;
      avg += -0.5 * ds * d.Q * (std::exp(-s_prev) + std::exp(-s));
      const double g = (avg - d.q * std::exp(-s)) * std::exp(s - tau);
      acc += 0.5 * ds * (g_prev + g);
      g_prev = g;
      s_prev = s;
    }
    return std::exp(-tau) * d.f0 + acc;
  }

  double far(const Data& d) const {
    double avg = 0.0;
    for (std::size_t k = 1; k < s_.size(); ++k) {
      avg += -0.5 * (s_[k] - s_[k - 1]) * d.Q * (std::exp(-s_[k - 1]) + std::exp(-s_[k]));
    }
    return avg;
  }

  std::shared_ptr<const InitialLayer0> l0_;
  std::vector<double> s_;
};

/// Thread-safe memo of path evaluations keyed by basis index and point.
class PathCache {
 public:
  template <typename Fn>
  double get(std::size_t basis, double eta, double phi, Fn&& compute) const {
    const Key key{basis, std::llround(eta * 1e11), std::llround(phi * 1e11)};
    {
      std::shared_lock lock(mutex_);
      auto it = map_.find(key);
      if (it != map_.end()) return it->second;
    }
    const double v = compute();
    std::unique_lock lock(mutex_);
    map_.emplace(key, v);
    return v;
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return map_.size();
  }

 private:
  struct Key {
    std::size_t basis;
    long long eta;
    long long phi;
    bool operator==(const Key&) const = default;
  };
  struct Hash {
    std::size_t operator()(const Key& k) const noexcept {
      std::size_t h = std::hash<long long>{}(k.eta);
      h ^= std::hash<long long>{}(k.phi) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      h ^= std::hash<std::size_t>{}(k.basis) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
      return h;
    }
  };
  mutable std::shared_mutex mutex_;
  mutable std::unordered_map<Key, double, Hash> map_;
};

/// Layer solutions on (t_k, theta_m) samples, stored as coefficients on a
/// small basis of layer solves: f(t_k, eta, theta_m, phi) = sum_b c[k, m, b] P_b(eta, phi).
/// Data of rank r in the sample index need only r solves.
class LayerFamily {
 public:
  LayerFamily(double eps, LayerKind kind, std::vector<double> t_samples, int n_theta,
              std::vector<std::shared_ptr<const MilneSolution>> basis, std::vector<double> coeff)
      : eps_(eps), kind_(kind), t_(std::move(t_samples)), n_theta_(n_theta), basis_(std::move(basis)),
        coeff_(std::move(coeff)) {
    if (t_.empty() || n_theta_ < 1) throw ConfigurationError("layer family needs time and angle samples");
    if (coeff_.size() != t_.size() * std::size_t(n_theta_) * basis_.size()) {
      throw ConfigurationError("layer family coefficient table has the wrong size");
    }
  }

  double eps() const noexcept { return eps_; }
  LayerKind kind() const noexcept { return kind_; }
  const std::vector<double>& t_samples() const noexcept { return t_; }
  int n_theta() const noexcept { return n_theta_; }
  double theta(int m) const { return -kPi + m * (kTwoPi / n_theta_); }
  std::size_t rank() const noexcept { return basis_.size(); }
  const MilneSolution& basis(std::size_t b) const { return *basis_[b]; }
  double coeff(std::size_t k, int m, std::size_t b) const {
    return coeff_[(k * std::size_t(n_theta_) + std::size_t(m)) * basis_.size() + b];
  }

  /// Far-field value at a sample.
  double f_inf(std::size_t k, int m) const {
    double v = 0.0;
    for (std::size_t b = 0; b < basis_.size(); ++b) v += coeff(k, m, b) * basis_[b]->f_inf();
    return v;
  }

  /// Far-field value, linear in t and theta between samples.
  double f_inf(double t, double theta) const {
    double v = 0.0;
    for_weights(t, theta, [&](std::size_t k, int m, double w) { v += w * f_inf(k, m); });
    return v;
  }

  /// Layer solution f at (t, eta, theta, phi).
  double f(double t, double eta, double theta, double phi) const {
    phi = wrap_angle(phi);
    std::vector<double> pb(basis_.size(), 0.0);
    std::vector<char> have(basis_.size(), 0);
    double v = 0.0;
    for_weights(t, theta, [&](std::size_t k, int m, double w) {
      for (std::size_t b = 0; b < basis_.size(); ++b) {
        const double c = coeff(k, m, b);
        if (c == 0.0) continue;
        if (!have[b]) {
          pb[b] = path(b, eta, phi);
          have[b] = 1;
        }
        v += w * c * pb[b];
      }
    });
    return v;
  }

  /// psi0(eps eta) * (f - f_inf): the boundary-layer term.
  double layer(double t, double eta, double theta, double phi) const {
    const double cut = cutoff_psi0(eps_ * eta);
    if (cut == 0.0) return 0.0;
    return cut * (f(t, eta, theta, phi) - f_inf(t, theta));
  }

  /// Basis value P_b(eta, phi), memoized.
  double path(std::size_t b, double eta, double phi) const {
    return cache_->get(b, eta, phi, [&] { return basis_[b]->evaluate(eta, phi); });
  }

  std::size_t cached_points() const { return cache_->size(); }

 private:
  template <typename Fn>
  void for_weights(double t, double theta, Fn&& fn) const {
    std::size_t k0 = 0;
    double c = 0.0;
    const double tol = 1e-12 * std::max(1.0, t_.back());
    if (t < t_.front() - tol || t > t_.back() + tol) throw DomainError("layer family: time outside the samples");
    if (t_.size() > 1) {
      const double tc = std::clamp(t, t_.front(), t_.back());
      k0 = locate_cell(t_, tc);
      c = std::clamp((tc - t_[k0]) / (t_[k0 + 1] - t_[k0]), 0.0, 1.0);
    }
    const double pos = (wrap_angle(theta) + kPi) / (kTwoPi / n_theta_);
    const double fl = std::floor(pos);
    const double b = pos - fl;
    const int m0 = ((static_cast<int>(fl) % n_theta_) + n_theta_) % n_theta_;
    const int m1 = (m0 + 1) % n_theta_;
    for (int kk = 0; kk < 2; ++kk) {
      const double wt = kk == 0 ? 1.0 - c : c;
      if (wt == 0.0) continue;
      const std::size_t k = k0 + std::size_t(kk);
      if (1.0 - b != 0.0) fn(k, m0, wt * (1.0 - b));
      if (b != 0.0) fn(k, m1, wt * b);
    }
  }

  double eps_;
  LayerKind kind_;
  std::vector<double> t_;
  int n_theta_;
  std::vector<std::shared_ptr<const MilneSolution>> basis_;
  std::vector<double> coeff_;
  std::unique_ptr<PathCache> cache_ = std::make_unique<PathCache>();
};

/// Settings shared by the layer solves of one expansion.
struct LayerSettings {
  std::vector<double> eta_nodes;  // empty means layer_eta_nodes(eps)
  int n_phi = 64;
  MilneOptions milne{};
  int max_rank = 8;  // larger data ranks fall back to one solve per sample
};

namespace detail {

/// Low-rank split of sampled functions of phi: rows[s] ~ sum_b c[s, b] rows[pivot_b].
struct LowRank {
  std::vector<std::size_t> pivots;
  Eigen::MatrixXd coeff;  // samples x rank
};

inline std::optional<LowRank> low_rank(const Eigen::MatrixXd& rows, int max_rank) {
  const double scale = rows.cwiseAbs().maxCoeff();
  LowRank out;
  if (scale == 0.0) {
    out.coeff = Eigen::MatrixXd::Zero(rows.rows(), 0);
    return out;
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(rows.transpose());
  qr.setThreshold(1e-12);
  const auto r = qr.rank();
  if (r > max_rank) return std::nullopt;
  const auto perm = qr.colsPermutation().indices();
  Eigen::MatrixXd basis(rows.cols(), r);
  for (Eigen::Index b = 0; b < r; ++b) {
    out.pivots.push_back(static_cast<std::size_t>(perm[b]));
    basis.col(b) = rows.row(perm[b]).transpose();
  }
  out.coeff = basis.colPivHouseholderQr().solve(rows.transpose()).transpose();
  const double resid = (out.coeff * basis.transpose() - rows).cwiseAbs().maxCoeff();
  if (!(resid <= 1e-11 * scale)) return std::nullopt;
  // Exact coefficients on the pivots themselves.
  for (Eigen::Index b = 0; b < r; ++b) {
    out.coeff.row(perm[b]).setZero();
    out.coeff(perm[b], b) = 1.0;
  }
  return out;
}

/// Builds a family from sampled data. `datum(k, m)` and optional
/// `source(k, m)` give the inputs of sample (k, m); the optional low-rank
/// `source_split` lets the caller provide source basis functions and
/// coefficients directly.
struct SourceBasis {
  std::vector<MilneSource> sources;
  std::vector<double> coeff;  // [(k * n_theta + m) * nb + b]
};

inline LayerFamily build_family(double eps, LayerKind kind, const std::vector<double>& t, int n_theta,
                                const std::function<MilneDatum(std::size_t, int)>& datum,
                                const SourceBasis* source_basis, const LayerSettings& set) {
  const std::vector<double> nodes = set.eta_nodes.empty() ? layer_eta_nodes(eps) : set.eta_nodes;
  MilneProblem probe;
  probe.eps = eps;
  probe.eta_nodes = nodes;
  probe.n_phi = set.n_phi;
  probe.H = [](double) { return 0.0; };
  probe.validate();
  auto op = std::make_shared<const MilneOperator>(ForceField(eps, force_kind(kind)), nodes, set.n_phi,
                                                  set.milne.sigma_max, set.milne.threads);
  const std::size_t ns = t.size() * std::size_t(n_theta);
  // Sample every datum on a fine phi set to find its rank.
  const int n_probe = 4 * set.n_phi + 3;
  Eigen::MatrixXd rows(static_cast<Eigen::Index>(ns), n_probe);
  std::vector<MilneDatum> data(ns);
  for (std::size_t k = 0; k < t.size(); ++k) {
    for (int m = 0; m < n_theta; ++m) {
      const std::size_t s = k * std::size_t(n_theta) + std::size_t(m);
      data[s] = datum(k, m);
      for (int q = 0; q < n_probe; ++q) rows(Eigen::Index(s), q) = data[s](-kPi + kTwoPi * (q + 0.29) / n_probe);
    }
  }
  std::vector<std::shared_ptr<const MilneSolution>> basis;
  std::vector<std::vector<double>> cols;  // per basis: coefficient over samples
  const auto split = low_rank(rows, set.max_rank);
  if (split) {
    for (std::size_t b = 0; b < split->pivots.size(); ++b) {
      basis.push_back(std::make_shared<const MilneSolution>(solve_milne(op, data[split->pivots[b]], {}, set.milne)));
      cols.emplace_back(ns);
      for (std::size_t s = 0; s < ns; ++s) cols.back()[s] = split->coeff(Eigen::Index(s), Eigen::Index(b));
    }
  } else {
    for (std::size_t s = 0; s < ns; ++s) {
      basis.push_back(std::make_shared<const MilneSolution>(solve_milne(op, data[s], {}, set.milne)));
      cols.emplace_back(ns, 0.0);
      cols.back()[s] = 1.0;
    }
  }
  if (source_basis != nullptr) {
    const std::size_t nb = source_basis->sources.size();
    for (std::size_t b = 0; b < nb; ++b) {
      basis.push_back(std::make_shared<const MilneSolution>(
          solve_milne(op, [](double) { return 0.0; }, source_basis->sources[b], set.milne)));
      cols.emplace_back(ns);
      for (std::size_t s = 0; s < ns; ++s) cols.back()[s] = source_basis->coeff[s * nb + b];
    }
  }
  std::vector<double> coeff(ns * basis.size());
  for (std::size_t s = 0; s < ns; ++s)
    for (std::size_t b = 0; b < basis.size(); ++b) coeff[s * basis.size() + b] = cols[b][s];
  return LayerFamily(eps, kind, t, n_theta, std::move(basis), std::move(coeff));
}

}  // namespace detail

/// Zeroth-order boundary layer psi0 (f0 - f0(inf)) with datum g on the
/// (t, theta) samples.
inline LayerFamily build_boundary_layer0(double eps, const BoundaryDatum& g, LayerKind kind,
                                         const std::vector<double>& t_samples, int n_theta,
                                         const LayerSettings& set = {}) {
  if (!g) throw ConfigurationError("boundary layer needs a boundary datum");
  auto datum = [&](std::size_t k, int m) -> MilneDatum {
    const double t = t_samples[k];
    const double theta = -kPi + m * (kTwoPi / n_theta);
    return [g, t, theta](double phi) { return g(t, theta, phi); };
  };
  return detail::build_family(eps, kind, t_samples, n_theta, datum, nullptr, set);
}

/// Everything needed to evaluate the expansion.
struct ExpansionBundle {
  double eps = 0.1;
  LayerKind kind = LayerKind::geometric;
  int order = 0;
  double diffusivity = kInteriorDiffusivity;
  std::shared_ptr<const InitialLayer0> initial0;
  std::shared_ptr<const LayerFamily> boundary0;
  std::shared_ptr<const ScalarFieldTime> interior0;
  std::shared_ptr<const InitialLayer1> initial1;
  std::shared_ptr<const LayerFamily> boundary1;
  std::shared_ptr<const ScalarFieldTime> interior1;
};

/// Interior term U0: heat flow from hbar with the layer far field as
/// boundary data.
inline ScalarFieldTime build_interior0(const InitialLayer0& initial, const LayerFamily& boundary,
                                       const SpaceTimeGrid& grid, double diffusivity = kInteriorDiffusivity) {
  HeatProblem hp;
  hp.initial = [&initial](DiskPoint x) { return initial.hbar(x); };
  hp.dirichlet = [&boundary](double t, double theta) { return boundary.f_inf(t, theta); };
  hp.T = grid.t.back();
  hp.diffusivity = diffusivity;
  return solve_heat_disk(hp, grid);
}

struct ExpansionConfig {
  double eps = 0.1;
  LayerKind kind = LayerKind::geometric;
  int order = 0;
  BoundaryDatum g;
  InitialDatum h;
  SpaceTimeGrid grid;  // interior grid; its theta nodes and times are the layer samples
  double diffusivity = kInteriorDiffusivity;
  LayerSettings layer{};
};

/// Default interior grid: uniform radius, uniform time.
inline SpaceTimeGrid make_expansion_grid(double T, int n_r = 40, int n_theta = 32, double dt = 0.005) {
  SpaceTimeGrid g;
  for (int i = 0; i <= n_r; ++i) g.r.push_back(double(i) / n_r);
  g.n_theta = n_theta;
  const int nt = std::max(1, static_cast<int>(std::ceil(T / dt - 1e-9)));
  for (int k = 0; k <= nt; ++k) g.t.push_back(T * k / nt);
  return g;
}

/// Adds the first-order terms to an order-0 bundle.
inline void build_order1(ExpansionBundle& b, const ExpansionConfig& cfg) {
  if (!b.initial0 || !b.boundary0 || !b.interior0) throw ConfigurationError("order 1 needs the order-0 terms");
  const LayerFamily& B0 = *b.boundary0;
  const int nth = B0.n_theta();
  if (nth < 8) throw ConfigurationError("order 1 needs at least 8 theta samples for the angular derivative");
  const double eps = b.eps;
  const auto& t = B0.t_samples();
  const ScalarFieldTime& U0 = *b.interior0;

  // Source cos(phi) psi/(1 - eps eta) d/dtheta B0 in the rotated frame: the
  // basis profiles do not depend on theta, so only coefficients are differenced.
  detail::SourceBasis src;
  const std::size_t nb0 = B0.rank();
  const double dth = kTwoPi / nth;
  std::vector<double> dcoef(t.size() * std::size_t(nth) * nb0);
  double dmax = 0.0, cmax = 0.0;
  for (std::size_t k = 0; k < t.size(); ++k)
    for (int m = 0; m < nth; ++m)
      for (std::size_t q = 0; q < nb0; ++q) {
        const double d = (B0.coeff(k, (m + 1) % nth, q) - B0.coeff(k, (m + nth - 1) % nth, q)) / (2.0 * dth);
        dcoef[(k * std::size_t(nth) + std::size_t(m)) * nb0 + q] = d;
        dmax = std::max(dmax, std::abs(d));
        cmax = std::max(cmax, std::abs(B0.coeff(k, m, q)));
      }
  if (dmax > 1e-12 * std::max(1.0, cmax)) {
    for (std::size_t q = 0; q < nb0; ++q) {
      const MilneSolution& P = B0.basis(q);
      const double finf = P.f_inf();
      const auto nodes = P.eta_nodes();
      const AngularGrid& ang = P.angles();
      std::vector<double> vals(nodes.size() * std::size_t(ang.size()));
      for (std::size_t i = 0; i < nodes.size(); ++i)
        for (int j = 0; j < ang.size(); ++j) vals[i * std::size_t(ang.size()) + std::size_t(j)] = P.at(i, j) - finf;
      const std::vector<double> nd(nodes.begin(), nodes.end());
      src.sources.push_back([eps, nd, vals, ang](double eta, double phi) {
        const double mu = eps * eta;
        const double cut = cutoff_psi0(mu);
        if (cut == 0.0) return 0.0;
        auto [c, a] = detail::eta_weights(nd, eta);
        auto [j0, bj] = ang.locate(phi);
        const int n = ang.size();
        const int j1 = (j0 + 1) % n;
        auto at = [&](std::size_t i, int j) { return vals[i * std::size_t(n) + std::size_t(j)]; };
        const double v = (1.0 - a) * ((1.0 - bj) * at(c, j0) + bj * at(c, j1)) +
                         a * ((1.0 - bj) * at(c + 1, j0) + bj * at(c + 1, j1));
        return std::cos(phi) * cutoff_psi(mu) / (1.0 - mu) * cut * v;
      });
    }
    src.coeff = dcoef;
  }

  // Inflow datum w.grad U0 at the wall: -sin(phi) d_r U0 - cos(phi) d_theta U0 / r.
  auto datum = [&](std::size_t k, int m) -> MilneDatum {
    const BoundaryGradient gr = gradient_at_boundary(U0, t[k], B0.theta(m));
    return [gr](double phi) { return -std::sin(phi) * gr.dr - std::cos(phi) * gr.dtheta; };
  };
  auto B1 = std::make_shared<const LayerFamily>(detail::build_family(
      eps, b.kind, t, nth, datum, src.sources.empty() ? nullptr : &src, cfg.layer));
  auto I1 = std::make_shared<const InitialLayer1>(b.initial0);

  HeatProblem hp;
  hp.initial = [I1](DiskPoint x) { return I1->far_value(x); };
  hp.dirichlet = [B1](double tt, double theta) { return B1->f_inf(tt, theta); };
  hp.T = U0.grid().t.back();
  hp.diffusivity = b.diffusivity;
  hp.check_corner = false;
  b.interior1 = std::make_shared<const ScalarFieldTime>(solve_heat_disk(hp, U0.grid()));
  b.boundary1 = std::move(B1);
  b.initial1 = std::move(I1);
  b.order = 1;
}

/// Builds the bundle of the requested order and kind.
inline ExpansionBundle build_expansion(const ExpansionConfig& cfg) {
  if (!(cfg.eps > 0.0 && cfg.eps < 1.0)) throw ConfigurationError("expansion: eps must lie in (0, 1)");
  if (cfg.order != 0 && cfg.order != 1) throw ConfigurationError("expansion: order must be 0 or 1");
  cfg.grid.validate();
  ExpansionBundle b;
  b.eps = cfg.eps;
  b.kind = cfg.kind;
  b.diffusivity = cfg.diffusivity;
  b.initial0 = std::make_shared<const InitialLayer0>(cfg.h, cfg.layer.n_phi);
  b.boundary0 = std::make_shared<const LayerFamily>(
      build_boundary_layer0(cfg.eps, cfg.g, cfg.kind, cfg.grid.t, cfg.grid.n_theta, cfg.layer));
  b.interior0 = std::make_shared<const ScalarFieldTime>(
      build_interior0(*b.initial0, *b.boundary0, cfg.grid, cfg.diffusivity));
  if (cfg.order == 1) build_order1(b, cfg);
  return b;
}

/// Gradient of an interior field at x, by central differences of its
/// interpolant one cell wide.
inline Direction interior_gradient(const ScalarFieldTime& u, double t, DiskPoint x) {
  const double h = 1e-3;
  auto f = [&](DiskPoint y) {
    const double r = y.radius();
    if (r > 1.0) y = {y.x1 / r, y.x2 / r};
    return u.value(t, y);
  };
  return numeric_gradient(f, x, h);
}

/// Components of the expansion at one phase point.
struct ExpansionTerms {
  double interior = 0.0;
  double initial = 0.0;
  double boundary = 0.0;
  double total() const { return interior + initial + boundary; }
};

inline ExpansionTerms expansion_terms(const ExpansionBundle& b, double t, DiskPoint x, VelocityAngle w) {
  if (!x.inside()) throw DomainError("expansion: point outside the unit disk");
  const double eps = b.eps;
  const double tau = t / (eps * eps);
  const LayerPoint lp = to_layer_frame(x, w, eps);
  ExpansionTerms out;
  out.interior = b.interior0->value(t, x);
  out.initial = b.initial0->value(tau, x, w);
  out.boundary = b.boundary0->layer(t, lp.eta, lp.theta, lp.phi);
  if (b.order >= 1) {
    const Direction g = interior_gradient(*b.interior0, t, x);
    const Direction wd = w.direction();
    out.interior += eps * (b.interior1->value(t, x) - (wd.w1 * g.w1 + wd.w2 * g.w2));
    out.initial += eps * b.initial1->value(tau, x, w);
    out.boundary += eps * b.boundary1->layer(t, lp.eta, lp.theta, lp.phi);
  }
  return out;
}

/// Value of the expansion at (t, x, w).
inline double evaluate_expansion(const ExpansionBundle& b, double t, DiskPoint x, VelocityAngle w) {
  return expansion_terms(b, t, x, w).total();
}

}  // namespace knudsen
