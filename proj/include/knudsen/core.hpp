#pragma once

// Geometry of the unit disk, angular quadrature, grids and field containers
// shared by the kinetic, layer and heat solvers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "knudsen/errors.hpp"

namespace knudsen {

inline constexpr double kPi = std::numbers::pi;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

/// Absolute tolerance for boundary membership on the unit circle.
inline constexpr double kBoundaryTol = 1e-12;

/// Wraps an angle into [-pi, pi).
inline double wrap_angle(double a) {
  double r = std::fmod(a + kPi, kTwoPi);
  if (r < 0.0) r += kTwoPi;
  r -= kPi;
  // fmod can land exactly on +pi after the shift for inputs like 3*pi.
  if (r >= kPi) r -= kTwoPi;
  return r;
}

/// Knudsen number, 0 < value < 1.
class Epsilon {
 public:
  explicit Epsilon(double value) : value_(value) {
    if (!(value > 0.0 && value < 1.0)) {
      throw DomainError("Knudsen number must lie in (0, 1), got " + std::to_string(value));
    }
  }
  double value() const noexcept { return value_; }
  operator double() const noexcept { return value_; }  // NOLINT(google-explicit-constructor)

 private:
  double value_;
};

/// Unit-length velocity in Cartesian components.
struct Direction {
  double w1 = 0.0;
  double w2 = 0.0;
};

/// Velocity angle xi with w = (-sin xi, -cos xi).
struct VelocityAngle {
  double xi = 0.0;

  Direction direction() const { return {-std::sin(xi), -std::cos(xi)}; }
  /// Rotated angle phi = theta + xi, wrapped.
  double phi(double theta) const { return wrap_angle(theta + xi); }

  static VelocityAngle from_direction(Direction w) {
    // w1 = -sin xi, w2 = -cos xi  =>  xi = atan2(-w1, -w2)
    return {wrap_angle(std::atan2(-w.w1, -w.w2))};
  }
  static VelocityAngle from_phi(double phi, double theta) { return {wrap_angle(phi - theta)}; }
};

/// Point of the closed unit disk.
struct DiskPoint {
  double x1 = 0.0;
  double x2 = 0.0;

  static DiskPoint from_polar(double r, double theta) {
    return {r * std::cos(theta), r * std::sin(theta)};
  }
  double radius() const { return std::hypot(x1, x2); }
  /// Distance to the boundary.
  double mu() const { return 1.0 - radius(); }
  double theta() const { return wrap_angle(std::atan2(x2, x1)); }
  bool inside() const { return radius() <= 1.0 + kBoundaryTol; }
};

inline double dot(DiskPoint x, Direction w) { return x.x1 * w.w1 + x.x2 * w.w2; }

/// Backward exit time: the smallest s >= 0 such that x - eps*s*w lies on the
/// inflow part of the boundary (or the grazing set).
inline double exit_time(DiskPoint x, Direction w, double eps) {
  const double r2 = x.x1 * x.x1 + x.x2 * x.x2;
  if (r2 > (1.0 + kBoundaryTol) * (1.0 + kBoundaryTol)) {
    throw DomainError("exit_time: point outside the unit disk");
  }
  const double b = dot(x, w);
  const double c = std::max(0.0, 1.0 - r2);
  const double root = std::sqrt(b * b + c);
  // Larger root of eps^2 s^2 - 2 eps b s - c = 0, written without cancellation.
  const double s = b >= 0.0 ? (b + root) : c / (root - b);
  return s / eps;
}

enum class BoundaryClass { inflow, outflow, grazing };

inline const char* to_string(BoundaryClass c) {
  switch (c) {
    case BoundaryClass::inflow: return "inflow";
    case BoundaryClass::outflow: return "outflow";
    case BoundaryClass::grazing: return "grazing";
  }
  return "?";
}

inline BoundaryClass classify_boundary(DiskPoint x0, Direction w) {
  if (std::abs(x0.radius() - 1.0) > kBoundaryTol) {
    throw DomainError("classify_boundary: point is not on the unit circle");
  }
  const double wn = dot(x0, w);  // outward normal of the unit disk is x0
  if (std::abs(wn) < kBoundaryTol) return BoundaryClass::grazing;
  return wn < 0.0 ? BoundaryClass::inflow : BoundaryClass::outflow;
}

/// Midpoint-offset equispaced quadrature on the circle.
class AngularGrid {
 public:
  explicit AngularGrid(int n) : n_(n) {
    if (n < 2) throw ConfigurationError("AngularGrid needs at least 2 nodes");
    nodes_.resize(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) nodes_[static_cast<std::size_t>(j)] = -kPi + (j + 0.5) * spacing();
  }

  int size() const noexcept { return n_; }
  double spacing() const noexcept { return kTwoPi / n_; }
  double weight() const noexcept { return spacing(); }
  double node(int j) const { return nodes_[static_cast<std::size_t>(j)]; }
  std::span<const double> nodes() const noexcept { return nodes_; }

  /// Fractional position of an arbitrary angle: node index j0 and weight a so
  /// that the angle lies between node j0 and j0+1 (periodic).
  std::pair<int, double> locate(double angle) const {
    const double s = (wrap_angle(angle) + kPi) / spacing() - 0.5;
    double fl = std::floor(s);
    double a = s - fl;
    int j0 = static_cast<int>(fl);
    j0 = ((j0 % n_) + n_) % n_;
    return {j0, a};
  }

 private:
  int n_;
  std::vector<double> nodes_;
};

/// (1/2pi) * sum_j weight_j u_j, summed in index order.
inline double velocity_average(const AngularGrid& grid, std::span<const double> slice) {
  if (slice.empty()) throw DomainError("velocity_average: empty slice");
  if (static_cast<int>(slice.size()) != grid.size()) {
    throw DomainError("velocity_average: slice length does not match the angular grid");
  }
  double sum = 0.0;
  for (double v : slice) sum += v;
  return sum * grid.weight() / kTwoPi;
}

/// Distances from a refined end: 0, h_min, h_min(1+q), ... growing by `ratio`
/// until the spacing reaches h_max, then uniform, ending exactly at `length`.
inline std::vector<double> refined_offsets(double length, double h_min, double h_max, double ratio) {
  if (!(length > 0.0 && h_min > 0.0 && h_max >= h_min)) {
    throw ConfigurationError("refined_offsets: need length > 0 and 0 < h_min <= h_max");
  }
  if (!(ratio >= 1.0 && ratio <= 2.0)) throw ConfigurationError("refinement ratio must lie in [1, 2]");
  std::vector<double> d{0.0};
  double h = h_min;
  while (d.back() + h < length) {
    d.push_back(d.back() + h);
    h = std::min(h * ratio, h_max);
  }
  // Merge a short final interval into its neighbour so spacings stay graded.
  if (d.size() > 1 && length - d.back() < 0.5 * (d.back() - d[d.size() - 2])) d.pop_back();
  d.push_back(length);
  return d;
}

/// Index i such that nodes[i] <= x < nodes[i+1], clamped to a valid cell.
inline std::size_t locate_cell(std::span<const double> nodes, double x) {
  auto it = std::upper_bound(nodes.begin(), nodes.end(), x);
  std::size_t i = it == nodes.begin() ? 0 : static_cast<std::size_t>(it - nodes.begin()) - 1;
  return std::min(i, nodes.size() - 2);
}

/// Polar space grid with an explicit time-node list.
///
/// Radial nodes run from 0 to 1 (node 0 is the centre); theta nodes are
/// uniform, theta_m = -pi + m * 2pi / n_theta.
struct SpaceTimeGrid {
  std::vector<double> r;
  int n_theta = 0;
  std::vector<double> t;

  double theta(int m) const { return -kPi + m * (kTwoPi / n_theta); }
  double dtheta() const { return kTwoPi / n_theta; }
  std::size_t n_space() const { return r.size() * static_cast<std::size_t>(n_theta); }

  void validate() const {
    auto increasing = [](const std::vector<double>& v) {
      for (std::size_t i = 1; i < v.size(); ++i)
        if (!(v[i] > v[i - 1])) return false;
      return true;
    };
    if (r.size() < 3 || r.front() != 0.0 || r.back() != 1.0 || !increasing(r)) {
      throw ConfigurationError("radial nodes must increase strictly from 0 to 1 (at least 3 nodes)");
    }
    if (n_theta < 4) throw ConfigurationError("need at least 4 theta nodes");
    if (t.empty() || t.front() != 0.0 || !increasing(t)) {
      throw ConfigurationError("time nodes must start at 0 and increase strictly");
    }
  }
};

/// Bilinear stencil on the polar grid: cell (i0, m0) and fractions (a, b).
struct PolarStencil {
  std::size_t i0 = 0;
  int m0 = 0;
  int m1 = 0;
  double a = 0.0;  // radial fraction
  double b = 0.0;  // angular fraction
};

inline PolarStencil polar_stencil(const SpaceTimeGrid& grid, double r, double theta) {
  PolarStencil s;
  r = std::clamp(r, 0.0, 1.0);
  s.i0 = locate_cell(grid.r, r);
  s.a = (r - grid.r[s.i0]) / (grid.r[s.i0 + 1] - grid.r[s.i0]);
  s.a = std::clamp(s.a, 0.0, 1.0);
  const double pos = (wrap_angle(theta) + kPi) / grid.dtheta();
  double fl = std::floor(pos);
  s.b = pos - fl;
  s.m0 = static_cast<int>(fl) % grid.n_theta;
  if (s.m0 < 0) s.m0 += grid.n_theta;
  s.m1 = (s.m0 + 1) % grid.n_theta;
  return s;
}

/// Bilinear interpolation of a (r, theta) scalar array laid out as [i * n_theta + m].
inline double interpolate_polar(const SpaceTimeGrid& grid, std::span<const double> values, const PolarStencil& s) {
  const std::size_t nt = static_cast<std::size_t>(grid.n_theta);
  const double* lo = values.data() + s.i0 * nt;
  const double* hi = lo + nt;
  const double v0 = (1.0 - s.b) * lo[s.m0] + s.b * lo[s.m1];
  const double v1 = (1.0 - s.b) * hi[s.m0] + s.b * hi[s.m1];
  return (1.0 - s.a) * v0 + s.a * v1;
}

/// Layer-frame coordinates of a phase point.
struct LayerPoint {
  double eta = 0.0;    // (1 - |x|) / eps
  double theta = 0.0;  // space angle
  double phi = 0.0;    // theta + xi
};

inline LayerPoint to_layer_frame(DiskPoint x, VelocityAngle w, double eps) {
  const double theta = x.theta();
  return {x.mu() / eps, theta, w.phi(theta)};
}

inline std::pair<DiskPoint, VelocityAngle> from_layer_frame(const LayerPoint& p, double eps) {
  const double r = 1.0 - eps * p.eta;
  return {DiskPoint::from_polar(r, p.theta), VelocityAngle::from_phi(p.phi, p.theta)};
}

/// Extra phase-space sample attached to a kinetic field.
struct Probe {
  double t = 0.0;
  DiskPoint x;
  VelocityAngle w;
  double value = 0.0;
};

/// Sampled u(t, x, w) on time x radius x theta x velocity-angle nodes.
///
/// The velocity index refers to the absolute angle xi of the AngularGrid.
class KineticField {
 public:
  KineticField(SpaceTimeGrid grid, AngularGrid angles)
      : grid_(std::move(grid)), angles_(std::move(angles)) {
    values_.assign(grid_.t.size() * grid_.n_space() * static_cast<std::size_t>(angles_.size()), 0.0);
  }

  const SpaceTimeGrid& grid() const noexcept { return grid_; }
  const AngularGrid& angles() const noexcept { return angles_; }

  std::size_t index(std::size_t k, std::size_t i, int m, int j) const {
    const std::size_t nphi = static_cast<std::size_t>(angles_.size());
    return ((k * grid_.r.size() + i) * static_cast<std::size_t>(grid_.n_theta) + static_cast<std::size_t>(m)) * nphi +
           static_cast<std::size_t>(j);
  }
  double& at(std::size_t k, std::size_t i, int m, int j) { return values_[index(k, i, m, j)]; }
  double at(std::size_t k, std::size_t i, int m, int j) const { return values_[index(k, i, m, j)]; }

  /// Velocity slice at one space-time node.
  std::span<const double> slice(std::size_t k, std::size_t i, int m) const {
    return {values_.data() + index(k, i, m, 0), static_cast<std::size_t>(angles_.size())};
  }
  std::span<double> slice(std::size_t k, std::size_t i, int m) {
    return {values_.data() + index(k, i, m, 0), static_cast<std::size_t>(angles_.size())};
  }
  /// All phase values at time level k, laid out as [(i*n_theta + m)*n_phi + j].
  std::span<const double> level(std::size_t k) const {
    const std::size_t n = grid_.n_space() * static_cast<std::size_t>(angles_.size());
    return {values_.data() + k * n, n};
  }
  std::span<double> level(std::size_t k) {
    const std::size_t n = grid_.n_space() * static_cast<std::size_t>(angles_.size());
    return {values_.data() + k * n, n};
  }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }

  std::vector<Probe>& probes() noexcept { return probes_; }
  const std::vector<Probe>& probes() const noexcept { return probes_; }

  /// Angular average at one space-time node.
  double average(std::size_t k, std::size_t i, int m) const { return velocity_average(angles_, slice(k, i, m)); }

 private:
  SpaceTimeGrid grid_;
  AngularGrid angles_;
  std::vector<double> values_;
  std::vector<Probe> probes_;
};

/// Worker count from the KNUDSEN_THREADS environment variable, else 1.
inline int default_thread_count() {
  if (const char* env = std::getenv("KNUDSEN_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  return 1;
}

/// Splits [0, n) into contiguous chunks, one per worker. Each index is
/// handled by exactly one worker, so per-index results do not depend on the
/// thread count.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t lo = n * w / workers;
    const std::size_t hi = n * (w + 1) / workers;
    pool.emplace_back([lo, hi, &fn] {
      for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace knudsen
