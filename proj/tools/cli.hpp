#pragma once

// Command-line front end: run configuration from a JSON file and flags,
// datum selection, and the five subcommands with their CSV and manifest
// outputs.

#include <CLI11.hpp>
#include <Eigen/Core>
#include <boost/version.hpp>
#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include "expression.hpp"
#include "knudsen/experiments.hpp"
#include "knudsen/layers.hpp"
#include "knudsen/milne.hpp"
#include "knudsen/transport.hpp"

#ifndef KNUDSEN_VERSION
#define KNUDSEN_VERSION "0.0.0"
#endif

namespace knudsen::cli {

using json = nlohmann::ordered_json;

/// Malformed command line or configuration file; the message names the key.
class UsageError : public Error {
 public:
  using Error::Error;
};

/// Help or version text was requested; not an error.
class HelpRequested : public std::exception {
 public:
  HelpRequested(std::string text, int code) : text_(std::move(text)), code_(code) {}
  const char* what() const noexcept override { return text_.c_str(); }
  int exit_code() const noexcept { return code_; }

 private:
  std::string text_;
  int code_;
};

inline const std::vector<std::string>& subcommands() {
  static const std::vector<std::string> names{"transport", "milne", "expand", "converge", "counterexample"};
  return names;
}

/// Everything a run needs. Zero in n_theta, eta_max, max_iter and threads
/// selects the automatic value; an empty eps list selects the default list
/// of the subcommand.
struct RunConfig {
  std::string subcommand;
  double epsilon = 0.05;
  std::vector<double> epsilons;
  std::string kind = "both";        // geometric | classical | both
  std::string force = "geometric";  // geometric | none
  int order = 0;
  double n = 1.0;
  double t_final = 1.0;
  double lambda = 0.0;
  int n_phi = 64;
  int n_theta = 0;
  double deta = 0.02;
  double eta_max = 0.0;
  double dr_max = 0.05;
  double dt_max = 0.05;
  double dtau = 0.25;
  std::string datum = "counterexample";  // counterexample | constant:<c> | custom
  std::string g;                         // custom g(t, theta, phi)
  std::string h;                         // custom h(x1, x2, r, theta, xi, phi)
  double tol = 1e-12;
  int max_iter = 0;
  std::string output = ".";
  int threads = 0;

  bool operator==(const RunConfig&) const = default;
};

// ---------------------------------------------------------------------------
// Number formatting

/// Shortest decimal text that parses back to the same double.
inline std::string format_number(double x) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

inline std::string format_number(int x) { return std::to_string(x); }

// ---------------------------------------------------------------------------
// Field table

namespace detail {

inline double parse_double(const std::string& key, const std::string& text) {
  double x = 0.0;
  const char* b = text.data();
  const char* e = b + text.size();
  const auto res = std::from_chars(b, e, x);
  if (res.ec != std::errc{} || res.ptr != e || !std::isfinite(x))
    throw UsageError("invalid value for '" + key + "': expected a number, got '" + text + "'");
  return x;
}

inline int parse_int(const std::string& key, const std::string& text) {
  int x = 0;
  const char* b = text.data();
  const char* e = b + text.size();
  const auto res = std::from_chars(b, e, x);
  if (res.ec != std::errc{} || res.ptr != e)
    throw UsageError("invalid value for '" + key + "': expected an integer, got '" + text + "'");
  return x;
}

inline std::vector<double> parse_list(const std::string& key, const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_double(key, item));
  if (out.empty()) throw UsageError("invalid value for '" + key + "': empty list");
  return out;
}

template <typename T>
struct Codec;

template <>
struct Codec<double> {
  static double from_text(const std::string& k, const std::string& s) { return parse_double(k, s); }
  static double from_json(const std::string& k, const json& j) {
    if (!j.is_number()) throw UsageError("invalid value for '" + k + "': expected a number");
    return j.get<double>();
  }
  static json to_json(double x) { return x; }
};

template <>
struct Codec<int> {
  static int from_text(const std::string& k, const std::string& s) { return parse_int(k, s); }
  static int from_json(const std::string& k, const json& j) {
    if (!j.is_number_integer()) throw UsageError("invalid value for '" + k + "': expected an integer");
    return j.get<int>();
  }
  static json to_json(int x) { return x; }
};

template <>
struct Codec<std::string> {
  static std::string from_text(const std::string&, const std::string& s) { return s; }
  static std::string from_json(const std::string& k, const json& j) {
    if (!j.is_string()) throw UsageError("invalid value for '" + k + "': expected a string");
    return j.get<std::string>();
  }
  static json to_json(const std::string& x) { return x; }
};

template <>
struct Codec<std::vector<double>> {
  static std::vector<double> from_text(const std::string& k, const std::string& s) { return parse_list(k, s); }
  static std::vector<double> from_json(const std::string& k, const json& j) {
    if (!j.is_array()) throw UsageError("invalid value for '" + k + "': expected an array of numbers");
    std::vector<double> out;
    for (const auto& v : j) out.push_back(Codec<double>::from_json(k, v));
    return out;
  }
  static json to_json(const std::vector<double>& x) { return x; }
};

struct Field {
  std::string key;
  std::string help;
  std::function<void(RunConfig&, const std::string&)> from_text;
  std::function<void(RunConfig&, const json&)> from_json;
  std::function<json(const RunConfig&)> to_json;
};

template <typename T>
Field field(std::string key, T RunConfig::*member, std::string help) {
  Field f;
  f.key = key;
  f.help = std::move(help);
  f.from_text = [key, member](RunConfig& c, const std::string& s) { c.*member = Codec<T>::from_text(key, s); };
  f.from_json = [key, member](RunConfig& c, const json& j) { c.*member = Codec<T>::from_json(key, j); };
  f.to_json = [member](const RunConfig& c) { return Codec<T>::to_json(c.*member); };
  return f;
}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      field("subcommand", &RunConfig::subcommand, "subcommand (set by the command line)"),
      field("epsilon", &RunConfig::epsilon, "Knudsen number for transport, milne and expand"),
      field("epsilons", &RunConfig::epsilons, "strictly decreasing eps list for converge and counterexample"),
      field("kind", &RunConfig::kind, "layer kind: geometric, classical or both"),
      field("force", &RunConfig::force, "milne force: geometric or none"),
      field("order", &RunConfig::order, "expansion order, 0 or 1"),
      field("n", &RunConfig::n, "counterexample depth: the point is (eta, phi) = (n eps, eps)"),
      field("t_final", &RunConfig::t_final, "final time T"),
      field("lambda", &RunConfig::lambda, "penalty lambda >= 0"),
      field("n_phi", &RunConfig::n_phi, "velocity-angle nodes"),
      field("n_theta", &RunConfig::n_theta, "wall-angle nodes of the transport grid (0: n_phi)"),
      field("deta", &RunConfig::deta, "finest eta spacing of layer grids"),
      field("eta_max", &RunConfig::eta_max, "layer truncation depth (0: automatic)"),
      field("dr_max", &RunConfig::dr_max, "coarsest radial spacing of the transport grid"),
      field("dt_max", &RunConfig::dt_max, "largest stored time increment of the transport grid"),
      field("dtau", &RunConfig::dtau, "transport step in fast time t / eps^2"),
      field("datum", &RunConfig::datum, "datum: counterexample, constant:<c> or custom"),
      field("g", &RunConfig::g, "custom boundary datum g(t, theta, phi)"),
      field("h", &RunConfig::h, "custom initial datum h(x1, x2, r, theta, xi, phi)"),
      field("tol", &RunConfig::tol, "fixed-point tolerance"),
      field("max_iter", &RunConfig::max_iter, "iteration cap (0: solver default)"),
      field("output", &RunConfig::output, "output directory"),
      field("threads", &RunConfig::threads, "worker threads (0: KNUDSEN_THREADS or 1)"),
  };
  return table;
}

inline std::string flag_name(const std::string& key) {
  std::string s = key;
  std::replace(s.begin(), s.end(), '_', '-');
  return "--" + s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Configuration

/// Serializes every field; the result is a valid configuration file.
inline json to_json(const RunConfig& c) {
  json j = json::object();
  for (const auto& f : detail::fields()) j[f.key] = f.to_json(c);
  return j;
}

/// Applies the keys of a configuration object; unknown keys are rejected.
inline void apply_json(RunConfig& c, const json& j) {
  if (!j.is_object()) throw UsageError("configuration must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto& fs = detail::fields();
    const auto it = std::find_if(fs.begin(), fs.end(), [&](const detail::Field& f) { return f.key == key; });
    if (it == fs.end()) throw UsageError("unknown configuration key '" + key + "'");
    it->from_json(c, value);
  }
}

inline RunConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open configuration file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw UsageError("configuration file '" + path + "' is not valid JSON: " + e.what());
  }
  RunConfig c;
  apply_json(c, j);
  return c;
}

inline void validate(const RunConfig& c) {
  auto positive = [](const char* key, double v) {
    if (!(v > 0.0)) throw UsageError(std::string("invalid value for '") + key + "': must be positive");
  };
  auto nonnegative = [](const char* key, double v) {
    if (!(v >= 0.0)) throw UsageError(std::string("invalid value for '") + key + "': must be nonnegative");
  };
  const auto& names = subcommands();
  if (std::find(names.begin(), names.end(), c.subcommand) == names.end())
    throw UsageError("invalid value for 'subcommand': '" + c.subcommand + "'");
  positive("epsilon", c.epsilon);
  if (c.epsilon >= 1.0) throw UsageError("invalid value for 'epsilon': must be below 1");
  for (std::size_t i = 0; i < c.epsilons.size(); ++i) {
    positive("epsilons", c.epsilons[i]);
    if (c.epsilons[i] >= 1.0) throw UsageError("invalid value for 'epsilons': entries must be below 1");
    if (i > 0 && !(c.epsilons[i] < c.epsilons[i - 1]))
      throw UsageError("invalid value for 'epsilons': list must be strictly decreasing");
  }
  if (c.kind != "geometric" && c.kind != "classical" && c.kind != "both")
    throw UsageError("invalid value for 'kind': expected geometric, classical or both");
  if (c.force != "geometric" && c.force != "none")
    throw UsageError("invalid value for 'force': expected geometric or none");
  if (c.order != 0 && c.order != 1) throw UsageError("invalid value for 'order': expected 0 or 1");
  nonnegative("n", c.n);
  positive("t_final", c.t_final);
  nonnegative("lambda", c.lambda);
  positive("n_phi", c.n_phi);
  nonnegative("n_theta", c.n_theta);
  positive("deta", c.deta);
  nonnegative("eta_max", c.eta_max);
  positive("dr_max", c.dr_max);
  positive("dt_max", c.dt_max);
  positive("dtau", c.dtau);
  positive("tol", c.tol);
  nonnegative("max_iter", c.max_iter);
  nonnegative("threads", c.threads);
  if (c.datum != "counterexample" && c.datum != "custom" && c.datum.rfind("constant:", 0) != 0)
    throw UsageError("invalid value for 'datum': expected counterexample, constant:<c> or custom");
  if (c.datum.rfind("constant:", 0) == 0) detail::parse_double("datum", c.datum.substr(9));
  if (c.datum == "custom" && c.g.empty()) throw UsageError("invalid value for 'g': custom datum needs g");
}

/// Builds the run configuration from command-line arguments (without the
/// program name). Values from --config are read first; flags override them.
inline RunConfig parse_config(const std::vector<std::string>& args) {
  CLI::App app{"Kinetic transport in the unit disk: solvers and asymptotic experiments", "knudsen"};
  app.set_version_flag("--version", KNUDSEN_VERSION);
  app.set_help_flag("--help", "print this help and exit");  // -h is free for the initial datum
  std::string config_path;
  app.add_option("--config", config_path, "JSON configuration file; flags override its values");
  std::map<std::string, std::string> text;
  std::map<std::string, CLI::Option*> opts;
  for (const auto& f : detail::fields()) {
    if (f.key == "subcommand") continue;
    opts[f.key] = app.add_option(detail::flag_name(f.key), text[f.key], f.help);
  }
  const std::map<std::string, std::string> about{
      {"transport", "solve the kinetic problem and export field slices"},
      {"milne", "solve one layer problem and export its profile"},
      {"expand", "build the asymptotic expansion and export its components"},
      {"converge", "convergence study of the expansion over eps"},
      {"counterexample", "layer values at (n eps, eps) against closed-form predictions"},
  };
  for (const auto& name : subcommands()) app.add_subcommand(name, about.at(name))->fallthrough();
  app.require_subcommand(1);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    throw HelpRequested(app.help(), 0);
  } catch (const CLI::CallForAllHelp&) {
    throw HelpRequested(app.help("", CLI::AppFormatMode::All), 0);
  } catch (const CLI::CallForVersion&) {
    throw HelpRequested(KNUDSEN_VERSION "\n", 0);
  } catch (const CLI::ParseError& e) {
    throw UsageError(std::string("command line: ") + e.what());
  }

  RunConfig c = config_path.empty() ? RunConfig{} : load_config_file(config_path);
  for (const auto& f : detail::fields())
    if (f.key != "subcommand" && opts.at(f.key)->count() > 0) f.from_text(c, text.at(f.key));
  c.subcommand = app.get_subcommands().front()->get_name();
  validate(c);
  return c;
}

// ---------------------------------------------------------------------------
// Data

inline StudyData make_datum(const RunConfig& c) {
  if (c.datum == "counterexample") return test_datum();
  if (c.datum.rfind("constant:", 0) == 0) return constant_datum(detail::parse_double("datum", c.datum.substr(9)));
  StudyData d;
  d.name = "custom";
  try {
    auto g = std::make_shared<const Expression>(Expression::compile(c.g, {"t", "theta", "phi"}));
    d.g = [g](double t, double theta, double phi) {
      const double v[] = {t, theta, phi};
      return (*g)(v);
    };
    if (c.h.empty()) {
      d.h = [](DiskPoint, VelocityAngle) { return 0.0; };
    } else {
      auto h = std::make_shared<const Expression>(Expression::compile(c.h, {"x1", "x2", "r", "theta", "xi", "phi"}));
      d.h = [h](DiskPoint x, VelocityAngle w) {
        const double theta = x.theta();
        const double v[] = {x.x1, x.x2, x.radius(), theta, w.xi, w.phi(theta)};
        return (*h)(v);
      };
    }
  } catch (const ExpressionError& e) {
    throw UsageError(std::string("invalid value for 'g' or 'h': ") + e.what());
  }
  return d;
}

/// Layer datum H(phi) of the milne subcommand: the boundary datum at t = 1,
/// theta = 0.
inline MilneDatum milne_datum(const RunConfig& c) {
  if (c.datum == "counterexample") return counterexample_datum;
  const StudyData d = make_datum(c);
  return [g = d.g](double phi) { return g(1.0, 0.0, phi); };
}

/// Checks the compatibility of h with g(0) before any solve, so that the
/// error names the condition rather than the failing run.
inline void check_compatibility(const StudyData& d, double eps, double T) {
  TransportProblem p;
  p.eps = eps;
  p.g = d.g;
  p.h = d.h;
  p.T = T;
  validate_compatibility(p, false);
}

inline LayerKind parse_kind(const std::string& s) {
  return s == "classical" ? LayerKind::classical : LayerKind::geometric;
}

inline std::vector<LayerKind> kinds(const RunConfig& c) {
  if (c.kind == "both") return {LayerKind::geometric, LayerKind::classical};
  return {parse_kind(c.kind)};
}

inline int thread_count(const RunConfig& c) { return c.threads > 0 ? c.threads : default_thread_count(); }

inline std::vector<double> layer_nodes(const RunConfig& c, double eps) {
  return c.eta_max > 0.0 ? milne_eta_nodes(c.eta_max, c.deta) : layer_eta_nodes(eps, c.deta);
}

inline TransportOptions transport_options(const RunConfig& c) {
  TransportOptions o;
  o.dtau = c.dtau;
  o.tol = c.tol;
  if (c.max_iter > 0) o.max_iter = c.max_iter;
  o.threads = thread_count(c);
  return o;
}

inline TransportGridSpec transport_grid_spec(const RunConfig& c) {
  TransportGridSpec s;
  s.n_phi = c.n_phi;
  s.n_theta = c.n_theta;
  s.dr_max = c.dr_max;
  s.dt_max = c.dt_max;
  return s;
}

inline MilneOptions milne_options(const RunConfig& c) {
  MilneOptions o;
  o.tol = c.tol;
  if (c.max_iter > 0) o.max_iter = c.max_iter;
  o.threads = thread_count(c);
  return o;
}

// ---------------------------------------------------------------------------
// Output

/// CSV writer with shortest round-trip numbers.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::string& header) : out_(path, std::ios::binary), path_(path) {
    if (!out_) throw Error("cannot write '" + path.string() + "'");
    out_ << header << '\n';
  }

  template <typename... Cells>
  void row(const Cells&... cells) {
    bool first = true;
    ((out_ << (first ? "" : ",") << cell(cells), first = false), ...);
    out_ << '\n';
  }

  void close() {
    out_.close();
    if (!out_) throw Error("write to '" + path_.string() + "' failed");
  }

 private:
  static std::string cell(double x) { return format_number(x); }
  static std::string cell(int x) { return std::to_string(x); }
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }

  std::ofstream out_;
  std::filesystem::path path_;
};

inline json versions() {
  json v = json::object();
  v["knudsen"] = KNUDSEN_VERSION;
  v["compiler"] = __VERSION__;
  v["cxx_standard"] = static_cast<long>(__cplusplus);
  v["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  v["boost"] = BOOST_LIB_VERSION;
  v["nlohmann_json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                       std::to_string(NLOHMANN_JSON_VERSION_PATCH);
  v["cli11"] = CLI11_VERSION;
  return v;
}

inline json grid_json(const SpaceTimeGrid& g) {
  json j = json::object();
  j["n_r"] = g.r.size();
  j["r_min_spacing"] = g.r.size() > 1 ? g.r.back() - g.r[g.r.size() - 2] : 0.0;
  j["n_theta"] = g.n_theta;
  j["n_t"] = g.t.size();
  j["t_final"] = g.t.back();
  return j;
}

inline json eta_json(const std::vector<double>& nodes, int n_phi) {
  json j = json::object();
  j["n_eta"] = nodes.size();
  j["eta_max"] = nodes.back();
  j["deta_min"] = nodes.size() > 1 ? nodes[1] - nodes[0] : 0.0;
  j["n_phi"] = n_phi;
  return j;
}

/// Writes `<stem>.manifest.json`; called before the artifact it describes.
inline std::filesystem::path write_manifest(const RunConfig& c, const std::string& stem, const json& grid,
                                            const json& results, double wall_seconds) {
  json m = json::object();
  m["artifact"] = stem + ".csv";
  m["inputs"] = to_json(c);
  m["grid"] = grid;
  m["results"] = results;
  m["versions"] = versions();
  m["wall_seconds"] = wall_seconds;
  const auto path = std::filesystem::path(c.output) / (stem + ".manifest.json");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << m.dump(2) << '\n';
  return path;
}

// ---------------------------------------------------------------------------
// Subcommands

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline std::vector<double> eps_list(const RunConfig& c, std::vector<double> fallback) {
  return c.epsilons.empty() ? fallback : c.epsilons;
}

inline void run_transport(const RunConfig& c) {
  const auto t0 = Clock::now();
  const StudyData d = make_datum(c);
  TransportProblem p;
  p.eps = c.epsilon;
  p.g = d.g;
  p.h = d.h;
  p.T = c.t_final;
  p.lambda = c.lambda;
  const TransportOptions opt = transport_options(c);
  const SpaceTimeGrid grid = make_transport_grid(c.epsilon, c.t_final, transport_grid_spec(c), opt.dtau);
  const AngularGrid angles(c.n_phi);
  auto [field, report] = solve_transport(p, grid, angles, opt);

  json results = json::object();
  results["steps"] = report.steps;
  results["max_residual"] = report.max_residual;
  results["max_contraction"] = report.max_contraction;
  json gj = grid_json(grid);
  gj["n_phi"] = c.n_phi;
  write_manifest(c, "transport_slices", gj, results, seconds_since(t0));

  // Slice through theta = 0 at every stored time.
  const int m = grid.n_theta / 2;
  CsvWriter csv(std::filesystem::path(c.output) / "transport_slices.csv", "t,r,theta,xi,u");
  for (std::size_t k = 0; k < grid.t.size(); ++k)
    for (std::size_t i = 0; i < grid.r.size(); ++i)
      for (int j = 0; j < angles.size(); ++j) csv.row(grid.t[k], grid.r[i], grid.theta(m), angles.node(j), field.at(k, i, m, j));
  csv.close();
}

inline void run_milne(const RunConfig& c) {
  const auto t0 = Clock::now();
  MilneProblem p;
  p.eps = c.epsilon;
  p.force_kind = c.force == "none" ? ForceKind::none : ForceKind::geometric;
  p.H = milne_datum(c);
  p.eta_nodes = layer_nodes(c, c.epsilon);
  p.n_phi = c.n_phi;
  const MilneSolution s = solve_milne(p, milne_options(c));

  json results = json::object();
  results["f_inf"] = s.f_inf();
  results["fbar_wall"] = s.fbar()[0];
  if (s.decay_fit().K0)
    results["decay_K0"] = *s.decay_fit().K0;
  else
    results["decay_K0"] = nullptr;
  results["decay_r_squared"] = s.decay_fit().r_squared;
  results["truncation_warning"] = s.truncation_warning();
  results["iterations"] = s.iterations();
  results["residual"] = s.residual();
  write_manifest(c, "milne_profile", eta_json(p.eta_nodes, c.n_phi), results, seconds_since(t0));

  CsvWriter csv(std::filesystem::path(c.output) / "milne_profile.csv", "eta,phi,f,fbar,flux");
  const auto nodes = s.eta_nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i)
    for (int j = 0; j < s.angles().size(); ++j)
      csv.row(nodes[i], s.angles().node(j), s.at(i, j), s.fbar()[i], s.flux_profile()[i]);
  csv.close();
}

inline void run_expand(const RunConfig& c) {
  const auto t0 = Clock::now();
  const StudyData d = make_datum(c);
  check_compatibility(d, c.epsilon, c.t_final);
  const double eps = c.epsilon;
  const auto ks = kinds(c);
  std::vector<ExpansionBundle> bundles;
  for (LayerKind k : ks) {
    ExpansionConfig cfg;
    cfg.eps = eps;
    cfg.kind = k;
    cfg.order = c.order;
    cfg.g = d.g;
    cfg.h = d.h;
    cfg.grid = make_expansion_grid(c.t_final);
    cfg.layer.eta_nodes = layer_nodes(c, eps);
    cfg.layer.n_phi = c.n_phi;
    cfg.layer.milne = milne_options(c);
    bundles.push_back(build_expansion(cfg));
  }
  json gj = grid_json(bundles.front().interior0->grid());
  gj["layer"] = eta_json(layer_nodes(c, eps), c.n_phi);
  json results = json::object();
  for (std::size_t q = 0; q < ks.size(); ++q) results[std::string("rank_") + to_string(ks[q])] = bundles[q].boundary0->rank();
  write_manifest(c, "expand_components", gj, results, seconds_since(t0));

  CsvWriter csv(std::filesystem::path(c.output) / "expand_components.csv",
                "kind,t,r,theta,xi,interior,initial,boundary,total");
  std::vector<double> radii{0.0, 0.5};
  for (double f : {8.0, 4.0, 2.0, 1.0, 0.5, 0.0})
    if (f * eps < 1.0) radii.push_back(1.0 - f * eps);
  const AngularGrid angles(c.n_phi);
  for (std::size_t q = 0; q < ks.size(); ++q)
    for (double t : {0.25 * c.t_final, 0.5 * c.t_final, c.t_final})
      for (double r : radii)
        for (int j = 0; j < angles.size(); ++j) {
          const VelocityAngle w{angles.node(j)};
          const ExpansionTerms e = expansion_terms(bundles[q], t, DiskPoint::from_polar(r, 0.0), w);
          csv.row(to_string(ks[q]), t, r, 0.0, w.xi, e.interior, e.initial, e.boundary, e.total());
        }
  csv.close();
}

inline void run_converge(const RunConfig& c) {
  const auto t0 = Clock::now();
  const auto eps = eps_list(c, {0.2, 0.1, 0.05});
  ConvergenceOptions o;
  o.data = make_datum(c);
  check_compatibility(o.data, eps.front(), c.t_final);
  o.T = c.t_final;
  o.transport_grid = transport_grid_spec(c);
  o.transport = transport_options(c);
  o.layer.n_phi = c.n_phi;
  o.layer.milne = milne_options(c);
  if (c.eta_max > 0.0) o.layer.eta_nodes = milne_eta_nodes(c.eta_max, c.deta);
  o.layer_deta = c.deta;
  o.threads = thread_count(c);
  const auto ks = kinds(c);
  const auto reports = convergence_study(eps, ks, c.order, o);

  json results = json::array();
  for (const auto& r : reports)
    for (const auto& row : r.rows)
      results.push_back({{"epsilon", row.eps}, {"kind", to_string(row.kind)}, {"error_linf", row.error_linf}});
  json gj = json::object();
  gj["n_phi"] = c.n_phi;
  gj["grid_ids"] = json::array();
  for (const auto& row : reports.front().rows) gj["grid_ids"].push_back(row.grid_id);
  write_manifest(c, "converge", gj, results, seconds_since(t0));

  CsvWriter csv(std::filesystem::path(c.output) / "converge.csv", "epsilon,kind,order,error_linf,grid_id");
  for (const auto& r : reports)
    for (const auto& row : r.rows) csv.row(row.eps, to_string(row.kind), row.order, row.error_linf, row.grid_id);
  csv.close();
}

inline void run_counterexample(const RunConfig& c) {
  const auto t0 = Clock::now();
  const auto eps = eps_list(c, {0.04, 0.02, 0.01});
  GapOptions o;
  if (c.eta_max > 0.0) o.eta_max = c.eta_max;
  o.n_phi = c.n_phi;
  o.milne = milne_options(c);
  const GapReport r = counterexample_gap(c.n, eps, o);

  json results = json::array();
  for (const auto& row : r.rows)
    results.push_back({{"epsilon", row.eps}, {"ubar0_classical", row.ubar0_classical},
                       {"ubar0_geometric", row.ubar0_geometric}});
  json gj = json::object();
  gj["n_phi"] = o.n_phi;
  gj["eta_max"] = o.eta_max;
  gj["min_nodes_in_depth"] = o.min_nodes;
  write_manifest(c, "gap", gj, results, seconds_since(t0));

  CsvWriter csv(std::filesystem::path(c.output) / "gap.csv",
                "epsilon,n,u_classical,u_geometric,pred_classical,pred_geometric,gap");
  for (const auto& row : r.rows)
    csv.row(row.eps, row.n, row.u_classical, row.u_geometric, row.pred_classical, row.pred_geometric, row.gap);
  csv.close();
}

}  // namespace detail

/// Runs the configured subcommand and writes its artifacts.
inline void run(const RunConfig& c) {
  validate(c);
  std::error_code ec;
  std::filesystem::create_directories(c.output, ec);
  if (ec) throw Error("cannot create output directory '" + c.output + "': " + ec.message());
  if (c.subcommand == "transport") return detail::run_transport(c);
  if (c.subcommand == "milne") return detail::run_milne(c);
  if (c.subcommand == "expand") return detail::run_expand(c);
  if (c.subcommand == "converge") return detail::run_converge(c);
  return detail::run_counterexample(c);
}

/// Exit status of an error class.
inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return 2;
  if (dynamic_cast<const ValidationError*>(&e)) return 3;
  if (dynamic_cast<const ConfigurationError*>(&e)) return 4;
  if (dynamic_cast<const Error*>(&e)) return 5;
  return 1;
}

inline std::string error_category(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return "usage";
  if (dynamic_cast<const ValidationError*>(&e)) return "validation";
  if (dynamic_cast<const ConfigurationError*>(&e)) return "configuration";
  if (dynamic_cast<const IterationError*>(&e)) return "iteration";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const DomainError*>(&e)) return "domain";
  if (dynamic_cast<const StudyError*>(&e)) return "study";
  if (dynamic_cast<const Error*>(&e)) return "solver";
  return "internal";
}

/// One-line JSON diagnostic for stderr.
inline std::string error_message(const std::exception& e, const std::string& subcommand) {
  json j = json::object();
  j["status"] = "error";
  j["category"] = error_category(e);
  j["exit_code"] = exit_code(e);
  if (!subcommand.empty()) j["subcommand"] = subcommand;
  if (const auto* s = dynamic_cast<const StudyError*>(&e)) j["epsilon"] = s->eps();
  j["message"] = e.what();
  return j.dump();
}

}  // namespace knudsen::cli
