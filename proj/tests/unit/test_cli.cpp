#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cli.hpp"

using namespace knudsen;
using namespace knudsen::cli;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("knudsen_cli_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string first_line(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

std::string usage_message(const std::vector<std::string>& args) {
  try {
    parse_config(args);
  } catch (const UsageError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(CliParse, ConvergeWithEpsList) {
  const RunConfig c = parse_config({"converge", "--epsilons", "0.2,0.1,0.05", "--kind", "geometric"});
  EXPECT_EQ(c.subcommand, "converge");
  ASSERT_EQ(c.epsilons.size(), 3u);
  EXPECT_DOUBLE_EQ(c.epsilons[2], 0.05);
  EXPECT_EQ(c.kind, "geometric");
}

TEST(CliParse, Counterexample) {
  const RunConfig c = parse_config({"counterexample", "--n", "1", "--epsilons", "0.04,0.02,0.01"});
  EXPECT_EQ(c.subcommand, "counterexample");
  EXPECT_DOUBLE_EQ(c.n, 1.0);
  EXPECT_EQ(c.epsilons, (std::vector<double>{0.04, 0.02, 0.01}));
}

TEST(CliParse, FlagOverridesFile) {
  const auto dir = scratch_dir("override");
  const auto cfg = dir / "cfg.json";
  std::ofstream(cfg) << R"({"n_phi": 64, "epsilon": 0.1})";
  const RunConfig c = parse_config({"milne", "--config", cfg.string(), "--n-phi", "128"});
  EXPECT_EQ(c.n_phi, 128);
  EXPECT_DOUBLE_EQ(c.epsilon, 0.1);
}

TEST(CliParse, UnknownFileKeyRejected) {
  const auto dir = scratch_dir("unknown");
  const auto cfg = dir / "cfg.json";
  std::ofstream(cfg) << R"({"n_phy": 64})";
  EXPECT_NE(usage_message({"milne", "--config", cfg.string()}).find("n_phy"), std::string::npos);
}

TEST(CliParse, MalformedValuesNameTheKey) {
  EXPECT_NE(usage_message({"milne", "--n-phi", "abc"}).find("'n_phi'"), std::string::npos);
  EXPECT_NE(usage_message({"milne", "--epsilon", "-0.1"}).find("'epsilon'"), std::string::npos);
  EXPECT_NE(usage_message({"converge", "--epsilons", "0.1,0.2"}).find("'epsilons'"), std::string::npos);
  EXPECT_NE(usage_message({"milne", "--force", "strong"}).find("'force'"), std::string::npos);
  EXPECT_NE(usage_message({"milne", "--datum", "constant:x"}).find("'datum'"), std::string::npos);
  const auto dir = scratch_dir("types");
  const auto cfg = dir / "cfg.json";
  std::ofstream(cfg) << R"({"n_phi": "many"})";
  EXPECT_NE(usage_message({"milne", "--config", cfg.string()}).find("'n_phi'"), std::string::npos);
}

TEST(CliParse, SubcommandRequired) {
  EXPECT_THROW(parse_config({}), UsageError);
  EXPECT_THROW(parse_config({"solve"}), UsageError);
}

TEST(CliParse, JsonRoundTrip) {
  RunConfig c = parse_config({"expand", "--epsilon", "0.125", "--order", "1", "--datum", "custom", "--g",
                              "t*cos(phi)", "--h", "0", "--epsilons", "0.3,0.1"});
  const json j = to_json(c);
  RunConfig back;
  apply_json(back, json::parse(j.dump()));
  EXPECT_EQ(back, c);
}

TEST(CliFormat, ShortestRoundTrip) {
  for (double x : {0.1, 1.0 / 3.0, 2.0, 1e-300, -0.05, 6.02214076e23}) {
    const std::string s = format_number(x);
    EXPECT_EQ(std::stod(s), x) << s;
  }
  EXPECT_EQ(format_number(0.1), "0.1");
  EXPECT_EQ(format_number(2.0), "2");
}

TEST(CliExpression, EvaluatesArithmetic) {
  const Expression e = Expression::compile("t^2*exp(-t)*cos(phi) + 2*-1 + max(theta, 3)/3", {"t", "theta", "phi"});
  const double v[] = {1.5, 0.3, 0.7};
  EXPECT_NEAR(e(v), 2.25 * std::exp(-1.5) * std::cos(0.7) - 2.0 + 1.0, 1e-15);
  const Expression p = Expression::compile("-2^2 + pi - e", {});
  EXPECT_NEAR(p(std::span<const double>{}), -4.0 + std::acos(-1.0) - std::exp(1.0), 1e-15);
}

TEST(CliExpression, ReportsErrors) {
  EXPECT_THROW(Expression::compile("cos(", {"t"}), ExpressionError);
  EXPECT_THROW(Expression::compile("foo(t)", {"t"}), ExpressionError);
  EXPECT_THROW(Expression::compile("t + s", {"t"}), ExpressionError);
  EXPECT_THROW(Expression::compile("2 3", {}), ExpressionError);
  EXPECT_THROW(Expression::compile("pow(2)", {}), ExpressionError);
}

TEST(CliData, CustomDatumMatchesBuiltIn) {
  RunConfig c;
  c.datum = "custom";
  c.g = "t^2*exp(-t)*cos(phi)";
  const StudyData d = make_datum(c);
  const StudyData ref = test_datum();
  for (double t : {0.0, 0.3, 1.0})
    for (double phi : {-2.0, 0.1, 1.4}) EXPECT_NEAR(d.g(t, 0.5, phi), ref.g(t, 0.5, phi), 1e-15);
  EXPECT_EQ(d.h(DiskPoint{0.1, 0.2}, VelocityAngle{0.3}), 0.0);
}

TEST(CliRun, MilneProfileAndManifest) {
  const auto dir = scratch_dir("milne");
  RunConfig c = parse_config({"milne", "--epsilon", "0.1", "--force", "none", "--n-phi", "16", "--deta", "0.1",
                              "--eta-max", "20", "--output", dir.string()});
  run(c);
  EXPECT_EQ(first_line(dir / "milne_profile.csv"), "eta,phi,f,fbar,flux");
  const json m = json::parse(read_file(dir / "milne_profile.manifest.json"));
  for (const char* key : {"inputs", "grid", "versions", "wall_seconds"}) EXPECT_TRUE(m.contains(key)) << key;
  RunConfig back;
  apply_json(back, m.at("inputs"));
  EXPECT_EQ(back, c);
  // The manifest inputs are themselves a valid configuration file.
  const auto cfg = dir / "again.json";
  std::ofstream(cfg) << m.at("inputs").dump();
  EXPECT_EQ(parse_config({"milne", "--config", cfg.string()}), c);
  // The manifest is written before its artifact.
  EXPECT_LE(std::filesystem::last_write_time(dir / "milne_profile.manifest.json"),
            std::filesystem::last_write_time(dir / "milne_profile.csv"));
}

TEST(CliRun, RerunIsByteIdentical) {
  const auto a = scratch_dir("rerun_a");
  const auto b = scratch_dir("rerun_b");
  for (const auto& dir : {a, b})
    run(parse_config({"counterexample", "--n", "1", "--epsilons", "0.08,0.04", "--n-phi", "16", "--output",
                      dir.string(), "--threads", "2"}));
  EXPECT_EQ(first_line(a / "gap.csv"), "epsilon,n,u_classical,u_geometric,pred_classical,pred_geometric,gap");
  EXPECT_EQ(read_file(a / "gap.csv"), read_file(b / "gap.csv"));
}

TEST(CliRun, ConvergeSchema) {
  const auto dir = scratch_dir("converge");
  run(parse_config({"converge", "--epsilons", "0.4,0.3", "--datum", "constant:1.25", "--kind", "classical",
                    "--n-phi", "8", "--t-final", "0.1", "--dr-max", "0.2", "--eta-max", "20", "--deta", "0.2",
                    "--output", dir.string()}));
  std::ifstream in(dir / "converge.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "epsilon,kind,order,error_linf,grid_id");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    EXPECT_NE(line.find(",classical,0,"), std::string::npos) << line;
  }
  EXPECT_EQ(rows, 2);
}

TEST(CliRun, IncompatibleDataIsAValidationError) {
  RunConfig c = parse_config({"transport", "--datum", "custom", "--g", "cos(phi)", "--h", "0"});
  try {
    run(c);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("compatibility"), std::string::npos);
    EXPECT_EQ(exit_code(e), 3);
    const json msg = json::parse(error_message(e, c.subcommand));
    EXPECT_EQ(msg.at("category"), "validation");
    EXPECT_EQ(msg.at("subcommand"), "transport");
  }
}
