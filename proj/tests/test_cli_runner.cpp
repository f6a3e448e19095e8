#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "steer/runner.hpp"

using namespace steer;

namespace {

const fs::path kConfigs = STEER_CONFIG_DIR;

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("steer_cli_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string("\"") + STEER_CLI_PATH + "\" " + args + " >/dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

fs::path write_json(const fs::path& dir, const std::string& name, const json& doc) {
  const fs::path p = dir / name;
  std::ofstream(p) << doc.dump(2);
  return p;
}

json quick() { return read_json_file(kConfigs / "quick.json"); }

std::optional<ErrorCode> parse_error(const json& doc) {
  try {
    parse_config(doc);
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

std::string strip_timestamp(const std::string& s) {
  json j = json::parse(s);
  j.erase("timestamp");
  return j.dump();
}

}  // namespace

TEST(Config, ParsesSamples) {
  for (const auto& e : fs::directory_iterator(kConfigs)) {
    json raw = read_json_file(e.path());
    if (raw.contains("sweep")) {
      const SweepPlan p = sweep_plan(raw);
      EXPECT_EQ(p.values.size(), 3u) << e.path();
      continue;
    }
    EXPECT_NO_THROW(parse_config(raw, kConfigs)) << e.path();
  }
}

TEST(Config, UnitsAndConventions) {
  json doc = {{"model", {{"spins", {{{"hyperfine_khz", 37.7}, {"polar_deg", 0.0}}}}, {"t_us", 1.0}}}};
  const ExperimentConfig a = parse_config(doc);
  EXPECT_NEAR(a.ops.b(0, 0).real(), 2 * kPi * 37.7e3 / 2, 1e-6);
  EXPECT_NEAR(a.t, 1e-6, 1e-18);
  EXPECT_NEAR(a.phase, kPi / 2, 1e-15);
  doc["units"] = {{"frequency_convention", "linear"}};
  const ExperimentConfig b = parse_config(doc);
  EXPECT_NEAR(b.ops.b(0, 0).real(), 37.7e3 / 2, 1e-9);
}

TEST(Config, Errors) {
  json doc = quick();
  doc["model"]["typo"] = 1;
  EXPECT_EQ(parse_error(doc), ErrorCode::ConfigError);
  doc = quick();
  doc["run"]["samples"] = "many";
  EXPECT_EQ(parse_error(doc), ErrorCode::ConfigError);
  doc = quick();
  doc.erase("model");
  EXPECT_EQ(parse_error(doc), ErrorCode::ConfigError);
  doc = quick();
  doc["model"]["he_rad_per_us"] = {{0, 1}, {2, 0}};
  EXPECT_TRUE(parse_error(doc).has_value());
  try {
    sweep_plan({{"sweep", {{"key", "run.seed"}, {"values", json::array()}}}});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigError);
    EXPECT_NE(std::string(e.what()).find("sweep.values"), std::string::npos);
  }
}

TEST(Config, ReadJsonReportsLine) {
  const fs::path dir = scratch("badjson");
  std::ofstream(dir / "bad.json") << "{\n  \"model\": {\n    oops\n}\n";
  try {
    read_json_file(dir / "bad.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ConfigError);
    EXPECT_NE(std::string(e.what()).find(":3"), std::string::npos) << e.what();
  }
}

TEST(Config, InitialStates) {
  json doc = {{"model", {{"spins", {{{"hyperfine_khz", {0, 0, 37.7}}}, {{"hyperfine_khz", {0, 0, 29.9}}}}}, {"t_us", 1.0}}}};
  ExperimentConfig c = parse_config(doc);
  EXPECT_LT((initial_state(c) - maximally_mixed(4)).norm(), 1e-15);
  c.run.initial_state = "ud";
  EXPECT_LT((initial_state(c) - basis_projector(4, 1)).norm(), 1e-15);
  c.run.initial_state = "index:3";
  EXPECT_LT((initial_state(c) - basis_projector(4, 3)).norm(), 1e-15);
  c.run.initial_state = "index:4";
  EXPECT_THROW(initial_state(c), Error);
  c.run.initial_state = "up";
  EXPECT_THROW(initial_state(c), Error);
  c.run.initial_state = {{"matrix", {{0.5, 0, 0, 0}, {0, 0.5, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}}}};
  EXPECT_NEAR(initial_state(c)(1, 1).real(), 0.5, 1e-15);
  c.run.initial_state = {{"matrix", {{1.5, 0, 0, 0}, {0, -0.5, 0, 0}, {0, 0, 0, 0}, {0, 0, 0, 0}}}};
  EXPECT_THROW(initial_state(c), Error);
}

TEST(Config, DottedKeysAndHash) {
  json doc = quick();
  set_dotted(doc, "model.larmor_over_a", 0.5);
  EXPECT_EQ(doc["model"]["larmor_over_a"], 0.5);
  set_dotted(doc, "run.extra.deep", 1);
  EXPECT_EQ(doc["run"]["extra"]["deep"], 1);
  EXPECT_THROW(set_dotted(doc, "model..x", 1), Error);

  ExperimentConfig a = parse_config(quick());
  ExperimentConfig b = parse_config(quick());
  b.raw["run"]["threads"] = 8;
  EXPECT_EQ(config_hash(a), config_hash(b));
  apply_overrides(b, RunOverrides{std::uint64_t{99}, std::nullopt});
  EXPECT_NE(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
}

TEST(Commands, SimulateHistogramMass) {
  const ExperimentConfig cfg = parse_config(quick(), kConfigs);
  const Bundle b = cmd_simulate(cfg);
  ASSERT_EQ(b[0].name, "histogram.csv");
  std::istringstream in(b[0].content);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "m,bin_center,count,frequency,density");
  std::map<long, long> mass;
  std::map<long, double> density;
  while (std::getline(in, line)) {
    std::istringstream row(line);
    std::string m, center, count, freq, dens;
    std::getline(row, m, ',');
    std::getline(row, center, ',');
    std::getline(row, count, ',');
    std::getline(row, freq, ',');
    std::getline(row, dens, ',');
    mass[std::stol(m)] += std::stol(count);
    density[std::stol(m)] += std::stod(dens) / 21.0;
  }
  ASSERT_EQ(mass.size(), 3u);
  for (const auto& [m, n] : mass) EXPECT_EQ(n, 2000) << m;
  for (const auto& [m, d] : density) EXPECT_NEAR(d, 1.0, 1e-12) << m;
}

TEST(Commands, StatsMatchesAnalysis) {
  const ExperimentConfig cfg = parse_config(quick(), kConfigs);
  const json doc = json::parse(cmd_stats(cfg)[0].content);
  const ChannelAnalysis a = analyze_channel(cfg.ops, cfg.t, cfg.phase);
  EXPECT_EQ(doc["classification"], to_string(a.classification.steering));
  EXPECT_EQ(doc["reports"].size(), 3u);
  for (const auto& r : doc["reports"]) EXPECT_NEAR(r["weight_sum"].get<double>(), 1.0, 1e-10);
  EXPECT_TRUE(doc["peak_distribution"].contains("skipped"));

  const json spec = json::parse(cmd_spectrum(cfg)[0].content);
  EXPECT_EQ(spec["classification"], to_string(a.classification.steering));
}

TEST(Commands, SweepReportsThreePhenotypes) {
  json raw = read_json_file(kConfigs / "fig2_field_sweep.json");
  raw["run"]["samples"] = 200;
  raw["run"]["m_list"] = {10};
  raw["sweep"]["commands"] = {"spectrum"};
  const auto points = cmd_sweep(raw, kConfigs, {});
  ASSERT_EQ(points.size(), 4u);
  const json index = json::parse(points.back().second[0].content);
  EXPECT_EQ(index["points"][0]["classification"], "Polarization");
  EXPECT_EQ(index["points"][1]["classification"], "MetastablePolarization");
  EXPECT_EQ(index["points"][2]["classification"], "Depolarization");
  EXPECT_EQ(points[1].first, "point_001");
  EXPECT_EQ(points[1].second.back().name, "manifest_spectrum.json");
}

TEST(Cli, ExitCodes) {
  const fs::path dir = scratch("exit");
  EXPECT_EQ(run_cli("--version"), 0);
  EXPECT_EQ(run_cli("simulate"), 2);
  EXPECT_EQ(run_cli("bogus --config x --out y"), 2);
  EXPECT_EQ(run_cli("simulate --config " + (dir / "missing.json").string() + " --out " + dir.string()), 2);

  json bad = quick();
  bad["run"]["unknown"] = true;
  EXPECT_EQ(run_cli("simulate --config " + write_json(dir, "bad.json", bad).string() + " --out " + (dir / "o").string()), 2);

  json big = {{"model", {{"spins", json::array()}, {"t_us", 1.0}}}};
  for (int k = 0; k < 5; ++k) big["model"]["spins"].push_back({{"hyperfine_khz", {0, 0, 10.0 + k}}});
  EXPECT_EQ(run_cli("spectrum --config " + write_json(dir, "big.json", big).string() + " --out " + (dir / "o").string()), 4);

  json empty = quick();
  empty["sweep"] = {{"key", "run.seed"}, {"values", json::array()}};
  const fs::path out = dir / "sweep_out";
  EXPECT_EQ(run_cli("sweep --config " + write_json(dir, "empty.json", empty).string() + " --out " + out.string()), 2);
  EXPECT_FALSE(fs::exists(out));

  EXPECT_EQ(run_cli("simulate --config " + (kConfigs / "fig2_field_sweep.json").string() + " --out " + (dir / "o").string()), 2);
}

TEST(Cli, RerunsAreByteIdentical) {
  const fs::path a = scratch("rerun_a"), b = scratch("rerun_b");
  const std::string cfg = (kConfigs / "quick.json").string();
  for (const char* cmd : {"spectrum", "simulate", "stats"}) {
    ASSERT_EQ(run_cli(std::string(cmd) + " --config " + cfg + " --out " + a.string() + " --threads 1"), 0);
    ASSERT_EQ(run_cli(std::string(cmd) + " --config " + cfg + " --out " + b.string() + " --threads 3"), 0);
    for (const auto& e : fs::directory_iterator(a)) {
      const std::string name = e.path().filename().string();
      if (name == "manifest.json") {
        EXPECT_EQ(strip_timestamp(slurp(e.path())), strip_timestamp(slurp(b / name)));
      } else {
        EXPECT_EQ(slurp(e.path()), slurp(b / name)) << name;
      }
    }
  }
  const json m = json::parse(slurp(a / "manifest.json"));
  EXPECT_EQ(m["command"], "stats");
  EXPECT_EQ(m["seed"], 7);
  EXPECT_EQ(m["frequency_convention"], "angular");

  const fs::path c = scratch("rerun_c");
  ASSERT_EQ(run_cli("simulate --config " + cfg + " --out " + c.string() + " --seed 8"), 0);
  EXPECT_NE(slurp(a / "histogram.csv"), slurp(c / "histogram.csv"));
}

TEST(ExitCode, Mapping) {
  EXPECT_EQ(exit_code(ErrorCode::ConfigError), 2);
  EXPECT_EQ(exit_code(ErrorCode::NegativeRate), 2);
  EXPECT_EQ(exit_code(ErrorCode::TooManySpins), 4);
  EXPECT_EQ(exit_code(ErrorCode::DimensionCap), 4);
  EXPECT_EQ(exit_code(ErrorCode::NotAChannel), 3);
}
