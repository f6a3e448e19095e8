#pragma once

// Batch experiment runner behind the command-line tool: config parsing,
// the spectrum / simulate / stats / sweep commands, and their output files.

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steer/channel.hpp"
#include "steer/error.hpp"
#include "steer/lindblad.hpp"
#include "steer/model.hpp"
#include "steer/statistics.hpp"
#include "steer/trajectory.hpp"

namespace steer {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kVersion = "1.0.0";

enum class FrequencyConvention { Angular, Linear };

enum class FidelityTargets { BEigenstates, FixedPoints };

struct RunSpec {
  std::vector<std::int64_t> m_list{1, 10, 100, 1000};
  std::int64_t samples = 20000;
  std::uint64_t seed = 1;
  int hist_bins = 101;
  std::optional<std::vector<double>> class_edges;
  json initial_state = "maximally_mixed";
  int threads = 1;
  bool check_each_step = false;
  FidelityTargets targets = FidelityTargets::BEigenstates;
  std::int64_t pf_max_m = 4096;  // largest m for which peaks.json carries p(F)
};

struct ExperimentConfig {
  json raw;
  fs::path base_dir;
  FrequencyConvention convention = FrequencyConvention::Angular;
  std::optional<ModelSpec> spec;  // absent for explicit operators
  ModelOperators ops;
  int n_spins = 1;
  double t = 0.0;       // s
  double phase = 0.0;   // rad
  std::optional<NoiseSpec> noise;
  RunSpec run;
};

struct RunOverrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
};

namespace config_detail {

[[noreturn]] inline void fail(const std::string& key, const std::string& msg) {
  throw Error(ErrorCode::ConfigError, key + ": " + msg);
}

inline const json* find(const json& obj, const std::string& key) {
  if (!obj.is_object()) return nullptr;
  const auto it = obj.find(key);
  return it == obj.end() ? nullptr : &*it;
}

inline double number(const json& v, const std::string& key) {
  if (!v.is_number()) fail(key, "expected a number");
  const double x = v.get<double>();
  if (!std::isfinite(x)) fail(key, "must be finite");
  return x;
}

inline double number_or(const json& obj, const std::string& key, const std::string& path, double dflt) {
  const json* v = find(obj, key);
  return v ? number(*v, path + "." + key) : dflt;
}

inline std::int64_t integer(const json& v, const std::string& key) {
  if (!v.is_number_integer() && !v.is_number_unsigned()) fail(key, "expected an integer");
  return v.get<std::int64_t>();
}

inline Vec3 vec3(const json& v, const std::string& key) {
  if (!v.is_array() || v.size() != 3) fail(key, "expected an array of three numbers");
  return {number(v[0], key + "[0]"), number(v[1], key + "[1]"), number(v[2], key + "[2]")};
}

inline Complex complex_entry(const json& v, const std::string& key) {
  if (v.is_number()) return {number(v, key), 0.0};
  if (v.is_array() && v.size() == 2) return {number(v[0], key), number(v[1], key)};
  fail(key, "expected a number or [re, im]");
}

inline Operator matrix(const json& v, const std::string& key) {
  if (!v.is_array() || v.empty()) fail(key, "expected a non-empty square matrix");
  const auto n = static_cast<Index>(v.size());
  Operator m(n, n);
  for (Index i = 0; i < n; ++i) {
    const json& row = v[static_cast<std::size_t>(i)];
    if (!row.is_array() || static_cast<Index>(row.size()) != n) fail(key, "matrix is not square");
    for (Index j = 0; j < n; ++j) {
      m(i, j) = complex_entry(row[static_cast<std::size_t>(j)],
                              key + "[" + std::to_string(i) + "][" + std::to_string(j) + "]");
    }
  }
  return m;
}

inline double khz_to_rad_per_s(double khz, FrequencyConvention c) {
  return c == FrequencyConvention::Angular ? 2.0 * kPi * khz * 1e3 : khz * 1e3;
}

inline void reject_unknown(const json& obj, const std::string& path, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) fail(path, "expected an object");
  for (const auto& [k, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) fail(path + "." + k, "unknown key");
  }
}

inline Vec3 parse_hyperfine(const json& s, const std::string& path, FrequencyConvention conv) {
  reject_unknown(s, path, {"hyperfine_khz", "polar_deg", "azimuth_deg"});
  const json* h = find(s, "hyperfine_khz");
  if (!h) fail(path + ".hyperfine_khz", "missing");
  if (h->is_array()) {
    if (find(s, "polar_deg") || find(s, "azimuth_deg")) fail(path, "angles apply only to a scalar hyperfine_khz");
    const Vec3 v = vec3(*h, path + ".hyperfine_khz");
    return {khz_to_rad_per_s(v(0), conv), khz_to_rad_per_s(v(1), conv), khz_to_rad_per_s(v(2), conv)};
  }
  const double a = khz_to_rad_per_s(number(*h, path + ".hyperfine_khz"), conv);
  const double th = number_or(s, "polar_deg", path, 0.0) * kPi / 180.0;
  const double ph = number_or(s, "azimuth_deg", path, 0.0) * kPi / 180.0;
  return a * Vec3(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
}

inline void parse_model(ExperimentConfig& cfg, const json& m) {
  const std::string p = "model";
  reject_unknown(m, p,
                 {"spins", "larmor_khz", "larmor_over_a", "larmor_t_pi", "dipolar", "secular", "sequence", "t_us",
                  "phase_rad", "phase_over_pi", "b_rad_per_us", "he_rad_per_us", "max_spins"});
  const auto conv = cfg.convention;

  const json* pr = find(m, "phase_rad");
  const json* po = find(m, "phase_over_pi");
  if (pr && po) fail(p, "give phase_rad or phase_over_pi, not both");
  cfg.phase = pr ? number(*pr, p + ".phase_rad") : po ? number(*po, p + ".phase_over_pi") * kPi : kPi / 2.0;

  if (find(m, "b_rad_per_us") || find(m, "he_rad_per_us")) {
    for (const char* k : {"spins", "larmor_khz", "larmor_over_a", "larmor_t_pi", "dipolar", "sequence"}) {
      if (find(m, k)) fail(p + "." + k, "not allowed together with explicit operators");
    }
    const json* b = find(m, "b_rad_per_us");
    const json* he = find(m, "he_rad_per_us");
    if (!b || !he) fail(p, "explicit models need both b_rad_per_us and he_rad_per_us");
    cfg.ops = {matrix(*b, p + ".b_rad_per_us") * 1e6, matrix(*he, p + ".he_rad_per_us") * 1e6};
    const Index d = cfg.ops.b.rows();
    if (cfg.ops.he.rows() != d) fail(p, "b_rad_per_us and he_rad_per_us differ in size");
    if (!is_hermitian(cfg.ops.b, 1e-4)) fail(p + ".b_rad_per_us", "matrix is not Hermitian");
    if (!is_hermitian(cfg.ops.he, 1e-4)) fail(p + ".he_rad_per_us", "matrix is not Hermitian");
    cfg.ops.b = hermitize(cfg.ops.b);
    cfg.ops.he = hermitize(cfg.ops.he);
    int n = 0;
    while ((Index{1} << n) < d) ++n;
    cfg.n_spins = (Index{1} << n) == d ? n : 0;
    const json* t = find(m, "t_us");
    if (!t) fail(p + ".t_us", "missing");
    cfg.t = number(*t, p + ".t_us") * 1e-6;
    if (cfg.t < 0.0) fail(p + ".t_us", "must be non-negative");
    return;
  }

  ModelSpec spec;
  spec.phase = cfg.phase;
  const json* spins = find(m, "spins");
  if (!spins || !spins->is_array() || spins->empty()) fail(p + ".spins", "expected a non-empty array");
  for (std::size_t k = 0; k < spins->size(); ++k) {
    spec.bath.push_back({parse_hyperfine((*spins)[k], p + ".spins[" + std::to_string(k) + "]", conv)});
  }
  if (const json* ms = find(m, "max_spins")) spec.max_spins = static_cast<int>(integer(*ms, p + ".max_spins"));
  if (const json* sec = find(m, "secular")) {
    if (!sec->is_boolean()) fail(p + ".secular", "expected true or false");
    spec.secular = sec->get<bool>();
  }

  std::optional<double> tau;
  if (const json* seq = find(m, "sequence")) {
    reject_unknown(*seq, p + ".sequence", {"type", "tau_us", "n_pulses", "detuning_khz", "detuning_over_aperp_eff"});
    const json* type = find(*seq, "type");
    const std::string ty = type && type->is_string() ? type->get<std::string>() : "";
    if (ty == "rim") {
      spec.sequence = RimSequence{};
    } else if (ty == "cpmg") {
      CpmgSequence c;
      const json* ta = find(*seq, "tau_us");
      const json* np = find(*seq, "n_pulses");
      if (!ta) fail(p + ".sequence.tau_us", "missing");
      if (!np) fail(p + ".sequence.n_pulses", "missing");
      c.tau = number(*ta, p + ".sequence.tau_us") * 1e-6;
      c.n_pulses = static_cast<int>(integer(*np, p + ".sequence.n_pulses"));
      if (!(c.tau > 0.0)) fail(p + ".sequence.tau_us", "must be positive");
      if (c.n_pulses <= 0 || c.n_pulses % 2) fail(p + ".sequence.n_pulses", "must be positive and even");
      const json* dk = find(*seq, "detuning_khz");
      const json* dr = find(*seq, "detuning_over_aperp_eff");
      if (dk && dr) fail(p + ".sequence", "give detuning_khz or detuning_over_aperp_eff, not both");
      if (dk) c.detuning = khz_to_rad_per_s(number(*dk, p + ".sequence.detuning_khz"), conv);
      if (dr) {
        const double aperp = 2.0 / kPi * transverse_part(spec.bath.front().hyperfine).magnitude;
        c.detuning = number(*dr, p + ".sequence.detuning_over_aperp_eff") * aperp;
      }
      spec.sequence = c;
      tau = c.tau;
    } else {
      fail(p + ".sequence.type", "expected \"rim\" or \"cpmg\"");
    }
  }

  if (std::holds_alternative<RimSequence>(spec.sequence)) {
    const json* t = find(m, "t_us");
    if (!t) fail(p + ".t_us", "missing");
    spec.t = number(*t, p + ".t_us") * 1e-6;
    if (spec.t < 0.0) fail(p + ".t_us", "must be non-negative");
  } else if (find(m, "t_us")) {
    const double given = number(m["t_us"], p + ".t_us") * 1e-6;
    if (std::abs(given - spec.evolution_time()) > 1e-12) fail(p + ".t_us", "disagrees with 2 N tau of the CPMG sequence");
  }
  cfg.t = spec.evolution_time();

  int larmor_keys = 0;
  for (const char* k : {"larmor_khz", "larmor_over_a", "larmor_t_pi"}) larmor_keys += find(m, k) ? 1 : 0;
  if (larmor_keys > 1) fail(p, "give at most one of larmor_khz, larmor_over_a, larmor_t_pi");
  if (const json* v = find(m, "larmor_khz")) spec.larmor = khz_to_rad_per_s(number(*v, p + ".larmor_khz"), conv);
  if (const json* v = find(m, "larmor_over_a")) spec.larmor = number(*v, p + ".larmor_over_a") * spec.bath.front().hyperfine.norm();
  if (const json* v = find(m, "larmor_t_pi")) {
    if (!(cfg.t > 0.0)) fail(p + ".larmor_t_pi", "needs a positive evolution time");
    spec.larmor = number(*v, p + ".larmor_t_pi") * kPi / cfg.t;
  }

  if (const json* dip = find(m, "dipolar")) {
    if (!dip->is_array()) fail(p + ".dipolar", "expected an array");
    for (std::size_t i = 0; i < dip->size(); ++i) {
      const std::string q = p + ".dipolar[" + std::to_string(i) + "]";
      const json& e = (*dip)[i];
      reject_unknown(e, q, {"j", "k", "coupling_khz", "direction", "displacement_nm", "gamma_rad_per_s_per_t"});
      const json* j = find(e, "j");
      const json* k = find(e, "k");
      if (!j || !k) fail(q, "needs j and k");
      DipolarCoupling c;
      c.j = static_cast<int>(integer(*j, q + ".j"));
      c.k = static_cast<int>(integer(*k, q + ".k"));
      const json* ck = find(e, "coupling_khz");
      const json* dn = find(e, "displacement_nm");
      if ((ck != nullptr) == (dn != nullptr)) fail(q, "give exactly one of coupling_khz or displacement_nm");
      if (ck) {
        c.coupling = khz_to_rad_per_s(number(*ck, q + ".coupling_khz"), conv);
        if (const json* dir = find(e, "direction")) c.direction = vec3(*dir, q + ".direction");
      } else {
        const Vec3 r = vec3(*dn, q + ".displacement_nm") * 1e-9;
        const double g = number_or(e, "gamma_rad_per_s_per_t", q, kGamma13C);
        try {
          c = dipolar_from_geometry(c.j, c.k, r, g);
        } catch (const Error& err) {
          fail(q + ".displacement_nm", err.what());
        }
      }
      spec.dipolar.push_back(c);
    }
  }

  cfg.ops = build_multi_spin(spec);
  cfg.n_spins = static_cast<int>(spec.bath.size());
  cfg.spec = spec;
}

inline void parse_noise(ExperimentConfig& cfg, const json& n) {
  const std::string p = "noise";
  reject_unknown(n, p, {"basis", "spins", "all"});
  NoiseBasis basis = NoiseBasis::Hyperfine;
  if (const json* b = find(n, "basis")) {
    const std::string s = b->is_string() ? b->get<std::string>() : "";
    if (s == "hyperfine") basis = NoiseBasis::Hyperfine;
    else if (s == "field" || s == "z") basis = NoiseBasis::Field;
    else fail(p + ".basis", "expected \"hyperfine\" or \"field\"");
  }
  auto one = [&](const json& e, const std::string& q) {
    reject_unknown(e, q, {"dephasing_per_us", "down_per_us", "up_per_us"});
    SpinNoise s;
    s.dephasing = number_or(e, "dephasing_per_us", q, 0.0) * 1e6;
    s.down = number_or(e, "down_per_us", q, 0.0) * 1e6;
    s.up = number_or(e, "up_per_us", q, 0.0) * 1e6;
    for (double r : {s.dephasing, s.down, s.up}) {
      if (r < 0.0) fail(q, "rates must be non-negative");
    }
    return s;
  };
  NoiseSpec ns;
  const json* spins = find(n, "spins");
  const json* all = find(n, "all");
  if (spins && all) fail(p, "give spins or all, not both");
  if (cfg.n_spins < 1) fail(p, "noise needs a bath of spin-1/2 particles");
  if (all) {
    ns.spins.assign(static_cast<std::size_t>(cfg.n_spins), one(*all, p + ".all"));
  } else if (spins) {
    if (!spins->is_array()) fail(p + ".spins", "expected an array");
    if (static_cast<int>(spins->size()) > cfg.n_spins) fail(p + ".spins", "more entries than bath spins");
    for (std::size_t k = 0; k < spins->size(); ++k) ns.spins.push_back(one((*spins)[k], p + ".spins[" + std::to_string(k) + "]"));
  }
  if (cfg.spec) assign_noise_axes(ns, *cfg.spec, basis);
  cfg.noise = ns;
}

inline void parse_run(ExperimentConfig& cfg, const json& r) {
  const std::string p = "run";
  reject_unknown(r, p,
                 {"m", "m_list", "samples", "seed", "hist_bins", "class_edges", "initial_state", "threads",
                  "check_each_step", "fidelity_targets", "pf_max_m"});
  RunSpec& run = cfg.run;
  if (find(r, "m") && find(r, "m_list")) fail(p, "give m or m_list, not both");
  if (const json* m = find(r, "m")) run.m_list = {integer(*m, p + ".m")};
  if (const json* ml = find(r, "m_list")) {
    if (!ml->is_array() || ml->empty()) fail(p + ".m_list", "expected a non-empty array");
    run.m_list.clear();
    for (std::size_t i = 0; i < ml->size(); ++i) run.m_list.push_back(integer((*ml)[i], p + ".m_list[" + std::to_string(i) + "]"));
  }
  for (auto m : run.m_list) {
    if (m < 1) fail(p + ".m_list", "every m must be at least 1");
  }
  if (const json* s = find(r, "samples")) run.samples = integer(*s, p + ".samples");
  if (run.samples < 1) fail(p + ".samples", "must be at least 1");
  if (const json* s = find(r, "seed")) {
    if (!s->is_number_unsigned() && !(s->is_number_integer() && s->get<std::int64_t>() >= 0)) {
      fail(p + ".seed", "expected a non-negative integer");
    }
    run.seed = s->get<std::uint64_t>();
  }
  if (const json* b = find(r, "hist_bins")) run.hist_bins = static_cast<int>(integer(*b, p + ".hist_bins"));
  if (run.hist_bins < 1) fail(p + ".hist_bins", "must be at least 1");
  if (const json* e = find(r, "class_edges")) {
    if (!e->is_array()) fail(p + ".class_edges", "expected an array");
    std::vector<double> edges;
    for (std::size_t i = 0; i < e->size(); ++i) edges.push_back(number((*e)[i], p + ".class_edges"));
    run.class_edges = edges;
  }
  if (const json* s = find(r, "initial_state")) run.initial_state = *s;
  if (const json* t = find(r, "threads")) run.threads = static_cast<int>(integer(*t, p + ".threads"));
  if (run.threads < 1) fail(p + ".threads", "must be at least 1");
  if (const json* c = find(r, "check_each_step")) {
    if (!c->is_boolean()) fail(p + ".check_each_step", "expected true or false");
    run.check_each_step = c->get<bool>();
  }
  if (const json* f = find(r, "fidelity_targets")) {
    const std::string s = f->is_string() ? f->get<std::string>() : "";
    if (s == "b_eigenstates") run.targets = FidelityTargets::BEigenstates;
    else if (s == "fixed_points") run.targets = FidelityTargets::FixedPoints;
    else fail(p + ".fidelity_targets", "expected \"b_eigenstates\" or \"fixed_points\"");
  }
  if (const json* f = find(r, "pf_max_m")) run.pf_max_m = integer(*f, p + ".pf_max_m");
}

}  // namespace config_detail

inline ExperimentConfig parse_config(const json& raw, const fs::path& base_dir = ".") {
  using namespace config_detail;
  ExperimentConfig cfg;
  cfg.raw = raw;
  cfg.base_dir = base_dir;
  reject_unknown(raw, "config", {"model", "noise", "run", "units", "outputs", "sweep", "description"});
  if (const json* u = find(raw, "units")) {
    reject_unknown(*u, "units", {"frequency_convention"});
    if (const json* c = find(*u, "frequency_convention")) {
      const std::string s = c->is_string() ? c->get<std::string>() : "";
      if (s == "angular") cfg.convention = FrequencyConvention::Angular;
      else if (s == "linear") cfg.convention = FrequencyConvention::Linear;
      else fail("units.frequency_convention", "expected \"angular\" or \"linear\"");
    }
  }
  const json* model = find(raw, "model");
  if (!model) fail("model", "missing");
  try {
    parse_model(cfg, *model);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError || e.code() == ErrorCode::TooManySpins) throw;
    fail("model", e.what());
  }
  if (const json* r = find(raw, "run")) parse_run(cfg, *r);
  if (const json* n = find(raw, "noise")) parse_noise(cfg, *n);
  return cfg;
}

inline json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, path.string() + ": cannot open");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    const auto upto = std::min<std::size_t>(e.byte, text.size());
    const auto line = 1 + std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(upto), '\n');
    throw Error(ErrorCode::ConfigError, path.string() + ":" + std::to_string(line) + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const fs::path& path) {
  return parse_config(read_json_file(path), path.parent_path());
}

inline void apply_overrides(ExperimentConfig& cfg, const RunOverrides& o) {
  if (o.seed) cfg.run.seed = *o.seed;
  if (o.threads) {
    if (*o.threads < 1) throw Error(ErrorCode::ConfigError, "--threads: must be at least 1");
    cfg.run.threads = *o.threads;
  }
}

/// --threads beats STEER_THREADS, which beats run.threads.
inline std::optional<int> env_threads() {
  const char* v = std::getenv("STEER_THREADS");
  if (!v || !*v) return std::nullopt;
  try {
    const int n = std::stoi(v);
    if (n < 1) throw std::invalid_argument("non-positive");
    return n;
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, std::string("STEER_THREADS: not a positive integer: ") + v);
  }
}

/// Initial bath state: "maximally_mixed", a basis label ("up", "down", a string
/// of u/d per spin, or "index:<k>"), or {"matrix_file": path} / {"matrix": [...]}.
inline Operator initial_state(const ExperimentConfig& cfg) {
  using namespace config_detail;
  const Index d = cfg.ops.dim();
  const json& s = cfg.run.initial_state;
  const std::string key = "run.initial_state";
  if (s.is_string()) {
    const std::string label = s.get<std::string>();
    if (label == "maximally_mixed") return maximally_mixed(d);
    if (label.rfind("index:", 0) == 0) {
      Index k = -1;
      try {
        k = std::stoll(label.substr(6));
      } catch (const std::exception&) {
        fail(key, "bad index label");
      }
      if (k < 0 || k >= d) fail(key, "basis index out of range");
      return basis_projector(d, k);
    }
    std::string bits = label;
    if (label == "up") bits = "u";
    if (label == "down") bits = "d";
    if (static_cast<int>(bits.size()) != cfg.n_spins) fail(key, "unknown state label \"" + label + "\"");
    Index k = 0;
    for (char c : bits) {
      if (c != 'u' && c != 'd') fail(key, "unknown state label \"" + label + "\"");
      k = 2 * k + (c == 'd' ? 1 : 0);
    }
    return basis_projector(d, k);
  }
  if (s.is_object()) {
    Operator rho;
    if (const json* f = find(s, "matrix_file")) {
      if (!f->is_string()) fail(key + ".matrix_file", "expected a path");
      fs::path path = f->get<std::string>();
      if (path.is_relative()) path = cfg.base_dir / path;
      if (!fs::exists(path)) fail(key + ".matrix_file", "file not found: " + path.string());
      rho = matrix(read_json_file(path), key + ".matrix_file");
    } else if (const json* m = find(s, "matrix")) {
      rho = matrix(*m, key + ".matrix");
    } else {
      fail(key, "expected matrix_file or matrix");
    }
    if (rho.rows() != d) fail(key, "dimension does not match the model");
    if (!is_density(rho, 1e-10, 1e-9, 1e-9)) fail(key, "not a density matrix");
    return hermitize(rho);
  }
  fail(key, "expected a label or an object");
}

/// Eigenprojectors of B ordered by their predicted X = cos(2 b t + dphi) / 2.
inline std::vector<Operator> b_eigenstates(const ModelOperators& ops, double t, double phase) {
  Eigen::SelfAdjointEigenSolver<Operator> es(hermitize(ops.b));
  const Eigen::VectorXd& w = es.eigenvalues();
  const double scale = std::max(1.0, w.cwiseAbs().maxCoeff());
  struct Block {
    Operator p;
    double x;
    Index first;
  };
  std::vector<Block> blocks;
  Index start = 0;
  for (Index i = 1; i <= w.size(); ++i) {
    if (i < w.size() && w(i) - w(i - 1) <= 1e-9 * scale) continue;
    const auto v = es.eigenvectors().middleCols(start, i - start);
    const double b = w.segment(start, i - start).mean();
    Operator p = v * v.adjoint();
    blocks.push_back({p / static_cast<double>(i - start), std::cos(2.0 * b * t + phase) / 2.0,
                      detail::first_significant_index(p)});
    start = i;
  }
  std::stable_sort(blocks.begin(), blocks.end(), [](const Block& a, const Block& b) {
    if (std::abs(a.x - b.x) > 1e-12) return a.x < b.x;
    return a.first < b.first;
  });
  std::vector<Operator> out;
  for (auto& b : blocks) out.push_back(std::move(b.p));
  return out;
}

namespace output_detail {

inline json complex_json(Complex z) { return json::array({z.real(), z.imag()}); }

inline json matrix_json(const Operator& m) {
  json rows = json::array();
  for (Index i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (Index j = 0; j < m.cols(); ++j) row.push_back(complex_json(m(i, j)));
    rows.push_back(row);
  }
  return rows;
}

inline json finite_or_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json window_json(const std::optional<MetastableWindow>& w) {
  if (!w) return nullptr;
  return {{"q", w->q},
          {"m_lo", w->m_lo},
          {"m_hi", finite_or_null(w->m_hi)},
          {"unbounded", w->unbounded},
          {"empty", w->empty},
          {"separation", finite_or_null(w->separation())}};
}

inline std::string fnv1a_hex(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

inline std::string csv_number(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

inline std::string bin_label(std::size_t c, const std::vector<double>& edges) {
  const std::string lo = c == 0 ? "-0.5" : csv_number(edges[c - 1]);
  const std::string hi = c == edges.size() ? "0.5" : csv_number(edges[c]);
  return "\"[" + lo + "," + hi + (c == edges.size() ? "]" : ")") + "\"";  // quoted: the label holds a comma
}

}  // namespace output_detail

/// Canonical config (seed override applied, thread count removed) used for the
/// reproducibility hash.
inline json canonical_config(const ExperimentConfig& cfg) {
  json c = cfg.raw;
  if (c.contains("run")) c["run"].erase("threads");
  c["run"]["seed"] = cfg.run.seed;
  c.erase("outputs");
  return c;
}

inline std::string config_hash(const ExperimentConfig& cfg) {
  return output_detail::fnv1a_hex(canonical_config(cfg).dump());
}

struct OutputFile {
  std::string name;
  std::string content;
};

using Bundle = std::vector<OutputFile>;

inline json spectrum_document(const ExperimentConfig& cfg, const ChannelAnalysis& a) {
  using namespace output_detail;
  json eig = json::array();
  for (Index i = 0; i < a.eig.values.size(); ++i) {
    const Complex l = a.eig.values(i);
    eig.push_back({{"re", l.real()}, {"im", l.imag()}, {"modulus", std::abs(l)}, {"argument", std::arg(l)}});
  }
  json fixed = json::array();
  for (std::size_t j = 0; j < a.fixed.count(); ++j) {
    fixed.push_back({{"rank", a.fixed.ranks[j]},
                     {"center_f1", a.fixed.centers[j]},
                     {"center_x", a.fixed.centers[j] - 0.5},
                     {"projector", matrix_json(a.fixed.projectors[j])}});
  }
  json rot = json::array();
  for (auto l : a.asymptotic.rotating_eigenvalues) rot.push_back(complex_json(l));
  const CptpReport rep = cptp_report(a.phi_hat);
  json doc = {{"dimension", a.ops.dim()},
              {"t_s", cfg.t},
              {"phase_rad", cfg.phase},
              {"eigenvalues", eig},
              {"classification", to_string(a.classification.steering)},
              {"commutation_measure", a.classification.commutation},
              {"eta", a.eta ? json(*a.eta) : json(nullptr)},
              {"metastable_window", window_json(a.classification.window)},
              {"fixed_points", fixed},
              {"commutant_dimension", a.fixed.commutant_basis.cols()},
              {"commutant_abelian", a.fixed.abelian},
              {"rotating_points", rot},
              {"diagnostics",
               {{"clustered", a.eig.diagnostics.clustered},
                {"defective", a.eig.diagnostics.defective},
                {"min_gap", a.eig.diagnostics.min_gap},
                {"condition", finite_or_null(a.eig.diagnostics.condition)}}},
              {"cptp",
               {{"trace_residual", rep.trace_residual},
                {"unital_residual", rep.unital_residual},
                {"choi_min_eigenvalue", rep.choi_min_eigenvalue}}}};
  return doc;
}

inline Instrument build_instrument(const ExperimentConfig& cfg, const ChannelAnalysis& a) {
  if (cfg.noise && !cfg.noise->silent()) {
    Instrument in = noisy_rim_instrument(cfg.ops, *cfg.noise, cfg.t, cfg.phase);
    validate_instrument(in, 1e-8, 1e-7);
    return in;
  }
  return ideal_instrument(a.kraus);
}

inline std::vector<Operator> fidelity_targets(const ExperimentConfig& cfg, const ChannelAnalysis& a) {
  if (cfg.run.targets == FidelityTargets::FixedPoints) return a.fixed.states;
  return b_eigenstates(cfg.ops, cfg.t, cfg.phase);
}

inline std::vector<double> class_edges(const ExperimentConfig& cfg) {
  auto e = cfg.run.class_edges.value_or(default_class_edges(cfg.n_spins));
  std::sort(e.begin(), e.end());
  return e;
}

inline Bundle cmd_spectrum(const ExperimentConfig& cfg) {
  const ChannelAnalysis a = analyze_channel(cfg.ops, cfg.t, cfg.phase);
  json doc = spectrum_document(cfg, a);
  if (cfg.noise && !cfg.noise->silent()) {
    const Instrument in = build_instrument(cfg, a);
    const Eigen::VectorXcd ev = sorted_eigenvalues(in.channel());
    json noisy = json::array();
    for (Index i = 0; i < ev.size(); ++i) {
      noisy.push_back({{"re", ev(i).real()}, {"im", ev(i).imag()}, {"modulus", std::abs(ev(i))}, {"argument", std::arg(ev(i))}});
    }
    doc["noisy_eigenvalues"] = noisy;
  }
  return {{"spectrum.json", doc.dump(2) + "\n"}};
}

inline EnsembleOptions ensemble_options(const ExperimentConfig& cfg, const ChannelAnalysis& a) {
  EnsembleOptions opt;
  opt.m_list = cfg.run.m_list;
  opt.samples = cfg.run.samples;
  opt.seed = cfg.run.seed;
  opt.hist_bins = cfg.run.hist_bins;
  opt.class_edges = class_edges(cfg);
  opt.targets = fidelity_targets(cfg, a);
  opt.threads = cfg.run.threads;
  opt.check_each_step = cfg.run.check_each_step;
  return opt;
}

inline Bundle cmd_simulate(const ExperimentConfig& cfg) {
  using namespace output_detail;
  const ChannelAnalysis a = analyze_channel(cfg.ops, cfg.t, cfg.phase);
  const Instrument in = build_instrument(cfg, a);
  const Operator rho0 = initial_state(cfg);
  const EnsembleOptions opt = ensemble_options(cfg, a);
  const TrajectoryEnsemble ens = run_ensemble(rho0, in, opt);

  std::ostringstream hist;
  hist << "m,bin_center,count,frequency,density\n";
  const double width = 1.0 / cfg.run.hist_bins;
  const double n = static_cast<double>(cfg.run.samples);
  for (const auto& s : ens.snapshots) {
    for (int b = 0; b < cfg.run.hist_bins; ++b) {
      const auto count = s.histogram[static_cast<std::size_t>(b)];
      hist << s.m << ',' << csv_number(-0.5 + (b + 0.5) * width) << ',' << count << ','
           << csv_number(static_cast<double>(count) / n) << ',' << csv_number(static_cast<double>(count) / (n * width))
           << '\n';
    }
  }

  const auto& edges = ens.options.class_edges;
  const std::size_t n_classes = edges.size() + 1;
  const std::size_t n_targets = opt.targets.size();
  const bool paired = n_classes == n_targets;
  std::ostringstream fid;
  fid << "m,bin_label,mean_fidelity,stderr,sample_ratio,target\n";
  for (const auto& s : ens.snapshots) {
    for (std::size_t c = 0; c < n_classes; ++c) {
      const ClassStats& cls = s.classes[c];
      for (std::size_t t = 0; t < n_targets; ++t) {
        if (paired && t != c) continue;
        const Welford& w = cls.fidelity[t];
        fid << s.m << ',' << bin_label(c, edges) << ',' << (w.n ? csv_number(w.mean) : std::string("nan")) << ','
            << csv_number(w.stderr_mean()) << ',' << csv_number(static_cast<double>(cls.count) / n) << ',' << t
            << '\n';
      }
    }
  }
  return {{"histogram.csv", hist.str()}, {"fidelity.csv", fid.str()}};
}

inline Bundle cmd_stats(const ExperimentConfig& cfg) {
  const ChannelAnalysis a = analyze_channel(cfg.ops, cfg.t, cfg.phase);
  const Operator rho0 = initial_state(cfg);
  json reports = json::array();
  for (auto m : cfg.run.m_list) {
    const PeakReport r = peak_report(a, rho0, m);
    const ExpectationSplit e = analytic_expectation_f1(rho0, a, m);
    json peaks = json::array();
    for (const auto& p : r.peaks) {
      peaks.push_back({{"weight", p.weight},
                       {"center_f1", p.center_f1},
                       {"center_x", p.center_x},
                       {"coherence", p.coherence},
                       {"variance_f1", p.variance},
                       {"rank", p.rank}});
    }
    reports.push_back({{"m", m},
                       {"peaks", peaks},
                       {"weight_sum", r.weight_sum},
                       {"expectation_f1", {{"total", e.total}, {"fixed_part", e.fixed_part}, {"correction", e.correction}}}});
  }
  json doc = {{"classification", to_string(a.classification.steering)}, {"reports", reports}};

  json pf = json::array();
  try {
    for (auto m : cfg.run.m_list) {
      if (m > cfg.run.pf_max_m) continue;
      const PeakDistribution d = commuting_peak_distribution(rho0, cfg.ops, cfg.t, cfg.phase, m);
      json x = json::array();
      for (double f : d.grid) x.push_back(f - 0.5);
      pf.push_back({{"m", m}, {"x", x}, {"probability", d.probability}});
    }
    doc["peak_distribution"] = pf;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NotCommuting) throw;
    doc["peak_distribution"] = {{"skipped", e.what()}};
  }
  return {{"peaks.json", doc.dump(2) + "\n"}};
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

inline OutputFile manifest(const ExperimentConfig& cfg, const std::string& command, const Bundle& files) {
  json names = json::array();
  for (const auto& f : files) names.push_back(f.name);
  json doc = {{"command", command},
              {"config_hash", config_hash(cfg)},
              {"seed", cfg.run.seed},
              {"samples", cfg.run.samples},
              {"frequency_convention", cfg.convention == FrequencyConvention::Angular ? "angular" : "linear"},
              {"files", names},
              {"versions",
               {{"steer", kVersion},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                              std::to_string(EIGEN_MINOR_VERSION)},
                {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                      std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
              {"timestamp", utc_timestamp()}};
  return {"manifest.json", doc.dump(2) + "\n"};
}

inline void write_bundle(const fs::path& dir, const Bundle& files) {
  fs::create_directories(dir);
  for (const auto& f : files) {
    std::ofstream out(dir / f.name, std::ios::binary);
    if (!out) throw Error(ErrorCode::ConfigError, (dir / f.name).string() + ": cannot write");
    out << f.content;
  }
}

inline Bundle run_command(const std::string& command, const ExperimentConfig& cfg) {
  Bundle b;
  if (command == "spectrum") b = cmd_spectrum(cfg);
  else if (command == "simulate") b = cmd_simulate(cfg);
  else if (command == "stats") b = cmd_stats(cfg);
  else throw Error(ErrorCode::ConfigError, "unknown command \"" + command + "\"");
  b.push_back(manifest(cfg, command, b));
  return b;
}

/// Set a dotted key ("model.larmor_over_a", "run.seed") in a config document.
inline void set_dotted(json& doc, const std::string& key, const json& value) {
  if (key.empty()) throw Error(ErrorCode::ConfigError, "sweep.key: empty");
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw Error(ErrorCode::ConfigError, "sweep.key: malformed \"" + key + "\"");
    if (!node->is_object()) throw Error(ErrorCode::ConfigError, "sweep.key: \"" + key + "\" crosses a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

struct SweepPlan {
  std::string key;
  std::vector<json> values;
  std::vector<std::string> commands{"spectrum", "simulate", "stats"};
};

inline SweepPlan sweep_plan(const json& raw) {
  using namespace config_detail;
  const json* s = find(raw, "sweep");
  if (!s) fail("sweep", "missing");
  reject_unknown(*s, "sweep", {"key", "values", "commands"});
  SweepPlan p;
  const json* k = find(*s, "key");
  if (!k || !k->is_string()) fail("sweep.key", "expected a dotted key string");
  p.key = k->get<std::string>();
  const json* v = find(*s, "values");
  if (!v || !v->is_array()) fail("sweep.values", "expected an array");
  if (v->empty()) fail("sweep.values", "axis is empty");
  for (const auto& x : *v) {
    if (!x.is_number()) fail("sweep.values", "expected numbers");
    p.values.push_back(x);
  }
  if (const json* c = find(*s, "commands")) {
    if (!c->is_array() || c->empty()) fail("sweep.commands", "expected a non-empty array");
    p.commands.clear();
    for (const auto& x : *c) {
      const std::string name = x.is_string() ? x.get<std::string>() : "";
      if (name != "spectrum" && name != "simulate" && name != "stats") fail("sweep.commands", "unknown command");
      p.commands.push_back(name);
    }
  }
  return p;
}

/// Every point is parsed and computed before anything is written.
inline std::vector<std::pair<std::string, Bundle>> cmd_sweep(const json& raw, const fs::path& base_dir,
                                                              const RunOverrides& overrides) {
  const SweepPlan plan = sweep_plan(raw);
  std::vector<ExperimentConfig> points;
  for (std::size_t i = 0; i < plan.values.size(); ++i) {
    json doc = raw;
    doc.erase("sweep");
    set_dotted(doc, plan.key, plan.values[i]);
    ExperimentConfig cfg = parse_config(doc, base_dir);
    apply_overrides(cfg, overrides);
    points.push_back(std::move(cfg));
  }
  std::vector<std::pair<std::string, Bundle>> out;
  json index = json::array();
  for (std::size_t i = 0; i < points.size(); ++i) {
    std::ostringstream dir;
    dir << "point_" << std::setw(3) << std::setfill('0') << i;
    Bundle all;
    for (const auto& c : plan.commands) {
      Bundle b = run_command(c, points[i]);
      b.back().name = "manifest_" + c + ".json";
      for (auto& f : b) all.push_back(std::move(f));
    }
    const ChannelAnalysis a = analyze_channel(points[i].ops, points[i].t, points[i].phase);
    index.push_back({{"index", i},
                     {"value", plan.values[i]},
                     {"directory", dir.str()},
                     {"classification", to_string(a.classification.steering)},
                     {"config_hash", config_hash(points[i])}});
    out.emplace_back(dir.str(), std::move(all));
  }
  json doc = {{"key", plan.key}, {"points", index}};
  out.emplace_back("", Bundle{{"index.json", doc.dump(2) + "\n"}});
  return out;
}

inline int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidArgument:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::ZeroDisplacement:
    case ErrorCode::IndexOutOfRange:
    case ErrorCode::NegativeRate:
      return 2;
    case ErrorCode::TooManySpins:
    case ErrorCode::TooLarge:
    case ErrorCode::DimensionCap:
      return 4;
    default:
      return 3;
  }
}

}  // namespace steer
