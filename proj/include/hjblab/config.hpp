#pragma once

// Experiment configuration: a flat `key = value` text format.
//
//   # comment
//   name = ou_mild
//   scenario = mild_solve
//   field = ou
//   mc.paths = 20000
//
// Keys are dotted paths; every key must be known (ConfigError otherwise).
// List values are comma separated. Ranges: `linspace:lo:hi:n`, `log:lo:hi:n`.

#include "hjblab/coefficients.hpp"
#include "hjblab/errors.hpp"
#include "hjblab/numerics.hpp"
#include "hjblab/random.hpp"

#include <charconv>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace hjblab {

struct ExperimentConfig {
    std::string name = "experiment";
    std::string scenario;
    std::uint64_t seed = 1;
    std::string output;  // relative to the output root unless absolute
    unsigned workers = 1;

    // field
    std::string field = "ou";  // ou | brownian | example
    std::size_t dim = 1;
    double example_m = 0.4;
    double example_p = 1.0;
    std::vector<double> example_b{1.0};
    double example_q = 1.0;  // Q = q I

    // data
    std::string phi = "cos";
    std::string hamiltonian = "neg_abs";  // zero | neg_abs | const:c | control
    double horizon = 1.0;
    std::vector<double> x0{0.5};

    // Monte Carlo
    std::size_t paths = 20000;
    double dt = 1e-3;
    bool antithetic = false;

    // gradient_estimate
    std::vector<double> gradient_times = log_grid(1e-3, 1.0, 13);
    std::vector<double> gradient_points = linspace(-0.4, 0.4, 9);
    double slope_t_max = 5e-2;

    // C_T measurement (used when ct is not given)
    std::optional<double> ct;
    std::vector<std::string> ct_phi{"cos", "tanh:50"};
    std::vector<double> ct_times = log_grid(1e-2, 1.0, 8);
    std::vector<double> ct_points = linspace(-2.0, 2.0, 9);
    std::size_t ct_paths = 4000;

    // spatial grid and solver
    double grid_lo = -4.5;
    double grid_hi = 4.5;
    double grid_dx = 0.1;
    double tol = 1e-3;
    std::size_t max_iter = 50;
    double window_factor = 0.8;
    std::size_t quad_nodes = 16;
    std::size_t transition_paths = 4096;
    double transition_dt = 2e-4;
    std::vector<std::size_t> mollify{};

    // fbsde_check
    std::vector<std::size_t> fbsde_steps{16, 32, 64, 128};
    std::size_t fbsde_paths = 4000;
    std::size_t regression_paths = 20000;
    std::size_t regression_steps = 25;

    // control_benchmark
    std::size_t control_points = 101;
    std::size_t policies = 256;
    std::size_t subintervals = 8;
    std::size_t control_paths = 4000;
    std::size_t control_steps = 200;

    // hypothesis_check
    double hypothesis_radius = 4.0;
    std::size_t hypothesis_samples = 2000;

    std::string source;  // canonical text, for hashing
};

inline const std::set<std::string>& known_scenarios() {
    static const std::set<std::string> s{"gradient_estimate", "mild_solve", "fbsde_check", "control_benchmark",
                                         "hypothesis_check"};
    return s;
}

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return {};
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) out.push_back(trim(item));
    return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw ConfigError(key + ": expected a number, got '" + v + "'");
    return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    const auto [ptr, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc{} || ptr != end) throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + v + "'");
}

inline std::vector<double> parse_doubles(const std::string& key, const std::string& v) {
    for (const char* kind : {"linspace:", "log:"}) {
        if (v.rfind(kind, 0) == 0) {
            const auto parts = split(v.substr(std::string(kind).size()), ':');
            if (parts.size() != 3) throw ConfigError(key + ": range needs lo:hi:n");
            const double lo = parse_double(key, parts[0]), hi = parse_double(key, parts[1]);
            const auto n = static_cast<std::size_t>(parse_uint(key, parts[2]));
            if (n == 0) throw ConfigError(key + ": range needs n >= 1");
            if (std::string(kind) == "log") {
                if (!(lo > 0.0) || !(hi > 0.0)) throw ConfigError(key + ": log range needs positive bounds");
            }
            return std::string(kind) == "log:" ? log_grid(lo, hi, n) : linspace(lo, hi, n);
        }
    }
    std::vector<double> out;
    for (const auto& s : split(v, ',')) out.push_back(parse_double(key, s));
    if (out.empty()) throw ConfigError(key + ": empty list");
    return out;
}

inline std::vector<std::size_t> parse_uints(const std::string& key, const std::string& v) {
    std::vector<std::size_t> out;
    if (v.empty()) return out;
    for (const auto& s : split(v, ',')) out.push_back(static_cast<std::size_t>(parse_uint(key, s)));
    return out;
}

}  // namespace detail

/// Parses the text of a configuration file; `origin` prefixes error messages.
inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
    using namespace detail;
    ExperimentConfig c;
    std::map<std::string, std::pair<std::string, std::size_t>> kv;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        if (kv.count(key)) throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        kv[key] = {trim(line.substr(eq + 1)), lineno};
    }

    std::ostringstream canon;
    for (const auto& [key, val] : kv) {
        const auto& v = val.first;
        const std::string where = origin + ":" + std::to_string(val.second) + ": " + key;
        canon << key << '=' << v << '\n';
        if (key == "name") c.name = v;
        else if (key == "scenario") c.scenario = v;
        else if (key == "seed") c.seed = parse_uint(where, v);
        else if (key == "output") c.output = v;
        else if (key == "workers") c.workers = static_cast<unsigned>(parse_uint(where, v));
        else if (key == "field") c.field = v;
        else if (key == "field.dim") c.dim = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "field.m") c.example_m = parse_double(where, v);
        else if (key == "field.p") c.example_p = parse_double(where, v);
        else if (key == "field.b") c.example_b = parse_doubles(where, v);
        else if (key == "field.q") c.example_q = parse_double(where, v);
        else if (key == "phi") c.phi = v;
        else if (key == "hamiltonian") c.hamiltonian = v;
        else if (key == "horizon") c.horizon = parse_double(where, v);
        else if (key == "x0") c.x0 = parse_doubles(where, v);
        else if (key == "mc.paths") c.paths = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "mc.dt") c.dt = parse_double(where, v);
        else if (key == "mc.antithetic") c.antithetic = parse_bool(where, v);
        else if (key == "gradient.times") c.gradient_times = parse_doubles(where, v);
        else if (key == "gradient.points") c.gradient_points = parse_doubles(where, v);
        else if (key == "gradient.slope_t_max") c.slope_t_max = parse_double(where, v);
        else if (key == "ct") c.ct = parse_double(where, v);
        else if (key == "ct.phi") c.ct_phi = split(v, ',');
        else if (key == "ct.times") c.ct_times = parse_doubles(where, v);
        else if (key == "ct.points") c.ct_points = parse_doubles(where, v);
        else if (key == "ct.paths") c.ct_paths = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "grid.lo") c.grid_lo = parse_double(where, v);
        else if (key == "grid.hi") c.grid_hi = parse_double(where, v);
        else if (key == "grid.dx") c.grid_dx = parse_double(where, v);
        else if (key == "solver.tol") c.tol = parse_double(where, v);
        else if (key == "solver.max_iter") c.max_iter = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "solver.window_factor") c.window_factor = parse_double(where, v);
        else if (key == "solver.quad_nodes") c.quad_nodes = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "solver.transition_paths") c.transition_paths = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "solver.transition_dt") c.transition_dt = parse_double(where, v);
        else if (key == "solver.mollify") c.mollify = parse_uints(where, v);
        else if (key == "fbsde.steps") c.fbsde_steps = parse_uints(where, v);
        else if (key == "fbsde.paths") c.fbsde_paths = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "fbsde.regression_paths") c.regression_paths = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "fbsde.regression_steps") c.regression_steps = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "control.points") c.control_points = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "control.policies") c.policies = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "control.subintervals") c.subintervals = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "control.paths") c.control_paths = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "control.steps") c.control_steps = static_cast<std::size_t>(parse_uint(where, v));
        else if (key == "hypothesis.radius") c.hypothesis_radius = parse_double(where, v);
        else if (key == "hypothesis.samples") c.hypothesis_samples = static_cast<std::size_t>(parse_uint(where, v));
        else throw ConfigError(where + ": unknown key");
    }
    c.source = canon.str();

    // Schema checks.
    if (c.scenario.empty()) throw ConfigError(origin + ": scenario: missing");
    if (!known_scenarios().count(c.scenario)) throw ConfigError(origin + ": scenario: unknown scenario '" + c.scenario + "'");
    if (c.field != "ou" && c.field != "brownian" && c.field != "example")
        throw ConfigError(origin + ": field: expected ou, brownian or example, got '" + c.field + "'");
    if (c.dim == 0) throw ConfigError(origin + ": field.dim: must be >= 1");
    if (c.x0.size() != c.dim) throw ConfigError(origin + ": x0: needs field.dim coordinates");
    if (!(c.horizon > 0.0)) throw ConfigError(origin + ": horizon: must be > 0");
    if (c.paths == 0 || c.transition_paths == 0 || c.fbsde_paths == 0 || c.control_paths == 0)
        throw ConfigError(origin + ": path counts must be >= 1");
    if (c.hamiltonian != "zero" && c.hamiltonian != "neg_abs" && c.hamiltonian != "control" &&
        c.hamiltonian.rfind("const:", 0) != 0)
        throw ConfigError(origin + ": hamiltonian: expected zero, neg_abs, const:c or control, got '" + c.hamiltonian + "'");
    if (!(c.grid_hi > c.grid_lo) || !(c.grid_dx > 0.0)) throw ConfigError(origin + ": grid: need lo < hi and dx > 0");
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path + ": cannot open config file");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str(), path);
}

/// Hash of the canonical (sorted key = value) form.
inline std::uint64_t config_hash(const ExperimentConfig& c) { return fnv1a64(c.source); }

/// The coefficient field named by the configuration.
inline CoefficientField build_field(const ExperimentConfig& c) {
    if (c.field == "ou") return make_ornstein_uhlenbeck(c.dim);
    if (c.field == "brownian") return make_brownian(c.dim);
    ExampleFamilyParams p;
    p.dim = c.dim;
    p.m = c.example_m;
    p.p = c.example_p;
    p.b_coeffs = c.example_b;
    p.q = c.example_q * Mat::Identity(static_cast<Eigen::Index>(c.dim), static_cast<Eigen::Index>(c.dim));
    try {
        return make_example_family(p);
    } catch (const AdmissibilityError& e) {
        throw ConfigError(std::string("field: ") + e.what());
    }
}

}  // namespace hjblab
