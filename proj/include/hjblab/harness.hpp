#pragma once

// Scenario orchestration: runs one configured experiment, writes CSV data,
// a JSON report and a manifest with content hashes.
//
// Seeds: every module draws from derive_seed(master, <module tag>, job id),
// so the worker count never changes a result.

#include "hjblab/coefficients.hpp"
#include "hjblab/config.hpp"
#include "hjblab/control.hpp"
#include "hjblab/fbsde.hpp"
#include "hjblab/mild_solver.hpp"
#include "hjblab/semigroup.hpp"

#include "json.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace hjblab {

inline constexpr const char* kVersion = "0.1.0";

using json = nlohmann::json;
namespace fs = std::filesystem;

/// A module error, tagged with the scenario that raised it. The original is nested.
class ScenarioError : public Error {
public:
    ScenarioError(std::string scenario, const std::string& what)
        : Error(scenario + ": " + what), scenario_(std::move(scenario)) {}
    const std::string& scenario() const noexcept { return scenario_; }

private:
    std::string scenario_;
};

struct RunResult {
    fs::path directory;
    json report;
    json manifest;
    std::vector<std::string> files;  // data files, relative to directory
    double wall_time = 0.0;
};

namespace detail {

inline std::string hex64(std::uint64_t h) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

inline std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

/// CSV writer with round-trip float formatting.
class Csv {
public:
    explicit Csv(std::vector<std::string> header) : cols_(header.size()) { row_strings(header); }

    Csv& cell(double v) { return put(format_double(v)); }
    Csv& cell(std::size_t v) { return put(std::to_string(v)); }
    Csv& cell(const std::string& v) { return put(v); }
    void end() {
        if (col_ != cols_) throw std::logic_error("Csv: row has the wrong width");
        os_ << '\n';
        col_ = 0;
    }
    std::string str() const { return os_.str(); }

private:
    Csv& put(const std::string& s) {
        if (col_ > 0) os_ << ',';
        os_ << s;
        ++col_;
        return *this;
    }
    void row_strings(const std::vector<std::string>& v) {
        for (const auto& s : v) put(s);
        end();
    }

    std::ostringstream os_;
    std::size_t cols_ = 0;
    std::size_t col_ = 0;
};

inline json vec_json(const Vec& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline MCConfig mc_config(const ExperimentConfig& c, std::string_view tag) {
    MCConfig mc;
    mc.paths = c.paths;
    mc.dt = c.dt;
    mc.antithetic = c.antithetic;
    mc.workers = c.workers;
    mc.seed = derive_seed(c.seed, tag, 0);
    return mc;
}

inline Vec to_vec(const std::vector<double>& v) { return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())); }

inline std::vector<Vec> points_1d(const std::vector<double>& xs, std::size_t dim) {
    std::vector<Vec> out;
    for (double x : xs) {
        Vec p = Vec::Zero(static_cast<Eigen::Index>(dim));
        p[0] = x;
        out.push_back(p);
    }
    return out;
}

struct Problem {
    BoundedFunction phi;
    HamiltonianSpec ham;
    std::shared_ptr<const ControlProblem> control;
};

inline Problem build_problem(const ExperimentConfig& c) {
    Problem pr;
    try {
        pr.phi = make_builtin_function(c.phi);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("phi: ") + e.what());
    }
    if (c.hamiltonian == "zero") {
        pr.ham = zero_hamiltonian();
    } else if (c.hamiltonian == "neg_abs") {
        pr.ham = neg_abs_hamiltonian();
    } else if (c.hamiltonian == "control") {
        if (c.dim != 1) throw ConfigError("hamiltonian: the control problem is one-dimensional");
        pr.control = std::make_shared<const ControlProblem>(make_quadratic_problem(c.control_points, pr.phi));
        pr.ham = hamiltonian_spec(*pr.control, 2000, derive_seed(c.seed, "control-lipschitz", 0));
    } else {
        pr.ham = constant_hamiltonian(parse_double("hamiltonian", c.hamiltonian.substr(6)));
    }
    return pr;
}

inline SolverConfig solver_config(const ExperimentConfig& c) {
    SolverConfig s;
    s.tol = c.tol;
    s.max_iter = c.max_iter;
    s.window_factor = c.window_factor;
    s.quad_nodes = c.quad_nodes;
    s.transition.paths = c.transition_paths;
    s.transition.dt = c.transition_dt;
    s.transition.seed = derive_seed(c.seed, "transition", 0);
    s.transition.workers = c.workers;
    return s;
}

/// C_T from the configuration or measured (inflated by 10%).
inline json resolve_ct(const ExperimentConfig& c, const CoefficientField& field, double& c_t) {
    if (c.ct) {
        c_t = *c.ct;
        return {{"source", "configured"}, {"value", c_t}};
    }
    std::vector<BoundedFunction> set;
    for (const auto& s : c.ct_phi) set.push_back(make_builtin_function(s));
    std::vector<double> ts;
    for (double t : c.ct_times)
        if (t <= c.horizon) ts.push_back(t);
    if (ts.empty()) throw ConfigError("ct.times: no time inside (0, horizon]");
    MCConfig mc = mc_config(c, "ct");
    mc.paths = c.ct_paths;
    const auto est = estimate_CT(field, set, c.horizon, ts, points_1d(c.ct_points, c.dim), mc);
    c_t = est.c_t_inflated;
    json prof = json::array();
    for (const auto& [t, v] : est.profile) prof.push_back({t, v});
    return {{"source", "measured"}, {"value", c_t}, {"raw", est.c_t}, {"profile", prof}, {"paths", est.paths}};
}

inline json solution_summary(const MildSolution& v, const ExperimentConfig& c) {
    double max_ratio = 0.0;
    for (const auto& w : v.contraction_ratios)
        for (double r : w) max_ratio = std::max(max_ratio, r);
    std::vector<double> x0(c.x0.begin(), c.x0.end());
    return {{"T", v.horizon},
            {"c_t", v.c_t},
            {"lipschitz", v.lipschitz},
            {"delta", v.delta},
            {"window_length", v.window_length},
            {"windows", v.windows},
            {"iterations", v.iterations},
            {"contraction_ratios", v.contraction_ratios},
            {"max_contraction_ratio", max_ratio},
            {"contraction_bound", proof_contraction_bound(v.delta, v.lipschitz, v.c_t)},
            {"ball_radius", v.ball_radius},
            {"max_iterate_norm", v.max_iterate_norm},
            {"stayed_in_ball", v.stayed_in_ball},
            {"fixed_point_residual", v.fixed_point_residual},
            {"quadrature_error", v.quadrature_error},
            {"knorm", {{"sup", v.sup_norm}, {"seminorm", v.seminorm}}},
            {"tol", v.tol},
            {"v0", v.value(0.0, x0)}};
}

inline std::string slices_csv(const MildSolution& v) {
    const std::size_t n = v.dim();
    std::vector<std::string> head{"t"};
    for (std::size_t d = 0; d < n; ++d) head.push_back("x" + std::to_string(d + 1));
    head.push_back("v");
    for (std::size_t d = 0; d < n; ++d) head.push_back("wgrad" + std::to_string(d + 1));
    Csv csv(head);
    for (std::size_t j = 0; j < v.slices(); ++j)
        for (std::size_t i = 0; i < v.grid.size(); ++i) {
            csv.cell(v.times[j]);
            const Vec x = v.grid.node(i);
            for (std::size_t d = 0; d < n; ++d) csv.cell(x[static_cast<Eigen::Index>(d)]);
            csv.cell(v.values[j][static_cast<Eigen::Index>(i)]);
            for (std::size_t d = 0; d < n; ++d) csv.cell(v.wgrad[j][static_cast<Eigen::Index>(i * n + d)]);
            csv.end();
        }
    return csv.str();
}

using Files = std::vector<std::pair<std::string, std::string>>;  // (name, content)

inline json run_gradient_estimate(const ExperimentConfig& c, const CoefficientField& field, Files& files) {
    const auto phi = make_builtin_function(c.phi);
    const auto prof =
        gradient_profile(field, phi, c.gradient_times, points_1d(c.gradient_points, c.dim), mc_config(c, "semigroup"));
    Csv csv({"t", "sup_wgrad", "sup_se", "sqrt_t_sup_wgrad"});
    std::vector<double> weighted, st, sv;
    for (std::size_t i = 0; i < prof.times.size(); ++i) {
        const double t = prof.times[i];
        weighted.push_back(std::sqrt(t) * prof.sup_wgrad[i]);
        csv.cell(t).cell(prof.sup_wgrad[i]).cell(prof.sup_se[i]).cell(weighted.back());
        csv.end();
        if (t <= c.slope_t_max) {
            st.push_back(t);
            sv.push_back(prof.sup_wgrad[i]);
        }
    }
    files.emplace_back("profile.csv", csv.str());
    double peak = 0.0;
    for (double w : weighted) peak = std::max(peak, w);
    json rep{{"phi", c.phi},
             {"phi_sup", phi.sup_norm},
             {"times", prof.times},
             {"sup_wgrad", prof.sup_wgrad},
             {"sup_se", prof.sup_se},
             {"weighted_profile", weighted},
             {"c_t", phi.sup_norm > 0.0 ? peak / phi.sup_norm : 0.0},
             {"paths", c.paths}};
    rep["small_t_slope"] = st.size() >= 2 ? json(loglog_slope(st, sv)) : json(nullptr);
    return rep;
}

inline MildSolution solve_mild(const ExperimentConfig& c, const CoefficientField& field, const Problem& pr, json& rep,
                               std::vector<MildSolution>* mollified = nullptr) {
    double c_t = 0.0;
    rep["c_t_estimate"] = resolve_ct(c, field, c_t);
    const auto grid = SpatialGrid::with_spacing(c.dim, c.grid_lo, c.grid_hi, c.grid_dx);
    std::vector<BoundedFunction> phis{pr.phi};
    std::vector<MollifierPair> pairs;
    if (mollified)
        for (std::size_t n : c.mollify) {
            pairs.push_back(mollify(pr.phi, pr.ham, n, c.dim));
            phis.push_back(pairs.back().phi_n);
        }
    const GammaOperator gamma(field, grid, c.horizon, c_t, pr.ham.lipschitz, solver_config(c), phis);
    auto v = extend_to_full_interval(gamma, 0, pr.ham);
    if (mollified)
        for (std::size_t i = 0; i < pairs.size(); ++i) mollified->push_back(extend_to_full_interval(gamma, i + 1, pairs[i].psi_n));
    return v;
}

inline json run_mild_solve(const ExperimentConfig& c, const CoefficientField& field, Files& files) {
    const auto pr = build_problem(c);
    json rep{{"phi", c.phi}, {"hamiltonian", c.hamiltonian}};
    std::vector<MildSolution> moll;
    const auto v = solve_mild(c, field, pr, rep, &moll);
    rep.update(solution_summary(v, c));
    if (!moll.empty()) {
        json gaps = json::array();
        for (std::size_t i = 0; i < moll.size(); ++i) {
            double gap = 0.0;
            for (std::size_t j = 0; j < v.slices(); ++j)
                gap = std::max(gap, (moll[i].values[j] - v.values[j]).cwiseAbs().maxCoeff());
            gaps.push_back({{"n", c.mollify[i]}, {"sup_gap", gap}});
        }
        rep["mollification"] = gaps;
    }
    files.emplace_back("slices.csv", slices_csv(v));
    return rep;
}

inline json run_fbsde_check(const ExperimentConfig& c, const CoefficientField& field, Files& files) {
    const auto pr = build_problem(c);
    json rep{{"phi", c.phi}, {"hamiltonian", c.hamiltonian}};
    const auto v = solve_mild(c, field, pr, rep);
    rep["solver"] = solution_summary(v, c);
    MCConfig mc = mc_config(c, "fbsde");
    const auto study = residual_refinement(v, field, pr.ham, pr.phi, to_vec(c.x0), 0.0, c.fbsde_steps, c.fbsde_paths,
                                           derive_seed(c.seed, "fbsde", 1), mc);
    Csv csv({"steps", "dt", "rms_residual", "step_mean", "step_se", "terminal_mean", "terminal_se"});
    json by_dt = json::array();
    double term_mean = 0.0, term_se = 0.0, term_z = 0.0;
    for (std::size_t i = 0; i < study.steps.size(); ++i) {
        const auto& s = study.stats[i];
        csv.cell(study.steps[i]).cell(study.dt[i]).cell(study.rms[i]).cell(s.step_mean).cell(s.step_se);
        csv.cell(s.terminal_mean).cell(s.terminal_se);
        csv.end();
        by_dt.push_back(json::array({study.dt[i], study.rms[i]}));
        const double z = s.terminal_se > 0.0 ? std::abs(s.terminal_mean) / s.terminal_se : 0.0;
        if (i == 0 || z >= term_z) {
            term_z = z;
            term_mean = s.terminal_mean;
            term_se = s.terminal_se;
        }
    }
    files.emplace_back("residuals.csv", csv.str());
    rep["terminal_residual"] = {{"mean", term_mean}, {"se", term_se}, {"z", term_z}};
    rep["step_residual_rms_by_dt"] = by_dt;
    rep["refinement_ratios"] = study.ratios;

    const auto ens = std::make_shared<const PathEnsemble>(simulate_forward(
        field, to_vec(c.x0), linspace(0.0, c.horizon, c.regression_steps + 1), c.regression_paths,
        derive_seed(c.seed, "fbsde", 2), mc));
    const auto id = build_yz(v, ens, field);
    const auto m = martingale_check(id);
    json pv = json::array();
    for (std::size_t k = 0; k < m.mean.size(); ++k)
        pv.push_back(m.se[k] > 0.0 ? std::erfc(std::abs(m.mean[k]) / m.se[k] / std::sqrt(2.0)) : 1.0);
    rep["martingale_pvalues"] = pv;
    rep["martingale"] = json{{"worst_z", m.worst_z}, {"zero_mean", m.zero_mean}, {"isometry", m.isometry},
                         {"gap_mean", m.gap_mean}, {"gap_se", m.gap_se}};
    rep["isometry_ratio"] = m.ratio;
    const auto reg = regression_backward_solve(ens, pr.ham, pr.phi);
    const double gap = std::abs(reg.Y(0, 0) - id.Y(0, 0));
    rep["cross_oracle_gap"] = gap;
    rep["y0_identification"] = id.Y(0, 0);
    rep["y0_regression"] = reg.Y(0, 0);
    rep["y0_regression_se"] = reg.y0_se;
    rep["z_energy"] = z_energy(id);
    return rep;
}

inline json run_control_benchmark(const ExperimentConfig& c, const CoefficientField& field, Files& files) {
    if (c.hamiltonian != "control") throw ConfigError("hamiltonian: control_benchmark needs hamiltonian = control");
    const auto pr = build_problem(c);
    json rep{{"phi", c.phi}, {"controls", c.control_points}};
    const auto v = solve_mild(c, field, pr, rep);
    rep["solver"] = solution_summary(v, c);
    ValueCheckConfig vc;
    vc.policies = c.policies;
    vc.subintervals = c.subintervals;
    vc.paths = c.control_paths;
    vc.steps = c.control_steps;
    vc.seed = derive_seed(c.seed, "control", 0);
    vc.workers = c.workers;
    const auto r = verify_value_inequality(*pr.control, field, v, to_vec(c.x0), 0.0, vc);
    Csv csv({"policy", "kind", "J", "SE"});
    for (std::size_t i = 0; i < r.policy_j.size(); ++i) {
        csv.cell(i).cell(std::string("open_loop")).cell(r.policy_j[i]).cell(r.policy_se[i]);
        csv.end();
    }
    csv.cell(r.policy_j.size()).cell(std::string("feedback")).cell(r.feedback_j).cell(r.feedback_se);
    csv.end();
    files.emplace_back("policies.csv", csv.str());
    rep.update(json{{"v0", r.v0},
                {"feedback_J", r.feedback_j},
                {"feedback_SE", r.feedback_se},
                {"feedback_ok", r.feedback_ok},
                {"best_openloop_J", r.best_openloop_j},
                {"n_policies", r.policy_j.size()},
                {"policies_j", r.policy_j},
                {"policies_se", r.policy_se},
                {"violations", r.violations},
                {"selector_checks", r.selector_checks},
                {"selector_violations", r.selector_violations},
                {"all_hold", r.all_hold()},
                {"scope",
                 "v0 is compared with a sampled class of piecewise-constant open-loop policies and with the "
                 "feedback law; the value function itself (an infimum over all admissible systems) is not "
                 "computed"}});
    return rep;
}

inline json run_hypothesis_check(const ExperimentConfig& c, const CoefficientField& field, Files& files) {
    const auto h = check_hypotheses(field, c.hypothesis_radius, c.hypothesis_samples, derive_seed(c.seed, "hypothesis", 0));
    Csv csv({"condition", "holds", "witness_constant", "worst_value", "counterexamples"});
    json conds = json::array();
    for (const auto& r : h.conditions) {
        csv.cell(r.name).cell(std::string(r.holds ? "true" : "false")).cell(r.witness_constant).cell(r.worst_value);
        csv.cell(r.counterexamples);
        csv.end();
        conds.push_back({{"name", r.name},
                         {"status", r.holds ? "holds" : "fails"},
                         {"holds", r.holds},
                         {"witness_constant", r.witness_constant},
                         {"worst_point", vec_json(r.worst_point)},
                         {"worst_value", r.worst_value},
                         {"counterexamples", r.counterexamples},
                         {"detail", r.detail}});
    }
    files.emplace_back("conditions.csv", csv.str());
    std::vector<double> K(h.K.begin() + 1, h.K.end());
    json cn = json::array();
    for (const auto& [n, v] : h.c_n) cn.push_back({n, v});
    return {{"conditions", conds}, {"all_hold", h.all_hold()}, {"nu0", h.nu0}, {"b0", h.b0}, {"K", K},
            {"delta", h.delta}, {"alpha", h.alpha}, {"beta", h.beta}, {"c_n", cn}, {"radius", h.radius},
            {"samples", h.samples}, {"ray_radii", h.ray_radii}, {"cutoff_radii", h.cutoff_radii}};
}

}  // namespace detail

/// Default output root: $HJBLAB_OUTPUT_ROOT, else ./results.
inline fs::path default_output_root() {
    if (const char* env = std::getenv("HJBLAB_OUTPUT_ROOT"); env && *env) return env;
    return "results";
}

/// Directory a configuration writes to under `root`.
inline fs::path output_directory(const ExperimentConfig& c, const fs::path& root) {
    if (c.output.empty()) return root / c.name;
    const fs::path p(c.output);
    return p.is_absolute() ? p : root / p;
}

/// Runs the configured scenario and writes its artifacts into `dir`.
inline RunResult run(const ExperimentConfig& c, const fs::path& dir) {
    const auto start = std::chrono::steady_clock::now();
    const CoefficientField field = build_field(c);
    detail::Files files;
    json rep;
    try {
        if (c.scenario == "gradient_estimate") rep = detail::run_gradient_estimate(c, field, files);
        else if (c.scenario == "mild_solve") rep = detail::run_mild_solve(c, field, files);
        else if (c.scenario == "fbsde_check") rep = detail::run_fbsde_check(c, field, files);
        else if (c.scenario == "control_benchmark") rep = detail::run_control_benchmark(c, field, files);
        else if (c.scenario == "hypothesis_check") rep = detail::run_hypothesis_check(c, field, files);
        else throw ConfigError("scenario: unknown scenario '" + c.scenario + "'");
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        std::throw_with_nested(ScenarioError(c.scenario, e.what()));
    }
    json head{{"name", c.name}, {"scenario", c.scenario}, {"seed", c.seed}, {"field", field.name}, {"dim", c.dim}};
    head.update(rep);
    files.emplace_back("report.json", head.dump(2) + "\n");

    fs::create_directories(dir);
    RunResult out;
    out.directory = dir;
    out.report = head;
    json listed = json::array();
    for (const auto& [name, text] : files) {
        detail::write_file(dir / name, text);
        out.files.push_back(name);
        listed.push_back({{"path", name}, {"bytes", text.size()}, {"fnv1a64", detail::hex64(fnv1a64(text))}});
    }
    out.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.manifest = {{"name", c.name},
                    {"scenario", c.scenario},
                    {"config_hash", detail::hex64(config_hash(c))},
                    {"seed", c.seed},
                    {"workers", c.workers},
                    {"versions",
                     {{"hjblab", kVersion},
                      {"compiler", __VERSION__},
                      {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                    std::to_string(EIGEN_MINOR_VERSION)},
                      {"json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_PATCH)}}},
                    {"files", listed},
                    {"wall_time_seconds", out.wall_time}};
    detail::write_file(dir / "manifest.json", out.manifest.dump(2) + "\n");
    return out;
}

namespace detail {

inline void plot_rows(const json& rep, Csv& csv) {
    const std::string sc = rep.at("scenario");
    auto row = [&](const std::string& series, double group, double x, double y) {
        csv.cell(sc).cell(series).cell(group).cell(x).cell(y);
        csv.end();
    };
    if (sc == "gradient_estimate") {
        const auto& t = rep.at("times");
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double ti = t[i], g = rep.at("sup_wgrad")[i];
            row("sup_wgrad", 0, ti, g);
            row("sqrt_t_sup_wgrad", 0, ti, std::sqrt(ti) * g);
        }
    } else if (sc == "mild_solve" || sc == "fbsde_check" || sc == "control_benchmark") {
        const json& s = sc == "mild_solve" ? rep : rep.at("solver");
        const auto& cr = s.at("contraction_ratios");
        for (std::size_t w = 0; w < cr.size(); ++w)
            for (std::size_t k = 0; k < cr[w].size(); ++k)
                row("contraction_ratio", static_cast<double>(w), static_cast<double>(k + 1), cr[w][k]);
        if (rep.contains("mollification"))
            for (const auto& g : rep.at("mollification")) row("mollification_gap", 0, g.at("n"), g.at("sup_gap"));
    }
    if (sc == "fbsde_check") {
        for (const auto& p : rep.at("step_residual_rms_by_dt")) row("rms_residual", 0, p[0], p[1]);
        const auto& pv = rep.at("martingale_pvalues");
        for (std::size_t k = 0; k < pv.size(); ++k) row("martingale_pvalue", 0, static_cast<double>(k), pv[k]);
    } else if (sc == "control_benchmark") {
        const auto& pol = rep.at("policies_j");
        for (std::size_t i = 0; i < pol.size(); ++i) row("policy_cost", 0, static_cast<double>(i), pol[i]);
        row("feedback_cost", 0, 0, rep.at("feedback_J"));
        row("v0", 0, 0, rep.at("v0"));
    } else if (sc == "hypothesis_check") {
        const auto& cs = rep.at("conditions");
        for (std::size_t i = 0; i < cs.size(); ++i)
            row("witness_constant", cs[i].at("holds") ? 1.0 : 0.0, static_cast<double>(i), cs[i].at("witness_constant"));
    }
}

}  // namespace detail

/// Flattens every report.json in `dir` (or its immediate subdirectories)
/// into `dir/plot_data.csv` with columns scenario,series,group,x,y.
inline fs::path emit_plot_data(const fs::path& dir) {
    std::vector<fs::path> reports;
    if (fs::is_regular_file(dir / "report.json")) reports.push_back(dir / "report.json");
    if (fs::is_directory(dir)) {
        std::vector<fs::path> subs;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_directory() && fs::is_regular_file(e.path() / "report.json")) subs.push_back(e.path() / "report.json");
        std::sort(subs.begin(), subs.end());
        reports.insert(reports.end(), subs.begin(), subs.end());
    }
    if (reports.empty()) throw MissingReportError("no report.json under " + dir.string());
    detail::Csv csv({"scenario", "series", "group", "x", "y"});
    for (const auto& r : reports) {
        json rep;
        try {
            rep = json::parse(detail::read_file(r));
        } catch (const json::exception& e) {
            throw MissingReportError(r.string() + ": unreadable report (" + e.what() + ")");
        }
        detail::plot_rows(rep, csv);
    }
    const auto out = dir / "plot_data.csv";
    detail::write_file(out, csv.str());
    return out;
}

}  // namespace hjblab
