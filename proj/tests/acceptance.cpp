// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run all criteria
//   acceptance 2 7        run a subset

#include "hjblab/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <memory>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

using namespace hjblab;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    std::function<Outcome()> check;
};

class Detail {
public:
    template <class T>
    Detail& operator<<(const T& v) {
        os_ << v;
        return *this;
    }
    std::string str() const { return os_.str(); }

private:
    std::ostringstream os_;
};

double ou_cos(double t, double x) {
    const double var = (1.0 - std::exp(-2.0 * t)) / 2.0;
    return std::cos(x * std::exp(-t)) * std::exp(-var / 2.0);
}

Vec v1(double x) { return Vec::Constant(1, x); }

std::vector<Vec> points(const std::vector<double>& xs) {
    std::vector<Vec> p;
    for (double x : xs) p.push_back(v1(x));
    return p;
}

CoefficientField example_1d() {
    ExampleFamilyParams p;
    p.dim = 1;
    p.m = 0.4;
    p.p = 1.0;
    p.b_coeffs = {1.0};
    p.q = Mat::Identity(1, 1);
    return make_example_family(p);
}

const CoefficientField& ou() {
    static const CoefficientField f = make_ornstein_uhlenbeck(1);
    return f;
}

// ---------------------------------------------------------------------------
// Shared fixtures: C_T measured on the OU field, and the two mild problems.

double measured_ct() {
    static const double ct = [] {
        MCConfig mc;
        mc.paths = 4000;
        mc.seed = 101;
        const std::vector<BoundedFunction> set{make_builtin_function("cos"), make_builtin_function("tanh:50")};
        const auto est = estimate_CT(ou(), set, 1.0, log_grid(1e-3, 1.0, 10), points(linspace(-2.0, 2.0, 41)), mc);
        return est.c_t_inflated;
    }();
    return ct;
}

const std::vector<std::size_t>& mollifier_levels() {
    static const std::vector<std::size_t> n{2, 4, 8, 16};
    return n;
}

// OU, phi = cos, psi = -|z| (L = 1), with mollified companions.
const GammaOperator& neg_abs_gamma() {
    static const GammaOperator g = [] {
        SolverConfig cfg;
        cfg.transition.paths = 4096;
        cfg.transition.seed = 202;
        std::vector<BoundedFunction> phis{make_builtin_function("cos")};
        for (std::size_t n : mollifier_levels()) phis.push_back(mollify(phis[0], neg_abs_hamiltonian(), n, 1).phi_n);
        return GammaOperator(ou(), SpatialGrid::with_spacing(1, -4.5, 4.5, 0.1), 1.0, measured_ct(), 1.0, cfg, phis);
    }();
    return g;
}

const MildSolution& neg_abs_solution() {
    static const MildSolution v = extend_to_full_interval(neg_abs_gamma(), 0, neg_abs_hamiltonian());
    return v;
}

// The control benchmark: U = [-1, 1], l = u^2/2, r = u, phi = cos on OU.
const ControlProblem& control_problem() {
    static const ControlProblem p = make_quadratic_problem(101, make_builtin_function("cos"));
    return p;
}

const HamiltonianSpec& control_hamiltonian() {
    static const HamiltonianSpec h = hamiltonian_spec(control_problem(), 2000, 303);
    return h;
}

const MildSolution& control_solution() {
    static const MildSolution v = [] {
        SolverConfig cfg;
        cfg.transition.paths = 16384;
        cfg.transition.dt = 1e-3;
        cfg.transition.seed = 404;
        const auto& h = control_hamiltonian();
        const GammaOperator g(ou(), SpatialGrid::with_spacing(1, -4.5, 4.5, 0.1), 1.0, measured_ct(), h.lipschitz, cfg,
                              {control_problem().phi});
        return extend_to_full_interval(g, 0, h);
    }();
    return v;
}

// ---------------------------------------------------------------------------

Outcome ou_oracle() {
    Detail d;
    bool ok = true;
    MCConfig mc;
    mc.paths = 100000;
    mc.seed = 11;
    const auto phi = make_builtin_function("cos");
    const std::vector<double> xs{-1.0, 0.0, 1.0};
    double worst_mc = 0.0, worst_fd = 0.0;
    for (double t : {0.1, 0.5, 1.0}) {
        const auto s = apply_semigroup(ou(), phi, t, points(xs), mc);
        const auto fd = fd_reference_solve(ou(), phi, 8.0, {800, 400}, t, points(xs));
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double exact = ou_cos(t, xs[i]);
            const double err = std::abs(s.values[i] - exact);
            const double budget = std::max(3.0 * s.se[i], 1e-2);
            ok = ok && err <= budget;
            worst_mc = std::max(worst_mc, err / budget);
            const double fe = std::abs(fd.values[i] - exact);
            ok = ok && fe <= 2e-3;
            worst_fd = std::max(worst_fd, fe);
        }
    }
    d << "max MC error/budget " << worst_mc << ", max FD error " << worst_fd << " (budget 2e-3)";
    return {ok, d.str()};
}

Outcome gradient_rate() {
    const auto field = example_1d();
    const auto phi = make_builtin_function("tanh:50");
    const auto times = log_grid(1e-3, 1.0, 13);
    const auto pts = points(linspace(-0.4, 0.4, 9));
    // Fixed FD step tied to the smallest time.
    const double h = 0.1 * std::sqrt(times.front()) * field.diffusion(v1(0.4)).norm();
    MCConfig a;
    a.paths = 20000;
    a.seed = 21;
    a.fd_step = h;
    MCConfig b = a;
    b.paths = 40000;
    b.seed = 22;
    b.fd_step = h / 2.0;
    const auto pa = gradient_profile(field, phi, times, pts, a);
    const auto pb = gradient_profile(field, phi, times, pts, b);
    std::vector<double> wa, wb;
    double var = 0.0, peak = 0.0;
    bool finite = true;
    for (std::size_t i = 0; i < times.size(); ++i) {
        wa.push_back(std::sqrt(times[i]) * pa.sup_wgrad[i]);
        wb.push_back(std::sqrt(times[i]) * pb.sup_wgrad[i]);
        finite = finite && std::isfinite(wa[i]) && std::isfinite(wb[i]);
        var = std::max(var, std::abs(wb[i] - wa[i]) / wa[i]);
        peak = std::max(peak, wa[i]);
    }
    // No growth of the weighted profile as t -> 0: the three smallest times agree within 20%.
    const double lo3 = std::min({wa[0], wa[1], wa[2]}), hi3 = std::max({wa[0], wa[1], wa[2]});
    const double plateau = (hi3 - lo3) / hi3;
    std::vector<double> st, sv;
    for (std::size_t i = 0; i < times.size(); ++i)
        if (times[i] >= 2e-3 - 1e-15 && times[i] <= 5e-2 + 1e-15) {
            st.push_back(times[i]);
            sv.push_back(pa.sup_wgrad[i]);
        }
    const double slope = loglog_slope(st, sv);
    const bool ok = finite && plateau < 0.2 && var < 0.2 && std::abs(slope + 0.5) <= 0.15;
    Detail d;
    d << "sup t^1/2|G grad| = " << peak << ", small-t plateau spread " << plateau << ", refinement change " << var
      << " (< 0.2), slope " << slope << " over " << st.size() << " times";
    return {ok, d.str()};
}

Outcome c1_bounded() {
    const auto field = example_1d();
    MCConfig mc;
    mc.paths = 20000;
    mc.seed = 31;
    const auto times = log_grid(1e-3, 0.1, 7);
    const auto prof = gradient_profile(field, make_builtin_function("tanh"), times, points(linspace(-1.0, 1.0, 9)), mc);
    const double ref = prof.sup_wgrad.back();
    double worst = 0.0;
    for (double s : prof.sup_wgrad) worst = std::max(worst, s / ref);
    Detail d;
    d << "max_t sup|G grad S(t)phi| / value at t=0.1 = " << worst << " (< 2)";
    return {worst < 2.0, d.str()};
}

Outcome contraction() {
    const auto& g = neg_abs_gamma();
    const auto& v = neg_abs_solution();
    const double ct = measured_ct();
    const double delta = std::min(std::pow(4.0 + 2.0 * std::numbers::pi * ct, -2.0), 1.0);
    const double radius = 2.0 * (1.0 + 2.0 * ct) * (1.0 + delta);
    // Each window uses its own terminal datum in place of phi, a ball no larger than R.
    bool ok = std::abs(g.plan().delta - delta) <= 1e-15 * delta && v.stayed_in_ball &&
              std::abs(v.ball_radius[0] - radius) <= 1e-12 * radius;
    double worst = 0.0, fill = 0.0;
    for (std::size_t w = 0; w < v.windows; ++w) {
        for (double r : v.contraction_ratios[w]) worst = std::max(worst, r);
        ok = ok && v.ball_radius[w] <= radius * (1.0 + 1e-12) && v.max_iterate_norm[w] <= radius;
        fill = std::max(fill, v.max_iterate_norm[w] / radius);
    }
    ok = ok && worst <= 0.6;
    Detail d;
    d << "C_T = " << ct << ", delta = " << delta << ", " << v.windows << " windows, max ratio " << worst
      << " (<= 0.6), max iterate norm / R = " << fill;
    return {ok, d.str()};
}

Outcome uniqueness() {
    const auto& a = neg_abs_solution();
    const auto b = extend_to_full_interval(neg_abs_gamma(), 0, neg_abs_hamiltonian(), true);
    MildSolution diff = a;
    for (std::size_t j = 0; j < diff.slices(); ++j) {
        diff.values[j] -= b.values[j];
        diff.wgrad[j] -= b.wgrad[j];
    }
    const auto [sup, semi] = knorm(diff);
    Detail d;
    d << "K-norm gap " << sup + semi << " (<= " << 5.0 * a.tol << ")";
    return {sup + semi <= 5.0 * a.tol, d.str()};
}

Outcome mollification() {
    const auto& g = neg_abs_gamma();
    const auto& v = neg_abs_solution();
    const auto h = neg_abs_hamiltonian();
    // Solutions share the transition operator, so the gaps carry little
    // independent noise; 2e-3 allows for it.
    const double noise = 2e-3;
    std::vector<double> gaps;
    std::size_t index = 1;
    for (std::size_t n : mollifier_levels()) {
        const auto vn = extend_to_full_interval(g, index++, mollify(g.terminal_functions()[0], h, n, 1).psi_n);
        double gap = 0.0;
        for (std::size_t j = 0; j < v.slices(); ++j) gap = std::max(gap, (vn.values[j] - v.values[j]).cwiseAbs().maxCoeff());
        gaps.push_back(gap);
    }
    bool ok = true;
    for (std::size_t i = 1; i < gaps.size(); ++i) ok = ok && gaps[i] <= gaps[i - 1] + noise;

    std::mt19937_64 rng(61);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::size_t bad = 0;
    for (std::size_t n : mollifier_levels()) {
        const auto m = mollify(g.terminal_functions()[0], h, n, 1);
        for (int s = 0; s < 1000; ++s) {
            const std::vector<double> x{u(rng)}, z{u(rng)};
            if (!(std::abs(m.psi_n(x, z) - h(x, z)) <= h.lipschitz / static_cast<double>(n))) ++bad;
        }
    }
    ok = ok && bad == 0;
    Detail d;
    d << "sup gaps";
    for (std::size_t i = 0; i < gaps.size(); ++i) d << " n=" << mollifier_levels()[i] << ":" << gaps[i];
    d << "; |psi_n - psi| > L/n at " << bad << " of 4000 points";
    return {ok, d.str()};
}

Outcome fbsde() {
    const auto& v = control_solution();
    const auto& h = control_hamiltonian();
    const auto& phi = control_problem().phi;
    const Vec x0 = v1(0.5);
    const auto study = residual_refinement(v, ou(), h, phi, x0, 0.0, {16, 32, 64, 128}, 4000, 71);
    bool ok = study.ratios.size() == 3;
    double term = 0.0;
    for (const auto& s : study.stats) {
        ok = ok && std::abs(s.terminal_mean) <= 4.0 * s.terminal_se + 1e-15;
        term = std::max(term, std::abs(s.terminal_mean));
    }
    for (double r : study.ratios) ok = ok && r >= 1.2 && r <= 2.8;

    const auto ens = std::make_shared<const PathEnsemble>(simulate_forward(ou(), x0, linspace(0.0, 1.0, 26), 20000, 72));
    const auto id = build_yz(v, ens, ou());
    const auto m = martingale_check(id);
    ok = ok && m.zero_mean && m.isometry;
    const auto reg = regression_backward_solve(ens, h, phi);
    // Combined budget: regression noise at 4 sigma plus the mild-solver accuracy budget.
    const double gap = std::abs(reg.Y(0, 0) - id.Y(0, 0));
    const double budget = 4.0 * reg.y0_se + 2e-2;
    ok = ok && gap <= budget;
    Detail d;
    d << "terminal |mean| " << term << ", ratios";
    for (double r : study.ratios) d << " " << r;
    d << ", martingale worst z " << m.worst_z << ", isometry ratio " << m.ratio << ", Y0 id " << id.Y(0, 0) << " vs reg "
      << reg.Y(0, 0) << " gap " << gap << " (<= " << budget << ")";
    return {ok, d.str()};
}

Outcome control_benchmark() {
    ValueCheckConfig cfg;
    cfg.policies = 256;
    cfg.subintervals = 8;
    cfg.paths = 4000;
    cfg.steps = 200;
    cfg.seed = 81;
    const auto r = verify_value_inequality(control_problem(), ou(), control_solution(), v1(0.5), 0.0, cfg);
    Detail d;
    d << "v0 " << r.v0 << ", feedback J " << r.feedback_j << " +- " << r.feedback_se << ", best open-loop J "
      << r.best_openloop_j << ", violations " << r.violations << "/" << r.policy_j.size() << ", selector mismatches "
      << r.selector_violations << "/" << r.selector_checks;
    return {r.policy_j.size() == 256 && r.all_hold(), d.str()};
}

Outcome hypotheses() {
    bool ok = true;
    Detail d;
    for (const auto& f : {make_ornstein_uhlenbeck(1), make_ornstein_uhlenbeck(2), example_1d()}) {
        const auto rep = check_hypotheses(f, 4.0, 2000, 91);
        ok = ok && rep.all_hold();
        d << f.name << (rep.all_hold() ? " all hold; " : " FAILS; ");
    }
    const auto bm = check_hypotheses(make_brownian(1), 4.0, 2000, 92);
    const bool iii = bm.condition("drift_dominance").holds;
    ok = ok && !iii;
    d << "B=0 drift dominance " << (iii ? "holds" : "fails") << "; ";
    ExampleFamilyParams bad;
    bad.dim = 2;
    bad.m = 0.6;
    bad.p = 1.0;
    bad.b_coeffs = {1.0, 2.0};
    bad.q = Mat::Identity(2, 2);
    bool rejected = false;
    try {
        make_example_family(bad);
    } catch (const AdmissibilityError&) {
        rejected = true;
    }
    ok = ok && rejected;
    d << "m=0.6, b=(1,2) " << (rejected ? "rejected" : "accepted");
    return {ok, d.str()};
}

Outcome determinism() {
    const std::string common = "seed = 17\nfield = ou\nx0 = 0.5\nhorizon = 0.3\nct = 0.8\ngrid.lo = -3\ngrid.hi = 3\n"
                               "grid.dx = 0.2\nsolver.transition_paths = 256\n";
    const std::vector<std::string> configs{
        "scenario = hypothesis_check\nhypothesis.samples = 300\n",
        "scenario = gradient_estimate\nphi = tanh:5\nmc.paths = 2000\ngradient.times = log:0.01:0.3:4\n",
        "scenario = mild_solve\nhamiltonian = neg_abs\nsolver.mollify = 2,4\n",
        "scenario = fbsde_check\nhamiltonian = control\ncontrol.points = 21\nfbsde.steps = 8,16\nfbsde.paths = 500\n"
        "fbsde.regression_paths = 1000\nfbsde.regression_steps = 8\n",
        "scenario = control_benchmark\nhamiltonian = control\ncontrol.points = 21\ncontrol.policies = 8\n"
        "control.paths = 300\ncontrol.steps = 30\n"};
    const auto root = fs::temp_directory_path() / "hjblab_acceptance_determinism";
    fs::remove_all(root);
    bool ok = true;
    std::size_t compared = 0;
    Detail d;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        const auto c = parse_config(common + configs[i]);
        const auto a = run(c, root / (std::to_string(i) + "a"));
        const auto b = run(c, root / (std::to_string(i) + "b"));
        ok = ok && a.files == b.files && a.manifest.at("files") == b.manifest.at("files");
        for (const auto& f : a.files) {
            ++compared;
            if (detail::read_file(a.directory / f) != detail::read_file(b.directory / f)) {
                ok = false;
                d << c.scenario << "/" << f << " differs; ";
            }
        }
    }
    fs::remove_all(root);
    d << compared << " artifacts over " << configs.size() << " scenarios compared byte for byte";
    return {ok, d.str()};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "OU oracle agreement", ou_oracle},
        {2, "weighted gradient rate", gradient_rate},
        {3, "C1 data boundedness", c1_bounded},
        {4, "fixed-point contraction", contraction},
        {5, "uniqueness", uniqueness},
        {6, "mollification convergence", mollification},
        {7, "FBSDE validation", fbsde},
        {8, "control benchmark", control_benchmark},
        {9, "hypothesis checker", hypotheses},
        {10, "determinism", determinism},
    };
    std::set<int> selected;
    for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

    int failed = 0;
    for (const auto& c : all) {
        if (!selected.empty() && !selected.count(c.id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.check();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (!o.pass) ++failed;
        std::printf("%s criterion %d: %s | %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", c.id, c.name.c_str(),
                    o.detail.c_str(), secs);
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
