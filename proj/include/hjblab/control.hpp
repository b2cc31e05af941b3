#pragma once

// Stochastic control on top of the mild solution: Hamiltonian and argmin
// selector over a discretized control set, closed-loop simulation, cost
// estimation, Girsanov reweighting and the value inequality v <= J.

#include "hjblab/coefficients.hpp"
#include "hjblab/errors.hpp"
#include "hjblab/mild_solver.hpp"
#include "hjblab/numerics.hpp"
#include "hjblab/random.hpp"
#include "hjblab/semigroup.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace hjblab {

/// Control set U (finite, enumerated), running cost l(x,u), action r(x,u) in R^N, terminal cost phi.
struct ControlProblem {
    std::string name;
    std::size_t dim = 1;
    std::size_t control_dim = 1;
    std::vector<double> controls;  // [index][control_dim]
    std::function<double(std::span<const double> x, std::span<const double> u)> l;
    std::function<void(std::span<const double> x, std::span<const double> u, std::span<double> out)> r;
    BoundedFunction phi;
    double bound_c = 1.0;
    bool x_independent = false;

    std::size_t size() const { return controls.size() / control_dim; }
    std::span<const double> control(std::size_t i) const { return {controls.data() + i * control_dim, control_dim}; }

    /// Caches l and r per control when they do not depend on x.
    void finalize() {
        l_table_.clear();
        r_table_.clear();
        if (!x_independent) return;
        const std::vector<double> x(dim, 0.0);
        std::vector<double> out(dim);
        for (std::size_t i = 0; i < size(); ++i) {
            l_table_.push_back(l(x, control(i)));
            r(x, control(i), out);
            r_table_.insert(r_table_.end(), out.begin(), out.end());
        }
    }

    double running(std::span<const double> x, std::size_t i) const {
        return l_table_.empty() ? l(x, control(i)) : l_table_[i];
    }

    void action(std::span<const double> x, std::size_t i, std::span<double> out) const {
        if (r_table_.empty()) {
            r(x, control(i), out);
        } else {
            std::copy_n(r_table_.data() + i * dim, dim, out.begin());
        }
    }

private:
    std::vector<double> l_table_;
    std::vector<double> r_table_;
};

/// The 1-D benchmark: U = [-1, 1] on `points` nodes, l = u^2/2, r = u, phi = cos, C = 3/2.
inline ControlProblem make_quadratic_problem(std::size_t points = 101, BoundedFunction phi = make_builtin_function("cos")) {
    ControlProblem p;
    p.name = "quadratic";
    p.dim = 1;
    p.control_dim = 1;
    p.controls = linspace(-1.0, 1.0, points);
    p.l = [](std::span<const double>, std::span<const double> u) { return 0.5 * u[0] * u[0]; };
    p.r = [](std::span<const double>, std::span<const double> u, std::span<double> out) { out[0] = u[0]; };
    p.phi = std::move(phi);
    p.bound_c = 1.5;
    p.x_independent = true;
    p.finalize();
    return p;
}

struct HamiltonianValue {
    double value = 0.0;
    std::size_t index = 0;
};

/// min over the enumerated U of l(x,u) + z . r(x,u); ties go to the smallest index.
inline HamiltonianValue hamiltonian(const ControlProblem& p, std::span<const double> x, std::span<const double> z) {
    HamiltonianValue best{std::numeric_limits<double>::infinity(), 0};
    std::vector<double> r(p.dim);
    for (std::size_t i = 0; i < p.size(); ++i) {
        p.action(x, i, r);
        double v = p.running(x, i);
        for (std::size_t d = 0; d < p.dim; ++d) v += z[d] * r[d];
        if (v < best.value) best = {v, i};
    }
    return best;
}

/// l(x,u_i) + z . r(x,u_i) evaluated exactly as in `hamiltonian`.
inline double hamiltonian_term(const ControlProblem& p, std::span<const double> x, std::span<const double> z,
                               std::size_t i) {
    std::vector<double> r(p.dim);
    p.action(x, i, r);
    double v = p.running(x, i);
    for (std::size_t d = 0; d < p.dim; ++d) v += z[d] * r[d];
    return v;
}

struct LipschitzVerdict {
    double fitted_c = 0.0;       // sup |psi(x,z) - psi(x',z')| / (|z-z'| + |x-x'|(1+|z|+|z'|))
    double max_psi_at_zero = 0.0;
    bool lipschitz_holds = true; // fitted_c <= 1.1 C
    bool bound_holds = true;     // |psi(x, 0)| <= C
    bool holds() const { return lipschitz_holds && bound_holds; }
};

/// Samples pairs in balls of radius 3; half the pairs share x so the z-quotient is attained.
inline LipschitzVerdict check_hamiltonian_lipschitz(const ControlProblem& p, std::size_t samples, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "hamiltonian-lipschitz", 0));
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    const std::size_t n = p.dim;
    std::vector<double> x(n), x2(n), z(n), z2(n), zero(n, 0.0);
    LipschitzVerdict v;
    for (std::size_t s = 0; s < samples; ++s) {
        double dz = 0.0, dx = 0.0, nz = 0.0, nz2 = 0.0;
        for (std::size_t d = 0; d < n; ++d) {
            x[d] = u(rng);
            x2[d] = s % 2 == 0 ? x[d] : u(rng);
            z[d] = u(rng);
            z2[d] = u(rng);
            dz += (z[d] - z2[d]) * (z[d] - z2[d]);
            dx += (x[d] - x2[d]) * (x[d] - x2[d]);
            nz += z[d] * z[d];
            nz2 += z2[d] * z2[d];
        }
        const double denom = std::sqrt(dz) + std::sqrt(dx) * (1.0 + std::sqrt(nz) + std::sqrt(nz2));
        if (denom > 0.0) {
            const double q = std::abs(hamiltonian(p, x, z).value - hamiltonian(p, x2, z2).value) / denom;
            v.fitted_c = std::max(v.fitted_c, q);
        }
        v.max_psi_at_zero = std::max(v.max_psi_at_zero, std::abs(hamiltonian(p, x, zero).value));
    }
    v.lipschitz_holds = v.fitted_c <= 1.1 * p.bound_c;
    v.bound_holds = v.max_psi_at_zero <= p.bound_c;
    return v;
}

/// |l| + |r| <= C on sampled (x, u).
inline bool check_problem_bounds(const ControlProblem& p, std::size_t samples, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "problem-bounds", 0));
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    std::vector<double> x(p.dim), r(p.dim);
    for (std::size_t s = 0; s < samples; ++s) {
        for (auto& v : x) v = u(rng);
        for (std::size_t i = 0; i < p.size(); ++i) {
            p.action(x, i, r);
            double rn = 0.0;
            for (double v : r) rn += v * v;
            if (std::abs(p.running(x, i)) + std::sqrt(rn) > p.bound_c * (1.0 + 1e-12)) return false;
        }
    }
    return true;
}

/// The PDE nonlinearity of the problem: psi(x,z) = -min_u {l + z.r}, with the
/// Lipschitz constant taken from the inflated sampled fit.
inline HamiltonianSpec hamiltonian_spec(std::shared_ptr<const ControlProblem> p, double lipschitz) {
    HamiltonianSpec h;
    h.name = "control:" + p->name;
    h.psi = [p](std::span<const double> x, std::span<const double> z) { return -hamiltonian(*p, x, z).value; };
    h.lipschitz = lipschitz;
    h.bounded_at_zero = true;
    return h;
}

inline HamiltonianSpec hamiltonian_spec(const ControlProblem& p, std::size_t samples = 2000, std::uint64_t seed = 1) {
    const auto verdict = check_hamiltonian_lipschitz(p, samples, seed);
    return hamiltonian_spec(std::make_shared<const ControlProblem>(p),
                            1.1 * std::max(verdict.fitted_c, verdict.max_psi_at_zero));
}

/// gamma~(t, x) = argmin_u l(x,u) + (G grad v)(t,x) . r(x,u).
class FeedbackSelector {
public:
    FeedbackSelector(std::shared_ptr<const ControlProblem> p, std::shared_ptr<const MildSolution> v)
        : p_(std::move(p)), v_(std::move(v)) {
        if (v_->times.empty() || v_->wgrad.size() != v_->times.size())
            throw MissingGradientError("feedback_selector: solution carries no weighted gradients");
        for (const auto& g : v_->wgrad)
            if (static_cast<std::size_t>(g.size()) != v_->grid.size() * v_->dim())
                throw MissingGradientError("feedback_selector: weighted-gradient slice has the wrong size");
    }

    /// Returns the control index; z receives (G grad v)(t, x).
    std::size_t operator()(double t, std::span<const double> x, std::span<double> z) const {
        v_->wgrad_at(std::min(t, v_->horizon), x, z);
        return hamiltonian(*p_, x, z).index;
    }

    std::size_t operator()(double t, std::span<const double> x) const {
        std::vector<double> z(p_->dim);
        return (*this)(t, x, z);
    }

    const ControlProblem& problem() const { return *p_; }
    const MildSolution& solution() const { return *v_; }

private:
    std::shared_ptr<const ControlProblem> p_;
    std::shared_ptr<const MildSolution> v_;
};

inline FeedbackSelector feedback_selector(const ControlProblem& p, const MildSolution& v) {
    return FeedbackSelector(std::make_shared<const ControlProblem>(p), std::make_shared<const MildSolution>(v));
}

/// Open-loop (ignores x) or feedback control law; returns a control index.
struct Policy {
    std::string kind;  // "open_loop" | "feedback"
    std::function<std::size_t(std::size_t step, double t, std::span<const double> x)> select;
};

inline Policy open_loop_policy(std::vector<std::size_t> per_step) {
    return {"open_loop", [s = std::move(per_step)](std::size_t k, double, std::span<const double>) { return s.at(k); }};
}

inline Policy constant_policy(std::size_t index) {
    return {"open_loop", [index](std::size_t, double, std::span<const double>) { return index; }};
}

/// Piecewise constant over equal blocks of the `steps` grid steps.
inline Policy piecewise_policy(std::vector<std::size_t> per_block, std::size_t steps) {
    std::vector<std::size_t> per_step(steps);
    for (std::size_t k = 0; k < steps; ++k) per_step[k] = per_block[k * per_block.size() / steps];
    return open_loop_policy(std::move(per_step));
}

inline Policy feedback_policy(FeedbackSelector sel) {
    return {"feedback", [sel = std::move(sel)](std::size_t, double t, std::span<const double> x) { return sel(t, x); }};
}

/// Paths of the controlled equation dX = (B + G r(X,u)) dt + G dW, or, under
/// the reference measure, of the uncontrolled one with the controls recorded.
struct AdmissibleControlRun {
    PathEnsemble ensemble;
    std::vector<std::size_t> controls;  // [path][step]
    std::vector<double> running_cost;   // [path]: sum l(X_k, u_k) dt
    std::vector<double> terminal_cost;  // [path]: phi(X_K)
    std::vector<double> log_weight;     // [path]: sum r.dW - |r|^2 dt / 2 (reference measure only)
    bool reference_measure = false;
    std::string policy_kind;

    std::size_t control(std::size_t m, std::size_t k) const { return controls[m * ensemble.steps() + k]; }
};

inline AdmissibleControlRun simulate_controlled(const ControlProblem& p, const CoefficientField& field,
                                                const Policy& policy, const Vec& x0, std::span<const double> grid,
                                                std::size_t paths, std::uint64_t seed, const MCConfig& opts = {},
                                                bool reference_measure = false) {
    if (field.dim != p.dim) throw DimensionError("simulate_controlled: field and problem dimensions differ");
    if (paths == 0 || grid.size() < 2) throw std::invalid_argument("simulate_controlled: need paths and >= 2 times");
    const std::size_t n = field.dim;
    const std::size_t steps = grid.size() - 1;
    AdmissibleControlRun run;
    run.reference_measure = reference_measure;
    run.policy_kind = policy.kind;
    auto& ens = run.ensemble;
    ens.dim = n;
    ens.paths = paths;
    ens.times.assign(grid.begin(), grid.end());
    ens.seed = seed;
    ens.scheme = opts.scheme == Scheme::tamed_euler ? "tamed_euler_maruyama" : "euler_maruyama";
    ens.states.resize(paths * (steps + 1) * n);
    ens.increments.resize(paths * steps * n);
    run.controls.resize(paths * steps);
    run.running_cost.assign(paths, 0.0);
    run.terminal_cost.resize(paths);
    if (reference_measure) run.log_weight.assign(paths, 0.0);
    const double guard = detail::auto_guard(opts, {x0});
    parallel_for(block_count(paths), opts.workers, [&](std::size_t b) {
        const std::size_t first = b * kPathBlock;
        const std::size_t count = std::min(kPathBlock, paths - first);
        BlockNoise noise(seed, b, count, n, opts.antithetic, false);
        std::vector<double> x(count * n), drift, diff, r(count * n);
        for (std::size_t q = 0; q < count; ++q)
            for (std::size_t d = 0; d < n; ++d) x[q * n + d] = x0[static_cast<Eigen::Index>(d)];
        auto record = [&](std::size_t k) {
            for (std::size_t q = 0; q < count; ++q)
                std::copy_n(x.data() + q * n, n, ens.states.data() + ((first + q) * (steps + 1) + k) * n);
        };
        record(0);
        for (std::size_t k = 0; k < steps; ++k) {
            const double dt = grid[k + 1] - grid[k];
            for (std::size_t q = 0; q < count; ++q) {
                const std::span<const double> xq(x.data() + q * n, n);
                const std::size_t i = policy.select(k, grid[k], xq);
                if (i >= p.size()) throw std::out_of_range("simulate_controlled: policy returned an index outside U");
                run.controls[(first + q) * steps + k] = i;
                run.running_cost[first + q] += p.running(xq, i) * dt;
                p.action(xq, i, std::span<double>(r.data() + q * n, n));
            }
            const auto dw = noise.next(dt);
            for (std::size_t q = 0; q < count; ++q)
                std::copy_n(dw.data() + q * n, n, ens.increments.data() + ((first + q) * steps + k) * n);
            // diff holds G(X_k) after the step.
            detail::euler_step(field, opts.scheme, x, dw, dt, drift, diff, guard);
            for (std::size_t q = 0; q < count; ++q) {
                const double* rq = r.data() + q * n;
                if (reference_measure) {
                    double lw = 0.0;
                    for (std::size_t d = 0; d < n; ++d) lw += rq[d] * dw[q * n + d] - 0.5 * rq[d] * rq[d] * dt;
                    run.log_weight[first + q] += lw;
                } else {
                    const double* gq = diff.data() + q * n * n;
                    for (std::size_t d = 0; d < n; ++d) {
                        double a = 0.0;
                        for (std::size_t e = 0; e < n; ++e) a += gq[d * n + e] * rq[e];
                        x[q * n + d] += a * dt;
                    }
                }
            }
            record(k + 1);
        }
        for (std::size_t q = 0; q < count; ++q)
            run.terminal_cost[first + q] = p.phi(std::span<const double>(x.data() + q * n, n));
    });
    return run;
}

/// Discrete exponential-martingale weights of a reference-measure run.
inline std::vector<double> girsanov_weight(const AdmissibleControlRun& run, double min_ess_fraction = 0.1) {
    if (!run.reference_measure) return std::vector<double>(run.ensemble.paths, 1.0);
    std::vector<double> w(run.log_weight.size());
    double s = 0.0, s2 = 0.0;
    for (std::size_t m = 0; m < w.size(); ++m) {
        w[m] = std::exp(run.log_weight[m]);
        s += w[m];
        s2 += w[m] * w[m];
    }
    const double ess = s2 > 0.0 ? s * s / s2 : 0.0;
    if (!(ess >= min_ess_fraction * static_cast<double>(w.size()))) {
        std::ostringstream os;
        os << "effective sample size " << ess << " below " << min_ess_fraction << " x " << w.size();
        throw DegenerateWeightsError(os.str());
    }
    return w;
}

struct CostEstimate {
    double j = 0.0;
    double se = 0.0;
};

/// Mean of sum l dt + phi(X_K), importance-weighted for reference-measure runs.
inline CostEstimate cost(const AdmissibleControlRun& run, double min_ess_fraction = 0.1) {
    const auto w = girsanov_weight(run, min_ess_fraction);
    detail::Moments m;
    for (std::size_t q = 0; q < w.size(); ++q) m.add(w[q] * (run.running_cost[q] + run.terminal_cost[q]));
    return {m.mean(), m.se()};
}

struct ValueCheckConfig {
    std::size_t policies = 256;
    std::size_t subintervals = 8;
    std::size_t paths = 4000;
    std::size_t steps = 200;
    std::uint64_t seed = 1;
    double feedback_floor = 2e-2;  // feedback budget max(3 SE, floor)
    unsigned workers = 1;
};

struct ValueReport {
    double v0 = 0.0;
    double feedback_j = 0.0;
    double feedback_se = 0.0;
    bool feedback_ok = false;
    std::vector<double> policy_j;
    std::vector<double> policy_se;
    double best_openloop_j = 0.0;
    std::size_t violations = 0;        // policies with v0 > J + 3 SE
    std::size_t selector_checks = 0;
    std::size_t selector_violations = 0;  // steps where psi != l + z.r at the selected control
    bool all_hold() const { return violations == 0 && feedback_ok && selector_violations == 0; }
};

/// v(t0, x0) against sampled piecewise-constant open-loop costs (common random
/// numbers) and the closed-loop feedback cost; checks the selector identity along closed-loop paths.
inline ValueReport verify_value_inequality(const ControlProblem& p, const CoefficientField& field, const MildSolution& v,
                                           const Vec& x0, double t0, const ValueCheckConfig& cfg = {}) {
    ValueReport rep;
    rep.v0 = v.value(t0, std::span<const double>(x0.data(), static_cast<std::size_t>(x0.size())));
    const auto grid = linspace(t0, v.horizon, cfg.steps + 1);
    const std::uint64_t path_seed = derive_seed(cfg.seed, "control-paths", 0);
    rep.policy_j.resize(cfg.policies);
    rep.policy_se.resize(cfg.policies);
    parallel_for(cfg.policies, cfg.workers, [&](std::size_t i) {
        Rng rng(derive_seed(cfg.seed, "open-loop-policy", i));
        std::uniform_int_distribution<std::size_t> pick(0, p.size() - 1);
        std::vector<std::size_t> blocks(cfg.subintervals);
        for (auto& b : blocks) b = pick(rng);
        const auto run = simulate_controlled(p, field, piecewise_policy(blocks, cfg.steps), x0, grid, cfg.paths, path_seed);
        const auto c = cost(run);
        rep.policy_j[i] = c.j;
        rep.policy_se[i] = c.se;
    });
    rep.best_openloop_j = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < cfg.policies; ++i) {
        rep.best_openloop_j = std::min(rep.best_openloop_j, rep.policy_j[i]);
        if (rep.v0 > rep.policy_j[i] + 3.0 * rep.policy_se[i]) ++rep.violations;
    }

    const auto sel = feedback_selector(p, v);
    const auto run = simulate_controlled(p, field, feedback_policy(sel), x0, grid, cfg.paths, path_seed);
    const auto c = cost(run);
    rep.feedback_j = c.j;
    rep.feedback_se = c.se;
    rep.feedback_ok = std::abs(c.j - rep.v0) <= std::max(3.0 * c.se, cfg.feedback_floor);

    std::vector<double> z(p.dim);
    for (std::size_t m = 0; m < run.ensemble.paths; ++m)
        for (std::size_t k = 0; k < cfg.steps; ++k) {
            const auto x = run.ensemble.state(m, k);
            v.wgrad_at(grid[k], x, z);
            const double psi = hamiltonian(p, x, z).value;
            ++rep.selector_checks;
            if (psi - hamiltonian_term(p, x, z, run.control(m, k)) != 0.0) ++rep.selector_violations;
        }
    return rep;
}

}  // namespace hjblab
