#pragma once

// (X, Y, Z) along forward paths: identification Y = v(t, X), Z = G grad v(t, X),
// discrete diagnostics of dY = psi(X, Z) dt + Z dW, and a least-squares
// backward solver used as an independent cross-check.

#include "hjblab/errors.hpp"
#include "hjblab/mild_solver.hpp"
#include "hjblab/numerics.hpp"
#include "hjblab/semigroup.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

namespace hjblab {

struct FbsdeSolution {
    std::shared_ptr<const PathEnsemble> ensemble;
    std::string tag;          // "identification" | "regression"
    std::size_t paths = 0;
    std::size_t steps = 0;    // K
    std::size_t dim = 0;
    std::vector<double> y;    // [path][0..K]
    std::vector<double> z;    // [path][0..K-1][coord]
    double y0_se = 0.0;       // regression only: SE of the t = t_0 estimate
    double exit_fraction = 0.0;

    double Y(std::size_t m, std::size_t k) const { return y[m * (steps + 1) + k]; }
    std::span<const double> Z(std::size_t m, std::size_t k) const { return {z.data() + (m * steps + k) * dim, dim}; }
    double y0_mean() const {
        double s = 0.0;
        for (std::size_t m = 0; m < paths; ++m) s += Y(m, 0);
        return s / static_cast<double>(paths);
    }
};

/// Y_k = v(t_k, X_k), Z_k = (G grad v)(t_k, X_k) for k < K.
inline FbsdeSolution build_yz(const MildSolution& v, std::shared_ptr<const PathEnsemble> ens,
                              const CoefficientField& field, double max_exit_fraction = 1e-3) {
    const auto& e = *ens;
    if (e.dim != field.dim || e.dim != v.dim()) throw DimensionError("build_yz: dimension mismatch");
    if (e.times.front() < v.times.front() - 1e-12 || e.times.back() > v.horizon + 1e-12)
        throw std::invalid_argument("build_yz: ensemble times must lie in the solution's time range");
    FbsdeSolution s;
    s.ensemble = ens;
    s.tag = "identification";
    s.paths = e.paths;
    s.steps = e.steps();
    s.dim = e.dim;
    s.y.resize(s.paths * (s.steps + 1));
    s.z.resize(s.paths * s.steps * s.dim);
    std::size_t outside = 0;
    for (std::size_t m = 0; m < s.paths; ++m)
        for (std::size_t k = 0; k <= s.steps; ++k) {
            const auto x = e.state(m, k);
            if (!v.grid.contains(x)) ++outside;
            s.y[m * (s.steps + 1) + k] = v.value(e.times[k], x);
            if (k < s.steps) v.wgrad_at(e.times[k], x, std::span<double>(s.z.data() + (m * s.steps + k) * s.dim, s.dim));
        }
    s.exit_fraction = static_cast<double>(outside) / static_cast<double>(s.paths * (s.steps + 1));
    if (s.exit_fraction > max_exit_fraction) {
        std::ostringstream os;
        os << "build_yz: " << s.exit_fraction << " of path states lie outside the evaluation grid (limit "
           << max_exit_fraction << ")";
        throw ExtrapolationError(os.str());
    }
    return s;
}

inline FbsdeSolution build_yz(const MildSolution& v, const PathEnsemble& ens, const CoefficientField& field,
                              double max_exit_fraction = 1e-3) {
    return build_yz(v, std::make_shared<const PathEnsemble>(ens), field, max_exit_fraction);
}

struct ResidualStats {
    double terminal_mean = 0.0;
    double terminal_se = 0.0;
    double terminal_max = 0.0;
    double step_mean = 0.0;
    double step_se = 0.0;
    double step_rms = 0.0;
    double step_max = 0.0;
    double final_step_rms = 0.0;
    double dt = 0.0;  // mean step length
};

/// rho_k = Y_{k+1} - Y_k - psi(X_k, Z_k) dt - Z_k . dW_k, and Y_K - phi(X_K).
/// The final step is reported separately and left out of the step statistics
/// unless include_final is set.
inline ResidualStats backward_residual(const FbsdeSolution& sol, const HamiltonianSpec& ham, const BoundedFunction& phi,
                                       bool include_final = false) {
    const auto& e = *sol.ensemble;
    const std::size_t K = sol.steps, n = sol.dim;
    ResidualStats r;
    r.dt = (e.times.back() - e.times.front()) / static_cast<double>(K);
    detail::Moments term, step, last;
    for (std::size_t m = 0; m < sol.paths; ++m) {
        const double tr = sol.Y(m, K) - phi(e.state(m, K));
        term.add(tr);
        r.terminal_max = std::max(r.terminal_max, std::abs(tr));
        for (std::size_t k = 0; k < K; ++k) {
            const double dt = e.times[k + 1] - e.times[k];
            const auto z = sol.Z(m, k);
            const auto dw = e.increment(m, k);
            double zdw = 0.0;
            for (std::size_t d = 0; d < n; ++d) zdw += z[d] * dw[d];
            const double psi = ham.is_zero ? 0.0 : ham(e.state(m, k), z);
            const double rho = sol.Y(m, k + 1) - sol.Y(m, k) - psi * dt - zdw;
            if (k + 1 == K) {
                last.add(rho);
                if (!include_final) continue;
            }
            step.add(rho);
            r.step_max = std::max(r.step_max, std::abs(rho));
        }
    }
    r.terminal_mean = term.mean();
    r.terminal_se = term.se();
    r.step_mean = step.n > 0 ? step.mean() : 0.0;
    r.step_se = step.n > 1 ? step.se() : 0.0;
    r.step_rms = step.n > 0 ? std::sqrt(step.sumsq / step.n) : 0.0;
    r.final_step_rms = std::sqrt(last.sumsq / std::max(last.n, 1.0));
    return r;
}

struct MartingaleStats {
    std::vector<double> mean;  // E I_k, k = 0..K
    std::vector<double> se;
    double worst_z = 0.0;      // max_k |mean_k| / se_k
    bool zero_mean = true;
    double lhs = 0.0;          // E |I_K|^2
    double rhs = 0.0;          // E sum |Y_k Z_k|^2 dt
    double ratio = 1.0;
    double gap_mean = 0.0;     // E(|I_K|^2 - sum |Y_k Z_k|^2 dt)
    double gap_se = 0.0;
    bool isometry = true;
};

/// I_k = sum_{j<k} Y_j Z_j . dW_j: zero mean at every k and discrete isometry at K, both at 4 sigma.
inline MartingaleStats martingale_check(const FbsdeSolution& sol, double sigmas = 4.0) {
    const auto& e = *sol.ensemble;
    const std::size_t K = sol.steps, n = sol.dim;
    std::vector<detail::Moments> at(K + 1);
    detail::Moments lhs, rhs, gap;
    for (std::size_t m = 0; m < sol.paths; ++m) {
        double integral = 0.0, quad = 0.0;
        at[0].add(0.0);
        for (std::size_t k = 0; k < K; ++k) {
            const double dt = e.times[k + 1] - e.times[k];
            const auto z = sol.Z(m, k);
            const auto dw = e.increment(m, k);
            double zdw = 0.0, z2 = 0.0;
            for (std::size_t d = 0; d < n; ++d) {
                zdw += z[d] * dw[d];
                z2 += z[d] * z[d];
            }
            const double y = sol.Y(m, k);
            integral += y * zdw;
            quad += y * y * z2 * dt;
            at[k + 1].add(integral);
        }
        lhs.add(integral * integral);
        rhs.add(quad);
        gap.add(integral * integral - quad);
    }
    MartingaleStats s;
    for (const auto& a : at) {
        const double se = a.se();
        s.mean.push_back(a.mean());
        s.se.push_back(se);
        if (se > 0.0) {
            s.worst_z = std::max(s.worst_z, std::abs(a.mean()) / se);
            if (std::abs(a.mean()) > sigmas * se) s.zero_mean = false;
        } else if (a.mean() != 0.0) {
            s.zero_mean = false;
        }
    }
    s.lhs = lhs.mean();
    s.rhs = rhs.mean();
    s.ratio = s.rhs > 0.0 ? s.lhs / s.rhs : 1.0;
    s.gap_mean = gap.mean();
    s.gap_se = gap.se();
    s.isometry = s.gap_se > 0.0 ? std::abs(s.gap_mean) <= sigmas * s.gap_se : s.gap_mean == 0.0;
    return s;
}

struct RegressionConfig {
    std::size_t degree = 3;
    double ridge = 1e-8;            // relative to the mean diagonal of the normal matrix
    double max_condition = 1e12;
};

namespace detail {

/// Monomial exponents of total degree <= p in n variables, graded order.
inline std::vector<std::vector<std::size_t>> monomials(std::size_t n, std::size_t p) {
    std::vector<std::vector<std::size_t>> out;
    std::vector<std::size_t> e(n, 0);
    for (std::size_t total = 0; total <= p; ++total) {
        std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t d, std::size_t left) {
            if (d + 1 == n) {
                e[d] = left;
                out.push_back(e);
                return;
            }
            for (std::size_t a = left + 1; a-- > 0;) {
                e[d] = a;
                rec(d + 1, left - a);
            }
        };
        rec(0, total);
    }
    return out;
}

/// Least-squares fit of targets on a standardized polynomial basis of the states at step k.
class StepRegression {
public:
    StepRegression(const PathEnsemble& e, std::size_t k, const RegressionConfig& cfg) : n_(e.dim), m_(e.paths) {
        mean_.assign(n_, 0.0);
        scale_.assign(n_, 0.0);
        for (std::size_t p = 0; p < m_; ++p)
            for (std::size_t d = 0; d < n_; ++d) mean_[d] += e.state(p, k)[d];
        for (auto& v : mean_) v /= static_cast<double>(m_);
        for (std::size_t p = 0; p < m_; ++p)
            for (std::size_t d = 0; d < n_; ++d) {
                const double c = e.state(p, k)[d] - mean_[d];
                scale_[d] += c * c;
            }
        bool degenerate = true;
        for (auto& v : scale_) {
            v = std::sqrt(v / static_cast<double>(m_));
            if (v > 1e-12) degenerate = false;
        }
        exps_ = monomials(n_, degenerate ? 0 : cfg.degree);
        const auto nb = static_cast<Eigen::Index>(exps_.size());
        basis_.resize(static_cast<Eigen::Index>(m_), nb);
        for (std::size_t p = 0; p < m_; ++p) {
            const auto x = e.state(p, k);
            for (Eigen::Index b = 0; b < nb; ++b) {
                double v = 1.0;
                for (std::size_t d = 0; d < n_; ++d) {
                    const double u = scale_[d] > 1e-12 ? (x[d] - mean_[d]) / scale_[d] : 0.0;
                    for (std::size_t a = 0; a < exps_[static_cast<std::size_t>(b)][d]; ++a) v *= u;
                }
                basis_(static_cast<Eigen::Index>(p), b) = v;
            }
        }
        Mat normal = basis_.transpose() * basis_;
        const double lambda = cfg.ridge * normal.diagonal().mean();
        // The intercept is not penalized, so constants are reproduced exactly.
        for (Eigen::Index b = 1; b < nb; ++b) normal(b, b) += lambda;
        const Eigen::SelfAdjointEigenSolver<Mat> es(normal, Eigen::EigenvaluesOnly);
        const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
        condition_ = lo > 0.0 ? hi / lo : std::numeric_limits<double>::infinity();
        if (condition_ > cfg.max_condition) {
            std::ostringstream os;
            os << "regression basis at step " << k << " has condition number " << condition_;
            throw IllConditionedBasisError(os.str());
        }
        llt_.compute(normal);
    }

    /// Fitted conditional expectation at every path.
    Vec fit(const Vec& target) const {
        const Vec coef = llt_.solve(basis_.transpose() * target);
        return basis_ * coef;
    }

    double condition() const { return condition_; }

private:
    std::size_t n_, m_;
    std::vector<double> mean_, scale_;
    std::vector<std::vector<std::size_t>> exps_;
    Mat basis_;
    Eigen::LLT<Mat> llt_;
    double condition_ = 1.0;
};

}  // namespace detail

/// Backward regression: Y_K = phi(X_K); Z_k = E[Y_{k+1} dW_k / dt | X_k];
/// Y_k = E[Y_{k+1} - psi(X_k, Z_k) dt | X_k].
inline FbsdeSolution regression_backward_solve(std::shared_ptr<const PathEnsemble> ens, const HamiltonianSpec& ham,
                                               const BoundedFunction& phi, const RegressionConfig& cfg = {}) {
    const auto& e = *ens;
    FbsdeSolution s;
    s.ensemble = ens;
    s.tag = "regression";
    s.paths = e.paths;
    s.steps = e.steps();
    s.dim = e.dim;
    const std::size_t K = s.steps, n = s.dim, M = s.paths;
    s.y.resize(M * (K + 1));
    s.z.resize(M * K * n);
    for (std::size_t m = 0; m < M; ++m) s.y[m * (K + 1) + K] = phi(e.state(m, K));
    const auto mi = static_cast<Eigen::Index>(M);
    for (std::size_t k = K; k-- > 0;) {
        const double dt = e.times[k + 1] - e.times[k];
        const detail::StepRegression reg(e, k, cfg);
        for (std::size_t d = 0; d < n; ++d) {
            Vec target(mi);
            for (std::size_t m = 0; m < M; ++m)
                target[static_cast<Eigen::Index>(m)] = s.Y(m, k + 1) * e.increment(m, k)[d] / dt;
            const Vec zd = reg.fit(target);
            for (std::size_t m = 0; m < M; ++m) s.z[(m * K + k) * n + d] = zd[static_cast<Eigen::Index>(m)];
        }
        Vec target(mi);
        for (std::size_t m = 0; m < M; ++m) {
            const double psi = ham.is_zero ? 0.0 : ham(e.state(m, k), s.Z(m, k));
            target[static_cast<Eigen::Index>(m)] = s.Y(m, k + 1) - psi * dt;
        }
        const Vec yk = reg.fit(target);
        for (std::size_t m = 0; m < M; ++m) s.y[m * (K + 1) + k] = yk[static_cast<Eigen::Index>(m)];
        if (k == 0) {
            detail::Moments mo;
            for (Eigen::Index m = 0; m < mi; ++m) mo.add(target[m]);
            s.y0_se = mo.se();
        }
    }
    return s;
}

inline FbsdeSolution regression_backward_solve(const PathEnsemble& ens, const HamiltonianSpec& ham,
                                               const BoundedFunction& phi, const RegressionConfig& cfg = {}) {
    return regression_backward_solve(std::make_shared<const PathEnsemble>(ens), ham, phi, cfg);
}

/// RMS step residual for a sequence of step counts (each halving dt), with successive ratios.
struct RefinementStudy {
    std::vector<std::size_t> steps;
    std::vector<double> dt;
    std::vector<double> rms;
    std::vector<double> ratios;  // rms[i] / rms[i+1]
    std::vector<ResidualStats> stats;
};

inline RefinementStudy residual_refinement(const MildSolution& v, const CoefficientField& field,
                                           const HamiltonianSpec& ham, const BoundedFunction& phi, const Vec& x0,
                                           double t0, const std::vector<std::size_t>& step_counts, std::size_t paths,
                                           std::uint64_t seed, const MCConfig& mc = {}) {
    RefinementStudy out;
    for (std::size_t K : step_counts) {
        const auto grid = linspace(t0, v.horizon, K + 1);
        const auto ens = std::make_shared<const PathEnsemble>(
            simulate_forward(field, x0, grid, paths, derive_seed(seed, "refinement", K), mc));
        const auto sol = build_yz(v, ens, field);
        const auto st = backward_residual(sol, ham, phi);
        out.steps.push_back(K);
        out.dt.push_back((v.horizon - t0) / static_cast<double>(K));
        out.rms.push_back(st.step_rms);
        out.stats.push_back(st);
    }
    for (std::size_t i = 0; i + 1 < out.rms.size(); ++i) out.ratios.push_back(out.rms[i] / out.rms[i + 1]);
    return out;
}

/// E sum_k |Z^a_k - Z^b_k|^2 dt on a shared ensemble.
inline double z_gap(const FbsdeSolution& a, const FbsdeSolution& b) {
    if (a.ensemble != b.ensemble && a.ensemble->states != b.ensemble->states)
        throw std::invalid_argument("z_gap: solutions must share the ensemble");
    const auto& e = *a.ensemble;
    double s = 0.0;
    for (std::size_t m = 0; m < a.paths; ++m)
        for (std::size_t k = 0; k < a.steps; ++k) {
            const double dt = e.times[k + 1] - e.times[k];
            const auto za = a.Z(m, k), zb = b.Z(m, k);
            for (std::size_t d = 0; d < a.dim; ++d) s += (za[d] - zb[d]) * (za[d] - zb[d]) * dt;
        }
    return s / static_cast<double>(a.paths);
}

/// E sum_k |Z_k|^2 dt.
inline double z_energy(const FbsdeSolution& a) {
    const auto& e = *a.ensemble;
    double s = 0.0;
    for (std::size_t m = 0; m < a.paths; ++m)
        for (std::size_t k = 0; k < a.steps; ++k) {
            const double dt = e.times[k + 1] - e.times[k];
            for (double z : a.Z(m, k)) s += z * z * dt;
        }
    return s / static_cast<double>(a.paths);
}

}  // namespace hjblab
