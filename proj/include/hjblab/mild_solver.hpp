#pragma once

// Mild solutions of the backward semilinear equation
//   D_t v + A v = psi(x, G grad v),  v(T) = phi,
// i.e. fixed points of
//   (Gamma v)(t) = S(T-t) phi - int_t^T S(r-t) F(r, v) dr,  F(r, v) = psi(., G grad v(r, .)),
// computed window by window with Picard iteration on a spatial grid.

#include "hjblab/coefficients.hpp"
#include "hjblab/errors.hpp"
#include "hjblab/grid.hpp"
#include "hjblab/numerics.hpp"
#include "hjblab/random.hpp"
#include "hjblab/semigroup.hpp"
#include "hjblab/transition.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace hjblab {

/// The nonlinearity psi(x, z) with its Lipschitz constant.
struct HamiltonianSpec {
    std::string name;
    std::function<double(std::span<const double> x, std::span<const double> z)> psi;
    double lipschitz = 0.0;
    bool bounded_at_zero = true;  // |psi(x, 0)| <= lipschitz
    bool is_zero = false;

    double operator()(std::span<const double> x, std::span<const double> z) const { return psi(x, z); }
};

inline HamiltonianSpec zero_hamiltonian() {
    return {"zero", [](std::span<const double>, std::span<const double>) { return 0.0; }, 0.0, true, true};
}

/// psi(x, z) = -|z|.
inline HamiltonianSpec neg_abs_hamiltonian() {
    return {"neg_abs",
            [](std::span<const double>, std::span<const double> z) {
                double s = 0.0;
                for (double v : z) s += v * v;
                return -std::sqrt(s);
            },
            1.0, true, false};
}

/// psi(x, z) = c.
inline HamiltonianSpec constant_hamiltonian(double c) {
    return {"const:" + format_double(c), [c](std::span<const double>, std::span<const double>) { return c; },
            std::abs(c), true, c == 0.0};
}

struct LipschitzFit {
    double fitted = 0.0;      // max sampled |psi(x,z1)-psi(x,z2)| / |z1-z2|
    double inflated = 0.0;    // max(fitted, sup |psi(x,0)|) * 1.1
    double max_psi_at_zero = 0.0;
    bool consistent = true;   // the stored constant dominates every sampled quotient
};

/// Two-point quotients of psi in z on random (x, z1, z2) in balls of the given radii.
inline LipschitzFit fit_hamiltonian_lipschitz(const HamiltonianSpec& ham, std::size_t dim, std::size_t samples,
                                              std::uint64_t seed, double x_radius = 5.0, double z_radius = 5.0) {
    Rng rng(derive_seed(seed, "lipschitz-fit", 0));
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    LipschitzFit fit;
    std::vector<double> x(dim), z1(dim), z2(dim), zero(dim, 0.0);
    for (std::size_t s = 0; s < samples; ++s) {
        double dz = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            x[d] = x_radius * u(rng);
            z1[d] = z_radius * u(rng);
            z2[d] = z_radius * u(rng);
            dz += (z1[d] - z2[d]) * (z1[d] - z2[d]);
        }
        dz = std::sqrt(dz);
        if (dz > 0.0) fit.fitted = std::max(fit.fitted, std::abs(ham(x, z1) - ham(x, z2)) / dz);
        fit.max_psi_at_zero = std::max(fit.max_psi_at_zero, std::abs(ham(x, zero)));
    }
    fit.inflated = 1.1 * std::max(fit.fitted, fit.max_psi_at_zero);
    fit.consistent = fit.fitted <= ham.lipschitz * (1.0 + 1e-12) + 1e-15 &&
                     fit.max_psi_at_zero <= ham.lipschitz * (1.0 + 1e-12) + 1e-15;
    return fit;
}

/// Time-sliced v and G grad v on a spatial grid, with K-norm bookkeeping.
struct MildSolution {
    double horizon = 0.0;
    SpatialGrid grid;
    std::vector<double> times;  // ascending; times.back() == horizon
    std::vector<Vec> values;    // per slice, one value per node
    std::vector<Vec> wgrad;     // per slice, N values per node (node-major)
    std::optional<BoundedFunction> terminal;

    double sup_norm = 0.0;
    double seminorm = 0.0;

    // provenance
    double tol = 0.0;
    double c_t = 0.0;
    double lipschitz = 0.0;
    double delta = 0.0;
    double window_length = 0.0;
    std::size_t windows = 0;
    std::vector<std::size_t> iterations;
    std::vector<std::vector<double>> contraction_ratios;
    std::vector<double> ball_radius;
    std::vector<double> max_iterate_norm;
    std::vector<double> fixed_point_residual;
    std::vector<double> quadrature_error;
    bool stayed_in_ball = true;

    std::size_t dim() const { return grid.dim(); }
    std::size_t slices() const { return times.size(); }

    ValueSlice slice(std::size_t j) const {
        ValueSlice s;
        s.t = times[j];
        s.points = grid.nodes();
        const std::size_t n = dim();
        s.values.assign(values[j].data(), values[j].data() + values[j].size());
        s.se.assign(s.values.size(), 0.0);
        for (std::size_t i = 0; i < grid.size(); ++i) {
            s.wgrad.push_back(wgrad[j].segment(static_cast<Eigen::Index>(i * n), static_cast<Eigen::Index>(n)));
            s.wgrad_se.push_back(Vec::Zero(static_cast<Eigen::Index>(n)));
        }
        s.has_values = true;
        s.has_gradient = true;
        return s;
    }

    /// Slice bracket and weight: t = (1-w) times[i] + w times[i+1].
    std::pair<std::size_t, double> locate(double t) const {
        if (times.size() == 1 || t <= times.front()) return {0, 0.0};
        if (t >= times.back()) return {times.size() - 2, 1.0};
        const auto it = std::upper_bound(times.begin(), times.end(), t);
        const auto i = static_cast<std::size_t>(it - times.begin()) - 1;
        return {i, (t - times[i]) / (times[i + 1] - times[i])};
    }

    /// v(t, x): linear in t between slices, cubic in x; phi itself at t = T.
    double value(double t, std::span<const double> x) const {
        if (terminal && t >= horizon) return (*terminal)(x);
        const auto [i, w] = locate(t);
        if (times.size() == 1) return grid.interpolate(std::span<const double>(values[0].data(), grid.size()), x);
        const double a = grid.interpolate(std::span<const double>(values[i].data(), grid.size()), x);
        if (w == 0.0) return a;
        const double b = grid.interpolate(std::span<const double>(values[i + 1].data(), grid.size()), x);
        return (1.0 - w) * a + w * b;
    }

    /// (G grad v)(t, x); at t = T the terminal (left-limit) slice is used.
    void wgrad_at(double t, std::span<const double> x, std::span<double> out) const {
        const std::size_t n = dim();
        std::array<std::size_t, 16> idx{};
        std::array<double, 16> w{};
        const std::size_t c = grid.stencil(x, idx, w);
        const auto [i, tw] = locate(t);
        std::fill(out.begin(), out.end(), 0.0);
        const std::size_t i1 = times.size() == 1 ? 0 : i + 1;
        for (std::size_t q = 0; q < c; ++q)
            for (std::size_t d = 0; d < n; ++d) {
                const auto e = static_cast<Eigen::Index>(idx[q] * n + d);
                out[d] += w[q] * ((1.0 - tw) * wgrad[i][e] + tw * wgrad[i1][e]);
            }
    }
};

/// (sup over slices and nodes of |v|, sup_j (T - t_j)^{1/2} sup_x |G grad v(t_j, x)|).
inline std::pair<double, double> knorm(const MildSolution& v) {
    if (v.times.empty()) throw std::invalid_argument("knorm: solution has no slices");
    const std::size_t n = v.dim();
    double sup = 0.0, semi = 0.0;
    for (std::size_t j = 0; j < v.times.size(); ++j) {
        sup = std::max(sup, v.values[j].cwiseAbs().maxCoeff());
        const double weight = std::sqrt(std::max(v.horizon - v.times[j], 0.0));
        if (weight == 0.0) continue;
        double g = 0.0;
        for (std::size_t i = 0; i < v.grid.size(); ++i)
            g = std::max(g, v.wgrad[j].segment(static_cast<Eigen::Index>(i * n), static_cast<Eigen::Index>(n)).norm());
        semi = std::max(semi, weight * g);
    }
    return {sup, semi};
}

/// F(t, v)(x) = psi(x, (G grad v)(t, x)) at the slice points.
inline std::vector<double> apply_F(const HamiltonianSpec& ham, const CoefficientField& field, const ValueSlice& slice) {
    if (!slice.has_gradient) throw MissingGradientError("apply_F: slice has no weighted-gradient data");
    std::vector<double> out(slice.points.size());
    for (std::size_t i = 0; i < slice.points.size(); ++i) {
        const Vec& x = slice.points[i];
        const Vec& z = slice.wgrad[i];
        if (static_cast<std::size_t>(z.size()) != field.dim) throw DimensionError("apply_F: gradient dimension mismatch");
        out[i] = ham(std::span<const double>(x.data(), field.dim), std::span<const double>(z.data(), field.dim));
    }
    return out;
}

/// delta = min((4L + 2 pi C_T L)^{-2}, T).
inline double proof_delta(double lipschitz, double c_t, double horizon) {
    if (lipschitz <= 0.0) return horizon;
    const double a = 4.0 * lipschitz + 2.0 * std::numbers::pi * c_t * lipschitz;
    return std::min(1.0 / (a * a), horizon);
}

/// R = 2 (1 + 2 C_T)(|phi|_inf + delta L).
inline double proof_ball_radius(double c_t, double phi_sup, double delta, double lipschitz) {
    return 2.0 * (1.0 + 2.0 * c_t) * (phi_sup + delta * lipschitz);
}

/// delta^{1/2} (2L + pi C_T L): the contraction constant of Gamma on a window of length delta.
inline double proof_contraction_bound(double delta, double lipschitz, double c_t) {
    return std::sqrt(delta) * (2.0 * lipschitz + std::numbers::pi * c_t * lipschitz);
}

/// (C_T |phi| + 2 T L)(1 + T^{1/2} pi L) exp(pi L^2 T c), c the measured Gronwall constant.
inline double gronwall_envelope(double c_t, double phi_sup, double horizon, double lipschitz, double constant = 2.0) {
    return (c_t * phi_sup + 2.0 * horizon * lipschitz) * (1.0 + std::sqrt(horizon) * std::numbers::pi * lipschitz) *
           std::exp(std::numbers::pi * lipschitz * lipschitz * horizon * constant);
}

struct SolverConfig {
    double tol = 1e-3;
    std::size_t max_iter = 50;
    double window_factor = 0.8;
    std::size_t quad_nodes = 16;          // per slice interval, split evenly between the two halves
    std::size_t slices_per_window = 4;
    double max_slice_spacing = 0.05;
    double quad_budget = 1e-2;
    bool zero_initial_guess = false;
    TransitionConfig transition;
};

/// Window plan derived from the proof's constants.
struct WindowPlan {
    double horizon = 0.0;
    double c_t = 0.0;
    double lipschitz = 0.0;
    double delta = 0.0;
    double window_length = 0.0;
    std::size_t windows = 0;
    std::size_t slices = 0;  // per window
};

inline WindowPlan plan_windows(double horizon, double c_t, double lipschitz, const SolverConfig& cfg) {
    if (!(horizon > 0.0)) throw std::invalid_argument("plan_windows: T must be > 0");
    WindowPlan p;
    p.horizon = horizon;
    p.c_t = c_t;
    p.lipschitz = lipschitz;
    p.delta = proof_delta(lipschitz, c_t, horizon);
    const double target = cfg.window_factor * p.delta;
    p.windows = static_cast<std::size_t>(std::ceil(horizon / target - 1e-12));
    p.window_length = horizon / static_cast<double>(p.windows);
    p.slices = std::max<std::size_t>(
        cfg.slices_per_window, static_cast<std::size_t>(std::ceil(p.window_length / cfg.max_slice_spacing - 1e-12)));
    return p;
}

/// Slices j = 0..J of one window; j = 0 is the window's terminal time.
struct WindowState {
    std::vector<Vec> values;
    std::vector<Vec> wgrad;
};

/// The operator Gamma on windows of a fixed length, backed by one transition operator.
class GammaOperator {
public:
    /// `terminal_functions` are evaluated exactly on path endpoints in the first window.
    GammaOperator(const CoefficientField& field, const SpatialGrid& grid, double horizon, double c_t, double lipschitz,
                  const SolverConfig& cfg, std::vector<BoundedFunction> terminal_functions = {})
        : field_(field), grid_(grid), cfg_(cfg), plan_(plan_windows(horizon, c_t, lipschitz, cfg)),
          terminal_functions_(std::move(terminal_functions)) {
        if (cfg.quad_nodes < 4 || cfg.quad_nodes % 4 != 0)
            throw std::invalid_argument("GammaOperator: quad_nodes must be a positive multiple of 4");
        const std::size_t J = plan_.slices;
        const double step = plan_.window_length / static_cast<double>(J);
        const auto fine = gauss_legendre(cfg.quad_nodes / 2);
        const auto coarse = gauss_legendre(cfg.quad_nodes / 4);
        std::vector<double> lags;
        terminal_lag_.assign(J + 1, 0);
        nodes_.assign(J + 1, {});
        check_nodes_.assign(J + 1, {});
        std::vector<std::size_t> exact_lags;
        for (std::size_t j = 1; j <= J; ++j) {
            const double len = step * static_cast<double>(j);  // T_w - t_j
            terminal_lag_[j] = lags.size();
            exact_lags.push_back(lags.size());
            lags.push_back(len);
            // Split at the midpoint; r = t_j + s^2 on the first half, r = T_w - s^2 on the second.
            const double smax = std::sqrt(len / 2.0);
            auto add_rule = [&](const GaussRule& rule, std::vector<QuadNode>& out) {
                for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
                    const double s = 0.5 * smax * (rule.nodes[i] + 1.0);
                    const double w = 0.5 * smax * rule.weights[i] * 2.0 * s;
                    // first half: lag s^2, rho = T_w - r = len - s^2
                    out.push_back({lags.size(), w, len - s * s});
                    lags.push_back(s * s);
                    // second half: lag len - s^2, rho = s^2
                    out.push_back({lags.size(), w, s * s});
                    lags.push_back(len - s * s);
                }
            };
            add_rule(fine, nodes_[j]);
            add_rule(coarse, check_nodes_[j]);
        }
        op_ = TransitionOperator(field, grid, lags, cfg.transition, terminal_functions_, exact_lags);
        const std::size_t n = field.dim;
        nodes_x_ = grid.nodes();
        // G at nodes for terminal slices.
        g_at_.reserve(grid.size());
        for (const auto& x : nodes_x_) g_at_.push_back(field.diffusion(x));
        (void)n;
    }

    const WindowPlan& plan() const noexcept { return plan_; }
    const SpatialGrid& grid() const noexcept { return grid_; }
    const SolverConfig& config() const noexcept { return cfg_; }
    const TransitionOperator& transition() const noexcept { return op_; }
    const CoefficientField& field() const noexcept { return field_; }
    const std::vector<BoundedFunction>& terminal_functions() const noexcept { return terminal_functions_; }

    /// Offset rho_j = T_w - t_j of slice j.
    double rho(std::size_t j) const {
        return plan_.window_length * static_cast<double>(j) / static_cast<double>(plan_.slices);
    }

    /// Terminal slice (phi, G grad phi) on the grid; the gradient is a central difference.
    std::pair<Vec, Vec> terminal_slice(const BoundedFunction& phi) const {
        const std::size_t n = field_.dim;
        const auto nodes = static_cast<Eigen::Index>(grid_.size());
        Vec v(nodes), g(nodes * static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < nodes; ++i) {
            const Vec& x = nodes_x_[static_cast<std::size_t>(i)];
            v[i] = phi(x);
            Vec d(static_cast<Eigen::Index>(n));
            const double h = 1e-5 * (1.0 + x.norm());
            for (std::size_t k = 0; k < n; ++k) {
                Vec e = Vec::Zero(static_cast<Eigen::Index>(n));
                e[static_cast<Eigen::Index>(k)] = h;
                d[static_cast<Eigen::Index>(k)] = (phi(Vec(x + e)) - phi(Vec(x - e))) / (2.0 * h);
            }
            g.segment(i * static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)) = g_at_[static_cast<std::size_t>(i)] * d;
        }
        return {v, g};
    }

    /// Gamma applied to `iterate` on one window (slice 0 is the terminal datum).
    /// `exact` selects a precomputed terminal function for the S(T_w - t) phi term, or -1.
    WindowState apply(const WindowState& iterate, const HamiltonianSpec& ham, int exact, double* quad_error = nullptr) const {
        const std::size_t J = plan_.slices;
        const std::size_t n = field_.dim;
        const auto nodes = static_cast<Eigen::Index>(grid_.size());
        WindowState out;
        out.values.resize(J + 1);
        out.wgrad.resize(J + 1);
        out.values[0] = iterate.values[0];
        out.wgrad[0] = iterate.wgrad[0];
        double qerr = 0.0;
        for (std::size_t j = 1; j <= J; ++j) {
            Vec v, g;
            if (exact >= 0) {
                auto [ev, eg] = op_.exact_terms(static_cast<std::size_t>(exact), terminal_lag_[j]);
                v = std::move(ev);
                g = std::move(eg);
            } else {
                op_.apply(terminal_lag_[j], iterate.values[0], v, g);
            }
            if (!ham.is_zero) {
                Vec iv = Vec::Zero(nodes), ig = Vec::Zero(nodes * static_cast<Eigen::Index>(n));
                for (const auto& q : nodes_[j]) op_.apply_add(q.lag, forcing(iterate, ham, q.rho), q.weight, iv, ig);
                Vec cv = Vec::Zero(nodes), cg = Vec::Zero(nodes * static_cast<Eigen::Index>(n));
                for (const auto& q : check_nodes_[j]) op_.apply_add(q.lag, forcing(iterate, ham, q.rho), q.weight, cv, cg);
                qerr = std::max(qerr, (iv - cv).cwiseAbs().maxCoeff());
                v -= iv;
                g -= ig;
            }
            out.values[j] = std::move(v);
            out.wgrad[j] = std::move(g);
        }
        if (quad_error) *quad_error = qerr;
        if (qerr > cfg_.quad_budget) {
            std::ostringstream os;
            os << "time quadrature error estimate " << qerr << " exceeds budget " << cfg_.quad_budget;
            throw QuadratureError(os.str());
        }
        return out;
    }

    /// Window K-norm: sup |v| + sup_j rho_j^{1/2} sup_x |G grad v|.
    double knorm(const WindowState& a) const { return knorm_parts(a, nullptr).first + knorm_parts(a, nullptr).second; }

    std::pair<double, double> knorm_parts(const WindowState& a, const WindowState* b) const {
        const std::size_t n = field_.dim;
        double sup = 0.0, semi = 0.0;
        for (std::size_t j = 0; j < a.values.size(); ++j) {
            const Vec dv = b ? Vec(a.values[j] - b->values[j]) : a.values[j];
            sup = std::max(sup, dv.cwiseAbs().maxCoeff());
            const double w = std::sqrt(rho(j));
            if (w == 0.0) continue;
            const Vec dg = b ? Vec(a.wgrad[j] - b->wgrad[j]) : a.wgrad[j];
            double m = 0.0;
            for (std::size_t i = 0; i < grid_.size(); ++i)
                m = std::max(m, dg.segment(static_cast<Eigen::Index>(i * n), static_cast<Eigen::Index>(n)).norm());
            semi = std::max(semi, w * m);
        }
        return {sup, semi};
    }

    double knorm_diff(const WindowState& a, const WindowState& b) const {
        const auto [s, g] = knorm_parts(a, &b);
        return s + g;
    }

    /// Window state whose slices are all copies of the terminal slice (j = 0) or zero.
    WindowState initial_state(const Vec& terminal_values, const Vec& terminal_wgrad, const HamiltonianSpec& ham,
                              int exact, bool zero_guess) const {
        WindowState s;
        const std::size_t J = plan_.slices;
        s.values.assign(J + 1, Vec::Zero(terminal_values.size()));
        s.wgrad.assign(J + 1, Vec::Zero(terminal_wgrad.size()));
        s.values[0] = terminal_values;
        s.wgrad[0] = terminal_wgrad;
        if (zero_guess) return s;
        (void)ham;
        return apply(s, zero_hamiltonian(), exact);  // S(T_w - t) phi_w
    }

private:
    struct QuadNode {
        std::size_t lag;
        double weight;
        double rho;  // T_w - r
    };

    /// F at offset rho: psi(x, z) with z linear in time between the bracketing slices.
    Vec forcing(const WindowState& s, const HamiltonianSpec& ham, double rho_value) const {
        const std::size_t J = plan_.slices;
        const double step = plan_.window_length / static_cast<double>(J);
        const double u = std::clamp(rho_value / step, 0.0, static_cast<double>(J));
        auto i = static_cast<std::size_t>(std::floor(u));
        if (i >= J) i = J - 1;
        const double th = u - static_cast<double>(i);
        const std::size_t n = field_.dim;
        const auto nodes = grid_.size();
        Vec f(static_cast<Eigen::Index>(nodes));
        std::vector<double> z(n);
        for (std::size_t p = 0; p < nodes; ++p) {
            for (std::size_t d = 0; d < n; ++d) {
                const auto e = static_cast<Eigen::Index>(p * n + d);
                z[d] = (1.0 - th) * s.wgrad[i][e] + th * s.wgrad[i + 1][e];
            }
            const Vec& x = nodes_x_[p];
            f[static_cast<Eigen::Index>(p)] = ham(std::span<const double>(x.data(), n), z);
        }
        return f;
    }

    CoefficientField field_;
    SpatialGrid grid_;
    SolverConfig cfg_;
    WindowPlan plan_;
    std::vector<BoundedFunction> terminal_functions_;
    TransitionOperator op_;
    std::vector<std::size_t> terminal_lag_;
    std::vector<std::vector<QuadNode>> nodes_;
    std::vector<std::vector<QuadNode>> check_nodes_;
    std::vector<Vec> nodes_x_;
    std::vector<Mat> g_at_;
};

/// Outcome of Picard iteration on one window.
struct LocalFixedPoint {
    WindowState state;
    std::size_t iterations = 0;
    std::vector<double> ratios;
    std::vector<double> iterate_norms;
    double ball_radius = 0.0;
    bool stayed_in_ball = true;
    double residual = 0.0;
    double quadrature_error = 0.0;
};

/// Picard iteration of Gamma on one window from S(T_w - t) phi_w (or zero).
inline LocalFixedPoint local_fixed_point(const GammaOperator& gamma, const Vec& terminal_values,
                                         const Vec& terminal_wgrad, const HamiltonianSpec& ham, int exact,
                                         bool zero_guess) {
    const auto& cfg = gamma.config();
    const auto& plan = gamma.plan();
    LocalFixedPoint res;
    const double phi_sup = terminal_values.cwiseAbs().maxCoeff();
    res.ball_radius = proof_ball_radius(plan.c_t, phi_sup, plan.delta, plan.lipschitz);
    WindowState v = gamma.initial_state(terminal_values, terminal_wgrad, ham, exact, zero_guess);
    double prev = -1.0;
    int consecutive = 0;
    for (std::size_t it = 1; it <= cfg.max_iter; ++it) {
        double qe = 0.0;
        WindowState nv = gamma.apply(v, ham, exact, &qe);
        res.quadrature_error = std::max(res.quadrature_error, qe);
        const double diff = gamma.knorm_diff(nv, v);
        const double norm = gamma.knorm(nv);
        res.iterate_norms.push_back(norm);
        if (norm > res.ball_radius) res.stayed_in_ball = false;
        const double floor = 1e-13 * std::max(1.0, norm);
        if (prev > floor) {
            const double ratio = diff / prev;
            res.ratios.push_back(ratio);
            consecutive = ratio >= 1.0 ? consecutive + 1 : 0;
            if (consecutive >= 2) {
                std::ostringstream os;
                os << "Picard iteration is not contracting (ratio " << ratio << " at iteration " << it
                   << "); the window is too long or C_T is underestimated";
                throw NoContractionError(os.str());
            }
        }
        prev = diff;
        v = std::move(nv);
        res.iterations = it;
        if (diff <= cfg.tol * std::max(1.0, norm)) {
            const WindowState check = gamma.apply(v, ham, exact);
            res.residual = gamma.knorm_diff(check, v);
            res.state = std::move(v);
            return res;
        }
    }
    std::ostringstream os;
    os << "Picard iteration did not reach tol " << cfg.tol << " in " << cfg.max_iter << " iterations";
    throw MaxIterError(os.str());
}

/// Backward continuation over [0, T]: each window's initial slice is the next
/// window's terminal datum. `phi_index` selects one of the operator's
/// terminal functions.
inline MildSolution extend_to_full_interval(const GammaOperator& gamma, std::size_t phi_index,
                                            const HamiltonianSpec& ham, std::optional<bool> zero_guess = std::nullopt) {
    const auto& plan = gamma.plan();
    const auto& cfg = gamma.config();
    if (phi_index >= gamma.terminal_functions().size())
        throw std::out_of_range("extend_to_full_interval: unknown terminal function");
    const BoundedFunction& phi = gamma.terminal_functions()[phi_index];
    const bool zg = zero_guess.value_or(cfg.zero_initial_guess);
    MildSolution sol;
    sol.horizon = plan.horizon;
    sol.grid = gamma.grid();
    sol.terminal = phi;
    sol.tol = cfg.tol;
    sol.c_t = plan.c_t;
    sol.lipschitz = plan.lipschitz;
    sol.delta = plan.delta;
    sol.window_length = plan.window_length;
    sol.windows = plan.windows;

    auto [tv, tg] = gamma.terminal_slice(phi);
    // Collected in descending time, reversed at the end.
    std::vector<double> times{plan.horizon};
    std::vector<Vec> vals{tv}, grads{tg};
    const std::size_t n = gamma.field().dim;
    auto profile = [&] {
        std::vector<std::pair<double, double>> p;
        for (std::size_t j = 0; j < times.size(); ++j) {
            double m = 0.0;
            for (std::size_t i = 0; i < gamma.grid().size(); ++i)
                m = std::max(m, grads[j].segment(static_cast<Eigen::Index>(i * n), static_cast<Eigen::Index>(n)).norm());
            p.emplace_back(times[j], std::sqrt(std::max(plan.horizon - times[j], 0.0)) * m);
        }
        return p;
    };
    for (std::size_t w = 0; w < plan.windows; ++w) {
        const double tw = plan.horizon - plan.window_length * static_cast<double>(w);
        LocalFixedPoint lf;
        try {
            lf = local_fixed_point(gamma, vals.back(), grads.back(), ham, w == 0 ? static_cast<int>(phi_index) : -1, zg);
        } catch (const ContinuationError&) {
            throw;
        } catch (const Error& e) {
            std::ostringstream os;
            os << "continuation failed on window " << w << " (t in [" << tw - plan.window_length << ", " << tw
               << "]): " << e.what();
            throw ContinuationError(os.str(), w, profile());
        }
        sol.iterations.push_back(lf.iterations);
        sol.contraction_ratios.push_back(lf.ratios);
        sol.ball_radius.push_back(lf.ball_radius);
        sol.max_iterate_norm.push_back(lf.iterate_norms.empty()
                                           ? 0.0
                                           : *std::max_element(lf.iterate_norms.begin(), lf.iterate_norms.end()));
        sol.fixed_point_residual.push_back(lf.residual);
        sol.quadrature_error.push_back(lf.quadrature_error);
        sol.stayed_in_ball = sol.stayed_in_ball && lf.stayed_in_ball;
        for (std::size_t j = 1; j <= plan.slices; ++j) {
            const double t = w + 1 == plan.windows && j == plan.slices ? 0.0 : tw - gamma.rho(j);
            times.push_back(std::max(t, 0.0));
            vals.push_back(lf.state.values[j]);
            grads.push_back(lf.state.wgrad[j]);
        }
    }
    std::reverse(times.begin(), times.end());
    std::reverse(vals.begin(), vals.end());
    std::reverse(grads.begin(), grads.end());
    sol.times = std::move(times);
    sol.values = std::move(vals);
    sol.wgrad = std::move(grads);
    std::tie(sol.sup_norm, sol.seminorm) = knorm(sol);
    return sol;
}

/// Convenience: builds the operator for a single terminal datum and solves on [0, T].
inline MildSolution extend_to_full_interval(const BoundedFunction& phi, const HamiltonianSpec& ham,
                                            const CoefficientField& field, const SpatialGrid& grid, double horizon,
                                            double c_t, const SolverConfig& cfg) {
    const GammaOperator gamma(field, grid, horizon, c_t, ham.lipschitz, cfg, {phi});
    return extend_to_full_interval(gamma, 0, ham);
}

/// Gamma applied to the first-window slices of v (times T - rho_j).
inline MildSolution apply_gamma(const GammaOperator& gamma, const MildSolution& v, std::size_t phi_index,
                                const HamiltonianSpec& ham) {
    const auto& plan = gamma.plan();
    const std::size_t J = plan.slices;
    WindowState s;
    for (std::size_t j = 0; j <= J; ++j) {
        const double t = plan.horizon - gamma.rho(j);
        const auto it = std::find_if(v.times.begin(), v.times.end(), [&](double x) { return std::abs(x - t) < 1e-12; });
        if (it == v.times.end()) throw std::invalid_argument("apply_gamma: v lacks a slice at a window time");
        const auto k = static_cast<std::size_t>(it - v.times.begin());
        s.values.push_back(v.values[k]);
        s.wgrad.push_back(v.wgrad[k]);
    }
    const auto g = gamma.apply(s, ham, static_cast<int>(phi_index));
    MildSolution out;
    out.horizon = plan.horizon;
    out.grid = gamma.grid();
    out.terminal = gamma.terminal_functions()[phi_index];
    for (std::size_t j = J + 1; j-- > 0;) {
        out.times.push_back(plan.horizon - gamma.rho(j));
        out.values.push_back(g.values[j]);
        out.wgrad.push_back(g.wgrad[j]);
    }
    std::tie(out.sup_norm, out.seminorm) = knorm(out);
    return out;
}

/// Mollified terminal datum and Hamiltonian at scale 1/n.
struct MollifierPair {
    std::size_t n = 1;
    double scale = 1.0;
    BoundedFunction phi_n;
    HamiltonianSpec psi_n;
};

namespace detail {

/// Nodes y in the unit ball and positive weights summing to one for the
/// bump rho(y) ~ (1 - |y|^2)^3.
inline std::pair<std::vector<Vec>, std::vector<double>> bump_rule(std::size_t dim) {
    const std::size_t per_axis = dim == 1 ? 16 : dim == 2 ? 8 : 4;
    const auto g = gauss_legendre(per_axis);
    std::vector<Vec> nodes;
    std::vector<double> weights;
    std::vector<std::size_t> idx(dim, 0);
    while (true) {
        Vec y(static_cast<Eigen::Index>(dim));
        double w = 1.0;
        for (std::size_t d = 0; d < dim; ++d) {
            y[static_cast<Eigen::Index>(d)] = g.nodes[idx[d]];
            w *= g.weights[idx[d]];
        }
        const double r2 = y.squaredNorm();
        if (r2 < 1.0) {
            nodes.push_back(y);
            weights.push_back(w * std::pow(1.0 - r2, 3));
        }
        std::size_t d = 0;
        while (d < dim && ++idx[d] == per_axis) idx[d++] = 0;
        if (d == dim) break;
    }
    double total = 0.0;
    for (double w : weights) total += w;
    for (double& w : weights) w /= total;
    return {nodes, weights};
}

}  // namespace detail

/// phi_n = phi * rho_n and psi_n = psi *_z rho_n by quadrature on the kernel support.
inline MollifierPair mollify(const BoundedFunction& phi, const HamiltonianSpec& ham, std::size_t n, std::size_t dim) {
    if (n == 0) throw std::invalid_argument("mollify: n must be >= 1");
    auto [nodes, weights] = detail::bump_rule(dim);
    const double eps = 1.0 / static_cast<double>(n);
    MollifierPair m;
    m.n = n;
    m.scale = eps;
    m.phi_n.name = phi.name + "*rho_" + std::to_string(n);
    m.phi_n.sup_norm = phi.sup_norm;
    m.phi_n.is_constant = phi.is_constant;
    if (phi.is_constant) {
        m.phi_n.eval = phi.eval;
    } else {
        m.phi_n.eval = [phi, nodes, weights, eps, dim](std::span<const double> x) {
            std::vector<double> y(dim);
            double s = 0.0;
            for (std::size_t q = 0; q < nodes.size(); ++q) {
                for (std::size_t d = 0; d < dim; ++d) y[d] = x[d] - eps * nodes[q][static_cast<Eigen::Index>(d)];
                s += weights[q] * phi(y);
            }
            return s;
        };
    }
    m.psi_n = ham;
    m.psi_n.name = ham.name + "*_z rho_" + std::to_string(n);
    if (!ham.is_zero) {
        m.psi_n.psi = [ham, nodes, weights, eps, dim](std::span<const double> x, std::span<const double> z) {
            std::vector<double> y(dim);
            double s = 0.0;
            for (std::size_t q = 0; q < nodes.size(); ++q) {
                for (std::size_t d = 0; d < dim; ++d) y[d] = z[d] - eps * nodes[q][static_cast<Eigen::Index>(d)];
                s += weights[q] * ham(x, y);
            }
            return s;
        };
    }
    return m;
}

}  // namespace hjblab
