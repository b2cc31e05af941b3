#pragma once

// Monte Carlo transition operators on a spatial grid: for each lag s,
//   (K_s f)(x_i)    ~ E f(X_s^{x_i})
//   (W_s f)(x_i)    ~ G(x_i) grad_x E f(X_s^x) |_{x = x_i}
// where f is a grid function extended by cubic interpolation. Rows are
// Monte Carlo averages of interpolation stencils at the path endpoints, so
// one simulation serves every grid function.

#include "hjblab/coefficients.hpp"
#include "hjblab/grid.hpp"
#include "hjblab/numerics.hpp"
#include "hjblab/random.hpp"
#include "hjblab/semigroup.hpp"

#include <Eigen/Sparse>

#include <algorithm>
#include <vector>

namespace hjblab {

struct TransitionConfig {
    std::size_t paths = 4096;
    double dt = 2e-4;
    std::size_t min_steps = 1;
    std::uint64_t seed = 1;
    double fd_step = 1e-3;  // absolute shift for the gradient rows
    Scheme scheme = Scheme::euler;
    double guard_radius = 0.0;
    unsigned workers = 1;
};

using SparseRows = Eigen::SparseMatrix<double, Eigen::RowMajor>;

class TransitionOperator {
public:
    TransitionOperator() = default;

    /// Simulates once from every grid node (and its +-h shifts) and records
    /// rows for every lag. For each function in `exact` the terms
    /// E phi(X_s) and G grad E phi(X_s) are also evaluated on the raw
    /// endpoints at the lags listed in `exact_lags`.
    TransitionOperator(const CoefficientField& field, const SpatialGrid& grid, std::vector<double> lags,
                       const TransitionConfig& cfg, const std::vector<BoundedFunction>& exact = {},
                       const std::vector<std::size_t>& exact_lags = {})
        : grid_(grid), dim_(field.dim), lags_(std::move(lags)) {
        if (field.dim != grid.dim()) throw DimensionError("TransitionOperator: field and grid dimensions differ");
        const std::size_t n = dim_;
        const std::size_t nodes = grid.size();
        const std::size_t nl = lags_.size();
        const auto tg = detail::union_time_grid(lags_, cfg.dt, cfg.min_steps);
        const std::size_t steps = tg.times.size() - 1;
        std::vector<std::vector<std::size_t>> lags_at(steps + 1);
        for (std::size_t o = 0; o < nl; ++o) lags_at[tg.output_step[o]].push_back(o);
        std::vector<int> exact_slot(nl, -1);
        for (std::size_t i = 0; i < exact_lags.size(); ++i) exact_slot[exact_lags[i]] = static_cast<int>(i);
        exact_lags_ = exact_lags;
        exact_values_.assign(exact.size(), std::vector<std::vector<double>>(exact_lags.size(), std::vector<double>(nodes)));
        exact_wgrad_.assign(exact.size(),
                            std::vector<std::vector<double>>(exact_lags.size(), std::vector<double>(nodes * n)));

        MCConfig guard_cfg;
        guard_cfg.guard_radius = cfg.guard_radius;
        std::vector<Vec> all_nodes = grid.nodes();
        const double guard = detail::auto_guard(guard_cfg, all_nodes);
        const double h = cfg.fd_step;
        const std::size_t nstart = 1 + 2 * n;
        const std::size_t kinds = 1 + n;  // K row, then D_k rows

        // Per node: rows[lag][kind] as (column, value) lists.
        std::vector<std::vector<std::vector<std::pair<std::size_t, double>>>> rows(
            nodes, std::vector<std::vector<std::pair<std::size_t, double>>>(nl * kinds));

        parallel_for(nodes, cfg.workers, [&](std::size_t node) {
            const Vec x0 = grid.node(node);
            std::vector<Vec> starts{x0};
            for (std::size_t k = 0; k < n; ++k) {
                Vec e = Vec::Zero(static_cast<Eigen::Index>(n));
                e[static_cast<Eigen::Index>(k)] = h;
                starts.push_back(x0 + e);
                starts.push_back(x0 - e);
            }
            // Sparse accumulators per (lag, kind).
            std::vector<std::vector<double>> acc(nl * kinds);
            std::vector<std::vector<std::size_t>> touched(nl * kinds);
            std::vector<double> dense(nodes, 0.0);
            std::vector<std::vector<double>> ex_sum(exact.size(), std::vector<double>(exact_lags.size() * kinds, 0.0));
            std::vector<double> states, drift, diff;
            std::array<std::size_t, 16> idx{};
            std::array<double, 16> w{};

            std::vector<std::uint8_t> mark(nodes, 0);
            auto accumulate = [&](std::size_t lag, std::size_t count) {
                const std::span<const double> st(states);
                for (std::size_t kind = 0; kind < kinds; ++kind) {
                    auto& t = touched[lag * kinds + kind];
                    auto& a = acc[lag * kinds + kind];
                    const double scale = kind == 0 ? 1.0 : 1.0 / (2.0 * h);
                    for (std::size_t i = 0; i < t.size(); ++i) {
                        dense[t[i]] = a[i];
                        mark[t[i]] = 1;
                    }
                    auto add_start = [&](std::size_t s, double sign) {
                        for (std::size_t p = 0; p < count; ++p) {
                            const std::size_t c = grid.stencil(st.subspan((s * count + p) * n, n), idx, w);
                            for (std::size_t q = 0; q < c; ++q) {
                                if (!mark[idx[q]]) {
                                    mark[idx[q]] = 1;
                                    t.push_back(idx[q]);
                                }
                                dense[idx[q]] += sign * scale * w[q];
                            }
                        }
                    };
                    if (kind == 0) {
                        add_start(0, 1.0);
                    } else {
                        add_start(1 + 2 * (kind - 1), 1.0);
                        add_start(2 + 2 * (kind - 1), -1.0);
                    }
                    a.resize(t.size());
                    for (std::size_t i = 0; i < t.size(); ++i) {
                        a[i] = dense[t[i]];
                        dense[t[i]] = 0.0;
                        mark[t[i]] = 0;
                    }
                }
                if (exact_slot[lag] >= 0) {
                    const auto slot = static_cast<std::size_t>(exact_slot[lag]);
                    for (std::size_t fi = 0; fi < exact.size(); ++fi) {
                        double sv = 0.0;
                        for (std::size_t p = 0; p < count; ++p) sv += exact[fi](st.subspan(p * n, n));
                        ex_sum[fi][slot * kinds] += sv;
                        for (std::size_t k = 0; k < n; ++k) {
                            double sd = 0.0;
                            for (std::size_t p = 0; p < count; ++p)
                                sd += exact[fi](st.subspan(((1 + 2 * k) * count + p) * n, n)) -
                                      exact[fi](st.subspan(((2 + 2 * k) * count + p) * n, n));
                            ex_sum[fi][slot * kinds + 1 + k] += sd / (2.0 * h);
                        }
                    }
                }
            };

            for (std::size_t b = 0; b < block_count(cfg.paths); ++b) {
                const std::size_t count = std::min(kPathBlock, cfg.paths - b * kPathBlock);
                BlockNoise noise(cfg.seed, b, count, n, true, true);
                states.assign(nstart * count * n, 0.0);
                for (std::size_t s = 0; s < nstart; ++s)
                    for (std::size_t p = 0; p < count; ++p)
                        for (std::size_t d = 0; d < n; ++d)
                            states[(s * count + p) * n + d] = starts[s][static_cast<Eigen::Index>(d)];
                for (std::size_t k = 0; k < steps; ++k) {
                    const double dt = tg.times[k + 1] - tg.times[k];
                    const auto dw = noise.next(dt);
                    for (std::size_t s = 0; s < nstart; ++s)
                        detail::euler_step(field, cfg.scheme,
                                           std::span<double>(states.data() + s * count * n, count * n), dw, dt, drift,
                                           diff, guard);
                    for (std::size_t lag : lags_at[k + 1]) accumulate(lag, count);
                }
            }
            const double inv_m = 1.0 / static_cast<double>(cfg.paths);
            for (std::size_t r = 0; r < nl * kinds; ++r) {
                auto& out = rows[node][r];
                out.reserve(touched[r].size());
                for (std::size_t i = 0; i < touched[r].size(); ++i) out.emplace_back(touched[r][i], acc[r][i] * inv_m);
            }
            const Mat g = field.diffusion(x0);
            for (std::size_t fi = 0; fi < exact.size(); ++fi)
                for (std::size_t slot = 0; slot < exact_lags.size(); ++slot) {
                    exact_values_[fi][slot][node] = ex_sum[fi][slot * kinds] * inv_m;
                    for (std::size_t c = 0; c < n; ++c) {
                        double v = 0.0;
                        for (std::size_t k = 0; k < n; ++k)
                            v += g(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k)) *
                                 ex_sum[fi][slot * kinds + 1 + k] * inv_m;
                        exact_wgrad_[fi][slot][node * n + c] = v;
                    }
                }
        });

        // Assemble K_s and W_s^{(c)} = sum_k G_ck D_k.
        const auto ni = static_cast<Eigen::Index>(nodes);
        std::vector<Mat> g_at(nodes);
        for (std::size_t i = 0; i < nodes; ++i) g_at[i] = field.diffusion(grid.node(i));
        k_.resize(nl);
        w_.assign(nl, std::vector<SparseRows>(n));
        for (std::size_t lag = 0; lag < nl; ++lag) {
            std::vector<Eigen::Triplet<double>> tk;
            std::vector<std::vector<Eigen::Triplet<double>>> tw(n);
            for (std::size_t i = 0; i < nodes; ++i) {
                for (const auto& [col, val] : rows[i][lag * kinds])
                    tk.emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col), val);
                for (std::size_t k = 0; k < n; ++k)
                    for (const auto& [col, val] : rows[i][lag * kinds + 1 + k])
                        for (std::size_t c = 0; c < n; ++c) {
                            const double gck = g_at[i](static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(k));
                            if (gck != 0.0)
                                tw[c].emplace_back(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(col),
                                                   gck * val);
                        }
            }
            k_[lag].resize(ni, ni);
            k_[lag].setFromTriplets(tk.begin(), tk.end());
            for (std::size_t c = 0; c < n; ++c) {
                w_[lag][c].resize(ni, ni);
                w_[lag][c].setFromTriplets(tw[c].begin(), tw[c].end());
            }
        }
    }

    const SpatialGrid& grid() const noexcept { return grid_; }
    std::size_t dim() const noexcept { return dim_; }
    const std::vector<double>& lags() const noexcept { return lags_; }

    /// out_values = K_s f, out_wgrad (node-major, N per node) = W_s f.
    void apply(std::size_t lag, const Vec& f, Vec& out_values, Vec& out_wgrad) const {
        out_values = k_[lag] * f;
        const auto nodes = static_cast<Eigen::Index>(grid_.size());
        out_wgrad.resize(nodes * static_cast<Eigen::Index>(dim_));
        for (std::size_t c = 0; c < dim_; ++c) {
            const Vec wc = w_[lag][c] * f;
            for (Eigen::Index i = 0; i < nodes; ++i) out_wgrad[i * static_cast<Eigen::Index>(dim_) + static_cast<Eigen::Index>(c)] = wc[i];
        }
    }

    /// Accumulates weight * (K_s f, W_s f) into the outputs.
    void apply_add(std::size_t lag, const Vec& f, double weight, Vec& values, Vec& wgrad) const {
        values.noalias() += weight * (k_[lag] * f);
        const auto nodes = static_cast<Eigen::Index>(grid_.size());
        for (std::size_t c = 0; c < dim_; ++c) {
            const Vec wc = w_[lag][c] * f;
            for (Eigen::Index i = 0; i < nodes; ++i)
                wgrad[i * static_cast<Eigen::Index>(dim_) + static_cast<Eigen::Index>(c)] += weight * wc[i];
        }
    }

    bool has_exact(std::size_t function, std::size_t lag) const {
        return function < exact_values_.size() &&
               std::find(exact_lags_.begin(), exact_lags_.end(), lag) != exact_lags_.end();
    }

    /// Endpoint-evaluated E phi(X_s) and G grad E phi(X_s) for a precomputed function.
    std::pair<Vec, Vec> exact_terms(std::size_t function, std::size_t lag) const {
        const auto it = std::find(exact_lags_.begin(), exact_lags_.end(), lag);
        if (function >= exact_values_.size() || it == exact_lags_.end())
            throw std::out_of_range("TransitionOperator: no exact terms for this function/lag");
        const auto slot = static_cast<std::size_t>(it - exact_lags_.begin());
        const auto& v = exact_values_[function][slot];
        const auto& g = exact_wgrad_[function][slot];
        return {Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size())),
                Eigen::Map<const Vec>(g.data(), static_cast<Eigen::Index>(g.size()))};
    }

    std::size_t nonzeros() const {
        std::size_t s = 0;
        for (const auto& k : k_) s += static_cast<std::size_t>(k.nonZeros());
        return s;
    }

private:
    SpatialGrid grid_;
    std::size_t dim_ = 1;
    std::vector<double> lags_;
    std::vector<SparseRows> k_;
    std::vector<std::vector<SparseRows>> w_;
    std::vector<std::size_t> exact_lags_;
    std::vector<std::vector<std::vector<double>>> exact_values_;  // [function][slot][node]
    std::vector<std::vector<std::vector<double>>> exact_wgrad_;   // [function][slot][node * N + c]
};

}  // namespace hjblab
