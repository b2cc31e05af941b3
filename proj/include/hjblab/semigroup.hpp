#pragma once

// Monte Carlo Feynman-Kac evaluation of S(t)phi and G grad S(t)phi, forward
// path ensembles, the empirical gradient constant C_T, and an implicit
// finite-difference Dirichlet solver on B(R) used as an oracle for N <= 2.

#include "hjblab/coefficients.hpp"
#include "hjblab/errors.hpp"
#include "hjblab/grid.hpp"
#include "hjblab/numerics.hpp"
#include "hjblab/random.hpp"

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace hjblab {

/// Bounded scalar function of the state with its sup norm.
struct BoundedFunction {
    std::string name;
    std::function<double(std::span<const double>)> eval;
    double sup_norm = 0.0;
    bool is_constant = false;

    double operator()(std::span<const double> x) const { return eval(x); }
    double operator()(const Vec& x) const {
        return eval(std::span<const double>(x.data(), static_cast<std::size_t>(x.size())));
    }
};

inline BoundedFunction constant_function(double c) {
    return {"const:" + format_double(c), [c](std::span<const double>) { return c; }, std::abs(c), true};
}

/// Builtins acting on the first coordinate: cos, sin, tanh:k, const:c, zero.
inline BoundedFunction make_builtin_function(const std::string& spec) {
    const auto colon = spec.find(':');
    const std::string head = spec.substr(0, colon);
    const std::string arg = colon == std::string::npos ? "" : spec.substr(colon + 1);
    auto number = [&](double fallback) {
        if (arg.empty()) return fallback;
        try {
            std::size_t used = 0;
            const double v = std::stod(arg, &used);
            if (used != arg.size()) throw std::invalid_argument(arg);
            return v;
        } catch (const std::exception&) {
            throw ConfigError("bad numeric argument in function spec '" + spec + "'");
        }
    };
    if (head == "cos") return {"cos", [](std::span<const double> x) { return std::cos(x[0]); }, 1.0, false};
    if (head == "sin") return {"sin", [](std::span<const double> x) { return std::sin(x[0]); }, 1.0, false};
    if (head == "tanh") {
        const double k = number(1.0);
        return {"tanh:" + format_double(k), [k](std::span<const double> x) { return std::tanh(k * x[0]); }, 1.0,
                false};
    }
    if (head == "const") return constant_function(number(1.0));
    if (head == "zero") return constant_function(0.0);
    throw ConfigError("unknown function '" + spec + "' (expected cos, sin, tanh:k, const:c, zero)");
}

enum class Scheme { euler, tamed_euler };

/// Monte Carlo configuration shared by all path simulations.
struct MCConfig {
    std::size_t paths = 20000;
    double dt = 1e-3;            // maximal Euler step
    std::size_t min_steps = 8;   // minimum steps between consecutive output times
    std::uint64_t seed = 1;
    double guard_radius = 0.0;   // 0 selects 10 * max(1, largest start norm)
    Scheme scheme = Scheme::euler;
    bool antithetic = false;
    bool moment_match = false;
    unsigned workers = 1;
    // Finite-difference gradient step: fd_step > 0 fixes it, otherwise
    // h = min(fd_time_frac sqrt(t_min) |G(x)|, max(fd_h_min, fd_c (|phi| / sqrt(M))^(1/3))).
    double fd_step = 0.0;
    double fd_h_min = 1e-3;
    double fd_c = 0.5;
    double fd_time_frac = 0.1;
    double fd_scale = 1.0;
};

/// Values and weighted gradients of a function of x at time t.
struct ValueSlice {
    double t = 0.0;
    std::vector<Vec> points;
    std::vector<double> values;
    std::vector<double> se;
    std::vector<Vec> wgrad;
    std::vector<Vec> wgrad_se;
    bool has_values = false;
    bool has_gradient = false;

    double sup_abs_value() const {
        double s = 0.0;
        for (double v : values) s = std::max(s, std::abs(v));
        return s;
    }
    double sup_wgrad() const {
        double s = 0.0;
        for (const auto& g : wgrad) s = std::max(s, g.norm());
        return s;
    }
};

/// Euler-Maruyama paths with the Brownian increments that produced them.
struct PathEnsemble {
    std::size_t dim = 0;
    std::size_t paths = 0;
    std::vector<double> times;
    std::vector<double> states;      // [path][step 0..K][coord]
    std::vector<double> increments;  // [path][step 0..K-1][coord]
    std::uint64_t seed = 0;
    std::string scheme = "euler_maruyama";

    std::size_t steps() const { return times.size() - 1; }
    std::span<const double> state(std::size_t m, std::size_t k) const {
        return {states.data() + (m * (steps() + 1) + k) * dim, dim};
    }
    std::span<const double> increment(std::size_t m, std::size_t k) const {
        return {increments.data() + (m * steps() + k) * dim, dim};
    }
    std::span<double> state(std::size_t m, std::size_t k) { return {states.data() + (m * (steps() + 1) + k) * dim, dim}; }
};

namespace detail {

/// Running sums of i.i.d. samples. The variance uses sums shifted by the
/// first sample, so constant samples give an SE of exactly zero.
struct Moments {
    double n = 0.0, sum = 0.0, sumsq = 0.0;
    double shift = 0.0, dsum = 0.0, dsumsq = 0.0;
    void add(double v) {
        if (n == 0.0) shift = v;
        n += 1.0;
        sum += v;
        sumsq += v * v;
        const double d = v - shift;
        dsum += d;
        dsumsq += d * d;
    }
    void merge(const Moments& o) {
        if (o.n == 0.0) return;
        if (n == 0.0) {
            *this = o;
            return;
        }
        const double c = o.shift - shift;
        n += o.n;
        sum += o.sum;
        sumsq += o.sumsq;
        dsumsq += o.dsumsq + 2.0 * c * o.dsum + o.n * c * c;
        dsum += o.dsum + o.n * c;
    }
    double mean() const { return n > 0 ? sum / n : 0.0; }
    double se() const {
        if (n < 2) return 0.0;
        const double m = dsum / n;
        return std::sqrt(std::max(dsumsq / n - m * m, 0.0) / (n - 1.0));
    }
};

/// Adds per-path values as samples; antithetic pairs are averaged first so
/// the standard error is computed from independent units.
inline void add_samples(std::span<const double> per_path, bool antithetic, Moments& m) {
    const std::size_t count = per_path.size();
    if (!antithetic) {
        for (double v : per_path) m.add(v);
        return;
    }
    for (std::size_t p = 0; p + 1 < count; p += 2) m.add(0.5 * (per_path[p] + per_path[p + 1]));
    if (count % 2 == 1) m.add(per_path[count - 1]);
}

struct TimeGrid {
    std::vector<double> times;             // 0 = t_0 < ... < t_K
    std::vector<std::size_t> output_step;  // output_step[o]: k with times[k] == outputs[o]
};

/// Union of the output times; each gap is split into max(ceil(len/dt), min_steps) equal steps.
inline TimeGrid union_time_grid(std::span<const double> outputs, double dt, std::size_t min_steps) {
    if (!(dt > 0.0)) throw std::invalid_argument("time grid: dt must be > 0");
    std::vector<double> sorted(outputs.begin(), outputs.end());
    for (double t : sorted)
        if (!(t >= 0.0) || !std::isfinite(t)) throw std::invalid_argument("time grid: times must be finite and >= 0");
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    TimeGrid g;
    g.times.push_back(0.0);
    std::vector<std::size_t> step_of_sorted;
    for (double t : sorted) {
        const double a = g.times.back();
        if (t > a) {
            const double len = t - a;
            const auto n = std::max<std::size_t>(static_cast<std::size_t>(std::ceil(len / dt - 1e-9)), std::max<std::size_t>(min_steps, 1));
            for (std::size_t i = 1; i < n; ++i) g.times.push_back(a + len * static_cast<double>(i) / static_cast<double>(n));
            g.times.push_back(t);
        }
        step_of_sorted.push_back(g.times.size() - 1);
    }
    for (double t : outputs) {
        const auto it = std::lower_bound(sorted.begin(), sorted.end(), t);
        g.output_step.push_back(step_of_sorted[static_cast<std::size_t>(it - sorted.begin())]);
    }
    return g;
}

inline double auto_guard(const MCConfig& mc, const std::vector<Vec>& starts) {
    if (mc.guard_radius > 0.0) return mc.guard_radius;
    double r = 1.0;
    for (const auto& s : starts) r = std::max(r, s.norm());
    return 10.0 * r;
}

/// One Euler-Maruyama step for `count` paths of dimension n, in place.
inline void euler_step(const CoefficientField& field, Scheme scheme, std::span<double> x, std::span<const double> dw,
                       double dt, std::vector<double>& drift, std::vector<double>& diff, double guard) {
    const std::size_t n = field.dim;
    const std::size_t count = x.size() / n;
    drift.resize(count * n);
    diff.resize(count * n * n);
    field.batch(x, drift, diff);
    for (std::size_t p = 0; p < count; ++p) {
        double* xp = x.data() + p * n;
        const double* bp = drift.data() + p * n;
        const double* gp = diff.data() + p * n * n;
        const double* wp = dw.data() + p * n;
        double scale = dt;
        if (scheme == Scheme::tamed_euler) {
            double bn = 0.0;
            for (std::size_t d = 0; d < n; ++d) bn += bp[d] * bp[d];
            scale = dt / (1.0 + dt * std::sqrt(bn));
        }
        double r2 = 0.0;
        for (std::size_t d = 0; d < n; ++d) {
            double v = xp[d] + bp[d] * scale;
            for (std::size_t e = 0; e < n; ++e) v += gp[d * n + e] * wp[e];
            xp[d] = v;
            r2 += v * v;
        }
        if (!(r2 <= guard * guard)) {
            std::ostringstream os;
            os << "path norm exceeded guard radius " << guard << " (|X| = " << std::sqrt(r2)
               << "); reduce dt or use the tamed scheme";
            throw BlowupError(os.str());
        }
    }
}

}  // namespace detail

/// Observer for simulate_blocks: (block, output index, start index, states laid out [path][coord]).
using BlockObserver =
    std::function<void(std::size_t block, std::size_t output, std::size_t start, std::span<const double> states)>;

/// Simulates mc.paths paths from every start along the union grid of
/// `output_times`, calling `observe` at each output time.
///
/// Paths are processed in blocks of kPathBlock with a stream derived from
/// (seed, block); within a block all starts share the same increments. The
/// observer may only write to storage owned by its block.
inline void simulate_blocks(const CoefficientField& field, const std::vector<Vec>& starts,
                            std::span<const double> output_times, const MCConfig& mc, const BlockObserver& observe) {
    if (mc.paths == 0) throw std::invalid_argument("simulate: need at least one path");
    const std::size_t n = field.dim;
    for (const auto& s : starts)
        if (static_cast<std::size_t>(s.size()) != n) throw std::invalid_argument("simulate: start dimension mismatch");
    const auto grid = detail::union_time_grid(output_times, mc.dt, mc.min_steps);
    const double guard = detail::auto_guard(mc, starts);
    const std::size_t steps = grid.times.size() - 1;
    // outputs_at[k]: output indices observed at step k
    std::vector<std::vector<std::size_t>> outputs_at(steps + 1);
    for (std::size_t o = 0; o < grid.output_step.size(); ++o) outputs_at[grid.output_step[o]].push_back(o);

    parallel_for(block_count(mc.paths), mc.workers, [&](std::size_t b) {
        const std::size_t count = std::min(kPathBlock, mc.paths - b * kPathBlock);
        BlockNoise noise(mc.seed, b, count, n, mc.antithetic, mc.moment_match);
        std::vector<double> states(starts.size() * count * n);
        for (std::size_t s = 0; s < starts.size(); ++s)
            for (std::size_t p = 0; p < count; ++p)
                for (std::size_t d = 0; d < n; ++d) states[(s * count + p) * n + d] = starts[s][static_cast<Eigen::Index>(d)];
        auto view = [&](std::size_t s) { return std::span<double>(states.data() + s * count * n, count * n); };
        for (std::size_t o : outputs_at[0])
            for (std::size_t s = 0; s < starts.size(); ++s) observe(b, o, s, view(s));
        std::vector<double> drift, diff;
        for (std::size_t k = 0; k < steps; ++k) {
            const double dt = grid.times[k + 1] - grid.times[k];
            const auto dw = noise.next(dt);
            for (std::size_t s = 0; s < starts.size(); ++s)
                detail::euler_step(field, mc.scheme, view(s), dw, dt, drift, diff, guard);
            for (std::size_t o : outputs_at[k + 1])
                for (std::size_t s = 0; s < starts.size(); ++s) observe(b, o, s, view(s));
        }
    });
}

/// Euler-Maruyama ensemble from x0 on the given grid; the increments are kept.
/// Only the scheme, guard, antithetic and worker settings of `opts` are used.
inline PathEnsemble simulate_forward(const CoefficientField& field, const Vec& x0, std::span<const double> grid,
                                     std::size_t paths, std::uint64_t seed, const MCConfig& opts = {}) {
    if (paths == 0) throw std::invalid_argument("simulate_forward: M must be >= 1");
    if (grid.size() < 2) throw std::invalid_argument("simulate_forward: grid needs at least two times");
    for (std::size_t k = 1; k < grid.size(); ++k)
        if (!(grid[k] > grid[k - 1])) throw std::invalid_argument("simulate_forward: grid must be strictly increasing");
    const std::size_t n = field.dim;
    PathEnsemble ens;
    ens.dim = n;
    ens.paths = paths;
    ens.times.assign(grid.begin(), grid.end());
    ens.seed = seed;
    ens.scheme = opts.scheme == Scheme::tamed_euler ? "tamed_euler_maruyama" : "euler_maruyama";
    const std::size_t steps = grid.size() - 1;
    ens.states.resize(paths * (steps + 1) * n);
    ens.increments.resize(paths * steps * n);
    const double guard = detail::auto_guard(opts, {x0});
    parallel_for(block_count(paths), opts.workers, [&](std::size_t b) {
        const std::size_t first = b * kPathBlock;
        const std::size_t count = std::min(kPathBlock, paths - first);
        BlockNoise noise(seed, b, count, n, opts.antithetic, false);
        std::vector<double> x(count * n), drift, diff;
        for (std::size_t p = 0; p < count; ++p)
            for (std::size_t d = 0; d < n; ++d) x[p * n + d] = x0[static_cast<Eigen::Index>(d)];
        auto record = [&](std::size_t k) {
            for (std::size_t p = 0; p < count; ++p)
                std::copy_n(x.data() + p * n, n, ens.states.data() + ((first + p) * (steps + 1) + k) * n);
        };
        record(0);
        for (std::size_t k = 0; k < steps; ++k) {
            const double dt = grid[k + 1] - grid[k];
            const auto dw = noise.next(dt);
            for (std::size_t p = 0; p < count; ++p)
                std::copy_n(dw.data() + p * n, n, ens.increments.data() + ((first + p) * steps + k) * n);
            detail::euler_step(field, opts.scheme, x, dw, dt, drift, diff, guard);
            record(k + 1);
        }
    });
    return ens;
}

/// Central-difference step used for the weighted gradient at x.
inline double fd_step_for(const CoefficientField& field, const BoundedFunction& phi, const Vec& x, double t_min,
                          const MCConfig& mc) {
    if (mc.fd_step > 0.0) return mc.fd_step * mc.fd_scale;
    const double noise = std::max(phi.sup_norm, 1e-300) / std::sqrt(static_cast<double>(mc.paths));
    const double h_noise = std::max(mc.fd_h_min, mc.fd_c * std::cbrt(noise));
    const double gnorm = field.diffusion(x).operatorNorm();
    const double h_time = t_min > 0.0 ? mc.fd_time_frac * std::sqrt(t_min) * gnorm : h_noise;
    return mc.fd_scale * std::min(h_time, h_noise);
}

/// S(t)phi and/or G grad S(t)phi at every requested time and point, from a
/// single simulation. Gradients are central differences at x +- h e_k under
/// common random numbers, left-multiplied by G(x); h is fixed per point
/// using the smallest positive requested time.
inline std::vector<ValueSlice> evaluate_semigroup(const CoefficientField& field, const BoundedFunction& phi,
                                                  std::span<const double> times, const std::vector<Vec>& points,
                                                  const MCConfig& mc, bool values, bool gradient) {
    const std::size_t n = field.dim;
    const std::size_t np = points.size();
    const std::size_t nt = times.size();
    for (double t : times)
        if (!(t >= 0.0)) throw std::invalid_argument("evaluate_semigroup: t must be >= 0");
    double t_min = std::numeric_limits<double>::infinity();
    for (double t : times)
        if (t > 0.0) t_min = std::min(t_min, t);
    if (!std::isfinite(t_min)) t_min = 0.0;

    std::vector<double> h(np, 0.0);
    std::vector<Mat> g_at(np);
    std::vector<Vec> starts;
    const std::size_t value_base = 0;
    const std::size_t grad_base = values ? np : 0;
    if (values) starts = points;
    if (gradient) {
        for (std::size_t p = 0; p < np; ++p) {
            h[p] = fd_step_for(field, phi, points[p], t_min, mc);
            g_at[p] = field.diffusion(points[p]);
            for (std::size_t k = 0; k < n; ++k) {
                Vec e = Vec::Zero(static_cast<Eigen::Index>(n));
                e[static_cast<Eigen::Index>(k)] = h[p];
                starts.push_back(points[p] + e);
                starts.push_back(points[p] - e);
            }
        }
    }

    const std::size_t nb = block_count(mc.paths);
    std::vector<std::vector<detail::Moments>> vmom(nb, std::vector<detail::Moments>(values ? nt * np : 0));
    std::vector<std::vector<detail::Moments>> gmom(nb, std::vector<detail::Moments>(gradient ? nt * np * n : 0));
    std::vector<std::vector<double>> scratch(nb);

    // Constant data and t = 0 are exact; skip them in the simulation.
    std::vector<double> sim_times;
    std::vector<std::size_t> sim_to_out;
    for (std::size_t o = 0; o < nt; ++o)
        if (times[o] > 0.0 && !phi.is_constant) {
            sim_times.push_back(times[o]);
            sim_to_out.push_back(o);
        }

    if (!sim_times.empty() && !starts.empty()) {
        simulate_blocks(field, starts, sim_times, mc,
                        [&](std::size_t b, std::size_t so, std::size_t s, std::span<const double> st) {
                            const std::size_t o = sim_to_out[so];
                            const std::size_t count = st.size() / n;
                            std::vector<double> buf(count);
                            if (values && s < grad_base) {
                                for (std::size_t p = 0; p < count; ++p) buf[p] = phi(st.subspan(p * n, n));
                                detail::add_samples(buf, mc.antithetic, vmom[b][o * np + (s - value_base)]);
                                return;
                            }
                            const std::size_t rel = s - grad_base;
                            const std::size_t pt = rel / (2 * n);
                            const std::size_t k = (rel % (2 * n)) / 2;
                            const bool plus = rel % 2 == 0;
                            auto& sc = scratch[b];
                            sc.resize(count * n);
                            for (std::size_t p = 0; p < count; ++p) {
                                const double v = phi(st.subspan(p * n, n));
                                if (plus) sc[p * n + k] = v;
                                else sc[p * n + k] = (sc[p * n + k] - v) / (2.0 * h[pt]);
                            }
                            if (plus || k + 1 != n) return;
                            const Mat& g = g_at[pt];
                            for (std::size_t c = 0; c < n; ++c) {
                                for (std::size_t p = 0; p < count; ++p) {
                                    double acc = 0.0;
                                    for (std::size_t e = 0; e < n; ++e)
                                        acc += g(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(e)) * sc[p * n + e];
                                    buf[p] = acc;
                                }
                                detail::add_samples(buf, mc.antithetic, gmom[b][(o * np + pt) * n + c]);
                            }
                        });
    }

    std::vector<ValueSlice> out(nt);
    for (std::size_t o = 0; o < nt; ++o) {
        ValueSlice& sl = out[o];
        sl.t = times[o];
        sl.points = points;
        const bool exact = times[o] == 0.0 || phi.is_constant;
        if (values) {
            sl.has_values = true;
            sl.values.resize(np);
            sl.se.resize(np);
            for (std::size_t p = 0; p < np; ++p) {
                if (exact) {
                    sl.values[p] = phi(points[p]);
                    sl.se[p] = 0.0;
                    continue;
                }
                detail::Moments m;
                for (std::size_t b = 0; b < nb; ++b) m.merge(vmom[b][o * np + p]);
                sl.values[p] = m.mean();
                sl.se[p] = m.se();
            }
        }
        if (gradient) {
            sl.has_gradient = true;
            sl.wgrad.assign(np, Vec::Zero(static_cast<Eigen::Index>(n)));
            sl.wgrad_se.assign(np, Vec::Zero(static_cast<Eigen::Index>(n)));
            for (std::size_t p = 0; p < np; ++p) {
                if (phi.is_constant) continue;
                if (times[o] == 0.0) {
                    Vec d(static_cast<Eigen::Index>(n));
                    for (std::size_t k = 0; k < n; ++k) {
                        Vec e = Vec::Zero(static_cast<Eigen::Index>(n));
                        e[static_cast<Eigen::Index>(k)] = h[p];
                        d[static_cast<Eigen::Index>(k)] = (phi(Vec(points[p] + e)) - phi(Vec(points[p] - e))) / (2.0 * h[p]);
                    }
                    sl.wgrad[p] = g_at[p] * d;
                    continue;
                }
                for (std::size_t c = 0; c < n; ++c) {
                    detail::Moments m;
                    for (std::size_t b = 0; b < nb; ++b) m.merge(gmom[b][(o * np + p) * n + c]);
                    sl.wgrad[p][static_cast<Eigen::Index>(c)] = m.mean();
                    sl.wgrad_se[p][static_cast<Eigen::Index>(c)] = m.se();
                }
                const double limit = phi.sup_norm * g_at[p].operatorNorm() / std::sqrt(times[o]);
                if (sl.wgrad_se[p].maxCoeff() > limit) {
                    std::ostringstream os;
                    os << "finite-difference step " << h[p] << " below the Monte Carlo noise floor at t = " << times[o]
                       << " (gradient SE " << sl.wgrad_se[p].maxCoeff() << " exceeds signal bound " << limit << ")";
                    throw StepTooSmallError(os.str());
                }
            }
        }
    }
    return out;
}

/// S(t)phi at the given points; exact at t = 0.
inline ValueSlice apply_semigroup(const CoefficientField& field, const BoundedFunction& phi, double t,
                                  const std::vector<Vec>& points, const MCConfig& mc) {
    const double ts[1] = {t};
    return evaluate_semigroup(field, phi, ts, points, mc, true, false).front();
}

/// G grad S(t)phi at the given points (t > 0).
inline ValueSlice weighted_gradient(const CoefficientField& field, const BoundedFunction& phi, double t,
                                    const std::vector<Vec>& points, const MCConfig& mc) {
    if (!(t > 0.0)) throw std::invalid_argument("weighted_gradient: t must be > 0");
    const double ts[1] = {t};
    return evaluate_semigroup(field, phi, ts, points, mc, false, true).front();
}

/// sup_x |G grad S(t)phi| for every t, from one simulation.
struct GradientProfile {
    std::vector<double> times;
    std::vector<double> sup_wgrad;
    std::vector<double> sup_se;  // SE of the component attaining the sup
};

inline GradientProfile gradient_profile(const CoefficientField& field, const BoundedFunction& phi,
                                        std::span<const double> times, const std::vector<Vec>& points,
                                        const MCConfig& mc) {
    const auto slices = evaluate_semigroup(field, phi, times, points, mc, false, true);
    GradientProfile prof;
    for (const auto& sl : slices) {
        double best = 0.0, se = 0.0;
        for (std::size_t p = 0; p < sl.points.size(); ++p) {
            const double v = sl.wgrad[p].norm();
            if (v >= best) {
                best = v;
                se = sl.wgrad_se[p].norm();
            }
        }
        prof.times.push_back(sl.t);
        prof.sup_wgrad.push_back(best);
        prof.sup_se.push_back(se);
    }
    return prof;
}

struct CTEstimate {
    double c_t = 0.0;           // empirical sup of t^{1/2} |G grad S(t)phi| / |phi|
    double c_t_inflated = 0.0;  // x 1.1, the value used downstream
    std::vector<std::pair<double, double>> profile;  // (t, sup over phi_set and domain)
    double horizon = 0.0;
    std::size_t paths = 0;
    std::size_t domain_points = 0;
};

inline CTEstimate estimate_CT(const CoefficientField& field, const std::vector<BoundedFunction>& phi_set, double T,
                              std::span<const double> t_grid, const std::vector<Vec>& domain, const MCConfig& mc) {
    if (phi_set.empty()) throw std::invalid_argument("estimate_CT: phi_set must be nonempty");
    for (double t : t_grid)
        if (!(t > 0.0) || t > T) throw std::invalid_argument("estimate_CT: t_grid must lie in (0, T]");
    CTEstimate est;
    est.horizon = T;
    est.paths = mc.paths;
    est.domain_points = domain.size();
    std::vector<double> sup(t_grid.size(), 0.0);
    for (const auto& phi : phi_set) {
        if (phi.is_constant || phi.sup_norm <= 0.0) continue;
        const auto prof = gradient_profile(field, phi, t_grid, domain, mc);
        for (std::size_t i = 0; i < t_grid.size(); ++i)
            sup[i] = std::max(sup[i], std::sqrt(t_grid[i]) * prof.sup_wgrad[i] / phi.sup_norm);
    }
    for (std::size_t i = 0; i < t_grid.size(); ++i) {
        est.profile.emplace_back(t_grid[i], sup[i]);
        est.c_t = std::max(est.c_t, sup[i]);
    }
    est.c_t_inflated = 1.1 * est.c_t;
    return est;
}

/// Space-time resolution of the finite-difference reference solver.
struct FdGrid {
    std::size_t cells = 400;       // cells per axis across [-R, R]
    std::size_t time_steps = 400;  // backward Euler steps on [0, t]
};

/// Implicit (backward Euler) finite differences for D_t u = A u on B(R) with
/// zero Dirichlet data and initial datum eta_R phi. Central differences in
/// space, switching to upwinding for the drift where the cell Peclet number
/// |B_i| dx / Q_ii exceeds one. Values at `points` are cubic interpolants of
/// the grid solution.
inline ValueSlice fd_reference_solve(const CoefficientField& field, const BoundedFunction& phi, double R,
                                     const FdGrid& fg, double t, const std::vector<Vec>& points) {
    const std::size_t n = field.dim;
    if (n > 2) throw DimensionError("fd_reference_solve: N <= 2 required, got N = " + std::to_string(n));
    if (R < 1.0) throw std::invalid_argument("fd_reference_solve: R must be >= 1");
    if (!(t >= 0.0)) throw std::invalid_argument("fd_reference_solve: t must be >= 0");
    if (fg.cells < 4 || fg.time_steps < 1) throw std::invalid_argument("fd_reference_solve: grid too coarse");
    const SpatialGrid grid(n, -R, R, fg.cells + 1);
    const double dx = grid.spacing();
    const std::size_t total = grid.size();
    const std::size_t na = grid.per_axis();

    // Interior unknowns: strictly inside the ball and off the box boundary.
    std::vector<long> unknown(total, -1);
    std::vector<std::size_t> node_of;
    for (std::size_t i = 0; i < total; ++i) {
        const Vec x = grid.node(i);
        bool edge = false;
        if (n == 1) edge = i == 0 || i + 1 == na;
        else edge = i / na == 0 || i / na + 1 == na || i % na == 0 || i % na + 1 == na;
        if (!edge && x.norm() < R) {
            unknown[i] = static_cast<long>(node_of.size());
            node_of.push_back(i);
        }
    }
    const auto nu = static_cast<Eigen::Index>(node_of.size());
    std::vector<double> u(total, 0.0);
    for (std::size_t i = 0; i < total; ++i)
        if (unknown[i] >= 0) {
            const Vec x = grid.node(i);
            u[i] = eval_cutoff(R, x).value * phi(x);
        }
    ValueSlice out;
    out.t = t;
    out.points = points;
    out.has_values = true;
    out.se.assign(points.size(), 0.0);
    if (t > 0.0) {
        const double dt = t / static_cast<double>(fg.time_steps);
        std::vector<Eigen::Triplet<double>> trip;
        auto add = [&](std::size_t row_node, long col_offset_a, long col_offset_b, double coef, Eigen::Index row) {
            // neighbor at axis offsets (a, b); b unused in 1-D
            long idx;
            if (n == 1) idx = static_cast<long>(row_node) + col_offset_a;
            else idx = static_cast<long>(row_node) + col_offset_a * static_cast<long>(na) + col_offset_b;
            const long col = unknown[static_cast<std::size_t>(idx)];
            if (col >= 0) trip.emplace_back(row, col, -dt * coef);
        };
        for (Eigen::Index r = 0; r < nu; ++r) {
            const std::size_t node = node_of[static_cast<std::size_t>(r)];
            const Vec x = grid.node(node);
            const Mat q = field.covariance(x);
            const Vec b = field.drift(x);
            double diag = 0.0;
            for (std::size_t d = 0; d < n; ++d) {
                const auto di = static_cast<Eigen::Index>(d);
                const double a = 0.5 * q(di, di) / (dx * dx);
                double cp = a, cm = a;
                if (std::abs(b[di]) * dx > q(di, di)) {
                    if (b[di] > 0) cp += b[di] / dx;
                    else cm -= b[di] / dx;
                    diag -= std::abs(b[di]) / dx;
                } else {
                    cp += b[di] / (2.0 * dx);
                    cm -= b[di] / (2.0 * dx);
                }
                diag -= 2.0 * a;
                const long oa = d == 0 ? 1 : 0, ob = d == 1 ? 1 : 0;
                add(node, oa, ob, cp, r);
                add(node, -oa, -ob, cm, r);
            }
            if (n == 2) {
                const double c = 0.5 * 2.0 * q(0, 1) / (4.0 * dx * dx);
                add(node, 1, 1, c, r);
                add(node, -1, -1, c, r);
                add(node, 1, -1, -c, r);
                add(node, -1, 1, -c, r);
            }
            trip.emplace_back(r, r, 1.0 - dt * diag);
        }
        Eigen::SparseMatrix<double> m(nu, nu);
        m.setFromTriplets(trip.begin(), trip.end());
        Eigen::SparseLU<Eigen::SparseMatrix<double>> lu;
        lu.compute(m);
        if (lu.info() != Eigen::Success) throw StabilityError("fd_reference_solve: factorization failed");
        Vec w(nu);
        for (Eigen::Index r = 0; r < nu; ++r) w[r] = u[node_of[static_cast<std::size_t>(r)]];
        for (std::size_t s = 0; s < fg.time_steps; ++s) {
            w = lu.solve(w);
            if (lu.info() != Eigen::Success || !w.allFinite())
                throw StabilityError("fd_reference_solve: linear solve failed at step " + std::to_string(s));
        }
        for (Eigen::Index r = 0; r < nu; ++r) u[node_of[static_cast<std::size_t>(r)]] = w[r];
    }
    for (const auto& x : points) out.values.push_back(grid.interpolate(u, x));
    return out;
}

}  // namespace hjblab
