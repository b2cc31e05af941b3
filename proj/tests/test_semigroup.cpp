#include "hjblab/semigroup.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <vector>

using namespace hjblab;
using Catch::Approx;

namespace {

Vec v1(double a) { return Vec::Constant(1, a); }

double ou_cos(double t, double x) {
    const double var = (1.0 - std::exp(-2.0 * t)) / 2.0;
    return std::cos(x * std::exp(-t)) * std::exp(-var / 2.0);
}

double ou_cos_dx(double t, double x) {
    const double var = (1.0 - std::exp(-2.0 * t)) / 2.0;
    return -std::exp(-t) * std::sin(x * std::exp(-t)) * std::exp(-var / 2.0);
}

CoefficientField example1d() {
    ExampleFamilyParams p;
    p.dim = 1;
    p.m = 0.4;
    p.p = 1.0;
    p.b_coeffs = {1.0};
    p.q = Mat::Identity(1, 1);
    return make_example_family(p);
}

}  // namespace

TEST_CASE("union time grid") {
    const std::vector<double> out{0.5, 0.1};
    const auto g = detail::union_time_grid(out, 0.05, 4);
    CHECK(g.times.front() == 0.0);
    CHECK(g.times[g.output_step[0]] == 0.5);
    CHECK(g.times[g.output_step[1]] == 0.1);
    for (std::size_t k = 1; k < g.times.size(); ++k) {
        CHECK(g.times[k] > g.times[k - 1]);
        CHECK(g.times[k] - g.times[k - 1] <= 0.05 + 1e-12);
    }
    // [0, 0.1] gets max(ceil(2), 4) = 4 steps.
    CHECK(g.output_step[1] == 4);
}

TEST_CASE("Brownian forward paths are the increments") {
    const auto f = make_brownian(1);
    const std::vector<double> grid{0.0, 0.25};
    const auto ens = simulate_forward(f, v1(0.0), grid, 100, 3);
    for (std::size_t m = 0; m < 100; ++m) {
        CHECK(ens.state(m, 0)[0] == 0.0);
        CHECK(ens.state(m, 1)[0] == ens.increment(m, 0)[0]);
    }
}

TEST_CASE("increments have the Brownian moments") {
    const auto f = make_ornstein_uhlenbeck(2);
    const std::vector<double> grid{0.0, 0.1, 0.3};
    const std::size_t M = 20000;
    const auto ens = simulate_forward(f, Vec::Zero(2), grid, M, 17);
    for (std::size_t k = 0; k < 2; ++k) {
        const double dt = grid[k + 1] - grid[k];
        for (int d = 0; d < 2; ++d) {
            double s = 0, s2 = 0, cross = 0;
            for (std::size_t m = 0; m < M; ++m) {
                const auto w = ens.increment(m, k);
                s += w[d];
                s2 += w[d] * w[d];
                cross += w[0] * w[1];
            }
            const double mean = s / M;
            CHECK(std::abs(mean) <= 4.0 * std::sqrt(dt / M));
            // Var of the sample second moment: 2 dt^2 / M.
            CHECK(std::abs(s2 / M - dt) <= 4.0 * dt * std::sqrt(2.0 / M));
            CHECK(std::abs(cross / M) <= 4.0 * dt / std::sqrt(double(M)));
        }
    }
}

TEST_CASE("OU forward mean and seeded determinism") {
    const auto f = make_ornstein_uhlenbeck(1);
    std::vector<double> grid;
    for (int k = 0; k <= 400; ++k) grid.push_back(k * 2.5e-3);
    const std::size_t M = 100000;
    const auto a = simulate_forward(f, v1(1.0), grid, M, 42);
    double s = 0, s2 = 0;
    for (std::size_t m = 0; m < M; ++m) {
        const double x = a.state(m, 400)[0];
        s += x;
        s2 += x * x;
    }
    const double mean = s / M;
    const double se = std::sqrt((s2 / M - mean * mean) / (M - 1));
    CHECK(std::abs(mean - std::exp(-1.0)) <= 3.0 * se);
    const auto b = simulate_forward(f, v1(1.0), grid, 5000, 42);
    const auto b2 = simulate_forward(f, v1(1.0), grid, 5000, 42);
    CHECK(b.states == b2.states);
    CHECK(b.increments == b2.increments);
    MCConfig par;
    par.workers = 3;
    const auto c = simulate_forward(f, v1(1.0), grid, 5000, 42, par);
    CHECK(b.states == c.states);
}

TEST_CASE("blow-up guard") {
    const auto f = make_example_family([] {
        ExampleFamilyParams p;
        p.dim = 1;
        p.m = 0.0;
        p.p = 2.0;
        return p;
    }());
    MCConfig mc;
    mc.guard_radius = 50.0;
    const std::vector<double> grid{0.0, 0.5};
    CHECK_THROWS_AS(simulate_forward(f, v1(4.0), grid, 8, 1, mc), BlowupError);
    mc.scheme = Scheme::tamed_euler;
    CHECK_NOTHROW(simulate_forward(f, v1(4.0), grid, 8, 1, mc));
}

TEST_CASE("semigroup of constants and at t = 0") {
    const auto f = example1d();
    MCConfig mc;
    mc.paths = 2000;
    const std::vector<Vec> pts{v1(-1.0), v1(0.0), v1(2.0)};
    const auto one = apply_semigroup(f, constant_function(1.0), 0.7, pts, mc);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        CHECK(one.values[i] == 1.0);
        CHECK(one.se[i] == 0.0);
    }
    const auto phi = make_builtin_function("tanh:3");
    const auto s0 = apply_semigroup(f, phi, 0.0, pts, mc);
    for (std::size_t i = 0; i < pts.size(); ++i) CHECK(s0.values[i] == phi(pts[i]));
    const auto g = weighted_gradient(f, constant_function(1.0), 0.3, pts, mc);
    for (const auto& w : g.wgrad) CHECK(w.norm() == 0.0);
}

TEST_CASE("OU closed form for S(t) cos") {
    const auto f = make_ornstein_uhlenbeck(1);
    MCConfig mc;
    mc.paths = 100000;
    mc.seed = 5;
    const auto s = apply_semigroup(f, make_builtin_function("cos"), 0.5, {v1(0.0)}, mc);
    CHECK(ou_cos(0.5, 0.0) == Approx(0.853821).margin(1e-6));
    CHECK(std::abs(s.values[0] - 0.853821) <= std::max(3.0 * s.se[0], 1e-3));
    CHECK(s.se[0] > 0.0);
}

TEST_CASE("OU weighted gradient") {
    const auto f = make_ornstein_uhlenbeck(1);
    MCConfig mc;
    mc.paths = 40000;
    mc.seed = 9;
    const double x = std::numbers::pi / 2 * std::exp(0.5);
    CHECK(x == Approx(2.5903).margin(1e-3));
    const auto g = weighted_gradient(f, make_builtin_function("cos"), 0.5, {v1(x), v1(0.3)}, mc);
    CHECK(ou_cos_dx(0.5, x) == Approx(-0.51788).margin(1e-5));
    CHECK(std::abs(g.wgrad[0][0] - ou_cos_dx(0.5, x)) <= std::max(3.0 * g.wgrad_se[0][0], 5e-3));
    CHECK(std::abs(g.wgrad[1][0] - ou_cos_dx(0.5, 0.3)) <= std::max(3.0 * g.wgrad_se[1][0], 5e-3));
}

TEST_CASE("C1 data keeps the weighted gradient bounded as t -> 0") {
    const auto f = make_ornstein_uhlenbeck(1);
    MCConfig mc;
    mc.paths = 4000;
    const auto times = log_grid(1e-3, 0.1, 5);
    std::vector<Vec> pts;
    for (double x : linspace(-1, 1, 9)) pts.push_back(v1(x));
    const auto prof = gradient_profile(f, make_builtin_function("tanh"), times, pts, mc);
    for (double s : prof.sup_wgrad) CHECK(s <= 1.05);
}

TEST_CASE("step below the noise floor is rejected") {
    const auto f = make_ornstein_uhlenbeck(1);
    BoundedFunction rough{"rough", [](std::span<const double> x) { return std::sin(1e7 * x[0]) > 0 ? 1.0 : -1.0; },
                          1.0, false};
    MCConfig mc;
    mc.paths = 1000;
    mc.fd_step = 1e-6;
    CHECK_THROWS_AS(weighted_gradient(f, rough, 0.5, {v1(0.0)}, mc), StepTooSmallError);
}

TEST_CASE("semigroup law on OU") {
    const auto f = make_ornstein_uhlenbeck(1);
    const auto phi = make_builtin_function("cos");
    MCConfig mc;
    mc.paths = 20000;
    mc.antithetic = true;
    const SpatialGrid grid(1, -5.0, 5.0, 101);
    const auto inner = apply_semigroup(f, phi, 0.2, grid.nodes(), mc);
    const std::vector<double> vals = inner.values;
    BoundedFunction s02{"S(0.2)cos", [grid, vals](std::span<const double> x) { return grid.interpolate(vals, x); },
                        1.0, false};
    mc.seed = 77;
    const std::vector<Vec> pts{v1(-0.5), v1(0.0), v1(1.0)};
    const auto composed = apply_semigroup(f, s02, 0.3, pts, mc);
    mc.seed = 78;
    const auto direct = apply_semigroup(f, phi, 0.5, pts, mc);
    double max_inner_se = 0.0;
    for (double s : inner.se) max_inner_se = std::max(max_inner_se, s);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const double budget = 3.0 * std::hypot(composed.se[i], direct.se[i], max_inner_se) + 1e-3;
        CHECK(std::abs(composed.values[i] - direct.values[i]) <= budget);
    }
}

TEST_CASE("contraction of the semigroup") {
    const auto f = example1d();
    const auto phi = make_builtin_function("tanh:5");
    MCConfig mc;
    mc.paths = 4000;
    std::vector<Vec> pts;
    for (double x : linspace(-3, 3, 13)) pts.push_back(v1(x));
    for (double t : {0.01, 0.3, 1.0}) {
        const auto s = apply_semigroup(f, phi, t, pts, mc);
        for (std::size_t i = 0; i < pts.size(); ++i) CHECK(std::abs(s.values[i]) <= 1.0 + 4.0 * s.se[i]);
    }
}

TEST_CASE("gradient constant on OU") {
    const auto f = make_ornstein_uhlenbeck(1);
    MCConfig mc;
    mc.paths = 8000;
    std::vector<Vec> pts;
    for (double x : linspace(-3, 3, 25)) pts.push_back(v1(x));
    const auto ts = log_grid(0.01, 1.0, 8);
    const auto est = estimate_CT(f, {make_builtin_function("cos"), constant_function(2.0)}, 1.0, ts, pts, mc);
    CHECK(est.c_t <= 1.0);
    CHECK(est.c_t > 0.3);  // sqrt(t) e^{-t} e^{-Var/2} peaks near 0.38
    CHECK(est.c_t_inflated == Approx(1.1 * est.c_t));
    CHECK(est.profile.size() == ts.size());
    const auto zero = estimate_CT(f, {constant_function(2.0)}, 1.0, ts, pts, mc);
    CHECK(zero.c_t == 0.0);
}

TEST_CASE("finite-difference reference solver") {
    const auto f = make_ornstein_uhlenbeck(1);
    const auto s = fd_reference_solve(f, make_builtin_function("cos"), 8.0, {800, 400}, 0.5, {v1(0.0), v1(1.0)});
    CHECK(std::abs(s.values[0] - 0.853821) <= 2e-3);
    CHECK(std::abs(s.values[1] - ou_cos(0.5, 1.0)) <= 2e-3);

    const auto one = fd_reference_solve(f, constant_function(1.0), 12.0, {600, 100}, 0.2, {v1(0.0)});
    CHECK(one.values[0] == Approx(1.0).margin(1e-6));

    const auto ex = example1d();
    const auto phi = make_builtin_function("tanh:4");
    const auto m = fd_reference_solve(ex, phi, 4.0, {200, 100}, 0.3, [] {
        std::vector<Vec> p;
        for (double x : linspace(-3.9, 3.9, 40)) p.push_back(v1(x));
        return p;
    }());
    for (double v : m.values) CHECK(std::abs(v) <= 1.0 + 1e-12);

    CHECK_THROWS_AS(fd_reference_solve(make_ornstein_uhlenbeck(3), phi, 4.0, {}, 0.1, {}), DimensionError);
}

TEST_CASE("finite-difference reference in two dimensions") {
    const auto f = make_ornstein_uhlenbeck(2);
    Vec x = Vec::Zero(2);
    const auto s = fd_reference_solve(f, make_builtin_function("cos"), 6.0, {120, 100}, 0.5, {x});
    CHECK(std::abs(s.values[0] - 0.853821) <= 5e-3);
}
