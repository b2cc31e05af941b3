#include "hjblab/coefficients.hpp"

#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

using namespace hjblab;
using Catch::Approx;

namespace {

ExampleFamilyParams example2d(double m, double p = 1.0) {
    ExampleFamilyParams params;
    params.dim = 2;
    params.m = m;
    params.p = p;
    params.b_coeffs = {1.0, 2.0};
    params.q = Mat::Identity(2, 2);
    return params;
}

ExampleFamilyParams example1d(double m, double p) {
    ExampleFamilyParams params;
    params.dim = 1;
    params.m = m;
    params.p = p;
    params.b_coeffs = {1.0};
    params.q = Mat::Identity(1, 1);
    return params;
}

Vec v1(double a) { return Vec::Constant(1, a); }
Vec v2(double a, double b) {
    Vec x(2);
    x << a, b;
    return x;
}

}  // namespace

TEST_CASE("example family admissibility") {
    CHECK_NOTHROW(make_example_family(example2d(0.4)));
    CHECK_THROWS_AS(make_example_family(example2d(0.6)), AdmissibilityError);
    try {
        make_example_family(example2d(0.6));
    } catch (const AdmissibilityError& e) {
        CHECK(std::string(e.what()).find("min(b)/max(b)") != std::string::npos);
    }
    CHECK_THROWS_AS(make_example_family(example1d(1.0, 0.0)), AdmissibilityError);
    CHECK_NOTHROW(make_example_family(example1d(0.9, 0.0)));
}

TEST_CASE("zero exponents give the Ornstein-Uhlenbeck field") {
    const auto f = make_example_family(example1d(0.0, 0.0));
    for (double x : {-3.0, -0.5, 0.0, 2.0, 7.0}) {
        CHECK(f.covariance(v1(x))(0, 0) == 1.0);
        CHECK(f.drift(v1(x))[0] == -x);
        CHECK(f.diffusion(v1(x))(0, 0) == 1.0);
    }
}

TEST_CASE("coefficient formulas of the example family") {
    const auto f = make_example_family(example2d(0.4, 1.0));
    const Vec x = v2(0.7, -1.3);
    const double s = 1.0 + x.squaredNorm();
    CHECK(f.covariance(x)(0, 0) == Approx(std::pow(s, 0.4)));
    CHECK(f.covariance(x)(0, 1) == 0.0);
    CHECK(f.drift(x)[0] == Approx(-0.7 * s));
    CHECK(f.drift(x)[1] == Approx(2.0 * 1.3 * s));
    const Mat g = f.diffusion(x);
    CHECK((g * g - f.covariance(x)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("batch kernel agrees with pointwise evaluators") {
    for (const auto& f : {make_example_family(example2d(0.4, 1.0)), make_ornstein_uhlenbeck(2), make_brownian(2)}) {
        const std::vector<double> xs{0.3, -1.2, 2.5, 0.1, -4.0, 3.0};
        std::vector<double> b(6), g(12);
        f.batch(xs, b, g);
        for (std::size_t p = 0; p < 3; ++p) {
            const Vec x = v2(xs[2 * p], xs[2 * p + 1]);
            const Vec bx = f.drift(x);
            const Mat gx = f.diffusion(x);
            for (int d = 0; d < 2; ++d) CHECK(b[2 * p + d] == Approx(bx[d]).margin(1e-12));
            for (int r = 0; r < 2; ++r)
                for (int c = 0; c < 2; ++c) CHECK(g[4 * p + 2 * r + c] == Approx(gx(r, c)).margin(1e-12));
        }
    }
}

TEST_CASE("analytic derivatives match central differences at second order") {
    const auto f = make_example_family(example2d(0.4, 1.0));
    std::vector<Vec> pts;
    for (std::size_t i = 0; i < 20; ++i) pts.push_back(halton_in_ball(i, 2, 3.0));
    // Second derivatives: compare the analytic Hessian of G with differences of DG.
    const CoefficientField fd = with_central_differences(f, 1e-4);
    double err_h = 0.0;
    for (const auto& x : pts) {
        const auto a = f.diffusion_hessian(x);
        const auto n = fd.diffusion_hessian(x);
        for (std::size_t k = 0; k < a.size(); ++k) err_h = std::max(err_h, (a[k] - n[k]).cwiseAbs().maxCoeff());
    }
    CHECK(err_h < 1e-5);
    const double e1 = derivative_crosscheck(f, pts, 1e-2);
    const double e2 = derivative_crosscheck(f, pts, 5e-3);
    const double e3 = derivative_crosscheck(f, pts, 2.5e-3);
    CHECK(e1 < 1e-2);
    // Halving h divides the error by about four.
    CHECK(e2 / e1 == Approx(0.25).margin(0.06));
    CHECK(e3 / e2 == Approx(0.25).margin(0.06));
}

TEST_CASE("cutoff profile values") {
    const Vec a = v1(0.5);
    auto c = eval_cutoff(1.0, a);
    CHECK(c.value == 1.0);
    CHECK(c.gradient.norm() == 0.0);
    CHECK(eval_cutoff(1.0, v1(0.75)).value == 0.0);
    CHECK(eval_cutoff(1.0, v1(0.625)).value == Approx(std::exp(1.0 - 1.0 / (1.0 - 0.125))).epsilon(1e-14));
    CHECK(eval_cutoff(1.0, v1(0.625)).value == Approx(0.86688).margin(5e-6));
    CHECK_THROWS(eval_cutoff(0.5, a));
}

TEST_CASE("cutoff support and range") {
    for (double R : {1.0, 3.0, 10.0}) {
        for (std::size_t i = 0; i < 400; ++i) {
            const Vec x = halton_in_ball(i, 2, R);
            const auto c = eval_cutoff(R, x);
            CHECK(c.value >= 0.0);
            CHECK(c.value <= 1.0);
            if (x.norm() <= R / 2) CHECK(c.value == 1.0);
            if (x.norm() >= 0.75 * R) CHECK(c.value == 0.0);
        }
    }
}

TEST_CASE("cutoff gradient matches the closed form") {
    for (double R : {1.0, 2.5, 8.0}) {
        for (std::size_t i = 0; i < 300; ++i) {
            Vec d = halton_in_ball(i, 2, 1.0);
            if (d.norm() < 1e-3) continue;
            d.normalize();
            const Vec x = R * (0.5 + 0.25 * radical_inverse(i + 1, 5)) * d;
            const Vec g = eval_cutoff(R, x).gradient;
            const Vec c = cutoff_gradient_closed_form(R, x);
            CHECK((g - c).norm() <= 1e-10 * std::max(1e-300, c.norm()) + 1e-300);
        }
    }
}

TEST_CASE("cutoff derivatives against finite differences") {
    const double R = 2.0;
    const double h = 1e-5;
    for (std::size_t i = 0; i < 50; ++i) {
        Vec d = halton_in_ball(i, 2, 1.0);
        if (d.norm() < 1e-3) continue;
        d.normalize();
        const Vec x = R * (0.52 + 0.21 * radical_inverse(i + 1, 3)) * d;
        const auto c = eval_cutoff(R, x);
        for (int k = 0; k < 2; ++k) {
            Vec e = Vec::Zero(2);
            e[k] = h;
            const auto cp = eval_cutoff(R, x + e), cm = eval_cutoff(R, x - e);
            CHECK(c.gradient[k] == Approx((cp.value - cm.value) / (2 * h)).margin(1e-6));
            for (int l = 0; l < 2; ++l)
                CHECK(c.hessian(k, l) == Approx((cp.gradient[l] - cm.gradient[l]) / (2 * h)).margin(1e-5));
        }
    }
}

TEST_CASE("auxiliary functions") {
    const auto ou = make_ornstein_uhlenbeck(2);
    const auto aux = auxiliary_functions(ou, v2(1.0, -2.0), 2.0, 1.5);
    CHECK(aux.f.norm() == 0.0);
    CHECK(aux.h_gamma == 0.0);

    const auto a2 = auxiliary_functions(ou, v2(2.0, 0.0), 2.0, 1.0);
    CHECK(a2.l_r[0] == Approx(0.4));
    CHECK(a2.l_r[1] == 0.0);

    // f_1 for the 1-D example: |Q D_1G G^{-1}| = (1+x^2)^m * m x / (1+x^2).
    const auto ex = make_example_family(example1d(0.4, 1.0));
    const auto fdex = with_central_differences(ex, 1e-4);
    for (double x : {-2.0, -0.3, 0.8, 3.0}) {
        const double expected = std::pow(1 + x * x, 0.4) * 0.4 * std::abs(x) / (1 + x * x);
        const double fa = auxiliary_functions(ex, v1(x), 1.0, 1.0).f[0];
        const double fn = auxiliary_functions(fdex, v1(x), 1.0, 1.0).f[0];
        CHECK(fa == Approx(expected).epsilon(1e-12));
        CHECK(fn == Approx(fa).epsilon(1e-6));
    }

    CoefficientField singular = make_field(
        2, "singular", [](const Vec&) -> Mat { return Mat::Zero(2, 2); }, [](const Vec& x) -> Vec { return -x; });
    CHECK_THROWS_AS(auxiliary_functions(singular, v2(1.0, 1.0), 1.0, 1.0), SingularDiffusionError);
}

TEST_CASE("hypotheses hold for the OU field") {
    const auto rep = check_hypotheses(make_ornstein_uhlenbeck(1), 5.0, 256, 7);
    for (const auto& c : rep.conditions) {
        INFO(c.name);
        CHECK(c.holds);
        CHECK(c.counterexamples == 0);
    }
    CHECK(rep.all_hold());
    CHECK(rep.nu0 == Approx(0.9));
    CHECK(rep.b0 == Approx(0.9));
    // M = -1 exactly: b(x) = 1 everywhere.
    CHECK(make_ornstein_uhlenbeck(1).b(v1(3.0)) == Approx(1.0));
}

TEST_CASE("hypotheses hold for admissible example parameters") {
    const auto rep = check_hypotheses(make_example_family(example2d(0.4, 1.0)), 5.0, 256, 11);
    for (const auto& c : rep.conditions) {
        INFO(c.name << " worst " << c.worst_value);
        CHECK(c.holds);
    }
    CHECK(rep.delta == 1.5);
    CHECK(rep.K[1] > 0.0);
    CHECK(rep.b0 > 0.0);

    const auto rep1 = check_hypotheses(make_example_family(example1d(0.4, 1.0)), 5.0, 256, 3);
    CHECK(rep1.all_hold());
}

TEST_CASE("Brownian field fails drift dominance") {
    const auto rep = check_hypotheses(make_brownian(2), 5.0, 128, 1);
    const auto& c = rep.condition("drift_dominance");
    CHECK_FALSE(c.holds);
    CHECK(c.counterexamples >= 1);
    CHECK(c.worst_point.size() == 2);
    CHECK(rep.condition("ellipticity").holds);
    CHECK_FALSE(rep.all_hold());
}

TEST_CASE("fitted cutoff constants satisfy their inequalities at sampled points") {
    const auto f = make_example_family(example2d(0.4, 1.0));
    const auto rep = check_hypotheses(f, 4.0, 128, 5);
    for (double R : rep.cutoff_radii) {
        for (std::size_t i = 0; i < 200; ++i) {
            const Vec x = halton_in_ball(1000 + i, 2, 0.75 * R);
            const auto c = eval_cutoff(R, x);
            if (c.value <= 0.0) continue;
            const Mat q = f.covariance(x);
            const Vec lhs = (q * c.gradient).cwiseAbs();
            const Vec qx = (q * x).cwiseAbs();
            for (int j = 0; j < 2; ++j) CHECK(lhs[j] <= rep.K[8] * qx[j] / (1 + R * R) * std::cbrt(c.value) + 1e-12);
            const double x2 = x.squaredNorm();
            const double rhs = x.dot(q * x) / (1 + x2 * x2) + q.trace() / (1 + x2);
            CHECK(std::abs(q.cwiseProduct(c.hessian).sum()) <= rep.K[9] * rhs + 1e-12);
        }
    }
}

TEST_CASE("ellipticity lower bound on sampled directions") {
    const auto f = make_example_family(example2d(0.4, 1.0));
    const auto rep = check_hypotheses(f, 5.0, 128, 9);
    for (std::size_t i = 0; i < 200; ++i) {
        const Vec x = halton_in_ball(i, 2, 5.0);
        Vec xi = halton_in_ball(i + 500, 2, 1.0);
        if (xi.norm() < 1e-6) continue;
        xi.normalize();
        CHECK(xi.dot(f.covariance(x) * xi) >= rep.nu0);
    }
}
