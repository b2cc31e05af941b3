#pragma once

// Coefficient fields of the operator
//   A f = 1/2 Tr[Q D^2 f] + <B, grad f>,   G = sqrt(Q),
// the polynomial-growth example family, the radial cutoff eta_R, the
// auxiliary functions f_i, h^gamma, l^i_R, and a sampling-based checker of
// the structural hypotheses (ellipticity, dissipativity, growth).

#include "hjblab/errors.hpp"
#include "hjblab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace hjblab {

enum class DerivativeMode { analytic, central_difference };

/// Batched evaluation for path simulation: x holds count*N coordinates,
/// drift receives count*N values, diffusion count*N*N (row-major per point).
using BatchKernel =
    std::function<void(std::span<const double> x, std::span<double> drift, std::span<double> diffusion)>;

/// Drift B, diffusion G = sqrt(Q) and their derivatives.
///
/// All members are pure functions of the point, so a field can be shared
/// freely between threads once built.
struct CoefficientField {
    std::size_t dim = 0;
    std::string name;
    std::function<Mat(const Vec&)> covariance;                        // Q
    std::function<Mat(const Vec&)> diffusion;                         // G
    std::function<Vec(const Vec&)> drift;                             // B
    std::function<std::vector<Mat>(const Vec&)> diffusion_jacobian;   // [k] = D_k G
    std::function<std::vector<Mat>(const Vec&)> diffusion_hessian;    // [k*N+l] = D_k D_l G
    std::function<Mat(const Vec&)> drift_jacobian;                    // (i,k) = D_k B_i
    std::function<double(const Vec&)> ellipticity;    // nu(x); empty means lambda_min(Q(x))
    std::function<double(const Vec&)> dissipativity;  // b(x); empty means lambda_min(sym(-M(x)))
    DerivativeMode derivative_mode = DerivativeMode::analytic;
    double fd_relative_step = 1e-4;
    BatchKernel batch;

    /// Central-difference step at x: h = rel * (1 + |x|).
    double fd_step(const Vec& x) const { return fd_relative_step * (1.0 + x.norm()); }

    double nu(const Vec& x) const {
        return ellipticity ? ellipticity(x) : min_eigenvalue_sym(covariance(x));
    }

    /// M = G DB G^{-1} - sum_ij Q_ij (D_ij G) G^{-1} - sum_j B_j (D_j G) G^{-1}.
    Mat m_matrix(const Vec& x) const {
        const auto n = static_cast<Eigen::Index>(dim);
        const Mat g = diffusion(x);
        const Mat ginv = g.inverse();
        const Mat q = covariance(x);
        const Vec bx = drift(x);
        const auto dg = diffusion_jacobian(x);
        const auto d2g = diffusion_hessian(x);
        Mat m = g * drift_jacobian(x) * ginv;
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j)
                m -= q(i, j) * d2g[static_cast<std::size_t>(i * n + j)] * ginv;
            m -= bx[i] * dg[static_cast<std::size_t>(i)] * ginv;
        }
        return m;
    }

    double b(const Vec& x) const {
        return dissipativity ? dissipativity(x) : min_eigenvalue_sym(-m_matrix(x));
    }
};

namespace detail {

inline double pow_fast(double base, double e) {
    if (e == 0.0) return 1.0;
    if (e == 1.0) return base;
    if (e == 0.5) return std::sqrt(base);
    if (e == 2.0) return base * base;
    return std::pow(base, e);
}

/// Pointwise-to-batch adapter for fields without a hand-written kernel.
inline BatchKernel batch_from_pointwise(std::size_t dim, std::function<Vec(const Vec&)> drift,
                                        std::function<Mat(const Vec&)> diffusion) {
    return [dim, drift = std::move(drift), diffusion = std::move(diffusion)](
               std::span<const double> x, std::span<double> b, std::span<double> g) {
        const std::size_t count = x.size() / dim;
        Vec p(static_cast<Eigen::Index>(dim));
        for (std::size_t i = 0; i < count; ++i) {
            for (std::size_t d = 0; d < dim; ++d) p[static_cast<Eigen::Index>(d)] = x[i * dim + d];
            const Vec bv = drift(p);
            const Mat gv = diffusion(p);
            for (std::size_t d = 0; d < dim; ++d) b[i * dim + d] = bv[static_cast<Eigen::Index>(d)];
            for (std::size_t r = 0; r < dim; ++r)
                for (std::size_t c = 0; c < dim; ++c)
                    g[i * dim * dim + r * dim + c] =
                        gv(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
        }
    };
}

inline std::vector<Mat> fd_jacobian_of_matrix(const std::function<Mat(const Vec&)>& f, const Vec& x, double h) {
    std::vector<Mat> out;
    out.reserve(static_cast<std::size_t>(x.size()));
    for (Eigen::Index k = 0; k < x.size(); ++k) {
        Vec xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        out.push_back((f(xp) - f(xm)) / (2.0 * h));
    }
    return out;
}

inline std::vector<Mat> fd_hessian_of_matrix(const std::function<Mat(const Vec&)>& f, const Vec& x, double h) {
    const Eigen::Index n = x.size();
    std::vector<Mat> out(static_cast<std::size_t>(n * n));
    const Mat f0 = f(x);
    for (Eigen::Index k = 0; k < n; ++k) {
        for (Eigen::Index l = 0; l < n; ++l) {
            Mat v;
            if (k == l) {
                Vec xp = x, xm = x;
                xp[k] += h;
                xm[k] -= h;
                v = (f(xp) - 2.0 * f0 + f(xm)) / (h * h);
            } else {
                Vec pp = x, pm = x, mp = x, mm = x;
                pp[k] += h; pp[l] += h;
                pm[k] += h; pm[l] -= h;
                mp[k] -= h; mp[l] += h;
                mm[k] -= h; mm[l] -= h;
                v = (f(pp) - f(pm) - f(mp) + f(mm)) / (4.0 * h * h);
            }
            out[static_cast<std::size_t>(k * n + l)] = v;
        }
    }
    return out;
}

inline Mat fd_jacobian_of_vector(const std::function<Vec(const Vec&)>& f, const Vec& x, double h) {
    const Eigen::Index n = x.size();
    Mat jac(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
        Vec xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        jac.col(k) = (f(xp) - f(xm)) / (2.0 * h);
    }
    return jac;
}

}  // namespace detail

/// Copy of `field` whose derivative evaluators are central differences of G
/// and B with step h = rel * (1 + |x|).
inline CoefficientField with_central_differences(const CoefficientField& field, double rel_step = 1e-4) {
    CoefficientField out = field;
    out.derivative_mode = DerivativeMode::central_difference;
    out.fd_relative_step = rel_step;
    auto g = field.diffusion;
    auto b = field.drift;
    out.diffusion_jacobian = [g, rel_step](const Vec& x) {
        return detail::fd_jacobian_of_matrix(g, x, rel_step * (1.0 + x.norm()));
    };
    out.diffusion_hessian = [g, rel_step](const Vec& x) {
        return detail::fd_hessian_of_matrix(g, x, rel_step * (1.0 + x.norm()));
    };
    out.drift_jacobian = [b, rel_step](const Vec& x) {
        return detail::fd_jacobian_of_vector(b, x, rel_step * (1.0 + x.norm()));
    };
    return out;
}

/// Field from Q and B only: G is the eigen-decomposition square root and all
/// derivatives are central differences.
inline CoefficientField make_field(std::size_t dim, std::string name, std::function<Mat(const Vec&)> covariance,
                                   std::function<Vec(const Vec&)> drift) {
    CoefficientField f;
    f.dim = dim;
    f.name = std::move(name);
    f.covariance = covariance;
    f.diffusion = [covariance](const Vec& x) { return sqrt_psd(covariance(x)); };
    f.drift = std::move(drift);
    f = with_central_differences(f);
    f.batch = detail::batch_from_pointwise(dim, f.drift, f.diffusion);
    return f;
}

/// Parameters of Q_ij = q_ij (1+|x|^2)^m, B_i = -b_i x_i (1+|x|^2)^p.
struct ExampleFamilyParams {
    std::size_t dim = 1;
    double m = 0.0;
    double p = 0.0;
    std::vector<double> b_coeffs{1.0};
    Mat q = Mat::Identity(1, 1);
};

/// Throws AdmissibilityError naming the violated inequality.
inline void check_admissible(const ExampleFamilyParams& params) {
    const auto n = params.dim;
    if (n == 0) throw AdmissibilityError("example family: dimension must be positive");
    if (params.b_coeffs.size() != n)
        throw AdmissibilityError("example family: expected " + std::to_string(n) + " drift coefficients b_i");
    if (params.q.rows() != static_cast<Eigen::Index>(n) || params.q.cols() != static_cast<Eigen::Index>(n))
        throw AdmissibilityError("example family: q must be N x N");
    if (params.m < 0.0 || params.p < 0.0) throw AdmissibilityError("example family: exponents m, p must be >= 0");
    for (double bi : params.b_coeffs)
        if (!(bi > 0.0)) throw AdmissibilityError("example family: every b_i must be > 0");
    if ((params.q - params.q.transpose()).cwiseAbs().maxCoeff() > 1e-12 * (1.0 + params.q.cwiseAbs().maxCoeff()))
        throw AdmissibilityError("example family: q must be symmetric");
    if (!(min_eigenvalue_sym(params.q) > 0.0)) throw AdmissibilityError("example family: q must be positive definite");
    const auto [lo, hi] = std::minmax_element(params.b_coeffs.begin(), params.b_coeffs.end());
    if (n >= 2) {
        const double ratio = *lo / *hi;
        if (params.m > ratio) {
            std::ostringstream os;
            os << "example family: m <= min(b)/max(b) violated (m = " << params.m << ", min(b)/max(b) = " << ratio
               << ")";
            throw AdmissibilityError(os.str());
        }
    } else if (!(2.0 * params.p + 1.0 > params.m)) {
        std::ostringstream os;
        os << "example family: 2p + 1 > m violated (p = " << params.p << ", m = " << params.m << ")";
        throw AdmissibilityError(os.str());
    }
}

/// Example family with analytic derivatives; G = sqrt(q) (1+|x|^2)^{m/2}.
inline CoefficientField make_example_family(const ExampleFamilyParams& params) {
    check_admissible(params);
    const std::size_t n = params.dim;
    const double m = params.m, p = params.p;
    const Mat q = params.q;
    const Mat sq = sqrt_psd(q);
    const Vec bc = Eigen::Map<const Vec>(params.b_coeffs.data(), static_cast<Eigen::Index>(n));

    CoefficientField f;
    f.dim = n;
    std::ostringstream nm;
    nm << "example_family(N=" << n << ",m=" << m << ",p=" << p << ")";
    f.name = nm.str();
    f.covariance = [q, m](const Vec& x) -> Mat { return q * detail::pow_fast(1.0 + x.squaredNorm(), m); };
    f.diffusion = [sq, m](const Vec& x) -> Mat { return sq * detail::pow_fast(1.0 + x.squaredNorm(), 0.5 * m); };
    f.drift = [bc, p](const Vec& x) -> Vec {
        return -(bc.array() * x.array()).matrix() * detail::pow_fast(1.0 + x.squaredNorm(), p);
    };
    f.diffusion_jacobian = [sq, m](const Vec& x) {
        const double s = 1.0 + x.squaredNorm();
        const double c = m * detail::pow_fast(s, 0.5 * m - 1.0);
        std::vector<Mat> out;
        for (Eigen::Index k = 0; k < x.size(); ++k) out.push_back(sq * (c * x[k]));
        return out;
    };
    f.diffusion_hessian = [sq, m](const Vec& x) {
        const double s = 1.0 + x.squaredNorm();
        const double c1 = m * detail::pow_fast(s, 0.5 * m - 1.0);
        const double c2 = m * (m - 2.0) * detail::pow_fast(s, 0.5 * m - 2.0);
        const Eigen::Index nn = x.size();
        std::vector<Mat> out(static_cast<std::size_t>(nn * nn));
        for (Eigen::Index k = 0; k < nn; ++k)
            for (Eigen::Index l = 0; l < nn; ++l)
                out[static_cast<std::size_t>(k * nn + l)] = sq * ((k == l ? c1 : 0.0) + c2 * x[k] * x[l]);
        return out;
    };
    f.drift_jacobian = [bc, p](const Vec& x) -> Mat {
        const double s = 1.0 + x.squaredNorm();
        const double sp = detail::pow_fast(s, p);
        const double sp1 = 2.0 * p * detail::pow_fast(s, p - 1.0);
        Mat j = Mat(bc.asDiagonal()) * (Mat::Identity(x.size(), x.size()) * sp + sp1 * x * x.transpose());
        return -j;
    };
    const bool diag_identity = sq.isIdentity(0.0);
    std::vector<double> sqv(sq.data(), sq.data() + sq.size());
    std::vector<double> bv(params.b_coeffs);
    f.batch = [n, m, p, sqv, bv, diag_identity](std::span<const double> x, std::span<double> b,
                                                 std::span<double> g) {
        const std::size_t count = x.size() / n;
        for (std::size_t i = 0; i < count; ++i) {
            const double* xi = x.data() + i * n;
            double r2 = 0.0;
            for (std::size_t d = 0; d < n; ++d) r2 += xi[d] * xi[d];
            const double s = 1.0 + r2;
            const double bp = detail::pow_fast(s, p);
            const double gm = detail::pow_fast(s, 0.5 * m);
            for (std::size_t d = 0; d < n; ++d) b[i * n + d] = -bv[d] * xi[d] * bp;
            double* gi = g.data() + i * n * n;
            if (diag_identity) {
                for (std::size_t e = 0; e < n * n; ++e) gi[e] = 0.0;
                for (std::size_t d = 0; d < n; ++d) gi[d * n + d] = gm;
            } else {
                // sqv is column-major; write row-major.
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t c = 0; c < n; ++c) gi[r * n + c] = sqv[c * n + r] * gm;
            }
        }
    };
    return f;
}

/// Ornstein-Uhlenbeck field B(x) = -x, G = I.
inline CoefficientField make_ornstein_uhlenbeck(std::size_t dim = 1) {
    ExampleFamilyParams params;
    params.dim = dim;
    params.b_coeffs.assign(dim, 1.0);
    params.q = Mat::Identity(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(dim));
    CoefficientField f = make_example_family(params);
    f.name = "ornstein_uhlenbeck(N=" + std::to_string(dim) + ")";
    return f;
}

/// B = 0, G = I. Violates drift dominance; used as a negative control.
inline CoefficientField make_brownian(std::size_t dim = 1) {
    const auto n = static_cast<Eigen::Index>(dim);
    CoefficientField f;
    f.dim = dim;
    f.name = "brownian(N=" + std::to_string(dim) + ")";
    f.covariance = [n](const Vec&) -> Mat { return Mat::Identity(n, n); };
    f.diffusion = [n](const Vec&) -> Mat { return Mat::Identity(n, n); };
    f.drift = [n](const Vec&) -> Vec { return Vec::Zero(n); };
    f.diffusion_jacobian = [n](const Vec&) { return std::vector<Mat>(static_cast<std::size_t>(n), Mat::Zero(n, n)); };
    f.diffusion_hessian = [n](const Vec&) {
        return std::vector<Mat>(static_cast<std::size_t>(n * n), Mat::Zero(n, n));
    };
    f.drift_jacobian = [n](const Vec&) -> Mat { return Mat::Zero(n, n); };
    f.batch = [dim](std::span<const double> x, std::span<double> b, std::span<double> g) {
        const std::size_t count = x.size() / dim;
        std::fill(b.begin(), b.begin() + static_cast<std::ptrdiff_t>(count * dim), 0.0);
        for (std::size_t i = 0; i < count; ++i)
            for (std::size_t r = 0; r < dim; ++r)
                for (std::size_t c = 0; c < dim; ++c) g[i * dim * dim + r * dim + c] = r == c ? 1.0 : 0.0;
    };
    return f;
}

/// Largest relative discrepancy between the analytic derivatives of `field`
/// (DG and DB) and central differences with relative step `rel_step`.
inline double derivative_crosscheck(const CoefficientField& field, std::span<const Vec> points, double rel_step) {
    const CoefficientField fd = with_central_differences(field, rel_step);
    double worst = 0.0;
    for (const Vec& x : points) {
        const auto a = field.diffusion_jacobian(x);
        const auto n = fd.diffusion_jacobian(x);
        for (std::size_t k = 0; k < a.size(); ++k) {
            const double scale = std::max(1.0, a[k].cwiseAbs().maxCoeff());
            worst = std::max(worst, (a[k] - n[k]).cwiseAbs().maxCoeff() / scale);
        }
        const Mat ja = field.drift_jacobian(x);
        const Mat jn = fd.drift_jacobian(x);
        worst = std::max(worst, (ja - jn).cwiseAbs().maxCoeff() / std::max(1.0, ja.cwiseAbs().maxCoeff()));
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Cutoff eta_R(x) = eta(|x| / R)

/// eta(t) = 1 on [0,1/2], exp(1 - 1/(1-(4t-2)^3)) on (1/2,3/4), 0 after.
inline double cutoff_profile(double t) {
    if (t <= 0.5) return 1.0;
    if (t >= 0.75) return 0.0;
    const double s = 4.0 * t - 2.0;
    return std::exp(1.0 - 1.0 / (1.0 - s * s * s));
}

inline double cutoff_profile_d1(double t) {
    if (t <= 0.5 || t >= 0.75) return 0.0;
    const double s = 4.0 * t - 2.0;
    const double den = 1.0 - s * s * s;
    return -12.0 * s * s / (den * den) * cutoff_profile(t);
}

inline double cutoff_profile_d2(double t) {
    if (t <= 0.5 || t >= 0.75) return 0.0;
    const double s = 4.0 * t - 2.0;
    const double den = 1.0 - s * s * s;
    const double g = -12.0 * s * s / (den * den);
    const double dg = -48.0 * (2.0 * s + 4.0 * s * s * s * s) / (den * den * den);
    return (dg + g * g) * cutoff_profile(t);
}

struct CutoffValue {
    double value = 1.0;
    Vec gradient;
    Mat hessian;
};

/// eta_R and its first two derivatives by the chain rule; exact zeros outside
/// the transition annulus R/2 < |x| < 3R/4.
inline CutoffValue eval_cutoff(double radius, const Vec& x) {
    if (radius < 1.0) throw std::invalid_argument("eval_cutoff: R must be >= 1");
    const auto n = x.size();
    CutoffValue out{0.0, Vec::Zero(n), Mat::Zero(n, n)};
    const double r = x.norm();
    const double t = r / radius;
    out.value = cutoff_profile(t);
    if (t <= 0.5 || t >= 0.75) return out;
    const double d1 = cutoff_profile_d1(t) / radius;
    const double d2 = cutoff_profile_d2(t) / (radius * radius);
    const Vec e = x / r;
    out.gradient = d1 * e;
    out.hessian = d2 * e * e.transpose() + (d1 / r) * (Mat::Identity(n, n) - e * e.transpose());
    return out;
}

/// The printed closed form
///   D_i eta_R = -x_i / (|x| R) chi 12 (4|x|/R-2)^2 / (1-(4|x|/R-2)^3)^2 eta_R.
inline Vec cutoff_gradient_closed_form(double radius, const Vec& x) {
    const double r = x.norm();
    const double t = r / radius;
    if (t < 0.5 || t >= 0.75) return Vec::Zero(x.size());
    const double s = 4.0 * t - 2.0;
    const double den = 1.0 - s * s * s;
    return -x / (r * radius) * (12.0 * s * s / (den * den)) * cutoff_profile(t);
}

struct CutoffFamily {
    double radius = 1.0;
    CutoffValue operator()(const Vec& x) const { return eval_cutoff(radius, x); }
};

// ---------------------------------------------------------------------------
// Auxiliary functions

struct AuxiliaryValues {
    Vec f;           // f_i(x) = |sum_j Q_ij (D_j G) G^{-1}| (Frobenius)
    double h_gamma;  // sum_{j,k,l,m} |G_jk D_k G_lm|^gamma
    Vec l_r;         // l^i_R(x) = |(Q x)_i| / (1 + R^2)
};

inline constexpr double kSingularConditionLimit = 1e12;

inline double condition_number(const Mat& g) {
    Eigen::JacobiSVD<Mat> svd(g);
    const Vec s = svd.singularValues();
    const double smin = s.minCoeff();
    return smin > 0.0 ? s.maxCoeff() / smin : std::numeric_limits<double>::infinity();
}

namespace detail {

inline Vec aux_f(const Mat& q, const std::vector<Mat>& dg, const Mat& ginv) {
    const Eigen::Index n = q.rows();
    Vec f(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        Mat acc = Mat::Zero(n, n);
        for (Eigen::Index j = 0; j < n; ++j) acc += q(i, j) * dg[static_cast<std::size_t>(j)];
        f[i] = (acc * ginv).norm();
    }
    return f;
}

/// The N^4 products |G_jk (D_k G)_lm|, zero entries dropped.
inline std::vector<double> aux_h_terms(const Mat& g, const std::vector<Mat>& dg) {
    const Eigen::Index n = g.rows();
    std::vector<double> terms;
    for (Eigen::Index j = 0; j < n; ++j)
        for (Eigen::Index k = 0; k < n; ++k)
            for (Eigen::Index l = 0; l < n; ++l)
                for (Eigen::Index m = 0; m < n; ++m) {
                    const double v = std::abs(g(j, k) * dg[static_cast<std::size_t>(k)](l, m));
                    if (v > 0.0) terms.push_back(v);
                }
    return terms;
}

inline double power_sum(const std::vector<double>& terms, double gamma) {
    double s = 0.0;
    for (double v : terms) s += std::pow(v, gamma);
    return s;
}

}  // namespace detail

inline AuxiliaryValues auxiliary_functions(const CoefficientField& field, const Vec& x, double radius, double gamma) {
    if (!(gamma > 0.0)) throw std::invalid_argument("auxiliary_functions: gamma must be > 0");
    const Mat g = field.diffusion(x);
    const double cond = condition_number(g);
    if (!(cond < kSingularConditionLimit)) {
        std::ostringstream os;
        os << "auxiliary_functions: G(x) numerically singular (condition number " << cond << ")";
        throw SingularDiffusionError(os.str());
    }
    const Mat q = field.covariance(x);
    const auto dg = field.diffusion_jacobian(x);
    AuxiliaryValues out;
    out.f = detail::aux_f(q, dg, g.inverse());
    out.h_gamma = detail::power_sum(detail::aux_h_terms(g, dg), gamma);
    out.l_r = (q * x).cwiseAbs() / (1.0 + radius * radius);
    return out;
}

// ---------------------------------------------------------------------------
// Hypothesis checking

struct ConditionRecord {
    std::string name;
    bool holds = false;
    double witness_constant = 0.0;
    Vec worst_point;
    double worst_value = 0.0;
    std::size_t counterexamples = 0;
    std::string detail;
};

struct HypothesisReport {
    std::vector<ConditionRecord> conditions;
    double nu0 = 0.0;
    double b0 = 0.0;
    std::array<double, 10> K{};  // K[1]..K[9]; K[0] unused
    double delta = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    std::vector<std::pair<int, double>> c_n;
    double radius = 0.0;
    std::size_t samples = 0;
    std::uint64_t seed = 0;
    std::vector<double> ray_radii;
    std::vector<double> cutoff_radii;

    bool all_hold() const {
        return std::all_of(conditions.begin(), conditions.end(), [](const auto& c) { return c.holds; });
    }

    const ConditionRecord& condition(const std::string& name) const {
        for (const auto& c : conditions)
            if (c.name == name) return c;
        throw std::out_of_range("no condition named " + name);
    }
};

struct HypothesisCheckOptions {
    std::size_t ray_doublings = 8;      // rays sampled at radius * 2^k, k = 0..ray_doublings
    double tail_growth_limit = 1.5;     // growth factor over the last two doublings flagging unboundedness
    double safety_margin = 0.1;         // fitted constants are inflated (or deflated) by this fraction
    std::vector<double> cutoff_radii{1.0, 2.0, 4.0, 8.0, 16.0};
    std::vector<int> n_values{1, 2, 4, 8, 16, 32, 64};
};

namespace detail {

struct SamplePoint {
    Vec x;
    bool singular = false;
    Mat q, g, ginv, db;
    Vec b;
    std::vector<Mat> dg, d2g;
    double lam_q = 0, nu = 0, lam_db_max = 0, lam_negm_min = 0, bfun = 0;
    Vec f;
    std::vector<double> h_terms;
    Vec qx;
    bool finite = true;
};

inline SamplePoint evaluate_sample(const CoefficientField& field, const Vec& x) {
    SamplePoint s;
    s.x = x;
    s.q = field.covariance(x);
    s.g = field.diffusion(x);
    s.b = field.drift(x);
    s.db = field.drift_jacobian(x);
    s.dg = field.diffusion_jacobian(x);
    s.d2g = field.diffusion_hessian(x);
    s.qx = s.q * x;
    s.lam_q = min_eigenvalue_sym(s.q);
    s.nu = field.ellipticity ? field.ellipticity(x) : s.lam_q;
    s.lam_db_max = max_eigenvalue_sym(s.db);
    s.finite = s.q.allFinite() && s.g.allFinite() && s.b.allFinite() && s.db.allFinite();
    for (const auto& m : s.dg) s.finite = s.finite && m.allFinite();
    for (const auto& m : s.d2g) s.finite = s.finite && m.allFinite();
    s.singular = !(condition_number(s.g) < kSingularConditionLimit);
    if (s.singular) return s;
    s.ginv = s.g.inverse();
    s.lam_negm_min = min_eigenvalue_sym(-field.m_matrix(x));
    s.bfun = field.dissipativity ? field.dissipativity(x) : s.lam_negm_min;
    s.f = aux_f(s.q, s.dg, s.ginv);
    s.h_terms = aux_h_terms(s.g, s.dg);
    return s;
}

/// Result of scanning a "bounded above" quantity over ball and ray samples.
struct SupScan {
    double sup = -std::numeric_limits<double>::infinity();
    Vec worst;
    bool tail_growth = false;
    double tail_factor = 0.0;
    bool finite = true;
};

struct SampleSet {
    std::vector<SamplePoint> ball;
    std::vector<std::vector<SamplePoint>> rays;  // rays[r][k] at radius * 2^k
};

template <class F>
SupScan scan_sup(const SampleSet& set, F&& quantity, double growth_limit) {
    SupScan out;
    auto visit = [&](const SamplePoint& s) -> double {
        if (s.singular) return -std::numeric_limits<double>::infinity();
        const double v = quantity(s);
        if (!std::isfinite(v)) {
            out.finite = false;
            out.worst = s.x;
            return v;
        }
        if (v > out.sup) {
            out.sup = v;
            out.worst = s.x;
        }
        return v;
    };
    for (const auto& s : set.ball) visit(s);
    for (const auto& ray : set.rays) {
        std::vector<double> vals;
        for (const auto& s : ray) vals.push_back(visit(s));
        if (vals.size() >= 3) {
            const double last = std::max(vals.back(), 0.0);
            const double earlier = std::max(vals[vals.size() - 3], 0.0);
            const double floor = 1e-9 * (1.0 + std::abs(out.sup));
            if (last > growth_limit * earlier + floor) {
                out.tail_growth = true;
                out.tail_factor = std::max(out.tail_factor, earlier > 0 ? last / earlier : std::numeric_limits<double>::infinity());
                out.worst = ray.back().x;
            }
        }
    }
    return out;
}

inline double inflate(double v, double margin) { return v + margin * std::abs(v); }

}  // namespace detail

/// Sampling-based verdicts for the structural hypotheses on the operator.
///
/// Ball samples are Halton points in B(radius); rays run along coordinate
/// axes, diagonals and a few quasi-random directions out to radius * 2^K.
/// A growth condition fails when the tested ratio still grows by more than
/// `tail_growth_limit` over the last two doublings of some ray.
inline HypothesisReport check_hypotheses(const CoefficientField& field, double radius, std::size_t samples,
                                         std::uint64_t seed, const HypothesisCheckOptions& opt = {}) {
    if (samples == 0) throw std::invalid_argument("check_hypotheses: samples must be >= 1");
    const std::size_t n = field.dim;
    const auto ni = static_cast<Eigen::Index>(n);
    HypothesisReport rep;
    rep.radius = radius;
    rep.samples = samples;
    rep.seed = seed;
    const double margin = opt.safety_margin;

    detail::SampleSet set;
    const std::uint64_t offset = seed % 100003;
    for (std::size_t i = 0; i < samples; ++i)
        set.ball.push_back(detail::evaluate_sample(field, halton_in_ball(offset + i, n, radius)));

    std::vector<Vec> dirs;
    for (Eigen::Index k = 0; k < ni; ++k) {
        dirs.push_back(Vec::Unit(ni, k));
        dirs.push_back(-Vec::Unit(ni, k));
    }
    if (n >= 2 && n <= 4) {
        for (unsigned mask = 0; mask < (1u << n); ++mask) {
            Vec d(ni);
            for (Eigen::Index k = 0; k < ni; ++k) d[k] = (mask >> k) & 1u ? -1.0 : 1.0;
            dirs.push_back(d.normalized());
        }
    }
    if (n >= 2)
        for (std::size_t i = 0; i < 8; ++i) {
            Vec d = halton_in_ball(offset + 7919 + i, n, 1.0);
            if (d.norm() > 1e-6) dirs.push_back(d.normalized());
        }
    for (std::size_t k = 0; k <= opt.ray_doublings; ++k) rep.ray_radii.push_back(radius * std::ldexp(1.0, static_cast<int>(k)));
    for (const Vec& d : dirs) {
        std::vector<detail::SamplePoint> ray;
        for (double r : rep.ray_radii) ray.push_back(detail::evaluate_sample(field, r * d));
        set.rays.push_back(std::move(ray));
    }

    auto all_points = [&](auto&& fn) {
        for (const auto& s : set.ball) fn(s);
        for (const auto& ray : set.rays)
            for (const auto& s : ray) fn(s);
    };

    // (i) regularity: finite values, derivative consistency.
    {
        ConditionRecord rec{"regularity"};
        bool finite = true;
        Vec bad;
        all_points([&](const detail::SamplePoint& s) {
            if (!s.finite && finite) {
                finite = false;
                bad = s.x;
            }
        });
        std::vector<Vec> pts;
        for (std::size_t i = 0; i < std::min<std::size_t>(samples, 64); ++i) pts.push_back(set.ball[i].x);
        const double err =
            field.derivative_mode == DerivativeMode::analytic ? derivative_crosscheck(field, pts, 1e-5) : 0.0;
        rec.witness_constant = err;
        rec.holds = finite && err <= 1e-4;
        rec.worst_point = finite ? (pts.empty() ? Vec::Zero(ni) : pts.front()) : bad;
        rec.worst_value = err;
        rec.counterexamples = rec.holds ? 0 : 1;
        rec.detail = "finite coefficients; analytic vs central-difference derivative discrepancy";
        rep.conditions.push_back(rec);
    }

    // (ii) ellipticity: <Q xi, xi> >= nu(x) |xi|^2, nu >= nu0 > 0 (min over unit xi is lambda_min).
    {
        ConditionRecord rec{"ellipticity"};
        double nu_min = std::numeric_limits<double>::infinity();
        all_points([&](const detail::SamplePoint& s) {
            const bool bad = s.singular || !(s.nu > 0.0) || s.lam_q < s.nu * (1.0 - 1e-9) - 1e-12;
            if (bad) {
                if (rec.counterexamples == 0) rec.worst_point = s.x;
                ++rec.counterexamples;
            }
            if (s.nu < nu_min) {
                nu_min = s.nu;
                if (rec.counterexamples == 0) rec.worst_point = s.x;
            }
        });
        rep.nu0 = nu_min > 0 ? (1.0 - margin) * nu_min : nu_min;
        rec.witness_constant = rep.nu0;
        rec.worst_value = nu_min;
        rec.holds = rec.counterexamples == 0 && nu_min > 0.0;
        if (!rec.holds && rec.counterexamples == 0) rec.counterexamples = 1;
        rec.detail = "witness is nu0 (minimum sampled nu, deflated by the safety margin)";
        rep.conditions.push_back(rec);
    }

    // (ii) dissipativity, Jacobian reading: <DB(x) xi, xi> <= 0.
    {
        ConditionRecord rec{"dissipativity_jacobian"};
        double worst = -std::numeric_limits<double>::infinity();
        all_points([&](const detail::SamplePoint& s) {
            const double tol = 1e-12 * (1.0 + s.db.cwiseAbs().maxCoeff());
            if (s.lam_db_max > tol) {
                if (rec.counterexamples == 0 || s.lam_db_max > worst) rec.worst_point = s.x;
                ++rec.counterexamples;
            }
            if (s.lam_db_max > worst) {
                worst = s.lam_db_max;
                if (rec.counterexamples == 0) rec.worst_point = s.x;
            }
        });
        rec.worst_value = worst;
        rec.witness_constant = worst;
        rec.holds = rec.counterexamples == 0;
        rec.detail = "max over samples of lambda_max(sym DB(x)); checked reading of <B(x) xi, xi> <= 0";
        rep.conditions.push_back(rec);
    }

    // (ii) dissipativity, radial reading: <B(x), x> <= 0.
    {
        ConditionRecord rec{"dissipativity_radial"};
        double worst = -std::numeric_limits<double>::infinity();
        all_points([&](const detail::SamplePoint& s) {
            const double v = s.b.dot(s.x);
            if (v > 1e-12 * (1.0 + s.b.norm() * s.x.norm())) {
                if (rec.counterexamples == 0) rec.worst_point = s.x;
                ++rec.counterexamples;
            }
            if (v > worst) {
                worst = v;
                if (rec.counterexamples == 0) rec.worst_point = s.x;
            }
        });
        rec.worst_value = worst;
        rec.witness_constant = worst;
        rec.holds = rec.counterexamples == 0;
        rec.detail = "alternate reading <B(x), x> <= 0, reported alongside the Jacobian reading";
        rep.conditions.push_back(rec);
    }

    // (iii) -M(x) >= b(x) >= b0 > 0.
    {
        ConditionRecord rec{"drift_dominance"};
        double bmin = std::numeric_limits<double>::infinity();
        all_points([&](const detail::SamplePoint& s) {
            if (s.singular) {
                ++rec.counterexamples;
                rec.worst_point = s.x;
                return;
            }
            const bool bad = !(s.bfun > 0.0) || s.lam_negm_min < s.bfun - 1e-9 * (1.0 + std::abs(s.bfun));
            if (bad) {
                if (rec.counterexamples == 0) rec.worst_point = s.x;
                ++rec.counterexamples;
            }
            if (s.bfun < bmin) {
                bmin = s.bfun;
                if (rec.counterexamples == 0) rec.worst_point = s.x;
            }
        });
        rep.b0 = bmin > 0 ? (1.0 - margin) * bmin : bmin;
        rec.witness_constant = rep.b0;
        rec.worst_value = bmin;
        rec.holds = rec.counterexamples == 0 && bmin > 0.0;
        if (!rec.holds && rec.counterexamples == 0) rec.counterexamples = 1;
        rec.detail = "witness is b0 (minimum sampled b(x), deflated by the safety margin)";
        rep.conditions.push_back(rec);
    }

    // (iv) growth conditions. delta is searched downward from 3/2.
    auto growth_q = [&](double delta) {
        return detail::scan_sup(
            set,
            [&](const detail::SamplePoint& s) {
                const double lhs = std::pow(s.qx.cwiseAbs().maxCoeff(), delta);
                return lhs / (std::pow(1.0 + s.x.squaredNorm(), delta) * s.nu);
            },
            opt.tail_growth_limit);
    };
    // The left side decreases in R (exponent 3 - 2 delta >= 0), so the worst
    // admissible R for a point x is R = max(1, |x|).
    constexpr double k2 = 1.0;
    auto growth_b = [&](double delta) {
        return detail::scan_sup(
            set,
            [&](const detail::SamplePoint& s) {
                const double r = std::max(1.0, s.x.norm());
                double lhs = 0.0;
                for (Eigen::Index j = 0; j < ni; ++j) {
                    const double l = std::abs(s.qx[j]) / (1.0 + r * r);
                    lhs += k2 * std::abs(s.qx[j]) * std::pow(l, 3.0 - 2.0 * delta);
                }
                for (Eigen::Index i = 0; i < ni; ++i) lhs += 4.0 * std::abs(s.x[i]) * s.f[i] + s.x[i] * s.b[i];
                return lhs / (1.0 + s.x.squaredNorm());
            },
            opt.tail_growth_limit);
    };
    {
        ConditionRecord rq{"growth_Q"}, rb{"growth_B"};
        detail::SupScan sq, sb;
        bool found = false;
        for (double delta : {1.5, 1.25, 1.0, 0.75, 0.5, 0.25, 0.0}) {
            sq = growth_q(delta);
            sb = growth_b(delta);
            if (sq.finite && !sq.tail_growth && sb.finite && !sb.tail_growth) {
                rep.delta = delta;
                found = true;
                break;
            }
        }
        if (!found) {
            rep.delta = 1.5;
            sq = growth_q(1.5);
            sb = growth_b(1.5);
        }
        rep.K[1] = std::max(detail::inflate(sq.sup, margin), 0.0);
        rep.K[2] = k2;
        rep.K[3] = std::max(detail::inflate(sb.sup, margin), 0.0);
        auto fill = [](ConditionRecord& r, const detail::SupScan& s, double witness) {
            r.holds = s.finite && !s.tail_growth;
            r.witness_constant = witness;
            r.worst_point = s.worst;
            r.worst_value = s.sup;
            r.counterexamples = r.holds ? 0 : 1;
        };
        fill(rq, sq, rep.K[1]);
        fill(rb, sb, rep.K[3]);
        rq.detail = "max_j |(Qx)_j|^delta <= K1 (1+|x|^2)^delta nu(x); witness K1";
        rb.detail = "K2 sum_j |(Qx)_j| (l^j_R)^(3-2delta) + 4 sum_i |x_i| f_i + <x,B> <= K3 (1+|x|^2) for |x| <= R, "
                    "K2 = 1 fixed, R = max(1,|x|); witness K3";
        rep.conditions.push_back(rq);
        rep.conditions.push_back(rb);
    }
    {
        ConditionRecord rec{"growth_DB_1"};
        constexpr double k4 = 1.0;
        const auto s = detail::scan_sup(
            set,
            [&](const detail::SamplePoint& p) {
                const double x2 = p.x.squaredNorm();
                const double a = p.x.dot(p.qx) / (1.0 + x2 * x2);
                const double c = p.q.trace() / (1.0 + x2);
                return k4 * (a * a + c * c) - p.bfun;
            },
            opt.tail_growth_limit);
        rep.K[4] = k4;
        rep.K[5] = std::max(detail::inflate(s.sup, margin), 0.0);
        rec.holds = s.finite && !s.tail_growth;
        rec.witness_constant = rep.K[5];
        rec.worst_point = s.worst;
        rec.worst_value = s.sup;
        rec.counterexamples = rec.holds ? 0 : 1;
        rec.detail = "K4 [(<Qx,x>/(1+|x|^4))^2 + (Tr Q/(1+|x|^2))^2] - b(x) <= K5, K4 = 1 fixed; witness K5";
        rep.conditions.push_back(rec);
    }
    {
        ConditionRecord rec{"growth_DB_2"};
        bool found = false;
        detail::SupScan last_fail;
        std::vector<double> grid{1.0, 0.5, 1.5, 0.25, 0.75, 1.25, 1.75, 2.0};
        for (double alpha : grid) {
            for (double beta : grid) {
                std::vector<std::pair<int, double>> cn;
                bool ok = true;
                detail::SupScan fail;
                for (int nv : opt.n_values) {
                    const auto s = detail::scan_sup(
                        set,
                        [&](const detail::SamplePoint& p) {
                            double sf = 0.0;
                            for (Eigen::Index i = 0; i < ni; ++i) sf += p.f[i] > 0 ? std::pow(p.f[i], alpha) : 0.0;
                            return nv * (sf + detail::power_sum(p.h_terms, beta)) - p.bfun;
                        },
                        opt.tail_growth_limit);
                    if (!s.finite || s.tail_growth) {
                        ok = false;
                        fail = s;
                        break;
                    }
                    cn.emplace_back(nv, detail::inflate(s.sup, margin));
                }
                if (!ok) {
                    last_fail = fail;
                    continue;
                }
                const auto s6 = detail::scan_sup(
                    set,
                    [&](const detail::SamplePoint& p) {
                        double w = 0.0;
                        for (Eigen::Index i = 0; i < ni; ++i) w = std::max(w, std::pow(p.f[i], 2.0 - alpha) / p.nu);
                        return w;
                    },
                    opt.tail_growth_limit);
                const auto s7 = detail::scan_sup(
                    set, [&](const detail::SamplePoint& p) { return detail::power_sum(p.h_terms, 2.0 - beta) / p.nu; },
                    opt.tail_growth_limit);
                if (!s6.finite || s6.tail_growth) {
                    last_fail = s6;
                    continue;
                }
                if (!s7.finite || s7.tail_growth) {
                    last_fail = s7;
                    continue;
                }
                rep.alpha = alpha;
                rep.beta = beta;
                rep.c_n = cn;
                rep.K[6] = std::max(detail::inflate(s6.sup, margin), 0.0);
                rep.K[7] = std::max(detail::inflate(s7.sup, margin), 0.0);
                rec.worst_point = s6.worst;
                rec.worst_value = s6.sup;
                found = true;
                break;
            }
            if (found) break;
        }
        rec.holds = found;
        rec.witness_constant = found ? std::max(rep.K[6], rep.K[7]) : 0.0;
        if (!found) {
            rec.worst_point = last_fail.worst;
            rec.worst_value = last_fail.sup;
            rec.counterexamples = 1;
        }
        rec.detail = "n(sum f_i^alpha + h^beta) - b <= C_n for sampled n, f_i^(2-alpha) <= K6 nu, h^(2-beta) <= K7 nu";
        rep.conditions.push_back(rec);
    }

    // Cutoff constants K8, K9, fitted over several R on the transition annulus.
    {
        ConditionRecord r8{"cutoff_gradient"}, r9{"cutoff_hessian"};
        rep.cutoff_radii = opt.cutoff_radii;
        std::vector<double> sup8, sup9;
        Vec w8 = Vec::Zero(ni), w9 = Vec::Zero(ni);
        double best8 = 0.0, best9 = 0.0;
        for (double rr : opt.cutoff_radii) {
            double s8 = 0.0, s9 = 0.0;
            for (std::size_t i = 0; i < std::max<std::size_t>(samples / 4, 32); ++i) {
                Vec d = n == 1 ? Vec::Constant(1, (i % 2) ? 1.0 : -1.0) : halton_in_ball(offset + 31 * i + 5, n, 1.0);
                if (d.norm() < 1e-6) continue;
                d.normalize();
                const double t = 0.5 + 0.25 * radical_inverse(offset + i + 1, n == 1 ? 2 : 7);
                const Vec x = rr * t * d;
                const auto cut = eval_cutoff(rr, x);
                if (cut.value <= 0.0) continue;
                const Mat q = field.covariance(x);
                const Vec lhs8 = (q * cut.gradient).cwiseAbs();
                const Vec qx = (q * x).cwiseAbs();
                for (Eigen::Index j = 0; j < ni; ++j) {
                    const double rhs = qx[j] / (1.0 + rr * rr) * std::cbrt(cut.value);
                    if (rhs <= 0.0) continue;
                    const double ratio = lhs8[j] / rhs;
                    if (ratio > s8) s8 = ratio;
                    if (ratio > best8) {
                        best8 = ratio;
                        w8 = x;
                    }
                }
                const double x2 = x.squaredNorm();
                const double rhs9 = x.dot(q * x) / (1.0 + x2 * x2) + std::abs(q.trace()) / (1.0 + x2);
                const double ratio9 = std::abs((q.cwiseProduct(cut.hessian)).sum()) / rhs9;
                if (ratio9 > s9) s9 = ratio9;
                if (ratio9 > best9) {
                    best9 = ratio9;
                    w9 = x;
                }
            }
            sup8.push_back(s8);
            sup9.push_back(s9);
        }
        auto bounded_in_r = [&](const std::vector<double>& s) {
            if (s.size() < 3) return true;
            return s.back() <= opt.tail_growth_limit * s[s.size() - 3] + 1e-12;
        };
        rep.K[8] = detail::inflate(best8, margin);
        rep.K[9] = detail::inflate(best9, margin);
        r8.holds = std::isfinite(best8) && bounded_in_r(sup8);
        r9.holds = std::isfinite(best9) && bounded_in_r(sup9);
        r8.witness_constant = rep.K[8];
        r9.witness_constant = rep.K[9];
        r8.worst_point = w8;
        r9.worst_point = w9;
        r8.worst_value = best8;
        r9.worst_value = best9;
        r8.counterexamples = r8.holds ? 0 : 1;
        r9.counterexamples = r9.holds ? 0 : 1;
        r8.detail = "|sum_i Q_ij D_i eta_R| <= K8 l^j_R eta_R^(1/3), uniform in R";
        r9.detail = "|Tr(Q D^2 eta_R)| <= K9 (<Qx,x>/(1+|x|^4) + |Tr Q|/(1+|x|^2)), uniform in R";
        rep.conditions.push_back(r8);
        rep.conditions.push_back(r9);
    }
    return rep;
}

}  // namespace hjblab
