#pragma once

#include "finslab/common.hpp"
#include "finslab/errors.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

namespace finslab {

enum class NormKind { riemannian, minkowski, randers, product };
enum class DerivativeScheme { closed_form, central_difference };

/// A Finsler structure on a chart: the norm F(x, v) plus whatever analytic
/// structure the concrete family affords (metric, fundamental tensor,
/// energy gradient, exact Legendre map). Missing pieces fall back to
/// central differences with step fd_step(). Immutable after construction;
/// all evaluations are pure and reentrant.
struct FinslerModel {
    int dim = 0;
    NormKind kind = NormKind::minkowski;
    DerivativeScheme scheme = DerivativeScheme::closed_form;
    bool x_independent = false;
    double fd_step_scale = 1e-5;

    std::function<double(const Vec&, const Vec&)> f;          // F(x, v)
    std::function<Vec(const Vec&, const Vec&)> grad_v_fn;     // d(F^2/2)/dv
    std::function<Mat(const Vec&, const Vec&)> tensor_fn;     // g_ij(x, v)
    std::function<Mat(const Vec&)> metric_fn;                 // riemannian: g_ij(x)
    std::function<Vec(const Vec&, const Vec&)> dual_seed_fn;  // Newton seed for a covector
    std::function<Vec(const Vec&, const Vec&)> exact_legendre_fn;

    double norm(const Vec& x, const Vec& v) const { return f(x, v); }

    double fd_step(const Vec& v) const { return fd_step_scale * (1.0 + v.norm()); }

    /// d(F^2/2)/dv as a covector; by homogeneity this is the g_v-flat of v.
    Vec energy_gradient(const Vec& x, const Vec& v) const {
        if (grad_v_fn) return grad_v_fn(x, v);
        const double h = fd_step(v);
        Vec g(dim);
        Vec vp = v, vm = v;
        for (int i = 0; i < dim; ++i) {
            vp[i] = v[i] + h;
            vm[i] = v[i] - h;
            const double fp = f(x, vp);
            const double fm = f(x, vm);
            g[i] = (fp * fp - fm * fm) / (4.0 * h);
            vp[i] = v[i];
            vm[i] = v[i];
        }
        return g;
    }

    /// Fundamental tensor matrix, no validity checks.
    Mat tensor(const Vec& x, const Vec& v) const {
        if (tensor_fn) return tensor_fn(x, v);
        const double h = fd_step(v);
        const auto e2 = [&](const Vec& w) {
            const double val = f(x, w);
            return 0.5 * val * val;
        };
        Mat g(dim, dim);
        const double center = e2(v);
        for (int i = 0; i < dim; ++i) {
            Vec w = v;
            w[i] += h;
            const double fp = e2(w);
            w[i] = v[i] - h;
            const double fm = e2(w);
            g(i, i) = (fp - 2.0 * center + fm) / (h * h);
        }
        for (int i = 0; i < dim; ++i) {
            for (int j = i + 1; j < dim; ++j) {
                Vec w = v;
                w[i] += h; w[j] += h;
                const double fpp = e2(w);
                w[j] = v[j] - h;
                const double fpm = e2(w);
                w[i] = v[i] - h;
                const double fmm = e2(w);
                w[j] = v[j] + h;
                const double fmp = e2(w);
                g(i, j) = g(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
            }
        }
        return g;
    }

    /// Same chart with the reverse structure F(v) := F(-v).
    FinslerModel reversed() const {
        FinslerModel r = *this;
        const FinslerModel base = *this;
        r.f = [base](const Vec& x, const Vec& v) { return base.f(x, Vec(-v)); };
        r.grad_v_fn = grad_v_fn
            ? std::function<Vec(const Vec&, const Vec&)>(
                  [base](const Vec& x, const Vec& v) { return Vec(-base.grad_v_fn(x, Vec(-v))); })
            : nullptr;
        r.tensor_fn = tensor_fn
            ? std::function<Mat(const Vec&, const Vec&)>(
                  [base](const Vec& x, const Vec& v) { return base.tensor_fn(x, Vec(-v)); })
            : nullptr;
        r.dual_seed_fn = dual_seed_fn
            ? std::function<Vec(const Vec&, const Vec&)>(
                  [base](const Vec& x, const Vec& a) { return Vec(-base.dual_seed_fn(x, Vec(-a))); })
            : nullptr;
        r.exact_legendre_fn = exact_legendre_fn
            ? std::function<Vec(const Vec&, const Vec&)>(
                  [base](const Vec& x, const Vec& a) { return Vec(-base.exact_legendre_fn(x, Vec(-a))); })
            : nullptr;
        return r;
    }
};

// ---------------------------------------------------------------------------
// Factories
// ---------------------------------------------------------------------------

inline FinslerModel make_riemannian(int dim, std::function<Mat(const Vec&)> metric,
                                    bool x_independent = false) {
    FinslerModel m;
    m.dim = dim;
    m.kind = NormKind::riemannian;
    m.x_independent = x_independent;
    m.metric_fn = metric;
    m.f = [metric](const Vec& x, const Vec& v) { return std::sqrt(v.dot(metric(x) * v)); };
    m.grad_v_fn = [metric](const Vec& x, const Vec& v) { return Vec(metric(x) * v); };
    m.tensor_fn = [metric](const Vec& x, const Vec&) { return metric(x); };
    m.dual_seed_fn = [metric](const Vec& x, const Vec& a) {
        return Vec(metric(x).ldlt().solve(a));
    };
    m.exact_legendre_fn = m.dual_seed_fn;
    return m;
}

inline FinslerModel make_euclidean(int dim) {
    Mat id = Mat::Identity(dim, dim);
    FinslerModel m = make_riemannian(dim, [id](const Vec&) { return id; }, true);
    m.exact_legendre_fn = [](const Vec&, const Vec& a) { return a; };
    m.dual_seed_fn = m.exact_legendre_fn;
    return m;
}

/// 1D Minkowski norm F(v) = c_plus * v for v >= 0, c_minus * |v| for v < 0.
inline FinslerModel make_minkowski_line(double c_plus, double c_minus) {
    FinslerModel m;
    m.dim = 1;
    m.kind = NormKind::minkowski;
    m.x_independent = true;
    m.f = [c_plus, c_minus](const Vec&, const Vec& v) {
        return v[0] >= 0.0 ? c_plus * v[0] : -c_minus * v[0];
    };
    m.grad_v_fn = [c_plus, c_minus](const Vec&, const Vec& v) {
        Vec g(1);
        g[0] = v[0] >= 0.0 ? c_plus * c_plus * v[0] : c_minus * c_minus * v[0];
        return g;
    };
    m.tensor_fn = [c_plus, c_minus](const Vec&, const Vec& v) {
        Mat g(1, 1);
        const double c = v[0] >= 0.0 ? c_plus : c_minus;
        g(0, 0) = c * c;
        return g;
    };
    m.exact_legendre_fn = [c_plus, c_minus](const Vec&, const Vec& a) {
        Vec v(1);
        v[0] = a[0] >= 0.0 ? a[0] / (c_plus * c_plus) : a[0] / (c_minus * c_minus);
        return v;
    };
    m.dual_seed_fn = m.exact_legendre_fn;
    return m;
}

/// General x-independent norm given only the fiber norm; derivatives by
/// central differences.
inline FinslerModel make_minkowski(int dim, std::function<double(const Vec&)> fiber_norm) {
    FinslerModel m;
    m.dim = dim;
    m.kind = NormKind::minkowski;
    m.scheme = DerivativeScheme::central_difference;
    m.x_independent = true;
    m.f = [fiber_norm](const Vec&, const Vec& v) { return fiber_norm(v); };
    return m;
}

/// Randers metric F = sqrt(a_ij v^i v^j) + beta_i v^i. The one-form must
/// satisfy |beta|_a < 1 on the declared domain; checked on a sample at
/// construction and again at every evaluation.
inline FinslerModel make_randers(int dim, std::function<Mat(const Vec&)> a_fn,
                                 std::function<Vec(const Vec&)> beta_fn, const Box& domain,
                                 bool x_independent = false, int validity_samples = 128) {
    const auto check_at = [a_fn, beta_fn](const Vec& x) {
        const Mat a = a_fn(x);
        const Vec b = beta_fn(x);
        const double nb2 = b.dot(a.ldlt().solve(b));
        if (!(nb2 < 1.0)) {
            throw ModelDegenerateError("randers one-form has alpha-norm >= 1 at a sampled point");
        }
    };
    {
        std::mt19937_64 rng(0x5eedu);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (int s = 0; s < validity_samples; ++s) {
            Vec x(dim);
            for (int i = 0; i < dim; ++i) x[i] = domain.lo[i] + unit(rng) * (domain.hi[i] - domain.lo[i]);
            check_at(x);
        }
        check_at(Vec((domain.lo + domain.hi) / 2.0));
    }

    FinslerModel m;
    m.dim = dim;
    m.kind = NormKind::randers;
    m.x_independent = x_independent;
    m.f = [a_fn, beta_fn, check_at](const Vec& x, const Vec& v) {
        check_at(x);
        return std::sqrt(v.dot(a_fn(x) * v)) + beta_fn(x).dot(v);
    };
    m.grad_v_fn = [a_fn, beta_fn](const Vec& x, const Vec& v) {
        const Mat a = a_fn(x);
        const Vec b = beta_fn(x);
        const Vec av = a * v;
        const double alpha = std::sqrt(v.dot(av));
        if (alpha == 0.0) return Vec(Vec::Zero(v.size()));
        const double fval = alpha + b.dot(v);
        // grad(F^2/2) = F * gradF, gradF = a v / alpha + beta
        return Vec(fval * (av / alpha + b));
    };
    m.tensor_fn = [a_fn, beta_fn](const Vec& x, const Vec& v) {
        const Mat a = a_fn(x);
        const Vec b = beta_fn(x);
        const Vec av = a * v;
        const double alpha = std::sqrt(v.dot(av));
        const Vec ell = av / alpha;
        const double bv = b.dot(v);
        Mat g = a + (bv / alpha) * (a - ell * ell.transpose());
        g += ell * b.transpose() + b * ell.transpose() + b * b.transpose();
        return g;
    };
    m.dual_seed_fn = [a_fn](const Vec& x, const Vec& alpha) {
        return Vec(a_fn(x).ldlt().solve(alpha));
    };
    return m;
}

inline FinslerModel make_randers_const(int dim, const Mat& a, const Vec& beta, const Box& domain) {
    return make_randers(
        dim, [a](const Vec&) { return a; }, [beta](const Vec&) { return beta; }, domain, true);
}

/// Product structure F((v1, v2)) = sqrt(F1(v1)^2 + F2(v2)^2). The energy
/// gradient and the Legendre map split exactly across the factors, which
/// keeps both well defined on the factor zero sections.
inline FinslerModel make_product(const FinslerModel& a, const FinslerModel& b) {
    FinslerModel m;
    m.dim = a.dim + b.dim;
    m.kind = NormKind::product;
    m.x_independent = a.x_independent && b.x_independent;
    m.scheme = (a.scheme == DerivativeScheme::central_difference ||
                b.scheme == DerivativeScheme::central_difference)
                   ? DerivativeScheme::central_difference
                   : DerivativeScheme::closed_form;
    const int na = a.dim;
    const int nb = b.dim;
    const FinslerModel fa = a;
    const FinslerModel fb = b;

    m.f = [fa, fb, na, nb](const Vec& x, const Vec& v) {
        const double f1 = fa.f(x.head(na), v.head(na));
        const double f2 = fb.f(x.tail(nb), v.tail(nb));
        return std::hypot(f1, f2);
    };
    m.grad_v_fn = [fa, fb, na, nb](const Vec& x, const Vec& v) {
        Vec g(na + nb);
        const Vec va = v.head(na);
        const Vec vb = v.tail(nb);
        g.head(na) = va.norm() == 0.0 ? Vec(Vec::Zero(na)) : fa.energy_gradient(x.head(na), va);
        g.tail(nb) = vb.norm() == 0.0 ? Vec(Vec::Zero(nb)) : fb.energy_gradient(x.tail(nb), vb);
        return g;
    };
    m.tensor_fn = [fa, fb, na, nb](const Vec& x, const Vec& v) {
        Mat g = Mat::Zero(na + nb, na + nb);
        g.topLeftCorner(na, na) = fa.tensor(x.head(na), v.head(na));
        g.bottomRightCorner(nb, nb) = fb.tensor(x.tail(nb), v.tail(nb));
        return g;
    };
    if (a.metric_fn && b.metric_fn) {
        const auto ga = a.metric_fn;
        const auto gb = b.metric_fn;
        m.metric_fn = [ga, gb, na, nb](const Vec& x) {
            Mat g = Mat::Zero(na + nb, na + nb);
            g.topLeftCorner(na, na) = ga(x.head(na));
            g.bottomRightCorner(nb, nb) = gb(x.tail(nb));
            return g;
        };
        m.tensor_fn = [metric = m.metric_fn](const Vec& x, const Vec&) { return metric(x); };
    }
    if (a.exact_legendre_fn && b.exact_legendre_fn) {
        const auto la = a.exact_legendre_fn;
        const auto lb = b.exact_legendre_fn;
        m.exact_legendre_fn = [la, lb, na, nb](const Vec& x, const Vec& al) {
            Vec v(na + nb);
            const Vec aa = al.head(na);
            const Vec ab = al.tail(nb);
            v.head(na) = aa.norm() == 0.0 ? Vec(Vec::Zero(na)) : la(x.head(na), aa);
            v.tail(nb) = ab.norm() == 0.0 ? Vec(Vec::Zero(nb)) : lb(x.tail(nb), ab);
            return v;
        };
        m.dual_seed_fn = m.exact_legendre_fn;
    } else if (a.dual_seed_fn && b.dual_seed_fn) {
        const auto sa = a.dual_seed_fn;
        const auto sb = b.dual_seed_fn;
        m.dual_seed_fn = [sa, sb, na, nb](const Vec& x, const Vec& al) {
            Vec v(na + nb);
            v.head(na) = sa(x.head(na), al.head(na));
            v.tail(nb) = sb(x.tail(nb), al.tail(nb));
            return v;
        };
    }
    return m;
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

inline double eval_norm(const FinslerModel& model, const Vec& x, const Vec& v) {
    require_finite(x, "point");
    require_finite(v, "tangent vector");
    return model.f(x, v);
}

struct FundamentalTensor {
    Vec base_point;
    Vec base_vector;
    Mat g;
};

inline FundamentalTensor fundamental_tensor(const FinslerModel& model, const Vec& x, const Vec& v) {
    require_finite(x, "point");
    require_finite(v, "tangent vector");
    if (v.norm() == 0.0) {
        throw ZeroSectionError("fundamental tensor is undefined on the zero section");
    }
    Mat g = model.tensor(x, v);
    g = 0.5 * (g + g.transpose()).eval();
    Eigen::SelfAdjointEigenSolver<Mat> es(g, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 0.0) {
        throw ModelDegenerateError("fundamental tensor lost positive-definiteness");
    }
    return FundamentalTensor{x, v, g};
}

namespace detail {

struct LegendreResult {
    Vec v;
    double dual = 0.0;           // F*(alpha) = F(v)
    double flat_residual = 0.0;  // |grad(F^2/2)(v) - alpha| / (1 + |alpha|)
    double pair_residual = 0.0;  // |alpha(v) - F(v)^2| / max(1, F(v)^2)
};

/// Damped Newton on the stationarity system of max alpha(v) s.t. F(v) = 1,
/// in the scaled variables where it reads grad(F^2/2)(v) = alpha. The
/// Jacobian is the fundamental tensor, which is positive definite on
/// strongly convex indicatrices. Seeded from the Riemannian-part dual.
inline LegendreResult legendre_solve(const FinslerModel& model, const Vec& x, const Vec& alpha,
                                     double tol = 1e-12, int max_iter = 80) {
    LegendreResult out;
    const double anorm = alpha.norm();
    if (anorm == 0.0) {
        out.v = Vec::Zero(model.dim);
        return out;
    }

    const auto finish = [&](const Vec& v) {
        out.v = v;
        out.dual = model.f(x, v);
        const double f2 = out.dual * out.dual;
        out.flat_residual = (model.energy_gradient(x, v) - alpha).norm() / (1.0 + anorm);
        out.pair_residual = std::abs(alpha.dot(v) - f2) / std::max(1.0, f2);
        return out;
    };

    if (model.exact_legendre_fn) {
        return finish(model.exact_legendre_fn(x, alpha));
    }

    Vec v = model.dual_seed_fn ? model.dual_seed_fn(x, alpha) : alpha;
    if (v.norm() < 1e-300) v = alpha;

    Vec r = model.energy_gradient(x, v) - alpha;
    double rn = r.norm();
    const double target = tol * (1.0 + anorm);
    int it = 0;
    for (; it < max_iter && rn > target; ++it) {
        const Mat g = model.tensor(x, v);
        const Vec step = g.ldlt().solve(r);
        double t = 1.0;
        Vec v_next = v - step;
        Vec r_next = model.energy_gradient(x, v_next) - alpha;
        int backtracks = 0;
        while (r_next.norm() >= rn && backtracks < 50) {
            t *= 0.5;
            v_next = v - t * step;
            r_next = model.energy_gradient(x, v_next) - alpha;
            ++backtracks;
        }
        if (r_next.norm() >= rn) break;  // stalled
        v = v_next;
        r = r_next;
        rn = r.norm();
    }
    if (rn > target * 1e3) {
        LegendreResult best = finish(v);
        throw NumericalFailure("legendre transform did not converge", best.dual,
                               best.flat_residual, best.pair_residual);
    }
    return finish(v);
}

}  // namespace detail

/// F*(alpha) = sup { alpha(v) : F(x, v) <= 1 }.
inline double dual_norm(const FinslerModel& model, const Vec& x, const Vec& alpha) {
    require_finite(x, "point");
    require_finite(alpha, "covector");
    if (alpha.norm() == 0.0) return 0.0;
    return detail::legendre_solve(model, x, alpha).dual;
}

/// Legendre transform: the unique v with F(v) = F*(alpha) and
/// alpha(v) = F*(alpha)^2. Returns 0 for alpha = 0 (zero-section
/// convention for gradients off the essential domain).
inline Vec legendre(const FinslerModel& model, const Vec& x, const Vec& alpha) {
    require_finite(x, "point");
    require_finite(alpha, "covector");
    if (alpha.norm() == 0.0) return Vec::Zero(model.dim);
    auto res = detail::legendre_solve(model, x, alpha);
    const double rel_tol = model.scheme == DerivativeScheme::closed_form ? 1e-8 : 1e-5;
    if (res.flat_residual > rel_tol || res.pair_residual > rel_tol) {
        throw NumericalFailure("legendre transform identities out of tolerance", res.dual,
                               res.flat_residual, res.pair_residual);
    }
    return res.v;
}

/// Max of F(-v)/F(v) over the sample; a lower bound for the reversibility
/// constant Lambda_F.
inline double reversibility_constant(const FinslerModel& model,
                                     const std::vector<std::pair<Vec, Vec>>& sample) {
    if (sample.empty()) throw std::invalid_argument("reversibility_constant: empty sample");
    double best = 1.0;
    for (const auto& [x, v] : sample) {
        const double fwd = model.f(x, v);
        const double bwd = model.f(x, Vec(-v));
        if (fwd > 0.0) best = std::max(best, bwd / fwd);
    }
    return best;
}

/// Deterministic direction sample at a set of points: +-axis directions
/// plus seeded random unit vectors.
inline std::vector<std::pair<Vec, Vec>> direction_sample(const FinslerModel& model,
                                                         const std::vector<Vec>& points,
                                                         int random_per_point = 16,
                                                         std::uint64_t seed = 7u) {
    std::mt19937_64 rng(seed);
    std::vector<std::pair<Vec, Vec>> out;
    for (const Vec& x : points) {
        for (int i = 0; i < model.dim; ++i) {
            Vec e = Vec::Zero(model.dim);
            e[i] = 1.0;
            out.emplace_back(x, e);
            out.emplace_back(x, Vec(-e));
        }
        for (int r = 0; r < random_per_point; ++r) {
            out.emplace_back(x, random_unit_vector(rng, model.dim));
        }
    }
    return out;
}

}  // namespace finslab
