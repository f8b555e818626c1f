#pragma once

#include "finslab/norms.hpp"

#include <cmath>

namespace finslab {

inline FinslerModel euclidean_plane(int dim = 2) { return make_euclidean(dim); }

/// Flat Randers plane F = |v| + beta . v with constant one-form.
inline FinslerModel randers_plane(double beta1 = 0.5, int dim = 2) {
    Vec beta = Vec::Zero(dim);
    beta[0] = beta1;
    return make_randers_const(dim, Mat::Identity(dim, dim), beta, Box::cube(dim, 16.0));
}

/// Randers metric with the non-parallel one-form beta = c * x^2 dx^1;
/// not a Berwald space.
inline FinslerModel randers_nonberwald(double c = 0.5) {
    return make_randers(
        2, [](const Vec&) { return Mat::Identity(2, 2); },
        [c](const Vec& x) {
            Vec b = Vec::Zero(2);
            b[0] = c * x[1];
            return b;
        },
        Box::cube(2, 1.5), false);
}

/// Round unit sphere in the stereographic chart: g = 4 / (1 + |x|^2)^2 * I.
inline FinslerModel sphere_chart() {
    return make_riemannian(2, [](const Vec& x) {
        const double s = 2.0 / (1.0 + x.squaredNorm());
        return Mat(s * s * Mat::Identity(2, 2));
    });
}

/// Reversible, genuinely non-Riemannian Minkowski norm on the plane:
/// F^2 = |v|^2 + eps * v1^4 / |v|^2. Strongly convex for small eps.
inline FinslerModel quartic_minkowski(double eps = 0.1) {
    FinslerModel m;
    m.dim = 2;
    m.kind = NormKind::minkowski;
    m.scheme = DerivativeScheme::closed_form;
    m.x_independent = true;
    m.f = [eps](const Vec&, const Vec& v) {
        const double q = v.squaredNorm();
        if (q == 0.0) return 0.0;
        const double v1_2 = v[0] * v[0];
        return std::sqrt(q + eps * v1_2 * v1_2 / q);
    };
    m.grad_v_fn = [eps](const Vec&, const Vec& v) {
        const double q = v.squaredNorm();
        Vec g = v;
        if (q == 0.0) return Vec(Vec::Zero(2));
        const double v1_2 = v[0] * v[0];
        const double phi = v1_2 * v1_2 / q;  // v1^4 / |v|^2
        // grad(F^2/2) = v + (eps/2) grad(v1^4/|v|^2)
        g[0] += 0.5 * eps * (4.0 * v[0] * v1_2 / q - 2.0 * v[0] * phi / q);
        g[1] += 0.5 * eps * (-2.0 * v[1] * phi / q);
        return g;
    };
    m.dual_seed_fn = [](const Vec&, const Vec& a) { return a; };
    return m;
}

/// Euclidean line with a Gaussian weight; the 1-dimensional model space of
/// the sharp inequalities.
inline FinslerModel euclidean_line() { return make_euclidean(1); }

/// Non-reversible 1D Minkowski factor F(v) = |v| + beta * v.
inline FinslerModel randers_line(double beta = 0.5) {
    return make_minkowski_line(1.0 + beta, 1.0 - beta);
}

}  // namespace finslab
