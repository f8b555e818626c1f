#pragma once

#include "finslab/common.hpp"
#include "finslab/errors.hpp"
#include "finslab/grid.hpp"
#include "finslab/norms.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

namespace finslab {

using ScalarFn = std::function<double(const Vec&)>;
using VectorFn = std::function<Vec(const Vec&)>;

/// Sampled constant-speed trajectory of the geodesic flow.
struct Geodesic {
    std::vector<double> t;
    std::vector<Vec> x;
    std::vector<Vec> v;
    double speed = 0.0;

    const Vec& end_point() const { return x.back(); }
};

class DomainExitError : public std::runtime_error {
public:
    DomainExitError(const std::string& what, Geodesic partial_trajectory)
        : std::runtime_error(what), partial(std::move(partial_trajectory)) {}

    Geodesic partial;
};

namespace detail {

inline Vec fd_gradient(const ScalarFn& fn, const Vec& x, double h) {
    Vec g(x.size());
    Vec xp = x, xm = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        g[i] = (fn(xp) - fn(xm)) / (2.0 * h);
        xp[i] = x[i];
        xm[i] = x[i];
    }
    return g;
}

/// J(i, j) = d f_i / d x_j by central differences.
inline Mat fd_jacobian(const VectorFn& fn, const Vec& x, double h, int out_dim) {
    Mat j(out_dim, x.size());
    Vec xp = x, xm = x;
    for (Eigen::Index c = 0; c < x.size(); ++c) {
        xp[c] = x[c] + h;
        xm[c] = x[c] - h;
        j.col(c) = (fn(xp) - fn(xm)) / (2.0 * h);
        xp[c] = x[c];
        xm[c] = x[c];
    }
    return j;
}

inline Mat fd_hessian(const ScalarFn& fn, const Vec& x, double h) {
    const int n = static_cast<int>(x.size());
    Mat hess(n, n);
    const double center = fn(x);
    for (int i = 0; i < n; ++i) {
        Vec w = x;
        w[i] += h;
        const double fp = fn(w);
        w[i] = x[i] - h;
        const double fm = fn(w);
        hess(i, i) = (fp - 2.0 * center + fm) / (h * h);
    }
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            Vec w = x;
            w[i] += h; w[j] += h;
            const double fpp = fn(w);
            w[j] = x[j] - h;
            const double fpm = fn(w);
            w[i] = x[i] - h;
            const double fmm = fn(w);
            w[j] = x[j] + h;
            const double fmp = fn(w);
            hess(i, j) = hess(j, i) = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
        }
    }
    return hess;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Spray and geodesics
// ---------------------------------------------------------------------------

/// Geodesic acceleration from the Euler-Lagrange equations of the energy
/// F^2/2: g(v) xdd = d_x(F^2/2) - d_x d_v(F^2/2) . v. Exactly zero on
/// x-independent models.
inline Vec spray(const FinslerModel& model, const Vec& x, const Vec& v) {
    if (v.norm() == 0.0) throw ZeroSectionError("spray undefined at v = 0");
    if (model.x_independent) return Vec::Zero(model.dim);

    const double hx = 1e-5 * (1.0 + x.norm());
    const ScalarFn energy = [&](const Vec& y) {
        const double f = model.f(y, v);
        return 0.5 * f * f;
    };
    const Vec ds = detail::fd_gradient(energy, x, hx);
    const VectorFn q = [&](const Vec& y) { return model.energy_gradient(y, v); };
    const Mat jq = detail::fd_jacobian(q, x, hx, model.dim);  // jq(i, j) = d q_i / d x^j

    const Vec rhs = ds - jq * v;
    const Mat g = model.tensor(x, v);
    Eigen::LDLT<Mat> ldlt(0.5 * (g + g.transpose()));
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        throw ModelDegenerateError("singular fundamental tensor in spray");
    }
    return ldlt.solve(rhs);
}

/// Fixed-step classical RK4 integration of the geodesic flow. T may be
/// negative (backward flow). When a domain box is supplied, leaving it
/// raises DomainExitError carrying the partial trajectory.
inline Geodesic integrate_geodesic(const FinslerModel& model, const Vec& x0, const Vec& v0,
                                   double T, int steps, const Box* domain = nullptr) {
    if (v0.norm() == 0.0) throw ZeroSectionError("geodesic needs a nonzero initial velocity");
    if (steps < 16) throw std::invalid_argument("integrate_geodesic: steps must be >= 16");

    Geodesic geo;
    geo.speed = model.f(x0, v0);
    geo.t.reserve(steps + 1);
    geo.x.reserve(steps + 1);
    geo.v.reserve(steps + 1);
    geo.t.push_back(0.0);
    geo.x.push_back(x0);
    geo.v.push_back(v0);

    const double h = T / steps;
    Vec x = x0, v = v0;
    for (int s = 0; s < steps; ++s) {
        const Vec k1x = v;
        const Vec k1v = spray(model, x, v);
        const Vec k2x = v + 0.5 * h * k1v;
        const Vec k2v = spray(model, Vec(x + 0.5 * h * k1x), k2x);
        const Vec k3x = v + 0.5 * h * k2v;
        const Vec k3v = spray(model, Vec(x + 0.5 * h * k2x), k3x);
        const Vec k4x = v + h * k3v;
        const Vec k4v = spray(model, Vec(x + h * k3x), k4x);
        x += (h / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        v += (h / 6.0) * (k1v + 2.0 * k2v + 2.0 * k3v + k4v);
        if (domain != nullptr && !domain->contains(x)) {
            throw DomainExitError("geodesic left the chart domain", std::move(geo));
        }
        geo.t.push_back((s + 1) * h);
        geo.x.push_back(x);
        geo.v.push_back(v);
    }
    return geo;
}

// ---------------------------------------------------------------------------
// Asymmetric distance
// ---------------------------------------------------------------------------

struct DistanceOptions {
    std::vector<double> periods;  // per axis; 0 = aperiodic
    int control_points = 8;       // Bezier control polygon size, endpoints included
    int descent_sweeps = 40;
    int quad_segments = 32;
    const Box* domain = nullptr;
    bool shooting_seed = true;
};

namespace detail {

inline Vec bezier_velocity(const std::vector<Vec>& ctrl, double t) {
    // derivative of a Bezier curve: degree-(P-2) combination of differences
    const int p = static_cast<int>(ctrl.size());
    std::vector<Vec> d(p - 1);
    for (int i = 0; i + 1 < p; ++i) d[i] = (p - 1) * (ctrl[i + 1] - ctrl[i]);
    for (int level = static_cast<int>(d.size()); level > 1; --level) {
        for (int i = 0; i + 1 < level; ++i) d[i] = (1.0 - t) * d[i] + t * d[i + 1];
    }
    return d[0];
}

inline Vec bezier_point(const std::vector<Vec>& ctrl, double t) {
    std::vector<Vec> d = ctrl;
    for (int level = static_cast<int>(d.size()); level > 1; --level) {
        for (int i = 0; i + 1 < level; ++i) d[i] = (1.0 - t) * d[i] + t * d[i + 1];
    }
    return d[0];
}

/// Composite Gauss-Legendre(4) quadrature of int_0^1 F(eta, etadot) dt.
inline double curve_length(const FinslerModel& model, const std::vector<Vec>& ctrl, int segments,
                           const Box* domain = nullptr, bool* exited = nullptr) {
    static const double gauss_x[4] = {-0.8611363115940526, -0.3399810435848563,
                                      0.3399810435848563, 0.8611363115940526};
    static const double gauss_w[4] = {0.3478548451374538, 0.6521451548625461,
                                      0.6521451548625461, 0.3478548451374538};
    double len = 0.0;
    if (exited != nullptr) *exited = false;
    for (int s = 0; s < segments; ++s) {
        const double a = static_cast<double>(s) / segments;
        const double b = static_cast<double>(s + 1) / segments;
        for (int q = 0; q < 4; ++q) {
            const double t = 0.5 * (a + b) + 0.5 * (b - a) * gauss_x[q];
            const Vec pt = bezier_point(ctrl, t);
            if (domain != nullptr && !domain->contains(pt, 1e-9) && exited != nullptr) *exited = true;
            len += 0.5 * (b - a) * gauss_w[q] * model.f(pt, bezier_velocity(ctrl, t));
        }
    }
    return len;
}

inline std::vector<Vec> straight_polygon(const Vec& x, const Vec& y, int points) {
    std::vector<Vec> ctrl(points);
    for (int i = 0; i < points; ++i) {
        const double t = static_cast<double>(i) / (points - 1);
        ctrl[i] = (1.0 - t) * x + t * y;
    }
    return ctrl;
}

/// Newton shooting for exp_x(v) = y; returns a control polygon along the
/// shot geodesic or nothing when the solve stalls.
inline std::optional<std::vector<Vec>> shoot_polygon(const FinslerModel& model, const Vec& x,
                                                     const Vec& y, int points) {
    Vec v = y - x;
    if (v.norm() == 0.0) return std::nullopt;
    const auto endpoint = [&](const Vec& vel) {
        return integrate_geodesic(model, x, vel, 1.0, 48).end_point();
    };
    try {
        for (int it = 0; it < 8; ++it) {
            const Vec miss = endpoint(v) - y;
            if (miss.norm() < 1e-10 * (1.0 + y.norm())) break;
            const Mat j = fd_jacobian([&](const Vec& w) { return Vec(endpoint(w) - y); }, v,
                                      1e-5 * (1.0 + v.norm()), model.dim);
            const Vec step = j.fullPivLu().solve(miss);
            v -= step;
        }
        if ((endpoint(v) - y).norm() > 1e-6 * (1.0 + y.norm())) return std::nullopt;
        Geodesic geo = integrate_geodesic(model, x, v, 1.0, 48);
        std::vector<Vec> ctrl(points);
        for (int i = 0; i < points; ++i) {
            const std::size_t k = (static_cast<std::size_t>(i) * (geo.x.size() - 1)) / (points - 1);
            ctrl[i] = geo.x[k];
        }
        ctrl.front() = x;
        ctrl.back() = y;
        return ctrl;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

}  // namespace detail

/// Asymmetric distance d(x, y): geodesic shooting seeds a direct
/// minimization of the length over a Bezier control-polygon family;
/// periodic axes are handled through winding images; tie-breaking between
/// local minimizers takes the smallest length.
inline double distance(const FinslerModel& model, const Vec& x, const Vec& y,
                       const DistanceOptions& opts = {}) {
    require_finite(x, "point x");
    require_finite(y, "point y");
    if ((y - x).norm() == 0.0) return 0.0;

    std::vector<Vec> images{y};
    for (std::size_t a = 0; a < opts.periods.size(); ++a) {
        if (opts.periods[a] <= 0.0) continue;
        std::vector<Vec> next;
        for (const Vec& img : images) {
            for (int k = -1; k <= 1; ++k) {
                Vec shifted = img;
                shifted[static_cast<Eigen::Index>(a)] += k * opts.periods[a];
                next.push_back(shifted);
            }
        }
        images.swap(next);
    }

    double best = std::numeric_limits<double>::infinity();
    bool any_inside = false;
    for (const Vec& img : images) {
        std::vector<Vec> ctrl = detail::straight_polygon(x, img, opts.control_points);
        if (opts.shooting_seed && !model.x_independent) {
            if (auto shot = detail::shoot_polygon(model, x, img, opts.control_points)) {
                bool shot_exited = false;
                const double shot_len =
                    detail::curve_length(model, *shot, opts.quad_segments, opts.domain, &shot_exited);
                bool straight_exited = false;
                const double straight_len =
                    detail::curve_length(model, ctrl, opts.quad_segments, opts.domain, &straight_exited);
                if (!shot_exited && shot_len < straight_len) ctrl = *shot;
            }
        }

        bool exited = false;
        double len = detail::curve_length(model, ctrl, opts.quad_segments, opts.domain, &exited);
        double step = 0.25 * (img - x).norm() / opts.control_points;
        for (int sweep = 0; sweep < opts.descent_sweeps && step > 1e-8; ++sweep) {
            bool improved = false;
            for (std::size_t i = 1; i + 1 < ctrl.size(); ++i) {
                for (int a = 0; a < model.dim; ++a) {
                    for (const double delta : {step, -step}) {
                        ctrl[i][a] += delta;
                        bool trial_exit = false;
                        const double trial =
                            detail::curve_length(model, ctrl, opts.quad_segments, opts.domain, &trial_exit);
                        if (trial < len && !(trial_exit && !exited)) {
                            len = trial;
                            exited = trial_exit;
                            improved = true;
                        } else {
                            ctrl[i][a] -= delta;
                        }
                    }
                }
            }
            if (!improved) step *= 0.5;
        }
        if (!exited) {
            any_inside = true;
            best = std::min(best, len);
        }
    }
    if (!any_inside) {
        throw DomainExitError("no connecting curve stays inside the chart domain", Geodesic{});
    }
    return best;
}

// ---------------------------------------------------------------------------
// Connection, Berwald test
// ---------------------------------------------------------------------------

/// Connection coefficients recovered from the spray by v-differentiation:
/// Gamma^i_jk(w) = -1/2 d^2 spray^i / dv^j dv^k at w.
inline std::vector<Mat> christoffel(const FinslerModel& model, const Vec& x, const Vec& w) {
    if (w.norm() == 0.0) throw ZeroSectionError("connection reference vector is zero");
    const int n = model.dim;
    std::vector<Mat> gamma(n, Mat::Zero(n, n));
    if (model.x_independent) return gamma;  // flat chart

    const double h = 1e-2 * (1.0 + w.norm());
    const auto s = [&](const Vec& v) { return spray(model, x, v); };
    const Vec center = s(w);
    for (int j = 0; j < n; ++j) {
        Vec wp = w, wm = w;
        wp[j] += h;
        wm[j] -= h;
        const Vec spp = s(wp);
        const Vec smm = s(wm);
        for (int i = 0; i < n; ++i) {
            gamma[i](j, j) = -0.5 * (spp[i] - 2.0 * center[i] + smm[i]) / (h * h);
        }
        for (int k = j + 1; k < n; ++k) {
            Vec v = w;
            v[j] += h; v[k] += h;
            const Vec a = s(v);
            v[k] = w[k] - h;
            const Vec b = s(v);
            v[j] = w[j] - h;
            const Vec c = s(v);
            v[k] = w[k] + h;
            const Vec d = s(v);
            for (int i = 0; i < n; ++i) {
                const double mixed = (a[i] - b[i] - d[i] + c[i]) / (4.0 * h * h);
                gamma[i](j, k) = gamma[i](k, j) = -0.5 * mixed;
            }
        }
    }
    return gamma;
}

/// D_v^w X(x) per the covariant derivative with reference vector w.
inline Vec covariant_derivative(const FinslerModel& model, const Vec& x, const Vec& v,
                                const Vec& w_ref, const VectorFn& field) {
    if (w_ref.norm() == 0.0) throw ZeroSectionError("covariant derivative needs w_ref != 0");
    const double h = 1e-6 * (1.0 + x.norm());
    const Mat jx = detail::fd_jacobian(field, x, h, model.dim);
    Vec out = jx * v;
    if (!model.x_independent) {
        const std::vector<Mat> gamma = christoffel(model, x, w_ref);
        const Vec xv = field(x);
        for (int i = 0; i < model.dim; ++i) out[i] += v.dot(gamma[i] * xv);
    }
    return out;
}

struct BerwaldReport {
    bool is_berwald = false;
    double max_residual = 0.0;
};

/// Tests whether the spray is a quadratic form in v at every sample point
/// (connection coefficients constant on each fiber).
inline BerwaldReport berwald_test(const FinslerModel& model, const std::vector<Vec>& points,
                                  double tol) {
    if (points.empty()) throw std::invalid_argument("berwald_test: empty sample");
    const int n = model.dim;
    const int n_coeff = n * (n + 1) / 2;

    std::mt19937_64 rng(0xbe17a1d);
    std::vector<Vec> fit_dirs;
    for (int i = 0; i < n; ++i) {
        Vec e = Vec::Zero(n);
        e[i] = 1.0;
        fit_dirs.push_back(e);
    }
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            Vec e = Vec::Zero(n);
            e[i] = 1.0; e[j] = 1.0;
            fit_dirs.push_back(e / e.norm());
            e[j] = -1.0;
            fit_dirs.push_back(e / e.norm());
        }
    }
    for (int r = 0; r < n_coeff + 8; ++r) fit_dirs.push_back(random_unit_vector(rng, n));

    std::vector<Vec> check_dirs;
    for (int r = 0; r < 16; ++r) check_dirs.push_back(random_unit_vector(rng, n));

    double worst = 0.0;
    for (const Vec& x : points) {
        const auto monomials = [n, n_coeff](const Vec& v) {
            Vec row(n_coeff);
            int c = 0;
            for (int i = 0; i < n; ++i) {
                for (int j = i; j < n; ++j) row[c++] = (i == j) ? v[i] * v[j] : 2.0 * v[i] * v[j];
            }
            return row;
        };
        Mat a(static_cast<int>(fit_dirs.size()) * 2, n_coeff);
        Mat rhs(static_cast<int>(fit_dirs.size()) * 2, n);
        int row = 0;
        for (const Vec& d : fit_dirs) {
            for (const double scale : {1.0, 1.7}) {
                const Vec v = scale * d;
                a.row(row) = monomials(v);
                rhs.row(row) = spray(model, x, v).transpose();
                ++row;
            }
        }
        const Mat coeff = a.colPivHouseholderQr().solve(rhs);  // n_coeff x n
        for (const Vec& d : check_dirs) {
            const Vec v = 1.31 * d;
            const Vec predicted = (monomials(v).transpose() * coeff).transpose();
            const Vec actual = spray(model, x, v);
            const double res = (predicted - actual).norm() / (1.0 + actual.norm());
            worst = std::max(worst, res);
        }
    }
    return BerwaldReport{worst <= tol, worst};
}

// ---------------------------------------------------------------------------
// Curvature
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Mat> christoffel_of_metric(const std::function<Mat(const Vec&)>& metric,
                                              const Vec& x, double h) {
    const int n = static_cast<int>(x.size());
    const Mat g = metric(x);
    const Mat ginv = g.ldlt().solve(Mat::Identity(n, n));
    std::vector<Mat> dg(n);  // dg[k](i, j) = d g_ij / d x^k
    for (int k = 0; k < n; ++k) {
        Vec xp = x, xm = x;
        xp[k] += h;
        xm[k] -= h;
        dg[k] = (metric(xp) - metric(xm)) / (2.0 * h);
    }
    std::vector<Mat> gamma(n, Mat::Zero(n, n));
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            for (int k = 0; k < n; ++k) {
                double sum = 0.0;
                for (int l = 0; l < n; ++l) {
                    sum += ginv(i, l) * (dg[j](l, k) + dg[k](l, j) - dg[l](j, k));
                }
                gamma[i](j, k) = 0.5 * sum;
            }
        }
    }
    return gamma;
}

/// Ric_jk v^j v^k of a Riemannian metric field by nested finite differences.
inline double riemannian_ricci(const std::function<Mat(const Vec&)>& metric, const Vec& x,
                               const Vec& v, double h_metric, double h_gamma) {
    const int n = static_cast<int>(x.size());
    const std::vector<Mat> gamma = christoffel_of_metric(metric, x, h_metric);
    std::vector<std::vector<Mat>> dgamma(n);  // dgamma[l][i](j,k) = d Gamma^i_jk / dx^l
    for (int l = 0; l < n; ++l) {
        Vec xp = x, xm = x;
        xp[l] += h_gamma;
        xm[l] -= h_gamma;
        const std::vector<Mat> gp = christoffel_of_metric(metric, xp, h_metric);
        const std::vector<Mat> gm = christoffel_of_metric(metric, xm, h_metric);
        dgamma[l].resize(n);
        for (int i = 0; i < n; ++i) dgamma[l][i] = (gp[i] - gm[i]) / (2.0 * h_gamma);
    }
    double ric = 0.0;
    for (int j = 0; j < n; ++j) {
        for (int k = 0; k < n; ++k) {
            double r_jk = 0.0;
            for (int i = 0; i < n; ++i) {
                r_jk += dgamma[i][i](j, k) - dgamma[j][i](i, k);
                for (int p = 0; p < n; ++p) {
                    r_jk += gamma[i](i, p) * gamma[p](j, k) - gamma[i](j, p) * gamma[p](i, k);
                }
            }
            ric += r_jk * v[j] * v[k];
        }
    }
    return ric;
}

/// Spray-flow extension of v near x on a general model: V(y) is the arrival
/// velocity of the geodesic shot with chart velocity v from a point of the
/// hyperplane through x transverse to v. Integral curves of V are geodesics
/// by construction.
inline VectorFn spray_flow_extension(const FinslerModel& model, const Vec& x, const Vec& v) {
    const int n = model.dim;
    // transverse basis: drop the axis where |v| is largest
    int drop = 0;
    for (int i = 1; i < n; ++i) {
        if (std::abs(v[i]) > std::abs(v[drop])) drop = i;
    }
    std::vector<Vec> basis;
    for (int i = 0; i < n; ++i) {
        if (i == drop) continue;
        Vec e = Vec::Zero(n);
        e[i] = 1.0;
        basis.push_back(e);
    }
    const FinslerModel m = model;
    const Vec x0 = x;
    const Vec v0 = v;
    return [m, x0, v0, basis, n](const Vec& y) -> Vec {
        Vec params = Vec::Zero(n);  // (s, c_1 .. c_{n-1})
        const Vec d = y - x0;
        params[0] = d.dot(v0) / v0.squaredNorm();
        for (std::size_t k = 0; k < basis.size(); ++k) {
            params[static_cast<Eigen::Index>(k) + 1] = d.dot(basis[k]);
        }
        const auto flow = [&](const Vec& p) -> Vec {
            Vec start = x0;
            for (std::size_t k = 0; k < basis.size(); ++k) {
                start += p[static_cast<Eigen::Index>(k) + 1] * basis[k];
            }
            const double s = p[0];
            if (std::abs(s) < 1e-14) return start;
            return integrate_geodesic(m, start, v0, s, 24).end_point();
        };
        for (int it = 0; it < 12; ++it) {
            const Vec miss = flow(params) - y;
            if (miss.norm() < 1e-12 * (1.0 + y.norm())) break;
            const Mat j = fd_jacobian([&](const Vec& p) { return Vec(flow(p) - y); }, params,
                                      1e-6, n);
            params -= j.fullPivLu().solve(miss);
        }
        Vec start = x0;
        for (std::size_t k = 0; k < basis.size(); ++k) {
            start += params[static_cast<Eigen::Index>(k) + 1] * basis[k];
        }
        const double s = params[0];
        if (std::abs(s) < 1e-14) return v0;
        return integrate_geodesic(m, start, v0, s, 24).v.back();
    };
}

}  // namespace detail

constexpr double kInfiniteDimension = std::numeric_limits<double>::infinity();

/// Density exponent of m against vol_{g_V}: Psi = psi + (1/2) log det g(V).
inline double weighted_density_exponent(const FinslerModel& model, const WeightedMeasure& measure,
                                        const Vec& x, const Vec& v) {
    const Mat g = model.tensor(x, v);
    return measure.psi(x) + 0.5 * std::log(g.determinant());
}

/// Weighted Ricci curvature Ric_N(v) with V the spray-flow extension of v:
/// base Riemannian Ricci of g_V plus (Psi o eta)''(0), minus the
/// (Psi o eta)'(0)^2 / (N - n) correction for finite N.
inline double weighted_ricci(const FinslerModel& model, const WeightedMeasure& measure,
                             const Vec& x, const Vec& v, double N = kInfiniteDimension) {
    if (v.norm() == 0.0) throw ZeroSectionError("weighted Ricci undefined at v = 0");
    const int n = model.dim;
    const bool infinite = std::isinf(N);
    if (!infinite && N >= 0.0 && N <= static_cast<double>(n)) {
        throw std::invalid_argument("weighted_ricci: N must lie in (-inf, 0) or (n, inf]");
    }

    double base = 0.0;
    if (model.x_independent) {
        base = 0.0;
    } else if (model.metric_fn) {
        base = detail::riemannian_ricci(model.metric_fn, x, v, 1e-5 * (1.0 + x.norm()),
                                        3e-4 * (1.0 + x.norm()));
    } else {
        const VectorFn ext = detail::spray_flow_extension(model, x, v);
        const auto g_v = [&](const Vec& y) { return model.tensor(y, ext(y)); };
        base = detail::riemannian_ricci(g_v, x, v, 1e-3 * (1.0 + x.norm()),
                                        1e-2 * (1.0 + x.norm()));
    }

    // (Psi o eta) on the geodesic through (x, v), five-point stencil
    const double speed = model.f(x, v);
    const double delta = 0.02 / std::max(1.0, speed);
    double psi_s[5];
    psi_s[2] = weighted_density_exponent(model, measure, x, v);
    {
        const Geodesic fwd = integrate_geodesic(model, x, v, 2.0 * delta, 32);
        const Geodesic bwd = integrate_geodesic(model, x, v, -2.0 * delta, 32);
        const std::size_t mid = fwd.x.size() / 2;
        psi_s[3] = weighted_density_exponent(model, measure, fwd.x[mid], fwd.v[mid]);
        psi_s[4] = weighted_density_exponent(model, measure, fwd.x.back(), fwd.v.back());
        psi_s[1] = weighted_density_exponent(model, measure, bwd.x[mid], bwd.v[mid]);
        psi_s[0] = weighted_density_exponent(model, measure, bwd.x.back(), bwd.v.back());
    }
    const double d1 = (-psi_s[4] + 8.0 * psi_s[3] - 8.0 * psi_s[1] + psi_s[0]) / (12.0 * delta);
    const double d2 =
        (-psi_s[4] + 16.0 * psi_s[3] - 30.0 * psi_s[2] + 16.0 * psi_s[1] - psi_s[0]) /
        (12.0 * delta * delta);

    double out = base + d2;
    if (!infinite) out -= d1 * d1 / (N - static_cast<double>(n));
    return out;
}

// ---------------------------------------------------------------------------
// Hessian and Bochner residual
// ---------------------------------------------------------------------------

struct HessianAtPoint {
    Vec base_point;
    Mat h;  // (1,1)-tensor: column j holds D_{e_j}^{grad u}(grad u)
};

/// A smooth scalar field with an optional analytic differential; du falls
/// back to central differences of u.
struct SmoothScalarField {
    ScalarFn u;
    VectorFn du;  // optional

    Vec differential(const Vec& x, double h) const {
        if (du) return du(x);
        return detail::fd_gradient(u, x, h);
    }
};

/// Legendre gradient field grad u = L*(du).
inline VectorFn gradient_fn(const FinslerModel& model, const SmoothScalarField& field) {
    const FinslerModel m = model;
    const SmoothScalarField f = field;
    return [m, f](const Vec& y) {
        const Vec alpha = f.differential(y, 1e-6 * (1.0 + y.norm()));
        if (alpha.norm() == 0.0) return Vec(Vec::Zero(m.dim));
        return detail::legendre_solve(m, y, alpha).v;
    };
}

/// Hessian of u at x in M_u as the matrix of v -> D_v^{grad u}(grad u).
inline HessianAtPoint hessian(const FinslerModel& model, const SmoothScalarField& field,
                              const Vec& x) {
    const Vec alpha = field.differential(x, 1e-6 * (1.0 + x.norm()));
    if (alpha.norm() == 0.0) throw ZeroSectionError("hessian: x is outside the essential domain");
    const VectorFn grad = gradient_fn(model, field);
    const Vec gx = grad(x);
    const double h = 1e-5 * (1.0 + x.norm());
    Mat hess = detail::fd_jacobian(grad, x, h, model.dim);
    if (!model.x_independent) {
        const std::vector<Mat> gamma = christoffel(model, x, gx);
        for (int i = 0; i < model.dim; ++i) {
            for (int j = 0; j < model.dim; ++j) hess(i, j) += gamma[i].row(j).dot(gx);
        }
    }
    return HessianAtPoint{x, hess};
}

/// Hilbert-Schmidt norm squared of a (1,1)-tensor under the metric g.
inline double hs_norm_sq(const Mat& h, const Mat& g) {
    const Mat ginv = g.ldlt().solve(Mat::Identity(g.rows(), g.cols()));
    return (h.transpose() * g * h * ginv).trace();
}

struct BochnerTerms {
    double diffusion = 0.0;   // Delta^{grad u}[F^2(grad u)/2]
    double transport = 0.0;   // d(Delta u)(grad u)
    double ricci = 0.0;       // Ric_inf(grad u)
    double hessian_sq = 0.0;  // |Hess u|^2_HS(grad u)

    double lhs() const { return diffusion - transport; }
    double rhs() const { return ricci + hessian_sq; }
    double residual() const { return lhs() - rhs(); }
};

/// Every term of the Bochner identity evaluated independently at x.
inline BochnerTerms bochner_terms(const FinslerModel& model, const WeightedMeasure& measure,
                                  const SmoothScalarField& field, const Vec& x) {
    const Vec alpha0 = field.differential(x, 1e-6 * (1.0 + x.norm()));
    if (alpha0.norm() == 0.0) throw ZeroSectionError("bochner: x is outside the essential domain");

    const VectorFn grad = gradient_fn(model, field);
    const Vec gx = grad(x);
    const Mat g0 = model.tensor(x, gx);
    const double h1 = 1e-4 * (1.0 + x.norm());
    const double h2 = 3e-3 * (1.0 + x.norm());

    // pointwise nonlinear Laplacian: div(grad u) - grad u . dpsi
    const auto laplacian_at = [&](const Vec& y) {
        const Mat j = detail::fd_jacobian(grad, y, h1, model.dim);
        const Vec dpsi = detail::fd_gradient([&](const Vec& z) { return measure.psi(z); }, y, h1);
        return j.trace() - grad(y).dot(dpsi);
    };

    BochnerTerms t;
    {
        // Delta^{V} e with V = grad u, e = F^2(grad u)/2 = F*(du)^2 / 2
        const ScalarFn e = [&](const Vec& y) {
            const Vec a = field.differential(y, 1e-6 * (1.0 + y.norm()));
            const double fs = a.norm() == 0.0 ? 0.0 : detail::legendre_solve(model, y, a).dual;
            return 0.5 * fs * fs;
        };
        const Mat hess_e = detail::fd_hessian(e, x, h2);
        const Vec de = detail::fd_gradient(e, x, h2);
        const Vec dpsi = detail::fd_gradient([&](const Vec& z) { return measure.psi(z); }, x, h2);
        const auto ginv_field = [&](const Vec& y) -> Mat {
            const Mat g = model.tensor(y, grad(y));
            return g.ldlt().solve(Mat::Identity(model.dim, model.dim));
        };
        const Mat ginv0 = ginv_field(x);
        Vec div_ginv = Vec::Zero(model.dim);
        for (int i = 0; i < model.dim; ++i) {
            Vec xp = x, xm = x;
            xp[i] += h2;
            xm[i] -= h2;
            const Mat diff = (ginv_field(xp) - ginv_field(xm)) / (2.0 * h2);
            div_ginv += diff.row(i).transpose();
        }
        t.diffusion = (ginv0 * hess_e).trace() + div_ginv.dot(de) - de.dot(ginv0 * dpsi);
    }
    {
        const Vec dir = gx / gx.norm();
        Vec xp = x + h2 * dir;
        Vec xm = x - h2 * dir;
        t.transport = (laplacian_at(xp) - laplacian_at(xm)) / (2.0 * h2) * gx.norm();
    }
    t.ricci = weighted_ricci(model, measure, x, gx, kInfiniteDimension);
    t.hessian_sq = hs_norm_sq(hessian(model, field, x).h, g0);
    return t;
}

inline double bochner_residual(const FinslerModel& model, const WeightedMeasure& measure,
                               const SmoothScalarField& field, const Vec& x) {
    return bochner_terms(model, measure, field, x).residual();
}

}  // namespace finslab
