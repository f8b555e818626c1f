#pragma once

#include "finslab/errors.hpp"
#include "finslab/grid.hpp"
#include "finslab/norms.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace finslab {

/// Vector field sampled at grid nodes: comps(a, i) is the a-th component
/// at flat node i.
struct NodalVectorField {
    GridPtr grid;
    Mat comps;
};

/// Nodal differential du by central differences (second-order one-sided at
/// interval ends, wrap-around on periodic axes).
inline Mat nodal_differential(const Grid& grid, const Vec& u) {
    const int dim = grid.dim();
    const std::size_t n = grid.size();
    Mat du(dim, static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<int> multi = grid.multi_index(i);
        for (int a = 0; a < dim; ++a) {
            const double h = grid.spacing(a);
            const long ip = grid.neighbor(i, a, +1);
            const long im = grid.neighbor(i, a, -1);
            double d;
            if (ip >= 0 && im >= 0) {
                d = (u[static_cast<Eigen::Index>(ip)] - u[static_cast<Eigen::Index>(im)]) / (2.0 * h);
            } else if (ip >= 0) {
                const long ipp = grid.neighbor(static_cast<std::size_t>(ip), a, +1);
                d = (-3.0 * u[static_cast<Eigen::Index>(i)] + 4.0 * u[static_cast<Eigen::Index>(ip)] -
                     u[static_cast<Eigen::Index>(ipp)]) /
                    (2.0 * h);
            } else {
                const long imm = grid.neighbor(static_cast<std::size_t>(im), a, -1);
                d = (3.0 * u[static_cast<Eigen::Index>(i)] - 4.0 * u[static_cast<Eigen::Index>(im)] +
                     u[static_cast<Eigen::Index>(imm)]) /
                    (2.0 * h);
            }
            du(a, static_cast<Eigen::Index>(i)) = d;
        }
        (void)multi;
    }
    return du;
}

/// Nodal Legendre gradient field: grad u = L*(du) node by node, zero where
/// du = 0 (essential-domain convention). A Legendre failure is annotated
/// with the node where it happened.
inline NodalVectorField gradient_field(const FinslerModel& model, const WeightedMeasure&,
                                       const Grid& grid, const DiscreteField& u) {
    const Mat du = nodal_differential(grid, u.values);
    NodalVectorField out{u.grid, Mat::Zero(model.dim, du.cols())};
    for (Eigen::Index i = 0; i < du.cols(); ++i) {
        const Vec alpha = du.col(i);
        if (alpha.norm() == 0.0) continue;
        try {
            out.comps.col(i) = detail::legendre_solve(model, grid.node(static_cast<std::size_t>(i)), alpha).v;
        } catch (const NumericalFailure& e) {
            throw NumericalFailure("gradient_field: legendre failure at node " + std::to_string(i) +
                                       ": " + e.what(),
                                   e.best_value, e.residual, e.residual_secondary);
        }
    }
    return out;
}

/// Energy functional E(u) = 1/2 sum w e^{-psi} F*(du)^2 (nodal quadrature).
inline double energy(const FinslerModel& model, const WeightedMeasure& measure, const Grid& grid,
                     const DiscreteField& u) {
    const Mat du = nodal_differential(grid, u.values);
    const bool euclidean = model.metric_fn && model.x_independent &&
                           model.metric_fn(grid.node(0)).isIdentity(1e-14);
    double total = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const Vec alpha = du.col(static_cast<Eigen::Index>(i));
        double fs = 0.0;
        if (alpha.norm() > 0.0) {
            fs = euclidean ? alpha.norm() : detail::legendre_solve(model, grid.node(i), alpha).dual;
        }
        total += grid.weight(i) * measure.density(grid.node(i)) * fs * fs;
    }
    return 0.5 * total;
}

namespace detail {

struct Face {
    std::size_t i;
    std::size_t j;
    int axis;
    double h;
    double coeff;  // transverse weight * e^{-psi(face)} / h
    Vec mid;
};

enum class SchemePath { linear_euclidean, one_dimensional, general };

struct FaceScheme {
    std::vector<Face> faces;
    std::vector<double> node_mass;  // w_i e^{-psi_i}
    SchemePath path = SchemePath::general;
    // one_dimensional path: inverse squared forward/backward speeds per face
    std::vector<double> inv_c_plus_sq;
    std::vector<double> inv_c_minus_sq;
    double total_mass = 0.0;
};

inline FaceScheme build_face_scheme(const FinslerModel& model, const WeightedMeasure& measure,
                                    const Grid& grid) {
    FaceScheme s;
    const std::size_t n = grid.size();
    s.node_mass.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        s.node_mass[i] = grid.weight(i) * measure.density(grid.node(i));
        s.total_mass += s.node_mass[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<int> multi = grid.multi_index(i);
        for (int a = 0; a < grid.dim(); ++a) {
            const bool periodic = grid.axis(a).topology == AxisTopology::periodic;
            if (!periodic && multi[a] + 1 >= grid.extent(a)) continue;
            const long j = grid.neighbor(i, a, +1);
            if (j < 0) continue;
            Face f;
            f.i = i;
            f.j = static_cast<std::size_t>(j);
            f.axis = a;
            f.h = grid.spacing(a);
            Vec mid = grid.node(i);
            mid[a] += 0.5 * f.h;
            f.mid = mid;
            double tw = 1.0;
            for (int b = 0; b < grid.dim(); ++b) {
                if (b != a) tw *= grid.axis_weight(b, multi[b]);
            }
            f.coeff = tw * measure.density(mid) / f.h;
            s.faces.push_back(std::move(f));
        }
    }
    const bool euclidean = model.metric_fn && model.x_independent &&
                           model.metric_fn(grid.node(0)).isIdentity(1e-14);
    if (euclidean) {
        s.path = SchemePath::linear_euclidean;
    } else if (grid.dim() == 1) {
        s.path = SchemePath::one_dimensional;
        Vec plus(1), minus(1);
        plus << 1.0;
        minus << -1.0;
        s.inv_c_plus_sq.reserve(s.faces.size());
        s.inv_c_minus_sq.reserve(s.faces.size());
        for (const Face& f : s.faces) {
            const double cp = model.f(f.mid, plus);
            const double cm = model.f(f.mid, minus);
            s.inv_c_plus_sq.push_back(1.0 / (cp * cp));
            s.inv_c_minus_sq.push_back(1.0 / (cm * cm));
        }
    }
    return s;
}

/// Covector at a face: compact difference along the face axis, averaged
/// central differences transversally.
inline Vec face_covector(const Grid& grid, const Mat& du_nodal, const Vec& u, const Face& f) {
    Vec alpha(grid.dim());
    for (int b = 0; b < grid.dim(); ++b) {
        if (b == f.axis) {
            alpha[b] = (u[static_cast<Eigen::Index>(f.j)] - u[static_cast<Eigen::Index>(f.i)]) / f.h;
        } else {
            alpha[b] = 0.5 * (du_nodal(b, static_cast<Eigen::Index>(f.i)) +
                              du_nodal(b, static_cast<Eigen::Index>(f.j)));
        }
    }
    return alpha;
}

/// Flux component along the face axis of the Legendre gradient at the face.
inline double face_flux_component(const FinslerModel& model, const FaceScheme& s, std::size_t face_idx,
                                  const Grid& grid, const Mat& du_nodal, const Vec& u) {
    const Face& f = s.faces[face_idx];
    switch (s.path) {
        case SchemePath::linear_euclidean: {
            return (u[static_cast<Eigen::Index>(f.j)] - u[static_cast<Eigen::Index>(f.i)]) / f.h;
        }
        case SchemePath::one_dimensional: {
            const double d = (u[static_cast<Eigen::Index>(f.j)] - u[static_cast<Eigen::Index>(f.i)]) / f.h;
            return d >= 0.0 ? d * s.inv_c_plus_sq[face_idx] : d * s.inv_c_minus_sq[face_idx];
        }
        case SchemePath::general: {
            const Vec alpha = face_covector(grid, du_nodal, u, f);
            if (alpha.norm() == 0.0) return 0.0;
            return legendre_solve(model, f.mid, alpha).v[f.axis];
        }
    }
    return 0.0;
}

inline Vec laplacian_values(const FinslerModel& model, const FaceScheme& s, const Grid& grid,
                            const Vec& u) {
    Mat du_nodal;
    if (s.path == SchemePath::general) du_nodal = nodal_differential(grid, u);
    Vec acc = Vec::Zero(u.size());
    for (std::size_t k = 0; k < s.faces.size(); ++k) {
        const Face& f = s.faces[k];
        const double flux = f.coeff * f.h * face_flux_component(model, s, k, grid, du_nodal, u);
        acc[static_cast<Eigen::Index>(f.i)] += flux;
        acc[static_cast<Eigen::Index>(f.j)] -= flux;
    }
    for (Eigen::Index i = 0; i < acc.size(); ++i) acc[i] /= s.node_mass[static_cast<std::size_t>(i)];
    return acc;
}

}  // namespace detail

/// Weak nonlinear Laplacian: divergence of the face fluxes of e^{-psi} grad u
/// divided by e^{-psi}, with zero-flux closure on interval axes. Satisfies
/// sum w e^{-psi} phi (Delta u) = -dirichlet_pairing(u, phi) exactly.
inline DiscreteField nonlinear_laplacian(const FinslerModel& model, const WeightedMeasure& measure,
                                         const Grid& grid, const DiscreteField& u) {
    const detail::FaceScheme s = detail::build_face_scheme(model, measure, grid);
    return DiscreteField{u.grid, detail::laplacian_values(model, s, grid, u.values)};
}

/// Discrete realization of int dphi(grad u) dm quadratured on the faces;
/// the exact negative adjoint of nonlinear_laplacian.
inline double dirichlet_pairing(const FinslerModel& model, const WeightedMeasure& measure,
                                const Grid& grid, const DiscreteField& u, const DiscreteField& phi) {
    const detail::FaceScheme s = detail::build_face_scheme(model, measure, grid);
    Mat du_nodal;
    if (s.path == detail::SchemePath::general) du_nodal = nodal_differential(grid, u.values);
    double total = 0.0;
    for (std::size_t k = 0; k < s.faces.size(); ++k) {
        const detail::Face& f = s.faces[k];
        const double v_a = detail::face_flux_component(model, s, k, grid, du_nodal, u.values);
        const double dphi = phi.values[static_cast<Eigen::Index>(f.j)] -
                            phi.values[static_cast<Eigen::Index>(f.i)];
        total += f.coeff * dphi * v_a * f.h;
    }
    return total;
}

/// Largest explicit Euler step that keeps the heat iteration stable on this
/// grid; Gershgorin bound on the divergence-form operator, scaled by the
/// worst dual-norm anisotropy for non-Euclidean norms.
inline double stable_step(const FinslerModel& model, const WeightedMeasure& measure,
                          const Grid& grid) {
    const detail::FaceScheme s = detail::build_face_scheme(model, measure, grid);
    std::vector<double> diag(grid.size(), 0.0);
    for (const detail::Face& f : s.faces) {
        diag[f.i] += f.coeff / f.h;
        diag[f.j] += f.coeff / f.h;
    }
    double max_d = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) max_d = std::max(max_d, diag[i] / s.node_mass[i]);

    double dual_factor = 1.0;
    if (s.path != detail::SchemePath::linear_euclidean) {
        std::mt19937_64 rng(97);
        const Vec x0 = grid.node(grid.size() / 2);
        for (int trial = 0; trial < 32; ++trial) {
            const Vec alpha = random_unit_vector(rng, model.dim);
            const double fs = detail::legendre_solve(model, x0, alpha).dual;
            dual_factor = std::max(dual_factor, fs * fs);
        }
    }
    return 1.0 / (max_d * dual_factor);
}

/// Explicit Euler heat step u + tau * Delta u.
inline DiscreteField heat_step(const FinslerModel& model, const WeightedMeasure& measure,
                               const Grid& grid, const DiscreteField& u, double tau) {
    if (tau > stable_step(model, measure, grid)) {
        throw std::invalid_argument("heat_step: tau above the grid stability bound");
    }
    const DiscreteField lap = nonlinear_laplacian(model, measure, grid, u);
    return DiscreteField{u.grid, Vec(u.values + tau * lap.values)};
}

struct EigenResult {
    double lambda1 = 0.0;
    DiscreteField eigenfield;
    double residual = 0.0;
    int iterations = 0;
    std::vector<double> quotient_history;
};

class EigenSolveFailure : public NumericalFailure {
public:
    EigenSolveFailure(const std::string& what, EigenResult last_iterate)
        : NumericalFailure(what, last_iterate.lambda1, last_iterate.residual),
          last(std::move(last_iterate)) {}

    EigenResult last;
};

/// First nonzero eigenvalue of the nonlinear Laplacian by projected
/// gradient descent on the Rayleigh quotient: heat steps with zero-mean
/// projection and variance renormalization. Deterministic given the seed;
/// an explicit initial field may replace the seeded random start.
inline EigenResult first_eigenvalue(const FinslerModel& model, const WeightedMeasure& measure,
                                    const Grid& grid, std::uint64_t seed, int max_iter = 4000000,
                                    double tol = 1e-10, const DiscreteField* init = nullptr) {
    const detail::FaceScheme s = detail::build_face_scheme(model, measure, grid);
    if (std::abs(s.total_mass - 1.0) > 1e-6) {
        throw std::invalid_argument("first_eigenvalue: measure must be normalized to mass 1");
    }
    const std::size_t n = grid.size();
    const auto project_normalize = [&](Vec& u) {
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += s.node_mass[i] * u[static_cast<Eigen::Index>(i)];
        mean /= s.total_mass;
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            u[static_cast<Eigen::Index>(i)] -= mean;
            var += s.node_mass[i] * u[static_cast<Eigen::Index>(i)] * u[static_cast<Eigen::Index>(i)];
        }
        u /= std::sqrt(var / s.total_mass);
    };

    Vec u;
    if (init != nullptr) {
        u = init->values;
    } else {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> unit(-1.0, 1.0);
        u.resize(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) u[static_cast<Eigen::Index>(i)] = unit(rng);
    }
    project_normalize(u);

    const double tau = 0.4 * stable_step(model, measure, grid);

    std::vector<double> history;
    history.reserve(4096);
    Vec acc(static_cast<Eigen::Index>(n));
    Mat du_nodal;
    int it = 0;
    bool converged = false;
    const bool fast_linear = s.path == detail::SchemePath::linear_euclidean;
    const bool fast_1d = s.path == detail::SchemePath::one_dimensional;
    for (; it < max_iter; ++it) {
        acc.setZero();
        double quot = 0.0;
        if (fast_linear || fast_1d) {
            for (std::size_t k = 0; k < s.faces.size(); ++k) {
                const detail::Face& f = s.faces[k];
                const double d = u[static_cast<Eigen::Index>(f.j)] - u[static_cast<Eigen::Index>(f.i)];
                double v = d / f.h;
                if (fast_1d) v *= (d >= 0.0 ? s.inv_c_plus_sq[k] : s.inv_c_minus_sq[k]);
                const double flux = f.coeff * f.h * v;
                acc[static_cast<Eigen::Index>(f.i)] += flux;
                acc[static_cast<Eigen::Index>(f.j)] -= flux;
                quot += f.coeff * d * v;  // dirichlet form contribution
            }
        } else {
            du_nodal = nodal_differential(grid, u);
            for (std::size_t k = 0; k < s.faces.size(); ++k) {
                const detail::Face& f = s.faces[k];
                const double v = detail::face_flux_component(model, s, k, grid, du_nodal, u);
                const double d = u[static_cast<Eigen::Index>(f.j)] - u[static_cast<Eigen::Index>(f.i)];
                const double flux = f.coeff * f.h * v;
                acc[static_cast<Eigen::Index>(f.i)] += flux;
                acc[static_cast<Eigen::Index>(f.j)] -= flux;
                quot += f.coeff * d * v;
            }
        }
        quot /= s.total_mass;  // variance is kept at 1
        history.push_back(quot);
        if (it >= 50 && std::abs(history[it] - history[it - 50]) < tol) {
            converged = true;
            break;
        }
        for (std::size_t i = 0; i < n; ++i) {
            u[static_cast<Eigen::Index>(i)] += tau * acc[static_cast<Eigen::Index>(i)] / s.node_mass[i];
        }
        project_normalize(u);
    }

    EigenResult res;
    res.lambda1 = history.empty() ? 0.0 : history.back();
    res.iterations = it;
    res.quotient_history = std::move(history);

    // sign convention: first node (flat order) with |u| > 0.1 is positive
    for (std::size_t i = 0; i < n; ++i) {
        if (std::abs(u[static_cast<Eigen::Index>(i)]) > 0.1) {
            if (u[static_cast<Eigen::Index>(i)] < 0.0) u = -u;
            break;
        }
    }
    res.eigenfield = DiscreteField{std::make_shared<const Grid>(grid), u};

    const Vec lap = detail::laplacian_values(model, s, grid, u);
    double rsq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = lap[static_cast<Eigen::Index>(i)] + res.lambda1 * u[static_cast<Eigen::Index>(i)];
        rsq += s.node_mass[i] * r * r;
    }
    res.residual = std::sqrt(rsq / s.total_mass);

    if (!converged) {
        throw EigenSolveFailure("first_eigenvalue: no convergence within max_iter", res);
    }
    return res;
}

/// Pearson correlation of two fields under the weighted measure.
inline double field_correlation(const WeightedMeasure& measure, const Grid& grid, const Vec& a,
                                const Vec& b) {
    double mass = 0.0, ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double w = grid.weight(i) * measure.density(grid.node(i));
        mass += w;
        ma += w * a[static_cast<Eigen::Index>(i)];
        mb += w * b[static_cast<Eigen::Index>(i)];
    }
    ma /= mass;
    mb /= mass;
    double saa = 0.0, sbb = 0.0, sab = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double w = grid.weight(i) * measure.density(grid.node(i));
        const double da = a[static_cast<Eigen::Index>(i)] - ma;
        const double db = b[static_cast<Eigen::Index>(i)] - mb;
        saa += w * da * da;
        sbb += w * db * db;
        sab += w * da * db;
    }
    return sab / std::sqrt(saa * sbb);
}

}  // namespace finslab
