#include "finslab/models.hpp"
#include "finslab/spectral.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace finslab;

namespace {

GridPtr needle_grid(double radius, int nodes) {
    return make_grid({GridAxis{-radius, radius, nodes, AxisTopology::interval}});
}

WeightedMeasure needle_measure(double K, const Grid& grid) {
    return make_gaussian_measure(K, grid.bounding_box()).normalized_on(grid);
}

DiscreteField coordinate_field(GridPtr grid, int axis) {
    return DiscreteField::sample(grid, [axis](const Vec& x) { return x[axis]; });
}

}  // namespace

TEST(Grid, WeightsArePositiveAndSumToVolume) {
    const GridPtr g1 = make_grid({GridAxis{0.0, 2.0, 5, AxisTopology::interval}});
    double total = 0.0;
    for (std::size_t i = 0; i < g1->size(); ++i) {
        EXPECT_GT(g1->weight(i), 0.0);
        total += g1->weight(i);
    }
    EXPECT_NEAR(total, 2.0, 1e-14);
    EXPECT_NEAR(g1->total_weight(), 2.0, 1e-14);

    const GridPtr g2 = make_grid({GridAxis{0.0, 1.0, 4, AxisTopology::periodic},
                                  GridAxis{-1.0, 1.0, 3, AxisTopology::interval}});
    EXPECT_NEAR(g2->total_weight(), 2.0, 1e-14);
    // periodic axis has uniform spacing and excludes the right endpoint
    EXPECT_NEAR(g2->spacing(0), 0.25, 1e-15);
    EXPECT_NEAR(g2->coord(0, 3), 0.75, 1e-15);
}

TEST(Measure, NormalizationFlag) {
    const GridPtr g = needle_grid(8.0, 801);
    const WeightedMeasure m = needle_measure(1.0, *g);
    EXPECT_TRUE(m.normalized);
    EXPECT_NEAR(m.mass_on(*g), 1.0, 1e-6);
}

TEST(GradientField, EuclideanCoordinateFunction) {
    const GridPtr g = make_grid({GridAxis{-1.0, 1.0, 9, AxisTopology::interval},
                                 GridAxis{-1.0, 1.0, 9, AxisTopology::interval}});
    const WeightedMeasure m = make_measure([](const Vec&) { return 0.0; }, g->bounding_box());
    const auto field = gradient_field(euclidean_plane(), m, *g, coordinate_field(g, 0));
    for (Eigen::Index i = 0; i < field.comps.cols(); ++i) {
        EXPECT_NEAR(field.comps(0, i), 1.0, 1e-12);
        EXPECT_NEAR(field.comps(1, i), 0.0, 1e-12);
    }
}

TEST(GradientField, RandersCoordinateFunction) {
    const GridPtr g = make_grid({GridAxis{-1.0, 1.0, 9, AxisTopology::interval},
                                 GridAxis{-1.0, 1.0, 9, AxisTopology::interval}});
    const WeightedMeasure m = make_measure([](const Vec&) { return 0.0; }, g->bounding_box());
    const FinslerModel randers = randers_plane(0.5);
    const auto field = gradient_field(randers, m, *g, coordinate_field(g, 0));
    for (Eigen::Index i = 0; i < field.comps.cols(); ++i) {
        // grad u = L*((1,0)) = (4/9, 0) so that F(grad u) = F*(du) = 2/3
        EXPECT_NEAR(field.comps(0, i), 4.0 / 9.0, 1e-9);
        EXPECT_NEAR(field.comps(1, i), 0.0, 1e-9);
        Vec v(2);
        v << field.comps(0, i), field.comps(1, i);
        EXPECT_NEAR(randers.f(g->node(static_cast<std::size_t>(i)), v), 2.0 / 3.0, 1e-9);
    }
}

TEST(GradientField, ConstantFieldIsZero) {
    const GridPtr g = needle_grid(2.0, 33);
    const WeightedMeasure m = needle_measure(1.0, *g);
    const DiscreteField c = DiscreteField::sample(g, [](const Vec&) { return 4.2; });
    const auto field = gradient_field(euclidean_line(), m, *g, c);
    EXPECT_EQ(field.comps.norm(), 0.0);
}

TEST(Energy, GaussianNeedleLinearField) {
    const GridPtr g = needle_grid(8.0, 2001);
    const WeightedMeasure m = needle_measure(1.0, *g);
    const DiscreteField u = coordinate_field(g, 0);
    EXPECT_NEAR(energy(euclidean_line(), m, *g, u), 0.5, 1e-4);

    const DiscreteField c = DiscreteField::sample(g, [](const Vec&) { return 1.0; });
    EXPECT_EQ(energy(euclidean_line(), m, *g, c), 0.0);

    DiscreteField cu = u;
    cu.values *= 3.0;
    EXPECT_NEAR(energy(euclidean_line(), m, *g, cu), 9.0 * 0.5, 9e-4);
}

TEST(Laplacian, GaussianNeedleDriftForm) {
    const double K = 1.0;
    const GridPtr g = needle_grid(8.0, 2001);
    const WeightedMeasure m = needle_measure(K, *g);
    const DiscreteField u = coordinate_field(g, 0);
    const DiscreteField lap = nonlinear_laplacian(euclidean_line(), m, *g, u);
    for (std::size_t i = 0; i < g->size(); ++i) {
        const double t = g->node(i)[0];
        if (std::abs(t) > 6.0) continue;
        EXPECT_NEAR(lap.values[static_cast<Eigen::Index>(i)], -K * t, 1e-3) << "t = " << t;
    }
}

TEST(Laplacian, ConstantAndLinearity) {
    const GridPtr g = needle_grid(4.0, 101);
    const WeightedMeasure m = needle_measure(1.0, *g);
    const DiscreteField c = DiscreteField::sample(g, [](const Vec&) { return 2.0; });
    EXPECT_LT(nonlinear_laplacian(euclidean_line(), m, *g, c).values.cwiseAbs().maxCoeff(), 1e-14);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    DiscreteField u = DiscreteField::zeros(g);
    for (Eigen::Index i = 0; i < u.values.size(); ++i) u.values[i] = unit(rng);
    DiscreteField au_b = u;
    au_b.values = 2.5 * u.values + Vec::Constant(u.values.size(), 3.0);
    const Vec lhs = nonlinear_laplacian(euclidean_line(), m, *g, au_b).values;
    const Vec rhs = 2.5 * nonlinear_laplacian(euclidean_line(), m, *g, u).values;
    EXPECT_LT((lhs - rhs).cwiseAbs().maxCoeff(), 1e-10 * rhs.cwiseAbs().maxCoeff());
}

TEST(Laplacian, WeakFormAdjointness) {
    // sum w phi Delta u e^{-psi} = -sum w dphi(grad u) e^{-psi}, exact by
    // construction against the face quadrature of the pairing
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);

    const GridPtr g2 = make_grid({GridAxis{0.0, 2.0 * M_PI, 12, AxisTopology::periodic},
                                  GridAxis{-2.0, 2.0, 17, AxisTopology::interval}});
    const WeightedMeasure m2 =
        make_measure([](const Vec& x) { return 0.3 * x[1] * x[1]; }, g2->bounding_box())
            .normalized_on(*g2);
    const FinslerModel prod = make_product(make_euclidean(1), euclidean_line());
    const FinslerModel randers2 = randers_plane(0.4);

    for (int trial = 0; trial < 20; ++trial) {
        DiscreteField u = DiscreteField::zeros(g2);
        DiscreteField phi = DiscreteField::zeros(g2);
        for (Eigen::Index i = 0; i < u.values.size(); ++i) {
            u.values[i] = unit(rng);
            phi.values[i] = unit(rng);
        }
        for (const FinslerModel* model : {&prod, &randers2}) {
            const DiscreteField lap = nonlinear_laplacian(*model, m2, *g2, u);
            double lhs = 0.0;
            for (std::size_t i = 0; i < g2->size(); ++i) {
                lhs += g2->weight(i) * m2.density(g2->node(i)) *
                       phi.values[static_cast<Eigen::Index>(i)] *
                       lap.values[static_cast<Eigen::Index>(i)];
            }
            const double pairing = dirichlet_pairing(*model, m2, *g2, u, phi);
            const double scale = std::max({std::abs(lhs), std::abs(pairing), 1e-12});
            EXPECT_LT(std::abs(lhs + pairing) / scale, 1e-8);
        }
    }
}

TEST(HeatStep, EigenfieldDecayRate) {
    const double K = 1.0;
    const GridPtr g = needle_grid(8.0, 1001);
    const WeightedMeasure m = needle_measure(K, *g);
    const DiscreteField u = coordinate_field(g, 0);
    const double tau = 0.9 * stable_step(euclidean_line(), m, *g);
    const DiscreteField v = heat_step(euclidean_line(), m, *g, u, tau);

    const auto m_norm = [&](const Vec& w) {
        double s = 0.0;
        for (std::size_t i = 0; i < g->size(); ++i) {
            s += g->weight(i) * m.density(g->node(i)) * w[static_cast<Eigen::Index>(i)] *
                 w[static_cast<Eigen::Index>(i)];
        }
        return std::sqrt(s);
    };
    EXPECT_LT(m_norm(Vec(v.values - (1.0 - tau * K) * u.values)), 5e-3 * tau);
    // matches the exact decay e^{-K tau} to O(tau^2)
    EXPECT_LT(m_norm(Vec(v.values - std::exp(-K * tau) * u.values)),
              5e-3 * tau + 0.51 * K * K * tau * tau);
}

TEST(HeatStep, ConstantFixedPointAndMassConservation) {
    const GridPtr g = needle_grid(6.0, 301);
    const WeightedMeasure m = needle_measure(1.0, *g);
    const double tau = 0.5 * stable_step(euclidean_line(), m, *g);

    const DiscreteField c = DiscreteField::sample(g, [](const Vec&) { return 1.7; });
    const DiscreteField hc = heat_step(euclidean_line(), m, *g, c, tau);
    EXPECT_LT((hc.values - c.values).cwiseAbs().maxCoeff(), 1e-14);

    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    DiscreteField u = DiscreteField::zeros(g);
    for (Eigen::Index i = 0; i < u.values.size(); ++i) u.values[i] = unit(rng);
    const DiscreteField hu = heat_step(euclidean_line(), m, *g, u, tau);
    EXPECT_NEAR(field_mean(m, *g, hu), field_mean(m, *g, u), 1e-10);

    EXPECT_THROW(heat_step(euclidean_line(), m, *g, u, 10.0), std::invalid_argument);
}

TEST(FirstEigenvalue, GaussianNeedleSharpGap) {
    const double K = 1.0;
    const GridPtr g = needle_grid(8.0, 2001);
    const WeightedMeasure m = needle_measure(K, *g);
    const EigenResult res = first_eigenvalue(euclidean_line(), m, *g, 42);
    EXPECT_NEAR(res.lambda1, 1.0, 1e-3);

    const DiscreteField t = coordinate_field(g, 0);
    EXPECT_GE(field_correlation(m, *g, res.eigenfield.values, t.values), 0.999);

    // EigenResult invariants
    EXPECT_GT(res.lambda1, 0.0);
    EXPECT_LE(std::abs(field_mean(m, *g, res.eigenfield)), 1e-10);
    double var = 0.0;
    for (std::size_t i = 0; i < g->size(); ++i) {
        var += g->weight(i) * m.density(g->node(i)) *
               res.eigenfield.values[static_cast<Eigen::Index>(i)] *
               res.eigenfield.values[static_cast<Eigen::Index>(i)];
    }
    EXPECT_NEAR(var, 1.0, 1e-8);

    // Rayleigh monotonicity along the descent
    for (std::size_t k = 1; k < res.quotient_history.size(); ++k) {
        EXPECT_LE(res.quotient_history[k], res.quotient_history[k - 1] + 1e-12);
    }
}

TEST(FirstEigenvalue, CircleFourierGap) {
    const double L = 2.0 * M_PI;
    const GridPtr g = make_grid({GridAxis{0.0, L, 256, AxisTopology::periodic}});
    const WeightedMeasure m =
        make_measure([](const Vec&) { return 0.0; }, g->bounding_box()).normalized_on(*g);
    const EigenResult res = first_eigenvalue(make_euclidean(1), m, *g, 7);
    EXPECT_NEAR(res.lambda1, 1.0, 1e-3);  // (2 pi / L)^2
}

TEST(FirstEigenvalue, NonreversibleNeedleSatisfiesCdBound) {
    // F(v) = |v| + 0.5 v on a K=1 Gaussian needle is CD(K/(1+0.5)^2, inf):
    // Ric_inf(v) = psi'' v^2 >= K_F F(v)^2 with K_F = 1/2.25
    const GridPtr g = needle_grid(8.0, 801);
    const WeightedMeasure m = needle_measure(1.0, *g);
    const EigenResult res = first_eigenvalue(randers_line(0.5), m, *g, 11);
    EXPECT_GE(res.lambda1, 1.0 / 2.25 - 1e-3);
}

TEST(FirstEigenvalue, DeterministicGivenSeed) {
    const GridPtr g = needle_grid(6.0, 301);
    const WeightedMeasure m = needle_measure(1.0, *g);
    const EigenResult a = first_eigenvalue(euclidean_line(), m, *g, 123);
    const EigenResult b = first_eigenvalue(euclidean_line(), m, *g, 123);
    EXPECT_EQ(a.lambda1, b.lambda1);
    EXPECT_EQ((a.eigenfield.values - b.eigenfield.values).norm(), 0.0);
    EXPECT_EQ(a.iterations, b.iterations);
}

TEST(FirstEigenvalue, SeedScalingInvariance) {
    const GridPtr g = needle_grid(6.0, 301);
    const WeightedMeasure m = needle_measure(1.0, *g);
    std::mt19937_64 rng(77);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    DiscreteField u0 = DiscreteField::zeros(g);
    for (Eigen::Index i = 0; i < u0.values.size(); ++i) u0.values[i] = unit(rng);
    DiscreteField u0_scaled = u0;
    u0_scaled.values *= 4.0;
    const EigenResult a = first_eigenvalue(euclidean_line(), m, *g, 0, 4000000, 1e-10, &u0);
    const EigenResult b = first_eigenvalue(euclidean_line(), m, *g, 0, 4000000, 1e-10, &u0_scaled);
    EXPECT_EQ(a.lambda1, b.lambda1);
    EXPECT_EQ((a.eigenfield.values - b.eigenfield.values).norm(), 0.0);
}

TEST(FirstEigenvalue, GridRefinementSecondOrder) {
    const double K = 1.0;
    std::vector<double> lambdas;
    for (const int nodes : {401, 801, 1601}) {
        const GridPtr g = needle_grid(8.0, nodes);
        const WeightedMeasure m = needle_measure(K, *g);
        lambdas.push_back(first_eigenvalue(euclidean_line(), m, *g, 5, 8000000, 1e-12).lambda1);
    }
    const double d1 = std::abs(lambdas[0] - lambdas[1]);
    const double d2 = std::abs(lambdas[1] - lambdas[2]);
    const double order = std::log2(d1 / d2);
    EXPECT_GE(order, 1.7);
}

TEST(FirstEigenvalue, RequiresNormalizedMeasure) {
    const GridPtr g = needle_grid(6.0, 101);
    const WeightedMeasure raw = make_gaussian_measure(1.0, g->bounding_box());
    EXPECT_THROW(first_eigenvalue(euclidean_line(), raw, *g, 1), std::invalid_argument);
}

TEST(FirstEigenvalue, NonConvergenceCarriesLastIterate) {
    const GridPtr g = needle_grid(6.0, 301);
    const WeightedMeasure m = needle_measure(1.0, *g);
    try {
        first_eigenvalue(euclidean_line(), m, *g, 3, 200);
        FAIL() << "expected EigenSolveFailure";
    } catch (const EigenSolveFailure& e) {
        EXPECT_EQ(e.last.iterations, 200);
        EXPECT_GT(e.last.lambda1, 0.0);
        EXPECT_GT(e.last.residual, 0.0);
    }
}
