#pragma once

#include "finslab/common.hpp"

#include <memory>
#include <numeric>
#include <vector>

namespace finslab {

enum class AxisTopology { interval, periodic };

struct GridAxis {
    double lo = 0.0;
    double hi = 1.0;
    int n = 2;
    AxisTopology topology = AxisTopology::interval;
};

/// Tensor-product structured grid with trapezoidal quadrature weights.
/// Interval axes carry half weights at the ends; periodic axes have
/// uniform spacing (hi excluded) and uniform weights.
class Grid {
public:
    explicit Grid(std::vector<GridAxis> axes) : axes_(std::move(axes)) {
        coords_.resize(axes_.size());
        weights_.resize(axes_.size());
        strides_.assign(axes_.size(), 1);
        size_ = 1;
        for (std::size_t a = 0; a < axes_.size(); ++a) {
            const GridAxis& ax = axes_[a];
            const bool periodic = ax.topology == AxisTopology::periodic;
            const int n = ax.n;
            const double h = periodic ? (ax.hi - ax.lo) / n : (ax.hi - ax.lo) / (n - 1);
            coords_[a].resize(n);
            weights_[a].resize(n);
            for (int i = 0; i < n; ++i) {
                coords_[a][i] = ax.lo + i * h;
                weights_[a][i] = h;
            }
            if (!periodic) {
                weights_[a][0] = 0.5 * h;
                weights_[a][n - 1] = 0.5 * h;
            }
            strides_[a] = size_;
            size_ *= static_cast<std::size_t>(n);
        }
    }

    int dim() const { return static_cast<int>(axes_.size()); }
    std::size_t size() const { return size_; }
    const GridAxis& axis(int a) const { return axes_[a]; }
    double spacing(int a) const { return coords_[a].size() > 1 ? coords_[a][1] - coords_[a][0] : 0.0; }
    double coord(int a, int i) const { return coords_[a][i]; }
    double axis_weight(int a, int i) const { return weights_[a][i]; }
    int extent(int a) const { return axes_[a].n; }

    std::size_t flat_index(const std::vector<int>& multi) const {
        std::size_t idx = 0;
        for (std::size_t a = 0; a < axes_.size(); ++a) idx += strides_[a] * static_cast<std::size_t>(multi[a]);
        return idx;
    }

    std::vector<int> multi_index(std::size_t flat) const {
        std::vector<int> multi(axes_.size());
        for (std::size_t a = 0; a < axes_.size(); ++a) {
            multi[a] = static_cast<int>(flat % static_cast<std::size_t>(axes_[a].n));
            flat /= static_cast<std::size_t>(axes_[a].n);
        }
        return multi;
    }

    Vec node(std::size_t flat) const {
        Vec x(dim());
        for (int a = 0; a < dim(); ++a) {
            x[a] = coords_[a][static_cast<int>(flat % static_cast<std::size_t>(axes_[a].n))];
            flat /= static_cast<std::size_t>(axes_[a].n);
        }
        return x;
    }

    double weight(std::size_t flat) const {
        double w = 1.0;
        for (int a = 0; a < dim(); ++a) {
            w *= weights_[a][static_cast<int>(flat % static_cast<std::size_t>(axes_[a].n))];
            flat /= static_cast<std::size_t>(axes_[a].n);
        }
        return w;
    }

    double total_weight() const {
        double total = 1.0;
        for (int a = 0; a < dim(); ++a) {
            total *= std::accumulate(weights_[a].begin(), weights_[a].end(), 0.0);
        }
        return total;
    }

    /// Neighbor index along an axis with periodic wrap; returns -1 when the
    /// step leaves an interval axis.
    long neighbor(std::size_t flat, int a, int step) const {
        const std::vector<int> multi = multi_index(flat);
        int i = multi[a] + step;
        const int n = axes_[a].n;
        if (axes_[a].topology == AxisTopology::periodic) {
            i = ((i % n) + n) % n;
        } else if (i < 0 || i >= n) {
            return -1;
        }
        return static_cast<long>(flat) + static_cast<long>(strides_[a]) * (i - multi[a]);
    }

    Box bounding_box() const {
        Box b;
        b.lo = Vec(dim());
        b.hi = Vec(dim());
        for (int a = 0; a < dim(); ++a) {
            b.lo[a] = axes_[a].lo;
            b.hi[a] = axes_[a].hi;
        }
        return b;
    }

private:
    std::vector<GridAxis> axes_;
    std::vector<std::vector<double>> coords_;
    std::vector<std::vector<double>> weights_;
    std::vector<std::size_t> strides_;
    std::size_t size_ = 1;
};

using GridPtr = std::shared_ptr<const Grid>;

inline GridPtr make_grid(std::vector<GridAxis> axes) {
    return std::make_shared<const Grid>(std::move(axes));
}

/// Scalar function sampled at the grid nodes.
struct DiscreteField {
    GridPtr grid;
    Vec values;

    static DiscreteField zeros(GridPtr g) {
        return DiscreteField{g, Vec::Zero(static_cast<Eigen::Index>(g->size()))};
    }

    static DiscreteField sample(GridPtr g, const std::function<double(const Vec&)>& fn) {
        DiscreteField f = zeros(g);
        for (std::size_t i = 0; i < g->size(); ++i) f.values[static_cast<Eigen::Index>(i)] = fn(g->node(i));
        return f;
    }
};

/// Smooth positive density e^{-psi(x)} against coordinate volume. When the
/// normalized flag is set, psi() already contains the log of the total mass
/// so that the grid quadrature of the density is 1.
struct WeightedMeasure {
    std::function<double(const Vec&)> psi_raw;
    double log_mass = 0.0;
    bool normalized = false;
    Box domain;

    double psi(const Vec& x) const { return psi_raw(x) + log_mass; }
    double density(const Vec& x) const { return std::exp(-psi(x)); }

    double mass_on(const Grid& grid) const {
        double total = 0.0;
        for (std::size_t i = 0; i < grid.size(); ++i) total += grid.weight(i) * density(grid.node(i));
        return total;
    }

    WeightedMeasure normalized_on(const Grid& grid) const {
        WeightedMeasure out = *this;
        const double mass = mass_on(grid);
        out.log_mass += std::log(mass);
        out.normalized = true;
        return out;
    }
};

inline WeightedMeasure make_measure(std::function<double(const Vec&)> psi, const Box& domain) {
    WeightedMeasure m;
    m.psi_raw = std::move(psi);
    m.domain = domain;
    return m;
}

/// Gaussian weight psi = K |x|^2 / 2.
inline WeightedMeasure make_gaussian_measure(double K, const Box& domain) {
    return make_measure([K](const Vec& x) { return 0.5 * K * x.squaredNorm(); }, domain);
}

/// m-mean and m-variance of a field under a mass-1 measure.
inline double field_mean(const WeightedMeasure& measure, const Grid& grid, const DiscreteField& u) {
    double mean = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        mean += grid.weight(i) * measure.density(grid.node(i)) * u.values[static_cast<Eigen::Index>(i)];
    }
    return mean;
}

}  // namespace finslab
