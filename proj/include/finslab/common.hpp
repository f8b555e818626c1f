#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace finslab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline bool all_finite(const Vec& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) return false;
    }
    return true;
}

inline void require_finite(const Vec& v, const char* what) {
    if (!all_finite(v)) {
        throw std::invalid_argument(std::string(what) + " has non-finite entries");
    }
}

inline void require_finite(double x, const char* what) {
    if (!std::isfinite(x)) {
        throw std::invalid_argument(std::string(what) + " is non-finite");
    }
}

/// Axis-aligned box, used as the sampling/validity domain of a chart.
struct Box {
    Vec lo;
    Vec hi;

    bool contains(const Vec& x, double slack = 0.0) const {
        for (Eigen::Index i = 0; i < x.size(); ++i) {
            if (x[i] < lo[i] - slack || x[i] > hi[i] + slack) return false;
        }
        return true;
    }

    static Box cube(int dim, double half_width) {
        Box b;
        b.lo = Vec::Constant(dim, -half_width);
        b.hi = Vec::Constant(dim, half_width);
        return b;
    }
};

/// Number of worker threads. FINSLAB_THREADS selects it; absent or
/// invalid means single-threaded.
inline int worker_thread_count() {
    const char* env = std::getenv("FINSLAB_THREADS");
    if (env == nullptr) return 1;
    const int n = std::atoi(env);
    if (n < 1) return 1;
    const int hw = static_cast<int>(std::thread::hardware_concurrency());
    return hw > 0 ? std::min(n, hw) : n;
}

/// Chunked parallel loop over [0, n). Falls back to a plain loop when
/// single-threaded. Work items must be independent.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    const int threads = worker_thread_count();
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (n + threads - 1) / static_cast<std::size_t>(threads);
    for (int t = 0; t < threads; ++t) {
        const std::size_t begin = static_cast<std::size_t>(t) * chunk;
        const std::size_t end = std::min(n, begin + chunk);
        if (begin >= end) break;
        pool.emplace_back([&body, begin, end] {
            for (std::size_t i = begin; i < end; ++i) body(i);
        });
    }
    for (auto& th : pool) th.join();
}

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline Vec random_unit_vector(std::mt19937_64& rng, int dim) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vec v(dim);
    double norm = 0.0;
    do {
        for (int i = 0; i < dim; ++i) v[i] = gauss(rng);
        norm = v.norm();
    } while (norm < 1e-12);
    return v / norm;
}

}  // namespace finslab
