#pragma once

#include <stdexcept>
#include <string>

namespace finslab {

/// Tensor/Legendre operations are undefined on the zero section; callers
/// that can observe v = 0 or du = 0 get this instead of garbage.
class ZeroSectionError : public std::runtime_error {
public:
    explicit ZeroSectionError(const std::string& what) : std::runtime_error(what) {}
};

/// The model lost strong convexity / positivity where it was evaluated
/// (e.g. a Randers one-form with alpha-norm >= 1).
class ModelDegenerateError : public std::runtime_error {
public:
    explicit ModelDegenerateError(const std::string& what) : std::runtime_error(what) {}
};

/// An iterative solve did not reach its tolerance. Carries the best value
/// found and the residual(s) at the last iterate.
class NumericalFailure : public std::runtime_error {
public:
    NumericalFailure(const std::string& what, double best, double primary, double secondary = 0.0)
        : std::runtime_error(what), best_value(best), residual(primary), residual_secondary(secondary) {}

    double best_value;
    double residual;
    double residual_secondary;
};

/// A decomposition handed to the verifier violates the transport-ray
/// invariant or fails to cover the grid.
class InvalidDecompositionError : public std::runtime_error {
public:
    explicit InvalidDecompositionError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace finslab
