// core.hpp -- shared matrix aliases, error types, and seeded RNG helpers.
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace smoe {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

struct InvalidInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct NumericalFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InsufficientRank : InvalidInput {
    using InvalidInput::InvalidInput;
};

struct DegenerateSegment : InvalidInput {
    using InvalidInput::InvalidInput;
};

struct TrainingDiverged : std::runtime_error {
    std::size_t step;
    TrainingDiverged(const std::string& what, std::size_t step_)
        : std::runtime_error(what), step(step_) {}
};

using Rng = std::mt19937_64;

// splitmix64 finalizer; decorrelates (seed, stream) pairs so experiments can
// derive independent streams from one user seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream = 0) {
    return Rng(mix_seed(seed, stream));
}

inline Matrix gaussian_matrix(Index rows, Index cols, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix out(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j)
            out(i, j) = dist(rng);
    return out;
}

inline Vector gaussian_vector(Index size, Rng& rng, double stddev = 1.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    Vector out(size);
    for (Index i = 0; i < size; ++i) out(i) = dist(rng);
    return out;
}

inline Matrix uniform_matrix(Index rows, Index cols, Rng& rng, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix out(rows, cols);
    for (Index i = 0; i < rows; ++i)
        for (Index j = 0; j < cols; ++j)
            out(i, j) = dist(rng);
    return out;
}

// First `cols` columns of the Q factor of a random Gaussian matrix; columns
// are orthonormal, so for isotropic x the projections Q^T x are i.i.d. normal.
inline Matrix random_orthonormal(Index rows, Index cols, Rng& rng) {
    if (cols > rows) throw InvalidInput("random_orthonormal: cols > rows");
    Matrix g = gaussian_matrix(rows, rows, rng);
    Eigen::HouseholderQR<Matrix> qr(g);
    Matrix q = qr.householderQ() * Matrix::Identity(rows, cols);
    return q;
}

inline double relative_frobenius_error(const Matrix& actual, const Matrix& reference) {
    double denom = reference.norm();
    if (denom == 0.0) return actual.norm();
    return (actual - reference).norm() / denom;
}

inline double relative_l2_error(const Vector& actual, const Vector& reference) {
    double denom = reference.norm();
    if (denom == 0.0) return actual.norm();
    return (actual - reference).norm() / denom;
}

}  // namespace smoe
