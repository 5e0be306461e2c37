#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "gcgm/error.hpp"

namespace gcgm {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log(sum(exp(v))) that tolerates -inf entries and empty input.
inline double log_sum_exp(const Eigen::Ref<const Vector>& v) {
    if (v.size() == 0) {
        return kNegInf;
    }
    const double m = v.maxCoeff();
    if (m == kNegInf) {
        return kNegInf;
    }
    return m + std::log((v.array() - m).exp().sum());
}

inline double log_add(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

inline Matrix symmetrize(const Matrix& a) { return 0.5 * (a + a.transpose()); }

inline double min_eigenvalue(const Matrix& a) {
    if (a.size() == 0) {
        return std::numeric_limits<double>::infinity();
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

/// Adds `floor * I` when the smallest eigenvalue of `a` is below `floor`.
/// Returns true when jitter was applied.
inline bool apply_jitter(Matrix& a, double floor) {
    if (a.size() == 0 || min_eigenvalue(a) >= floor) {
        return false;
    }
    a.diagonal().array() += floor;
    return true;
}

/// Inverse of a symmetric positive-definite matrix, or nullopt when the
/// Cholesky factorization fails.
inline std::optional<Matrix> try_spd_inverse(const Matrix& a) {
    if (a.size() == 0) {
        return Matrix(0, 0);
    }
    Eigen::LLT<Matrix> llt(symmetrize(a));
    if (llt.info() != Eigen::Success) {
        return std::nullopt;
    }
    Matrix inv = llt.solve(Matrix::Identity(a.rows(), a.cols()));
    return symmetrize(inv);
}

inline Matrix spd_inverse(const Matrix& a, const std::string& context) {
    auto inv = try_spd_inverse(a);
    if (!inv) {
        throw Error(ErrorCode::SingularBlock, "matrix is not positive definite: " + context);
    }
    return *inv;
}

/// Gaussian in moment form.
struct Gaussian {
    Vector mean;
    Matrix cov;
};

/// Gaussian in natural parameters: precision P and precision-mean h = P m.
/// A zero precision represents an uninformative factor.
struct NaturalGaussian {
    Matrix precision;
    Vector shift;

    static NaturalGaussian zero(Eigen::Index dim) {
        return {Matrix::Zero(dim, dim), Vector::Zero(dim)};
    }

    NaturalGaussian& operator+=(const NaturalGaussian& other) {
        precision += other.precision;
        shift += other.shift;
        return *this;
    }
};

inline NaturalGaussian operator+(NaturalGaussian a, const NaturalGaussian& b) { return a += b; }

inline NaturalGaussian operator-(const NaturalGaussian& a, const NaturalGaussian& b) {
    return {a.precision - b.precision, a.shift - b.shift};
}

inline NaturalGaussian to_natural(const Gaussian& g, const std::string& context) {
    Matrix p = spd_inverse(g.cov, context);
    Vector h = p * g.mean;
    return {std::move(p), std::move(h)};
}

inline Gaussian to_moments(const NaturalGaussian& g, const std::string& context) {
    Matrix cov = spd_inverse(g.precision, context);
    Vector mean = cov * g.shift;
    return {std::move(mean), std::move(cov)};
}

}  // namespace gcgm
