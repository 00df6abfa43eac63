// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "l2smerge/task_vectors.hpp"
#include "l2smerge/tensor_store.hpp"

namespace l2smerge {

/// Row-major dense double matrix.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

    static Matrix from_tensor(const Tensor& t);
    static Matrix identity(std::size_t n);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    Matrix transposed() const;
    double frobenius_sq() const;
    /// Writes values into an FP32 tensor of the given shape.
    Tensor to_tensor(const Shape& shape, DType source = DType::f32) const;

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// aᵀ · b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

/// Thin SVD factors with strictly positive, non-increasing singular values.
struct SvdFactors {
    Matrix u; ///< m x r, orthonormal columns
    std::vector<double> s;
    Matrix v; ///< n x r, orthonormal columns

    std::size_t rank() const { return s.size(); }
    /// U diag(s) Vᵀ using the leading `r` components (all when r exceeds rank).
    Matrix reconstruct(std::optional<std::size_t> r = std::nullopt) const;
};

struct SvdOptions {
    /// Matrices whose smaller side exceeds this use the randomized path.
    std::size_t dense_cap = 512;
    std::size_t oversample = 8;
    std::size_t power_iters = 2;
    /// Components computed by the randomized path when no rank is given (svt, energy mode).
    std::size_t randomized_rank = 256;
    std::uint64_t seed = 0x5eedull;
};

/// Full SVD by one-sided Jacobi in double. Numerically-zero singular values
/// (below max(m,n) * eps * sigma_max) are dropped.
SvdFactors svd_jacobi(const Matrix& a);

/// Randomized range finder + Jacobi on the projected matrix.
SvdFactors svd_randomized(const Matrix& a, std::size_t rank, const SvdOptions& opts = {});

/// Best rank-min(r, rank(A)) factors. Dense when small, randomized otherwise.
SvdFactors truncated_svd(const Matrix& a, std::size_t rank, const SvdOptions& opts = {});

/// All significant factors: exact for dense-sized inputs, otherwise the
/// leading `randomized_rank` components.
SvdFactors spectral_factors(const Matrix& a, const SvdOptions& opts = {});

struct SvtResult {
    Matrix value;
    double nuclear_norm = 0.0; ///< nuclear norm of `value`
};

/// U max(S - tau, 0) Vᵀ: the proximal operator of tau * nuclear norm.
/// tau == 0 returns the input unchanged.
SvtResult svt(const Matrix& a, double tau, const SvdOptions& opts = {});

/// Smallest r whose leading energy sum_{i<=r} s_i^2 reaches `fraction` of the total.
std::size_t rank_for_energy(std::span<const double> singular_values, double fraction);

/// Fixed rank or energy fraction, exactly one set.
struct RankSpec {
    std::optional<std::size_t> rank;
    std::optional<double> energy;

    void validate() const;
};

/// Per-tensor note of what truncation did, keyed by tensor name.
using LowRankTrace = std::map<std::string, std::string>;

/// Replaces every 2-D delta by its truncation; other deltas pass through.
TaskVector truncate_task_vector(const TaskVector& vector, const RankSpec& spec, const SvdOptions& opts = {},
                                LowRankTrace* trace = nullptr);

/// SVD part of Twin-Merging: truncate each task vector, then task arithmetic.
TensorMap twin_merge(const TensorMap& base, std::span<const TaskVector> vectors, const RankSpec& spec,
                     const Coefficients& coeffs, const SvdOptions& opts = {}, LowRankTrace* trace = nullptr);

struct LoreParams {
    double tau = 0.05;        ///< threshold; a fraction of sigma_max when tau_relative
    bool tau_relative = true; ///< tau scaled per tensor and model by sigma_max(theta_k - mean)
    int max_iters = 20;
    double tol = 1e-6; ///< relative objective decrease that stops the sweeps
    double lambda = 1.0;

    void validate() const;
};

struct LoreTrace {
    std::vector<double> objective; ///< J before the first sweep, then after each sweep
    int sweeps = 0;
    bool converged = false;
};

/// Coordinate descent on
///   J = 1/2 sum_k ||theta_k - base_hat - delta_k||_F^2 + sum_k tau_k ||delta_k||_*
/// alternating base_hat <- mean_k(theta_k - delta_k) and delta_k <- svt(theta_k - base_hat, tau_k)
/// (unpenalized difference for non-matrix tensors). Returns base_hat + lambda * sum_k delta_k.
TensorMap lore_merge(std::span<const TensorMap> models, const LoreParams& params, const SvdOptions& opts = {},
                     LoreTrace* trace = nullptr);

} // namespace l2smerge
