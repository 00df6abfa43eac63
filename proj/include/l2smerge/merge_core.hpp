// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "l2smerge/task_vectors.hpp"
#include "l2smerge/tensor_store.hpp"

namespace l2smerge {

struct TiesParams {
    double trim_ratio = 0.8; ///< fraction of smallest-magnitude entries zeroed, in [0, 1)
    double alpha = 1.0;      ///< scale on the merged delta

    void validate() const;
};

struct DareParams {
    double drop_rate = 0.3; ///< in [0, 1)
    std::uint64_t seed = 0;

    void validate() const;
};

struct DareCounts {
    std::uint64_t kept = 0;
    std::uint64_t dropped = 0;
};

/// Elementwise mean of >= 2 models with identical manifests (double accumulation).
TensorMap average_merge(std::span<const TensorMap> models);

/// Number of entries trim() zeroes for a tensor of n elements.
std::size_t trim_count(std::size_t n, double trim_ratio);

/// Zeroes the floor(k*n) smallest-magnitude entries. Among equal magnitudes
/// the higher flat index is zeroed first, so lower indices survive.
std::vector<float> trim(std::span<const float> delta, double trim_ratio);

/// Per element sign of the (double) sum across deltas: -1, 0 or +1.
std::vector<std::int8_t> elect_sign(std::span<const std::span<const float>> trimmed);

/// TIES: trim each vector per tensor, elect signs, average the entries that
/// agree with the elected sign (zeros excluded), then base + alpha * mean.
TensorMap ties_merge(const TensorMap& base, std::span<const TaskVector> vectors, const TiesParams& params);

/// SplitMix64 keep-mask stream for one tensor. Entry i is kept iff the
/// (i+1)-th output u satisfies (u >> 11) * 2^-53 >= p. The stream is seeded
/// with seed XOR FNV-1a-64(tensor name).
class DareStream {
public:
    DareStream(std::uint64_t seed, const std::string& tensor_name);
    std::uint64_t next();
    /// Output number `index` (0-based) without advancing.
    std::uint64_t at(std::uint64_t index) const;

    static bool keep(std::uint64_t draw, double drop_rate) {
        return static_cast<double>(draw >> 11) * 0x1.0p-53 >= drop_rate;
    }

private:
    std::uint64_t origin_;
    std::uint64_t state_;
};

/// Randomly zero entries with probability p, rescale survivors by 1/(1-p).
TaskVector dare_drop(const TaskVector& vector, const DareParams& params, DareCounts* counts = nullptr);

/// Seed used for one model inside a DARE composition: seed XOR FNV-1a-64(model_id),
/// so every model draws an independent mask.
std::uint64_t dare_seed_for(std::uint64_t seed, const std::string& model_id);

/// dare_drop on every vector (per-model seeds), then task arithmetic.
TensorMap dare_ta(const TensorMap& base, std::span<const TaskVector> vectors, const DareParams& dare,
                  const Coefficients& coeffs, DareCounts* counts = nullptr);

/// dare_drop on every vector (per-model seeds), then TIES.
TensorMap dare_ties(const TensorMap& base, std::span<const TaskVector> vectors, const DareParams& dare,
                    const TiesParams& ties, DareCounts* counts = nullptr);

} // namespace l2smerge
