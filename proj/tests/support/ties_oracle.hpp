// SPDX-License-Identifier: Apache-2.0
// Per-element brute-force TIES: full sort for trimming, explicit loops for
// sign election and the disjoint mean.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "l2smerge/task_vectors.hpp"
#include "l2smerge/tensor_store.hpp"

namespace l2smerge::testing {

/// Zeroes floor(k*n) entries, smallest magnitude first; among equal
/// magnitudes the higher index goes first.
inline std::vector<float> sort_trim(const std::vector<float>& d, double k) {
    const double x = k * static_cast<double>(d.size());
    const double r = std::round(x);
    const std::size_t m =
        std::abs(x - r) <= 1e-9 * std::max(1.0, x) ? static_cast<std::size_t>(r) : static_cast<std::size_t>(std::floor(x));
    std::vector<std::size_t> idx(d.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const float ma = std::abs(d[a]), mb = std::abs(d[b]);
        if (ma != mb) return ma < mb;
        return a > b;
    });
    std::vector<float> out = d;
    for (std::size_t i = 0; i < m; ++i) out[idx[i]] = 0.0f;
    return out;
}

inline TensorMap ties_oracle(const TensorMap& base, const std::vector<TaskVector>& vectors, double k, double alpha) {
    std::vector<const TaskVector*> order;
    for (const auto& v : vectors) order.push_back(&v);
    std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->model_id < b->model_id; });

    TensorMap out;
    for (const auto& [name, b] : base) {
        Tensor t = b;
        std::vector<std::vector<float>> trimmed;
        for (const auto* v : order) {
            auto it = v->deltas.find(name);
            if (it != v->deltas.end()) trimmed.push_back(sort_trim(it->second.values, k));
        }
        for (std::size_t j = 0; j < t.values.size() && !trimmed.empty(); ++j) {
            double total = 0.0;
            for (const auto& d : trimmed) total += d[j];
            if (total == 0.0) continue;
            const bool positive = total > 0.0;
            double sum = 0.0;
            int count = 0;
            for (const auto& d : trimmed) {
                if (d[j] == 0.0f) continue;
                if ((d[j] > 0.0f) != positive) continue;
                sum += d[j];
                ++count;
            }
            if (count == 0) continue;
            t.values[j] = static_cast<float>(static_cast<double>(b.values[j]) + alpha * (sum / count));
        }
        out.insert(name, std::move(t));
    }
    return out;
}

} // namespace l2smerge::testing
