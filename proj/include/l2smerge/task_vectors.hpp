// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <regex>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "l2smerge/tensor_store.hpp"

namespace l2smerge {

/// Per-tensor deltas of one fine-tuned model against a base.
/// Skip-listed tensors have no delta and are copied from the base on apply.
struct TaskVector {
    std::string model_id;
    std::uint64_t base_fingerprint = 0;
    std::map<std::string, Tensor> deltas;
};

/// Maps a tensor name to its layer id. The default takes the first path
/// segment that is all digits ("model.layers.12.mlp.up_proj.weight" -> "12");
/// a custom regex uses its first capture group. Unmatched names land in "global".
class LayerResolver {
public:
    static constexpr const char* global_layer = "global";

    LayerResolver() = default;
    explicit LayerResolver(const std::string& pattern);

    std::string layer_of(const std::string& tensor_name) const;
    const std::string& pattern() const { return pattern_; }

private:
    std::string pattern_;
    std::regex regex_;
    bool custom_ = false;
};

/// Merge coefficients. Lookup order for (model, tensor): a matching name
/// override, then the model's per-layer table (if it has one), then the
/// model's scalar lambda.
struct Coefficients {
    std::map<std::string, double> per_model;
    std::map<std::string, std::map<std::string, double>> per_layer;
    std::vector<std::pair<std::string, double>> name_overrides; ///< glob -> lambda for every model
    LayerResolver layers;

    static Coefficients uniform(const std::vector<std::string>& model_ids, double lambda);

    /// Throws ValidationError when no coefficient covers the pair.
    double lambda_for(const std::string& model_id, const std::string& tensor_name) const;
};

/// Throws ValidationError naming the first tensor whose presence or shape differs.
/// Names matching `skip` may be missing from `other`.
void check_compatible(const TensorMap& reference, const TensorMap& other, const std::vector<std::string>& skip = {});

TaskVector compute_task_vector(const TensorMap& model, const TensorMap& base, std::string model_id,
                               const std::vector<std::string>& skip = {});

/// base + sum_k lambda_k * delta_k, accumulated in double in sorted model_id order.
TensorMap apply_task_vectors(const TensorMap& base, std::span<const TaskVector> vectors, const Coefficients& coeffs);

/// Vectors sorted by model_id; throws on duplicates.
std::vector<const TaskVector*> sorted_by_model(std::span<const TaskVector> vectors);

/// Validates fingerprints and name sets against the base.
void check_vectors(const TensorMap& base, std::span<const TaskVector> vectors);

} // namespace l2smerge
