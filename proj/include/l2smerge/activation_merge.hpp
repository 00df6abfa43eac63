// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "l2smerge/task_vectors.hpp"
#include "l2smerge/tensor_store.hpp"

namespace l2smerge {

/// Activation importance and sensitivity scores produced by the calibration extractor.
///
/// JSON layout (schema_version 1; unknown fields are ignored):
///
///     {
///       "schema_version": 1,
///       "meta": {"num_samples": 100, "dataset_id": "s1K"},
///       "activation": {"<tensor name>": [row importance, ...]},
///       "layer_sensitivity": {"<model id>": {"<layer id>": score, ...}},
///       "task_sensitivity": {"<model id>": score}
///     }
struct CalibrationStats {
    static constexpr int current_schema = 1;

    int schema_version = current_schema;
    std::map<std::string, std::vector<float>> activation;
    std::map<std::string, std::map<std::string, double>> layer_sensitivity;
    std::map<std::string, double> task_sensitivity;
    long num_samples = 0;
    std::string dataset_id;

    /// Finite, non-negative scores and at least one positive score per non-empty map.
    void validate() const;
};

CalibrationStats parse_stats(const std::string& json_text);
CalibrationStats load_stats(const std::filesystem::path& path);
std::string stats_to_json(const CalibrationStats& stats);

struct AimParams {
    double omega = 0.4; ///< balance factor in [0, 1]; 1 disables protection

    void validate() const;
};

struct SensParams {
    double alpha = 0.7;       ///< mean target coefficient
    double temperature = 2.0; ///< > 0

    void validate() const;
};

/// Names of tensors aim_adjust left untouched because the stats do not cover them.
using AimPassthrough = std::vector<std::string>;

/// Pulls each merged row back toward the base in proportion to its importance:
/// out_i = base_i + (1 - (1 - omega) * a_i / max a) * (merged_i - base_i).
/// Tensors without importance scores pass through from `merged`.
TensorMap aim_adjust(const TensorMap& base, const TensorMap& merged, const CalibrationStats& stats,
                     const AimParams& params, AimPassthrough* passthrough = nullptr);

/// Layer-wise coefficients lambda_{k,l} = alpha * c_{k,l} with
/// c_{k,l} = softmax_T(scores of model k over layers)_l * L * g_k, where each
/// model's scores are first divided by their maximum and g_k is the task
/// sensitivity normalized to mean 1 across models.
Coefficients sens_coefficients(const CalibrationStats& stats, const SensParams& params,
                               const std::vector<std::string>& model_ids, const std::vector<std::string>& layer_ids);

/// Layer ids of every tensor in `tensors` under `layers`, sorted.
std::vector<std::string> layer_ids_of(const TensorMap& tensors, const LayerResolver& layers,
                                      const std::vector<std::string>& skip = {});

/// Task arithmetic with sens_coefficients.
TensorMap sens_merge(const TensorMap& base, std::span<const TaskVector> vectors, const CalibrationStats& stats,
                     const SensParams& params, const LayerResolver& layers = {},
                     Coefficients* used = nullptr);

} // namespace l2smerge
