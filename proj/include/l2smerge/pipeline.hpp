// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "l2smerge/activation_merge.hpp"
#include "l2smerge/lowrank.hpp"
#include "l2smerge/merge_core.hpp"
#include "l2smerge/recipe.hpp"
#include "l2smerge/tensor_store.hpp"

namespace l2smerge {

std::string_view tool_version();

struct InputRecord {
    std::string role; ///< "base" or "model"
    std::string id;
    std::string path;
    std::string manifest_fingerprint;
    std::string content_fingerprint;
};

/// Provenance of one merge. Every output tensor has a `trace` entry.
struct MergeManifest {
    std::string recipe_json;
    std::vector<InputRecord> inputs;
    std::map<std::string, std::string> trace;
    std::string output_fingerprint; ///< content fingerprint after dtype narrowing
    std::vector<std::string> files;
    std::optional<DareCounts> dare;
    std::optional<LoreTrace> lore;
    std::map<std::string, std::map<std::string, double>> sens_coefficients;
    std::vector<std::string> aim_passthrough;
    std::vector<std::string> notes;
    double wall_seconds = 0.0;

    std::string to_json(bool with_wall_time = true) const;
};

/// Inputs of a merge already in memory, keyed like the recipe.
struct MergeInputs {
    std::optional<TensorMap> base;
    std::vector<std::pair<std::string, TensorMap>> models; ///< (model id, weights), recipe order
    std::optional<CalibrationStats> stats;
};

MergeInputs load_inputs(const MergeRecipe& recipe);

/// Runs the recipe's method over loaded inputs and fills the tensor trace and
/// method-specific sections of `manifest`. Output values are FP32.
TensorMap merge_tensors(const MergeRecipe& recipe, const MergeInputs& inputs, MergeManifest* manifest = nullptr);

/// Rounds every tensor onto the grid of its output dtype, as writing and
/// reloading would.
void apply_dtype_policy(TensorMap& tensors, const DTypePolicy& policy);

struct MergeOptions {
    bool overwrite = false;
};

/// Loads, merges and writes the checkpoint, `merge_manifest.json` and
/// `recipe.resolved.toml` into the recipe's output directory. The directory is
/// assembled under a temporary name and renamed into place; failures remove it.
MergeManifest run_merge(const MergeRecipe& recipe, const MergeOptions& options = {});

struct TensorDiff {
    std::string name;
    std::size_t numel = 0;
    double mean_abs = 0.0;
    double max_abs = 0.0;
};

struct DiffReport {
    std::vector<TensorDiff> tensors; ///< lexicographic by name
    std::vector<double> edges;       ///< histogram bin i counts |a-b| in [edges[i], edges[i+1])
    std::vector<std::uint64_t> counts;
    std::uint64_t elements = 0;
    double mean_abs = 0.0;
    double max_abs = 0.0;
    double threshold = 0.002;
    double fraction_above_threshold = 0.0; ///< share of elements with |a-b| > threshold
    std::vector<TensorDiff> top;           ///< largest mean shift first

    std::string to_json() const;
    std::string to_text() const;
};

/// Elementwise |a - b| statistics in double. Manifests must match.
DiffReport diff_checkpoints(const TensorMap& a, const TensorMap& b, std::size_t top_n = 10);

/// Human-readable listing of a checkpoint, or statistics of one tensor.
std::string inspect_checkpoint(const std::filesystem::path& path, const std::optional<std::string>& tensor = std::nullopt);

} // namespace l2smerge
