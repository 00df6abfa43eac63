// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "l2smerge/activation_merge.hpp"
#include "l2smerge/lowrank.hpp"
#include "l2smerge/merge_core.hpp"
#include "l2smerge/tensor_store.hpp"

namespace l2smerge {

enum class Method { average, task_arithmetic, ties, dare_ta, dare_ties, twin, lore, aim_post, sens };

std::string_view method_name(Method m);
std::optional<Method> parse_method(std::string_view name);

/// Model sizes with published default hyperparameters.
enum class Scale { b1_5, b7, b14, b32 };

std::string_view scale_name(Scale s);
std::optional<Scale> parse_scale(std::string_view name);
/// Nearest scale on a log axis to a parameter count.
Scale scale_for_parameter_count(std::size_t params);

/// Published per-scale hyperparameters; absent values have no published default.
struct ScaleDefaults {
    double ta_alpha;
    double ties_k;
    double ties_alpha;
    std::optional<double> dare_p;
    std::optional<double> aim_omega;
    std::optional<double> sens_alpha;
    std::optional<double> sens_temperature;
};

const ScaleDefaults& defaults_for(Scale s);

struct ModelRef {
    std::string id;
    std::filesystem::path path;
    std::optional<double> lambda;
};

/// A validated merge description with every hyperparameter resolved.
struct MergeRecipe {
    Method method = Method::task_arithmetic;
    std::optional<ModelRef> base;
    std::vector<ModelRef> models;

    Scale scale = Scale::b7;
    std::string scale_source; ///< "recipe", "override", "detected"

    double alpha = 0.7; ///< TA lambda, TIES alpha or Sens alpha depending on method
    TiesParams ties;
    bool trim_is_keep = false;
    DareParams dare;
    AimParams aim;
    SensParams sens;
    LoreParams lore;
    RankSpec rank;
    SvdOptions svd;
    Method inner = Method::ties; ///< merge that aim_post adjusts

    DTypePolicy dtype_policy;
    std::string dtype_default = "bf16"; ///< "bf16", "fp32" or "source"
    std::optional<std::filesystem::path> stats_path;
    std::filesystem::path output_path;
    std::vector<std::string> skip_patterns;
    std::string layer_pattern;
    std::vector<std::pair<std::string, double>> lambda_overrides;
    std::uint64_t max_shard_bytes = 0;

    /// "field = value (source)" for every default filled in.
    std::vector<std::string> defaults_applied;

    /// Task-arithmetic coefficients for the expert models.
    Coefficients coefficients() const;
};

struct RecipeOverrides {
    std::optional<Scale> scale;
    std::optional<std::filesystem::path> output;
    std::optional<bool> trim_is_keep;
};

/// Parses and validates TOML recipe text. Relative paths resolve against
/// `base_dir`. Errors are ValidationError with a field path.
MergeRecipe parse_recipe_text(const std::string& toml_text, const std::filesystem::path& base_dir = {},
                              const RecipeOverrides& overrides = {});

MergeRecipe parse_recipe(const std::filesystem::path& path, const RecipeOverrides& overrides = {});

/// TOML that parses back to the same resolved recipe (paths absolute).
std::string recipe_to_toml(const MergeRecipe& recipe);

/// Echo of the resolved recipe for the manifest.
std::string recipe_to_json(const MergeRecipe& recipe);

/// `key=start:stop:step`, stop inclusive.
struct SweepSpec {
    std::string key;
    double start = 0.0, stop = 0.0, step = 0.0;

    static SweepSpec parse(std::string_view text);
    std::vector<double> values() const;
};

/// One TOML recipe per grid point, each with `params.<key>` set and the output
/// suffixed with the key and value. Returns (suffix, toml text) pairs.
std::vector<std::pair<std::string, std::string>> expand_sweep(const std::string& toml_text, const SweepSpec& sweep);

} // namespace l2smerge
