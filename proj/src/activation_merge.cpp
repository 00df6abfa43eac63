// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/activation_merge.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "l2smerge/errors.hpp"
#include "l2smerge/names.hpp"
#include "l2smerge/parallel.hpp"

using json = nlohmann::json;

namespace l2smerge {

namespace {

double score_of(const json& v, const std::string& where) {
    if (!v.is_number()) throw ValidationError(fmt::format("stats: {} must be a number", where));
    return v.get<double>();
}

void check_scores(const std::string& where, const auto& values) {
    bool positive = false;
    bool any = false;
    for (double x : values) {
        any = true;
        if (!std::isfinite(x)) throw ValidationError(fmt::format("stats: non-finite score in {}", where));
        if (x < 0.0) throw ValidationError(fmt::format("stats: negative score in {}", where));
        positive = positive || x > 0.0;
    }
    if (any && !positive) throw ValidationError(fmt::format("stats: {} has no positive score", where));
}

} // namespace

void CalibrationStats::validate() const {
    if (schema_version != current_schema) {
        throw ValidationError(fmt::format("stats: unsupported schema_version {}", schema_version));
    }
    std::vector<double> rows_all;
    for (const auto& [_, rows] : activation) rows_all.insert(rows_all.end(), rows.begin(), rows.end());
    check_scores("activation", rows_all);
    for (const auto& [model, layers] : layer_sensitivity) {
        std::vector<double> v;
        for (const auto& [_, s] : layers) v.push_back(s);
        check_scores(fmt::format("layer_sensitivity['{}']", model), v);
    }
    std::vector<double> t;
    for (const auto& [_, s] : task_sensitivity) t.push_back(s);
    check_scores("task_sensitivity", t);
}

CalibrationStats parse_stats(const std::string& json_text) {
    json doc;
    try {
        doc = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ValidationError(fmt::format("stats: invalid JSON: {}", e.what()));
    }
    if (!doc.is_object()) throw ValidationError("stats: top level must be an object");
    if (!doc.contains("schema_version") || !doc["schema_version"].is_number_integer()) {
        throw ValidationError("stats: schema_version is required");
    }
    CalibrationStats s;
    s.schema_version = doc["schema_version"].get<int>();

    if (doc.contains("meta") && doc["meta"].is_object()) {
        const auto& meta = doc["meta"];
        if (meta.contains("num_samples") && meta["num_samples"].is_number_integer()) s.num_samples = meta["num_samples"];
        if (meta.contains("dataset_id") && meta["dataset_id"].is_string()) s.dataset_id = meta["dataset_id"];
    }
    if (doc.contains("activation")) {
        if (!doc["activation"].is_object()) throw ValidationError("stats: activation must be an object");
        for (const auto& [name, rows] : doc["activation"].items()) {
            if (!rows.is_array()) throw ValidationError(fmt::format("stats: activation['{}'] must be an array", name));
            std::vector<float> v;
            v.reserve(rows.size());
            for (const auto& x : rows) v.push_back(static_cast<float>(score_of(x, fmt::format("activation['{}']", name))));
            s.activation.emplace(name, std::move(v));
        }
    }
    if (doc.contains("layer_sensitivity")) {
        if (!doc["layer_sensitivity"].is_object()) throw ValidationError("stats: layer_sensitivity must be an object");
        for (const auto& [model, layers] : doc["layer_sensitivity"].items()) {
            if (!layers.is_object()) {
                throw ValidationError(fmt::format("stats: layer_sensitivity['{}'] must be an object", model));
            }
            for (const auto& [layer, v] : layers.items()) {
                s.layer_sensitivity[model][layer] = score_of(v, fmt::format("layer_sensitivity['{}']['{}']", model, layer));
            }
        }
    }
    if (doc.contains("task_sensitivity")) {
        if (!doc["task_sensitivity"].is_object()) throw ValidationError("stats: task_sensitivity must be an object");
        for (const auto& [model, v] : doc["task_sensitivity"].items()) {
            s.task_sensitivity[model] = score_of(v, fmt::format("task_sensitivity['{}']", model));
        }
    }
    s.validate();
    return s;
}

CalibrationStats load_stats(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot read stats file '{}'", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_stats(ss.str());
}

std::string stats_to_json(const CalibrationStats& stats) {
    json doc = {{"schema_version", stats.schema_version},
                {"meta", {{"num_samples", stats.num_samples}, {"dataset_id", stats.dataset_id}}},
                {"activation", stats.activation},
                {"layer_sensitivity", stats.layer_sensitivity},
                {"task_sensitivity", stats.task_sensitivity}};
    return doc.dump(2);
}

void AimParams::validate() const {
    if (!(omega >= 0.0 && omega <= 1.0)) throw ValidationError(fmt::format("aim omega={} must lie in [0, 1]", omega));
}

void SensParams::validate() const {
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ValidationError(fmt::format("sens temperature T={} must be > 0", temperature));
    }
    if (!std::isfinite(alpha)) throw ValidationError("sens alpha must be finite");
}

TensorMap aim_adjust(const TensorMap& base, const TensorMap& merged, const CalibrationStats& stats,
                     const AimParams& params, AimPassthrough* passthrough) {
    params.validate();
    check_compatible(base, merged);
    auto names = merged.names();

    for (const auto& name : names) {
        auto it = stats.activation.find(name);
        if (it == stats.activation.end()) continue;
        const auto& t = merged.at(name);
        if (it->second.size() != t.rows()) {
            throw ValidationError(fmt::format("stats: row_importance for '{}' has length {} but the tensor has {} rows",
                                              name, it->second.size(), t.rows()));
        }
        for (float a : it->second) {
            if (!(a >= 0.0f)) throw ValidationError(fmt::format("stats: negative importance for '{}'", name));
        }
    }

    std::vector<Tensor> out(names.size());
    parallel_for(names.size(), [&](std::size_t i) {
        const auto& m = merged.at(names[i]);
        auto it = stats.activation.find(names[i]);
        if (it == stats.activation.end()) {
            out[i] = m;
            return;
        }
        const auto& b = base.at(names[i]);
        const auto& importance = it->second;
        const float peak = importance.empty() ? 0.0f : *std::max_element(importance.begin(), importance.end());
        Tensor t = m;
        const std::size_t cols = t.cols();
        for (std::size_t r = 0; r < t.rows(); ++r) {
            const double normalized = peak > 0.0f ? static_cast<double>(importance[r]) / peak : 0.0;
            const double keep = 1.0 - (1.0 - params.omega) * normalized;
            if (keep == 1.0) continue; // row stays as merged
            for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t j = r * cols + c;
                if (keep == 0.0) {
                    t.values[j] = b.values[j];
                } else {
                    const double bj = b.values[j];
                    t.values[j] = static_cast<float>(bj + keep * (static_cast<double>(m.values[j]) - bj));
                }
            }
        }
        out[i] = std::move(t);
    });

    if (passthrough) {
        passthrough->clear();
        for (const auto& name : names) {
            if (!stats.activation.count(name)) passthrough->push_back(name);
        }
    }
    TensorMap result;
    result.metadata = merged.metadata;
    for (std::size_t i = 0; i < names.size(); ++i) result.insert(names[i], std::move(out[i]));
    return result;
}

Coefficients sens_coefficients(const CalibrationStats& stats, const SensParams& params,
                               const std::vector<std::string>& model_ids, const std::vector<std::string>& layer_ids) {
    params.validate();
    if (model_ids.empty()) throw ValidationError("sens: no models");
    if (layer_ids.empty()) throw ValidationError("sens: no layers");

    double task_sum = 0.0;
    for (const auto& id : model_ids) {
        auto it = stats.task_sensitivity.find(id);
        if (it == stats.task_sensitivity.end()) {
            throw ValidationError(fmt::format("stats: task_sensitivity missing for model '{}'", id));
        }
        task_sum += it->second;
    }
    const double task_mean = task_sum / static_cast<double>(model_ids.size());
    if (!(task_mean > 0.0)) throw ValidationError("stats: task sensitivities of the merged models are all zero");
    // Equal task scores must scale by exactly 1; the rounded mean need not equal the shared value.
    const bool task_uniform = std::all_of(model_ids.begin(), model_ids.end(), [&](const std::string& id) {
        return stats.task_sensitivity.at(id) == stats.task_sensitivity.at(model_ids.front());
    });

    Coefficients coeffs;
    for (const auto& id : model_ids) {
        auto lt = stats.layer_sensitivity.find(id);
        if (lt == stats.layer_sensitivity.end()) {
            throw ValidationError(fmt::format("stats: layer_sensitivity missing for model '{}'", id));
        }
        std::vector<double> scores;
        for (const auto& layer : layer_ids) {
            auto st = lt->second.find(layer);
            if (st == lt->second.end()) {
                throw ValidationError(fmt::format("stats: layer_sensitivity missing for model '{}' layer '{}'", id, layer));
            }
            scores.push_back(st->second);
        }
        const double peak = *std::max_element(scores.begin(), scores.end());
        if (!(peak > 0.0)) throw ValidationError(fmt::format("stats: layer sensitivities of model '{}' are all zero", id));

        std::vector<double> logits(scores.size());
        for (std::size_t l = 0; l < scores.size(); ++l) logits[l] = (scores[l] / peak) / params.temperature;
        const double top = *std::max_element(logits.begin(), logits.end());
        std::vector<double> weights(scores.size());
        double weight_sum = 0.0;
        for (std::size_t l = 0; l < scores.size(); ++l) {
            weights[l] = std::exp(logits[l] - top);
            weight_sum += weights[l];
        }
        // L * softmax_l == weight_l / mean(weight); this form is exactly 1 for uniform scores.
        const double weight_mean = weight_sum / static_cast<double>(weights.size());
        const double task_scale = task_uniform ? 1.0 : stats.task_sensitivity.at(id) / task_mean;
        for (std::size_t l = 0; l < layer_ids.size(); ++l) {
            coeffs.per_layer[id][layer_ids[l]] = params.alpha * ((weights[l] / weight_mean) * task_scale);
        }
    }
    return coeffs;
}

std::vector<std::string> layer_ids_of(const TensorMap& tensors, const LayerResolver& layers,
                                      const std::vector<std::string>& skip) {
    std::set<std::string> ids;
    for (const auto& [name, _] : tensors) {
        if (!matches_any(skip, name)) ids.insert(layers.layer_of(name));
    }
    return {ids.begin(), ids.end()};
}

TensorMap sens_merge(const TensorMap& base, std::span<const TaskVector> vectors, const CalibrationStats& stats,
                     const SensParams& params, const LayerResolver& layers, Coefficients* used) {
    std::vector<std::string> ids;
    std::set<std::string> layer_set;
    for (const auto* v : sorted_by_model(vectors)) {
        ids.push_back(v->model_id);
        for (const auto& [name, _] : v->deltas) layer_set.insert(layers.layer_of(name));
    }
    auto coeffs = sens_coefficients(stats, params, ids, {layer_set.begin(), layer_set.end()});
    coeffs.layers = layers;
    auto merged = apply_task_vectors(base, vectors, coeffs);
    if (used) *used = std::move(coeffs);
    return merged;
}

} // namespace l2smerge
