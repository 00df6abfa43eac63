// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/task_vectors.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include <fmt/core.h>

#include "l2smerge/errors.hpp"
#include "l2smerge/names.hpp"
#include "l2smerge/parallel.hpp"

namespace l2smerge {

LayerResolver::LayerResolver(const std::string& pattern) : pattern_(pattern), custom_(!pattern.empty()) {
    if (!custom_) return;
    try {
        regex_ = std::regex(pattern);
    } catch (const std::regex_error& e) {
        throw ValidationError(fmt::format("invalid layer pattern '{}': {}", pattern, e.what()));
    }
    if (regex_.mark_count() < 1) throw ValidationError(fmt::format("layer pattern '{}' needs a capture group", pattern));
}

std::string LayerResolver::layer_of(const std::string& tensor_name) const {
    if (custom_) {
        std::smatch m;
        if (std::regex_search(tensor_name, m, regex_) && m[1].matched) return m[1].str();
        return global_layer;
    }
    std::size_t start = 0;
    while (start <= tensor_name.size()) {
        std::size_t stop = tensor_name.find('.', start);
        if (stop == std::string::npos) stop = tensor_name.size();
        if (stop > start && std::all_of(tensor_name.begin() + start, tensor_name.begin() + stop,
                                        [](unsigned char c) { return std::isdigit(c); })) {
            return tensor_name.substr(start, stop - start);
        }
        start = stop + 1;
    }
    return global_layer;
}

Coefficients Coefficients::uniform(const std::vector<std::string>& model_ids, double lambda) {
    Coefficients c;
    for (const auto& id : model_ids) c.per_model[id] = lambda;
    return c;
}

double Coefficients::lambda_for(const std::string& model_id, const std::string& tensor_name) const {
    for (const auto& [pattern, value] : name_overrides) {
        if (glob_match(pattern, tensor_name)) return value;
    }
    if (auto it = per_layer.find(model_id); it != per_layer.end()) {
        auto layer = layers.layer_of(tensor_name);
        auto lt = it->second.find(layer);
        if (lt == it->second.end()) {
            throw ValidationError(
                fmt::format("missing coefficient for model '{}' layer '{}' (tensor '{}')", model_id, layer, tensor_name));
        }
        return lt->second;
    }
    auto it = per_model.find(model_id);
    if (it == per_model.end()) throw ValidationError(fmt::format("missing coefficient for model '{}'", model_id));
    return it->second;
}

void check_compatible(const TensorMap& reference, const TensorMap& other, const std::vector<std::string>& skip) {
    for (const auto& [name, t] : reference) {
        if (matches_any(skip, name)) continue;
        if (!other.contains(name)) {
            throw ValidationError(fmt::format("manifest mismatch: tensor '{}' missing", name));
        }
        if (other.at(name).shape != t.shape) {
            throw ValidationError(fmt::format("manifest mismatch: shape of tensor '{}' differs", name));
        }
    }
    for (const auto& [name, _] : other) {
        if (!reference.contains(name) && !matches_any(skip, name)) {
            throw ValidationError(fmt::format("manifest mismatch: unexpected tensor '{}'", name));
        }
    }
}

TaskVector compute_task_vector(const TensorMap& model, const TensorMap& base, std::string model_id,
                               const std::vector<std::string>& skip) {
    check_compatible(base, model, skip);
    TaskVector tv;
    tv.model_id = std::move(model_id);
    tv.base_fingerprint = manifest_fingerprint(base);

    std::vector<std::string> names;
    for (const auto& [name, _] : base) {
        if (!matches_any(skip, name)) names.push_back(name);
    }
    std::vector<Tensor> deltas(names.size());
    parallel_for(names.size(), [&](std::size_t i) {
        const auto& b = base.at(names[i]);
        const auto& m = model.at(names[i]);
        Tensor d;
        d.shape = b.shape;
        d.source_dtype = DType::f32;
        d.values.resize(b.numel());
        for (std::size_t j = 0; j < d.values.size(); ++j) d.values[j] = m.values[j] - b.values[j];
        deltas[i] = std::move(d);
    });
    for (std::size_t i = 0; i < names.size(); ++i) tv.deltas.emplace(names[i], std::move(deltas[i]));
    return tv;
}

std::vector<const TaskVector*> sorted_by_model(std::span<const TaskVector> vectors) {
    std::vector<const TaskVector*> out;
    for (const auto& v : vectors) out.push_back(&v);
    std::sort(out.begin(), out.end(), [](auto* a, auto* b) { return a->model_id < b->model_id; });
    for (std::size_t i = 1; i < out.size(); ++i) {
        if (out[i]->model_id == out[i - 1]->model_id) {
            throw ValidationError(fmt::format("duplicate model id '{}'", out[i]->model_id));
        }
    }
    return out;
}

void check_vectors(const TensorMap& base, std::span<const TaskVector> vectors) {
    const auto fp = manifest_fingerprint(base);
    for (const auto& v : vectors) {
        if (v.base_fingerprint != fp) {
            throw ValidationError(fmt::format("task vector '{}' was computed against a different base", v.model_id));
        }
        for (const auto& [name, d] : v.deltas) {
            if (!base.contains(name) || base.at(name).shape != d.shape) {
                throw ValidationError(fmt::format("task vector '{}': tensor '{}' does not match the base", v.model_id, name));
            }
        }
    }
}

TensorMap apply_task_vectors(const TensorMap& base, std::span<const TaskVector> vectors, const Coefficients& coeffs) {
    check_vectors(base, vectors);
    auto order = sorted_by_model(vectors);
    auto names = base.names();

    // Resolve every coefficient up front so a missing one fails before any work.
    std::vector<std::vector<double>> lambdas(names.size(), std::vector<double>(order.size(), 0.0));
    for (std::size_t i = 0; i < names.size(); ++i) {
        for (std::size_t k = 0; k < order.size(); ++k) {
            if (!order[k]->deltas.count(names[i])) continue;
            double l = coeffs.lambda_for(order[k]->model_id, names[i]);
            if (!std::isfinite(l)) {
                throw ValidationError(fmt::format("non-finite coefficient for model '{}'", order[k]->model_id));
            }
            lambdas[i][k] = l;
        }
    }

    std::vector<Tensor> out(names.size());
    parallel_for(names.size(), [&](std::size_t i) {
        const auto& b = base.at(names[i]);
        Tensor t = b;
        std::vector<std::pair<const float*, double>> terms;
        for (std::size_t k = 0; k < order.size(); ++k) {
            auto it = order[k]->deltas.find(names[i]);
            if (it != order[k]->deltas.end()) terms.emplace_back(it->second.values.data(), lambdas[i][k]);
        }
        if (!terms.empty()) {
            for (std::size_t j = 0; j < t.values.size(); ++j) {
                double acc = 0.0;
                for (const auto& [d, l] : terms) acc += l * static_cast<double>(d[j]);
                // acc == 0 keeps the base bits (including -0.0).
                if (acc != 0.0) t.values[j] = static_cast<float>(static_cast<double>(b.values[j]) + acc);
            }
        }
        out[i] = std::move(t);
    });

    TensorMap merged;
    merged.metadata = base.metadata;
    for (std::size_t i = 0; i < names.size(); ++i) merged.insert(names[i], std::move(out[i]));
    return merged;
}

} // namespace l2smerge
