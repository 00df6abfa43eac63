// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/merge_core.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

#include <fmt/core.h>

#include "l2smerge/errors.hpp"
#include "l2smerge/names.hpp"
#include "l2smerge/parallel.hpp"

namespace l2smerge {

namespace {

constexpr std::uint64_t splitmix_gamma = 0x9E3779B97F4A7C15ull;

std::uint64_t splitmix_mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

TensorMap assemble(const TensorMap& like, const std::vector<std::string>& names, std::vector<Tensor>& tensors) {
    TensorMap out;
    out.metadata = like.metadata;
    for (std::size_t i = 0; i < names.size(); ++i) out.insert(names[i], std::move(tensors[i]));
    return out;
}

} // namespace

void TiesParams::validate() const {
    if (!(trim_ratio >= 0.0 && trim_ratio < 1.0)) {
        throw ValidationError(fmt::format("ties trim ratio k={} must lie in [0, 1)", trim_ratio));
    }
    if (!std::isfinite(alpha)) throw ValidationError("ties alpha must be finite");
}

void DareParams::validate() const {
    if (!(drop_rate >= 0.0 && drop_rate < 1.0)) {
        throw ValidationError(fmt::format("dare drop rate p={} must lie in [0, 1)", drop_rate));
    }
}

TensorMap average_merge(std::span<const TensorMap> models) {
    if (models.size() < 2) throw ValidationError("average merge needs at least two models");
    for (std::size_t k = 1; k < models.size(); ++k) check_compatible(models[0], models[k]);

    auto names = models[0].names();
    std::vector<Tensor> out(names.size());
    const double count = static_cast<double>(models.size());
    parallel_for(names.size(), [&](std::size_t i) {
        Tensor t = models[0].at(names[i]);
        std::vector<const float*> src;
        for (const auto& m : models) src.push_back(m.at(names[i]).values.data());
        for (std::size_t j = 0; j < t.values.size(); ++j) {
            double sum = 0.0;
            for (const float* s : src) sum += s[j];
            t.values[j] = static_cast<float>(sum / count);
        }
        out[i] = std::move(t);
    });
    return assemble(models[0], names, out);
}

std::size_t trim_count(std::size_t n, double trim_ratio) {
    const double x = trim_ratio * static_cast<double>(n);
    // 0.29 * 100 evaluates to 28.999999999999996; snap products within
    // rounding distance of an integer.
    const double r = std::round(x);
    if (std::abs(x - r) <= 1e-9 * std::max(1.0, x)) return static_cast<std::size_t>(r);
    return static_cast<std::size_t>(std::floor(x));
}

std::vector<float> trim(std::span<const float> delta, double trim_ratio) {
    if (!(trim_ratio >= 0.0 && trim_ratio < 1.0)) {
        throw ValidationError(fmt::format("trim ratio {} must lie in [0, 1)", trim_ratio));
    }
    std::vector<float> out(delta.begin(), delta.end());
    const std::size_t m = trim_count(delta.size(), trim_ratio);
    if (m == 0) return out;

    std::vector<float> mags(delta.size());
    for (std::size_t i = 0; i < delta.size(); ++i) {
        if (std::isnan(delta[i])) throw NumericalError("NaN in task vector during trim");
        mags[i] = std::abs(delta[i]);
    }
    std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(m - 1), mags.end());
    const float threshold = mags[m - 1];

    std::size_t below = 0;
    for (std::size_t i = 0; i < delta.size(); ++i) {
        if (std::abs(delta[i]) < threshold) {
            out[i] = 0.0f;
            ++below;
        }
    }
    std::size_t at_threshold = m - below;
    for (std::size_t i = delta.size(); i-- > 0 && at_threshold > 0;) {
        if (std::abs(delta[i]) == threshold) {
            out[i] = 0.0f;
            --at_threshold;
        }
    }
    return out;
}

std::vector<std::int8_t> elect_sign(std::span<const std::span<const float>> trimmed) {
    if (trimmed.empty()) return {};
    const std::size_t n = trimmed[0].size();
    for (const auto& t : trimmed) {
        if (t.size() != n) throw ValidationError("elect_sign: deltas differ in size");
    }
    std::vector<std::int8_t> out(n);
    for (std::size_t j = 0; j < n; ++j) {
        double sum = 0.0;
        for (const auto& t : trimmed) sum += t[j];
        out[j] = sum > 0.0 ? 1 : (sum < 0.0 ? -1 : 0);
    }
    return out;
}

TensorMap ties_merge(const TensorMap& base, std::span<const TaskVector> vectors, const TiesParams& params) {
    params.validate();
    if (vectors.size() < 2) throw ValidationError("ties merge needs at least two task vectors");
    check_vectors(base, vectors);
    auto order = sorted_by_model(vectors);
    auto names = base.names();

    std::vector<Tensor> out(names.size());
    parallel_for(names.size(), [&](std::size_t i) {
        const auto& b = base.at(names[i]);
        Tensor t = b;
        std::vector<std::vector<float>> trimmed;
        for (const auto* v : order) {
            auto it = v->deltas.find(names[i]);
            if (it != v->deltas.end()) trimmed.push_back(trim(it->second.values, params.trim_ratio));
        }
        if (!trimmed.empty()) {
            std::vector<std::span<const float>> views(trimmed.begin(), trimmed.end());
            auto signs = elect_sign(views);
            for (std::size_t j = 0; j < t.values.size(); ++j) {
                if (signs[j] == 0) continue;
                double sum = 0.0;
                std::size_t count = 0;
                for (const auto& d : trimmed) {
                    const float x = d[j];
                    if (x != 0.0f && (x > 0.0f) == (signs[j] > 0)) {
                        sum += x;
                        ++count;
                    }
                }
                if (count == 0) continue;
                const double mean = sum / static_cast<double>(count);
                t.values[j] = static_cast<float>(static_cast<double>(b.values[j]) + params.alpha * mean);
            }
        }
        out[i] = std::move(t);
    });
    return assemble(base, names, out);
}

DareStream::DareStream(std::uint64_t seed, const std::string& tensor_name)
    : origin_(seed ^ fnv1a64(tensor_name)), state_(origin_) {}

std::uint64_t DareStream::next() {
    state_ += splitmix_gamma;
    return splitmix_mix(state_);
}

std::uint64_t DareStream::at(std::uint64_t index) const { return splitmix_mix(origin_ + (index + 1) * splitmix_gamma); }

TaskVector dare_drop(const TaskVector& vector, const DareParams& params, DareCounts* counts) {
    params.validate();
    TaskVector out;
    out.model_id = vector.model_id;
    out.base_fingerprint = vector.base_fingerprint;

    std::vector<const std::pair<const std::string, Tensor>*> items;
    for (const auto& kv : vector.deltas) items.push_back(&kv);
    std::vector<Tensor> dropped(items.size());
    std::vector<std::uint64_t> kept_per(items.size(), 0);
    const double scale = 1.0 / (1.0 - params.drop_rate);

    parallel_for(items.size(), [&](std::size_t i) {
        const auto& [name, src] = *items[i];
        Tensor t = src;
        DareStream stream(params.seed, name);
        std::uint64_t kept = 0;
        for (auto& v : t.values) {
            if (DareStream::keep(stream.next(), params.drop_rate)) {
                v = static_cast<float>(static_cast<double>(v) * scale);
                ++kept;
            } else {
                v = 0.0f;
            }
        }
        kept_per[i] = kept;
        dropped[i] = std::move(t);
    });

    for (std::size_t i = 0; i < items.size(); ++i) {
        if (counts) {
            counts->kept += kept_per[i];
            counts->dropped += dropped[i].numel() - kept_per[i];
        }
        out.deltas.emplace(items[i]->first, std::move(dropped[i]));
    }
    return out;
}

std::uint64_t dare_seed_for(std::uint64_t seed, const std::string& model_id) { return seed ^ fnv1a64(model_id); }

namespace {

std::vector<TaskVector> drop_all(std::span<const TaskVector> vectors, const DareParams& dare, DareCounts* counts) {
    std::vector<TaskVector> out;
    out.reserve(vectors.size());
    for (const auto& v : vectors) {
        DareParams per = dare;
        per.seed = dare_seed_for(dare.seed, v.model_id);
        out.push_back(dare_drop(v, per, counts));
    }
    return out;
}

} // namespace

TensorMap dare_ta(const TensorMap& base, std::span<const TaskVector> vectors, const DareParams& dare,
                  const Coefficients& coeffs, DareCounts* counts) {
    dare.validate();
    auto dropped = drop_all(vectors, dare, counts);
    return apply_task_vectors(base, dropped, coeffs);
}

TensorMap dare_ties(const TensorMap& base, std::span<const TaskVector> vectors, const DareParams& dare,
                    const TiesParams& ties, DareCounts* counts) {
    dare.validate();
    ties.validate();
    auto dropped = drop_all(vectors, dare, counts);
    return ties_merge(base, dropped, ties);
}

} // namespace l2smerge
