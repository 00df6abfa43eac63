// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <unistd.h>

#include <fmt/core.h>
#include <nlohmann/json.hpp>

#include "l2smerge/errors.hpp"
#include "l2smerge/names.hpp"
#include "l2smerge/parallel.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace l2smerge {

namespace {

constexpr const char* manifest_file = "merge_manifest.json";
constexpr const char* resolved_recipe_file = "recipe.resolved.toml";

bool is_weight_file(const fs::path& p) {
    const auto name = p.filename().string();
    return p.extension() == ".safetensors" || name.ends_with(".safetensors.index.json");
}

// Removes skip-listed tensors from `tensors` and returns them.
TensorMap extract_skipped(TensorMap& tensors, const std::vector<std::string>& skip) {
    TensorMap skipped;
    if (skip.empty()) return skipped;
    TensorMap kept;
    kept.metadata = tensors.metadata;
    for (const auto& name : tensors.names()) {
        if (matches_any(skip, name)) {
            skipped.insert(name, tensors.at(name));
        } else {
            kept.insert(name, tensors.at(name));
        }
    }
    tensors = std::move(kept);
    return skipped;
}

std::string lambda_summary(const Coefficients& coeffs, const std::vector<std::string>& ids, const std::string& name) {
    std::string out = "lambda{";
    for (std::size_t i = 0; i < ids.size(); ++i) {
        out += fmt::format("{}{}={}", i ? "," : "", ids[i], coeffs.lambda_for(ids[i], name));
    }
    return out + "}";
}

std::vector<TaskVector> task_vectors_of(const MergeRecipe& recipe, const MergeInputs& inputs) {
    std::vector<TaskVector> vectors;
    for (const auto& [id, weights] : inputs.models) {
        check_compatible(*inputs.base, weights, recipe.skip_patterns);
        vectors.push_back(compute_task_vector(weights, *inputs.base, id, recipe.skip_patterns));
    }
    return vectors;
}

std::vector<std::string> sorted_ids(const MergeInputs& inputs) {
    std::vector<std::string> ids;
    for (const auto& [id, _] : inputs.models) ids.push_back(id);
    std::sort(ids.begin(), ids.end());
    return ids;
}

// Task-vector based methods (everything that can feed aim_post).
TensorMap merge_with_vectors(Method method, const MergeRecipe& recipe, const MergeInputs& inputs,
                             std::map<std::string, std::string>& trace, MergeManifest* manifest) {
    const auto& base = *inputs.base;
    auto vectors = task_vectors_of(recipe, inputs);
    const auto ids = sorted_ids(inputs);
    const auto coeffs = recipe.coefficients();
    TensorMap merged;

    auto trace_deltas = [&](const std::function<std::string(const std::string&)>& note) {
        for (const auto& name : base.names()) {
            trace[name] = matches_any(recipe.skip_patterns, name) ? "passthrough (skip)" : note(name);
        }
    };

    switch (method) {
    case Method::task_arithmetic:
        merged = apply_task_vectors(base, vectors, coeffs);
        trace_deltas([&](const std::string& n) { return "task_arithmetic " + lambda_summary(coeffs, ids, n); });
        break;
    case Method::ties:
        merged = ties_merge(base, vectors, recipe.ties);
        trace_deltas([&](const std::string&) {
            return fmt::format("ties k={} alpha={}", recipe.ties.trim_ratio, recipe.ties.alpha);
        });
        break;
    case Method::dare_ta: {
        DareCounts counts;
        merged = dare_ta(base, vectors, recipe.dare, coeffs, &counts);
        if (manifest) manifest->dare = counts;
        trace_deltas([&](const std::string& n) {
            return fmt::format("dare_ta p={} {}", recipe.dare.drop_rate, lambda_summary(coeffs, ids, n));
        });
        break;
    }
    case Method::dare_ties: {
        DareCounts counts;
        merged = dare_ties(base, vectors, recipe.dare, recipe.ties, &counts);
        if (manifest) manifest->dare = counts;
        trace_deltas([&](const std::string&) {
            return fmt::format("dare_ties p={} k={} alpha={}", recipe.dare.drop_rate, recipe.ties.trim_ratio,
                               recipe.ties.alpha);
        });
        break;
    }
    case Method::twin: {
        LowRankTrace lr;
        merged = twin_merge(base, vectors, recipe.rank, coeffs, recipe.svd, &lr);
        trace_deltas([&](const std::string& n) {
            auto it = lr.find(n);
            return fmt::format("twin [{}] {}", it == lr.end() ? "no delta" : it->second, lambda_summary(coeffs, ids, n));
        });
        break;
    }
    case Method::sens: {
        Coefficients used;
        merged = sens_merge(base, vectors, *inputs.stats, recipe.sens, LayerResolver(recipe.layer_pattern), &used);
        if (manifest) manifest->sens_coefficients = used.per_layer;
        trace_deltas([&](const std::string& n) {
            return fmt::format("sens T={} layer={} {}", recipe.sens.temperature, used.layers.layer_of(n),
                               lambda_summary(used, ids, n));
        });
        break;
    }
    default: throw ValidationError(fmt::format("method '{}' does not use task vectors", method_name(method)));
    }
    return merged;
}

void check_finite(const TensorMap& tensors) {
    for (const auto& [name, t] : tensors) {
        for (float v : t.values) {
            if (!std::isfinite(v)) throw NumericalError(fmt::format("merged tensor '{}' contains non-finite values", name));
        }
    }
}

void copy_aux_files(const fs::path& source, const fs::path& dest, std::vector<std::string>& copied) {
    if (!fs::is_directory(source)) return;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(source)) {
        if (!entry.is_regular_file() || is_weight_file(entry.path())) continue;
        const auto name = entry.path().filename().string();
        if (name == manifest_file || name == resolved_recipe_file) continue;
        files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
        fs::copy_file(f, dest / f.filename(), fs::copy_options::overwrite_existing);
        copied.push_back(f.filename().string());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
}

} // namespace

std::string_view tool_version() { return "0.1.0"; }

std::string MergeManifest::to_json(bool with_wall_time) const {
    json j;
    j["tool"] = {{"name", "l2smerge"}, {"version", tool_version()}};
    j["recipe"] = json::parse(recipe_json);
    j["inputs"] = json::array();
    for (const auto& in : inputs) {
        j["inputs"].push_back({{"role", in.role},
                               {"id", in.id},
                               {"path", in.path},
                               {"manifest_fingerprint", in.manifest_fingerprint},
                               {"content_fingerprint", in.content_fingerprint}});
    }
    j["output"] = {{"content_fingerprint", output_fingerprint}, {"files", files}};
    j["trace"] = trace;
    if (dare) j["dare"] = {{"kept", dare->kept}, {"dropped", dare->dropped}};
    if (lore) j["lore"] = {{"objective", lore->objective}, {"sweeps", lore->sweeps}, {"converged", lore->converged}};
    if (!sens_coefficients.empty()) j["sens_coefficients"] = sens_coefficients;
    if (!aim_passthrough.empty()) j["aim_passthrough"] = aim_passthrough;
    j["notes"] = notes;
    if (with_wall_time) j["wall_seconds"] = wall_seconds;
    return j.dump(2);
}

MergeInputs load_inputs(const MergeRecipe& recipe) {
    MergeInputs in;
    if (recipe.base) in.base = load_checkpoint(recipe.base->path);
    for (const auto& m : recipe.models) in.models.emplace_back(m.id, load_checkpoint(m.path));
    if (recipe.stats_path) in.stats = load_stats(*recipe.stats_path);
    return in;
}

TensorMap merge_tensors(const MergeRecipe& recipe, const MergeInputs& inputs, MergeManifest* manifest) {
    std::map<std::string, std::string> trace;
    TensorMap merged;

    switch (recipe.method) {
    case Method::average:
    case Method::lore: {
        // Skip-listed tensors come from the base when given, else from the first model.
        std::vector<TensorMap> models;
        for (const auto& [_, w] : inputs.models) models.push_back(w);
        TensorMap passthrough_source = inputs.base ? *inputs.base : inputs.models.front().second;
        TensorMap skipped = extract_skipped(passthrough_source, recipe.skip_patterns);
        for (auto& m : models) extract_skipped(m, recipe.skip_patterns);

        if (recipe.method == Method::average) {
            merged = average_merge(models);
            for (const auto& name : merged.names()) trace[name] = fmt::format("average of {}", models.size());
        } else {
            LoreTrace lt;
            merged = lore_merge(models, recipe.lore, recipe.svd, &lt);
            for (const auto& name : merged.names()) {
                trace[name] = merged.at(name).is_matrix()
                                  ? fmt::format("lore tau={}{} lambda={}", recipe.lore.tau,
                                                recipe.lore.tau_relative ? "*sigma_max" : "", recipe.lore.lambda)
                                  : fmt::format("lore (unpenalized, not 2-D) lambda={}", recipe.lore.lambda);
            }
            if (manifest) manifest->lore = lt;
        }
        const std::string source = inputs.base ? "base" : inputs.models.front().first;
        for (const auto& name : skipped.names()) {
            merged.insert_or_assign(name, skipped.at(name));
            trace[name] = fmt::format("passthrough (skip, from {})", source);
        }
        break;
    }
    case Method::aim_post: {
        auto pre = merge_with_vectors(recipe.inner, recipe, inputs, trace, manifest);
        AimPassthrough passthrough;
        merged = aim_adjust(*inputs.base, pre, *inputs.stats, recipe.aim, &passthrough);
        std::set<std::string> untouched(passthrough.begin(), passthrough.end());
        for (auto& [name, note] : trace) {
            note += untouched.count(name) ? "; aim passthrough (no importance)" : fmt::format("; aim omega={}", recipe.aim.omega);
        }
        if (manifest) manifest->aim_passthrough = passthrough;
        break;
    }
    default: merged = merge_with_vectors(recipe.method, recipe, inputs, trace, manifest); break;
    }

    check_finite(merged);
    for (const auto& name : merged.names()) {
        if (!trace.count(name)) trace[name] = "passthrough";
    }
    if (manifest) manifest->trace = std::move(trace);
    return merged;
}

void apply_dtype_policy(TensorMap& tensors, const DTypePolicy& policy) {
    auto names = tensors.names();
    parallel_for(names.size(), [&](std::size_t i) {
        auto& t = tensors.at(names[i]);
        const DType target = policy.resolve(names[i], t.source_dtype);
        if (target == DType::bf16) {
            for (float& v : t.values) v = bf16_to_fp32(fp32_to_bf16(v));
        }
        t.source_dtype = target;
    });
}

MergeManifest run_merge(const MergeRecipe& recipe, const MergeOptions& options) {
    const auto started = std::chrono::steady_clock::now();
    const fs::path output = fs::absolute(recipe.output_path).lexically_normal();
    if (fs::exists(output) && !options.overwrite) {
        throw IoError(fmt::format("output '{}' already exists", output.string()));
    }

    MergeManifest manifest;
    manifest.recipe_json = recipe_to_json(recipe);

    auto inputs = load_inputs(recipe);
    if (inputs.base) {
        manifest.inputs.push_back({"base", recipe.base->id, recipe.base->path.string(),
                                   fingerprint_hex(manifest_fingerprint(*inputs.base)),
                                   fingerprint_hex(content_fingerprint(*inputs.base))});
    }
    for (std::size_t i = 0; i < inputs.models.size(); ++i) {
        const auto& w = inputs.models[i].second;
        manifest.inputs.push_back({"model", recipe.models[i].id, recipe.models[i].path.string(),
                                   fingerprint_hex(manifest_fingerprint(w)), fingerprint_hex(content_fingerprint(w))});
    }

    TensorMap merged = merge_tensors(recipe, inputs, &manifest);
    merged.metadata.clear();
    merged.metadata["format"] = "pt";
    apply_dtype_policy(merged, recipe.dtype_policy);
    manifest.output_fingerprint = fingerprint_hex(content_fingerprint(merged));

    const fs::path aux_source = recipe.base ? recipe.base->path : recipe.models.front().path;
    manifest.notes.push_back(fmt::format("non-weight files copied from {}", recipe.base ? "base" : recipe.models.front().id));
    if (recipe.method == Method::lore) {
        manifest.notes.push_back("lore objective: 1/2 sum ||theta_k - base_hat - delta_k||^2 + sum tau_k ||delta_k||_*");
    }
    if (recipe.method == Method::sens || (recipe.method == Method::aim_post && recipe.inner == Method::sens)) {
        manifest.notes.push_back("sens: per-model layer scores normalized by their maximum before the tempered softmax");
    }
    if (recipe.method == Method::dare_ta || recipe.method == Method::dare_ties) {
        manifest.notes.push_back("dare: each model draws its mask with seed xor fnv1a64(model id)");
    }

    static std::atomic<unsigned> counter{0};
    const fs::path parent = output.has_parent_path() ? output.parent_path() : fs::current_path();
    fs::create_directories(parent);
    const fs::path staging =
        parent / fmt::format(".{}.tmp-{}-{}", output.filename().string(), static_cast<long>(::getpid()), counter++);
    try {
        fs::remove_all(staging);
        fs::create_directories(staging);
        for (const auto& f : write_checkpoint_dir(merged, staging, recipe.dtype_policy, recipe.max_shard_bytes)) {
            manifest.files.push_back(f.filename().string());
        }
        std::vector<std::string> copied;
        copy_aux_files(aux_source, staging, copied);
        for (const auto& c : copied) manifest.files.push_back(c);
        manifest.files.push_back(resolved_recipe_file);
        manifest.files.push_back(manifest_file);
        std::sort(manifest.files.begin(), manifest.files.end());

        write_text(staging / resolved_recipe_file, recipe_to_toml(recipe));
        manifest.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        write_text(staging / manifest_file, manifest.to_json());

        if (fs::exists(output)) fs::remove_all(output);
        fs::rename(staging, output);
    } catch (const fs::filesystem_error& e) {
        std::error_code ec;
        fs::remove_all(staging, ec);
        throw IoError(fmt::format("writing '{}': {}", output.string(), e.what()));
    } catch (...) {
        std::error_code ec;
        fs::remove_all(staging, ec);
        throw;
    }
    return manifest;
}

std::string DiffReport::to_json() const {
    json j;
    j["elements"] = elements;
    j["mean_abs"] = mean_abs;
    j["max_abs"] = max_abs;
    j["threshold"] = threshold;
    j["fraction_above_threshold"] = fraction_above_threshold;
    json hist = json::array();
    for (std::size_t i = 0; i < counts.size(); ++i) {
        json lo = edges[i];
        json hi = std::isinf(edges[i + 1]) ? json("inf") : json(edges[i + 1]);
        hist.push_back({{"lo", lo}, {"hi", hi}, {"count", counts[i]}});
    }
    j["histogram"] = hist;
    auto row = [](const TensorDiff& d) {
        return json{{"name", d.name}, {"numel", d.numel}, {"mean_abs", d.mean_abs}, {"max_abs", d.max_abs}};
    };
    j["top"] = json::array();
    for (const auto& d : top) j["top"].push_back(row(d));
    j["tensors"] = json::array();
    for (const auto& d : tensors) j["tensors"].push_back(row(d));
    return j.dump(2);
}

std::string DiffReport::to_text() const {
    std::string out = fmt::format("{} elements, mean |a-b| {:.6g}, max |a-b| {:.6g}, {:.4f}% above {}\n", elements,
                                  mean_abs, max_abs, 100.0 * fraction_above_threshold, threshold);
    out += "histogram of |a-b|:\n";
    for (std::size_t i = 0; i < counts.size(); ++i) {
        out += fmt::format("  [{:g}, {:g}) {}\n", edges[i], edges[i + 1], counts[i]);
    }
    out += fmt::format("top {} tensors by mean shift:\n", top.size());
    for (const auto& d : top) out += fmt::format("  {:<60} mean {:.6g} max {:.6g}\n", d.name, d.mean_abs, d.max_abs);
    return out;
}

DiffReport diff_checkpoints(const TensorMap& a, const TensorMap& b, std::size_t top_n) {
    check_compatible(a, b);
    check_compatible(b, a);
    DiffReport report;
    report.edges = {0.0, 1e-5, 1e-4, 5e-4, 1e-3, 2e-3, 5e-3, 1e-2, 5e-2, std::numeric_limits<double>::infinity()};
    const auto names = a.names();
    const std::size_t bins = report.edges.size() - 1;

    struct Partial {
        double sum = 0.0;
        double max = 0.0;
        std::uint64_t above = 0;
        std::vector<std::uint64_t> counts;
    };
    std::vector<Partial> parts(names.size());
    parallel_for(names.size(), [&](std::size_t i) {
        const auto& x = a.at(names[i]).values;
        const auto& y = b.at(names[i]).values;
        Partial p;
        p.counts.assign(bins, 0);
        for (std::size_t j = 0; j < x.size(); ++j) {
            const double d = std::abs(static_cast<double>(x[j]) - static_cast<double>(y[j]));
            p.sum += d;
            p.max = std::max(p.max, d);
            if (d > report.threshold) ++p.above;
            const auto it = std::upper_bound(report.edges.begin(), report.edges.end(), d);
            const auto bin = static_cast<std::size_t>(std::distance(report.edges.begin(), it)) - 1;
            ++p.counts[std::min(bin, bins - 1)];
        }
        parts[i] = std::move(p);
    });

    report.counts.assign(bins, 0);
    double total = 0.0;
    std::uint64_t above = 0;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const auto n = a.at(names[i]).values.size();
        TensorDiff d{names[i], n, n ? parts[i].sum / static_cast<double>(n) : 0.0, parts[i].max};
        report.tensors.push_back(d);
        report.elements += n;
        total += parts[i].sum;
        above += parts[i].above;
        report.max_abs = std::max(report.max_abs, parts[i].max);
        for (std::size_t k = 0; k < bins; ++k) report.counts[k] += parts[i].counts[k];
    }
    if (report.elements) {
        report.mean_abs = total / static_cast<double>(report.elements);
        report.fraction_above_threshold = static_cast<double>(above) / static_cast<double>(report.elements);
    }
    report.top = report.tensors;
    std::stable_sort(report.top.begin(), report.top.end(),
                     [](const TensorDiff& x, const TensorDiff& y) { return x.mean_abs > y.mean_abs; });
    if (report.top.size() > top_n) report.top.resize(top_n);
    return report;
}

std::string inspect_checkpoint(const fs::path& path, const std::optional<std::string>& tensor) {
    if (!tensor) {
        const auto manifest = read_manifest(path);
        std::string out;
        for (const auto& e : manifest.entries) {
            std::string shape;
            for (std::size_t i = 0; i < e.meta.shape.size(); ++i) shape += fmt::format("{}{}", i ? ", " : "", e.meta.shape[i]);
            out += fmt::format("{:<64} {:<5} [{}]\n", e.meta.name, dtype_name(e.meta.dtype), shape);
        }
        out += fmt::format("{} tensors, {} parameters\n", manifest.entries.size(), manifest.parameter_count());
        return out;
    }
    auto loaded = load_checkpoint(path, [&](const std::string& n) { return n == *tensor; });
    if (!loaded.contains(*tensor)) throw ValidationError(fmt::format("no tensor named '{}' in '{}'", *tensor, path.string()));
    const auto& t = loaded.at(*tensor);
    double sum = 0.0, sq = 0.0, lo = std::numeric_limits<double>::infinity(), hi = -lo;
    std::size_t zeros = 0;
    for (float v : t.values) {
        sum += v;
        sq += static_cast<double>(v) * v;
        lo = std::min<double>(lo, v);
        hi = std::max<double>(hi, v);
        zeros += v == 0.0f;
    }
    const double n = static_cast<double>(t.values.size());
    const double mean = n ? sum / n : 0.0;
    const double var = n ? std::max(0.0, sq / n - mean * mean) : 0.0;
    std::string shape;
    for (std::size_t i = 0; i < t.shape.size(); ++i) shape += fmt::format("{}{}", i ? ", " : "", t.shape[i]);
    std::string out = fmt::format("name   {}\ndtype  {}\nshape  [{}]\nnumel  {}\n", *tensor, dtype_name(t.source_dtype), shape,
                                  t.values.size());
    if (!t.values.empty()) {
        out += fmt::format("min    {:.6g}\nmax    {:.6g}\nmean   {:.6g}\nstd    {:.6g}\nzeros  {}\n", lo, hi, mean,
                           std::sqrt(var), zeros);
    }
    return out;
}

} // namespace l2smerge
