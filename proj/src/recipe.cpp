// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/recipe.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <fmt/core.h>
#include <nlohmann/json.hpp>
#include <toml++/toml.hpp>

#include "l2smerge/errors.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace l2smerge {

namespace {

constexpr std::array<std::pair<Method, std::string_view>, 9> method_names{{
    {Method::average, "average"},
    {Method::task_arithmetic, "task_arithmetic"},
    {Method::ties, "ties"},
    {Method::dare_ta, "dare_ta"},
    {Method::dare_ties, "dare_ties"},
    {Method::twin, "twin"},
    {Method::lore, "lore"},
    {Method::aim_post, "aim_post"},
    {Method::sens, "sens"},
}};

constexpr std::array<std::pair<Scale, std::string_view>, 4> scale_names{{
    {Scale::b1_5, "1.5B"},
    {Scale::b7, "7B"},
    {Scale::b14, "14B"},
    {Scale::b32, "32B"},
}};

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

[[noreturn]] void fail(const std::string& field, const std::string& message) {
    throw ValidationError(fmt::format("recipe: {}: {}", field, message));
}

void check_keys(const toml::table& table, const std::string& prefix, std::initializer_list<std::string_view> allowed) {
    for (const auto& [key, _] : table) {
        if (std::find(allowed.begin(), allowed.end(), key.str()) == allowed.end()) {
            fail(prefix.empty() ? std::string(key.str()) : prefix + "." + std::string(key.str()), "unknown field");
        }
    }
}

std::optional<std::string> get_string(const toml::table& t, std::string_view key, const std::string& field) {
    const toml::node* n = t.get(key);
    if (!n) return std::nullopt;
    if (!n->is_string()) fail(field, "must be a string");
    return n->value<std::string>();
}

std::optional<double> get_number(const toml::table& t, std::string_view key, const std::string& field) {
    const toml::node* n = t.get(key);
    if (!n) return std::nullopt;
    if (!n->is_number()) fail(field, "must be a number");
    double v = n->is_integer() ? static_cast<double>(*n->value<std::int64_t>()) : *n->value<double>();
    if (!std::isfinite(v)) fail(field, "must be finite");
    return v;
}

std::optional<std::int64_t> get_integer(const toml::table& t, std::string_view key, const std::string& field) {
    const toml::node* n = t.get(key);
    if (!n) return std::nullopt;
    if (!n->is_integer()) fail(field, "must be an integer");
    return n->value<std::int64_t>();
}

std::optional<bool> get_bool(const toml::table& t, std::string_view key, const std::string& field) {
    const toml::node* n = t.get(key);
    if (!n) return std::nullopt;
    if (!n->is_boolean()) fail(field, "must be a boolean");
    return n->value<bool>();
}

const toml::table* get_table(const toml::table& t, std::string_view key, const std::string& field) {
    const toml::node* n = t.get(key);
    if (!n) return nullptr;
    if (!n->is_table()) fail(field, "must be a table");
    return n->as_table();
}

const toml::array* get_array(const toml::table& t, std::string_view key, const std::string& field) {
    const toml::node* n = t.get(key);
    if (!n) return nullptr;
    if (!n->is_array()) fail(field, "must be an array");
    return n->as_array();
}

fs::path resolve_path(const fs::path& base_dir, const std::string& p) {
    fs::path path(p);
    if (path.is_relative() && !base_dir.empty()) path = base_dir / path;
    return path.lexically_normal();
}

ModelRef parse_model(const toml::table& t, const std::string& field, const fs::path& base_dir, bool is_base) {
    if (is_base) {
        check_keys(t, field, {"id", "path"});
    } else {
        check_keys(t, field, {"id", "path", "lambda"});
    }
    ModelRef m;
    auto path = get_string(t, "path", field + ".path");
    if (!path || path->empty()) fail(field + ".path", "required");
    m.path = resolve_path(base_dir, *path);
    m.id = get_string(t, "id", field + ".id").value_or(is_base ? "base" : "");
    if (m.id.empty()) fail(field + ".id", "required");
    if (!is_base) m.lambda = get_number(t, "lambda", field + ".lambda");
    return m;
}

DType parse_dtype_field(const std::string& text, const std::string& field) {
    auto lowered = lower(text);
    if (lowered == "bf16" || lowered == "bfloat16") return DType::bf16;
    if (lowered == "fp32" || lowered == "f32" || lowered == "float32") return DType::f32;
    fail(field, fmt::format("unknown dtype '{}' (expected bf16 or fp32)", text));
}

bool uses_task_lambda(Method m) { return m == Method::task_arithmetic || m == Method::dare_ta || m == Method::twin; }
bool uses_ties(Method m) { return m == Method::ties || m == Method::dare_ties; }
bool uses_dare(Method m) { return m == Method::dare_ta || m == Method::dare_ties; }

// Number of expert models a method needs, and whether it needs a base.
std::pair<std::size_t, bool> model_requirements(Method m) {
    switch (m) {
    case Method::average:
    case Method::lore: return {2, false};
    case Method::ties:
    case Method::dare_ties: return {2, true};
    default: return {1, true};
    }
}

std::size_t detect_parameter_count(const MergeRecipe& r) {
    const fs::path& probe = r.base ? r.base->path : r.models.front().path;
    return read_manifest(probe).parameter_count();
}

std::string format_number(double v) { return fmt::format("{}", v); }

} // namespace

std::string_view method_name(Method m) {
    for (const auto& [k, v] : method_names) {
        if (k == m) return v;
    }
    return "?";
}

std::optional<Method> parse_method(std::string_view name) {
    for (const auto& [k, v] : method_names) {
        if (v == name) return k;
    }
    return std::nullopt;
}

std::string_view scale_name(Scale s) {
    for (const auto& [k, v] : scale_names) {
        if (k == s) return v;
    }
    return "?";
}

std::optional<Scale> parse_scale(std::string_view name) {
    auto lowered = lower(name);
    for (const auto& [k, v] : scale_names) {
        if (lower(v) == lowered) return k;
    }
    return std::nullopt;
}

Scale scale_for_parameter_count(std::size_t params) {
    constexpr std::array<std::pair<Scale, double>, 4> sizes{{
        {Scale::b1_5, 1.5e9},
        {Scale::b7, 7.0e9},
        {Scale::b14, 14.0e9},
        {Scale::b32, 32.0e9},
    }};
    const double lp = std::log(std::max<double>(static_cast<double>(params), 1.0));
    Scale best = Scale::b7;
    double best_dist = std::numeric_limits<double>::infinity();
    for (const auto& [scale, size] : sizes) {
        const double d = std::abs(lp - std::log(size));
        if (d < best_dist) {
            best_dist = d;
            best = scale;
        }
    }
    return best;
}

const ScaleDefaults& defaults_for(Scale s) {
    static const ScaleDefaults b1_5{0.7, 0.8, 1.0, 0.3, 0.4, 0.4, 3.0};
    static const ScaleDefaults b7{0.7, 0.8, 1.0, 0.3, 0.4, 0.7, 2.0};
    static const ScaleDefaults b14{0.7, 0.2, 0.5, 0.4, 0.4, 0.8, 6.0};
    static const ScaleDefaults b32{0.7, 0.25, 0.55, std::nullopt, std::nullopt, std::nullopt, std::nullopt};
    switch (s) {
    case Scale::b1_5: return b1_5;
    case Scale::b7: return b7;
    case Scale::b14: return b14;
    case Scale::b32: return b32;
    }
    return b7;
}

Coefficients MergeRecipe::coefficients() const {
    Coefficients c;
    for (const auto& m : models) c.per_model[m.id] = m.lambda.value_or(alpha);
    c.name_overrides = lambda_overrides;
    c.layers = LayerResolver(layer_pattern);
    return c;
}

MergeRecipe parse_recipe_text(const std::string& toml_text, const fs::path& base_dir, const RecipeOverrides& overrides) {
    toml::table doc;
    try {
        doc = toml::parse(toml_text);
    } catch (const toml::parse_error& e) {
        const auto& where = e.source().begin;
        throw ValidationError(fmt::format("recipe: malformed TOML at line {}, column {}: {}", where.line, where.column,
                                          e.description()));
    }
    check_keys(doc, "", {"method", "scale", "output", "seed", "stats", "skip", "layer_pattern", "max_shard_bytes", "base",
                         "models", "params", "dtype", "lambda_overrides"});

    MergeRecipe r;
    auto method_text = get_string(doc, "method", "method");
    if (!method_text) fail("method", "required");
    auto method = parse_method(lower(*method_text));
    if (!method) fail("method", fmt::format("unknown method '{}'", *method_text));
    r.method = *method;

    if (const auto* base = get_table(doc, "base", "base")) r.base = parse_model(*base, "base", base_dir, true);
    if (const auto* models = get_array(doc, "models", "models")) {
        std::set<std::string> ids;
        for (std::size_t i = 0; i < models->size(); ++i) {
            const auto field = fmt::format("models[{}]", i);
            const auto* t = (*models)[i].as_table();
            if (!t) fail(field, "must be a table");
            auto m = parse_model(*t, field, base_dir, false);
            if (!ids.insert(m.id).second) fail(field + ".id", fmt::format("duplicate model id '{}'", m.id));
            r.models.push_back(std::move(m));
        }
    }

    const auto [min_models, needs_base] = model_requirements(r.method);
    if (needs_base && !r.base) fail("base", fmt::format("required for method '{}'", method_name(r.method)));
    if (r.models.size() < min_models) {
        fail("models", fmt::format("method '{}' needs at least {} model(s), got {}", method_name(r.method), min_models,
                                   r.models.size()));
    }

    if (overrides.output) {
        r.output_path = *overrides.output;
    } else if (auto out = get_string(doc, "output", "output")) {
        r.output_path = resolve_path(base_dir, *out);
    } else {
        fail("output", "required");
    }
    if (r.output_path.empty()) fail("output", "must not be empty");

    if (auto stats = get_string(doc, "stats", "stats")) r.stats_path = resolve_path(base_dir, *stats);
    if (const auto* skip = get_array(doc, "skip", "skip")) {
        for (std::size_t i = 0; i < skip->size(); ++i) {
            auto s = (*skip)[i].value<std::string>();
            if (!s) fail(fmt::format("skip[{}]", i), "must be a string");
            r.skip_patterns.push_back(*s);
        }
    }
    if (auto lp = get_string(doc, "layer_pattern", "layer_pattern")) {
        try {
            LayerResolver probe(*lp);
        } catch (const std::exception& e) {
            fail("layer_pattern", e.what());
        }
        r.layer_pattern = *lp;
    }
    if (auto shard = get_integer(doc, "max_shard_bytes", "max_shard_bytes")) {
        if (*shard < 0) fail("max_shard_bytes", "must be >= 0");
        r.max_shard_bytes = static_cast<std::uint64_t>(*shard);
    }
    if (const auto* lo = get_array(doc, "lambda_overrides", "lambda_overrides")) {
        for (std::size_t i = 0; i < lo->size(); ++i) {
            const auto field = fmt::format("lambda_overrides[{}]", i);
            const auto* t = (*lo)[i].as_table();
            if (!t) fail(field, "must be a table");
            check_keys(*t, field, {"pattern", "lambda"});
            auto pattern = get_string(*t, "pattern", field + ".pattern");
            auto lambda = get_number(*t, "lambda", field + ".lambda");
            if (!pattern) fail(field + ".pattern", "required");
            if (!lambda) fail(field + ".lambda", "required");
            r.lambda_overrides.emplace_back(*pattern, *lambda);
        }
    }

    const toml::table empty;
    const toml::table* params = get_table(doc, "params", "params");
    if (!params) params = &empty;
    check_keys(*params, "params", {"alpha", "k", "trim_is_keep", "p", "omega", "temperature", "tau", "tau_relative",
                                   "max_iters", "tol", "lambda", "rank", "energy", "inner", "dense_cap", "svd_seed"});

    if (auto inner = get_string(*params, "inner", "params.inner")) {
        auto m = parse_method(lower(*inner));
        if (!m || *m == Method::aim_post || *m == Method::average || *m == Method::lore) {
            fail("params.inner", fmt::format("'{}' cannot feed aim_post (use task_arithmetic, ties, dare_ta, dare_ties, "
                                             "twin or sens)",
                                             *inner));
        }
        if (r.method != Method::aim_post) fail("params.inner", "only used by method 'aim_post'");
        r.inner = *m;
        const auto [inner_min, _] = model_requirements(r.inner);
        if (r.models.size() < inner_min) {
            fail("models", fmt::format("inner method '{}' needs at least {} model(s)", method_name(r.inner), inner_min));
        }
    }
    const Method effective = r.method == Method::aim_post ? r.inner : r.method;

    // Scale is only resolved when a scale-keyed default is actually needed.
    std::optional<Scale> scale = overrides.scale;
    if (scale) {
        r.scale_source = "override";
    } else if (auto s = get_string(doc, "scale", "scale")) {
        scale = parse_scale(*s);
        if (!scale) fail("scale", fmt::format("unknown scale '{}' (expected 1.5B, 7B, 14B or 32B)", *s));
        r.scale_source = "recipe";
    }
    auto scale_defaults = [&]() -> const ScaleDefaults& {
        if (!scale) {
            scale = scale_for_parameter_count(detect_parameter_count(r));
            r.scale_source = "detected";
        }
        r.scale = *scale;
        return defaults_for(*scale);
    };
    if (scale) r.scale = *scale;

    auto note_default = [&](const std::string& field, const std::string& value, const std::string& source) {
        r.defaults_applied.push_back(fmt::format("{} = {} ({})", field, value, source));
    };
    auto scale_label = [&] { return fmt::format("{} default", scale_name(r.scale)); };

    auto alpha = get_number(*params, "alpha", "params.alpha");
    if (uses_task_lambda(effective)) {
        if (!alpha) {
            alpha = scale_defaults().ta_alpha;
            note_default("params.alpha", format_number(*alpha), scale_label());
        }
    } else if (uses_ties(effective)) {
        if (!alpha) {
            alpha = scale_defaults().ties_alpha;
            note_default("params.alpha", format_number(*alpha), scale_label());
        }
    } else if (effective == Method::sens) {
        if (!alpha) {
            alpha = scale_defaults().sens_alpha;
            if (!alpha) fail("params.alpha", fmt::format("required for sens at scale {}", scale_name(r.scale)));
            note_default("params.alpha", format_number(*alpha), scale_label());
        }
    }
    if (alpha) r.alpha = *alpha;

    if (uses_ties(effective)) {
        r.trim_is_keep = overrides.trim_is_keep.value_or(get_bool(*params, "trim_is_keep", "params.trim_is_keep").value_or(false));
        auto k = get_number(*params, "k", "params.k");
        if (k) {
            if (r.trim_is_keep) {
                if (!(*k > 0.0 && *k <= 1.0)) fail("params.k", fmt::format("keep fraction {} must lie in (0, 1]", *k));
                r.ties.trim_ratio = 1.0 - *k;
            } else {
                if (!(*k >= 0.0 && *k < 1.0)) fail("params.k", fmt::format("trim ratio {} must lie in [0, 1)", *k));
                r.ties.trim_ratio = *k;
            }
        } else {
            r.ties.trim_ratio = scale_defaults().ties_k;
            note_default("params.k", format_number(r.ties.trim_ratio), scale_label());
        }
        r.ties.alpha = r.alpha;
    }

    if (uses_dare(effective)) {
        auto p = get_number(*params, "p", "params.p");
        if (!p) {
            p = scale_defaults().dare_p;
            if (!p) fail("params.p", fmt::format("required for {} at scale {}", method_name(effective), scale_name(r.scale)));
            note_default("params.p", format_number(*p), scale_label());
        }
        if (!(*p >= 0.0 && *p < 1.0)) fail("params.p", fmt::format("drop rate {} must lie in [0, 1)", *p));
        r.dare.drop_rate = *p;
        auto seed = get_integer(doc, "seed", "seed");
        if (!seed) fail("seed", fmt::format("required for method '{}'", method_name(effective)));
        if (*seed < 0) fail("seed", "must be >= 0");
        r.dare.seed = static_cast<std::uint64_t>(*seed);
    }

    if (effective == Method::sens) {
        auto t = get_number(*params, "temperature", "params.temperature");
        if (!t) {
            t = scale_defaults().sens_temperature;
            if (!t) fail("params.temperature", fmt::format("required for sens at scale {}", scale_name(r.scale)));
            note_default("params.temperature", format_number(*t), scale_label());
        }
        if (!(*t > 0.0)) fail("params.temperature", fmt::format("{} must be > 0", *t));
        r.sens.temperature = *t;
        r.sens.alpha = r.alpha;
    }

    if (r.method == Method::aim_post) {
        auto omega = get_number(*params, "omega", "params.omega");
        if (!omega) {
            omega = scale_defaults().aim_omega;
            if (!omega) fail("params.omega", fmt::format("required for aim_post at scale {}", scale_name(r.scale)));
            note_default("params.omega", format_number(*omega), scale_label());
        }
        if (!(*omega >= 0.0 && *omega <= 1.0)) fail("params.omega", fmt::format("{} must lie in [0, 1]", *omega));
        r.aim.omega = *omega;
    }

    if (effective == Method::twin) {
        if (auto rank = get_integer(*params, "rank", "params.rank")) {
            if (*rank < 1) fail("params.rank", "must be >= 1");
            r.rank.rank = static_cast<std::size_t>(*rank);
        }
        if (auto energy = get_number(*params, "energy", "params.energy")) {
            if (!(*energy > 0.0 && *energy <= 1.0)) fail("params.energy", fmt::format("{} must lie in (0, 1]", *energy));
            r.rank.energy = *energy;
        }
        if (r.rank.rank && r.rank.energy) fail("params.rank", "set either rank or energy, not both");
        if (!r.rank.rank && !r.rank.energy) fail("params.rank", "twin needs params.rank or params.energy");
    }

    if (r.method == Method::lore) {
        if (auto tau = get_number(*params, "tau", "params.tau")) {
            if (*tau < 0.0) fail("params.tau", "must be >= 0");
            r.lore.tau = *tau;
        } else {
            note_default("params.tau", format_number(r.lore.tau), "built-in");
        }
        if (auto rel = get_bool(*params, "tau_relative", "params.tau_relative")) {
            r.lore.tau_relative = *rel;
        } else {
            note_default("params.tau_relative", r.lore.tau_relative ? "true" : "false", "built-in");
        }
        if (auto it = get_integer(*params, "max_iters", "params.max_iters")) {
            if (*it < 1 || *it > 100000) fail("params.max_iters", "must lie in [1, 100000]");
            r.lore.max_iters = static_cast<int>(*it);
        } else {
            note_default("params.max_iters", std::to_string(r.lore.max_iters), "built-in");
        }
        if (auto tol = get_number(*params, "tol", "params.tol")) {
            if (!(*tol > 0.0)) fail("params.tol", "must be > 0");
            r.lore.tol = *tol;
        } else {
            note_default("params.tol", format_number(r.lore.tol), "built-in");
        }
        if (auto lambda = get_number(*params, "lambda", "params.lambda")) {
            r.lore.lambda = *lambda;
        } else {
            note_default("params.lambda", format_number(r.lore.lambda), "built-in");
        }
    }

    if (effective == Method::twin || r.method == Method::lore) {
        if (auto cap = get_integer(*params, "dense_cap", "params.dense_cap")) {
            if (*cap < 1) fail("params.dense_cap", "must be >= 1");
            r.svd.dense_cap = static_cast<std::size_t>(*cap);
        }
        if (auto s = get_integer(*params, "svd_seed", "params.svd_seed")) {
            if (*s < 0) fail("params.svd_seed", "must be >= 0");
            r.svd.seed = static_cast<std::uint64_t>(*s);
        }
    }

    if ((r.method == Method::aim_post || effective == Method::sens) && !r.stats_path) {
        fail("stats", fmt::format("required for method '{}'", method_name(r.method)));
    }

    r.dtype_default = r.method == Method::sens ? "fp32" : "bf16";
    bool dtype_given = false;
    if (const auto* dt = get_table(doc, "dtype", "dtype")) {
        check_keys(*dt, "dtype", {"default", "rules"});
        if (auto d = get_string(*dt, "default", "dtype.default")) {
            auto lowered = lower(*d);
            if (lowered == "source") {
                r.dtype_default = "source";
            } else {
                r.dtype_default = dtype_name(parse_dtype_field(*d, "dtype.default")) == "BF16" ? "bf16" : "fp32";
            }
            dtype_given = true;
        }
        if (const auto* rules = get_array(*dt, "rules", "dtype.rules")) {
            for (std::size_t i = 0; i < rules->size(); ++i) {
                const auto field = fmt::format("dtype.rules[{}]", i);
                const auto* t = (*rules)[i].as_table();
                if (!t) fail(field, "must be a table");
                check_keys(*t, field, {"pattern", "dtype"});
                auto pattern = get_string(*t, "pattern", field + ".pattern");
                auto d = get_string(*t, "dtype", field + ".dtype");
                if (!pattern) fail(field + ".pattern", "required");
                if (!d) fail(field + ".dtype", "required");
                r.dtype_policy.rules.push_back({*pattern, parse_dtype_field(*d, field + ".dtype")});
            }
        }
    }
    if (!dtype_given) {
        note_default("dtype.default", r.dtype_default, r.method == Method::sens ? "sens saves fp32" : "built-in");
    }
    if (r.dtype_default == "bf16") {
        r.dtype_policy.fallback = DType::bf16;
    } else if (r.dtype_default == "fp32") {
        r.dtype_policy.fallback = DType::f32;
    }
    return r;
}

MergeRecipe parse_recipe(const fs::path& path, const RecipeOverrides& overrides) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot read recipe '{}'", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_recipe_text(ss.str(), fs::absolute(path).parent_path(), overrides);
}

std::string recipe_to_toml(const MergeRecipe& r) {
    toml::table doc;
    doc.insert("method", std::string(method_name(r.method)));
    if (!r.scale_source.empty()) doc.insert("scale", std::string(scale_name(r.scale)));
    doc.insert("output", fs::absolute(r.output_path).string());
    if (r.method == Method::dare_ta || r.method == Method::dare_ties ||
        (r.method == Method::aim_post && uses_dare(r.inner))) {
        doc.insert("seed", static_cast<std::int64_t>(r.dare.seed));
    }
    if (r.stats_path) doc.insert("stats", fs::absolute(*r.stats_path).string());
    if (!r.skip_patterns.empty()) {
        toml::array skip;
        for (const auto& s : r.skip_patterns) skip.push_back(s);
        doc.insert("skip", std::move(skip));
    }
    if (!r.layer_pattern.empty()) doc.insert("layer_pattern", r.layer_pattern);
    if (r.max_shard_bytes) doc.insert("max_shard_bytes", static_cast<std::int64_t>(r.max_shard_bytes));
    if (r.base) {
        doc.insert("base", toml::table{{"id", r.base->id}, {"path", fs::absolute(r.base->path).string()}});
    }
    toml::array models;
    for (const auto& m : r.models) {
        toml::table t{{"id", m.id}, {"path", fs::absolute(m.path).string()}};
        if (m.lambda) t.insert("lambda", *m.lambda);
        models.push_back(std::move(t));
    }
    doc.insert("models", std::move(models));

    const Method effective = r.method == Method::aim_post ? r.inner : r.method;
    toml::table params;
    if (uses_task_lambda(effective) || uses_ties(effective) || effective == Method::sens) params.insert("alpha", r.alpha);
    if (uses_ties(effective)) params.insert("k", r.ties.trim_ratio);
    if (uses_dare(effective)) params.insert("p", r.dare.drop_rate);
    if (effective == Method::sens) params.insert("temperature", r.sens.temperature);
    if (r.method == Method::aim_post) {
        params.insert("omega", r.aim.omega);
        params.insert("inner", std::string(method_name(r.inner)));
    }
    if (effective == Method::twin) {
        if (r.rank.rank) params.insert("rank", static_cast<std::int64_t>(*r.rank.rank));
        if (r.rank.energy) params.insert("energy", *r.rank.energy);
    }
    if (r.method == Method::lore) {
        params.insert("tau", r.lore.tau);
        params.insert("tau_relative", r.lore.tau_relative);
        params.insert("max_iters", static_cast<std::int64_t>(r.lore.max_iters));
        params.insert("tol", r.lore.tol);
        params.insert("lambda", r.lore.lambda);
    }
    if (effective == Method::twin || r.method == Method::lore) {
        params.insert("dense_cap", static_cast<std::int64_t>(r.svd.dense_cap));
        params.insert("svd_seed", static_cast<std::int64_t>(r.svd.seed));
    }
    doc.insert("params", std::move(params));

    toml::table dtype{{"default", r.dtype_default}};
    if (!r.dtype_policy.rules.empty()) {
        toml::array rules;
        for (const auto& rule : r.dtype_policy.rules) {
            rules.push_back(toml::table{{"pattern", rule.pattern},
                                        {"dtype", std::string(rule.dtype == DType::bf16 ? "bf16" : "fp32")}});
        }
        dtype.insert("rules", std::move(rules));
    }
    doc.insert("dtype", std::move(dtype));

    if (!r.lambda_overrides.empty()) {
        toml::array lo;
        for (const auto& [pattern, lambda] : r.lambda_overrides) lo.push_back(toml::table{{"pattern", pattern}, {"lambda", lambda}});
        doc.insert("lambda_overrides", std::move(lo));
    }

    std::ostringstream out;
    out << doc << "\n";
    return out.str();
}

std::string recipe_to_json(const MergeRecipe& r) {
    json j;
    j["method"] = method_name(r.method);
    if (r.method == Method::aim_post) j["inner"] = method_name(r.inner);
    j["scale"] = scale_name(r.scale);
    j["scale_source"] = r.scale_source.empty() ? "unused" : r.scale_source;
    if (r.base) j["base"] = {{"id", r.base->id}, {"path", r.base->path.string()}};
    j["models"] = json::array();
    for (const auto& m : r.models) {
        json mj = {{"id", m.id}, {"path", m.path.string()}};
        if (m.lambda) mj["lambda"] = *m.lambda;
        j["models"].push_back(std::move(mj));
    }
    // Round-trips through TOML so the echo shows exactly the resolved parameters.
    auto resolved = toml::parse(recipe_to_toml(r));
    json params = json::object();
    if (const auto* p = resolved["params"].as_table()) {
        for (const auto& [key, node] : *p) {
            const std::string k(key.str());
            if (node.is_integer()) {
                params[k] = *node.value<std::int64_t>();
            } else if (node.is_floating_point()) {
                params[k] = *node.value<double>();
            } else if (node.is_boolean()) {
                params[k] = *node.value<bool>();
            } else if (node.is_string()) {
                params[k] = *node.value<std::string>();
            }
        }
    }
    j["params"] = params;
    if (r.method == Method::dare_ta || r.method == Method::dare_ties || (r.method == Method::aim_post && uses_dare(r.inner))) {
        j["seed"] = r.dare.seed;
    }
    j["dtype"] = {{"default", r.dtype_default}, {"rules", json::array()}};
    for (const auto& rule : r.dtype_policy.rules) {
        j["dtype"]["rules"].push_back({{"pattern", rule.pattern}, {"dtype", rule.dtype == DType::bf16 ? "bf16" : "fp32"}});
    }
    if (r.stats_path) j["stats"] = r.stats_path->string();
    j["skip"] = r.skip_patterns;
    j["layer_pattern"] = r.layer_pattern;
    j["lambda_overrides"] = json::array();
    for (const auto& [pattern, lambda] : r.lambda_overrides) j["lambda_overrides"].push_back({{"pattern", pattern}, {"lambda", lambda}});
    j["output"] = r.output_path.string();
    j["max_shard_bytes"] = r.max_shard_bytes;
    j["defaults_applied"] = r.defaults_applied;
    return j.dump(2);
}

SweepSpec SweepSpec::parse(std::string_view text) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos || eq == 0) {
        throw ValidationError(fmt::format("sweep: expected key=start:stop:step, got '{}'", text));
    }
    SweepSpec s;
    s.key = std::string(text.substr(0, eq));
    std::string rest(text.substr(eq + 1));
    std::array<double, 3> v{};
    std::size_t pos = 0;
    for (int i = 0; i < 3; ++i) {
        const auto colon = rest.find(':', pos);
        if ((i < 2) == (colon == std::string::npos)) {
            throw ValidationError(fmt::format("sweep: expected key=start:stop:step, got '{}'", text));
        }
        const auto part = rest.substr(pos, i < 2 ? colon - pos : std::string::npos);
        try {
            std::size_t used = 0;
            v[i] = std::stod(part, &used);
            if (used != part.size()) throw std::invalid_argument(part);
        } catch (const std::exception&) {
            throw ValidationError(fmt::format("sweep: '{}' is not a number", part));
        }
        pos = colon + 1;
    }
    s.start = v[0];
    s.stop = v[1];
    s.step = v[2];
    if (!(s.step > 0.0) || !std::isfinite(s.start) || !std::isfinite(s.stop) || s.stop < s.start) {
        throw ValidationError(fmt::format("sweep: need step > 0 and start <= stop in '{}'", text));
    }
    if ((s.stop - s.start) / s.step > 10000.0) throw ValidationError("sweep: more than 10000 grid points");
    return s;
}

std::vector<double> SweepSpec::values() const {
    std::vector<double> out;
    // Values are start + i*step, rounded to 12 significant digits so 0.1 steps print cleanly.
    const double slack = step * 1e-9;
    for (std::size_t i = 0;; ++i) {
        const double v = start + static_cast<double>(i) * step;
        if (v > stop + slack) break;
        out.push_back(std::stod(fmt::format("{:.12g}", v)));
    }
    return out;
}

std::vector<std::pair<std::string, std::string>> expand_sweep(const std::string& toml_text, const SweepSpec& sweep) {
    toml::table doc;
    try {
        doc = toml::parse(toml_text);
    } catch (const toml::parse_error& e) {
        throw ValidationError(fmt::format("recipe: malformed TOML: {}", e.description()));
    }
    static const std::set<std::string> integer_keys{"rank", "max_iters", "dense_cap"};
    static const std::set<std::string> sweepable{"alpha", "k", "p", "omega", "temperature", "tau", "tol", "lambda",
                                                  "energy", "rank", "max_iters", "dense_cap"};
    if (!sweepable.count(sweep.key)) throw ValidationError(fmt::format("sweep: params.{} cannot be swept", sweep.key));
    auto output = doc["output"].value<std::string>();
    if (!output) throw ValidationError("recipe: output: required");
    std::string out_base = *output;
    while (out_base.size() > 1 && (out_base.back() == '/' || out_base.back() == '\\')) out_base.pop_back();

    std::vector<std::pair<std::string, std::string>> out;
    for (double v : sweep.values()) {
        toml::table point = doc;
        if (!point.contains("params")) point.insert("params", toml::table{});
        auto* params = point["params"].as_table();
        if (!params) throw ValidationError("recipe: params: must be a table");
        std::string suffix;
        if (integer_keys.count(sweep.key)) {
            const auto iv = static_cast<std::int64_t>(std::llround(v));
            params->insert_or_assign(sweep.key, iv);
            suffix = fmt::format("{}{}", sweep.key, iv);
        } else {
            params->insert_or_assign(sweep.key, v);
            suffix = fmt::format("{}{}", sweep.key, v);
        }
        point.insert_or_assign("output", out_base + "_" + suffix);
        std::ostringstream ss;
        ss << point << "\n";
        out.emplace_back(suffix, ss.str());
    }
    return out;
}

} // namespace l2smerge
