// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "l2smerge/activation_merge.hpp"
#include "l2smerge/errors.hpp"
#include "l2smerge/lowrank.hpp"
#include "l2smerge/merge_core.hpp"
#include "l2smerge/metrics.hpp"
#include "l2smerge/parallel.hpp"
#include "l2smerge/pipeline.hpp"
#include "l2smerge/recipe.hpp"
#include "l2smerge/task_vectors.hpp"
#include "l2smerge/tensor_store.hpp"

namespace py = pybind11;
using namespace l2smerge;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const py::handle& obj) {
    auto arr = FloatArray::ensure(obj);
    if (!arr) throw ValidationError("tensor values must be convertible to a float32 array");
    Shape shape(arr.shape(), arr.shape() + arr.ndim());
    std::vector<float> values(arr.data(), arr.data() + arr.size());
    return Tensor(std::move(shape), std::move(values));
}

TensorMap to_map(const py::dict& d) {
    TensorMap m;
    for (const auto& [k, v] : d) m.insert(py::cast<std::string>(k), to_tensor(v));
    return m;
}

py::array_t<float> to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    py::array_t<float> arr(shape);
    std::copy(t.values.begin(), t.values.end(), arr.mutable_data());
    return arr;
}

py::dict to_dict(const TensorMap& m) {
    py::dict d;
    for (const auto& [name, t] : m) d[py::str(name)] = to_array(t);
    return d;
}

std::vector<TaskVector> vectors_of(const TensorMap& base, const py::dict& models) {
    std::vector<TaskVector> out;
    for (const auto& [k, v] : models) {
        out.push_back(compute_task_vector(to_map(py::cast<py::dict>(v)), base, py::cast<std::string>(k)));
    }
    return out;
}

DTypePolicy policy_of(const std::string& dtype) {
    if (dtype == "source") return DTypePolicy::keep_source();
    auto dt = parse_dtype(dtype == "bf16" ? "BF16" : dtype == "fp32" ? "F32" : dtype);
    if (!dt) throw ValidationError("dtype must be 'bf16', 'fp32' or 'source'");
    return DTypePolicy::all(*dt);
}

ResponseRecord record_of(const py::dict& d) {
    ResponseRecord r;
    if (d.contains("id")) r.id = py::str(d["id"]);
    r.dataset = py::cast<std::string>(d["dataset"]);
    r.response = d.contains("response") ? py::cast<std::string>(d["response"]) : std::string();
    if (d.contains("token_count") && !d["token_count"].is_none()) r.token_count = py::cast<std::uint64_t>(d["token_count"]);
    if (d.contains("correct") && !d["correct"].is_none()) r.correct = py::cast<bool>(d["correct"]);
    if (d.contains("difficulty") && !d["difficulty"].is_none()) r.difficulty = py::cast<int>(d["difficulty"]);
    return r;
}

CorpusReport report_of(const py::list& records, bool strict) {
    std::vector<ResponseRecord> rs;
    for (const auto& r : records) rs.push_back(record_of(py::cast<py::dict>(r)));
    return corpus_stats(rs, strict ? MatchMode::word_boundary : MatchMode::substring);
}

} // namespace

PYBIND11_MODULE(_l2smerge, m) {
    m.doc() = "Checkpoint merging and response-length metrics";

    static py::exception<Error> error(m, "L2SMergeError");
    static py::exception<ValidationError> validation(m, "ValidationError", error.ptr());
    static py::exception<IoError> io(m, "IoError", error.ptr());
    static py::exception<NumericalError> numerical(m, "NumericalError", error.ptr());
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ValidationError& e) {
            py::set_error(validation, e.what());
        } catch (const IoError& e) {
            py::set_error(io, e.what());
        } catch (const NumericalError& e) {
            py::set_error(numerical, e.what());
        } catch (const Error& e) {
            py::set_error(error, e.what());
        }
    });

    m.attr("__version__") = std::string(tool_version());
    m.def("set_threads", [](std::size_t n) { set_thread_count(n); }, py::arg("n"));

    m.def("load_checkpoint", [](const std::filesystem::path& p) { return to_dict(load_checkpoint(p)); }, py::arg("path"));
    m.def(
        "save_checkpoint",
        [](const py::dict& tensors, const std::filesystem::path& p, const std::string& dtype) {
            write_checkpoint(to_map(tensors), p, policy_of(dtype));
        },
        py::arg("tensors"), py::arg("path"), py::arg("dtype") = "bf16");
    m.def("content_fingerprint", [](const py::dict& t) { return fingerprint_hex(content_fingerprint(to_map(t))); });
    m.def("bf16_round", [](const FloatArray& a) {
        py::array_t<float> out(std::vector<py::ssize_t>(a.shape(), a.shape() + a.ndim()));
        for (py::ssize_t i = 0; i < a.size(); ++i) out.mutable_data()[i] = bf16_to_fp32(fp32_to_bf16(a.data()[i]));
        return out;
    });

    m.def("average_merge", [](const py::list& models) {
        std::vector<TensorMap> maps;
        for (const auto& d : models) maps.push_back(to_map(py::cast<py::dict>(d)));
        return to_dict(average_merge(maps));
    });
    m.def(
        "task_arithmetic",
        [](const py::dict& base, const py::dict& models, const std::map<std::string, double>& lambdas) {
            auto b = to_map(base);
            auto vs = vectors_of(b, models);
            Coefficients c;
            c.per_model = lambdas;
            return to_dict(apply_task_vectors(b, vs, c));
        },
        py::arg("base"), py::arg("models"), py::arg("lambdas"));
    m.def(
        "ties_merge",
        [](const py::dict& base, const py::dict& models, double trim_ratio, double alpha) {
            auto b = to_map(base);
            return to_dict(ties_merge(b, vectors_of(b, models), TiesParams{trim_ratio, alpha}));
        },
        py::arg("base"), py::arg("models"), py::arg("trim_ratio") = 0.8, py::arg("alpha") = 1.0);
    m.def(
        "dare_ties",
        [](const py::dict& base, const py::dict& models, double drop_rate, std::uint64_t seed, double trim_ratio, double alpha) {
            auto b = to_map(base);
            return to_dict(dare_ties(b, vectors_of(b, models), DareParams{drop_rate, seed}, TiesParams{trim_ratio, alpha}));
        },
        py::arg("base"), py::arg("models"), py::arg("drop_rate") = 0.3, py::arg("seed") = 0, py::arg("trim_ratio") = 0.8,
        py::arg("alpha") = 1.0);
    m.def(
        "lore_merge",
        [](const py::list& models, double tau, bool tau_relative, int max_iters, double tol, double lambda) {
            std::vector<TensorMap> maps;
            for (const auto& d : models) maps.push_back(to_map(py::cast<py::dict>(d)));
            LoreTrace trace;
            auto out = lore_merge(maps, LoreParams{tau, tau_relative, max_iters, tol, lambda}, {}, &trace);
            return py::make_tuple(to_dict(out), trace.objective);
        },
        py::arg("models"), py::arg("tau") = 0.05, py::arg("tau_relative") = true, py::arg("max_iters") = 20,
        py::arg("tol") = 1e-6, py::arg("lambda_") = 1.0);
    m.def(
        "svt",
        [](const FloatArray& a, double tau) {
            if (a.ndim() != 2) throw ValidationError("svt needs a 2-D array");
            auto r = svt(Matrix::from_tensor(to_tensor(a)), tau);
            return to_array(r.value.to_tensor({a.shape(0), a.shape(1)}));
        },
        py::arg("a"), py::arg("tau"));
    m.def(
        "sens_coefficients",
        [](const std::string& stats_json, double alpha, double temperature, const std::vector<std::string>& models,
           const std::vector<std::string>& layers) {
            return sens_coefficients(parse_stats(stats_json), SensParams{alpha, temperature}, models, layers).per_layer;
        },
        py::arg("stats_json"), py::arg("alpha"), py::arg("temperature"), py::arg("models"), py::arg("layers"));

    m.def(
        "resolve_recipe",
        [](const std::filesystem::path& p, const std::optional<std::string>& scale) {
            RecipeOverrides o;
            if (scale) {
                o.scale = parse_scale(*scale);
                if (!o.scale) throw ValidationError("unknown scale '" + *scale + "'");
            }
            return recipe_to_json(parse_recipe(p, o));
        },
        py::arg("path"), py::arg("scale") = std::nullopt);
    m.def(
        "run_merge",
        [](const std::filesystem::path& p, const std::optional<std::filesystem::path>& out, bool overwrite) {
            RecipeOverrides o;
            o.output = out;
            auto recipe = parse_recipe(p, o);
            py::gil_scoped_release release;
            return run_merge(recipe, MergeOptions{overwrite}).to_json();
        },
        py::arg("recipe"), py::arg("out") = std::nullopt, py::arg("overwrite") = false);
    m.def(
        "diff_checkpoints",
        [](const std::filesystem::path& a, const std::filesystem::path& b, std::size_t top) {
            return diff_checkpoints(load_checkpoint(a), load_checkpoint(b), top).to_json();
        },
        py::arg("a"), py::arg("b"), py::arg("top") = 10);

    m.def(
        "detect_reflection",
        [](const std::string& text, bool strict) {
            auto r = detect_reflection(text, strict ? MatchMode::word_boundary : MatchMode::substring);
            return py::make_tuple(r.reflective, r.keyword_count);
        },
        py::arg("text"), py::arg("strict") = false);
    m.def(
        "corpus_report",
        [](const py::list& records, const std::optional<py::list>& baseline, bool strict) {
            auto cand = report_of(records, strict);
            if (!baseline) return report_to_json(cand);
            auto base = report_of(*baseline, strict);
            auto red = length_reduction(cand, base);
            return report_to_json(cand, &base, &red);
        },
        py::arg("records"), py::arg("baseline") = std::nullopt, py::arg("strict") = false);
}
