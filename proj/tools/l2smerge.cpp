// SPDX-License-Identifier: Apache-2.0
// l2smerge command-line interface.
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI/CLI11.hpp>
#include <fmt/core.h>

#include "l2smerge/errors.hpp"
#include "l2smerge/metrics.hpp"
#include "l2smerge/parallel.hpp"
#include "l2smerge/pipeline.hpp"
#include "l2smerge/recipe.hpp"

namespace fs = std::filesystem;
using namespace l2smerge;

namespace {

std::string read_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError(fmt::format("cannot read '{}'", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text;
    if (!out) throw IoError(fmt::format("cannot write '{}'", path.string()));
}

struct MergeArgs {
    std::string recipe;
    std::string out;
    std::size_t threads = 0;
    std::string sweep;
    std::string scale;
    bool trim_is_keep = false;
    bool force = false;
    bool dry_run = false;
};

RecipeOverrides overrides_from(const MergeArgs& a) {
    RecipeOverrides o;
    if (!a.scale.empty()) {
        o.scale = parse_scale(a.scale);
        if (!o.scale) throw ValidationError(fmt::format("--scale: unknown scale '{}'", a.scale));
    }
    if (a.trim_is_keep) o.trim_is_keep = true;
    return o;
}

void print_summary(const MergeRecipe& recipe, const MergeManifest& m) {
    fmt::print("merged {} tensors with {} into {}\n", m.trace.size(), method_name(recipe.method),
               recipe.output_path.string());
    fmt::print("output fingerprint {}  ({:.2f} s)\n", m.output_fingerprint, m.wall_seconds);
    for (const auto& d : recipe.defaults_applied) fmt::print("  default: {}\n", d);
}

int run_merge_command(const MergeArgs& a) {
    if (a.threads) set_thread_count(a.threads);
    auto overrides = overrides_from(a);
    const fs::path recipe_path = fs::absolute(a.recipe);
    MergeOptions options{a.force};

    if (a.sweep.empty()) {
        if (!a.out.empty()) overrides.output = fs::absolute(a.out);
        auto recipe = parse_recipe(recipe_path, overrides);
        if (a.dry_run) {
            fmt::print("{}", recipe_to_toml(recipe));
            return 0;
        }
        print_summary(recipe, run_merge(recipe, options));
        return 0;
    }

    const auto spec = SweepSpec::parse(a.sweep);
    const auto text = read_file(recipe_path);
    const fs::path sweep_dir = a.out.empty() ? recipe_path.parent_path() : fs::absolute(a.out);
    fs::create_directories(sweep_dir);
    for (const auto& [suffix, point] : expand_sweep(text, spec)) {
        const fs::path point_path = sweep_dir / fmt::format("{}.{}.toml", recipe_path.stem().string(), suffix);
        write_file(point_path, point);
        // Relative paths in the grid recipes keep resolving against the original recipe's directory.
        auto recipe = parse_recipe_text(point, recipe_path.parent_path(), overrides);
        fmt::print("{}\n", point_path.string());
        if (!a.dry_run) print_summary(recipe, run_merge(recipe, options));
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weight-space merging of reasoning checkpoints and long-to-short response metrics"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(tool_version()));

    MergeArgs merge;
    auto* merge_cmd = app.add_subcommand("merge", "Run a merge recipe");
    merge_cmd->add_option("--recipe", merge.recipe, "TOML recipe")->required();
    merge_cmd->add_option("--out", merge.out, "Output directory (with --sweep: where grid recipes are written)");
    merge_cmd->add_option("--threads", merge.threads, "Worker threads (default: L2SMERGE_THREADS or all cores)");
    merge_cmd->add_option("--sweep", merge.sweep, "Grid over one parameter, e.g. alpha=0.5:0.8:0.05");
    merge_cmd->add_option("--scale", merge.scale, "Override the detected model scale (1.5B, 7B, 14B, 32B)");
    merge_cmd->add_flag("--trim-is-keep", merge.trim_is_keep, "Read TIES k as the fraction kept");
    merge_cmd->add_flag("--force", merge.force, "Replace an existing output directory");
    merge_cmd->add_flag("--dry-run", merge.dry_run, "Print the resolved recipe (or write grid recipes) without merging");

    std::string inspect_path, inspect_tensor;
    auto* inspect_cmd = app.add_subcommand("inspect", "List tensors or summarize one tensor");
    inspect_cmd->add_option("checkpoint", inspect_path, "Container file or checkpoint directory")->required();
    inspect_cmd->add_option("--tensor", inspect_tensor, "Tensor to summarize");

    std::string diff_a, diff_b, diff_json;
    std::size_t diff_top = 10;
    auto* diff_cmd = app.add_subcommand("diff", "Parameter shift statistics between two checkpoints");
    diff_cmd->add_option("a", diff_a)->required();
    diff_cmd->add_option("b", diff_b)->required();
    diff_cmd->add_option("--top", diff_top, "Largest-shift tensors to list");
    diff_cmd->add_option("--json", diff_json, "Write the full report as JSON");

    std::string responses, baseline, report_path, markdown_path;
    bool strict = false;
    auto* metrics_cmd = app.add_subcommand("metrics", "Length, reflection and accuracy statistics of a response corpus");
    metrics_cmd->add_option("--responses", responses, "JSONL of responses")->required();
    metrics_cmd->add_option("--baseline", baseline, "JSONL of baseline responses for length reduction");
    metrics_cmd->add_option("--report", report_path, "Write the JSON report here");
    metrics_cmd->add_option("--markdown", markdown_path, "Write a markdown summary here");
    metrics_cmd->add_flag("--strict-boundaries", strict, "Match keywords on word boundaries only");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : static_cast<int>(ErrorKind::validation);
    }

    try {
        if (*merge_cmd) return run_merge_command(merge);
        if (*inspect_cmd) {
            fmt::print("{}", inspect_checkpoint(inspect_path,
                                                inspect_tensor.empty() ? std::nullopt : std::optional(inspect_tensor)));
            return 0;
        }
        if (*diff_cmd) {
            auto report = diff_checkpoints(load_checkpoint(diff_a), load_checkpoint(diff_b), diff_top);
            fmt::print("{}", report.to_text());
            if (!diff_json.empty()) write_file(diff_json, report.to_json());
            return 0;
        }
        if (*metrics_cmd) {
            const auto mode = strict ? MatchMode::word_boundary : MatchMode::substring;
            CorpusAccumulator cand(mode);
            accumulate_file(responses, cand);
            if (cand.size() == 0) throw ValidationError(fmt::format("'{}' holds no records", responses));
            const auto report = cand.report();
            std::optional<CorpusReport> base;
            std::optional<LengthReduction> reduction;
            if (!baseline.empty()) {
                CorpusAccumulator b(mode);
                accumulate_file(baseline, b);
                if (b.size() == 0) throw ValidationError(fmt::format("'{}' holds no records", baseline));
                base = b.report();
                reduction = length_reduction(report, *base);
            }
            const auto* bp = base ? &*base : nullptr;
            const auto* rp = reduction ? &*reduction : nullptr;
            const auto md = report_to_markdown(report, bp, rp);
            if (!report_path.empty()) write_file(report_path, report_to_json(report, bp, rp));
            if (!markdown_path.empty()) write_file(markdown_path, md);
            fmt::print("{}", md);
            return 0;
        }
    } catch (const Error& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return static_cast<int>(ErrorKind::io);
    } catch (const std::exception& e) {
        fmt::print(stderr, "error: {}\n", e.what());
        return 1;
    }
    return 0;
}
