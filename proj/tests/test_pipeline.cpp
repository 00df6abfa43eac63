// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstdlib>
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <sys/wait.h>

#include "l2smerge/activation_merge.hpp"
#include "l2smerge/errors.hpp"
#include "l2smerge/parallel.hpp"
#include "l2smerge/pipeline.hpp"
#include "support/toy.hpp"

using namespace l2smerge;
using namespace l2smerge::testing;

namespace {

/// Resolved recipe echo without the record of which defaults were filled in.
std::string resolved_json(const MergeRecipe& r) {
    auto j = nlohmann::json::parse(recipe_to_json(r));
    j.erase("defaults_applied");
    return j.dump();
}

/// Base plus two experts on disk, each with a config.json.
struct Workspace {
    TempDir dir;
    TensorMap base;
    std::vector<TensorMap> models;

    explicit Workspace(std::uint64_t seed, bool identical = false) {
        std::mt19937_64 rng(seed);
        base = random_checkpoint(toy_layout(), rng, 1.0, true);
        for (int i = 0; i < 2; ++i) models.push_back(identical ? base : perturbed(base, rng, 0.05, true));
        save("base", base);
        save("math", models[0]);
        save("code", models[1]);
        CalibrationStats stats;
        for (const auto& [name, t] : base) {
            if (t.is_matrix()) stats.activation[name] = std::vector<float>(t.rows(), 1.0f);
        }
        for (const auto* id : {"math", "code"}) {
            for (const auto* layer : {"0", "1", "global"}) stats.layer_sensitivity[id][layer] = 1.0 + std::uniform_real_distribution<>(0, 1)(rng);
            stats.task_sensitivity[id] = 1.0;
        }
        stats.activation["lm_head.weight"][0] = 3.0f;
        write_text(dir / "stats.json", stats_to_json(stats));
    }

    void save(const std::string& name, const TensorMap& m) {
        write_checkpoint_dir(m, dir / name, DTypePolicy::all(DType::bf16));
        write_text(dir / name / "config.json", "{\"name\": \"" + name + "\"}");
    }

    std::string recipe_text(const std::string& method, const std::string& extra = "", const std::string& out = "out") const {
        return "method = \"" + method + "\"\nscale = \"7B\"\nseed = 7\nstats = \"stats.json\"\noutput = \"" + out + "\"\n" +
               extra +
               "[base]\nid = \"base\"\npath = \"base\"\n[[models]]\nid = \"math\"\npath = \"math\"\n[[models]]\nid = "
               "\"code\"\npath = \"code\"\n";
    }

    MergeRecipe recipe(const std::string& method, const std::string& params = "", const std::string& out = "out") const {
        std::string text = recipe_text(method, "", out);
        if (method == "dare_ta" || method == "dare_ties" || method == "twin" || method == "lore" || !params.empty()) {
            std::string p = params;
            if (method == "twin" && p.empty()) p = "rank = 2\n";
            text += "[params]\n" + p;
        }
        if (method != "dare_ta" && method != "dare_ties") text.replace(text.find("seed = 7\n"), 9, "");
        if (method != "sens" && method != "aim_post") text.replace(text.find("stats = \"stats.json\"\n"), 21, "");
        return parse_recipe_text(text, dir.path());
    }
};

const std::vector<std::string> kMethods{"average", "task_arithmetic", "ties", "dare_ta", "dare_ties",
                                        "twin",    "lore",            "aim_post", "sens"};

} // namespace

TEST(Pipeline, AverageOfIdenticalModelsKeepsFingerprint) {
    Workspace ws(71, true);
    auto m = run_merge(ws.recipe("average"));
    EXPECT_EQ(m.output_fingerprint, fingerprint_hex(content_fingerprint(ws.base)));
    EXPECT_TRUE(bitwise_equal(load_checkpoint(ws.dir / "out"), ws.base));
}

TEST(Pipeline, EveryMethodTracesEveryTensor) {
    Workspace ws(72);
    for (const auto& method : kMethods) {
        auto m = run_merge(ws.recipe(method, "", "out_" + method));
        const auto out = load_checkpoint(ws.dir / ("out_" + method));
        EXPECT_EQ(m.trace.size(), out.size()) << method;
        for (const auto& [name, _] : out) EXPECT_TRUE(m.trace.count(name)) << method << " " << name;
        EXPECT_EQ(m.output_fingerprint, fingerprint_hex(content_fingerprint(out))) << method;
    }
}

TEST(Pipeline, OutputDirectoryLayout) {
    Workspace ws(73);
    auto m = run_merge(ws.recipe("ties"));
    const auto out = ws.dir / "out";
    EXPECT_EQ(read_text(out / "config.json"), "{\"name\": \"base\"}");
    EXPECT_TRUE(fs::exists(out / "merge_manifest.json"));
    EXPECT_TRUE(fs::exists(out / "recipe.resolved.toml"));
    auto j = nlohmann::json::parse(read_text(out / "merge_manifest.json"));
    EXPECT_EQ(j["output"]["content_fingerprint"], m.output_fingerprint);
    EXPECT_EQ(j["inputs"].size(), 3u);
    auto again = parse_recipe(out / "recipe.resolved.toml");
    EXPECT_EQ(resolved_json(again), resolved_json(ws.recipe("ties")));
    for (const auto& e : fs::directory_iterator(ws.dir.path())) {
        EXPECT_EQ(e.path().filename().string().find(".out.tmp"), std::string::npos);
    }
}

TEST(Pipeline, ShardedOutput) {
    Workspace ws(74);
    auto r = ws.recipe("task_arithmetic");
    r.max_shard_bytes = 400;
    run_merge(r);
    EXPECT_TRUE(fs::exists(ws.dir / "out" / "model.safetensors.index.json"));
}

TEST(Pipeline, SensWritesFp32) {
    Workspace ws(75);
    run_merge(ws.recipe("sens"));
    for (const auto& [name, t] : load_checkpoint(ws.dir / "out")) EXPECT_EQ(t.source_dtype, DType::f32) << name;
    run_merge(ws.recipe("ties", "", "out_ties"));
    for (const auto& [name, t] : load_checkpoint(ws.dir / "out_ties")) EXPECT_EQ(t.source_dtype, DType::bf16) << name;
}

TEST(Pipeline, RepeatedRunsAreIdentical) {
    Workspace ws(76);
    for (const auto& method : kMethods) {
        auto r = ws.recipe(method, "", "det");
        set_thread_count(1);
        auto first = run_merge(r, MergeOptions{true});
        const auto bytes1 = read_text(ws.dir / "det" / "model.safetensors");
        set_thread_count(4);
        auto second = run_merge(r, MergeOptions{true});
        const auto bytes2 = read_text(ws.dir / "det" / "model.safetensors");
        set_thread_count(0);
        EXPECT_EQ(first.to_json(false), second.to_json(false)) << method;
        EXPECT_TRUE(bytes1 == bytes2) << method;
    }
}

TEST(Pipeline, ExistingOutputIsRefused) {
    Workspace ws(77);
    run_merge(ws.recipe("ties"));
    EXPECT_THROW(run_merge(ws.recipe("ties")), IoError);
    EXPECT_NO_THROW(run_merge(ws.recipe("ties"), MergeOptions{true}));
}

TEST(Pipeline, NonFiniteMergeLeavesNothingBehind) {
    Workspace ws(78);
    auto bad = ws.models[0];
    bad.at("lm_head.weight").values[3] = std::numeric_limits<float>::infinity();
    fs::remove_all(ws.dir / "math");
    ws.save("math", bad);
    EXPECT_THROW(run_merge(ws.recipe("task_arithmetic")), NumericalError);
    EXPECT_FALSE(fs::exists(ws.dir / "out"));
    for (const auto& e : fs::directory_iterator(ws.dir.path())) {
        EXPECT_EQ(e.path().filename().string().find(".tmp-"), std::string::npos);
    }
}

TEST(Pipeline, DareRecordsCounts) {
    Workspace ws(79);
    auto m = run_merge(ws.recipe("dare_ties"));
    ASSERT_TRUE(m.dare.has_value());
    EXPECT_EQ(m.dare->kept + m.dare->dropped, 2 * ws.base.parameter_count());
}

TEST(Pipeline, LoreRecordsObjective) {
    Workspace ws(80);
    auto m = run_merge(ws.recipe("lore"));
    ASSERT_TRUE(m.lore.has_value());
    EXPECT_GE(m.lore->objective.size(), 2u);
}

TEST(Diff, IdenticalCheckpointsHaveZeroDifference) {
    std::mt19937_64 rng(81);
    auto a = random_checkpoint(toy_layout(), rng);
    auto d = diff_checkpoints(a, a);
    EXPECT_EQ(d.max_abs, 0.0);
    EXPECT_EQ(d.mean_abs, 0.0);
    EXPECT_EQ(d.counts[0], d.elements);
    EXPECT_EQ(d.fraction_above_threshold, 0.0);
    EXPECT_EQ(d.elements, a.parameter_count());
}

TEST(Diff, ThresholdFraction) {
    TensorMap a, b;
    a.insert("x", Tensor({4}, {0.0f, 0.0f, 0.0f, 0.0f}));
    b.insert("x", Tensor({4}, {0.003f, -0.003f, 0.001f, 0.0f}));
    auto d = diff_checkpoints(a, b);
    EXPECT_DOUBLE_EQ(d.fraction_above_threshold, 0.5);
    EXPECT_NEAR(d.max_abs, 0.003, 1e-9);
}

TEST(Diff, MatchesDoubleReference) {
    std::mt19937_64 rng(82);
    auto a = random_checkpoint(toy_layout(), rng);
    auto b = perturbed(a, rng, 0.01);
    auto d = diff_checkpoints(a, b, 3);
    double sum = 0.0, peak = 0.0;
    std::size_t n = 0;
    for (const auto& [name, t] : a) {
        for (std::size_t j = 0; j < t.values.size(); ++j) {
            const double x = std::abs(static_cast<double>(t.values[j]) - b.at(name).values[j]);
            sum += x;
            peak = std::max(peak, x);
            ++n;
        }
    }
    EXPECT_NEAR(d.mean_abs, sum / static_cast<double>(n), 1e-12);
    EXPECT_EQ(d.max_abs, peak);
    EXPECT_EQ(d.top.size(), 3u);
    EXPECT_GE(d.top[0].mean_abs, d.top[1].mean_abs);
    std::uint64_t total = 0;
    for (auto c : d.counts) total += c;
    EXPECT_EQ(total, d.elements);
    EXPECT_THROW(diff_checkpoints(a, random_checkpoint(toy_layout(8, 13), rng)), ValidationError);
}

TEST(Inspect, ListsAndDescribes) {
    Workspace ws(83);
    const auto listing = inspect_checkpoint(ws.dir / "base");
    EXPECT_NE(listing.find("lm_head.weight"), std::string::npos);
    const auto one = inspect_checkpoint(ws.dir / "base", "model.norm.weight");
    EXPECT_NE(one.find("model.norm.weight"), std::string::npos);
    EXPECT_THROW(inspect_checkpoint(ws.dir / "base", "nope"), ValidationError);
}

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(L2SMERGE_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST(Cli, ExitCodesFollowErrorKinds) {
    Workspace ws(84);
    write_text(ws.dir / "ok.toml", ws.recipe_text("ties"));
    write_text(ws.dir / "bad.toml", ws.recipe_text("ties", "bogus = 1\n"));
    EXPECT_EQ(run_cli("merge --recipe " + (ws.dir / "ok.toml").string()), 0);
    EXPECT_TRUE(fs::exists(ws.dir / "out" / "model.safetensors"));
    EXPECT_EQ(run_cli("merge --recipe " + (ws.dir / "ok.toml").string()), 3);
    EXPECT_EQ(run_cli("merge --recipe " + (ws.dir / "bad.toml").string()), 2);
    EXPECT_EQ(run_cli("merge --recipe " + (ws.dir / "missing.toml").string()), 3);
    EXPECT_EQ(run_cli("merge"), 2);

    auto bad = ws.models[0];
    bad.at("lm_head.weight").values[0] = std::nanf("");
    fs::remove_all(ws.dir / "math");
    ws.save("math", bad);
    write_text(ws.dir / "nan.toml", ws.recipe_text("ties", "", "nan_out"));
    EXPECT_EQ(run_cli("merge --recipe " + (ws.dir / "nan.toml").string()), 4);

    EXPECT_EQ(run_cli("diff " + (ws.dir / "base").string() + " " + (ws.dir / "out").string()), 0);
    EXPECT_EQ(run_cli("inspect " + (ws.dir / "base").string()), 0);
}

TEST(Cli, SweepDryRunWritesRecipes) {
    Workspace ws(85);
    write_text(ws.dir / "ta.toml", ws.recipe_text("task_arithmetic"));
    EXPECT_EQ(run_cli("merge --recipe " + (ws.dir / "ta.toml").string() + " --sweep alpha=0.2:0.4:0.1 --dry-run"), 0);
    int count = 0;
    for (const auto& e : fs::directory_iterator(ws.dir.path())) {
        const auto name = e.path().filename().string();
        if (name.starts_with("ta.alpha")) ++count;
    }
    EXPECT_EQ(count, 3);
    EXPECT_FALSE(fs::exists(ws.dir / "out_alpha0.2"));
}
