// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "l2smerge/errors.hpp"
#include "l2smerge/recipe.hpp"
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

const std::string kModels = R"(
output = "out"
[base]
id = "base"
path = "base"
[[models]]
id = "math"
path = "math"
[[models]]
id = "code"
path = "code"
)";

std::string recipe(const std::string& head, const std::string& params = "") {
    return head + kModels + (params.empty() ? "" : "[params]\n" + params);
}

std::string error_of(const std::string& text, const RecipeOverrides& o = {}) {
    try {
        parse_recipe_text(text, "/r", o);
    } catch (const ValidationError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(Recipe, TiesDefaultsAtSevenB) {
    auto r = parse_recipe_text(recipe("method = \"ties\"\nscale = \"7B\"\n"), "/r");
    EXPECT_EQ(r.method, Method::ties);
    EXPECT_DOUBLE_EQ(r.ties.trim_ratio, 0.8);
    EXPECT_DOUBLE_EQ(r.ties.alpha, 1.0);
    EXPECT_EQ(r.scale_source, "recipe");
    EXPECT_EQ(r.output_path, fs::path("/r/out"));
    EXPECT_EQ(r.base->path, fs::path("/r/base"));
    EXPECT_FALSE(r.defaults_applied.empty());
}

TEST(Recipe, FourteenBDefaults) {
    auto ties = parse_recipe_text(recipe("method = \"ties\"\nscale = \"14b\"\n"), "/r");
    EXPECT_DOUBLE_EQ(ties.ties.trim_ratio, 0.2);
    EXPECT_DOUBLE_EQ(ties.ties.alpha, 0.5);
    auto dare = parse_recipe_text(recipe("method = \"dare_ta\"\nscale = \"14B\"\nseed = 1\n"), "/r");
    EXPECT_DOUBLE_EQ(dare.dare.drop_rate, 0.4);
    EXPECT_DOUBLE_EQ(dare.alpha, 0.7);
    auto sens = parse_recipe_text(recipe("method = \"sens\"\nscale = \"14B\"\nstats = \"s.json\"\n"), "/r");
    EXPECT_DOUBLE_EQ(sens.sens.alpha, 0.8);
    EXPECT_DOUBLE_EQ(sens.sens.temperature, 6.0);
    EXPECT_EQ(sens.dtype_default, "fp32");
}

TEST(Recipe, ThirtyTwoBHasNoDareDefault) {
    EXPECT_NE(error_of(recipe("method = \"dare_ta\"\nscale = \"32B\"\nseed = 1\n")).find("params.p"), std::string::npos);
    auto r = parse_recipe_text(recipe("method = \"ties\"\nscale = \"32B\"\n"), "/r");
    EXPECT_DOUBLE_EQ(r.ties.trim_ratio, 0.25);
    EXPECT_DOUBLE_EQ(r.ties.alpha, 0.55);
}

TEST(Recipe, ScaleOverrideWins) {
    RecipeOverrides o;
    o.scale = Scale::b14;
    auto r = parse_recipe_text(recipe("method = \"ties\"\nscale = \"7B\"\n"), "/r", o);
    EXPECT_EQ(r.scale_source, "override");
    EXPECT_DOUBLE_EQ(r.ties.trim_ratio, 0.2);
}

TEST(Recipe, ScaleDetectedFromBaseParameterCount) {
    EXPECT_EQ(scale_for_parameter_count(1'543'000'000), Scale::b1_5);
    EXPECT_EQ(scale_for_parameter_count(7'600'000'000), Scale::b7);
    EXPECT_EQ(scale_for_parameter_count(14'700'000'000), Scale::b14);
    EXPECT_EQ(scale_for_parameter_count(32'000'000'000), Scale::b32);
    EXPECT_EQ(scale_for_parameter_count(1000), Scale::b1_5);

    TempDir dir;
    std::mt19937_64 rng(61);
    write_checkpoint_dir(random_checkpoint(toy_layout(), rng), dir / "base", DTypePolicy::all(DType::bf16));
    auto r = parse_recipe_text(recipe("method = \"ties\"\n"), dir.path());
    EXPECT_EQ(r.scale_source, "detected");
    EXPECT_EQ(r.scale, Scale::b1_5);
}

TEST(Recipe, ExplicitValuesNeedNoScale) {
    auto r = parse_recipe_text(recipe("method = \"task_arithmetic\"\n", "alpha = 0.3\n"), "/nonexistent");
    EXPECT_DOUBLE_EQ(r.alpha, 0.3);
    EXPECT_TRUE(r.scale_source.empty());
}

TEST(Recipe, DropRateOneRejected) {
    const auto e = error_of(recipe("method = \"dare_ta\"\nscale = \"7B\"\nseed = 1\n", "p = 1.0\n"));
    EXPECT_NE(e.find("params.p"), std::string::npos) << e;
}

TEST(Recipe, SensWithoutStatsNamesTheField) {
    const auto e = error_of(recipe("method = \"sens\"\nscale = \"7B\"\n"));
    EXPECT_NE(e.find("stats"), std::string::npos) << e;
}

TEST(Recipe, UnknownFieldsAndMethodsRejected) {
    auto e = error_of(recipe("method = \"ties\"\nscale = \"7B\"\n", "alpah = 0.3\n"));
    EXPECT_NE(e.find("params.alpah"), std::string::npos) << e;
    e = error_of(recipe("method = \"slerp\"\n"));
    EXPECT_NE(e.find("unknown method 'slerp'"), std::string::npos) << e;
    e = error_of(recipe("method = \"ties\"\nscale = \"70B\"\n"));
    EXPECT_NE(e.find("scale"), std::string::npos) << e;
    EXPECT_NE(error_of("method = [").find("malformed TOML"), std::string::npos);
}

TEST(Recipe, StructuralRequirements) {
    EXPECT_NE(error_of(recipe("method = \"dare_ties\"\nscale = \"7B\"\n")).find("seed"), std::string::npos);
    EXPECT_NE(error_of("method = \"ties\"\noutput = \"o\"\n[base]\nid = \"b\"\npath = \"b\"\n[[models]]\nid = \"a\"\npath = \"a\"\n")
                  .find("models"),
              std::string::npos);
    EXPECT_NE(error_of("method = \"task_arithmetic\"\noutput = \"o\"\n[[models]]\nid = \"a\"\npath = \"a\"\n").find("base"),
              std::string::npos);
    EXPECT_NE(error_of(recipe("method = \"twin\"\nscale = \"7B\"\n")).find("params.rank"), std::string::npos);
    EXPECT_NE(error_of(recipe("method = \"lore\"\n", "tol = 0.0\n")).find("params.tol"), std::string::npos);
    EXPECT_NE(error_of(recipe("method = \"aim_post\"\nstats = \"s\"\nscale = \"7B\"\n", "inner = \"lore\"\n"))
                  .find("params.inner"),
              std::string::npos);
    auto dup = std::string("method = \"average\"\noutput = \"o\"\n[[models]]\nid = \"a\"\npath = \"a\"\n[[models]]\nid = "
                           "\"a\"\npath = \"b\"\n");
    EXPECT_NE(error_of(dup).find("duplicate model id"), std::string::npos);
}

TEST(Recipe, TrimIsKeepFlipsTheRatio) {
    auto r = parse_recipe_text(recipe("method = \"ties\"\n", "k = 0.8\ntrim_is_keep = true\nalpha = 1.0\n"), "/r");
    EXPECT_NEAR(r.ties.trim_ratio, 0.2, 1e-12);
    RecipeOverrides o;
    o.trim_is_keep = true;
    auto flipped = parse_recipe_text(recipe("method = \"ties\"\n", "k = 0.25\nalpha = 1.0\n"), "/r", o);
    EXPECT_NEAR(flipped.ties.trim_ratio, 0.75, 1e-12);
}

TEST(Recipe, PerModelLambdaAndOverrides) {
    const std::string text = R"(
method = "task_arithmetic"
output = "o"
[base]
id = "b"
path = "b"
[[models]]
id = "a"
path = "a"
lambda = 0.4
[[models]]
id = "c"
path = "c"
[params]
alpha = 0.6
[[lambda_overrides]]
pattern = "lm_head.*"
lambda = 0.0
)";
    auto c = parse_recipe_text(text, "/r").coefficients();
    EXPECT_EQ(c.lambda_for("a", "model.layers.0.q.weight"), 0.4);
    EXPECT_EQ(c.lambda_for("c", "model.layers.0.q.weight"), 0.6);
    EXPECT_EQ(c.lambda_for("a", "lm_head.weight"), 0.0);
}

TEST(Recipe, DtypeRules) {
    auto r = parse_recipe_text(recipe("method = \"ties\"\nscale = \"7B\"\n") +
                                   "[dtype]\ndefault = \"bf16\"\nrules = [{pattern = \"*norm*\", dtype = \"fp32\"}]\n",
                               "/r");
    EXPECT_EQ(r.dtype_policy.resolve("model.norm.weight", DType::bf16), DType::f32);
    EXPECT_EQ(r.dtype_policy.resolve("lm_head.weight", DType::f32), DType::bf16);
}

TEST(Recipe, TomlRoundTrip) {
    const std::vector<std::string> heads{"method = \"ties\"\nscale = \"7B\"\n",
                                         "method = \"dare_ties\"\nscale = \"1.5B\"\nseed = 9\n",
                                         "method = \"twin\"\nscale = \"7B\"\n",
                                         "method = \"lore\"\n",
                                         "method = \"aim_post\"\nscale = \"7B\"\nstats = \"s.json\"\n",
                                         "method = \"sens\"\nscale = \"7B\"\nstats = \"s.json\"\n"};
    for (const auto& head : heads) {
        const std::string params = head.find("twin") != std::string::npos ? "energy = 0.9\n" : "";
        auto r = parse_recipe_text(recipe(head, params), "/r");
        auto again = parse_recipe_text(recipe_to_toml(r), "/elsewhere");
        EXPECT_EQ(resolved_json(again), resolved_json(r)) << head;
    }
}

TEST(Recipe, JsonEchoListsDefaults) {
    auto r = parse_recipe_text(recipe("method = \"ties\"\nscale = \"7B\"\n"), "/r");
    auto j = nlohmann::json::parse(recipe_to_json(r));
    EXPECT_EQ(j["method"], "ties");
    EXPECT_FALSE(j["defaults_applied"].empty());
}

TEST(Sweep, ParsesInclusiveGrid) {
    auto s = SweepSpec::parse("alpha=0.1:0.5:0.1");
    EXPECT_EQ(s.key, "alpha");
    EXPECT_EQ(s.values(), (std::vector<double>{0.1, 0.2, 0.3, 0.4, 0.5}));
    EXPECT_THROW(SweepSpec::parse("alpha=0.1:0.5"), ValidationError);
    EXPECT_THROW(SweepSpec::parse("alpha=0.5:0.1:0.1"), ValidationError);
    EXPECT_THROW(SweepSpec::parse("alpha=a:b:c"), ValidationError);
}

TEST(Sweep, ExpandsIntoParseableRecipes) {
    const auto text = recipe("method = \"task_arithmetic\"\n");
    auto points = expand_sweep(text, SweepSpec::parse("alpha=0.1:0.3:0.1"));
    ASSERT_EQ(points.size(), 3u);
    for (std::size_t i = 0; i < points.size(); ++i) {
        auto r = parse_recipe_text(points[i].second, "/r");
        EXPECT_NEAR(r.alpha, 0.1 * static_cast<double>(i + 1), 1e-12);
        EXPECT_EQ(r.output_path, fs::path("/r/out_" + points[i].first));
    }
    auto ranks = expand_sweep(recipe("method = \"twin\"\nscale = \"7B\"\n"), SweepSpec::parse("rank=2:4:1"));
    EXPECT_EQ(ranks[0].first, "rank2");
    EXPECT_EQ(*parse_recipe_text(ranks[2].second, "/r").rank.rank, 4u);
    EXPECT_THROW(expand_sweep(text, SweepSpec::parse("seed=1:2:1")), ValidationError);
}

TEST(Recipe, MissingFileIsIoError) { EXPECT_THROW(parse_recipe("/nonexistent/recipe.toml"), IoError); }
