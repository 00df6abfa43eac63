// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "l2smerge/activation_merge.hpp"
#include "l2smerge/errors.hpp"
#include "l2smerge/merge_core.hpp"
#include "support/toy.hpp"

using namespace l2smerge;
using namespace l2smerge::testing;

namespace {

CalibrationStats importance_for(const TensorMap& m, std::mt19937_64& rng) {
    CalibrationStats s;
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    for (const auto& [name, t] : m) {
        if (!t.is_matrix()) continue;
        std::vector<float> rows(t.rows());
        for (auto& x : rows) x = u(rng);
        s.activation[name] = rows;
    }
    return s;
}

CalibrationStats sensitivity(const std::vector<std::string>& models, const std::vector<std::string>& layers,
                             std::mt19937_64& rng, bool uniform = false) {
    CalibrationStats s;
    std::uniform_real_distribution<double> u(0.1, 2.0);
    for (const auto& m : models) {
        for (const auto& l : layers) s.layer_sensitivity[m][l] = uniform ? 1.0 : u(rng);
        s.task_sensitivity[m] = uniform ? 1.0 : u(rng);
    }
    return s;
}

} // namespace

TEST(Aim, OutputLiesBetweenBaseAndMerged) {
    std::mt19937_64 rng(51);
    auto base = random_checkpoint(toy_layout(), rng);
    auto merged = perturbed(base, rng, 0.2);
    auto stats = importance_for(base, rng);
    for (double omega : {0.0, 0.4, 1.0}) {
        auto out = aim_adjust(base, merged, stats, AimParams{omega});
        for (const auto& [name, t] : out) {
            for (std::size_t j = 0; j < t.values.size(); ++j) {
                const float lo = std::min(base.at(name).values[j], merged.at(name).values[j]);
                const float hi = std::max(base.at(name).values[j], merged.at(name).values[j]);
                ASSERT_GE(t.values[j], lo) << name;
                ASSERT_LE(t.values[j], hi) << name;
            }
        }
    }
}

TEST(Aim, OmegaOneReturnsMerged) {
    std::mt19937_64 rng(52);
    auto base = random_checkpoint(toy_layout(), rng);
    auto merged = perturbed(base, rng, 0.2);
    EXPECT_TRUE(bitwise_equal(aim_adjust(base, merged, importance_for(base, rng), AimParams{1.0}), merged));
}

TEST(Aim, OmegaZeroRestoresMostImportantRow) {
    TensorMap base, merged;
    base.insert("w", Tensor({3, 2}, {1, 1, 1, 1, 1, 1}));
    merged.insert("w", Tensor({3, 2}, {3, 3, 3, 3, 3, 3}));
    CalibrationStats s;
    s.activation["w"] = {0.0f, 0.5f, 2.0f};
    auto out = aim_adjust(base, merged, s, AimParams{0.0});
    EXPECT_EQ(out.at("w").values, (std::vector<float>{3, 3, 2.5f, 2.5f, 1, 1}));
}

TEST(Aim, HigherImportanceStaysCloserToBase) {
    TensorMap base, merged;
    const std::size_t rows = 1000;
    base.insert("w", Tensor({static_cast<std::int64_t>(rows), 1}, std::vector<float>(rows, 0.0f)));
    merged.insert("w", Tensor({static_cast<std::int64_t>(rows), 1}, std::vector<float>(rows, 1.0f)));
    CalibrationStats s;
    for (std::size_t r = 0; r < rows; ++r) s.activation["w"].push_back(static_cast<float>(r) / 999.0f);
    auto out = aim_adjust(base, merged, s, AimParams{0.4});
    for (std::size_t r = 1; r < rows; ++r) EXPECT_LE(out.at("w").values[r], out.at("w").values[r - 1]);
}

TEST(Aim, UncoveredTensorsPassThrough) {
    std::mt19937_64 rng(53);
    auto base = random_checkpoint(toy_layout(), rng);
    auto merged = perturbed(base, rng, 0.2);
    CalibrationStats s;
    s.activation["lm_head.weight"] = std::vector<float>(12, 1.0f);
    AimPassthrough pass;
    auto out = aim_adjust(base, merged, s, AimParams{0.4}, &pass);
    EXPECT_EQ(pass.size(), merged.size() - 1);
    for (const auto& name : pass) EXPECT_TRUE(bitwise_equal(out.at(name), merged.at(name)));
}

TEST(Aim, RejectsWrongRowCountAndOmega) {
    std::mt19937_64 rng(54);
    auto base = random_checkpoint(toy_layout(), rng);
    CalibrationStats s;
    s.activation["lm_head.weight"] = std::vector<float>(5, 1.0f);
    EXPECT_THROW(aim_adjust(base, base, s, AimParams{0.4}), ValidationError);
    EXPECT_THROW(aim_adjust(base, base, CalibrationStats{}, AimParams{1.5}), ValidationError);
}

TEST(Stats, ParsesFixtureLayout) {
    auto s = parse_stats(R"({
        "schema_version": 1,
        "meta": {"num_samples": 100, "dataset_id": "s1K"},
        "activation": {"lm_head.weight": [0.5, 1.0]},
        "layer_sensitivity": {"a": {"0": 1.0, "1": 2.0}},
        "task_sensitivity": {"a": 3.0},
        "extra": {"ignored": true}
    })");
    EXPECT_EQ(s.num_samples, 100);
    EXPECT_EQ(s.dataset_id, "s1K");
    EXPECT_EQ(s.activation.at("lm_head.weight").size(), 2u);
    EXPECT_EQ(s.layer_sensitivity.at("a").at("1"), 2.0);
    EXPECT_EQ(s.task_sensitivity.at("a"), 3.0);
    auto again = parse_stats(stats_to_json(s));
    EXPECT_EQ(again.activation, s.activation);
    EXPECT_EQ(again.layer_sensitivity, s.layer_sensitivity);
}

TEST(Stats, RejectsMalformedDocuments) {
    EXPECT_THROW(parse_stats("{"), ValidationError);
    EXPECT_THROW(parse_stats("[]"), ValidationError);
    EXPECT_THROW(parse_stats(R"({"activation": {}})"), ValidationError);
    EXPECT_THROW(parse_stats(R"({"schema_version": 2})"), ValidationError);
    EXPECT_THROW(parse_stats(R"({"schema_version": 1, "activation": {"w": [-1.0]}})"), ValidationError);
    EXPECT_THROW(parse_stats(R"({"schema_version": 1, "task_sensitivity": {"a": 0.0}})"), ValidationError);
    EXPECT_THROW(parse_stats(R"({"schema_version": 1, "task_sensitivity": {"a": "x"}})"), ValidationError);
    EXPECT_THROW(load_stats("/nonexistent/stats.json"), IoError);
}

TEST(Sens, UniformStatsGiveAlphaEverywhere) {
    std::mt19937_64 rng(55);
    std::vector<std::string> models{"a", "b"}, layers{"0", "1", "global"};
    auto s = sensitivity(models, layers, rng, true);
    auto c = sens_coefficients(s, SensParams{0.7, 2.0}, models, layers);
    for (const auto& m : models)
        for (const auto& l : layers) EXPECT_EQ(c.per_layer.at(m).at(l), 0.7);
}

TEST(Sens, MeanCoefficientIsAlpha) {
    std::mt19937_64 rng(56);
    std::vector<std::string> models{"a", "b", "c"}, layers{"0", "1", "2", "3"};
    for (int trial = 0; trial < 20; ++trial) {
        auto s = sensitivity(models, layers, rng);
        const double alpha = 0.3 + 0.05 * trial;
        auto c = sens_coefficients(s, SensParams{alpha, 0.5 + trial}, models, layers);
        double sum = 0.0;
        for (const auto& m : models)
            for (const auto& l : layers) sum += c.per_layer.at(m).at(l);
        EXPECT_NEAR(sum / 12.0, alpha, 1e-6 * alpha);
    }
}

TEST(Sens, HighTemperatureApproachesTaskScaling) {
    std::mt19937_64 rng(57);
    std::vector<std::string> models{"a", "b"}, layers{"0", "1", "2"};
    auto s = sensitivity(models, layers, rng);
    auto c = sens_coefficients(s, SensParams{1.0, 1e6}, models, layers);
    const double mean_task = (s.task_sensitivity.at("a") + s.task_sensitivity.at("b")) / 2.0;
    for (const auto& m : models)
        for (const auto& l : layers) EXPECT_NEAR(c.per_layer.at(m).at(l), s.task_sensitivity.at(m) / mean_task, 1e-4);
}

TEST(Sens, ScoreScaleDoesNotMatter) {
    std::mt19937_64 rng(58);
    std::vector<std::string> models{"a", "b"}, layers{"0", "1", "2"};
    auto s = sensitivity(models, layers, rng);
    auto doubled = s;
    for (auto& [m, row] : doubled.layer_sensitivity)
        for (auto& [l, v] : row) v *= 2.0;
    for (auto& [m, v] : doubled.task_sensitivity) v *= 2.0;
    auto c1 = sens_coefficients(s, SensParams{0.7, 2.0}, models, layers);
    auto c2 = sens_coefficients(doubled, SensParams{0.7, 2.0}, models, layers);
    for (const auto& m : models)
        for (const auto& l : layers) EXPECT_NEAR(c1.per_layer.at(m).at(l), c2.per_layer.at(m).at(l), 1e-12);
}

TEST(Sens, MissingEntriesAreNamed) {
    std::mt19937_64 rng(59);
    std::vector<std::string> models{"a", "b"}, layers{"0", "1"};
    auto s = sensitivity(models, layers, rng);
    s.layer_sensitivity.at("b").erase("1");
    try {
        sens_coefficients(s, SensParams{}, models, layers);
        FAIL();
    } catch (const ValidationError& e) {
        EXPECT_NE(std::string(e.what()).find("layer '1'"), std::string::npos);
    }
    EXPECT_THROW(sens_coefficients(s, SensParams{0.7, 0.0}, models, layers), ValidationError);
}

TEST(Sens, MergeUsesLayerCoefficients) {
    std::mt19937_64 rng(60);
    auto base = random_checkpoint(toy_layout(), rng);
    std::vector<TaskVector> vs{compute_task_vector(perturbed(base, rng, 0.1), base, "a"),
                               compute_task_vector(perturbed(base, rng, 0.1), base, "b")};
    LayerResolver layers;
    auto s = sensitivity({"a", "b"}, layer_ids_of(base, layers), rng);
    Coefficients used;
    auto merged = sens_merge(base, vs, s, SensParams{}, layers, &used);
    EXPECT_TRUE(bitwise_equal(merged, apply_task_vectors(base, vs, used)));
    EXPECT_EQ(used.per_layer.at("a").size(), 3u);
}
