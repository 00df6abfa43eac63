// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "l2smerge/errors.hpp"
#include "l2smerge/merge_core.hpp"
#include "l2smerge/names.hpp"
#include "l2smerge/parallel.hpp"
#include "support/ties_oracle.hpp"
#include "support/toy.hpp"

using namespace l2smerge;
using namespace l2smerge::testing;

TEST(Average, MeanOfTwoMatchesHandValues) {
    TensorMap a, b;
    a.insert("x", Tensor({3}, {1.0f, 2.0f, -4.0f}));
    b.insert("x", Tensor({3}, {3.0f, 2.0f, 4.0f}));
    std::vector<TensorMap> ms{a, b};
    auto m = average_merge(ms);
    EXPECT_EQ(m.at("x").values, (std::vector<float>{2.0f, 2.0f, 0.0f}));
}

TEST(Average, IdenticalModelsMergeToThemselves) {
    std::mt19937_64 rng(21);
    auto a = random_checkpoint(toy_layout(), rng);
    std::vector<TensorMap> ms{a, a, a};
    EXPECT_TRUE(bitwise_equal(average_merge(ms), a));
}

TEST(Average, NeedsTwoCompatibleModels) {
    std::mt19937_64 rng(22);
    auto a = random_checkpoint(toy_layout(), rng);
    std::vector<TensorMap> one{a};
    EXPECT_THROW(average_merge(one), ValidationError);
    std::vector<TensorMap> mismatched{a, random_checkpoint(toy_layout(8, 13), rng)};
    EXPECT_THROW(average_merge(mismatched), ValidationError);
}

TEST(Trim, CountSnapsNearIntegers) {
    EXPECT_EQ(trim_count(100, 0.29), 29u);
    EXPECT_EQ(trim_count(10, 0.8), 8u);
    EXPECT_EQ(trim_count(7, 0.5), 3u);
    EXPECT_EQ(trim_count(0, 0.5), 0u);
}

TEST(Trim, ZeroesSmallestMagnitudes) {
    std::vector<float> d{0.5f, -0.1f, 0.3f, -0.9f, 0.2f};
    auto t = trim(d, 0.6);
    EXPECT_EQ(t, (std::vector<float>{0.5f, 0.0f, 0.0f, -0.9f, 0.0f}));
}

TEST(Trim, EqualMagnitudesZeroHigherIndexFirst) {
    std::vector<float> d{1.0f, -1.0f, 1.0f, 1.0f};
    auto t = trim(d, 0.5);
    EXPECT_EQ(t, (std::vector<float>{1.0f, -1.0f, 0.0f, 0.0f}));
}

TEST(Trim, RejectsNanAndBadRatio) {
    std::vector<float> d{1.0f, std::nanf(""), 2.0f};
    EXPECT_THROW(trim(d, 0.5), NumericalError);
    EXPECT_THROW(trim(d, 1.0), ValidationError);
    EXPECT_THROW(trim(d, -0.1), ValidationError);
}

TEST(Ties, HandWorkedExample) {
    TensorMap base;
    base.insert("w", Tensor({4}, {0.0f, 0.0f, 0.0f, 0.0f}));
    TensorMap a = base, b = base;
    a.at("w").values = {1.0f, -2.0f, 0.5f, 3.0f};
    b.at("w").values = {2.0f, 1.0f, -0.5f, -1.0f};
    std::vector<TaskVector> vs{compute_task_vector(a, base, "a"), compute_task_vector(b, base, "b")};
    // No trimming: signs are +, -, 0, +; disjoint means 1.5, -2, (none), 3.
    auto m = ties_merge(base, vs, TiesParams{0.0, 1.0});
    EXPECT_EQ(m.at("w").values, (std::vector<float>{1.5f, -2.0f, 0.0f, 3.0f}));
    auto half = ties_merge(base, vs, TiesParams{0.0, 0.5});
    EXPECT_EQ(half.at("w").values, (std::vector<float>{0.75f, -1.0f, 0.0f, 1.5f}));
}

TEST(Ties, MatchesBruteForceOracle) {
    std::mt19937_64 rng(23);
    const std::vector<double> ratios{0.0, 0.2, 0.5, 0.8, 0.9};
    for (int trial = 0; trial < 40; ++trial) {
        const int models = 2 + static_cast<int>(rng() % 3);
        const double k = ratios[rng() % ratios.size()];
        const double alpha = 0.25 + static_cast<double>(rng() % 8) * 0.25;
        auto base = random_checkpoint(toy_layout(), rng);
        std::vector<TaskVector> vs;
        for (int i = 0; i < models; ++i) {
            auto m = perturbed(base, rng, 0.1);
            // Coarse grids create equal magnitudes and sign ties.
            if (trial % 3 == 0) {
                for (auto& [name, t] : m) {
                    for (std::size_t j = 0; j < t.values.size(); ++j) {
                        t.values[j] = base.at(name).values[j] + std::round((t.values[j] - base.at(name).values[j]) * 20.0f) / 20.0f;
                    }
                }
            }
            vs.push_back(compute_task_vector(m, base, "m" + std::to_string((i * 7) % models)));
        }
        auto got = ties_merge(base, vs, TiesParams{k, alpha});
        auto want = ties_oracle(base, vs, k, alpha);
        ASSERT_TRUE(bitwise_equal(got, want)) << "trial " << trial;
    }
}

TEST(Ties, RequiresTwoVectors) {
    std::mt19937_64 rng(24);
    auto base = random_checkpoint(toy_layout(), rng);
    std::vector<TaskVector> vs{compute_task_vector(perturbed(base, rng, 0.1), base, "a")};
    EXPECT_THROW(ties_merge(base, vs, TiesParams{}), ValidationError);
}

TEST(Dare, StreamIsSplitMix) {
    DareStream zero(0 ^ fnv1a64("x"), "x");
    EXPECT_EQ(zero.at(0), zero.next());
    // Seed xor name hash == 0: the first SplitMix64 output from state 0.
    DareStream raw(fnv1a64("t"), "t");
    EXPECT_EQ(raw.next(), 0xE220A8397B1DCDAFull);
}

TEST(Dare, KeepRule) {
    EXPECT_TRUE(DareStream::keep(0, 0.0));
    EXPECT_FALSE(DareStream::keep(0, 0.1));
    EXPECT_TRUE(DareStream::keep(~0ull, 0.999));
}

TEST(Dare, ZeroDropRateIsIdentity) {
    std::mt19937_64 rng(25);
    auto base = random_checkpoint(toy_layout(), rng);
    auto v = compute_task_vector(perturbed(base, rng, 0.1), base, "a");
    DareCounts counts;
    auto d = dare_drop(v, DareParams{0.0, 5}, &counts);
    EXPECT_EQ(counts.dropped, 0u);
    for (const auto& [name, t] : v.deltas) EXPECT_TRUE(bitwise_equal(t, d.deltas.at(name)));
}

TEST(Dare, SurvivorsAreRescaled) {
    TaskVector v;
    v.model_id = "a";
    v.deltas.emplace("x", Tensor({1000}, std::vector<float>(1000, 0.7f)));
    DareCounts counts;
    auto d = dare_drop(v, DareParams{0.3, 9}, &counts);
    EXPECT_EQ(counts.kept + counts.dropped, 1000u);
    const float scaled = static_cast<float>(0.7f / (1.0 - 0.3));
    for (float x : d.deltas.at("x").values) EXPECT_TRUE(x == 0.0f || x == scaled);
}

TEST(Dare, SeedDeterminesMaskAcrossThreadCounts) {
    std::mt19937_64 rng(26);
    auto base = random_checkpoint(toy_layout(), rng);
    auto v = compute_task_vector(perturbed(base, rng, 0.1), base, "a");
    set_thread_count(1);
    auto one = dare_drop(v, DareParams{0.5, 42});
    set_thread_count(4);
    auto four = dare_drop(v, DareParams{0.5, 42});
    set_thread_count(0);
    auto other = dare_drop(v, DareParams{0.5, 43});
    bool differs = false;
    for (const auto& [name, t] : one.deltas) {
        EXPECT_TRUE(bitwise_equal(t, four.deltas.at(name)));
        differs = differs || !bitwise_equal(t, other.deltas.at(name));
    }
    EXPECT_TRUE(differs);
}

TEST(Dare, ModelsInACompositionDrawDifferentMasks) {
    std::mt19937_64 rng(27);
    TensorMap base;
    base.insert("x", Tensor({256}, std::vector<float>(256, 0.0f)));
    TensorMap m = base;
    std::fill(m.at("x").values.begin(), m.at("x").values.end(), 1.0f);
    std::vector<TaskVector> vs{compute_task_vector(m, base, "a"), compute_task_vector(m, base, "b")};
    Coefficients c;
    c.per_model = {{"a", 1.0}, {"b", 0.0}};
    auto only_a = dare_ta(base, vs, DareParams{0.5, 3}, c);
    c.per_model = {{"a", 0.0}, {"b", 1.0}};
    auto only_b = dare_ta(base, vs, DareParams{0.5, 3}, c);
    EXPECT_FALSE(bitwise_equal(only_a, only_b));
}

TEST(Dare, MonteCarloMeanPreservesDelta) {
    TaskVector v;
    v.model_id = "a";
    std::mt19937_64 rng(28);
    v.deltas.emplace("x", random_tensor({64}, rng, 0.5));
    const auto& orig = v.deltas.at("x").values;
    std::vector<double> sum(orig.size(), 0.0);
    const int draws = 4000;
    for (int s = 0; s < draws; ++s) {
        auto d = dare_drop(v, DareParams{0.3, static_cast<std::uint64_t>(s)});
        for (std::size_t j = 0; j < orig.size(); ++j) sum[j] += d.deltas.at("x").values[j];
    }
    for (std::size_t j = 0; j < orig.size(); ++j) {
        if (std::abs(orig[j]) <= 0.1f) continue;
        // Standard error of the mean is |d| * sqrt(p/(1-p)/draws), about 1% here.
        EXPECT_NEAR(sum[j] / draws, orig[j], 0.06 * std::abs(orig[j])) << j;
    }
}

TEST(Dare, RejectsDropRateOne) {
    TaskVector v;
    v.model_id = "a";
    EXPECT_THROW(dare_drop(v, DareParams{1.0, 0}), ValidationError);
    EXPECT_THROW(dare_drop(v, DareParams{-0.1, 0}), ValidationError);
}
