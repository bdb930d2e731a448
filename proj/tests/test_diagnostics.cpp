#include <gtest/gtest.h>

#include <algorithm>

#include "test_util.hpp"

using namespace turnwise;
using namespace tw_test;

TEST(Kendall, Examples)
{
    const Vec a{1, 2, 3, 4};
    const Vec rev{4, 3, 2, 1};
    const Vec b{1, 3, 2, 4};
    EXPECT_DOUBLE_EQ(kendall_tau(a, a), 1.0);
    EXPECT_DOUBLE_EQ(kendall_tau(a, rev), -1.0);
    EXPECT_NEAR(kendall_tau(a, b), 2.0 / 3.0, 1e-9);
    const Vec c(4, 1.0);
    EXPECT_EQ(kendall_tau(a, c), 0.0);
    EXPECT_THROW((void)kendall_tau(a, Vec{1, 2}), std::invalid_argument);
}

TEST(Kendall, TauBWithTies)
{
    // scipy.stats.kendalltau([1,2,2,3],[1,2,3,3]) = 0.8
    const Vec x{1, 2, 2, 3}, y{1, 2, 3, 3};
    EXPECT_NEAR(kendall_tau(x, y), 0.8, 1e-12);
}

TEST(Spearman, Examples)
{
    const Vec a{1, 2, 3};
    const Vec b{2, 1, 3};
    EXPECT_DOUBLE_EQ(spearman(a, a).value, 1.0);
    EXPECT_NEAR(spearman(a, b).value, 0.5, 1e-12);
    const Vec x{0.1, 5.0, -3.0, 2.0};
    Vec y;
    for (double v : x) y.push_back(std::exp(v));
    EXPECT_NEAR(spearman(x, y).value, 1.0, 1e-12);
    const auto d = spearman(a, Vec{2, 2, 2});
    EXPECT_TRUE(d.degenerate);
    EXPECT_EQ(d.value, 0.0);
}

TEST(Spearman, AverageRanks)
{
    const Vec x{10, 20, 20, 30};
    EXPECT_EQ(average_ranks(x), (Vec{1, 2.5, 2.5, 4}));
}

TEST(GroupKendall, SkipsConstantGroups)
{
    const std::vector<Vec> rphi{{0.1, 0.2, 0.3}, {0.3, 0.2, 0.1}, {1, 2, 3}};
    const std::vector<Vec> r{{0, 0.5, 1}, {0, 0.5, 1}, {1, 1, 1}};
    const auto g = mean_group_kendall(rphi, r);
    EXPECT_EQ(g.groups_used, 2);
    EXPECT_EQ(g.groups_skipped, 1);
    EXPECT_NEAR(g.mean_tau, 0.0, 1e-15);
}

TEST(Stability, ConstantSnapshotsGiveOne)
{
    CounterRng r(1);
    std::vector<Vec> snap;
    for (int i = 0; i < 5; ++i) snap.push_back(random_vec(4, r));
    std::vector<std::vector<Vec>> series(10, snap);
    std::vector<std::int64_t> steps(10);
    for (int i = 0; i < 10; ++i) steps[static_cast<std::size_t>(i)] = i + 1;
    const auto track = stability_track(series, steps, 3);
    ASSERT_EQ(track.size(), 10u);
    for (std::size_t i = 0; i < track.size(); ++i) {
        EXPECT_NEAR(track[i].conv_spearman, 1.0, 1e-12);
        if (i + 1 < track.size()) EXPECT_NEAR(track[i].adj_spearman, 1.0, 1e-12);
    }
    EXPECT_TRUE(std::isnan(track.back().adj_spearman));
}

TEST(Stability, ShuffledSnapshotsNearZero)
{
    CounterRng r(2);
    std::vector<std::vector<Vec>> series;
    std::vector<std::int64_t> steps;
    for (int s = 0; s < 100; ++s) {
        std::vector<Vec> snap;
        for (int t = 0; t < 50; ++t) snap.push_back(random_vec(8, r));
        series.push_back(std::move(snap));
        steps.push_back(s);
    }
    const auto track = stability_track(series, steps, 10);
    double mean = 0.0;
    for (std::size_t i = 0; i + 1 < track.size(); ++i) mean += track[i].adj_spearman / 99.0;
    EXPECT_NEAR(mean, 0.0, 0.1);
}

TEST(Stability, InsufficientSnapshots)
{
    std::vector<std::vector<Vec>> series(2, std::vector<Vec>{{1, 2}});
    const std::vector<std::int64_t> steps{1, 2};
    EXPECT_THROW((void)stability_track(series, steps, 3), std::invalid_argument);
}

TEST(ProbeSet, AppendOnlyAndOrdered)
{
    std::vector<Trajectory> t(2);
    ProbeSet p(t, {0, 0});
    ProbeSnapshot s;
    s.step = 1;
    s.turn_scores = {{1.0}, {2.0}};
    p.append(s);
    EXPECT_THROW(p.append(s), std::invalid_argument);
    s.step = 2;
    s.turn_scores = {{1.0}};
    EXPECT_THROW(p.append(s), std::invalid_argument);
    EXPECT_THROW(ProbeSet(t, {0}), std::invalid_argument);
}

TEST(Slopes, Examples)
{
    const Vec r{0.0, 0.5, 1.0};
    Vec lin;
    for (double x : r) lin.push_back(2 * x + 1);
    EXPECT_NEAR(*ols_slope(r, lin), 2.0, 1e-12);
    EXPECT_NEAR(*ols_slope(r, Vec(3, 0.4)), 0.0, 1e-15);
    EXPECT_NEAR(*ols_slope(r, Vec{0.1, 0.4, 0.9}), 0.8, 1e-9);
    const auto g = slope_regression({{1, 2}, {0.1, 0.4, 0.9}}, {{1, 1}, {0.0, 0.5, 1.0}});
    EXPECT_FALSE(g[0].has_value());
    EXPECT_NEAR(*g[1], 0.8, 1e-9);
}

TEST(Agreement, OracleOneHotIsPerfect)
{
    const std::vector<Vec> scores{{0, 1, 0, 0}, {1, 0, 0, 0}, {0, 0, 0, 1}};
    const std::vector<int> oracle{2, 1, 4};
    const auto a = pivotal_agreement(scores, oracle);
    EXPECT_EQ(a.agreement, 1.0);
    EXPECT_EQ(a.tie_rate, 0.0);
    EXPECT_EQ(a.random_baseline, 0.25);
}

TEST(Agreement, UniformFirstIndexCountsTurnOne)
{
    const std::vector<Vec> scores(5, Vec(4, 0.25));
    const std::vector<int> oracle{1, 2, 1, 3, 4};
    const auto a = pivotal_agreement(scores, oracle, TieRule::first_index);
    EXPECT_NEAR(a.agreement, 2.0 / 5.0, 1e-15);
    EXPECT_EQ(a.tie_rate, 1.0);
    EXPECT_EQ(pivotal_agreement(scores, oracle, TieRule::any_in_tied_set).agreement, 1.0);
    EXPECT_THROW((void)pivotal_agreement(scores, std::vector<int>{1}), std::invalid_argument);
}
