#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace turnwise;
using namespace tw_test;

namespace {
TurnGrid column(const Vec& v) { return TurnGrid::from_rows([&] {
    std::vector<Vec> rows;
    for (double x : v) rows.push_back({x});
    return rows;
}()); }

TurnGrid random_grid(std::size_t g, std::size_t k, CounterRng& r, double scale = 1.0)
{
    TurnGrid t(g, k);
    for (double& x : t.data) x = scale * (2.0 * r.uniform() - 1.0);
    return t;
}

// Plain suffix sums, written independently of returns_to_go.
Vec suffix_sums(const Vec& r)
{
    Vec out(r.size(), 0.0);
    // G_k = r_k + G_{k+1}
    double acc = 0.0;
    for (std::size_t k = r.size(); k-- > 0;) out[k] = acc = r[k] + acc;
    return out;
}
} // namespace

TEST(Rloo, DirectFormula)
{
    const auto a = rloo(column({1, 0, 0, 0}));
    EXPECT_NEAR(a.values(0, 0), 1.0, 1e-15);
    for (std::size_t i = 1; i < 4; ++i) EXPECT_NEAR(a.values(i, 0), -1.0 / 3.0, 1e-15);
    for (double x : rloo(column({0.4, 0.4, 0.4})).values.data) EXPECT_EQ(x, 0.0);
}

TEST(Rloo, GroupSumsVanish)
{
    CounterRng r(1);
    for (int t = 0; t < 200; ++t) {
        const double scale = std::pow(10.0, static_cast<double>(r.below(7)) - 3.0);
        const TurnGrid g = random_grid(2 + r.below(15), 1 + r.below(6), r, scale);
        const auto a = rloo(g);
        for (std::size_t k = 0; k < g.cols; ++k) {
            double s = 0.0;
            for (std::size_t i = 0; i < g.rows; ++i) s += a.values(i, k);
            EXPECT_NEAR(s, 0.0, 1e-8 * std::max(1.0, scale));
        }
    }
    EXPECT_THROW((void)rloo(TurnGrid(1, 3)), std::invalid_argument);
}

TEST(Grpo, DirectFormula)
{
    const auto a = grpo(column({1, 0}), 1e-8);
    EXPECT_NEAR(a.values(0, 0), 1.0, 1e-7);
    EXPECT_NEAR(a.values(1, 0), -1.0, 1e-7);
    EXPECT_NEAR(a.mean[0], 0.5, 1e-15);
    EXPECT_NEAR(a.stddev[0], 0.5, 1e-15);
    for (double x : grpo(column({0.3, 0.3, 0.3})).values.data) EXPECT_EQ(x, 0.0);
    EXPECT_THROW((void)grpo(column({1, 0}), 0.0), std::invalid_argument);
}

TEST(Grpo, StandardizedColumns)
{
    CounterRng r(2);
    for (int t = 0; t < 200; ++t) {
        const TurnGrid g = random_grid(2 + r.below(15), 1 + r.below(6), r);
        const auto a = grpo(g);
        for (std::size_t k = 0; k < g.cols; ++k) {
            double m = 0.0, v = 0.0;
            for (std::size_t i = 0; i < g.rows; ++i) m += a.values(i, k);
            m /= static_cast<double>(g.rows);
            for (std::size_t i = 0; i < g.rows; ++i) v += (a.values(i, k) - m) * (a.values(i, k) - m);
            EXPECT_NEAR(m, 0.0, 1e-8);
            EXPECT_NEAR(std::sqrt(v / static_cast<double>(g.rows)), a.stddev[k] / (a.stddev[k] + 1e-8), 1e-9);
            if (a.stddev[k] >= 1e-2) EXPECT_NEAR(std::sqrt(v / static_cast<double>(g.rows)), 1.0, 1e-6);
        }
    }
}

TEST(Grpo, ScaleCovariance)
{
    CounterRng r(3);
    const TurnGrid g = random_grid(8, 4, r);
    TurnGrid scaled = g;
    for (double& x : scaled.data) x *= 37.0;
    const auto a = grpo(g, 1e-12), b = grpo(scaled, 1e-12);
    for (std::size_t j = 0; j < g.data.size(); ++j) EXPECT_NEAR(a.values.data[j], b.values.data[j], 1e-6);
}

TEST(Gae, Examples)
{
    const Vec r{0.0, 1.0};
    const Vec v0{0.0, 0.0, 0.0};
    EXPECT_EQ(gae(r, v0, 1.0, 1.0), (Vec{1.0, 1.0}));
    const Vec v{0.5, 0.2, 0.0};
    const Vec lam0 = gae(r, v, 0.9, 0.0);
    EXPECT_NEAR(lam0[0], 0.0 + 0.9 * 0.2 - 0.5, 1e-15);
    EXPECT_NEAR(lam0[1], 1.0 + 0.0 - 0.2, 1e-15);
    EXPECT_THROW((void)gae(r, v0, 1.0, 1.5), std::invalid_argument);
    EXPECT_THROW((void)gae(r, Vec{0.0, 0.0}, 1.0, 1.0), std::invalid_argument);
}

TEST(Gae, PerfectCriticGivesZero)
{
    const Vec r{0.3, -0.1, 0.5, 0.2};
    Vec v = returns_to_go(r);
    v.push_back(0.0);
    for (double a : gae(r, v, 1.0, 0.95)) EXPECT_NEAR(a, 0.0, 1e-15);
}

TEST(Gae, UndiscountedZeroCriticEqualsReturnsToGo)
{
    CounterRng rng(4);
    for (int t = 0; t < 200; ++t) {
        const Vec r = random_vec(1 + rng.below(8), rng);
        const Vec v(r.size() + 1, 0.0);
        EXPECT_EQ(gae(r, v, 1.0, 1.0), suffix_sums(r));
    }
}

TEST(Gae, GridMatchesRows)
{
    CounterRng rng(5);
    const TurnGrid rw = random_grid(3, 4, rng);
    const TurnGrid vals = random_grid(3, 5, rng);
    const auto a = gae(rw, vals, 0.9, 0.8);
    for (std::size_t i = 0; i < 3; ++i) {
        const Vec row = gae(rw.row(i), vals.row(i), 0.9, 0.8);
        for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(a.values(i, k), row[k]);
    }
}

TEST(ValueHead, FitReducesLossAndZeroLrIsIdentity)
{
    CounterRng rng(6);
    std::vector<ValueSample> batch;
    for (int i = 0; i < 32; ++i) {
        ValueSample s;
        s.features = random_vec(5, rng);
        s.target = 2.0 * s.features[0] - s.features[3];
        batch.push_back(s);
    }
    ParamMatrix psi(5, 1, ModelTag::value);
    fit_value_head(psi, batch, 0.0);
    for (double w : psi.weights) EXPECT_EQ(w, 0.0);
    const double first = value_loss(psi, batch);
    for (int s = 0; s < 500; ++s) fit_value_head(psi, batch, 0.2);
    EXPECT_LT(value_loss(psi, batch), 0.01 * first);
}

TEST(Mix, Linearity)
{
    CounterRng rng(7);
    const TurnGrid a = random_grid(4, 3, rng), b = random_grid(4, 3, rng);
    const auto m = mix_advantages(a, b, 5.0, 0.0);
    for (std::size_t j = 0; j < a.data.size(); ++j) EXPECT_EQ(m.values.data[j], 5.0 * a.data[j]);
    for (double x : mix_advantages(a, b, 0.0, 0.0).values.data) EXPECT_EQ(x, 0.0);
    const auto same = mix_advantages(a, a, 5.0, 5.0);
    for (std::size_t j = 0; j < a.data.size(); ++j) EXPECT_NEAR(same.values.data[j], 10.0 * a.data[j], 1e-12);
    EXPECT_THROW((void)mix_advantages(a, TurnGrid(4, 2), 1.0, 1.0), std::invalid_argument);
    EXPECT_THROW((void)mix_advantages(a, b, -1.0, 1.0), std::invalid_argument);
}

TEST(TokenReturns, FirstTokenMatchesTrajectoryRloo)
{
    const TokenGrid rw{{{0.1, 0.2}, {0.3}}, {{-0.1}, {0.0, 0.4}}, {{0.0}, {0.0}}};
    const auto a = token_return_advantages(rw, Estimator::rloo);
    const Vec totals{0.6, 0.3, 0.0};
    for (std::size_t i = 0; i < 3; ++i) {
        const double others = (0.9 - totals[i]) / 2.0;
        EXPECT_NEAR(a[i][0][0], totals[i] - others, 1e-15);
    }
    EXPECT_NEAR(a[0][0][1], 0.5 - (0.3 + 0.0) / 2.0, 1e-15);
    EXPECT_NEAR(a[0][1][0], 0.3 - 0.15, 1e-15);
    EXPECT_THROW((void)token_return_advantages(rw, Estimator::gae), std::invalid_argument);
}

TEST(Estimator, NamesRoundTrip)
{
    for (auto e : {Estimator::rloo, Estimator::grpo, Estimator::gae}) EXPECT_EQ(estimator_from_string(to_string(e)), e);
    EXPECT_THROW((void)estimator_from_string("ppo"), std::invalid_argument);
}
