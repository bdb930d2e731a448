#include <gtest/gtest.h>

#include "gradcheck.hpp"

using namespace turnwise;
using namespace tw_test;

TEST(TurnRatio, Values)
{
    const Vec a{-1.0, -2.0};
    EXPECT_EQ(turn_ratio(a, a).ratio, 1.0);
    const Vec up{-0.9, -2.1}, base{-1.0, -2.0};
    EXPECT_NEAR(turn_ratio(up, base).ratio, 1.0, 1e-12);
    const Vec n{0.2, 0.3}, z{0.0, 0.0};
    EXPECT_NEAR(turn_ratio(n, z).ratio, std::exp(0.5), 1e-15);
    EXPECT_NEAR(turn_ratio(n, z).ratio, 1.648721, 1e-6);
    EXPECT_THROW((void)turn_ratio(n, Vec{0.0}), std::invalid_argument);
}

TEST(TurnRatio, SameParametersGiveOne)
{
    const Batch b = random_batch(41, 1, 3);
    for (const auto& t : b.trajectories) {
        const auto f = featurize(b.fmap, t);
        for (int k = 1; k <= static_cast<int>(t.turns.size()); ++k)
            EXPECT_NEAR(turn_ratio(b.policy, f, t, k).ratio, 1.0, 1e-12);
    }
}

TEST(Surrogate, Clipping)
{
    const auto one = [](double x) { return TurnGrid(1, 1, x); };
    EXPECT_NEAR(-ppo_surrogate(one(1.0), one(0.7), 0.2).loss, 0.7, 1e-15);
    EXPECT_NEAR(-ppo_surrogate(one(1.5), one(1.0), 0.2).loss, 1.2, 1e-15);
    EXPECT_NEAR(-ppo_surrogate(one(0.5), one(-1.0), 0.2).loss, -0.8, 1e-15);
    const auto s = ppo_surrogate(one(1.5), one(1.0), 0.2);
    EXPECT_EQ(s.clip_fraction, 1.0);
    EXPECT_EQ(s.dobj_dlogratio.data[0], 0.0);
    EXPECT_THROW((void)ppo_surrogate(one(1.0), one(1.0), 0.0), std::invalid_argument);
    EXPECT_THROW((void)ppo_surrogate(one(1.0), TurnGrid(1, 2), 0.2), std::invalid_argument);
}

TEST(Surrogate, IdentityRatioEqualsMeanAdvantage)
{
    CounterRng r(2);
    TurnGrid adv(4, 3);
    for (double& a : adv.data) a = 2.0 * r.uniform() - 1.0;
    double expect = 0.0;
    for (double a : adv.data) expect += a;
    EXPECT_NEAR(-ppo_surrogate(TurnGrid(4, 3, 1.0), adv, 0.2).loss, expect / 4.0, 1e-12);
}

TEST(Surrogate, GradientInClipInactiveRegion)
{
    CounterRng r(3);
    const double h = 1e-5;
    for (int inst = 0; inst < 100; ++inst) {
        TurnGrid rho(3, 4), adv(3, 4);
        for (double& x : rho.data) x = 0.85 + 0.3 * r.uniform();
        for (double& a : adv.data) a = 2.0 * r.uniform() - 1.0;
        const auto s = ppo_surrogate(rho, adv, 0.2);
        ASSERT_EQ(s.clip_fraction, 0.0);
        for (std::size_t j = 0; j < rho.data.size(); ++j) {
            TurnGrid up = rho, down = rho;
            up.data[j] = std::exp(std::log(rho.data[j]) + h);
            down.data[j] = std::exp(std::log(rho.data[j]) - h);
            const double fd = (-ppo_surrogate(up, adv, 0.2).loss + ppo_surrogate(down, adv, 0.2).loss) / (2 * h);
            EXPECT_LE(rel_err(s.dobj_dlogratio.data[j], fd), 1e-6);
        }
    }
}

TEST(PolicyLoss, SurrogateGradientMatchesFiniteDifferences)
{
    const GradCheck c = check_policy_loss(10, 5, 1e-5, 1e-5, 0.0);
    EXPECT_EQ(c.failures, 0) << "worst " << c.worst;
}

TEST(PolicyLoss, KlGradientMatchesFiniteDifferences)
{
    const GradCheck c = check_policy_loss(10, 6, 1e-5, 1e-5, 0.7);
    EXPECT_EQ(c.failures, 0) << "worst " << c.worst;
}

TEST(TokenKl, ZeroAtAnchorAndPositiveElsewhere)
{
    CounterRng r(7);
    const ParamMatrix a = random_params(4, 5, r), b = random_params(4, 5, r);
    const Vec f = random_features(4, r);
    EXPECT_NEAR(token_kl(a, a, f), 0.0, 1e-15);
    EXPECT_GT(token_kl(a, b, f), 0.0);
}

TEST(KlPenalty, Cases)
{
    const Batch b = random_batch(42, 1, 2);
    EXPECT_EQ(kl_penalty(b.policy, b.ref, b.trajectories, b.fmap, 0.0), 0.0);
    EXPECT_NEAR(kl_penalty(b.policy, b.policy, b.trajectories, b.fmap, 0.1), 0.0, 1e-15);
    EXPECT_GT(kl_penalty(b.policy, b.ref, b.trajectories, b.fmap, 0.1), 0.0);
    EXPECT_THROW((void)kl_penalty(b.policy, b.ref, b.trajectories, b.fmap, -1.0), std::invalid_argument);
}

TEST(PolicyUpdate, ZeroLrAndNonFiniteAbort)
{
    CounterRng r(8);
    ParamMatrix w = random_params(3, 3, r);
    const ParamMatrix before = w;
    AdamState opt;
    policy_update(w, random_params(3, 3, r), 0.0, opt);
    EXPECT_EQ(w.weights, before.weights);
    ParamMatrix bad(3, 3);
    bad.weights[0] = std::numeric_limits<double>::quiet_NaN();
    EXPECT_THROW(policy_update(w, bad, 0.1, opt), std::domain_error);
}

TEST(PolicyLoss, ImprovesSurrogate)
{
    const Batch b = random_batch(43, 2, 4);
    std::vector<const Trajectory*> bp;
    std::vector<const TrajectoryFeatures*> fp;
    for (std::size_t i = 0; i < b.trajectories.size(); ++i) {
        bp.push_back(&b.trajectories[i]);
        fp.push_back(&b.feats[i]);
    }
    TurnGrid adv(b.trajectories.size(), 4);
    CounterRng r(9);
    for (double& a : adv.data) a = 2.0 * r.uniform() - 1.0;
    const auto units = turn_units(bp, adv);
    ParamMatrix theta = b.policy;
    AdamState opt;
    const double first = policy_loss(theta, b.policy, bp, fp, units, 0.2, 0.0).surrogate_loss;
    for (int s = 0; s < 5; ++s) policy_update(theta, policy_loss(theta, b.policy, bp, fp, units, 0.2, 0.0).grad, 1e-3, opt);
    EXPECT_LT(policy_loss(theta, b.policy, bp, fp, units, 0.2, 0.0).surrogate_loss, first);
}
