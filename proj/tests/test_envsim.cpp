#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace turnwise;
using namespace tw_test;

namespace {

// CLARIFY(k) with probability 1/2 on non-final turns; on the final turn it
// answers with the restated digits, or NOISE if none were restated.
class ScriptedPolicy final : public ResponsePolicy
{
  public:
    explicit ScriptedPolicy(const Environment& env) : env_(env) {}

    TokenDraw draw(const TokenContext& ctx, double u) const override
    {
        const auto& v = env_.vocab();
        const int m = env_.num_digits();
        if (ctx.turn < env_.num_turns()) {
            if (ctx.prefix.empty()) return {u < 0.5 ? v.clarify(ctx.turn) : v.noise(), std::log(0.5)};
            return {v.pad(), 0.0};
        }
        const auto j = static_cast<int>(ctx.prefix.size());
        if (j == 0) return {v.answer(), 0.0};
        if (j <= m) {
            if (static_cast<int>(ctx.query.size()) == m + 1) return {ctx.query[static_cast<std::size_t>(j)], 0.0};
            return {v.noise(), 0.0};
        }
        return {v.pad(), 0.0};
    }

  private:
    const Environment& env_;
};

Trajectory fixed_answer(const Environment& env, const LatentGoal& goal, std::vector<int> last_response)
{
    Trajectory t;
    t.goal = goal;
    for (int k = 1; k <= env.num_turns(); ++k) {
        Turn turn;
        turn.index = k;
        turn.user_tokens = {env.vocab().noise()};
        turn.response_tokens = k == env.num_turns() ? last_response : std::vector<int>{env.vocab().pad()};
        t.turns.push_back(turn);
    }
    return t;
}

} // namespace

TEST(Environment, DefaultConfigConstructs)
{
    const Environment env(default_env());
    EXPECT_EQ(env.num_turns(), 4);
    EXPECT_EQ(env.vocab().size(), 16);
}

TEST(Environment, RejectsSingleTurn)
{
    EnvConfig c;
    c.num_turns = 1;
    try {
        Environment env(c);
        FAIL();
    } catch (const std::invalid_argument& e) {
        EXPECT_STREQ(e.what(), "K < 2");
    }
}

TEST(Environment, RejectsBadNoiseAndTinyVocab)
{
    EnvConfig c;
    c.noise_rate = 1.0;
    EXPECT_THROW(Environment{c}, std::invalid_argument);
    c = EnvConfig{};
    c.vocab_size = 8;
    EXPECT_THROW(Environment{c}, std::invalid_argument);
}

TEST(Vocabulary, LayoutIsDisjoint)
{
    const Vocabulary v(16, 4, 3);
    EXPECT_EQ(v.digit_count(), 9);
    EXPECT_EQ(v.block_size(), 3);
    EXPECT_EQ(v.clarify(1), 9);
    EXPECT_EQ(v.clarify(4), 12);
    EXPECT_EQ(v.answer(), 13);
    EXPECT_EQ(v.noise(), 14);
    EXPECT_EQ(v.pad(), 15);
    EXPECT_EQ(v.slot_of(4), 1);
}

TEST(Environment, GoalIsDeterministicAndWellFormed)
{
    const Environment env(default_env());
    for (std::uint64_t s = 0; s < 200; ++s) {
        const auto g = env.draw_goal(s);
        EXPECT_EQ(g, env.draw_goal(s));
        ASSERT_EQ(g.digits.size(), 3u);
        for (int j = 0; j < 3; ++j) EXPECT_EQ(env.vocab().slot_of(g.digits[static_cast<std::size_t>(j)]), j);
        EXPECT_GE(g.pivotal_index, 1);
        EXPECT_LE(g.pivotal_index, 3);
    }
}

TEST(Environment, ZeroNoiseClarifyRestatesGoal)
{
    EnvConfig c;
    c.noise_rate = 0.0;
    const Environment env(c);
    const auto goal = env.draw_goal(17);
    std::vector<Turn> history;
    CounterRng rng(1);
    for (int k = 0; k < env.num_turns() - 1; ++k) {
        const auto q = env.user_step(goal, history, rng);
        const int slot = k % env.num_digits();
        if (slot == env.key_slot(goal))
            EXPECT_EQ(q.front(), env.vocab().noise());
        else
            EXPECT_EQ(q.front(), goal.digits[static_cast<std::size_t>(slot)]);
        if (k >= goal.pivotal_index) {
            ASSERT_EQ(q.size(), 4u);
            EXPECT_EQ(std::vector<int>(q.begin() + 1, q.end()), goal.digits);
        } else {
            EXPECT_EQ(q.size(), 1u);
        }
        Turn t;
        t.index = k + 1;
        t.user_tokens = q;
        t.response_tokens = {k + 1 == goal.pivotal_index ? env.vocab().clarify(k + 1) : env.vocab().pad()};
        history.push_back(t);
    }
}

TEST(Environment, NoRestateWithoutClarify)
{
    const Environment env(default_env());
    const auto goal = env.draw_goal(3);
    std::vector<Turn> history;
    CounterRng rng(2);
    for (int k = 0; k < env.num_turns(); ++k) {
        EXPECT_EQ(env.user_step(goal, history, rng).size(), 1u);
        Turn t;
        t.index = k + 1;
        t.response_tokens = {env.vocab().pad()};
        history.push_back(t);
    }
}

TEST(Environment, OutcomeReward)
{
    const Environment env(default_env());
    const auto goal = env.draw_goal(5);
    const int a = env.vocab().answer();
    const auto& d = goal.digits;
    EXPECT_DOUBLE_EQ(env.outcome_reward(goal, fixed_answer(env, goal, {a, d[0], d[1], d[2]})), 1.0);
    EXPECT_DOUBLE_EQ(env.outcome_reward(goal, fixed_answer(env, goal, {d[0], d[1], d[2]})), 0.0);
    EXPECT_NEAR(env.outcome_reward(goal, fixed_answer(env, goal, {a, d[0], env.vocab().noise(), d[2]})), 2.0 / 3.0, 1e-9);
    EXPECT_NEAR(env.outcome_reward(goal, fixed_answer(env, goal, {a, d[0]})), 1.0 / 3.0, 1e-9);
}

TEST(Environment, RolloutGroupSharesGoal)
{
    const Environment env(default_env());
    const FeatureMap fmap(16, 4);
    const ParamMatrix w(fmap.dim(), 16);
    const LogLinearPolicy pol(w, fmap);
    const auto g = env.rollout(pol, 123, 8, CounterRng(1));
    ASSERT_EQ(g.trajectories.size(), 8u);
    for (const auto& t : g.trajectories) {
        EXPECT_EQ(t.goal.goal_id, 123u);
        EXPECT_EQ(check_trajectory(t, env.config().length_penalty), "");
        EXPECT_EQ(t.turns.size(), 4u);
    }
}

TEST(Environment, RolloutReplayAndParallelismInvariance)
{
    const Environment env(default_env());
    CounterRng r(4);
    const FeatureMap fmap(16, 4);
    const ParamMatrix w = random_params(fmap.dim(), 16, r, 1.0);
    const LogLinearPolicy greedy(w, fmap, SampleMode::greedy);
    const auto a = env.rollout(greedy, 9, 8, CounterRng(77));
    const auto b = env.rollout(greedy, 9, 8, CounterRng(77));
    EXPECT_EQ(a.trajectories, b.trajectories);
    const LogLinearPolicy stoch(w, fmap);
    const auto c = env.rollout(stoch, 9, 8, CounterRng(78), {}, 1);
    const auto d = env.rollout(stoch, 9, 8, CounterRng(78), {}, 4);
    EXPECT_EQ(c.trajectories, d.trajectories);
}

TEST(Environment, RolloutRejectsSmallGroups)
{
    const Environment env(default_env());
    const FeatureMap fmap(16, 4);
    const ParamMatrix w(fmap.dim(), 16);
    const LogLinearPolicy pol(w, fmap);
    EXPECT_THROW((void)env.rollout(pol, 1, 1, CounterRng(1)), std::invalid_argument);
}

TEST(Environment, OracleFindsPivotalClarify)
{
    EnvConfig c;
    c.noise_rate = 0.0;
    const Environment env(c);
    const ScriptedPolicy pol(env);
    int hits = 0;
    for (std::uint64_t i = 0; i < 100; ++i) {
        const Trajectory t = env.run_episode(pol, env.draw_goal(1000 + i), CounterRng(i));
        const auto [best, deltas] = env.oracle_pivotal_turn(t, pol, 64, CounterRng(50'000 + i));
        const auto p = static_cast<std::size_t>(t.goal.pivotal_index - 1);
        bool strict = true;
        for (std::size_t j = 0; j < deltas.size(); ++j)
            if (j != p && !(std::abs(deltas[p]) > std::abs(deltas[j]))) strict = false;
        hits += strict && best == t.goal.pivotal_index;
    }
    EXPECT_GE(hits, 95);
}

TEST(Environment, OracleRejectsZeroSamples)
{
    const Environment env(default_env());
    const ScriptedPolicy pol(env);
    const Trajectory t = env.run_episode(pol, env.draw_goal(1), CounterRng(1));
    EXPECT_THROW((void)env.counterfactual_turn_value(t, 1, pol, 0, CounterRng(2)), std::invalid_argument);
    EXPECT_THROW((void)env.counterfactual_turn_value(t, 5, pol, 4, CounterRng(2)), std::invalid_argument);
}

TEST(Environment, OracleNearZeroForContextFreePolicy)
{
    const Environment env(default_env());
    const FeatureMap fmap(16, 4);
    const ParamMatrix w(fmap.dim(), 16);
    const LogLinearPolicy pol(w, fmap);
    for (std::uint64_t i = 0; i < 10; ++i) {
        const Trajectory t = env.run_episode(pol, env.draw_goal(i), CounterRng(i));
        const auto [best, deltas] = env.oracle_pivotal_turn(t, pol, 64, CounterRng(100 + i));
        for (double d : deltas) EXPECT_LE(std::abs(d), 0.1);
    }
}

TEST(Trajectory, JsonRoundTrip)
{
    const Batch b = random_batch(3, 1, 4);
    for (const auto& t : b.trajectories) {
        const auto back = trajectory_from_json(nlohmann::json::parse(to_json(t).dump()));
        EXPECT_EQ(back, t);
    }
}

TEST(Trajectory, InvariantCheckCatchesCorruption)
{
    Batch b = random_batch(4, 1, 2);
    Trajectory t = b.trajectories.front();
    EXPECT_EQ(check_trajectory(t, 5e-6), "");
    t.token_count += 1;
    EXPECT_NE(check_trajectory(t, 5e-6), "");
}
