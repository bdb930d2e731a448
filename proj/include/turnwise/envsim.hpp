#pragma once

// Synthetic collaborative POMDP ("attribute elicitation") with a scripted
// stochastic user, the trajectory data model, and rollout execution.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "turnwise/rng.hpp"

namespace turnwise {

struct EnvConfig
{
    int num_turns = 4;          // K
    int num_digits = 3;         // M
    int vocab_size = 16;        // V
    double noise_rate = 0.3;    // p_noise
    std::uint64_t seed = 7;
    double length_penalty = 5e-6; // gamma_len in S = R - gamma_len * N
    int max_response_len = 5;

    bool operator==(const EnvConfig&) const = default;
};

/**
 * Token layout: digits [0, V_goal), CLARIFY_1..CLARIFY_K, ANSWER, NOISE, PAD.
 *
 * Goal digit j is drawn from its own block [j*b, (j+1)*b) with
 * b = V_goal / M, so a digit token identifies the answer slot it belongs to.
 */
class Vocabulary
{
  public:
    Vocabulary() = default;
    Vocabulary(int vocab_size, int num_turns, int num_digits)
        : size_(vocab_size), num_turns_(num_turns), num_digits_(num_digits),
          digit_count_(vocab_size - num_turns - 3),
          block_(num_digits > 0 ? (vocab_size - num_turns - 3) / num_digits : 0)
    {
    }

    [[nodiscard]] int size() const noexcept { return size_; }
    [[nodiscard]] int digit_count() const noexcept { return digit_count_; }
    [[nodiscard]] int block_size() const noexcept { return block_; }
    [[nodiscard]] int block_begin(int slot) const noexcept { return slot * block_; }

    [[nodiscard]] int clarify(int turn) const noexcept { return digit_count_ + turn - 1; }
    [[nodiscard]] int answer() const noexcept { return digit_count_ + num_turns_; }
    [[nodiscard]] int noise() const noexcept { return answer() + 1; }
    [[nodiscard]] int pad() const noexcept { return answer() + 2; }

    [[nodiscard]] bool is_digit(int token) const noexcept { return token >= 0 && token < digit_count_; }
    [[nodiscard]] bool is_clarify(int token) const noexcept
    {
        return token >= digit_count_ && token < digit_count_ + num_turns_;
    }
    /// Answer slot a digit token belongs to, or -1.
    [[nodiscard]] int slot_of(int token) const noexcept
    {
        if (!is_digit(token) || block_ == 0) return -1;
        const int slot = token / block_;
        return slot < num_digits_ ? slot : -1;
    }

  private:
    int size_ = 0;
    int num_turns_ = 0;
    int num_digits_ = 0;
    int digit_count_ = 0;
    int block_ = 0;
};

struct LatentGoal
{
    std::uint64_t goal_id = 0;
    std::vector<int> digits;
    int pivotal_index = 1; // 1-based turn whose response must carry CLARIFY(pivotal_index)

    bool operator==(const LatentGoal&) const = default;
};

struct Turn
{
    int index = 1; // 1-based
    std::vector<int> user_tokens;
    std::vector<int> response_tokens;
    std::vector<double> logp_policy;
    std::vector<double> logp_prm;
    std::vector<double> logp_ref;

    bool operator==(const Turn&) const = default;
};

struct Trajectory
{
    LatentGoal goal;
    std::vector<Turn> turns;
    double outcome = 0.0;
    int token_count = 0;
    double combined_score = 0.0;

    bool operator==(const Trajectory&) const = default;
};

struct RolloutGroup
{
    std::uint64_t prompt_seed = 0;
    std::vector<Trajectory> trajectories;
};

/// Conditioning context of one response token: h^k, x^k, y^{k,<t}, k.
struct TokenContext
{
    std::span<const int> history;
    std::span<const int> query;
    std::span<const int> prefix;
    int turn = 1;
};

struct TokenDraw
{
    int token = 0;
    double logp = 0.0;
};

/// Anything that can emit response tokens. `u` is a uniform variate in [0, 1).
class ResponsePolicy
{
  public:
    virtual ~ResponsePolicy() = default;
    virtual TokenDraw draw(const TokenContext& ctx, double u) const = 0;
};

/// Fills logp_prm / logp_ref of a freshly sampled trajectory.
using TrajectoryScorer = std::function<void(Trajectory&)>;

/// Concatenation of (x^j, y^j) for every turn in `turns`.
inline std::vector<int> history_tokens(std::span<const Turn> turns)
{
    std::vector<int> out;
    for (const auto& t : turns) {
        out.insert(out.end(), t.user_tokens.begin(), t.user_tokens.end());
        out.insert(out.end(), t.response_tokens.begin(), t.response_tokens.end());
    }
    return out;
}

namespace detail {

inline void parallel_for(std::size_t n, int parallelism, const std::function<void(std::size_t)>& fn)
{
    const auto workers = static_cast<std::size_t>(std::max(1, parallelism));
    if (workers == 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(workers);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

} // namespace detail

class Environment
{
  public:
    explicit Environment(const EnvConfig& config) : config_(config)
    {
        if (config.num_turns < 2) throw std::invalid_argument("K < 2");
        if (config.num_digits < 1) throw std::invalid_argument("M < 1");
        if (!(config.noise_rate >= 0.0) || config.noise_rate >= 1.0)
            throw std::invalid_argument("p_noise must lie in [0, 1)");
        if (config.max_response_len < config.num_digits + 1)
            throw std::invalid_argument("max_response_len < M + 1 leaves no room for an answer");
        if (!(config.length_penalty >= 0.0)) throw std::invalid_argument("length_penalty < 0");
        vocab_ = Vocabulary(config.vocab_size, config.num_turns, config.num_digits);
        if (vocab_.block_size() < 2)
            throw std::invalid_argument("vocab_size too small: need V >= K + 3 + 2*M");
    }

    [[nodiscard]] const EnvConfig& config() const noexcept { return config_; }
    [[nodiscard]] const Vocabulary& vocab() const noexcept { return vocab_; }
    [[nodiscard]] int num_turns() const noexcept { return config_.num_turns; }
    [[nodiscard]] int num_digits() const noexcept { return config_.num_digits; }

    /// Deterministic in (config.seed, goal_seed).
    [[nodiscard]] LatentGoal draw_goal(std::uint64_t goal_seed) const
    {
        CounterRng rng = CounterRng(config_.seed).split(goal_seed);
        LatentGoal g;
        g.goal_id = goal_seed;
        g.digits.resize(static_cast<std::size_t>(config_.num_digits));
        for (int j = 0; j < config_.num_digits; ++j)
            g.digits[static_cast<std::size_t>(j)] =
                vocab_.block_begin(j) + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_.block_size())));
        // The final turn carries the answer, so the pivotal turn is one of 1..K-1.
        g.pivotal_index = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(config_.num_turns - 1)));
        return g;
    }

    /// Answer slot whose regular hint is always withheld.
    [[nodiscard]] int key_slot(const LatentGoal& goal) const noexcept
    {
        return (goal.pivotal_index - 1) % config_.num_digits;
    }

    /**
     * Next user query x^{k+1} given the k completed turns in `history`.
     *
     * Every query carries one hint slot for digit (k mod M). The key digit's
     * hint is always NOISE; other hints are replaced by NOISE with
     * probability p_noise. If the response at the pivotal turn contained
     * CLARIFY(pivotal), every later query also restates all M digits.
     */
    [[nodiscard]] std::vector<int> user_step(const LatentGoal& goal, std::span<const Turn> history, CounterRng& rng) const
    {
        const int k = static_cast<int>(history.size());
        if (k >= config_.num_turns) throw std::invalid_argument("user_step: trajectory already complete");
        const int slot = k % config_.num_digits;
        std::vector<int> query;
        const double u = rng.uniform();
        if (slot == key_slot(goal) || u < config_.noise_rate)
            query.push_back(vocab_.noise());
        else
            query.push_back(goal.digits[static_cast<std::size_t>(slot)]);

        if (k >= goal.pivotal_index) {
            const auto& prev = history[static_cast<std::size_t>(goal.pivotal_index - 1)].response_tokens;
            if (std::find(prev.begin(), prev.end(), vocab_.clarify(goal.pivotal_index)) != prev.end())
                query.insert(query.end(), goal.digits.begin(), goal.digits.end());
        }
        return query;
    }

    /// Fraction of the M tokens after the first ANSWER in the final response that match the goal.
    [[nodiscard]] double outcome_reward(const LatentGoal& goal, const Trajectory& traj) const
    {
        if (traj.turns.empty()) return 0.0;
        const auto& last = traj.turns.back().response_tokens;
        const auto it = std::find(last.begin(), last.end(), vocab_.answer());
        if (it == last.end()) return 0.0;
        int correct = 0;
        auto pos = it + 1;
        for (int j = 0; j < config_.num_digits && pos != last.end(); ++j, ++pos)
            if (*pos == goal.digits[static_cast<std::size_t>(j)]) ++correct;
        return static_cast<double>(correct) / config_.num_digits;
    }

    /// Samples y^k token by token until PAD or max_response_len.
    void generate_response(const ResponsePolicy& policy, std::span<const int> history, Turn& turn, CounterRng& rng) const
    {
        turn.response_tokens.clear();
        turn.logp_policy.clear();
        for (int t = 0; t < config_.max_response_len; ++t) {
            TokenContext ctx{history, turn.user_tokens, turn.response_tokens, turn.index};
            const TokenDraw d = policy.draw(ctx, rng.uniform());
            turn.response_tokens.push_back(d.token);
            turn.logp_policy.push_back(d.logp);
            if (d.token == vocab_.pad()) break;
        }
    }

    /// Turn streams: user = base.split(k).split(0), policy = base.split(k).split(1).
    void play_turns(const ResponsePolicy& policy, Trajectory& traj, const CounterRng& base) const
    {
        auto history = history_tokens(traj.turns);
        for (int k = static_cast<int>(traj.turns.size()) + 1; k <= config_.num_turns; ++k) {
            CounterRng turn_rng = base.split(static_cast<std::uint64_t>(k));
            CounterRng user_rng = turn_rng.split(0);
            CounterRng policy_rng = turn_rng.split(1);
            Turn turn;
            turn.index = k;
            turn.user_tokens = user_step(traj.goal, traj.turns, user_rng);
            generate_response(policy, history, turn, policy_rng);
            history.insert(history.end(), turn.user_tokens.begin(), turn.user_tokens.end());
            history.insert(history.end(), turn.response_tokens.begin(), turn.response_tokens.end());
            traj.turns.push_back(std::move(turn));
        }
    }

    void finalize(Trajectory& traj) const
    {
        traj.outcome = outcome_reward(traj.goal, traj);
        traj.token_count = 0;
        for (auto& t : traj.turns) {
            traj.token_count += static_cast<int>(t.response_tokens.size());
            if (t.logp_prm.size() != t.response_tokens.size()) t.logp_prm.assign(t.response_tokens.size(), 0.0);
            if (t.logp_ref.size() != t.response_tokens.size()) t.logp_ref.assign(t.response_tokens.size(), 0.0);
        }
        traj.combined_score = traj.outcome - config_.length_penalty * traj.token_count;
    }

    [[nodiscard]] Trajectory run_episode(const ResponsePolicy& policy, const LatentGoal& goal, const CounterRng& rng) const
    {
        Trajectory traj;
        traj.goal = goal;
        play_turns(policy, traj, rng);
        finalize(traj);
        return traj;
    }

    /**
     * G trajectories for one goal. Trajectory i uses stream rng.split(i), so
     * the result does not depend on `parallelism`. logp_prm / logp_ref are
     * zero until `scorer` (if any) fills them.
     */
    [[nodiscard]] RolloutGroup rollout(const ResponsePolicy& policy, std::uint64_t goal_seed, int group_size,
                                       const CounterRng& rng, const TrajectoryScorer& scorer = {},
                                       int parallelism = 1) const
    {
        if (group_size < 2) throw std::invalid_argument("rollout: G < 2");
        RolloutGroup group;
        group.prompt_seed = goal_seed;
        group.trajectories.resize(static_cast<std::size_t>(group_size));
        const LatentGoal goal = draw_goal(goal_seed);
        detail::parallel_for(group.trajectories.size(), parallelism, [&](std::size_t i) {
            Trajectory traj = run_episode(policy, goal, rng.split(i));
            if (scorer) scorer(traj);
            group.trajectories[i] = std::move(traj);
        });
        return group;
    }

    /**
     * Counterfactual importance of turn k (1-based):
     *   mean outcome after resampling y^k and continuing
     *   - mean outcome after keeping y^k and continuing.
     * Both arms of sample s share the continuation stream, so turns that do
     * not influence the future contribute (near) zero.
     */
    [[nodiscard]] double counterfactual_turn_value(const Trajectory& traj, int k, const ResponsePolicy& policy,
                                                   int n_samples, const CounterRng& rng) const
    {
        if (k < 1 || k > static_cast<int>(traj.turns.size()))
            throw std::invalid_argument("counterfactual_turn_value: turn index out of range");
        if (n_samples < 1) throw std::invalid_argument("counterfactual_turn_value: n_samples < 1");
        const auto ku = static_cast<std::size_t>(k);
        double keep_sum = 0.0;
        double resample_sum = 0.0;
        for (int s = 0; s < n_samples; ++s) {
            const CounterRng sample_rng = rng.split(static_cast<std::uint64_t>(s));
            const CounterRng continuation = sample_rng.split(1);

            Trajectory keep;
            keep.goal = traj.goal;
            keep.turns.assign(traj.turns.begin(), traj.turns.begin() + static_cast<std::ptrdiff_t>(ku));
            play_turns(policy, keep, continuation);
            keep_sum += outcome_reward(keep.goal, keep);

            Trajectory alt;
            alt.goal = traj.goal;
            alt.turns.assign(traj.turns.begin(), traj.turns.begin() + static_cast<std::ptrdiff_t>(ku - 1));
            Turn redo;
            redo.index = k;
            redo.user_tokens = traj.turns[ku - 1].user_tokens;
            CounterRng redo_rng = sample_rng.split(0);
            generate_response(policy, history_tokens(alt.turns), redo, redo_rng);
            alt.turns.push_back(std::move(redo));
            play_turns(policy, alt, continuation);
            resample_sum += outcome_reward(alt.goal, alt);
        }
        return (resample_sum - keep_sum) / n_samples;
    }

    /// argmax_k |counterfactual_turn_value(k)|, 1-based, plus the per-turn deltas.
    [[nodiscard]] std::pair<int, std::vector<double>> oracle_pivotal_turn(const Trajectory& traj,
                                                                          const ResponsePolicy& policy, int n_samples,
                                                                          const CounterRng& rng) const
    {
        std::vector<double> deltas;
        int best = 1;
        for (int k = 1; k <= static_cast<int>(traj.turns.size()); ++k) {
            deltas.push_back(counterfactual_turn_value(traj, k, policy, n_samples, rng.split(static_cast<std::uint64_t>(k))));
            if (std::abs(deltas.back()) > std::abs(deltas[static_cast<std::size_t>(best - 1)])) best = k;
        }
        return {best, deltas};
    }

  private:
    EnvConfig config_;
    Vocabulary vocab_;
};

inline Environment make_environment(const EnvConfig& config) { return Environment(config); }

/// Checks the Trajectory invariants; returns an empty string when they hold.
inline std::string check_trajectory(const Trajectory& traj, double length_penalty)
{
    if (traj.turns.empty()) return "no turns";
    int n = 0;
    for (std::size_t i = 0; i < traj.turns.size(); ++i) {
        const auto& t = traj.turns[i];
        if (t.index != static_cast<int>(i) + 1) return "turn indices not consecutive from 1";
        if (t.response_tokens.empty()) return "empty response";
        const auto len = t.response_tokens.size();
        if (t.logp_policy.size() != len || t.logp_prm.size() != len || t.logp_ref.size() != len)
            return "log-probability length mismatch";
        for (const auto* seq : {&t.logp_policy, &t.logp_prm, &t.logp_ref})
            for (double v : *seq)
                if (!(v <= 0.0) || !std::isfinite(v)) return "log-probability not finite and <= 0";
        n += static_cast<int>(len);
    }
    if (!(traj.outcome >= 0.0 && traj.outcome <= 1.0)) return "outcome outside [0, 1]";
    if (n != traj.token_count) return "token_count mismatch";
    if (traj.combined_score != traj.outcome - length_penalty * n) return "combined_score mismatch";
    return {};
}

// JSONL trajectory log schema.

inline nlohmann::json to_json(const Trajectory& traj)
{
    nlohmann::json turns = nlohmann::json::array();
    for (const auto& t : traj.turns) {
        turns.push_back({{"user_tokens", t.user_tokens},
                         {"response_tokens", t.response_tokens},
                         {"logp_policy", t.logp_policy},
                         {"logp_prm", t.logp_prm},
                         {"logp_ref", t.logp_ref}});
    }
    return {{"goal_id", traj.goal.goal_id},
            {"pivotal_index", traj.goal.pivotal_index},
            {"goal_digits", traj.goal.digits},
            {"turns", std::move(turns)},
            {"outcome", traj.outcome},
            {"token_count", traj.token_count},
            {"combined_score", traj.combined_score}};
}

inline Trajectory trajectory_from_json(const nlohmann::json& j)
{
    Trajectory traj;
    traj.goal.goal_id = j.at("goal_id").get<std::uint64_t>();
    traj.goal.pivotal_index = j.at("pivotal_index").get<int>();
    if (j.contains("goal_digits")) traj.goal.digits = j.at("goal_digits").get<std::vector<int>>();
    int index = 1;
    for (const auto& jt : j.at("turns")) {
        Turn t;
        t.index = index++;
        t.user_tokens = jt.at("user_tokens").get<std::vector<int>>();
        t.response_tokens = jt.at("response_tokens").get<std::vector<int>>();
        t.logp_policy = jt.at("logp_policy").get<std::vector<double>>();
        t.logp_prm = jt.at("logp_prm").get<std::vector<double>>();
        t.logp_ref = jt.at("logp_ref").get<std::vector<double>>();
        traj.turns.push_back(std::move(t));
    }
    traj.outcome = j.at("outcome").get<double>();
    traj.token_count = j.at("token_count").get<int>();
    traj.combined_score = j.at("combined_score").get<double>();
    return traj;
}

} // namespace turnwise
