#pragma once

// The training loop: per iteration, rollout (stage 1), implicit PRM update
// and token rewards (stage 2), per-turn attribution (stage 3), advantage
// estimation and the clipped policy update (stage 4). Also builds the frozen
// probe set and the oracle-labelled agreement probe.

#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "turnwise/advantage.hpp"
#include "turnwise/attribution.hpp"
#include "turnwise/config.hpp"
#include "turnwise/diagnostics.hpp"
#include "turnwise/envsim.hpp"
#include "turnwise/implicit_prm.hpp"
#include "turnwise/policy_model.hpp"
#include "turnwise/ppo.hpp"
#include "turnwise/rng.hpp"

namespace turnwise {

// Goal seed ranges. Training uses [0, N*B).
inline constexpr std::uint64_t kProbeSeedBase = 500'000'000;
inline constexpr std::uint64_t kAgreementSeedBase = 600'000'000;
inline constexpr std::uint64_t kEvalSeedBase = 1'000'000'000;

// Stream ids under the run key.
namespace stream {
inline constexpr std::uint64_t rollout = 1;
inline constexpr std::uint64_t attribution = 2;
inline constexpr std::uint64_t probe = 3;
inline constexpr std::uint64_t agreement = 4;
inline constexpr std::uint64_t eval = 5;
inline constexpr std::uint64_t oracle = 6;
} // namespace stream

struct TrainState
{
    RunConfig config;
    FeatureMap fmap;
    ParamMatrix policy;
    ParamMatrix prm;
    ParamMatrix reference;
    ParamMatrix anchor;        // KL anchor: the initial policy
    ParamMatrix value;         // critic for the attributed channel (gae)
    ParamMatrix value_outcome; // critic for the outcome channel (gae)
    AdamState policy_opt;
    PrmOptimizer prm_opt;
    std::int64_t step = 0;
    CounterRng rng;
};

/// Zero-initialized policy (uniform over tokens); PRM and reference start as copies of it.
inline TrainState init_train_state(const RunConfig& cfg)
{
    validate(cfg);
    TrainState s;
    s.config = cfg;
    s.fmap = FeatureMap(cfg.vocab_size, cfg.num_turns);
    const int d = s.fmap.dim();
    s.policy = ParamMatrix(d, cfg.vocab_size, ModelTag::policy);
    s.prm = ParamMatrix(d, cfg.vocab_size, ModelTag::prm);
    s.reference = ParamMatrix(d, cfg.vocab_size, ModelTag::reference);
    s.anchor = s.policy;
    s.value = ParamMatrix(d, 1, ModelTag::value);
    s.value_outcome = ParamMatrix(d, 1, ModelTag::value);
    s.prm_opt.lr = cfg.prm_lr;
    s.prm_opt.clip_norm = cfg.prm_clip;
    s.rng = CounterRng(cfg.seed);
    return s;
}

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

struct IterationMetrics
{
    std::int64_t step = 0;
    Strategy strategy = Strategy::norm_itpo;
    Estimator estimator = Estimator::rloo;
    double mean_outcome = 0.0;
    double mean_token_count = 0.0;
    double mean_combined_score = 0.0;
    double bce_loss = kNaN;
    double kendall_tau = kNaN;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
};

inline std::string metrics_header()
{
    return "step,strategy,estimator,mean_outcome,mean_token_count,mean_combined_score,bce_loss,kendall_tau,mean_kl,"
           "clip_fraction";
}

inline std::string format_metric(double v)
{
    if (std::isnan(v)) return "nan";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::string metrics_row(const IterationMetrics& m)
{
    std::string row = std::to_string(m.step) + "," + std::string(to_string(m.strategy)) + "," +
                      std::string(to_string(m.estimator));
    for (double v : {m.mean_outcome, m.mean_token_count, m.mean_combined_score, m.bce_loss, m.kendall_tau, m.mean_kl,
                     m.clip_fraction})
        row += "," + format_metric(v);
    return row;
}

/// Everything produced by one iteration.
struct IterationRecord
{
    IterationMetrics metrics;
    std::vector<Trajectory> batch;              // B*G, group b at [b*G, (b+1)*G)
    std::vector<AttributionResult> attributions; // one per trajectory
};

/// Stage failure; carries the offending batch for the dump.
class TrainAbort : public std::runtime_error
{
  public:
    TrainAbort(const std::string& what, std::int64_t step, std::vector<Trajectory> batch)
        : std::runtime_error(what), step_(step), batch_(std::move(batch))
    {
    }
    [[nodiscard]] std::int64_t step() const noexcept { return step_; }
    [[nodiscard]] const std::vector<Trajectory>& batch() const noexcept { return batch_; }

  private:
    std::int64_t step_;
    std::vector<Trajectory> batch_;
};

namespace detail {

inline std::vector<Vec> group_slices(const Vec& values, std::size_t group_size)
{
    std::vector<Vec> out;
    for (std::size_t b = 0; b * group_size < values.size(); ++b)
        out.emplace_back(values.begin() + static_cast<std::ptrdiff_t>(b * group_size),
                         values.begin() + static_cast<std::ptrdiff_t>((b + 1) * group_size));
    return out;
}

/// Per-turn advantages of one group for `rewards`; gae reads the critic at each turn start.
inline TurnGrid group_advantages(const TrainState& s, const TurnGrid& rewards, const ParamMatrix& critic,
                                 std::span<const TrajectoryFeatures> feats)
{
    const auto& c = s.config;
    switch (c.estimator) {
    case Estimator::rloo: return rloo(rewards).values;
    case Estimator::grpo: return grpo(rewards, c.eps_std).values;
    case Estimator::gae: {
        TurnGrid values(rewards.rows, rewards.cols + 1);
        for (std::size_t i = 0; i < rewards.rows; ++i)
            for (std::size_t k = 0; k < rewards.cols; ++k) values(i, k) = value(critic, feats[i].turn_states[k]);
        return gae(rewards, values, c.gamma_disc, c.lambda_gae).values;
    }
    }
    throw std::logic_error("unknown estimator");
}

inline void add_value_samples(const TurnGrid& rewards, std::span<const TrajectoryFeatures> feats, double gamma,
                              std::vector<ValueSample>& out)
{
    for (std::size_t i = 0; i < rewards.rows; ++i) {
        const Vec rtg = returns_to_go(rewards.row(i), gamma);
        for (std::size_t k = 0; k < rewards.cols; ++k) out.push_back({feats[i].turn_states[k], rtg[k]});
    }
}

} // namespace detail

/// Runs iteration `state.step + 1` and advances the state.
inline IterationRecord train_iteration(TrainState& s, const Environment& env)
{
    const RunConfig& c = s.config;
    const std::int64_t it = s.step + 1;
    const auto G = static_cast<std::size_t>(c.rollouts);
    const auto B = static_cast<std::size_t>(c.groups);
    const auto K = static_cast<std::size_t>(c.num_turns);
    IterationRecord rec;
    rec.metrics.step = it;
    rec.metrics.strategy = c.strategy;
    rec.metrics.estimator = c.estimator;

    // Stage 1: rollouts.
    {
        const LogLinearPolicy pol(s.policy, s.fmap);
        const CounterRng base = s.rng.split(stream::rollout).split(static_cast<std::uint64_t>(it));
        for (std::size_t b = 0; b < B; ++b) {
            const auto goal_seed = static_cast<std::uint64_t>(it - 1) * B + b;
            auto group = env.rollout(pol, goal_seed, c.rollouts, base.split(b), {}, c.parallelism);
            for (auto& t : group.trajectories) rec.batch.push_back(std::move(t));
        }
    }
    auto& batch = rec.batch;
    try {
        std::vector<TrajectoryFeatures> feats(batch.size());
        detail::parallel_for(batch.size(), c.parallelism, [&](std::size_t i) { feats[i] = featurize(s.fmap, batch[i]); });

        // Stage 2: PRM update on the fresh batch, then token rewards from the updated PRM.
        std::vector<TokenRewardSeq> rewards(batch.size());
        if (uses_prm(c.strategy)) {
            for (int step = 0; step < c.prm_steps; ++step) {
                const PrmGradient g = prm_update(s.prm, s.reference, batch, feats, c.beta, s.prm_opt);
                if (step == 0) {
                    rec.metrics.bce_loss = g.mean_loss;
                    Vec outcomes;
                    for (const auto& t : batch) outcomes.push_back(t.outcome);
                    rec.metrics.kendall_tau =
                        mean_group_kendall(detail::group_slices(g.implicit_rewards, G), detail::group_slices(outcomes, G))
                            .mean_tau;
                }
            }
            if (!s.prm.all_finite()) throw std::domain_error("non-finite PRM parameters");
            detail::parallel_for(batch.size(), c.parallelism, [&](std::size_t i) {
                score_with(s.prm, s.reference, feats[i], batch[i]);
                rewards[i] = token_rewards(batch[i], c.beta);
            });
        }

        // Stage 3: attribution.
        const CounterRng attr_rng = s.rng.split(stream::attribution).split(static_cast<std::uint64_t>(it));
        rec.attributions.resize(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            CounterRng r = attr_rng.split(i);
            rec.attributions[i] = attribute(c.strategy, batch[i], uses_prm(c.strategy) ? &rewards[i] : nullptr, c.eta, r);
        }

        // Stage 4: advantages per group, then minibatched policy updates.
        std::vector<PolicyUnit> all_units;
        std::vector<std::size_t> unit_group;
        std::vector<ValueSample> value_batch, outcome_value_batch;
        for (std::size_t b = 0; b < B; ++b) {
            const std::span<const TrajectoryFeatures> gf(feats.data() + b * G, G);
            TurnGrid attributed(G, K), outcome(G, K);
            for (std::size_t i = 0; i < G; ++i) {
                const auto& res = rec.attributions[b * G + i];
                for (std::size_t k = 0; k < K; ++k) {
                    attributed(i, k) = res.per_turn[k];
                    outcome(i, k) = batch[b * G + i].outcome;
                }
            }
            const bool want_outcome = c.w_outcome > 0.0;
            const TurnGrid a_out = want_outcome ? detail::group_advantages(s, outcome, s.value_outcome, gf) : TurnGrid(G, K);
            if (c.estimator == Estimator::gae && want_outcome)
                detail::add_value_samples(outcome, gf, c.gamma_disc, outcome_value_batch);

            if (c.strategy == Strategy::token_level) {
                TokenGrid tok(G);
                for (std::size_t i = 0; i < G; ++i) tok[i] = rec.attributions[b * G + i].per_token;
                const TokenGrid a_tok = token_return_advantages(tok, c.estimator, c.eps_std);
                for (std::size_t i = 0; i < G; ++i)
                    for (std::size_t k = 0; k < K; ++k)
                        for (std::size_t t = 0; t < a_tok[i][k].size(); ++t) {
                            all_units.push_back({b * G + i, k, t, t + 1, c.w_implicit * a_tok[i][k][t] + c.w_outcome * a_out(i, k)});
                            unit_group.push_back(b);
                        }
            } else {
                const TurnGrid a_imp = detail::group_advantages(s, attributed, s.value, gf);
                if (c.estimator == Estimator::gae) detail::add_value_samples(attributed, gf, c.gamma_disc, value_batch);
                const MixedAdvantage mixed = mix_advantages(a_imp, a_out, c.w_implicit, c.w_outcome);
                for (std::size_t i = 0; i < G; ++i)
                    for (std::size_t k = 0; k < K; ++k) {
                        all_units.push_back({b * G + i, k, 0, batch[b * G + i].turns[k].response_tokens.size(), mixed.values(i, k)});
                        unit_group.push_back(b);
                    }
            }
        }
        if (!value_batch.empty()) fit_value_head(s.value, value_batch, c.value_lr);
        if (!outcome_value_batch.empty()) fit_value_head(s.value_outcome, outcome_value_batch, c.value_lr);

        const auto mb = static_cast<std::size_t>(c.minibatch_groups);
        double kl_sum = 0.0, clip_sum = 0.0;
        int n_mb = 0;
        for (std::size_t g0 = 0; g0 < B; g0 += mb) {
            const std::size_t g1 = std::min(B, g0 + mb);
            std::vector<const Trajectory*> mb_batch;
            std::vector<const TrajectoryFeatures*> mb_feats;
            for (std::size_t i = g0 * G; i < g1 * G; ++i) {
                mb_batch.push_back(&batch[i]);
                mb_feats.push_back(&feats[i]);
            }
            std::vector<PolicyUnit> units;
            for (std::size_t u = 0; u < all_units.size(); ++u) {
                if (unit_group[u] < g0 || unit_group[u] >= g1) continue;
                PolicyUnit unit = all_units[u];
                unit.traj -= g0 * G;
                units.push_back(unit);
            }
            const PolicyLoss loss = policy_loss(s.policy, s.anchor, mb_batch, mb_feats, units, c.eps_clip, c.kl_coeff);
            policy_update(s.policy, loss.grad, c.policy_lr, s.policy_opt);
            kl_sum += loss.kl;
            clip_sum += loss.clip_fraction;
            ++n_mb;
        }
        rec.metrics.mean_kl = kl_sum / n_mb;
        rec.metrics.clip_fraction = clip_sum / n_mb;
    } catch (const std::exception& e) {
        throw TrainAbort("step " + std::to_string(it) + ": " + e.what(), it, batch);
    }

    double outcome = 0.0, tokens = 0.0, score = 0.0;
    for (const auto& t : batch) {
        outcome += t.outcome;
        tokens += t.token_count;
        score += t.combined_score;
    }
    const auto n = static_cast<double>(batch.size());
    rec.metrics.mean_outcome = outcome / n;
    rec.metrics.mean_token_count = tokens / n;
    rec.metrics.mean_combined_score = score / n;
    s.step = it;
    return rec;
}

/// Frozen probe trajectories with a cached feature map.
struct ProbeCache
{
    ProbeSet set;
    std::vector<TrajectoryFeatures> feats;
};

/// probe_groups x probe_rollouts trajectories of the current policy on reserved goal seeds.
inline ProbeCache make_probe(const TrainState& s, const Environment& env)
{
    const RunConfig& c = s.config;
    ProbeCache out;
    std::vector<Trajectory> trajs;
    std::vector<int> ids;
    const LogLinearPolicy pol(s.policy, s.fmap);
    for (int g = 0; g < c.probe_groups; ++g) {
        auto group = env.rollout(pol, kProbeSeedBase + static_cast<std::uint64_t>(g), c.probe_rollouts,
                                 s.rng.split(stream::probe).split(static_cast<std::uint64_t>(g)), {}, c.parallelism);
        for (auto& t : group.trajectories) {
            trajs.push_back(std::move(t));
            ids.push_back(g);
        }
    }
    for (const auto& t : trajs) out.feats.push_back(featurize(s.fmap, t));
    out.set = ProbeSet(std::move(trajs), std::move(ids));
    return out;
}

/// Turn scores, flattened token rewards and R_phi of every probe trajectory under the current PRM.
inline ProbeSnapshot snapshot_probe(const TrainState& s, const ProbeCache& probe, int parallelism)
{
    ProbeSnapshot snap;
    snap.step = s.step;
    const auto& trajs = probe.set.trajectories();
    snap.turn_scores.resize(trajs.size());
    snap.token_rewards.resize(trajs.size());
    snap.implicit_rewards.resize(trajs.size());
    detail::parallel_for(trajs.size(), parallelism, [&](std::size_t i) {
        const TokenRewardSeq r = token_rewards(score_log_probs(s.prm, probe.feats[i], trajs[i]),
                                               score_log_probs(s.reference, probe.feats[i], trajs[i]), s.config.beta);
        snap.turn_scores[i] = itpo_turn_scores(r);
        for (const auto& turn : r.per_turn) snap.token_rewards[i].insert(snap.token_rewards[i].end(), turn.begin(), turn.end());
        snap.implicit_rewards[i] = trajectory_reward(r);
    });
    return snap;
}

struct AgreementProbe
{
    std::vector<Trajectory> trajectories;
    std::vector<Vec> turn_scores; // PRM turn scores (argmax equals the Norm-ITPO argmax)
    std::vector<int> oracle_turns;
    std::vector<Vec> deltas;
};

/// Fresh trajectories of the current policy labelled by the counterfactual oracle under the same policy.
inline AgreementProbe make_agreement_probe(const TrainState& s, const Environment& env)
{
    const RunConfig& c = s.config;
    AgreementProbe out;
    const auto n = static_cast<std::size_t>(c.oracle_probe_size);
    out.trajectories.resize(n);
    out.turn_scores.resize(n);
    out.oracle_turns.resize(n);
    out.deltas.resize(n);
    const LogLinearPolicy pol(s.policy, s.fmap);
    detail::parallel_for(n, c.parallelism, [&](std::size_t i) {
        const LatentGoal goal = env.draw_goal(kAgreementSeedBase + i);
        Trajectory traj = env.run_episode(pol, goal, s.rng.split(stream::agreement).split(i));
        const auto feats = featurize(s.fmap, traj);
        score_with(s.prm, s.reference, feats, traj);
        out.turn_scores[i] = itpo_turn_scores(token_rewards(traj, c.beta));
        auto [best, deltas] = env.oracle_pivotal_turn(traj, pol, c.oracle_samples, s.rng.split(stream::oracle).split(i));
        out.oracle_turns[i] = best;
        out.deltas[i] = std::move(deltas);
        out.trajectories[i] = std::move(traj);
    });
    return out;
}

struct TrainHooks
{
    std::function<void(const TrainState&)> on_start;
    std::function<void(const TrainState&, const IterationRecord&)> on_iteration;
    std::function<void(const TrainState&, const ProbeSnapshot&)> on_snapshot;
};

struct TrainResult
{
    TrainState state;
    std::vector<IterationMetrics> metrics;
    ProbeCache probe;
    AgreementProbe agreement;
};

/// The full loop. Deterministic in the config (including its seed) for any parallelism.
inline TrainResult train_loop(const RunConfig& cfg, const TrainHooks& hooks = {})
{
    TrainResult out;
    out.state = init_train_state(cfg);
    TrainState& s = out.state;
    const Environment env(cfg.env());
    const bool probing = uses_prm(cfg.strategy) && cfg.probe_groups > 0;
    if (probing) out.probe = make_probe(s, env);
    if (hooks.on_start) hooks.on_start(s);
    for (int it = 1; it <= cfg.iterations; ++it) {
        IterationRecord rec = train_iteration(s, env);
        if (probing && it >= cfg.probe_start && (it - cfg.probe_start) % cfg.probe_every == 0) {
            ProbeSnapshot snap = snapshot_probe(s, out.probe, cfg.parallelism);
            if (hooks.on_snapshot) hooks.on_snapshot(s, snap);
            out.probe.set.append(std::move(snap));
        }
        out.metrics.push_back(rec.metrics);
        if (hooks.on_iteration) hooks.on_iteration(s, rec);
    }
    if (uses_prm(cfg.strategy) && cfg.oracle_probe_size > 0) out.agreement = make_agreement_probe(s, env);
    return out;
}

} // namespace turnwise
