#pragma once

// Turn-level importance ratios, the clipped surrogate, the KL penalty and
// the policy step.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "turnwise/advantage.hpp"
#include "turnwise/envsim.hpp"
#include "turnwise/policy_model.hpp"

namespace turnwise {

struct TurnRatio
{
    double log_ratio = 0.0;
    double ratio = 1.0;
};

/// exp(sum_t [log pi_new - log pi_old]) from per-token log-probabilities.
inline TurnRatio turn_ratio(std::span<const double> logp_new, std::span<const double> logp_old)
{
    if (logp_new.size() != logp_old.size()) throw std::invalid_argument("turn_ratio: length mismatch");
    TurnRatio r;
    for (std::size_t t = 0; t < logp_new.size(); ++t) r.log_ratio += logp_new[t] - logp_old[t];
    if (!std::isfinite(r.log_ratio)) throw std::domain_error("turn_ratio: non-finite log-ratio");
    r.ratio = std::exp(r.log_ratio);
    return r;
}

/// Ratio of turn k (1-based) under `policy` against the stored rollout log-probabilities.
inline TurnRatio turn_ratio(const ParamMatrix& policy, const TrajectoryFeatures& feats, const Trajectory& traj, int k)
{
    const auto ku = static_cast<std::size_t>(k - 1);
    const Turn& turn = traj.turns.at(ku);
    if (turn.logp_policy.size() != turn.response_tokens.size()) throw std::invalid_argument("turn_ratio: old log-probs missing");
    Vec now;
    for (std::size_t t = 0; t < turn.response_tokens.size(); ++t)
        now.push_back(log_prob(policy, feats.tokens[ku][t], turn.response_tokens[t]));
    return turn_ratio(now, turn.logp_policy);
}

struct SurrogateResult
{
    double loss = 0.0;          // -objective
    TurnGrid dobj_dlogratio;    // d objective / d log rho per entry
    double clip_fraction = 0.0; // share of entries where the clipped branch is selected
};

/**
 * objective = mean_i sum_k min(rho A, clip(rho, 1-eps, 1+eps) A).
 * Entries where the clipped branch wins pass no gradient.
 */
inline SurrogateResult ppo_surrogate(const TurnGrid& ratios, const TurnGrid& advantages, double eps_clip)
{
    if (!ratios.same_shape(advantages)) throw std::invalid_argument("ppo_surrogate: shape mismatch");
    if (!(eps_clip > 0.0 && eps_clip < 1.0)) throw std::invalid_argument("ppo_surrogate: eps_clip outside (0, 1)");
    SurrogateResult out;
    out.dobj_dlogratio = TurnGrid(ratios.rows, ratios.cols);
    if (ratios.rows == 0) return out;
    const double inv_g = 1.0 / static_cast<double>(ratios.rows);
    double objective = 0.0;
    std::size_t clipped = 0;
    for (std::size_t j = 0; j < ratios.data.size(); ++j) {
        const double rho = ratios.data[j];
        const double a = advantages.data[j];
        const double unclipped = rho * a;
        const double bounded = std::clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip) * a;
        if (unclipped <= bounded) {
            objective += unclipped;
            out.dobj_dlogratio.data[j] = unclipped * inv_g;
        } else {
            objective += bounded;
            ++clipped;
        }
    }
    out.loss = -objective * inv_g;
    out.clip_fraction = static_cast<double>(clipped) / static_cast<double>(ratios.data.size());
    return out;
}

/// A credit unit of the surrogate: a whole turn, or a single token for token-level credit.
struct PolicyUnit
{
    std::size_t traj = 0;  // index into the batch
    std::size_t turn = 0;  // 0-based
    std::size_t first = 0; // token range [first, last)
    std::size_t last = 0;
    double advantage = 0.0;
};

/// Units covering every turn of every trajectory, with advantages from a G x K grid per trajectory row.
inline std::vector<PolicyUnit> turn_units(std::span<const Trajectory* const> batch, const TurnGrid& advantages)
{
    std::vector<PolicyUnit> units;
    for (std::size_t i = 0; i < batch.size(); ++i)
        for (std::size_t k = 0; k < batch[i]->turns.size(); ++k)
            units.push_back({i, k, 0, batch[i]->turns[k].response_tokens.size(), advantages(i, k)});
    return units;
}

/// KL(pi_theta(.|f) || pi_anchor(.|f)) summed over the vocabulary.
inline double token_kl(const ParamMatrix& theta, const ParamMatrix& anchor, std::span<const double> f)
{
    const TokenDistribution p = distribution(theta, f);
    const TokenDistribution q = distribution(anchor, f);
    double kl = 0.0;
    for (std::size_t c = 0; c < p.probabilities.size(); ++c)
        kl += p.probabilities[c] * (p.log_prob(static_cast<int>(c)) - q.log_prob(static_cast<int>(c)));
    return kl;
}

/// grad += scale * dKL/dtheta with dKL/dz_c = p_c (log p_c - log q_c - KL). Returns the KL.
inline double accumulate_grad_kl(const ParamMatrix& theta, const ParamMatrix& anchor, std::span<const double> f,
                                 double scale, ParamMatrix& grad)
{
    const TokenDistribution p = distribution(theta, f);
    const TokenDistribution q = distribution(anchor, f);
    Vec dz(p.probabilities.size());
    double kl = 0.0;
    for (std::size_t c = 0; c < dz.size(); ++c) {
        dz[c] = p.log_prob(static_cast<int>(c)) - q.log_prob(static_cast<int>(c));
        kl += p.probabilities[c] * dz[c];
    }
    if (scale == 0.0) return kl;
    for (std::size_t c = 0; c < dz.size(); ++c) dz[c] = scale * p.probabilities[c] * (dz[c] - kl);
    for (int r = 0; r < theta.rows; ++r) {
        const double fr = f[static_cast<std::size_t>(r)];
        if (fr == 0.0) continue;
        double* row = grad.weights.data() + static_cast<std::size_t>(r) * theta.cols;
        for (int c = 0; c < theta.cols; ++c) row[c] += fr * dz[static_cast<std::size_t>(c)];
    }
    return kl;
}

struct PolicyLoss
{
    double surrogate_loss = 0.0;
    double kl = 0.0;            // mean per-token KL(pi_theta || pi_anchor)
    double clip_fraction = 0.0;
    ParamMatrix grad;           // d(surrogate_loss + kl_coeff * kl) / d theta
};

/**
 * Surrogate plus KL penalty over `units`, normalized by the number of
 * trajectories. Advantages are constants; old log-probabilities come from
 * Turn::logp_policy recorded at rollout time.
 */
inline PolicyLoss policy_loss(const ParamMatrix& theta, const ParamMatrix& anchor, std::span<const Trajectory* const> batch,
                              std::span<const TrajectoryFeatures* const> feats, std::span<const PolicyUnit> units,
                              double eps_clip, double kl_coeff)
{
    if (batch.size() != feats.size()) throw std::invalid_argument("policy_loss: feature cache mismatch");
    if (!(kl_coeff >= 0.0)) throw std::invalid_argument("policy_loss: kl_coeff < 0");
    PolicyLoss out;
    out.grad = ParamMatrix(theta.rows, theta.cols, theta.tag);
    if (batch.empty() || units.empty()) return out;

    TurnGrid ratios(1, units.size());
    TurnGrid adv(1, units.size());
    for (std::size_t u = 0; u < units.size(); ++u) {
        const auto& unit = units[u];
        const Turn& turn = batch[unit.traj]->turns[unit.turn];
        double lr = 0.0;
        for (std::size_t t = unit.first; t < unit.last; ++t)
            lr += log_prob(theta, feats[unit.traj]->tokens[unit.turn][t], turn.response_tokens[t]) - turn.logp_policy[t];
        if (!std::isfinite(lr)) throw std::domain_error("policy_loss: non-finite log-ratio");
        ratios.data[u] = std::exp(lr);
        adv.data[u] = unit.advantage;
    }
    // Single-row grid: rescale so the mean runs over trajectories, not units.
    SurrogateResult s = ppo_surrogate(ratios, adv, eps_clip);
    const double n_traj = static_cast<double>(batch.size());
    out.surrogate_loss = s.loss / n_traj;
    out.clip_fraction = s.clip_fraction;

    std::size_t n_tokens = 0;
    for (const auto* traj : batch)
        for (const auto& turn : traj->turns) n_tokens += turn.response_tokens.size();
    const double kl_scale = n_tokens > 0 ? kl_coeff / static_cast<double>(n_tokens) : 0.0;

    // Surrogate gradient: -dobj/dlogrho on every token of the unit.
    std::vector<std::vector<Vec>> coeff(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        coeff[i].resize(batch[i]->turns.size());
        for (std::size_t k = 0; k < batch[i]->turns.size(); ++k)
            coeff[i][k].assign(batch[i]->turns[k].response_tokens.size(), 0.0);
    }
    for (std::size_t u = 0; u < units.size(); ++u) {
        const double c = -s.dobj_dlogratio.data[u] / n_traj;
        for (std::size_t t = units[u].first; t < units[u].last; ++t) coeff[units[u].traj][units[u].turn][t] += c;
    }
    double kl_sum = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (std::size_t k = 0; k < batch[i]->turns.size(); ++k) {
            const auto& resp = batch[i]->turns[k].response_tokens;
            for (std::size_t t = 0; t < resp.size(); ++t) {
                const auto& f = feats[i]->tokens[k][t];
                accumulate_grad_log_prob(theta, f, resp[t], coeff[i][k][t], out.grad);
                kl_sum += accumulate_grad_kl(theta, anchor, f, kl_scale, out.grad);
            }
        }
    }
    out.kl = n_tokens > 0 ? kl_sum / static_cast<double>(n_tokens) : 0.0;
    return out;
}

/// coeff * mean over response-token contexts of KL(pi_theta || pi_anchor).
inline double kl_penalty(const ParamMatrix& theta, const ParamMatrix& anchor, std::span<const Trajectory> batch,
                         const FeatureMap& fmap, double coeff)
{
    if (coeff < 0.0) throw std::invalid_argument("kl_penalty: coeff < 0");
    if (coeff == 0.0) return 0.0;
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& traj : batch) {
        const auto feats = featurize(fmap, traj);
        for (std::size_t k = 0; k < traj.turns.size(); ++k)
            for (std::size_t t = 0; t < traj.turns[k].response_tokens.size(); ++t) {
                sum += token_kl(theta, anchor, feats.tokens[k][t]);
                ++n;
            }
    }
    return n > 0 ? coeff * sum / static_cast<double>(n) : 0.0;
}

/// One Adam step; throws if the parameters become non-finite.
inline void policy_update(ParamMatrix& theta, const ParamMatrix& grad, double lr, AdamState& opt)
{
    if (!grad.all_finite()) throw std::domain_error("policy_update: non-finite gradient");
    adam_step(theta, grad, lr, opt);
    if (!theta.all_finite()) throw std::domain_error("policy_update: non-finite parameters after step");
}

} // namespace turnwise
