#pragma once

// Implicit process reward model: token rewards beta * log(pi_prm / pi_ref),
// their trajectory sum, the binary cross-entropy objective against outcome
// rewards, and the online update.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "turnwise/envsim.hpp"
#include "turnwise/policy_model.hpp"

namespace turnwise {

struct TokenRewardSeq
{
    std::vector<Vec> per_turn;
    double beta = 5e-3;
};

inline TokenRewardSeq token_rewards(std::span<const Vec> logp_prm, std::span<const Vec> logp_ref, double beta)
{
    if (logp_prm.size() != logp_ref.size()) throw std::invalid_argument("token_rewards: turn count mismatch");
    TokenRewardSeq out;
    out.beta = beta;
    out.per_turn.resize(logp_prm.size());
    for (std::size_t k = 0; k < logp_prm.size(); ++k) {
        if (logp_prm[k].size() != logp_ref[k].size()) throw std::invalid_argument("token_rewards: length mismatch");
        out.per_turn[k].reserve(logp_prm[k].size());
        for (std::size_t t = 0; t < logp_prm[k].size(); ++t) {
            const double a = logp_prm[k][t];
            const double b = logp_ref[k][t];
            if (!std::isfinite(a) || !std::isfinite(b)) throw std::domain_error("token_rewards: non-finite log-probability");
            out.per_turn[k].push_back(beta * (a - b));
        }
    }
    return out;
}

/// From the log-probabilities stored on the trajectory.
inline TokenRewardSeq token_rewards(const Trajectory& traj, double beta)
{
    std::vector<Vec> prm, ref;
    for (const auto& t : traj.turns) {
        prm.push_back(t.logp_prm);
        ref.push_back(t.logp_ref);
    }
    return token_rewards(prm, ref, beta);
}

/// Recomputes both models' log-probabilities from the trajectory contexts.
inline TokenRewardSeq token_rewards(const ParamMatrix& prm, const ParamMatrix& ref, const FeatureMap& fmap,
                                    const Trajectory& traj, double beta)
{
    const auto feats = featurize(fmap, traj);
    return token_rewards(score_log_probs(prm, feats, traj), score_log_probs(ref, feats, traj), beta);
}

/// Writes logp_prm and logp_ref onto the trajectory.
inline void score_with(const ParamMatrix& prm, const ParamMatrix& ref, const TrajectoryFeatures& feats, Trajectory& traj)
{
    auto lp = score_log_probs(prm, feats, traj);
    auto lr = score_log_probs(ref, feats, traj);
    for (std::size_t k = 0; k < traj.turns.size(); ++k) {
        traj.turns[k].logp_prm = std::move(lp[k]);
        traj.turns[k].logp_ref = std::move(lr[k]);
    }
}

/// R_phi(tau): sum over turns and tokens.
inline double trajectory_reward(const TokenRewardSeq& rewards)
{
    if (rewards.per_turn.empty()) throw std::invalid_argument("trajectory_reward: empty");
    double s = 0.0;
    for (const auto& turn : rewards.per_turn)
        for (double r : turn) s += r;
    return s;
}

/// log(1 + e^x) without overflow.
inline double softplus(double x)
{
    return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

inline double sigmoid(double x)
{
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// -[R log sigma(x) + (1 - R) log(1 - sigma(x))], with log sigma(x) = -softplus(-x).
inline double bce_loss(double implicit_reward, double outcome)
{
    return outcome * softplus(-implicit_reward) + (1.0 - outcome) * softplus(implicit_reward);
}

struct PrmGradient
{
    ParamMatrix grad;     // d mean_loss / d phi
    double mean_loss = 0.0;
    Vec implicit_rewards; // R_phi per trajectory, before the step
};

/**
 * Mean BCE gradient over the batch:
 *   dL/dphi = mean_i (sigma(R_phi_i) - R_i) * beta * sum_tokens dlog pi_phi/dphi.
 */
inline PrmGradient bce_grad_wrt_prm(const ParamMatrix& prm, const ParamMatrix& ref, std::span<const Trajectory> batch,
                                    std::span<const TrajectoryFeatures> feats, double beta)
{
    if (batch.empty()) throw std::invalid_argument("bce_grad_wrt_prm: empty batch");
    if (feats.size() != batch.size()) throw std::invalid_argument("bce_grad_wrt_prm: feature cache size mismatch");
    PrmGradient out;
    out.grad = ParamMatrix(prm.rows, prm.cols, prm.tag);
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    ParamMatrix traj_grad(prm.rows, prm.cols, prm.tag);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Trajectory& traj = batch[i];
        traj_grad.set_zero();
        double log_ratio = 0.0;
        for (std::size_t k = 0; k < traj.turns.size(); ++k) {
            const auto& resp = traj.turns[k].response_tokens;
            for (std::size_t t = 0; t < resp.size(); ++t) {
                const auto& f = feats[i].tokens[k][t];
                log_ratio += accumulate_grad_log_prob(prm, f, resp[t], 1.0, traj_grad) - log_prob(ref, f, resp[t]);
            }
        }
        const double r_phi = beta * log_ratio;
        const double residual = sigmoid(r_phi) - traj.outcome;
        if (!std::isfinite(r_phi) || !std::isfinite(residual)) throw std::domain_error("bce_grad_wrt_prm: non-finite intermediate");
        out.mean_loss += bce_loss(r_phi, traj.outcome) * inv_n;
        out.implicit_rewards.push_back(r_phi);
        const double scale = residual * beta * inv_n;
        for (std::size_t j = 0; j < out.grad.size(); ++j) out.grad.weights[j] += scale * traj_grad.weights[j];
    }
    return out;
}

inline PrmGradient bce_grad_wrt_prm(const ParamMatrix& prm, const ParamMatrix& ref, const FeatureMap& fmap,
                                    std::span<const Trajectory> batch, double beta)
{
    std::vector<TrajectoryFeatures> feats;
    feats.reserve(batch.size());
    for (const auto& t : batch) feats.push_back(featurize(fmap, t));
    return bce_grad_wrt_prm(prm, ref, batch, feats, beta);
}

struct PrmOptimizer
{
    double lr = 1e-3;
    double clip_norm = 10.0;
    AdamState adam;
};

/// One clipped Adam step on the BCE objective. The reference is never written.
inline PrmGradient prm_update(ParamMatrix& prm, const ParamMatrix& ref, std::span<const Trajectory> batch,
                              std::span<const TrajectoryFeatures> feats, double beta, PrmOptimizer& opt)
{
    if (opt.lr < 0.0) throw std::invalid_argument("prm_update: negative learning rate");
    PrmGradient g = bce_grad_wrt_prm(prm, ref, batch, feats, beta);
    clip_grad_norm(g.grad, opt.clip_norm);
    adam_step(prm, g.grad, opt.lr, opt.adam);
    return g;
}

inline PrmGradient prm_update(ParamMatrix& prm, const ParamMatrix& ref, const FeatureMap& fmap,
                              std::span<const Trajectory> batch, double beta, PrmOptimizer& opt)
{
    std::vector<TrajectoryFeatures> feats;
    for (const auto& t : batch) feats.push_back(featurize(fmap, t));
    return prm_update(prm, ref, batch, feats, beta, opt);
}

/**
 * Implicit Q-value of the partial trajectory ending at token `token` (0-based)
 * of turn `turn` (1-based), computed by truncating the trajectory and
 * re-scoring it from scratch.
 */
inline double implicit_q_value(const ParamMatrix& prm, const ParamMatrix& ref, const FeatureMap& fmap,
                               const Trajectory& traj, int turn, int token, double beta)
{
    if (turn < 1 || turn > static_cast<int>(traj.turns.size())) throw std::out_of_range("implicit_q_value: turn");
    const auto& last = traj.turns[static_cast<std::size_t>(turn - 1)];
    if (token < 0 || token >= static_cast<int>(last.response_tokens.size())) throw std::out_of_range("implicit_q_value: token");
    Trajectory prefix;
    prefix.goal = traj.goal;
    prefix.turns.assign(traj.turns.begin(), traj.turns.begin() + turn);
    auto& cut = prefix.turns.back();
    cut.response_tokens.resize(static_cast<std::size_t>(token) + 1);
    return trajectory_reward(token_rewards(prm, ref, fmap, prefix, beta));
}

} // namespace turnwise
