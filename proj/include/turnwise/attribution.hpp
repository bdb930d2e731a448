#pragma once

// Per-turn credit assignment: raw turn scores (ITPO), softmax-normalized
// redistribution of the outcome (Norm-ITPO), and the comparison baselines.

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "turnwise/envsim.hpp"
#include "turnwise/implicit_prm.hpp"
#include "turnwise/rng.hpp"

namespace turnwise {

enum class Strategy { itpo, norm_itpo, trajectory_share, uniform_dirichlet, token_level };

inline std::string_view to_string(Strategy s)
{
    switch (s) {
    case Strategy::itpo: return "itpo";
    case Strategy::norm_itpo: return "norm_itpo";
    case Strategy::trajectory_share: return "trajectory_share";
    case Strategy::uniform_dirichlet: return "uniform_dirichlet";
    case Strategy::token_level: return "token_level";
    }
    return "unknown";
}

inline Strategy strategy_from_string(std::string_view s)
{
    if (s == "itpo") return Strategy::itpo;
    if (s == "norm_itpo") return Strategy::norm_itpo;
    if (s == "trajectory_share") return Strategy::trajectory_share;
    if (s == "uniform_dirichlet") return Strategy::uniform_dirichlet;
    if (s == "token_level") return Strategy::token_level;
    throw std::invalid_argument("unknown strategy: " + std::string(s));
}

/// Whether the strategy needs the implicit PRM.
inline bool uses_prm(Strategy s)
{
    return s == Strategy::itpo || s == Strategy::norm_itpo || s == Strategy::token_level;
}

inline constexpr double kMinTemperature = 1e-8;

struct AttributionResult
{
    Strategy strategy = Strategy::norm_itpo;
    Vec per_turn;                   // K values (for token_level: per-turn sums)
    std::vector<Vec> per_token;     // token_level only
    std::optional<Vec> weights;     // norm_itpo, uniform_dirichlet
    std::optional<double> eta;      // norm_itpo
    Vec scores;                     // raw turn scores when the PRM was used
};

/// R_phi^k = sum_t r^{k,t}.
inline Vec itpo_turn_scores(const TokenRewardSeq& rewards)
{
    if (rewards.per_turn.empty()) throw std::invalid_argument("itpo_turn_scores: no turns");
    Vec scores;
    scores.reserve(rewards.per_turn.size());
    for (const auto& turn : rewards.per_turn) {
        double s = 0.0;
        for (double r : turn) s += r;
        scores.push_back(s);
    }
    return scores;
}

/// softmax(scores / eta), max-subtracted.
inline Vec norm_itpo_weights(std::span<const double> scores, double eta)
{
    if (!(eta >= kMinTemperature)) throw std::invalid_argument("eta must be >= 1e-8");
    if (scores.empty()) throw std::invalid_argument("norm_itpo_weights: K < 1");
    const double mx = *std::max_element(scores.begin(), scores.end());
    Vec w(scores.size());
    double z = 0.0;
    for (std::size_t k = 0; k < scores.size(); ++k) {
        w[k] = std::exp((scores[k] - mx) / eta);
        z += w[k];
    }
    for (double& x : w) x /= z;
    return w;
}

/// P(Z = k | evidence) under a uniform prior and Boltzmann likelihood; same value as norm_itpo_weights.
inline Vec pivotal_posterior(std::span<const double> scores, double eta) { return norm_itpo_weights(scores, eta); }

inline Vec norm_itpo_rewards(std::span<const double> weights, double outcome)
{
    Vec out(weights.begin(), weights.end());
    for (double& x : out) x *= outcome;
    return out;
}

struct TemperatureLimits
{
    Vec one_hot;       // eta -> 0
    Vec uniform;       // eta -> infinity
    bool degenerate = false; // tie at the maximum; R is split among the tied turns
};

inline constexpr double kColdTemperature = 1e-6;
inline constexpr double kHotTemperature = 1e6;

inline TemperatureLimits temperature_limit_check(std::span<const double> scores, double outcome)
{
    TemperatureLimits out;
    out.one_hot = norm_itpo_rewards(norm_itpo_weights(scores, kColdTemperature), outcome);
    out.uniform = norm_itpo_rewards(norm_itpo_weights(scores, kHotTemperature), outcome);
    const double mx = *std::max_element(scores.begin(), scores.end());
    out.degenerate = std::count(scores.begin(), scores.end(), mx) > 1;
    return out;
}

inline Vec trajectory_share(const Trajectory& traj) { return Vec(traj.turns.size(), traj.outcome); }

/// w ~ Dirichlet(1, ..., 1) via normalized unit exponentials.
inline Vec dirichlet_weights(std::size_t k, CounterRng& rng)
{
    if (k < 1) throw std::invalid_argument("uniform_dirichlet: K < 1");
    Vec w(k);
    double z = 0.0;
    for (double& x : w) {
        x = rng.exponential();
        z += x;
    }
    if (!(z > 0.0)) return Vec(k, 1.0 / static_cast<double>(k));
    for (double& x : w) x /= z;
    return w;
}

inline Vec uniform_dirichlet(const Trajectory& traj, CounterRng& rng)
{
    return norm_itpo_rewards(dirichlet_weights(traj.turns.size(), rng), traj.outcome);
}

/// PRIME-style: token rewards pass through unchanged.
inline std::vector<Vec> token_level_rewards(const TokenRewardSeq& rewards, double /*outcome*/) { return rewards.per_turn; }

/// One strategy applied to one trajectory. `rewards` may be empty for PRM-free strategies.
inline AttributionResult attribute(Strategy strategy, const Trajectory& traj, const TokenRewardSeq* rewards, double eta,
                                   CounterRng& rng)
{
    AttributionResult out;
    out.strategy = strategy;
    if (uses_prm(strategy)) {
        if (rewards == nullptr) throw std::invalid_argument("attribute: strategy requires token rewards");
        out.scores = itpo_turn_scores(*rewards);
    }
    switch (strategy) {
    case Strategy::itpo:
        out.per_turn = out.scores;
        break;
    case Strategy::norm_itpo:
        out.weights = norm_itpo_weights(out.scores, eta);
        out.eta = eta;
        out.per_turn = norm_itpo_rewards(*out.weights, traj.outcome);
        break;
    case Strategy::trajectory_share:
        out.per_turn = trajectory_share(traj);
        break;
    case Strategy::uniform_dirichlet:
        out.weights = dirichlet_weights(traj.turns.size(), rng);
        out.per_turn = norm_itpo_rewards(*out.weights, traj.outcome);
        break;
    case Strategy::token_level:
        out.per_token = token_level_rewards(*rewards, traj.outcome);
        out.per_turn = out.scores;
        break;
    }
    return out;
}

/// Attribution dump row.
inline nlohmann::json to_json(const AttributionResult& r, std::uint64_t traj_id)
{
    nlohmann::json j = {{"traj_id", traj_id}, {"strategy", to_string(r.strategy)}, {"scores", r.scores},
                        {"per_turn", r.per_turn}};
    j["eta"] = r.eta ? nlohmann::json(*r.eta) : nlohmann::json(nullptr);
    j["weights"] = r.weights ? nlohmann::json(*r.weights) : nlohmann::json(nullptr);
    return j;
}

} // namespace turnwise
