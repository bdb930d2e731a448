#pragma once

// Turn-level advantage estimators over a rollout group and the two-channel
// (implicit / outcome) advantage mix.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "turnwise/policy_model.hpp"

namespace turnwise {

/// Row-major G x K grid of per-turn quantities.
struct TurnGrid
{
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vec data;

    TurnGrid() = default;
    TurnGrid(std::size_t g, std::size_t k, double fill = 0.0) : rows(g), cols(k), data(g * k, fill) {}

    static TurnGrid from_rows(const std::vector<Vec>& rows_in)
    {
        if (rows_in.empty()) return {};
        TurnGrid g(rows_in.size(), rows_in.front().size());
        for (std::size_t i = 0; i < rows_in.size(); ++i) {
            if (rows_in[i].size() != g.cols) throw std::invalid_argument("TurnGrid: ragged rows");
            std::copy(rows_in[i].begin(), rows_in[i].end(), g.data.begin() + static_cast<std::ptrdiff_t>(i * g.cols));
        }
        return g;
    }

    double& operator()(std::size_t i, std::size_t k) { return data[i * cols + k]; }
    double operator()(std::size_t i, std::size_t k) const { return data[i * cols + k]; }
    [[nodiscard]] std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
    [[nodiscard]] bool same_shape(const TurnGrid& o) const noexcept { return rows == o.rows && cols == o.cols; }
};

enum class Estimator { rloo, grpo, gae };

inline std::string_view to_string(Estimator e)
{
    switch (e) {
    case Estimator::rloo: return "rloo";
    case Estimator::grpo: return "grpo";
    case Estimator::gae: return "gae";
    }
    return "unknown";
}

inline Estimator estimator_from_string(std::string_view s)
{
    if (s == "rloo") return Estimator::rloo;
    if (s == "grpo") return Estimator::grpo;
    if (s == "gae") return Estimator::gae;
    throw std::invalid_argument("unknown estimator: " + std::string(s));
}

struct AdvantageTensor
{
    TurnGrid values;
    Estimator estimator = Estimator::rloo;
    Vec mean;   // per-turn group mean (rloo, grpo)
    Vec stddev; // per-turn population std (grpo)
};

namespace detail {

inline Vec column_means(const TurnGrid& r)
{
    Vec mu(r.cols, 0.0);
    // shifted by the first row so constant columns come out exact
    for (std::size_t k = 0; k < r.cols; ++k) {
        if (r.rows == 0) continue;
        double d = 0.0;
        for (std::size_t i = 0; i < r.rows; ++i) d += r(i, k) - r(0, k);
        mu[k] = r(0, k) + d / static_cast<double>(r.rows);
    }
    return mu;
}

} // namespace detail

/// A^{i,k} = r^{i,k} - mean_{j != i} r^{j,k}.
inline AdvantageTensor rloo(const TurnGrid& rewards)
{
    if (rewards.rows < 2) throw std::invalid_argument("rloo: G < 2");
    AdvantageTensor out;
    out.estimator = Estimator::rloo;
    out.values = TurnGrid(rewards.rows, rewards.cols);
    out.mean = detail::column_means(rewards);
    const double g = static_cast<double>(rewards.rows);
    for (std::size_t k = 0; k < rewards.cols; ++k)
        for (std::size_t i = 0; i < rewards.rows; ++i)
            out.values(i, k) = g / (g - 1.0) * (rewards(i, k) - out.mean[k]);
    return out;
}

/// A^{i,k} = (r^{i,k} - mu^k) / (sigma^k + eps), population sigma.
inline AdvantageTensor grpo(const TurnGrid& rewards, double eps_std = 1e-8)
{
    if (rewards.rows < 2) throw std::invalid_argument("grpo: G < 2");
    if (!(eps_std > 0.0)) throw std::invalid_argument("grpo: eps_std must be > 0");
    AdvantageTensor out;
    out.estimator = Estimator::grpo;
    out.values = TurnGrid(rewards.rows, rewards.cols);
    out.mean = detail::column_means(rewards);
    out.stddev.assign(rewards.cols, 0.0);
    for (std::size_t k = 0; k < rewards.cols; ++k) {
        double var = 0.0;
        for (std::size_t i = 0; i < rewards.rows; ++i) var += (rewards(i, k) - out.mean[k]) * (rewards(i, k) - out.mean[k]);
        out.stddev[k] = std::sqrt(var / static_cast<double>(rewards.rows));
        for (std::size_t i = 0; i < rewards.rows; ++i)
            out.values(i, k) = (rewards(i, k) - out.mean[k]) / (out.stddev[k] + eps_std);
    }
    return out;
}

/// sum_{l >= k} gamma^{l-k} r^l.
inline Vec returns_to_go(std::span<const double> rewards, double gamma = 1.0)
{
    Vec out(rewards.size());
    double acc = 0.0;
    for (std::size_t k = rewards.size(); k-- > 0;) {
        acc = rewards[k] + gamma * acc;
        out[k] = acc;
    }
    return out;
}

/**
 * A^k = sum_l (gamma*lambda)^l delta^{k+l},
 * delta^k = r^k + gamma V(h^{k+1}) - V(h^k), with values.size() == K + 1 and
 * values[K] the terminal value (0 for a finished episode).
 */
inline Vec gae(std::span<const double> rewards, std::span<const double> values, double gamma, double lambda)
{
    if (values.size() != rewards.size() + 1) throw std::invalid_argument("gae: values must have length K + 1");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("gae: lambda outside [0, 1]");
    Vec adv(rewards.size());
    double acc = 0.0;
    for (std::size_t k = rewards.size(); k-- > 0;) {
        const double delta = rewards[k] + gamma * values[k + 1] - values[k];
        acc = delta + gamma * lambda * acc;
        adv[k] = acc;
    }
    return adv;
}

/// Row-wise GAE; `values` is G x (K + 1).
inline AdvantageTensor gae(const TurnGrid& rewards, const TurnGrid& values, double gamma, double lambda)
{
    if (values.rows != rewards.rows || values.cols != rewards.cols + 1) throw std::invalid_argument("gae: length mismatch");
    AdvantageTensor out;
    out.estimator = Estimator::gae;
    out.values = TurnGrid(rewards.rows, rewards.cols);
    for (std::size_t i = 0; i < rewards.rows; ++i) {
        const Vec a = gae(rewards.row(i), values.row(i), gamma, lambda);
        std::copy(a.begin(), a.end(), out.values.data.begin() + static_cast<std::ptrdiff_t>(i * rewards.cols));
    }
    return out;
}

struct ValueSample
{
    Vec features;
    double target = 0.0;
};

/// Half mean squared error of the critic on `batch`.
inline double value_loss(const ParamMatrix& psi, std::span<const ValueSample> batch)
{
    double loss = 0.0;
    for (const auto& s : batch) {
        const double e = value(psi, s.features) - s.target;
        loss += 0.5 * e * e;
    }
    return loss / static_cast<double>(batch.size());
}

/// One gradient step of the half mean squared error toward the targets; returns the pre-step loss.
inline double fit_value_head(ParamMatrix& psi, std::span<const ValueSample> batch, double lr)
{
    if (batch.empty()) throw std::invalid_argument("fit_value_head: empty batch");
    Vec grad(psi.size(), 0.0);
    double loss = 0.0;
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    for (const auto& s : batch) {
        if (!std::isfinite(s.target)) throw std::domain_error("fit_value_head: non-finite target");
        const double e = value(psi, s.features) - s.target;
        loss += 0.5 * e * e * inv_n;
        for (std::size_t r = 0; r < grad.size(); ++r) grad[r] += e * s.features[r] * inv_n;
    }
    for (std::size_t r = 0; r < grad.size(); ++r) psi.weights[r] -= lr * grad[r];
    return loss;
}

struct MixedAdvantage
{
    double w_implicit = 0.0;
    double w_outcome = 0.0;
    TurnGrid values;
};

inline MixedAdvantage mix_advantages(const TurnGrid& implicit, const TurnGrid& outcome, double w_implicit,
                                     double w_outcome)
{
    if (!implicit.same_shape(outcome)) throw std::invalid_argument("mix_advantages: shape mismatch");
    if (w_implicit < 0.0 || w_outcome < 0.0) throw std::invalid_argument("mix_advantages: negative weight");
    MixedAdvantage out{w_implicit, w_outcome, TurnGrid(implicit.rows, implicit.cols)};
    for (std::size_t j = 0; j < implicit.data.size(); ++j)
        out.values.data[j] = w_implicit * implicit.data[j] + w_outcome * outcome.data[j];
    return out;
}

/// Per-token rewards of one group: [trajectory][turn][token].
using TokenGrid = std::vector<std::vector<Vec>>;

/**
 * Token-granular advantages for the PRIME-style baseline: each token's
 * return-to-go of implicit rewards (trajectory order), baselined by the
 * group's trajectory totals (leave-one-out mean for rloo, standardized for
 * grpo).
 */
inline TokenGrid token_return_advantages(const TokenGrid& rewards, Estimator estimator, double eps_std = 1e-8)
{
    const std::size_t g = rewards.size();
    if (g < 2) throw std::invalid_argument("token_return_advantages: G < 2");
    if (estimator == Estimator::gae) throw std::invalid_argument("token_level attribution supports rloo or grpo only");
    Vec totals(g, 0.0);
    for (std::size_t i = 0; i < g; ++i)
        for (const auto& turn : rewards[i])
            for (double r : turn) totals[i] += r;
    double sum = 0.0;
    for (double t : totals) sum += t;
    const double mu = sum / static_cast<double>(g);
    double var = 0.0;
    for (double t : totals) var += (t - mu) * (t - mu);
    const double sigma = std::sqrt(var / static_cast<double>(g));

    TokenGrid out(g);
    for (std::size_t i = 0; i < g; ++i) {
        out[i].resize(rewards[i].size());
        double remaining = totals[i];
        for (std::size_t k = 0; k < rewards[i].size(); ++k) {
            for (double r : rewards[i][k]) {
                const double a = estimator == Estimator::rloo
                                     ? remaining - (sum - totals[i]) / static_cast<double>(g - 1)
                                     : (remaining - mu) / (sigma + eps_std);
                out[i][k].push_back(a);
                remaining -= r;
            }
        }
    }
    return out;
}

} // namespace turnwise
