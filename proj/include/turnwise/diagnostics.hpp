#pragma once

// Rank correlations, attribution stability tracking, implicit-vs-outcome
// slope regression and pivotal-turn agreement.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "turnwise/envsim.hpp"
#include "turnwise/policy_model.hpp"

namespace turnwise {

/// Kendall tau-b over all pairs. Returns 0 when either argument is constant.
inline double kendall_tau(std::span<const double> xs, std::span<const double> ys)
{
    if (xs.size() != ys.size()) throw std::invalid_argument("kendall_tau: length mismatch");
    if (xs.size() < 2) throw std::invalid_argument("kendall_tau: length < 2");
    const std::size_t n = xs.size();
    long long concordant = 0, discordant = 0, ties_x = 0, ties_y = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double dx = xs[i] - xs[j];
            const double dy = ys[i] - ys[j];
            if (dx == 0.0) ++ties_x;
            if (dy == 0.0) ++ties_y;
            if (dx == 0.0 || dy == 0.0) continue;
            if ((dx > 0.0) == (dy > 0.0))
                ++concordant;
            else
                ++discordant;
        }
    }
    const auto pairs = static_cast<long long>(n * (n - 1) / 2);
    const double denom = std::sqrt(static_cast<double>(pairs - ties_x) * static_cast<double>(pairs - ties_y));
    if (denom == 0.0) return 0.0;
    return static_cast<double>(concordant - discordant) / denom;
}

/// Ranks 1..n with ties sharing their average rank.
inline Vec average_ranks(std::span<const double> xs)
{
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
    Vec ranks(xs.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = r;
        i = j + 1;
    }
    return ranks;
}

struct Correlation
{
    double value = 0.0;
    bool degenerate = false; // a rank vector had zero variance; value is 0
};

/// Pearson correlation of average ranks.
inline Correlation spearman(std::span<const double> xs, std::span<const double> ys)
{
    if (xs.size() != ys.size()) throw std::invalid_argument("spearman: length mismatch");
    if (xs.size() < 2) throw std::invalid_argument("spearman: length < 2");
    const Vec rx = average_ranks(xs);
    const Vec ry = average_ranks(ys);
    const double mean = 0.5 * static_cast<double>(xs.size() + 1);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mean) * (ry[i] - mean);
        sxx += (rx[i] - mean) * (rx[i] - mean);
        syy += (ry[i] - mean) * (ry[i] - mean);
    }
    if (sxx == 0.0 || syy == 0.0) return {0.0, true};
    return {std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0), false};
}

/// Mean within-group Kendall tau; groups with constant outcomes are skipped and counted.
struct GroupTau
{
    double mean_tau = std::numeric_limits<double>::quiet_NaN();
    int groups_used = 0;
    int groups_skipped = 0;
};

inline GroupTau mean_group_kendall(const std::vector<Vec>& implicit_rewards, const std::vector<Vec>& outcomes)
{
    GroupTau out;
    double sum = 0.0;
    for (std::size_t g = 0; g < implicit_rewards.size(); ++g) {
        const auto& r = outcomes[g];
        if (r.size() < 2 || std::all_of(r.begin(), r.end(), [&](double v) { return v == r.front(); })) {
            ++out.groups_skipped;
            continue;
        }
        sum += kendall_tau(implicit_rewards[g], r);
        ++out.groups_used;
    }
    if (out.groups_used > 0) out.mean_tau = sum / out.groups_used;
    return out;
}

struct ProbeSnapshot
{
    std::int64_t step = 0;
    std::vector<Vec> turn_scores;   // [trajectory][turn], pre-normalization
    std::vector<Vec> token_rewards; // [trajectory][flattened token]
    Vec implicit_rewards;           // R_phi per trajectory
};

/// Frozen trajectories plus append-only per-step reward snapshots.
class ProbeSet
{
  public:
    ProbeSet() = default;
    ProbeSet(std::vector<Trajectory> trajectories, std::vector<int> group_ids)
        : trajectories_(std::move(trajectories)), group_ids_(std::move(group_ids))
    {
        if (group_ids_.size() != trajectories_.size()) throw std::invalid_argument("ProbeSet: group id count mismatch");
    }

    [[nodiscard]] const std::vector<Trajectory>& trajectories() const noexcept { return trajectories_; }
    [[nodiscard]] const std::vector<int>& group_ids() const noexcept { return group_ids_; }
    [[nodiscard]] const std::vector<ProbeSnapshot>& snapshots() const noexcept { return snapshots_; }
    [[nodiscard]] bool empty() const noexcept { return trajectories_.empty(); }

    void append(ProbeSnapshot snap)
    {
        if (snap.turn_scores.size() != trajectories_.size()) throw std::invalid_argument("ProbeSet: snapshot size mismatch");
        if (!snapshots_.empty() && snap.step <= snapshots_.back().step) throw std::invalid_argument("ProbeSet: steps must increase");
        snapshots_.push_back(std::move(snap));
    }

  private:
    std::vector<Trajectory> trajectories_;
    std::vector<int> group_ids_;
    std::vector<ProbeSnapshot> snapshots_;
};

struct StabilityPoint
{
    std::int64_t step = 0;
    double conv_spearman = std::numeric_limits<double>::quiet_NaN(); // vs mean of the last `window` snapshots
    double adj_spearman = std::numeric_limits<double>::quiet_NaN();  // vs the next snapshot (NaN for the last)
};

/// Mean over trajectories of Spearman(a_i, b_i), skipping degenerate pairs. NaN if all are degenerate.
inline double mean_spearman(const std::vector<Vec>& a, const std::vector<Vec>& b)
{
    double sum = 0.0;
    int n = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].size() < 2) continue;
        const Correlation c = spearman(a[i], b[i]);
        if (c.degenerate) continue;
        sum += c.value;
        ++n;
    }
    return n > 0 ? sum / n : std::numeric_limits<double>::quiet_NaN();
}

/**
 * Convergence and adjacency Spearman series over per-step reward vectors
 * ([step][trajectory][element]). The converged allocation is the mean of the
 * final `window` steps.
 */
inline std::vector<StabilityPoint> stability_track(const std::vector<std::vector<Vec>>& series,
                                                   std::span<const std::int64_t> steps, std::size_t window)
{
    if (window < 1) throw std::invalid_argument("stability_track: window < 1");
    if (series.size() < window) throw std::invalid_argument("stability_track: insufficient snapshots");
    if (steps.size() != series.size()) throw std::invalid_argument("stability_track: steps/series mismatch");
    const std::size_t n_traj = series.front().size();
    std::vector<Vec> converged(n_traj);
    for (std::size_t i = 0; i < n_traj; ++i) {
        converged[i].assign(series.back()[i].size(), 0.0);
        for (std::size_t s = series.size() - window; s < series.size(); ++s)
            for (std::size_t e = 0; e < converged[i].size(); ++e) converged[i][e] += series[s][i][e];
        for (double& v : converged[i]) v /= static_cast<double>(window);
    }
    std::vector<StabilityPoint> out;
    for (std::size_t s = 0; s < series.size(); ++s) {
        StabilityPoint p;
        p.step = steps[s];
        p.conv_spearman = mean_spearman(series[s], converged);
        if (s + 1 < series.size()) p.adj_spearman = mean_spearman(series[s], series[s + 1]);
        out.push_back(p);
    }
    return out;
}

enum class SeriesKind { turn_scores, token_rewards };

inline std::vector<StabilityPoint> stability_track(const ProbeSet& probe, std::size_t window,
                                                   SeriesKind kind = SeriesKind::turn_scores)
{
    std::vector<std::vector<Vec>> series;
    std::vector<std::int64_t> steps;
    for (const auto& snap : probe.snapshots()) {
        series.push_back(kind == SeriesKind::turn_scores ? snap.turn_scores : snap.token_rewards);
        steps.push_back(snap.step);
    }
    return stability_track(series, steps, window);
}

/// OLS slope of y on x; nullopt when x has zero variance.
inline std::optional<double> ols_slope(std::span<const double> x, std::span<const double> y)
{
    if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("ols_slope: need >= 2 paired points");
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    if (sxx == 0.0) return std::nullopt;
    return sxy / sxx;
}

/// Per-group slope of R_phi against R. Entry g is nullopt (flagged) when group g has constant R.
inline std::vector<std::optional<double>> slope_regression(const std::vector<Vec>& implicit_rewards,
                                                           const std::vector<Vec>& outcomes)
{
    if (implicit_rewards.size() != outcomes.size()) throw std::invalid_argument("slope_regression: group count mismatch");
    std::vector<std::optional<double>> out;
    for (std::size_t g = 0; g < outcomes.size(); ++g) out.push_back(ols_slope(outcomes[g], implicit_rewards[g]));
    return out;
}

enum class TieRule { any_in_tied_set, first_index };

struct Agreement
{
    double agreement = 0.0;
    double tie_rate = 0.0;
    double random_baseline = 0.0; // 1/K
    int count = 0;
};

/// Fraction of trajectories whose argmax turn (1-based) equals the oracle turn.
inline Agreement pivotal_agreement(const std::vector<Vec>& turn_scores, std::span<const int> oracle_turns,
                                   TieRule rule = TieRule::any_in_tied_set)
{
    if (oracle_turns.size() != turn_scores.size()) throw std::invalid_argument("pivotal_agreement: oracle missing");
    Agreement out;
    if (turn_scores.empty()) return out;
    int hits = 0, ties = 0;
    for (std::size_t i = 0; i < turn_scores.size(); ++i) {
        const auto& s = turn_scores[i];
        if (s.empty()) throw std::invalid_argument("pivotal_agreement: empty score vector");
        const double mx = *std::max_element(s.begin(), s.end());
        const auto oracle = static_cast<std::size_t>(oracle_turns[i] - 1);
        if (oracle >= s.size()) throw std::invalid_argument("pivotal_agreement: oracle turn out of range");
        const auto n_max = std::count(s.begin(), s.end(), mx);
        if (n_max > 1) ++ties;
        const std::size_t first = static_cast<std::size_t>(std::find(s.begin(), s.end(), mx) - s.begin());
        const bool hit = rule == TieRule::first_index ? first == oracle : s[oracle] == mx;
        if (hit) ++hits;
    }
    out.count = static_cast<int>(turn_scores.size());
    out.agreement = static_cast<double>(hits) / out.count;
    out.tie_rate = static_cast<double>(ties) / out.count;
    out.random_baseline = 1.0 / static_cast<double>(turn_scores.front().size());
    return out;
}

} // namespace turnwise
