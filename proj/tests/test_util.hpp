#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "turnwise.hpp"

namespace tw_test {

using namespace turnwise;

inline ParamMatrix random_params(int d, int v, CounterRng& rng, double scale = 1.0, ModelTag tag = ModelTag::policy)
{
    ParamMatrix m(d, v, tag);
    for (double& w : m.weights) w = scale * (2.0 * rng.uniform() - 1.0);
    return m;
}

inline Vec random_features(int d, CounterRng& rng)
{
    Vec f(static_cast<std::size_t>(d));
    for (double& x : f) x = 2.0 * rng.uniform() - 1.0;
    return f;
}

inline Vec random_vec(std::size_t n, CounterRng& rng, double lo = -1.0, double hi = 1.0)
{
    Vec v(n);
    for (double& x : v) x = lo + (hi - lo) * rng.uniform();
    return v;
}

// Relative error as used by the gradient checks.
inline double rel_err(double analytic, double numeric)
{
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic));
}

inline EnvConfig default_env() { return EnvConfig{}; }

// Trajectories from random log-linear policies, scored by random PRM / reference parameters.
struct Batch
{
    FeatureMap fmap;
    ParamMatrix policy, prm, ref;
    std::vector<Trajectory> trajectories;
    std::vector<TrajectoryFeatures> feats;
};

inline Batch random_batch(std::uint64_t seed, int groups, int group_size, double scale = 0.5)
{
    Batch b;
    const EnvConfig ec = default_env();
    const Environment env(ec);
    b.fmap = FeatureMap(ec.vocab_size, ec.num_turns);
    CounterRng rng(seed);
    b.policy = random_params(b.fmap.dim(), ec.vocab_size, rng, scale);
    b.prm = random_params(b.fmap.dim(), ec.vocab_size, rng, scale, ModelTag::prm);
    b.ref = random_params(b.fmap.dim(), ec.vocab_size, rng, scale, ModelTag::reference);
    const LogLinearPolicy pol(b.policy, b.fmap);
    for (int g = 0; g < groups; ++g) {
        auto grp = env.rollout(pol, seed * 1000 + static_cast<std::uint64_t>(g), group_size, rng.split(static_cast<std::uint64_t>(g)));
        for (auto& t : grp.trajectories) {
            auto f = featurize(b.fmap, t);
            score_with(b.prm, b.ref, f, t);
            b.feats.push_back(std::move(f));
            b.trajectories.push_back(std::move(t));
        }
    }
    return b;
}

} // namespace tw_test
