#pragma once

// Log-linear autoregressive token model: logits = W^T f(context).
// Instantiated as policy, implicit PRM, frozen reference and (with V = 1)
// a linear value head.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "turnwise/envsim.hpp"

namespace turnwise {

using Vec = std::vector<double>;

enum class ModelTag : std::uint32_t { policy = 0, prm = 1, reference = 2, value = 3 };

inline std::string_view to_string(ModelTag tag)
{
    switch (tag) {
    case ModelTag::policy: return "policy";
    case ModelTag::prm: return "prm";
    case ModelTag::reference: return "reference";
    case ModelTag::value: return "value";
    }
    return "unknown";
}

inline ModelTag model_tag_from_string(std::string_view s)
{
    if (s == "policy") return ModelTag::policy;
    if (s == "prm") return ModelTag::prm;
    if (s == "reference") return ModelTag::reference;
    if (s == "value") return ModelTag::value;
    throw std::invalid_argument("unknown model tag: " + std::string(s));
}

/**
 * Feature layout (D = 3V + K + 1):
 *   [0, V)         normalized bag of history tokens
 *   [V, 2V)        normalized bag of current query tokens
 *   [2V, 3V)       one-hot of the last prefix token (all zero for an empty prefix)
 *   [3V, 3V+K)     one-hot of the turn index
 *   3V+K           bias, always 1
 */
class FeatureMap
{
  public:
    FeatureMap() = default;
    FeatureMap(int vocab_size, int num_turns) : vocab_(vocab_size), turns_(num_turns) {}

    [[nodiscard]] int dim() const noexcept { return 3 * vocab_ + turns_ + 1; }
    [[nodiscard]] int vocab_size() const noexcept { return vocab_; }
    [[nodiscard]] int num_turns() const noexcept { return turns_; }
    [[nodiscard]] int history_offset() const noexcept { return 0; }
    [[nodiscard]] int query_offset() const noexcept { return vocab_; }
    [[nodiscard]] int prefix_offset() const noexcept { return 2 * vocab_; }
    [[nodiscard]] int turn_offset() const noexcept { return 3 * vocab_; }
    [[nodiscard]] int bias_index() const noexcept { return 3 * vocab_ + turns_; }

    void compute(const TokenContext& ctx, Vec& out) const
    {
        out.assign(static_cast<std::size_t>(dim()), 0.0);
        bag(ctx.history, history_offset(), out);
        bag(ctx.query, query_offset(), out);
        if (!ctx.prefix.empty()) out[static_cast<std::size_t>(prefix_offset() + checked(ctx.prefix.back()))] = 1.0;
        if (ctx.turn < 1 || ctx.turn > turns_) throw std::out_of_range("turn index out of range");
        out[static_cast<std::size_t>(turn_offset() + ctx.turn - 1)] = 1.0;
        out[static_cast<std::size_t>(bias_index())] = 1.0;
    }

    [[nodiscard]] Vec operator()(const TokenContext& ctx) const
    {
        Vec out;
        compute(ctx, out);
        return out;
    }

    [[nodiscard]] Vec operator()(std::span<const int> history, std::span<const int> query,
                                 std::span<const int> prefix, int turn) const
    {
        return (*this)(TokenContext{history, query, prefix, turn});
    }

  private:
    int checked(int token) const
    {
        if (token < 0 || token >= vocab_) throw std::out_of_range("token id out of range");
        return token;
    }

    void bag(std::span<const int> tokens, int offset, Vec& out) const
    {
        if (tokens.empty()) return;
        const double w = 1.0 / static_cast<double>(tokens.size());
        for (int t : tokens) out[static_cast<std::size_t>(offset + checked(t))] += w;
    }

    int vocab_ = 0;
    int turns_ = 0;
};

/// Dense D x V weights, row-major.
struct ParamMatrix
{
    int rows = 0; // D
    int cols = 0; // V
    ModelTag tag = ModelTag::policy;
    Vec weights;

    ParamMatrix() = default;
    ParamMatrix(int d, int v, ModelTag t = ModelTag::policy)
        : rows(d), cols(v), tag(t), weights(static_cast<std::size_t>(d) * static_cast<std::size_t>(v), 0.0)
    {
    }

    [[nodiscard]] double& at(int r, int c) { return weights[static_cast<std::size_t>(r) * cols + c]; }
    [[nodiscard]] double at(int r, int c) const { return weights[static_cast<std::size_t>(r) * cols + c]; }
    [[nodiscard]] std::size_t size() const noexcept { return weights.size(); }
    [[nodiscard]] bool same_shape(const ParamMatrix& o) const noexcept { return rows == o.rows && cols == o.cols; }

    void set_zero() { std::fill(weights.begin(), weights.end(), 0.0); }

    [[nodiscard]] bool all_finite() const
    {
        return std::all_of(weights.begin(), weights.end(), [](double w) { return std::isfinite(w); });
    }

    bool operator==(const ParamMatrix&) const = default;
};

struct TokenDistribution
{
    Vec logits;
    Vec probabilities;
    double log_normalizer = 0.0; // logsumexp(logits)

    [[nodiscard]] double log_prob(int a) const { return logits[static_cast<std::size_t>(a)] - log_normalizer; }
};

inline void compute_logits(const ParamMatrix& params, std::span<const double> f, Vec& logits)
{
    if (static_cast<int>(f.size()) != params.rows) throw std::invalid_argument("feature dimension mismatch");
    logits.assign(static_cast<std::size_t>(params.cols), 0.0);
    for (int r = 0; r < params.rows; ++r) {
        const double fr = f[static_cast<std::size_t>(r)];
        if (fr == 0.0) continue;
        const double* row = params.weights.data() + static_cast<std::size_t>(r) * params.cols;
        for (int c = 0; c < params.cols; ++c) logits[static_cast<std::size_t>(c)] += fr * row[c];
    }
}

inline void softmax_in_place(TokenDistribution& dist)
{
    double mx = -std::numeric_limits<double>::infinity();
    for (double l : dist.logits) {
        if (!std::isfinite(l)) throw std::domain_error("non-finite logits");
        mx = std::max(mx, l);
    }
    dist.probabilities.resize(dist.logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < dist.logits.size(); ++i) {
        dist.probabilities[i] = std::exp(dist.logits[i] - mx);
        z += dist.probabilities[i];
    }
    for (double& p : dist.probabilities) p /= z;
    dist.log_normalizer = mx + std::log(z);
}

inline TokenDistribution distribution(const ParamMatrix& params, std::span<const double> f)
{
    TokenDistribution dist;
    compute_logits(params, f, dist.logits);
    softmax_in_place(dist);
    return dist;
}

inline double log_prob(const ParamMatrix& params, std::span<const double> f, int token)
{
    if (token < 0 || token >= params.cols) throw std::out_of_range("token id out of range");
    return distribution(params, f).log_prob(token);
}

/// grad += scale * f (x) (onehot(token) - p). Returns log p(token).
inline double accumulate_grad_log_prob(const ParamMatrix& params, std::span<const double> f, int token, double scale,
                                       ParamMatrix& grad)
{
    const TokenDistribution dist = distribution(params, f);
    if (scale != 0.0) {
        for (int r = 0; r < params.rows; ++r) {
            const double fr = f[static_cast<std::size_t>(r)] * scale;
            if (fr == 0.0) continue;
            double* row = grad.weights.data() + static_cast<std::size_t>(r) * params.cols;
            for (int c = 0; c < params.cols; ++c) row[c] -= fr * dist.probabilities[static_cast<std::size_t>(c)];
            row[token] += fr;
        }
    }
    return dist.log_prob(token);
}

/// d log p(token | f) / dW = f (x) (onehot(token) - p).
inline ParamMatrix grad_log_prob(const ParamMatrix& params, std::span<const double> f, int token)
{
    if (token < 0 || token >= params.cols) throw std::out_of_range("token id out of range");
    ParamMatrix grad(params.rows, params.cols, params.tag);
    accumulate_grad_log_prob(params, f, token, 1.0, grad);
    return grad;
}

enum class SampleMode { stochastic, greedy };

/// Inverse-CDF draw with uniform `u`. Greedy picks a maximal logit, using `u` to break exact ties.
inline TokenDraw sample(const ParamMatrix& params, std::span<const double> f, double u, SampleMode mode)
{
    const TokenDistribution dist = distribution(params, f);
    int token = 0;
    if (mode == SampleMode::greedy) {
        const double mx = *std::max_element(dist.logits.begin(), dist.logits.end());
        std::vector<int> tied;
        for (int c = 0; c < params.cols; ++c)
            if (dist.logits[static_cast<std::size_t>(c)] == mx) tied.push_back(c);
        const auto pick = std::min(tied.size() - 1, static_cast<std::size_t>(u * static_cast<double>(tied.size())));
        token = tied[pick];
    } else {
        double acc = 0.0;
        token = params.cols - 1;
        for (int c = 0; c < params.cols; ++c) {
            acc += dist.probabilities[static_cast<std::size_t>(c)];
            if (u < acc) {
                token = c;
                break;
            }
        }
    }
    return {token, dist.log_prob(token)};
}

inline TokenDraw sample(const ParamMatrix& params, std::span<const double> f, CounterRng& rng,
                        SampleMode mode = SampleMode::stochastic)
{
    return sample(params, f, rng.uniform(), mode);
}

/// Linear critic w^T f (first column of a D x 1 matrix).
inline double value(const ParamMatrix& psi, std::span<const double> f)
{
    if (psi.cols != 1 || static_cast<int>(f.size()) != psi.rows) throw std::invalid_argument("value head shape mismatch");
    double v = 0.0;
    for (int r = 0; r < psi.rows; ++r) v += psi.weights[static_cast<std::size_t>(r)] * f[static_cast<std::size_t>(r)];
    if (!std::isfinite(v)) throw std::domain_error("non-finite value head output");
    return v;
}

/// Adapts a parameter matrix to the rollout interface.
class LogLinearPolicy final : public ResponsePolicy
{
  public:
    LogLinearPolicy(const ParamMatrix& params, FeatureMap fmap, SampleMode mode = SampleMode::stochastic)
        : params_(&params), fmap_(fmap), mode_(mode)
    {
    }

    TokenDraw draw(const TokenContext& ctx, double u) const override
    {
        thread_local Vec f;
        fmap_.compute(ctx, f);
        return sample(*params_, f, u, mode_);
    }

  private:
    const ParamMatrix* params_;
    FeatureMap fmap_;
    SampleMode mode_;
};

/// Per-token feature vectors of a trajectory, plus the turn-start state h^k, x^k.
struct TrajectoryFeatures
{
    std::vector<std::vector<Vec>> tokens; // [turn][token]
    std::vector<Vec> turn_states;         // [turn], empty prefix
};

inline TrajectoryFeatures featurize(const FeatureMap& fmap, const Trajectory& traj)
{
    TrajectoryFeatures out;
    out.tokens.resize(traj.turns.size());
    std::vector<int> history;
    for (std::size_t k = 0; k < traj.turns.size(); ++k) {
        const Turn& turn = traj.turns[k];
        const std::span<const int> resp(turn.response_tokens);
        out.turn_states.push_back(fmap(history, turn.user_tokens, {}, turn.index));
        for (std::size_t t = 0; t < resp.size(); ++t)
            out.tokens[k].push_back(fmap(history, turn.user_tokens, resp.first(t), turn.index));
        history.insert(history.end(), turn.user_tokens.begin(), turn.user_tokens.end());
        history.insert(history.end(), turn.response_tokens.begin(), turn.response_tokens.end());
    }
    return out;
}

/// log pi(y^{k,t} | context) for every response token, per turn.
inline std::vector<Vec> score_log_probs(const ParamMatrix& params, const TrajectoryFeatures& feats,
                                        const Trajectory& traj)
{
    std::vector<Vec> out(traj.turns.size());
    for (std::size_t k = 0; k < traj.turns.size(); ++k) {
        const auto& resp = traj.turns[k].response_tokens;
        out[k].reserve(resp.size());
        for (std::size_t t = 0; t < resp.size(); ++t) out[k].push_back(log_prob(params, feats.tokens[k][t], resp[t]));
    }
    return out;
}

/// Adaptive moment estimation state for one parameter matrix.
struct AdamState
{
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::int64_t steps = 0;
    Vec m;
    Vec v;

    bool operator==(const AdamState&) const = default;
};

/// params -= lr * adam(grad). The caller passes the gradient of a loss.
inline void adam_step(ParamMatrix& params, const ParamMatrix& grad, double lr, AdamState& state)
{
    if (!params.same_shape(grad)) throw std::invalid_argument("adam_step: shape mismatch");
    if (state.m.size() != params.size()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    ++state.steps;
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.steps));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.steps));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grad.weights[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        if (lr != 0.0) params.weights[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + state.epsilon);
    }
}

inline double l2_norm(const ParamMatrix& m)
{
    double s = 0.0;
    for (double w : m.weights) s += w * w;
    return std::sqrt(s);
}

/// Rescales `grad` so its L2 norm is at most `max_norm`; returns the pre-clip norm.
inline double clip_grad_norm(ParamMatrix& grad, double max_norm)
{
    const double n = l2_norm(grad);
    if (max_norm > 0.0 && n > max_norm) {
        const double s = max_norm / n;
        for (double& w : grad.weights) w *= s;
    }
    return n;
}

// Checkpoints. Binary layout (little-endian host order):
//   "TWPM" | u32 version=1 | u32 tag | u64 rows | u64 cols | u64 step | rows*cols f64

inline void write_binary(const ParamMatrix& m, std::uint64_t step, const std::string& path)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    const std::uint32_t version = 1;
    const auto tag = static_cast<std::uint32_t>(m.tag);
    const auto rows = static_cast<std::uint64_t>(m.rows);
    const auto cols = static_cast<std::uint64_t>(m.cols);
    out.write("TWPM", 4);
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&tag), sizeof tag);
    out.write(reinterpret_cast<const char*>(&rows), sizeof rows);
    out.write(reinterpret_cast<const char*>(&cols), sizeof cols);
    out.write(reinterpret_cast<const char*>(&step), sizeof step);
    out.write(reinterpret_cast<const char*>(m.weights.data()),
              static_cast<std::streamsize>(m.weights.size() * sizeof(double)));
    if (!out) throw std::runtime_error("write failed: " + path);
}

struct LoadedParams
{
    ParamMatrix params;
    std::uint64_t step = 0;
};

inline LoadedParams read_binary(const std::string& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    char magic[4];
    std::uint32_t version = 0, tag = 0;
    std::uint64_t rows = 0, cols = 0, step = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), sizeof version);
    in.read(reinterpret_cast<char*>(&tag), sizeof tag);
    in.read(reinterpret_cast<char*>(&rows), sizeof rows);
    in.read(reinterpret_cast<char*>(&cols), sizeof cols);
    in.read(reinterpret_cast<char*>(&step), sizeof step);
    if (!in || std::memcmp(magic, "TWPM", 4) != 0 || version != 1) throw std::runtime_error("bad checkpoint header: " + path);
    if (tag > 3 || rows > (1u << 20) || cols > (1u << 20)) throw std::runtime_error("bad checkpoint dimensions: " + path);
    LoadedParams out;
    out.params = ParamMatrix(static_cast<int>(rows), static_cast<int>(cols), static_cast<ModelTag>(tag));
    out.step = step;
    in.read(reinterpret_cast<char*>(out.params.weights.data()),
            static_cast<std::streamsize>(out.params.weights.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated checkpoint: " + path);
    return out;
}

inline nlohmann::json to_json(const ParamMatrix& m, std::uint64_t step)
{
    return {{"D", m.rows}, {"V", m.cols}, {"model_tag", to_string(m.tag)}, {"step", step}, {"weights", m.weights}};
}

inline LoadedParams params_from_json(const nlohmann::json& j)
{
    LoadedParams out;
    out.params = ParamMatrix(j.at("D").get<int>(), j.at("V").get<int>(),
                             model_tag_from_string(j.at("model_tag").get<std::string>()));
    out.step = j.at("step").get<std::uint64_t>();
    auto w = j.at("weights").get<Vec>();
    if (w.size() != out.params.size()) throw std::runtime_error("checkpoint weight count mismatch");
    out.params.weights = std::move(w);
    return out;
}

} // namespace turnwise
