#pragma once

// Run configuration: defaults, a flat TOML-style key = value reader,
// serialization, TURNWISE_* environment overrides and validation.

#include <cerrno>
#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "turnwise/advantage.hpp"
#include "turnwise/attribution.hpp"
#include "turnwise/envsim.hpp"

namespace turnwise {

struct RunConfig
{
    // environment
    int num_turns = 4;
    int num_digits = 3;
    int vocab_size = 16;
    double noise_rate = 0.3;
    int max_response_len = 5;
    double length_penalty = 5e-6;

    // implicit PRM and attribution
    double beta = 5e-3;
    double eta = 0.4;
    int prm_steps = 1;
    double prm_lr = 1e-3;
    double prm_clip = 10.0;

    // advantage estimation
    double gamma_disc = 1.0;
    double lambda_gae = 0.95;
    double eps_std = 1e-8;
    double w_implicit = 5.0;
    double w_outcome = 0.0;
    double value_lr = 0.05;

    // policy optimization
    double eps_clip = 0.2;
    double kl_coeff = 1e-3;
    double policy_lr = 0.05;
    Strategy strategy = Strategy::norm_itpo;
    Estimator estimator = Estimator::rloo;

    // loop shape
    int groups = 16;          // B
    int rollouts = 8;         // G
    int minibatch_groups = 4;
    int iterations = 300;     // N
    std::uint64_t seed = 1;

    // diagnostics
    int probe_groups = 50;
    int probe_rollouts = 8;
    int probe_start = 0;
    int probe_every = 1;
    int stability_window = 70;
    int oracle_probe_size = 64;
    int oracle_samples = 64;

    // evaluation
    int eval_prompts = 16;
    int eval_rollouts = 32;

    // harness
    std::string output_dir = "runs";
    std::string run_id = "run";
    int checkpoint_every = 100; // 0: initial and final only
    int traj_log_every = 50;    // 0: never
    int parallelism = 1;
    std::vector<std::uint64_t> sweep_seeds = {1, 2, 3, 4, 5};

    [[nodiscard]] EnvConfig env() const
    {
        EnvConfig e;
        e.num_turns = num_turns;
        e.num_digits = num_digits;
        e.vocab_size = vocab_size;
        e.noise_rate = noise_rate;
        e.seed = seed;
        e.length_penalty = length_penalty;
        e.max_response_len = max_response_len;
        return e;
    }

    bool operator==(const RunConfig&) const = default;
};

class ConfigError : public std::runtime_error
{
  public:
    ConfigError(std::string field, const std::string& what)
        : std::runtime_error(field.empty() ? what : field + ": " + what), field_(std::move(field))
    {
    }
    [[nodiscard]] const std::string& field() const noexcept { return field_; }

  private:
    std::string field_;
};

namespace detail {

inline std::string trim(std::string s)
{
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline std::string unquote(const std::string& s)
{
    if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) return s.substr(1, s.size() - 2);
    return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& raw)
{
    const std::string s = unquote(trim(raw));
    T v{};
    if constexpr (std::is_floating_point_v<T>) {
        char* end = nullptr;
        errno = 0;
        const double d = std::strtod(s.c_str(), &end);
        if (s.empty() || end != s.c_str() + s.size() || errno == ERANGE) throw ConfigError(key, "expected a number, got '" + s + "'");
        v = static_cast<T>(d);
    } else {
        const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || ptr != s.data() + s.size()) throw ConfigError(key, "expected an integer, got '" + s + "'");
    }
    return v;
}

inline std::string format_double(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Field
{
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number_field(const std::string& key, T RunConfig::*member)
{
    return {[key, member](RunConfig& c, const std::string& raw) { c.*member = parse_number<T>(key, raw); },
            [member](const RunConfig& c) {
                if constexpr (std::is_floating_point_v<T>)
                    return format_double(c.*member);
                else
                    return std::to_string(c.*member);
            }};
}

inline Field string_field(std::string RunConfig::*member)
{
    return {[member](RunConfig& c, const std::string& raw) { c.*member = unquote(trim(raw)); },
            [member](const RunConfig& c) { return "\"" + c.*member + "\""; }};
}

inline const std::map<std::string, Field>& fields()
{
    static const std::map<std::string, Field> table = [] {
        std::map<std::string, Field> t;
        t["num_turns"] = number_field("num_turns", &RunConfig::num_turns);
        t["num_digits"] = number_field("num_digits", &RunConfig::num_digits);
        t["vocab_size"] = number_field("vocab_size", &RunConfig::vocab_size);
        t["noise_rate"] = number_field("noise_rate", &RunConfig::noise_rate);
        t["max_response_len"] = number_field("max_response_len", &RunConfig::max_response_len);
        t["length_penalty"] = number_field("length_penalty", &RunConfig::length_penalty);
        t["beta"] = number_field("beta", &RunConfig::beta);
        t["eta"] = number_field("eta", &RunConfig::eta);
        t["prm_steps"] = number_field("prm_steps", &RunConfig::prm_steps);
        t["prm_lr"] = number_field("prm_lr", &RunConfig::prm_lr);
        t["prm_clip"] = number_field("prm_clip", &RunConfig::prm_clip);
        t["gamma_disc"] = number_field("gamma_disc", &RunConfig::gamma_disc);
        t["lambda_gae"] = number_field("lambda_gae", &RunConfig::lambda_gae);
        t["eps_std"] = number_field("eps_std", &RunConfig::eps_std);
        t["w_implicit"] = number_field("w_implicit", &RunConfig::w_implicit);
        t["w_outcome"] = number_field("w_outcome", &RunConfig::w_outcome);
        t["value_lr"] = number_field("value_lr", &RunConfig::value_lr);
        t["eps_clip"] = number_field("eps_clip", &RunConfig::eps_clip);
        t["kl_coeff"] = number_field("kl_coeff", &RunConfig::kl_coeff);
        t["policy_lr"] = number_field("policy_lr", &RunConfig::policy_lr);
        t["groups"] = number_field("groups", &RunConfig::groups);
        t["rollouts"] = number_field("rollouts", &RunConfig::rollouts);
        t["minibatch_groups"] = number_field("minibatch_groups", &RunConfig::minibatch_groups);
        t["iterations"] = number_field("iterations", &RunConfig::iterations);
        t["seed"] = number_field("seed", &RunConfig::seed);
        t["probe_groups"] = number_field("probe_groups", &RunConfig::probe_groups);
        t["probe_rollouts"] = number_field("probe_rollouts", &RunConfig::probe_rollouts);
        t["probe_start"] = number_field("probe_start", &RunConfig::probe_start);
        t["probe_every"] = number_field("probe_every", &RunConfig::probe_every);
        t["stability_window"] = number_field("stability_window", &RunConfig::stability_window);
        t["oracle_probe_size"] = number_field("oracle_probe_size", &RunConfig::oracle_probe_size);
        t["oracle_samples"] = number_field("oracle_samples", &RunConfig::oracle_samples);
        t["eval_prompts"] = number_field("eval_prompts", &RunConfig::eval_prompts);
        t["eval_rollouts"] = number_field("eval_rollouts", &RunConfig::eval_rollouts);
        t["checkpoint_every"] = number_field("checkpoint_every", &RunConfig::checkpoint_every);
        t["traj_log_every"] = number_field("traj_log_every", &RunConfig::traj_log_every);
        t["parallelism"] = number_field("parallelism", &RunConfig::parallelism);
        t["output_dir"] = string_field(&RunConfig::output_dir);
        t["run_id"] = string_field(&RunConfig::run_id);
        t["strategy"] = {[](RunConfig& c, const std::string& raw) {
                             try {
                                 c.strategy = strategy_from_string(unquote(trim(raw)));
                             } catch (const std::invalid_argument& e) {
                                 throw ConfigError("strategy", e.what());
                             }
                         },
                         [](const RunConfig& c) { return "\"" + std::string(to_string(c.strategy)) + "\""; }};
        t["estimator"] = {[](RunConfig& c, const std::string& raw) {
                              try {
                                  c.estimator = estimator_from_string(unquote(trim(raw)));
                              } catch (const std::invalid_argument& e) {
                                  throw ConfigError("estimator", e.what());
                              }
                          },
                          [](const RunConfig& c) { return "\"" + std::string(to_string(c.estimator)) + "\""; }};
        t["sweep_seeds"] = {[](RunConfig& c, const std::string& raw) {
                                std::string s = trim(raw);
                                if (s.size() < 2 || s.front() != '[' || s.back() != ']')
                                    throw ConfigError("sweep_seeds", "expected a list like [1, 2, 3]");
                                s = s.substr(1, s.size() - 2);
                                c.sweep_seeds.clear();
                                std::stringstream ss(s);
                                std::string item;
                                while (std::getline(ss, item, ','))
                                    if (!trim(item).empty()) c.sweep_seeds.push_back(parse_number<std::uint64_t>("sweep_seeds", item));
                            },
                            [](const RunConfig& c) {
                                std::string s = "[";
                                for (std::size_t i = 0; i < c.sweep_seeds.size(); ++i)
                                    s += (i ? ", " : "") + std::to_string(c.sweep_seeds[i]);
                                return s + "]";
                            }};
        return t;
    }();
    return table;
}

} // namespace detail

inline void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value)
{
    const auto& f = detail::fields();
    const auto it = f.find(key);
    if (it == f.end()) throw ConfigError(key, "unknown configuration key");
    it->second.set(cfg, value);
}

/// Re-checks every constraint the owning modules impose.
inline void validate(const RunConfig& c)
{
    auto require = [](bool ok, const char* field, const char* what) {
        if (!ok) throw ConfigError(field, what);
    };
    require(c.num_turns >= 2, "num_turns", "K < 2");
    require(c.num_digits >= 1, "num_digits", "M < 1");
    require(c.noise_rate >= 0.0 && c.noise_rate < 1.0, "noise_rate", "must lie in [0, 1)");
    require(c.vocab_size - c.num_turns - 3 >= 2 * c.num_digits, "vocab_size", "need V >= K + 3 + 2*M");
    require(c.max_response_len >= c.num_digits + 1, "max_response_len", "must be >= M + 1");
    require(c.length_penalty >= 0.0, "length_penalty", "must be >= 0");
    require(c.beta > 0.0 && std::isfinite(c.beta), "beta", "must be > 0");
    require(c.eta >= kMinTemperature && std::isfinite(c.eta), "eta", "must be >= 1e-8");
    require(c.prm_steps >= 1, "prm_steps", "must be >= 1");
    require(c.prm_lr >= 0.0, "prm_lr", "must be >= 0");
    require(c.prm_clip > 0.0, "prm_clip", "must be > 0");
    require(c.gamma_disc >= 0.0 && c.gamma_disc <= 1.0, "gamma_disc", "must lie in [0, 1]");
    require(c.lambda_gae >= 0.0 && c.lambda_gae <= 1.0, "lambda_gae", "must lie in [0, 1]");
    require(c.eps_std > 0.0, "eps_std", "must be > 0");
    require(c.w_implicit >= 0.0, "w_implicit", "must be >= 0");
    require(c.w_outcome >= 0.0, "w_outcome", "must be >= 0");
    require(c.value_lr >= 0.0, "value_lr", "must be >= 0");
    require(c.eps_clip > 0.0 && c.eps_clip < 1.0, "eps_clip", "must lie in (0, 1)");
    require(c.kl_coeff >= 0.0, "kl_coeff", "must be >= 0");
    require(c.policy_lr >= 0.0, "policy_lr", "must be >= 0");
    require(!(c.strategy == Strategy::token_level && c.estimator == Estimator::gae), "estimator",
            "token_level attribution supports rloo or grpo only");
    require(c.groups >= 1, "groups", "must be >= 1");
    require(c.rollouts >= 2, "rollouts", "G < 2");
    require(c.minibatch_groups >= 1, "minibatch_groups", "must be >= 1");
    require(c.iterations >= 0, "iterations", "must be >= 0");
    require(c.probe_groups >= 0, "probe_groups", "must be >= 0");
    require(c.probe_rollouts >= 2, "probe_rollouts", "must be >= 2");
    require(c.probe_start >= 0, "probe_start", "must be >= 0");
    require(c.probe_every >= 1, "probe_every", "must be >= 1");
    require(c.stability_window >= 1, "stability_window", "must be >= 1");
    require(c.oracle_probe_size >= 0, "oracle_probe_size", "must be >= 0");
    require(c.oracle_samples >= 1, "oracle_samples", "must be >= 1");
    require(c.eval_prompts >= 1, "eval_prompts", "must be >= 1");
    require(c.eval_rollouts >= 2, "eval_rollouts", "must be >= 2");
    require(c.checkpoint_every >= 0, "checkpoint_every", "must be >= 0");
    require(c.traj_log_every >= 0, "traj_log_every", "must be >= 0");
    require(c.parallelism >= 1, "parallelism", "must be >= 1");
    require(!c.run_id.empty(), "run_id", "must not be empty");
}

/// Parses `key = value` lines; `#` starts a comment; `[section]` headers are ignored.
inline RunConfig parse_config(const std::string& text, RunConfig base = {})
{
    std::stringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        bool quoted = false;
        for (std::size_t i = 0; i < line.size(); ++i) {
            if (line[i] == '"') quoted = !quoted;
            if (line[i] == '#' && !quoted) {
                line.resize(i);
                break;
            }
        }
        line = detail::trim(line);
        if (line.empty() || line.front() == '[') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("", "line " + std::to_string(lineno) + ": expected key = value");
        set_config_value(base, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return base;
}

/// TURNWISE_<KEY> (upper case) overrides the matching key.
inline void apply_env_overrides(RunConfig& cfg)
{
    for (const auto& [key, field] : detail::fields()) {
        std::string name = "TURNWISE_";
        for (char ch : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        if (const char* v = std::getenv(name.c_str())) field.set(cfg, v);
    }
}

inline RunConfig load_config(const std::string& path, bool env_overrides = true)
{
    std::ifstream in(path);
    if (!in) throw ConfigError("", "cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    RunConfig cfg = parse_config(buf.str());
    if (env_overrides) apply_env_overrides(cfg);
    validate(cfg);
    return cfg;
}

inline std::string serialize_config(const RunConfig& cfg)
{
    std::string out;
    for (const auto& [key, field] : detail::fields()) out += key + " = " + field.get(cfg) + "\n";
    return out;
}

} // namespace turnwise
