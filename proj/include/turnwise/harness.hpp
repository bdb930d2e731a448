#pragma once

// Run orchestration: train / eval / sweep / diagnose, persistence of
// metrics, checkpoints, trajectory logs and probe snapshots, and the
// run manifest.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "turnwise/config.hpp"
#include "turnwise/diagnostics.hpp"
#include "turnwise/trainer.hpp"

namespace turnwise {

namespace fs = std::filesystem;

inline fs::path run_dir(const RunConfig& c) { return fs::path(c.output_dir) / c.run_id; }

/// FNV-1a 64 of a file's bytes, as 16 hex digits.
inline std::string content_hash(const fs::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 14];
    while (in.read(buf, sizeof buf) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

/// Hashes every file under `dir` except the manifest itself.
inline void write_manifest(const fs::path& dir)
{
    std::vector<std::string> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && e.path().filename() != "manifest.json")
            files.push_back(fs::relative(e.path(), dir).generic_string());
    std::sort(files.begin(), files.end());
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : files) j[f] = content_hash(dir / f);
    std::ofstream(dir / "manifest.json") << j.dump(2) << "\n";
}

inline void write_text(const fs::path& path, const std::string& text)
{
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

// Checkpoints: {run}/step_{n}/{policy,prm,ref,value}.bin + state.json.

inline fs::path write_checkpoint(const fs::path& dir, const TrainState& s)
{
    const fs::path d = dir / ("step_" + std::to_string(s.step));
    fs::create_directories(d);
    const auto step = static_cast<std::uint64_t>(s.step);
    write_binary(s.policy, step, (d / "policy.bin").string());
    write_binary(s.prm, step, (d / "prm.bin").string());
    write_binary(s.reference, step, (d / "ref.bin").string());
    write_binary(s.value, step, (d / "value.bin").string());
    nlohmann::json state = {{"step", s.step},
                            {"seed", s.config.seed},
                            {"policy_adam_steps", s.policy_opt.steps},
                            {"prm_adam_steps", s.prm_opt.adam.steps},
                            {"value_outcome", s.value_outcome.weights},
                            {"config", serialize_config(s.config)}};
    write_text(d / "state.json", state.dump(2) + "\n");
    return d;
}

struct Checkpoint
{
    ParamMatrix policy;
    ParamMatrix prm;
    ParamMatrix reference;
    ParamMatrix value;
    std::uint64_t step = 0;
};

/// Accepts a step directory or a path to one of its files.
inline Checkpoint load_checkpoint(const fs::path& path)
{
    const fs::path d = fs::is_directory(path) ? path : path.parent_path();
    Checkpoint c;
    auto policy = read_binary((d / "policy.bin").string());
    c.policy = std::move(policy.params);
    c.step = policy.step;
    c.prm = read_binary((d / "prm.bin").string()).params;
    c.reference = read_binary((d / "ref.bin").string()).params;
    c.value = read_binary((d / "value.bin").string()).params;
    return c;
}

struct EvalReport
{
    double mean_outcome = 0.0;
    double mean_token_count = 0.0;
    double mean_combined_score = 0.0;
    int trajectories = 0;
};

inline nlohmann::json to_json(const EvalReport& r)
{
    return {{"mean_outcome", r.mean_outcome},
            {"mean_token_count", r.mean_token_count},
            {"mean_combined_score", r.mean_combined_score},
            {"trajectories", r.trajectories}};
}

/// Greedy decoding, eval_rollouts per prompt over held-out goal seeds.
inline EvalReport evaluate_policy(const RunConfig& cfg, const ParamMatrix& policy)
{
    const Environment env(cfg.env());
    const FeatureMap fmap(cfg.vocab_size, cfg.num_turns);
    if (policy.rows != fmap.dim() || policy.cols != cfg.vocab_size)
        throw std::invalid_argument("checkpoint/config dimension mismatch: checkpoint is " + std::to_string(policy.rows) + "x" +
                                    std::to_string(policy.cols) + ", config expects " + std::to_string(fmap.dim()) + "x" +
                                    std::to_string(cfg.vocab_size));
    const LogLinearPolicy pol(policy, fmap, SampleMode::greedy);
    const CounterRng base = CounterRng(cfg.seed).split(stream::eval);
    EvalReport r;
    double outcome = 0.0, tokens = 0.0, score = 0.0;
    for (int p = 0; p < cfg.eval_prompts; ++p) {
        const auto group = env.rollout(pol, kEvalSeedBase + static_cast<std::uint64_t>(p), cfg.eval_rollouts,
                                       base.split(static_cast<std::uint64_t>(p)), {}, cfg.parallelism);
        for (const auto& t : group.trajectories) {
            outcome += t.outcome;
            tokens += t.token_count;
            score += t.combined_score;
            ++r.trajectories;
        }
    }
    r.mean_outcome = outcome / r.trajectories;
    r.mean_token_count = tokens / r.trajectories;
    r.mean_combined_score = score / r.trajectories;
    return r;
}

struct TrainSummary
{
    fs::path dir;
    std::vector<IterationMetrics> metrics;
    TrainState state;
};

/// Mean training outcome over the final `window` iterations (all of them if fewer).
inline double final_mean_outcome(const std::vector<IterationMetrics>& metrics, std::size_t window = 20)
{
    if (metrics.empty()) return kNaN;
    const std::size_t n = std::min(window, metrics.size());
    double s = 0.0;
    for (std::size_t i = metrics.size() - n; i < metrics.size(); ++i) s += metrics[i].mean_outcome;
    return s / static_cast<double>(n);
}

/// Runs the loop and writes every artifact under output_dir/run_id. Throws on failure after flushing logs.
inline TrainSummary run_training(const RunConfig& cfg)
{
    validate(cfg);
    const fs::path dir = run_dir(cfg);
    fs::create_directories(dir);
    write_text(dir / "config.toml", serialize_config(cfg));

    std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
    metrics << metrics_header() << "\n" << std::flush;
    std::ofstream trajectories(dir / "trajectories.jsonl", std::ios::binary);
    std::ofstream attributions(dir / "attributions.jsonl", std::ios::binary);
    std::ofstream snapshots;

    TrainHooks hooks;
    hooks.on_start = [&](const TrainState& s) { write_checkpoint(dir, s); };
    hooks.on_snapshot = [&](const TrainState&, const ProbeSnapshot& snap) {
        if (!snapshots.is_open()) snapshots.open(dir / "snapshots.jsonl", std::ios::binary);
        snapshots << nlohmann::json{{"step", snap.step},
                                    {"turn_scores", snap.turn_scores},
                                    {"token_rewards", snap.token_rewards},
                                    {"implicit_rewards", snap.implicit_rewards}}
                         .dump()
                  << "\n";
    };
    hooks.on_iteration = [&](const TrainState& s, const IterationRecord& rec) {
        metrics << metrics_row(rec.metrics) << "\n" << std::flush;
        if (cfg.traj_log_every > 0 && s.step % cfg.traj_log_every == 0) {
            for (std::size_t i = 0; i < rec.batch.size(); ++i) {
                const auto traj_id = static_cast<std::uint64_t>(s.step) * 1'000'000 + i;
                nlohmann::json j = to_json(rec.batch[i]);
                j["step"] = s.step;
                j["traj_id"] = traj_id;
                trajectories << j.dump() << "\n";
                nlohmann::json a = to_json(rec.attributions[i], traj_id);
                a["step"] = s.step;
                attributions << a.dump() << "\n";
            }
        }
        if (cfg.checkpoint_every > 0 && s.step % cfg.checkpoint_every == 0) write_checkpoint(dir, s);
    };

    TrainSummary summary;
    summary.dir = dir;
    TrainResult result;
    try {
        result = train_loop(cfg, hooks);
    } catch (const TrainAbort& e) {
        metrics.flush();
        std::ofstream dump(dir / "abort_dump.jsonl", std::ios::binary);
        for (const auto& t : e.batch()) dump << to_json(t).dump() << "\n";
        throw;
    }
    const auto last = result.state.step;
    if (last > 0 && (cfg.checkpoint_every == 0 || last % cfg.checkpoint_every != 0)) write_checkpoint(dir, result.state);

    if (!result.probe.set.empty()) {
        std::ofstream probe(dir / "probe.jsonl", std::ios::binary);
        const auto& trajs = result.probe.set.trajectories();
        for (std::size_t i = 0; i < trajs.size(); ++i)
            probe << nlohmann::json{{"group_id", result.probe.set.group_ids()[i]}, {"trajectory", to_json(trajs[i])}}.dump()
                  << "\n";
    }
    if (!result.agreement.trajectories.empty()) {
        std::vector<int> pivotal;
        for (const auto& t : result.agreement.trajectories) pivotal.push_back(t.goal.pivotal_index);
        const nlohmann::json j = {{"step", result.state.step},
                                  {"strategy", to_string(cfg.strategy)},
                                  {"num_turns", cfg.num_turns},
                                  {"turn_scores", result.agreement.turn_scores},
                                  {"oracle_turns", result.agreement.oracle_turns},
                                  {"deltas", result.agreement.deltas},
                                  {"pivotal_index", pivotal}};
        write_text(dir / "agreement.json", j.dump() + "\n");
    }
    metrics.close();
    trajectories.close();
    attributions.close();
    if (snapshots.is_open()) snapshots.close();
    write_manifest(dir);
    summary.metrics = std::move(result.metrics);
    summary.state = std::move(result.state);
    return summary;
}

inline int cmd_train(const RunConfig& cfg, std::ostream& out = std::cout, std::ostream& err = std::cerr)
{
    try {
        const TrainSummary s = run_training(cfg);
        out << "train: " << s.metrics.size() << " iterations, final mean outcome "
            << format_metric(final_mean_outcome(s.metrics)) << ", artifacts in " << s.dir.string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

inline int cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr)
{
    try {
        const Checkpoint ck = load_checkpoint(checkpoint);
        const EvalReport r = evaluate_policy(cfg, ck.policy);
        nlohmann::json j = to_json(r);
        j["checkpoint"] = checkpoint.generic_string();
        j["step"] = ck.step;
        const fs::path d = fs::is_directory(checkpoint) ? checkpoint : checkpoint.parent_path();
        write_text(d / "eval.json", j.dump(2) + "\n");
        out << j.dump() << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

struct SweepCell
{
    Strategy strategy = Strategy::norm_itpo;
    Estimator estimator = Estimator::rloo;
};

/// One `strategy,estimator` pair per line; `#` comments and a header line are allowed.
inline std::vector<SweepCell> parse_cells(const std::string& text)
{
    std::vector<SweepCell> cells;
    std::stringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (const auto h = line.find('#'); h != std::string::npos) line.resize(h);
        line = detail::trim(line);
        if (line.empty() || line.rfind("strategy", 0) == 0) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw ConfigError("cells", "expected 'strategy,estimator', got '" + line + "'");
        cells.push_back({strategy_from_string(detail::trim(line.substr(0, comma))),
                         estimator_from_string(detail::trim(line.substr(comma + 1)))});
    }
    if (cells.empty()) throw ConfigError("cells", "no cells");
    return cells;
}

inline std::pair<double, double> mean_std(const Vec& xs)
{
    if (xs.empty()) return {kNaN, kNaN};
    double m = 0.0;
    for (double x : xs) m += x;
    m /= static_cast<double>(xs.size());
    double v = 0.0;
    for (double x : xs) v += (x - m) * (x - m);
    return {m, xs.size() > 1 ? std::sqrt(v / static_cast<double>(xs.size() - 1)) : 0.0};
}

/// Every cell over the shared seed list: train, then evaluate the final policy. Failed runs are recorded and skipped.
inline int cmd_sweep(const RunConfig& base, const std::vector<SweepCell>& cells, std::ostream& out = std::cout,
                     std::ostream& err = std::cerr)
{
    const fs::path root = fs::path(base.output_dir) / base.run_id;
    fs::create_directories(root);
    std::ofstream table(root / "sweep.csv", std::ios::binary);
    table << "strategy,estimator,seeds,failed,eval_outcome_mean,eval_outcome_std,eval_token_count_mean,"
             "eval_token_count_std,eval_combined_score_mean,eval_combined_score_std,train_final20_mean,train_final20_std\n";
    std::ofstream failures(root / "sweep_failures.csv", std::ios::binary);
    failures << "strategy,estimator,seed,error\n";
    int failed_total = 0;
    for (const auto& cell : cells) {
        Vec outcome, tokens, score, final20;
        int failed = 0;
        for (const auto seed : base.sweep_seeds) {
            RunConfig cfg = base;
            cfg.strategy = cell.strategy;
            cfg.estimator = cell.estimator;
            cfg.seed = seed;
            cfg.output_dir = root.string();
            cfg.run_id = std::string(to_string(cell.strategy)) + "-" + std::string(to_string(cell.estimator)) + "-seed" +
                         std::to_string(seed);
            try {
                const TrainSummary s = run_training(cfg);
                const EvalReport r = evaluate_policy(cfg, s.state.policy);
                write_text(s.dir / "eval.json", to_json(r).dump(2) + "\n");
                outcome.push_back(r.mean_outcome);
                tokens.push_back(r.mean_token_count);
                score.push_back(r.mean_combined_score);
                final20.push_back(final_mean_outcome(s.metrics));
                out << "sweep: " << cfg.run_id << " eval outcome " << format_metric(r.mean_outcome) << "\n";
            } catch (const std::exception& e) {
                ++failed;
                ++failed_total;
                std::string msg = e.what();
                std::replace(msg.begin(), msg.end(), ',', ';');
                std::replace(msg.begin(), msg.end(), '\n', ' ');
                failures << to_string(cell.strategy) << "," << to_string(cell.estimator) << "," << seed << "," << msg << "\n";
                err << "sweep: " << cfg.run_id << " failed: " << e.what() << "\n";
            }
        }
        table << to_string(cell.strategy) << "," << to_string(cell.estimator) << "," << base.sweep_seeds.size() << ","
              << failed;
        for (const Vec* v : {&outcome, &tokens, &score, &final20}) {
            const auto [m, sd] = mean_std(*v);
            table << "," << format_metric(m) << "," << format_metric(sd);
        }
        table << "\n" << std::flush;
    }
    table.close();
    failures.close();
    write_manifest(root);
    out << "sweep: table in " << (root / "sweep.csv").string() << "\n";
    return failed_total == 0 ? 0 : 1;
}

// Run-directory readers for diagnose.

inline std::vector<nlohmann::json> read_jsonl(const fs::path& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing " + path.string());
    std::vector<nlohmann::json> rows;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(nlohmann::json::parse(line));
    return rows;
}

inline ProbeSet load_probe(const fs::path& dir)
{
    if (!fs::exists(dir / "probe.jsonl") || !fs::exists(dir / "snapshots.jsonl"))
        throw std::runtime_error("missing snapshots: " + dir.string() + " has no probe.jsonl/snapshots.jsonl");
    std::vector<Trajectory> trajs;
    std::vector<int> ids;
    for (const auto& row : read_jsonl(dir / "probe.jsonl")) {
        ids.push_back(row.at("group_id").get<int>());
        trajs.push_back(trajectory_from_json(row.at("trajectory")));
    }
    ProbeSet probe(std::move(trajs), std::move(ids));
    for (const auto& row : read_jsonl(dir / "snapshots.jsonl")) {
        ProbeSnapshot snap;
        snap.step = row.at("step").get<std::int64_t>();
        snap.turn_scores = row.at("turn_scores").get<std::vector<Vec>>();
        snap.token_rewards = row.at("token_rewards").get<std::vector<Vec>>();
        snap.implicit_rewards = row.at("implicit_rewards").get<Vec>();
        probe.append(std::move(snap));
    }
    return probe;
}

inline void write_stability_csv(const fs::path& path, const ProbeSet& probe, std::size_t window, SeriesKind kind)
{
    std::ofstream out(path, std::ios::binary);
    out << "step,conv_spearman,adj_spearman\n";
    if (probe.snapshots().size() < window) {
        out << "# warning: " << probe.snapshots().size() << " snapshots < window " << window << "\n";
        return;
    }
    for (const auto& p : stability_track(probe, window, kind))
        out << p.step << "," << format_metric(p.conv_spearman) << "," << format_metric(p.adj_spearman) << "\n";
}

/// Writes kendall.csv, stability.csv, stability_tokens.csv, slopes.csv and agreement.csv into dir/diagnostics.
inline void run_diagnostics(const fs::path& dir, std::size_t window)
{
    const fs::path out_dir = dir / "diagnostics";
    fs::create_directories(out_dir);

    {
        std::ifstream in(dir / "metrics.csv");
        if (!in) throw std::runtime_error("missing " + (dir / "metrics.csv").string());
        std::ofstream out(out_dir / "kendall.csv", std::ios::binary);
        out << "step,mean_tau\n";
        std::string line;
        std::getline(in, line);
        while (std::getline(in, line)) {
            std::vector<std::string> cols;
            std::stringstream ss(line);
            std::string cell;
            while (std::getline(ss, cell, ',')) cols.push_back(cell);
            if (cols.size() >= 8) out << cols[0] << "," << cols[7] << "\n";
        }
    }

    const ProbeSet probe = load_probe(dir);
    write_stability_csv(out_dir / "stability.csv", probe, window, SeriesKind::turn_scores);
    write_stability_csv(out_dir / "stability_tokens.csv", probe, window, SeriesKind::token_rewards);

    {
        std::ofstream out(out_dir / "slopes.csv", std::ios::binary);
        out << "step,group_id,slope,skipped\n";
        std::map<int, std::vector<std::size_t>> members;
        for (std::size_t i = 0; i < probe.group_ids().size(); ++i) members[probe.group_ids()[i]].push_back(i);
        std::vector<Vec> outcomes;
        for (const auto& [g, idx] : members) {
            outcomes.emplace_back();
            for (std::size_t i : idx) outcomes.back().push_back(probe.trajectories()[i].outcome);
        }
        for (const auto& snap : probe.snapshots()) {
            std::vector<Vec> implicit;
            for (const auto& [g, idx] : members) {
                implicit.emplace_back();
                for (std::size_t i : idx) implicit.back().push_back(snap.implicit_rewards[i]);
            }
            const auto slopes = slope_regression(implicit, outcomes);
            std::size_t gi = 0;
            for (const auto& [g, idx] : members) {
                const auto& sl = slopes[gi++];
                out << snap.step << "," << g << "," << (sl ? format_metric(*sl) : "nan") << "," << (sl ? 0 : 1) << "\n";
            }
        }
    }

    {
        std::ofstream out(out_dir / "agreement.csv", std::ios::binary);
        out << "step,strategy,agreement,tie_rate,random_baseline\n";
        if (fs::exists(dir / "agreement.json")) {
            std::ifstream in(dir / "agreement.json");
            const auto j = nlohmann::json::parse(in);
            const auto scores = j.at("turn_scores").get<std::vector<Vec>>();
            const auto oracle = j.at("oracle_turns").get<std::vector<int>>();
            const auto step = j.at("step").get<std::int64_t>();
            const Agreement a = pivotal_agreement(scores, oracle);
            out << step << ",norm_itpo," << format_metric(a.agreement) << "," << format_metric(a.tie_rate) << ","
                << format_metric(a.random_baseline) << "\n";
            // Equal shares: every turn ties, so the first-index rule is the informative one.
            std::vector<Vec> flat(scores.size(), Vec(static_cast<std::size_t>(j.at("num_turns").get<int>()), 0.0));
            const Agreement b = pivotal_agreement(flat, oracle, TieRule::first_index);
            out << step << ",trajectory_share," << format_metric(b.agreement) << "," << format_metric(b.tie_rate) << ","
                << format_metric(b.random_baseline) << "\n";
        }
    }
}

inline int cmd_diagnose(const fs::path& dir, std::size_t window, std::ostream& out = std::cout,
                        std::ostream& err = std::cerr)
{
    try {
        run_diagnostics(dir, window);
        out << "diagnose: CSVs in " << (dir / "diagnostics").string() << "\n";
        return 0;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace turnwise
