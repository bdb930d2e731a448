// turnwise: train | eval | sweep | diagnose

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "turnwise.hpp"

namespace {

struct Flags
{
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> parallelism;
};

std::string slurp(const std::string& path)
{
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// defaults < config file < TURNWISE_* environment < command-line flags
turnwise::RunConfig resolve(const Flags& f)
{
    turnwise::RunConfig c;
    if (!f.config.empty()) c = turnwise::parse_config(slurp(f.config));
    turnwise::apply_env_overrides(c);
    if (f.seed) c.seed = *f.seed;
    if (!f.out.empty()) c.output_dir = f.out;
    if (f.parallelism) c.parallelism = *f.parallelism;
    turnwise::validate(c);
    return c;
}

void add_common(CLI::App* cmd, Flags& f)
{
    cmd->add_option("--config", f.config, "TOML-style config file");
    cmd->add_option("--seed", f.seed, "run seed");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--parallelism", f.parallelism, "worker threads for rollouts");
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"turnwise: turn-level credit assignment for multi-turn policy optimization"};
    app.require_subcommand(1);

    Flags train_f, eval_f, sweep_f, diag_f;
    std::string checkpoint, cells, run;

    auto* train = app.add_subcommand("train", "train a policy and write run artifacts");
    add_common(train, train_f);
    train->add_option("--checkpoint", checkpoint, "resume from a checkpoint (not supported)");

    auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint on held-out goals");
    add_common(eval, eval_f);
    eval->add_option("--checkpoint", checkpoint, "checkpoint step directory")->required();

    auto* sweep = app.add_subcommand("sweep", "strategy x estimator grid over the configured seeds");
    add_common(sweep, sweep_f);
    sweep->add_option("--cells", cells, "file with one 'strategy,estimator' per line")->required();

    auto* diagnose = app.add_subcommand("diagnose", "diagnostic CSVs for a finished run");
    add_common(diagnose, diag_f);
    diagnose->add_option("run", run, "run directory (default: <output_dir>/<run_id>)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*train) {
            if (!checkpoint.empty()) {
                std::cerr << "error: train --checkpoint is not supported; runs start from the zero policy\n";
                return 2;
            }
            return turnwise::cmd_train(resolve(train_f));
        }
        if (*eval) return turnwise::cmd_eval(resolve(eval_f), checkpoint);
        if (*sweep) return turnwise::cmd_sweep(resolve(sweep_f), turnwise::parse_cells(slurp(cells)));
        if (*diagnose) {
            const auto cfg = resolve(diag_f);
            const std::filesystem::path dir = run.empty() ? turnwise::run_dir(cfg) : std::filesystem::path(run);
            return turnwise::cmd_diagnose(dir, static_cast<std::size_t>(cfg.stability_window));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
