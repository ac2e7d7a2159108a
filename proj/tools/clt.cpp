// Command-line front end: synth / baseline / sweep / eval / fisher / report.
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clt/experiment.hpp"

namespace fs = std::filesystem;
using namespace clt;

namespace {

void print_records(const std::vector<EvalRecord>& records) {
    for (const EvalRecord& r : records)
        std::printf("%-10s %-14s %-2s lambda=%-10g %-14s value=%.6g n=%lld\n", r.metric.c_str(),
                    r.dataset.c_str(), r.tag.c_str(), r.lambda, r.checkpoint.c_str(), r.value,
                    static_cast<long long>(r.n_items));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual-learning toolkit for byte-level language models"};
    app.require_subcommand(1);

    // synth: write the default workspace (datasets + config.json).
    std::string synth_dir = "workspace";
    CLI::App* synth = app.add_subcommand("synth", "generate the default synthetic workspace");
    synth->add_option("--dir", synth_dir, "workspace directory")->capture_default_str();

    // baseline: train task-A model + judge, estimate Fisher, evaluate.
    std::string cfg_path;
    CLI::App* baseline = app.add_subcommand("baseline", "train and evaluate the task-A baseline");
    baseline->add_option("--config", cfg_path, "sweep config JSON")->required();

    // sweep: full lambda sweep (baseline included, cached on rerun).
    std::vector<double> only;
    CLI::App* sweep = app.add_subcommand("sweep", "run the regularisation-strength sweep");
    sweep->add_option("--config", cfg_path, "sweep config JSON")->required();
    sweep->add_option("--lambda", only, "restrict to these lambda values (repeatable)");

    // eval: metrics for an arbitrary checkpoint against the config's suites.
    std::string ckpt_path;
    double eval_lambda = -1.0;
    std::string eval_id = "adhoc";
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on both eval suites");
    eval->add_option("--suite,--config", cfg_path, "sweep config JSON naming the eval suites")
        ->required();
    eval->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    eval->add_option("--id", eval_id, "checkpoint id for the records")->capture_default_str();
    eval->add_option("--lambda", eval_lambda, "lambda value recorded with the metrics")
        ->capture_default_str();

    // fisher: estimate the empirical diagonal Fisher for a checkpoint.
    std::string fisher_dataset, fisher_out = "fisher.bin";
    CLI::App* fisher = app.add_subcommand("fisher", "estimate a diagonal Fisher artifact");
    fisher->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    fisher->add_option("--dataset", fisher_dataset, "MC JSON-lines file")->required();
    fisher->add_option("--out", fisher_out, "output artifact path")->capture_default_str();

    // report: derived tables and plots from a finished run directory.
    std::string run_dir;
    CLI::App* rep = app.add_subcommand("report", "write records.csv, curves and plots");
    rep->add_option("--run", run_dir, "run directory (the config's output_dir)")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            std::string cfg = generate_workspace(synth_dir);
            std::printf("workspace ready: %s\n", cfg.c_str());
        } else if (baseline->parsed()) {
            SweepConfig cfg = SweepConfig::load(cfg_path);
            BaselineArtifacts art = run_baseline(cfg);
            std::printf("baseline %s (%s)\n", (fs::path(cfg.output_dir) / "baseline").c_str(),
                        art.loaded_from_cache ? "cached" : "trained");
            print_records(art.records);
        } else if (sweep->parsed()) {
            SweepConfig cfg = SweepConfig::load(cfg_path);
            SweepResult res = run_sweep(cfg, only);
            for (const auto& [lambda, recs] : res.cells) {
                std::printf("-- lambda=%g --\n", lambda);
                print_records(recs);
            }
            for (double l : res.failed) std::printf("FAILED cell lambda=%g\n", l);
            report(cfg.output_dir);
            std::printf("report written under %s\n", cfg.output_dir.c_str());
            if (!res.failed.empty()) return 1;
        } else if (eval->parsed()) {
            SweepConfig cfg = SweepConfig::load(cfg_path);
            Checkpoint ck = load_checkpoint(ckpt_path);
            CausalLM model{ck.config, std::move(ck.params)};
            Checkpoint jk =
                load_checkpoint((fs::path(cfg.output_dir) / "baseline" / "judge.ckpt").string());
            CausalLM judge{jk.config, std::move(jk.params)};
            print_records(eval_checkpoint(model, cfg, eval_lambda, eval_id, judge));
        } else if (fisher->parsed()) {
            Checkpoint ck = load_checkpoint(ckpt_path);
            CausalLM model{ck.config, std::move(ck.params)};
            FisherDiagonal f = estimate_fisher(model, load_mc(fisher_dataset));
            save_fisher(fisher_out, f);
            std::printf("fisher: %lld examples, anchor %016llx -> %s\n",
                        static_cast<long long>(f.n_examples),
                        static_cast<unsigned long long>(f.anchor_hash), fisher_out.c_str());
        } else if (rep->parsed()) {
            report(run_dir);
            std::printf("report written under %s\n", run_dir.c_str());
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
