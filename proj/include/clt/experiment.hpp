#pragma once

#include "clt/continual.hpp"
#include "clt/eval.hpp"
#include "clt/trainer.hpp"

#include <map>
#include <memory>
#include <string>
#include <vector>

namespace clt {

struct EvalSuite {
    std::string heldout_dir;          // directory of .txt files
    std::string qa;                   // QA JSON-lines
    std::vector<std::string> mc;      // MC JSON-lines files
};

struct SweepConfig {
    ModelConfig model;
    std::string task_a_dir;
    std::string task_b_dir;
    std::string fisher_dataset;
    EvalSuite eval_a, eval_b;
    std::vector<double> lambda_grid = {0.0, 1e2, 1e3, 1e6, 1e9, 1e12};
    RegularizerSpec regularizer;      // lambda field unused; grid supplies it
    TrainConfig train_a, train_b, judge_train;
    int max_new = 32;
    McNorm mc_norm = McNorm::PerToken;
    QaPplMode qa_mode = QaPplMode::Joint;
    uint64_t seed = 1;
    std::string output_dir;

    void validate() const;            // grid ordering + referenced paths
    uint64_t result_hash() const;     // all result-affecting fields
    uint64_t baseline_hash() const;   // fields affecting baseline artifacts

    static SweepConfig load(const std::string& path);  // unknown keys rejected
    void save(const std::string& path) const;
};

struct BaselineArtifacts {
    std::shared_ptr<CausalLM> model_a;
    std::shared_ptr<CausalLM> judge;
    std::shared_ptr<TaskSnapshot> snapshot;
    std::shared_ptr<FisherDiagonal> fisher;
    std::shared_ptr<ParameterStore> si_importance;  // when regularizer is SI
    std::vector<EvalRecord> records;
    bool loaded_from_cache = false;
};

struct SweepResult {
    std::vector<EvalRecord> baseline;
    std::map<double, std::vector<EvalRecord>> cells;
    std::vector<double> failed;
    uint64_t config_hash = 0;
};

std::string lambda_label(double lambda);

// All metrics for one checkpoint on both tasks' eval suites.
std::vector<EvalRecord> eval_checkpoint(const CausalLM& model, const SweepConfig& cfg,
                                        double lambda, const std::string& checkpoint_id,
                                        const CausalLM& judge);

// Trains (or loads, on hash match) the task-A model and the judge,
// snapshots the anchor, estimates Fisher, and evaluates the baseline.
BaselineArtifacts run_baseline(const SweepConfig& cfg);

// Per-lambda task-B continual training. Finished cells are skipped on
// rerun; a failing cell is recorded and the sweep continues. `only`
// restricts the grid when non-empty.
SweepResult run_sweep(const SweepConfig& cfg, const std::vector<double>& only = {});

// Pure function of the persisted records: records.csv, per-metric curve
// files, summary.md and SVG plots under run_dir.
void report(const std::string& run_dir);

// Writes the default synthetic workspace (corpora, eval sets, fisher
// set) plus a ready config.json; returns the config path.
std::string generate_workspace(const std::string& dir);

}  // namespace clt
