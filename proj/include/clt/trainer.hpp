#pragma once

#include "clt/continual.hpp"
#include "clt/data.hpp"
#include "clt/model.hpp"

#include <optional>
#include <string>
#include <vector>

namespace clt {

struct TrainConfig {
    double learning_rate = 2e-4;
    double warmup_ratio = 0.05;
    double weight_decay = 0.01;
    int batch_size = 2;
    int grad_accum_steps = 1;
    int64_t total_steps = 2000;
    uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    void validate() const;
};

struct OptimState {
    ParameterStore m, v;
    int64_t step = 0;

    static OptimState start(const ParameterStore& params);
};

// Linear warmup to learning_rate over ceil(warmup_ratio * total_steps)
// steps, constant afterwards.
double lr_schedule(int64_t step, const TrainConfig& config);

// Weight decay skips norms, biases and embeddings.
bool decay_applies(const std::string& param_name);

void adamw_step(ParameterStore& params, const ParameterStore& grads, OptimState& state,
                double lr, const TrainConfig& config);

// A regularizer with its task-A artifacts resolved.
struct BoundRegularizer {
    RegularizerSpec spec;
    std::shared_ptr<const TaskSnapshot> snapshot;               // EWC, SI, LwF
    std::shared_ptr<const FisherDiagonal> fisher;               // EWC
    std::shared_ptr<const ParameterStore> si_importance;        // SI
};

struct StepLog {
    int64_t step = 0;
    double lr = 0.0;
    double task_loss = 0.0;
    std::vector<std::pair<std::string, double>> penalties;
    double wall_ms = 0.0;
};

struct TrainResult {
    std::vector<StepLog> log;
    std::optional<SIState> si_state;  // populated when SI accumulation ran
};

// AdamW loop with gradient accumulation, penalty hooks and final
// checkpoint. Per-step records are appended to log_path (JSON lines)
// when non-empty. accumulate_si enables the path-integral hook for a
// later SI consolidation. resume, when set, restores params/optimizer/
// step from the checkpoint and continues to total_steps.
TrainResult train_task(CausalLM& model, BatchStream& stream, const TrainConfig& config,
                       const std::vector<BoundRegularizer>& regularizers,
                       const std::string& checkpoint_path, const std::string& log_path = "",
                       bool accumulate_si = false, double si_epsilon = 1e-3,
                       const std::optional<Checkpoint>& resume = std::nullopt);

}  // namespace clt
