#pragma once

#include "clt/data.hpp"
#include "clt/model.hpp"

#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace clt {

// Frozen end-of-task state: anchor parameters, optionally a frozen
// teacher model for distillation.
struct TaskSnapshot {
    ParameterStore anchor;
    std::shared_ptr<const CausalLM> teacher;  // null unless LwF is used
    uint64_t anchor_hash = 0;

    static TaskSnapshot of(const CausalLM& model, bool keep_teacher = false);
};

struct FisherDiagonal {
    ParameterStore values;  // aligned with the anchor; entries >= 0
    int64_t n_examples = 0;
    std::string template_id;
    uint64_t anchor_hash = 0;
};

enum class RegularizerKind { None, Ewc, Si, Lwf };

struct RegularizerSpec {
    RegularizerKind kind = RegularizerKind::None;
    double lambda = 0.0;
    double si_epsilon = 1e-3;
    double lwf_temperature = 1.0;
    double lr_gamma = 1.0;  // per-task learning-rate decay
    double lr_min = 0.0;

    void validate() const;
};

RegularizerKind regularizer_kind_from(const std::string& name);
std::string regularizer_kind_name(RegularizerKind k);

// Online path-integral importance accumulator. Reset at task boundaries.
struct SIState {
    ParameterStore numerator;  // sum of step * (-grad)
    ParameterStore theta0;     // parameters at task start
    double epsilon = 1e-3;

    static SIState start(const ParameterStore& params, double epsilon);
};

// Prompt template applied to MC items for likelihood scoring and Fisher
// estimation. Gold continuation is the choice text followed by EOS.
std::string mc_prompt(const MCItem& item);
constexpr const char* kMcTemplateId = "qca.v1";

// Tokenized (context, continuation) for one choice; the context is
// left-truncated to fit the model window when the item is overlong.
std::pair<TokenSeq, TokenSeq> mc_scored_tokens(const MCItem& item, int choice,
                                               int context_length);

// Empirical diagonal Fisher: mean over items of the squared gradient of
// the gold-choice log-likelihood at the current parameters. Items are
// processed in a canonical content order, so the result is invariant to
// the order of the input list.
FisherDiagonal estimate_fisher(const CausalLM& model, const std::vector<MCItem>& fisher_set);

// (lambda/2) * sum_i F_i (theta_i - theta_A_i)^2
double ewc_penalty(const ParameterStore& params, const TaskSnapshot& snapshot,
                   const FisherDiagonal& fisher, double lambda);
// d(penalty)/d(theta_i) = lambda * F_i * (theta_i - theta_A_i), added
// into grads.
void ewc_penalty_grad(const ParameterStore& params, const TaskSnapshot& snapshot,
                      const FisherDiagonal& fisher, double lambda, ParameterStore& grads);

void si_accumulate(SIState& state, const ParameterStore& delta, const ParameterStore& grad);
// S_i = numerator_i / ((theta_end_i - theta0_i)^2 + eps), clamped at 0.
ParameterStore si_consolidate(const SIState& state, const ParameterStore& theta_end);

// lambda * sum_i S_i (theta_i - theta_A_i)^2 (no 1/2 factor).
double si_penalty(const ParameterStore& params, const ParameterStore& anchor,
                  const ParameterStore& importance, double lambda);
void si_penalty_grad(const ParameterStore& params, const ParameterStore& anchor,
                     const ParameterStore& importance, double lambda, ParameterStore& grads);

// lambda * mean over rows of KL(softmax(teacher/T) || softmax(student/T)).
double lwf_penalty(const DenseArray& student_logits, const DenseArray& teacher_logits,
                   double lambda, double temperature = 1.0);

double lr_decay(double lr_prev, double gamma, double lr_min);

double total_loss(double task_loss, const std::vector<double>& penalties);

// Versioned Fisher artifact; loading verifies the anchor hash.
void save_fisher(const std::string& path, const FisherDiagonal& fisher);
FisherDiagonal load_fisher(const std::string& path, uint64_t expected_anchor_hash);

}  // namespace clt
