#pragma once

#include "clt/data.hpp"
#include "clt/model.hpp"

#include <string>
#include <vector>

namespace clt {

struct EvalRecord {
    std::string metric;   // ppl | mc_acc | judge_ppl
    std::string dataset;
    std::string tag;      // task/language tag
    double lambda = 0.0;
    std::string checkpoint;
    double value = 0.0;
    int64_t n_items = 0;
};

void append_records(const std::string& path, const std::vector<EvalRecord>& records);
std::vector<EvalRecord> load_records(const std::string& path);

// Mean over texts of exp(mean next-token NLL in nats) of the
// BOS-prefixed text, chunked at context_length without overlap.
double text_perplexity(const CausalLM& model, const std::vector<std::string>& texts);

std::string qa_to_text(const QAPair& pair);

enum class QaPplMode { Joint, AnswerOnly };

double qa_perplexity(const CausalLM& model, const std::vector<QAPair>& pairs,
                     QaPplMode mode = QaPplMode::Joint);

enum class McNorm { None, PerToken };

// Per-item choice predictions under the documented tie rule (lowest
// index wins among equal scores).
std::vector<int> mc_predictions(const CausalLM& model, const std::vector<MCItem>& items,
                                McNorm norm = McNorm::PerToken);
double mc_accuracy(const CausalLM& model, const std::vector<MCItem>& items,
                   McNorm norm = McNorm::PerToken);

struct JudgeResult {
    double value = 0.0;   // mean per-token perplexity of scored answers
    int64_t n_scored = 0;
    int64_t n_empty = 0;  // immediate-EOS generations, excluded from the mean
};

// Subject answers each question greedily; the judge scores the answer's
// per-token perplexity given the question as context.
JudgeResult judge_perplexity(const CausalLM& subject, const CausalLM& judge,
                             const std::vector<std::string>& questions, int max_new);

}  // namespace clt
