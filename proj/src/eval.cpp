#include "clt/eval.hpp"

#include "clt/continual.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

using nlohmann::json;

namespace clt {

void append_records(const std::string& path, const std::vector<EvalRecord>& records) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw std::runtime_error("append_records: cannot open " + path);
    for (const EvalRecord& r : records) {
        json j{{"metric", r.metric},       {"dataset", r.dataset}, {"tag", r.tag},
               {"lambda", r.lambda},       {"checkpoint", r.checkpoint},
               {"value", r.value},         {"n_items", r.n_items}};
        os << j.dump() << "\n";
    }
}

std::vector<EvalRecord> load_records(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_records: cannot open " + path);
    std::vector<EvalRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        EvalRecord r;
        r.metric = j.at("metric").get<std::string>();
        r.dataset = j.at("dataset").get<std::string>();
        r.tag = j.at("tag").get<std::string>();
        r.lambda = j.at("lambda").get<double>();
        r.checkpoint = j.at("checkpoint").get<std::string>();
        r.value = j.at("value").get<double>();
        r.n_items = j.at("n_items").get<int64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

namespace {

// Sum of next-token NLL and prediction count for one token window.
std::pair<double, int64_t> window_nll(const CausalLM& model, const TokenSeq& window) {
    if (window.size() < 2) return {0.0, 0};
    DenseArray logits = forward_logits(model, window);
    int64_t V = logits.cols();
    double nll = 0.0;
    for (size_t t = 0; t + 1 < window.size(); ++t) {
        const double* z = logits.data.data() + static_cast<int64_t>(t) * V;
        double mx = z[0];
        for (int64_t c = 1; c < V; ++c) mx = std::max(mx, z[c]);
        double sum = 0.0;
        for (int64_t c = 0; c < V; ++c) sum += std::exp(z[c] - mx);
        nll += mx + std::log(sum) - z[window[t + 1]];
    }
    return {nll, static_cast<int64_t>(window.size()) - 1};
}

}  // namespace

double text_perplexity(const CausalLM& model, const std::vector<std::string>& texts) {
    if (texts.empty()) throw std::invalid_argument("text_perplexity: empty text list");
    size_t L = static_cast<size_t>(model.config.context_length);
    double ppl_sum = 0.0;
    for (const std::string& text : texts) {
        if (text.empty()) throw std::invalid_argument("text_perplexity: empty text");
        TokenSeq toks = tokenize(text, /*bos=*/true, /*eos=*/false);
        double nll = 0.0;
        int64_t count = 0;
        for (size_t off = 0; off < toks.size(); off += L) {
            TokenSeq window(toks.begin() + static_cast<ptrdiff_t>(off),
                            toks.begin() + static_cast<ptrdiff_t>(std::min(off + L, toks.size())));
            auto [wn, wc] = window_nll(model, window);
            nll += wn;
            count += wc;
        }
        ppl_sum += std::exp(nll / static_cast<double>(count));
    }
    return ppl_sum / static_cast<double>(texts.size());
}

std::string qa_to_text(const QAPair& pair) { return pair.question + "\n" + pair.answer; }

double qa_perplexity(const CausalLM& model, const std::vector<QAPair>& pairs, QaPplMode mode) {
    if (pairs.empty()) throw std::invalid_argument("qa_perplexity: empty pair list");
    if (mode == QaPplMode::Joint) {
        std::vector<std::string> texts;
        texts.reserve(pairs.size());
        for (const QAPair& p : pairs) texts.push_back(qa_to_text(p));
        return text_perplexity(model, texts);
    }
    // Answer conditioned on question; overlong questions are trimmed
    // from the left so the answer always fits the window.
    double ppl_sum = 0.0;
    for (const QAPair& p : pairs) {
        TokenSeq ctx = tokenize(p.question + "\n", /*bos=*/true, /*eos=*/false);
        TokenSeq cont = tokenize(p.answer, /*bos=*/false, /*eos=*/false);
        int64_t excess =
            static_cast<int64_t>(ctx.size() + cont.size()) - model.config.context_length;
        if (excess > 0) {
            if (excess >= static_cast<int64_t>(ctx.size()) - 1)
                throw std::invalid_argument("qa_perplexity: answer alone exceeds context window");
            ctx.erase(ctx.begin() + 1, ctx.begin() + 1 + excess);
        }
        double lp = sequence_logprob(model, ctx, cont);
        ppl_sum += std::exp(-lp / static_cast<double>(cont.size()));
    }
    return ppl_sum / static_cast<double>(pairs.size());
}

std::vector<int> mc_predictions(const CausalLM& model, const std::vector<MCItem>& items,
                                McNorm norm) {
    if (items.empty()) throw std::invalid_argument("mc_predictions: empty item list");
    std::vector<int> preds;
    preds.reserve(items.size());
    for (const MCItem& item : items) {
        int best = 0;
        double best_score = -1e300;
        for (int c = 0; c < static_cast<int>(item.choices.size()); ++c) {
            auto [ctx, cont] = mc_scored_tokens(item, c, model.config.context_length);
            double score = sequence_logprob(model, ctx, cont);
            if (norm == McNorm::PerToken) score /= static_cast<double>(cont.size());
            if (score > best_score) {  // ties keep the lowest index
                best_score = score;
                best = c;
            }
        }
        preds.push_back(best);
    }
    return preds;
}

double mc_accuracy(const CausalLM& model, const std::vector<MCItem>& items, McNorm norm) {
    std::vector<int> preds = mc_predictions(model, items, norm);
    int64_t correct = 0;
    for (size_t i = 0; i < items.size(); ++i) correct += (preds[i] == items[i].gold_index);
    return static_cast<double>(correct) / static_cast<double>(items.size());
}

JudgeResult judge_perplexity(const CausalLM& subject, const CausalLM& judge,
                             const std::vector<std::string>& questions, int max_new) {
    if (max_new < 1) throw std::invalid_argument("judge_perplexity: max_new must be >= 1");
    if (questions.empty()) throw std::invalid_argument("judge_perplexity: empty question list");
    JudgeResult res;
    double ppl_sum = 0.0;
    for (const std::string& q : questions) {
        TokenSeq prompt = tokenize(q + "\n", /*bos=*/true, /*eos=*/false);
        TokenSeq full = generate(subject, prompt, max_new);
        TokenSeq answer(full.begin() + static_cast<ptrdiff_t>(prompt.size()), full.end());
        while (!answer.empty() && answer.back() == kEos) answer.pop_back();
        if (answer.empty()) {
            res.n_empty += 1;
            continue;
        }
        double lp = sequence_logprob(judge, prompt, answer);
        ppl_sum += std::exp(-lp / static_cast<double>(answer.size()));
        res.n_scored += 1;
    }
    if (res.n_scored == 0)
        throw std::runtime_error("judge_perplexity: all generations were empty");
    res.value = ppl_sum / static_cast<double>(res.n_scored);
    return res;
}

}  // namespace clt
