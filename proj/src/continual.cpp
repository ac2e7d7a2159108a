#include "clt/continual.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

namespace clt {

TaskSnapshot TaskSnapshot::of(const CausalLM& model, bool keep_teacher) {
    TaskSnapshot s;
    s.anchor = model.params;
    s.anchor_hash = params_hash(model.params);
    if (keep_teacher) s.teacher = std::make_shared<CausalLM>(model);
    return s;
}

void RegularizerSpec::validate() const {
    if (lambda < 0) throw std::invalid_argument("RegularizerSpec: lambda must be >= 0");
    if (si_epsilon <= 0) throw std::invalid_argument("RegularizerSpec: si_epsilon must be > 0");
    if (lwf_temperature <= 0)
        throw std::invalid_argument("RegularizerSpec: lwf_temperature must be > 0");
    if (lr_gamma <= 0 || lr_gamma > 1)
        throw std::invalid_argument("RegularizerSpec: lr_gamma must be in (0,1]");
    if (lr_min < 0) throw std::invalid_argument("RegularizerSpec: lr_min must be >= 0");
}

RegularizerKind regularizer_kind_from(const std::string& name) {
    if (name == "none") return RegularizerKind::None;
    if (name == "ewc") return RegularizerKind::Ewc;
    if (name == "si") return RegularizerKind::Si;
    if (name == "lwf") return RegularizerKind::Lwf;
    throw std::invalid_argument("unknown regularizer kind: " + name);
}

std::string regularizer_kind_name(RegularizerKind k) {
    switch (k) {
        case RegularizerKind::None: return "none";
        case RegularizerKind::Ewc: return "ewc";
        case RegularizerKind::Si: return "si";
        case RegularizerKind::Lwf: return "lwf";
    }
    return "?";
}

SIState SIState::start(const ParameterStore& params, double epsilon) {
    if (epsilon <= 0) throw std::invalid_argument("SIState: epsilon must be > 0");
    SIState s;
    s.numerator = zeros_like(params);
    s.theta0 = params;
    s.epsilon = epsilon;
    return s;
}

std::string mc_prompt(const MCItem& item) {
    std::string p = "Question: " + item.question + "\nChoices:";
    for (size_t i = 0; i < item.choices.size(); ++i) {
        p += " ";
        p += static_cast<char>('A' + i);
        p += ") " + item.choices[i] + ";";
    }
    p += "\nAnswer: ";
    return p;
}

std::pair<TokenSeq, TokenSeq> mc_scored_tokens(const MCItem& item, int choice,
                                               int context_length) {
    if (choice < 0 || choice >= static_cast<int>(item.choices.size()))
        throw std::invalid_argument("mc_scored_tokens: choice out of range");
    TokenSeq ctx = tokenize(mc_prompt(item), /*bos=*/true, /*eos=*/false);
    TokenSeq cont = tokenize(item.choices[static_cast<size_t>(choice)], /*bos=*/false,
                             /*eos=*/true);
    int64_t excess = static_cast<int64_t>(ctx.size() + cont.size()) - context_length;
    if (excess > 0) {
        if (excess >= static_cast<int64_t>(ctx.size()) - 1)
            throw std::invalid_argument("mc_scored_tokens: choice alone exceeds context window");
        // Drop the oldest prompt tokens (after BOS) to fit the window.
        ctx.erase(ctx.begin() + 1, ctx.begin() + 1 + excess);
    }
    return {std::move(ctx), std::move(cont)};
}

FisherDiagonal estimate_fisher(const CausalLM& model, const std::vector<MCItem>& fisher_set) {
    if (fisher_set.empty()) throw std::invalid_argument("estimate_fisher: empty fisher set");

    // Canonical processing order: sort item indices by content so the
    // accumulation order (and hence the bit pattern) is independent of
    // the order of the input list.
    std::vector<size_t> order(fisher_set.size());
    std::iota(order.begin(), order.end(), 0);
    auto key = [&](size_t i) {
        const MCItem& it = fisher_set[i];
        std::string k = it.question + "\x1f" + std::to_string(it.gold_index);
        for (const auto& c : it.choices) k += "\x1f" + c;
        return k;
    };
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return key(a) < key(b); });

    FisherDiagonal fisher;
    fisher.values = zeros_like(model.params);
    fisher.template_id = kMcTemplateId;
    fisher.anchor_hash = params_hash(model.params);
    fisher.n_examples = static_cast<int64_t>(fisher_set.size());

    for (size_t idx : order) {
        const MCItem& item = fisher_set[idx];
        auto [ctx, cont] = mc_scored_tokens(item, item.gold_index, model.config.context_length);
        Tape tape;
        BoundParams bound = bind_params(tape, model.params);
        Tape::NodeId lp = sequence_logprob_graph(tape, model, bound, ctx, cont);
        try {
            tape.backward(lp);
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("estimate_fisher: item " + std::to_string(idx) + ": " +
                                     e.what());
        }
        for (size_t p = 0; p < fisher.values.size(); ++p) {
            const DenseArray& g = tape.grad(bound.leaves[p]);
            if (!all_finite(g))
                throw std::runtime_error("estimate_fisher: non-finite gradient at item " +
                                         std::to_string(idx));
            DenseArray& f = fisher.values.entry(p).second;
            for (int64_t i = 0; i < g.numel(); ++i) f.at(i) += g.at(i) * g.at(i);
        }
    }
    double inv = 1.0 / static_cast<double>(fisher.n_examples);
    for (size_t p = 0; p < fisher.values.size(); ++p)
        for (double& v : fisher.values.entry(p).second.data) v *= inv;
    return fisher;
}

namespace {

void require_aligned(const ParameterStore& a, const ParameterStore& b, const char* what) {
    if (!a.aligned_with(b)) throw std::invalid_argument(std::string(what) + ": stores misaligned");
}

}  // namespace

double ewc_penalty(const ParameterStore& params, const TaskSnapshot& snapshot,
                   const FisherDiagonal& fisher, double lambda) {
    require_aligned(params, snapshot.anchor, "ewc_penalty");
    require_aligned(params, fisher.values, "ewc_penalty");
    if (lambda == 0.0) return 0.0;
    double acc = 0.0;
    for (size_t p = 0; p < params.size(); ++p) {
        const DenseArray& th = params.entry(p).second;
        const DenseArray& an = snapshot.anchor.entry(p).second;
        const DenseArray& f = fisher.values.entry(p).second;
        for (int64_t i = 0; i < th.numel(); ++i) {
            double d = th.at(i) - an.at(i);
            acc += f.at(i) * d * d;
        }
    }
    return 0.5 * lambda * acc;
}

void ewc_penalty_grad(const ParameterStore& params, const TaskSnapshot& snapshot,
                      const FisherDiagonal& fisher, double lambda, ParameterStore& grads) {
    require_aligned(params, snapshot.anchor, "ewc_penalty_grad");
    require_aligned(params, fisher.values, "ewc_penalty_grad");
    require_aligned(params, grads, "ewc_penalty_grad");
    if (lambda == 0.0) return;
    for (size_t p = 0; p < params.size(); ++p) {
        const DenseArray& th = params.entry(p).second;
        const DenseArray& an = snapshot.anchor.entry(p).second;
        const DenseArray& f = fisher.values.entry(p).second;
        DenseArray& g = grads.entry(p).second;
        for (int64_t i = 0; i < th.numel(); ++i)
            g.at(i) += lambda * f.at(i) * (th.at(i) - an.at(i));
    }
}

void si_accumulate(SIState& state, const ParameterStore& delta, const ParameterStore& grad) {
    require_aligned(state.numerator, delta, "si_accumulate");
    require_aligned(state.numerator, grad, "si_accumulate");
    for (size_t p = 0; p < state.numerator.size(); ++p) {
        DenseArray& num = state.numerator.entry(p).second;
        const DenseArray& d = delta.entry(p).second;
        const DenseArray& g = grad.entry(p).second;
        for (int64_t i = 0; i < num.numel(); ++i) num.at(i) += d.at(i) * (-g.at(i));
    }
}

ParameterStore si_consolidate(const SIState& state, const ParameterStore& theta_end) {
    require_aligned(state.numerator, theta_end, "si_consolidate");
    ParameterStore importance = zeros_like(theta_end);
    for (size_t p = 0; p < theta_end.size(); ++p) {
        const DenseArray& num = state.numerator.entry(p).second;
        const DenseArray& t0 = state.theta0.entry(p).second;
        const DenseArray& te = theta_end.entry(p).second;
        DenseArray& s = importance.entry(p).second;
        for (int64_t i = 0; i < num.numel(); ++i) {
            double d = te.at(i) - t0.at(i);
            s.at(i) = std::max(0.0, num.at(i) / (d * d + state.epsilon));
        }
    }
    return importance;
}

double si_penalty(const ParameterStore& params, const ParameterStore& anchor,
                  const ParameterStore& importance, double lambda) {
    require_aligned(params, anchor, "si_penalty");
    require_aligned(params, importance, "si_penalty");
    if (lambda == 0.0) return 0.0;
    double acc = 0.0;
    for (size_t p = 0; p < params.size(); ++p) {
        const DenseArray& th = params.entry(p).second;
        const DenseArray& an = anchor.entry(p).second;
        const DenseArray& s = importance.entry(p).second;
        for (int64_t i = 0; i < th.numel(); ++i) {
            double d = th.at(i) - an.at(i);
            acc += s.at(i) * d * d;
        }
    }
    return lambda * acc;
}

void si_penalty_grad(const ParameterStore& params, const ParameterStore& anchor,
                     const ParameterStore& importance, double lambda, ParameterStore& grads) {
    require_aligned(params, anchor, "si_penalty_grad");
    require_aligned(params, importance, "si_penalty_grad");
    require_aligned(params, grads, "si_penalty_grad");
    if (lambda == 0.0) return;
    for (size_t p = 0; p < params.size(); ++p) {
        const DenseArray& th = params.entry(p).second;
        const DenseArray& an = anchor.entry(p).second;
        const DenseArray& s = importance.entry(p).second;
        DenseArray& g = grads.entry(p).second;
        for (int64_t i = 0; i < th.numel(); ++i)
            g.at(i) += 2.0 * lambda * s.at(i) * (th.at(i) - an.at(i));
    }
}

double lwf_penalty(const DenseArray& student_logits, const DenseArray& teacher_logits,
                   double lambda, double temperature) {
    if (!student_logits.same_shape(teacher_logits))
        throw std::invalid_argument("lwf_penalty: logit shape mismatch");
    if (temperature <= 0) throw std::invalid_argument("lwf_penalty: temperature must be > 0");
    int64_t rows = student_logits.rows(), cols = student_logits.cols();
    double kl = 0.0;
    std::vector<double> tz(static_cast<size_t>(cols)), sz(static_cast<size_t>(cols));
    for (int64_t r = 0; r < rows; ++r) {
        double tmax = -1e300, smax = -1e300;
        for (int64_t c = 0; c < cols; ++c) {
            tz[static_cast<size_t>(c)] = teacher_logits.at2(r, c) / temperature;
            sz[static_cast<size_t>(c)] = student_logits.at2(r, c) / temperature;
            tmax = std::max(tmax, tz[static_cast<size_t>(c)]);
            smax = std::max(smax, sz[static_cast<size_t>(c)]);
        }
        double tsum = 0.0, ssum = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            tsum += std::exp(tz[static_cast<size_t>(c)] - tmax);
            ssum += std::exp(sz[static_cast<size_t>(c)] - smax);
        }
        double tlse = tmax + std::log(tsum), slse = smax + std::log(ssum);
        for (int64_t c = 0; c < cols; ++c) {
            double logp = tz[static_cast<size_t>(c)] - tlse;
            double logq = sz[static_cast<size_t>(c)] - slse;
            kl += std::exp(logp) * (logp - logq);
        }
    }
    // Clamp a possible rounding residue at coinciding distributions.
    return lambda * std::max(0.0, kl) / static_cast<double>(rows);
}

double lr_decay(double lr_prev, double gamma, double lr_min) {
    if (gamma <= 0 || gamma > 1) throw std::invalid_argument("lr_decay: gamma must be in (0,1]");
    if (lr_min < 0) throw std::invalid_argument("lr_decay: lr_min must be >= 0");
    return std::max(lr_min, lr_prev * gamma);
}

double total_loss(double task_loss, const std::vector<double>& penalties) {
    double acc = task_loss;
    for (double p : penalties) acc += p;
    return acc;
}

// ---------------------------------------------------------------------
// Fisher artifact I/O

namespace {
constexpr char kFisherMagic[8] = {'C', 'L', 'T', 'F', 'I', 'S', 'H', '\x01'};
}

void save_fisher(const std::string& path, const FisherDiagonal& fisher) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("save_fisher: cannot open " + tmp);
        os.write(kFisherMagic, 8);
        os.write(reinterpret_cast<const char*>(&fisher.anchor_hash), 8);
        os.write(reinterpret_cast<const char*>(&fisher.n_examples), 8);
        uint64_t tlen = fisher.template_id.size();
        os.write(reinterpret_cast<const char*>(&tlen), 8);
        os.write(fisher.template_id.data(), static_cast<std::streamsize>(tlen));
        uint64_t n = fisher.values.size();
        os.write(reinterpret_cast<const char*>(&n), 8);
        for (size_t p = 0; p < fisher.values.size(); ++p) {
            const auto& [name, arr] = fisher.values.entry(p);
            uint64_t nlen = name.size();
            os.write(reinterpret_cast<const char*>(&nlen), 8);
            os.write(name.data(), static_cast<std::streamsize>(nlen));
            uint64_t rank = arr.shape.size();
            os.write(reinterpret_cast<const char*>(&rank), 8);
            for (int64_t e : arr.shape) os.write(reinterpret_cast<const char*>(&e), 8);
            os.write(reinterpret_cast<const char*>(arr.data.data()),
                     static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
        }
        if (!os) throw std::runtime_error("save_fisher: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("save_fisher: rename failed for " + path);
}

FisherDiagonal load_fisher(const std::string& path, uint64_t expected_anchor_hash) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_fisher: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kFisherMagic, 8) != 0)
        throw std::runtime_error("load_fisher: bad magic in " + path);
    FisherDiagonal f;
    is.read(reinterpret_cast<char*>(&f.anchor_hash), 8);
    is.read(reinterpret_cast<char*>(&f.n_examples), 8);
    uint64_t tlen;
    is.read(reinterpret_cast<char*>(&tlen), 8);
    f.template_id.resize(tlen);
    is.read(f.template_id.data(), static_cast<std::streamsize>(tlen));
    uint64_t n;
    is.read(reinterpret_cast<char*>(&n), 8);
    for (uint64_t p = 0; p < n; ++p) {
        uint64_t nlen;
        is.read(reinterpret_cast<char*>(&nlen), 8);
        std::string name(nlen, '\0');
        is.read(name.data(), static_cast<std::streamsize>(nlen));
        uint64_t rank;
        is.read(reinterpret_cast<char*>(&rank), 8);
        std::vector<int64_t> shape(rank);
        for (uint64_t r = 0; r < rank; ++r) is.read(reinterpret_cast<char*>(&shape[r]), 8);
        DenseArray arr(shape);
        is.read(reinterpret_cast<char*>(arr.data.data()),
                static_cast<std::streamsize>(arr.data.size() * sizeof(double)));
        f.values.add(name, std::move(arr));
    }
    if (!is) throw std::runtime_error("load_fisher: truncated file " + path);
    if (expected_anchor_hash != 0 && f.anchor_hash != expected_anchor_hash)
        throw std::runtime_error("load_fisher: anchor hash mismatch for " + path);
    return f;
}

}  // namespace clt
