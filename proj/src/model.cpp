#include "clt/model.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

namespace clt {

void ModelConfig::validate() const {
    if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0)
        throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
    if (context_length < 2) throw std::invalid_argument("ModelConfig: context_length must be >= 2");
    if (vocab_size != kVocabSize) throw std::invalid_argument("ModelConfig: vocab_size is fixed at 259");
}

CausalLM CausalLM::init(const ModelConfig& cfg) {
    cfg.validate();
    CausalLM m;
    m.config = cfg;
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> dist(0.0, 0.02);
    double resid_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);

    auto randn = [&](std::vector<int64_t> shape, double sc) {
        DenseArray a(std::move(shape));
        for (double& v : a.data) v = dist(rng) * sc;
        return a;
    };
    auto fill = [&](std::vector<int64_t> shape, double v) {
        DenseArray a(std::move(shape));
        for (double& x : a.data) x = v;
        return a;
    };

    int64_t d = cfg.d_model, V = cfg.vocab_size, h = 4 * d;
    m.params.add("tok_emb", randn({V, d}, 1.0));
    m.params.add("pos_emb", randn({cfg.context_length, d}, 1.0));
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string p = "layers." + std::to_string(l) + ".";
        m.params.add(p + "ln1.g", fill({d}, 1.0));
        m.params.add(p + "ln1.b", fill({d}, 0.0));
        m.params.add(p + "attn.wq", randn({d, d}, 1.0));
        m.params.add(p + "attn.wk", randn({d, d}, 1.0));
        m.params.add(p + "attn.wv", randn({d, d}, 1.0));
        m.params.add(p + "attn.wo", randn({d, d}, resid_scale));
        m.params.add(p + "attn.bq", fill({d}, 0.0));
        m.params.add(p + "attn.bk", fill({d}, 0.0));
        m.params.add(p + "attn.bv", fill({d}, 0.0));
        m.params.add(p + "attn.bo", fill({d}, 0.0));
        m.params.add(p + "ln2.g", fill({d}, 1.0));
        m.params.add(p + "ln2.b", fill({d}, 0.0));
        m.params.add(p + "mlp.w1", randn({d, h}, 1.0));
        m.params.add(p + "mlp.b1", fill({h}, 0.0));
        m.params.add(p + "mlp.w2", randn({h, d}, resid_scale));
        m.params.add(p + "mlp.b2", fill({d}, 0.0));
    }
    m.params.add("ln_f.g", fill({d}, 1.0));
    m.params.add("ln_f.b", fill({d}, 0.0));
    m.params.add("head", randn({d, V}, 1.0));
    return m;
}

BoundParams bind_params(Tape& tape, const ParameterStore& params) {
    BoundParams b;
    b.leaves.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        Tape::NodeId id = tape.leaf(params.entry(i).second);
        b.leaves.push_back(id);
        b.by_name[params.entry(i).first] = id;
    }
    return b;
}

Tape::NodeId logits_graph(Tape& tape, const CausalLM& model, const BoundParams& bound,
                          const TokenSeq& tokens) {
    const ModelConfig& cfg = model.config;
    if (tokens.empty()) throw std::invalid_argument("logits_graph: empty token sequence");
    if (static_cast<int>(tokens.size()) > cfg.context_length)
        throw std::invalid_argument("logits_graph: input exceeds context_length; caller must chunk");
    for (int32_t t : tokens)
        if (t < 0 || t >= cfg.vocab_size)
            throw std::invalid_argument("logits_graph: token id out of range");

    auto P = [&](const std::string& name) { return bound.by_name.at(name); };

    std::vector<int32_t> pos_ids(tokens.size());
    for (size_t i = 0; i < tokens.size(); ++i) pos_ids[i] = static_cast<int32_t>(i);

    Tape::NodeId x = tape.add(tape.embed(P("tok_emb"), tokens), tape.embed(P("pos_emb"), pos_ids));
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string p = "layers." + std::to_string(l) + ".";
        Tape::NodeId h = tape.layer_norm(x, P(p + "ln1.g"), P(p + "ln1.b"));
        Tape::NodeId q = tape.add_row(tape.matmul(h, P(p + "attn.wq")), P(p + "attn.bq"));
        Tape::NodeId k = tape.add_row(tape.matmul(h, P(p + "attn.wk")), P(p + "attn.bk"));
        Tape::NodeId v = tape.add_row(tape.matmul(h, P(p + "attn.wv")), P(p + "attn.bv"));
        Tape::NodeId a = tape.attention(q, k, v, cfg.n_heads);
        Tape::NodeId proj = tape.add_row(tape.matmul(a, P(p + "attn.wo")), P(p + "attn.bo"));
        x = tape.add(x, proj);
        Tape::NodeId h2 = tape.layer_norm(x, P(p + "ln2.g"), P(p + "ln2.b"));
        Tape::NodeId m1 = tape.gelu(tape.add_row(tape.matmul(h2, P(p + "mlp.w1")), P(p + "mlp.b1")));
        Tape::NodeId m2 = tape.add_row(tape.matmul(m1, P(p + "mlp.w2")), P(p + "mlp.b2"));
        x = tape.add(x, m2);
    }
    Tape::NodeId xf = tape.layer_norm(x, P("ln_f.g"), P("ln_f.b"));
    return tape.matmul(xf, P("head"));
}

DenseArray forward_logits(const CausalLM& model, const TokenSeq& tokens) {
    Tape tape;
    BoundParams bound = bind_params(tape, model.params);
    Tape::NodeId logits = logits_graph(tape, model, bound, tokens);
    return tape.value(logits);
}

Tape::NodeId batch_loss_graph(Tape& tape, const CausalLM& model, const BoundParams& bound,
                              const std::vector<TokenSeq>& batch) {
    if (batch.empty()) throw std::invalid_argument("batch_loss_graph: empty batch");
    Tape::NodeId total = -1;
    int total_targets = 0;
    for (const TokenSeq& seq : batch) {
        if (seq.size() < 2) throw std::invalid_argument("batch_loss_graph: sequence shorter than 2");
        std::vector<int32_t> targets(seq.size(), -1);
        for (size_t i = 0; i + 1 < seq.size(); ++i)
            if (seq[i + 1] != kPad) targets[i] = seq[i + 1];
        int n = Tape::target_count(targets);
        total_targets += n;
        if (n == 0) continue;
        Tape::NodeId logits = logits_graph(tape, model, bound, seq);
        Tape::NodeId nll = tape.softmax_ce(logits, targets);
        total = (total < 0) ? nll : tape.add(total, nll);
    }
    if (total_targets == 0)
        throw std::invalid_argument("batch_loss_graph: batch has no non-PAD targets");
    return tape.scale(total, 1.0 / total_targets);
}

double next_token_loss(const CausalLM& model, const std::vector<TokenSeq>& batch) {
    Tape tape;
    BoundParams bound = bind_params(tape, model.params);
    return tape.scalar(batch_loss_graph(tape, model, bound, batch));
}

Tape::NodeId sequence_logprob_graph(Tape& tape, const CausalLM& model, const BoundParams& bound,
                                    const TokenSeq& context, const TokenSeq& continuation) {
    if (continuation.empty())
        throw std::invalid_argument("sequence_logprob: empty continuation");
    TokenSeq all = context;
    all.insert(all.end(), continuation.begin(), continuation.end());
    if (static_cast<int>(all.size()) > model.config.context_length)
        throw std::invalid_argument("sequence_logprob: context+continuation exceeds context_length");
    Tape::NodeId logits = logits_graph(tape, model, bound, all);
    // Position t predicts token t+1; the first continuation token is
    // predicted from the last context position.
    std::vector<std::pair<int32_t, int32_t>> picks;
    picks.reserve(continuation.size());
    for (size_t i = 0; i < continuation.size(); ++i) {
        int32_t pos = static_cast<int32_t>(context.size() + i) - 1;
        if (pos < 0)
            throw std::invalid_argument("sequence_logprob: empty context cannot score first token");
        picks.emplace_back(pos, continuation[i]);
    }
    return tape.gather_logprob(logits, picks);
}

double sequence_logprob(const CausalLM& model, const TokenSeq& context,
                        const TokenSeq& continuation) {
    Tape tape;
    BoundParams bound = bind_params(tape, model.params);
    return tape.scalar(sequence_logprob_graph(tape, model, bound, context, continuation));
}

TokenSeq generate(const CausalLM& model, const TokenSeq& prompt, int max_new) {
    if (max_new < 1) throw std::invalid_argument("generate: max_new must be >= 1");
    TokenSeq out = prompt;
    for (int i = 0; i < max_new; ++i) {
        if (static_cast<int>(out.size()) >= model.config.context_length) break;
        DenseArray logits = forward_logits(model, out);
        int64_t last = logits.rows() - 1;
        int32_t best = 0;
        double best_v = logits.at2(last, 0);
        for (int32_t c = 1; c < model.config.vocab_size; ++c)
            if (logits.at2(last, c) > best_v) {
                best_v = logits.at2(last, c);
                best = c;
            }
        out.push_back(best);
        if (best == kEos) break;
    }
    return out;
}

ParameterStore collect_grads(const Tape& tape, const BoundParams& bound,
                             const ParameterStore& params) {
    ParameterStore g;
    for (size_t i = 0; i < params.size(); ++i)
        g.add(params.entry(i).first, tape.grad(bound.leaves[i]));
    return g;
}

ParameterStore zeros_like(const ParameterStore& params) {
    ParameterStore g;
    for (size_t i = 0; i < params.size(); ++i)
        g.add(params.entry(i).first, DenseArray(params.entry(i).second.shape));
    return g;
}

// ---------------------------------------------------------------------
// Checkpoint I/O

namespace {

constexpr char kCkptMagic[8] = {'C', 'L', 'T', 'C', 'K', 'P', 'T', '\x01'};

void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void write_i64(std::ostream& os, int64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
uint64_t read_u64(std::istream& is) {
    uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
int64_t read_i64(std::istream& is) {
    int64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
void write_string(std::ostream& os, const std::string& s) {
    write_u64(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string read_string(std::istream& is) {
    uint64_t n = read_u64(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    return s;
}
void write_array(std::ostream& os, const DenseArray& a) {
    write_u64(os, a.shape.size());
    for (int64_t e : a.shape) write_i64(os, e);
    os.write(reinterpret_cast<const char*>(a.data.data()),
             static_cast<std::streamsize>(a.data.size() * sizeof(double)));
}
DenseArray read_array(std::istream& is) {
    uint64_t rank = read_u64(is);
    std::vector<int64_t> shape(rank);
    for (uint64_t i = 0; i < rank; ++i) shape[i] = read_i64(is);
    DenseArray a(shape);
    is.read(reinterpret_cast<char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * sizeof(double)));
    return a;
}
void write_store(std::ostream& os, const ParameterStore& s) {
    write_u64(os, s.size());
    for (size_t i = 0; i < s.size(); ++i) {
        write_string(os, s.entry(i).first);
        write_array(os, s.entry(i).second);
    }
}
ParameterStore read_store(std::istream& is) {
    uint64_t n = read_u64(is);
    ParameterStore s;
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = read_string(is);
        s.add(name, read_array(is));
    }
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("save_checkpoint: cannot open " + tmp);
        os.write(kCkptMagic, 8);
        const ModelConfig& c = ckpt.config;
        write_i64(os, c.n_layers);
        write_i64(os, c.d_model);
        write_i64(os, c.n_heads);
        write_i64(os, c.context_length);
        write_i64(os, c.vocab_size);
        write_u64(os, c.seed);
        write_store(os, ckpt.params);
        write_store(os, ckpt.adam_m);
        write_store(os, ckpt.adam_v);
        write_i64(os, ckpt.step);
        write_string(os, ckpt.rng_state);
        if (!os) throw std::runtime_error("save_checkpoint: write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("save_checkpoint: rename failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    Checkpoint ckpt;
    ckpt.config.n_layers = static_cast<int>(read_i64(is));
    ckpt.config.d_model = static_cast<int>(read_i64(is));
    ckpt.config.n_heads = static_cast<int>(read_i64(is));
    ckpt.config.context_length = static_cast<int>(read_i64(is));
    ckpt.config.vocab_size = static_cast<int>(read_i64(is));
    ckpt.config.seed = read_u64(is);
    ckpt.params = read_store(is);
    ckpt.adam_m = read_store(is);
    ckpt.adam_v = read_store(is);
    ckpt.step = read_i64(is);
    ckpt.rng_state = read_string(is);
    if (!is) throw std::runtime_error("load_checkpoint: truncated file " + path);
    return ckpt;
}

uint64_t params_hash(const ParameterStore& params) {
    uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* p, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& [name, arr] = params.entry(i);
        mix(name.data(), name.size());
        mix(arr.data.data(), arr.data.size() * sizeof(double));
    }
    return h;
}

}  // namespace clt
