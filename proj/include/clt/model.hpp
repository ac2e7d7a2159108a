#pragma once

#include "clt/tape.hpp"
#include "clt/tensor.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace clt {

// Byte-level vocabulary: 256 raw bytes plus BOS/EOS/PAD.
constexpr int32_t kBos = 256;
constexpr int32_t kEos = 257;
constexpr int32_t kPad = 258;
constexpr int32_t kVocabSize = 259;

struct ModelConfig {
    int n_layers = 2;
    int d_model = 128;
    int n_heads = 4;
    int context_length = 256;
    int vocab_size = kVocabSize;
    uint64_t seed = 0;

    void validate() const;
};

using TokenSeq = std::vector<int32_t>;

// Compact pre-norm decoder-only transformer with learned positional
// embeddings and an untied output head.
struct CausalLM {
    ModelConfig config;
    ParameterStore params;

    static CausalLM init(const ModelConfig& cfg);
};

// Handles to the tape leaves of one bound parameter set, in store order.
struct BoundParams {
    std::vector<Tape::NodeId> leaves;  // aligned with ParameterStore entries
    std::unordered_map<std::string, Tape::NodeId> by_name;
};

BoundParams bind_params(Tape& tape, const ParameterStore& params);

// Builds the full forward graph for one token sequence; returns the
// (len, vocab) logits node.
Tape::NodeId logits_graph(Tape& tape, const CausalLM& model, const BoundParams& bound,
                          const TokenSeq& tokens);

// Forward-only logits, shape (len(tokens), vocab_size).
DenseArray forward_logits(const CausalLM& model, const TokenSeq& tokens);

// Mean masked next-token NLL over the batch as a differentiable graph.
Tape::NodeId batch_loss_graph(Tape& tape, const CausalLM& model, const BoundParams& bound,
                              const std::vector<TokenSeq>& batch);

// Mean cross-entropy in nats/token over non-PAD targets of the batch.
double next_token_loss(const CausalLM& model, const std::vector<TokenSeq>& batch);

// log p(continuation | context), summed over continuation tokens.
double sequence_logprob(const CausalLM& model, const TokenSeq& context,
                        const TokenSeq& continuation);

// Graph-building variant used where gradients of the log-likelihood are
// needed; returns the scalar log-prob node.
Tape::NodeId sequence_logprob_graph(Tape& tape, const CausalLM& model, const BoundParams& bound,
                                    const TokenSeq& context, const TokenSeq& continuation);

// Greedy decoding; stops at EOS or when the context window fills. Ties
// break toward the lowest token id.
TokenSeq generate(const CausalLM& model, const TokenSeq& prompt, int max_new);

// After backward(), sums leaf gradients into an aligned store.
ParameterStore collect_grads(const Tape& tape, const BoundParams& bound,
                             const ParameterStore& params);

ParameterStore zeros_like(const ParameterStore& params);

// Checkpoint container: config, parameters, optimizer moments (optional),
// step counter and RNG state. Write is write-then-rename.
struct Checkpoint {
    ModelConfig config;
    ParameterStore params;
    ParameterStore adam_m, adam_v;  // empty when not training
    int64_t step = 0;
    std::string rng_state;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// FNV-1a over the parameter bytes; anchors Fisher artifacts.
uint64_t params_hash(const ParameterStore& params);

}  // namespace clt
