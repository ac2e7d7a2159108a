#pragma once

#include "clt/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace clt {

// Reverse-mode tape over DenseArray values. Nodes are appended in
// topological order during the forward pass; backward() walks them once
// in reverse. One tape serves one forward/backward pair and is then
// discarded or reset.
class Tape {
  public:
    using NodeId = int32_t;

    enum class Op : uint8_t {
        Leaf,       // trainable leaf (gradient collected)
        Const,      // constant leaf (no gradient)
        Add,
        Sub,
        Mul,        // elementwise
        Scale,      // alpha * x
        Sum,        // reduce-all to scalar
        MatMul,     // (m,k)x(k,n)
        AddRow,     // (m,n) + row(n) broadcast
        Embed,      // gather rows of (V,d) by token ids
        LayerNorm,  // per-row, with gain/bias leaves
        Gelu,
        Attention,  // fused multi-head causal self-attention
        SoftmaxCE,  // sum of masked next-token NLL -> scalar
        GatherLP,   // sum of log-softmax at (pos,id) picks -> scalar
        KLTeacher,  // mean KL(teacher || student) over rows -> scalar
    };

    struct Node {
        Op op;
        NodeId in0 = -1, in1 = -1, in2 = -1;
        DenseArray value;
        DenseArray grad;          // allocated lazily in backward
        double alpha = 0.0;       // Scale factor / KL temperature
        int aux_i = 0;            // Attention: n_heads
        std::vector<int32_t> ids; // Embed tokens; SoftmaxCE targets (-1 masked);
                                  // GatherLP interleaved (pos,id)
        DenseArray cache;         // op-specific forward cache
        DenseArray cache2;
    };

    NodeId leaf(const DenseArray& v);
    NodeId constant(const DenseArray& v);
    NodeId constant_scalar(double v);

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId scale(NodeId a, double alpha);
    NodeId sum(NodeId a);
    NodeId matmul(NodeId a, NodeId b);
    NodeId add_row(NodeId a, NodeId row);
    NodeId embed(NodeId table, const std::vector<int32_t>& ids);
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias);
    NodeId gelu(NodeId x);
    NodeId attention(NodeId q, NodeId k, NodeId v, int n_heads);
    // targets[t] is the id predicted at position t, -1 = ignored.
    // Value is the SUM of NLL over unmasked positions (see target_count).
    NodeId softmax_ce(NodeId logits, const std::vector<int32_t>& targets);
    NodeId gather_logprob(NodeId logits, const std::vector<std::pair<int32_t, int32_t>>& picks);
    // teacher_probs: constant (rows,V) distribution; temperature applied
    // to the student logits before softmax.
    NodeId kl_from_teacher(NodeId student_logits, const DenseArray& teacher_probs,
                           double temperature);

    const DenseArray& value(NodeId id) const { return nodes_[id].value; }
    const DenseArray& grad(NodeId id) const { return nodes_[id].grad; }
    double scalar(NodeId id) const;

    static int target_count(const std::vector<int32_t>& targets) {
        int n = 0;
        for (int32_t t : targets) n += (t >= 0);
        return n;
    }

    // Root must be scalar; seeds d(root)=1 and accumulates into each
    // node's grad. Callable once per forward pass.
    void backward(NodeId root);

    size_t size() const { return nodes_.size(); }
    void reset() { nodes_.clear(); }

  private:
    NodeId push(Node n);
    void check_finite(NodeId id) const;
    std::vector<Node> nodes_;
};

}  // namespace clt
