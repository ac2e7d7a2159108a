#include "clt/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace clt {

namespace {

const char* op_name(Tape::Op op) {
    switch (op) {
        case Tape::Op::Leaf: return "leaf";
        case Tape::Op::Const: return "const";
        case Tape::Op::Add: return "add";
        case Tape::Op::Sub: return "sub";
        case Tape::Op::Mul: return "mul";
        case Tape::Op::Scale: return "scale";
        case Tape::Op::Sum: return "sum";
        case Tape::Op::MatMul: return "matmul";
        case Tape::Op::AddRow: return "add_row";
        case Tape::Op::Embed: return "embed";
        case Tape::Op::LayerNorm: return "layer_norm";
        case Tape::Op::Gelu: return "gelu";
        case Tape::Op::Attention: return "attention";
        case Tape::Op::SoftmaxCE: return "softmax_ce";
        case Tape::Op::GatherLP: return "gather_logprob";
        case Tape::Op::KLTeacher: return "kl_from_teacher";
    }
    return "?";
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

// Row softmax with max shift, writing into out (same shape).
void softmax_rows(const DenseArray& logits, DenseArray& out) {
    int64_t rows = logits.rows(), cols = logits.cols();
    out = DenseArray(logits.shape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* z = logits.data.data() + r * cols;
        double* p = out.data.data() + r * cols;
        double mx = z[0];
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, z[c]);
        double s = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            p[c] = std::exp(z[c] - mx);
            s += p[c];
        }
        for (int64_t c = 0; c < cols; ++c) p[c] /= s;
    }
}

double log_sum_exp_row(const double* z, int64_t n) {
    double mx = z[0];
    for (int64_t c = 1; c < n; ++c) mx = std::max(mx, z[c]);
    double s = 0.0;
    for (int64_t c = 0; c < n; ++c) s += std::exp(z[c] - mx);
    return mx + std::log(s);
}

}  // namespace

Tape::NodeId Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    NodeId id = static_cast<NodeId>(nodes_.size() - 1);
    check_finite(id);
    return id;
}

void Tape::check_finite(NodeId id) const {
    const Node& n = nodes_[id];
    if (!all_finite(n.value))
        throw std::runtime_error(std::string("numeric overflow in op ") + op_name(n.op));
}

Tape::NodeId Tape::leaf(const DenseArray& v) {
    Node n;
    n.op = Op::Leaf;
    n.value = v;
    return push(std::move(n));
}

Tape::NodeId Tape::constant(const DenseArray& v) {
    Node n;
    n.op = Op::Const;
    n.value = v;
    return push(std::move(n));
}

Tape::NodeId Tape::constant_scalar(double v) {
    DenseArray a({1});
    a.at(0) = v;
    return constant(a);
}

double Tape::scalar(NodeId id) const {
    if (nodes_[id].value.numel() != 1)
        throw std::invalid_argument("Tape::scalar: node is not scalar");
    return nodes_[id].value.at(0);
}

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    if (!nodes_[a].value.same_shape(nodes_[b].value))
        throw std::invalid_argument("add: shape mismatch");
    Node n;
    n.op = Op::Add;
    n.in0 = a;
    n.in1 = b;
    n.value = nodes_[a].value;
    for (int64_t i = 0; i < n.value.numel(); ++i) n.value.at(i) += nodes_[b].value.at(i);
    return push(std::move(n));
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
    if (!nodes_[a].value.same_shape(nodes_[b].value))
        throw std::invalid_argument("sub: shape mismatch");
    Node n;
    n.op = Op::Sub;
    n.in0 = a;
    n.in1 = b;
    n.value = nodes_[a].value;
    for (int64_t i = 0; i < n.value.numel(); ++i) n.value.at(i) -= nodes_[b].value.at(i);
    return push(std::move(n));
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
    if (!nodes_[a].value.same_shape(nodes_[b].value))
        throw std::invalid_argument("mul: shape mismatch");
    Node n;
    n.op = Op::Mul;
    n.in0 = a;
    n.in1 = b;
    n.value = nodes_[a].value;
    for (int64_t i = 0; i < n.value.numel(); ++i) n.value.at(i) *= nodes_[b].value.at(i);
    return push(std::move(n));
}

Tape::NodeId Tape::scale(NodeId a, double alpha) {
    Node n;
    n.op = Op::Scale;
    n.in0 = a;
    n.alpha = alpha;
    n.value = nodes_[a].value;
    for (double& v : n.value.data) v *= alpha;
    return push(std::move(n));
}

Tape::NodeId Tape::sum(NodeId a) {
    Node n;
    n.op = Op::Sum;
    n.in0 = a;
    n.value = DenseArray({1});
    double s = 0.0;
    for (double v : nodes_[a].value.data) s += v;
    n.value.at(0) = s;
    return push(std::move(n));
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::MatMul;
    n.in0 = a;
    n.in1 = b;
    clt::matmul(nodes_[a].value, nodes_[b].value, n.value);
    return push(std::move(n));
}

Tape::NodeId Tape::add_row(NodeId a, NodeId row) {
    const DenseArray& av = nodes_[a].value;
    const DenseArray& rv = nodes_[row].value;
    if (rv.numel() != av.cols()) throw std::invalid_argument("add_row: width mismatch");
    Node n;
    n.op = Op::AddRow;
    n.in0 = a;
    n.in1 = row;
    n.value = av;
    for (int64_t r = 0; r < av.rows(); ++r)
        for (int64_t c = 0; c < av.cols(); ++c) n.value.at2(r, c) += rv.at(c);
    return push(std::move(n));
}

Tape::NodeId Tape::embed(NodeId table, const std::vector<int32_t>& ids) {
    const DenseArray& tv = nodes_[table].value;
    int64_t vocab = tv.rows(), d = tv.cols();
    Node n;
    n.op = Op::Embed;
    n.in0 = table;
    n.ids = ids;
    n.value = DenseArray({static_cast<int64_t>(ids.size()), d});
    for (size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || ids[t] >= vocab) throw std::invalid_argument("embed: id out of range");
        for (int64_t c = 0; c < d; ++c)
            n.value.at2(static_cast<int64_t>(t), c) = tv.at2(ids[t], c);
    }
    return push(std::move(n));
}

Tape::NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias) {
    const DenseArray& xv = nodes_[x].value;
    int64_t rows = xv.rows(), cols = xv.cols();
    if (nodes_[gain].value.numel() != cols || nodes_[bias].value.numel() != cols)
        throw std::invalid_argument("layer_norm: gain/bias width mismatch");
    constexpr double eps = 1e-5;
    Node n;
    n.op = Op::LayerNorm;
    n.in0 = x;
    n.in1 = gain;
    n.in2 = bias;
    n.value = DenseArray(xv.shape);
    n.cache = DenseArray(xv.shape);   // xhat
    n.cache2 = DenseArray({rows});    // 1/sigma
    const DenseArray& g = nodes_[gain].value;
    const DenseArray& b = nodes_[bias].value;
    for (int64_t r = 0; r < rows; ++r) {
        double mu = 0.0;
        for (int64_t c = 0; c < cols; ++c) mu += xv.at2(r, c);
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (int64_t c = 0; c < cols; ++c) {
            double d = xv.at2(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        double inv = 1.0 / std::sqrt(var + eps);
        n.cache2.at(r) = inv;
        for (int64_t c = 0; c < cols; ++c) {
            double xh = (xv.at2(r, c) - mu) * inv;
            n.cache.at2(r, c) = xh;
            n.value.at2(r, c) = g.at(c) * xh + b.at(c);
        }
    }
    return push(std::move(n));
}

Tape::NodeId Tape::gelu(NodeId x) {
    Node n;
    n.op = Op::Gelu;
    n.in0 = x;
    n.value = nodes_[x].value;
    for (double& v : n.value.data) {
        double t = std::tanh(kGeluC * (v + 0.044715 * v * v * v));
        v = 0.5 * v * (1.0 + t);
    }
    return push(std::move(n));
}

Tape::NodeId Tape::attention(NodeId q, NodeId k, NodeId v, int n_heads) {
    const DenseArray& qv = nodes_[q].value;
    const DenseArray& kv = nodes_[k].value;
    const DenseArray& vv = nodes_[v].value;
    int64_t T = qv.rows(), d = qv.cols();
    if (!qv.same_shape(kv) || !qv.same_shape(vv))
        throw std::invalid_argument("attention: q/k/v shape mismatch");
    if (n_heads <= 0 || d % n_heads != 0)
        throw std::invalid_argument("attention: d not divisible by heads");
    int64_t H = n_heads, dh = d / H;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Node n;
    n.op = Op::Attention;
    n.in0 = q;
    n.in1 = k;
    n.in2 = v;
    n.aux_i = n_heads;
    n.value = DenseArray({T, d});
    n.cache = DenseArray({H * T, T});  // causal softmax weights per head
    for (int64_t h = 0; h < H; ++h) {
        int64_t off = h * dh;
        for (int64_t i = 0; i < T; ++i) {
            double* prow = n.cache.data.data() + (h * T + i) * T;
            double mx = -1e300;
            for (int64_t j = 0; j <= i; ++j) {
                double s = 0.0;
                for (int64_t c = 0; c < dh; ++c) s += qv.at2(i, off + c) * kv.at2(j, off + c);
                prow[j] = s * inv_sqrt;
                mx = std::max(mx, prow[j]);
            }
            double denom = 0.0;
            for (int64_t j = 0; j <= i; ++j) {
                prow[j] = std::exp(prow[j] - mx);
                denom += prow[j];
            }
            for (int64_t j = 0; j <= i; ++j) prow[j] /= denom;
            for (int64_t c = 0; c < dh; ++c) {
                double s = 0.0;
                for (int64_t j = 0; j <= i; ++j) s += prow[j] * vv.at2(j, off + c);
                n.value.at2(i, off + c) = s;
            }
        }
    }
    return push(std::move(n));
}

Tape::NodeId Tape::softmax_ce(NodeId logits, const std::vector<int32_t>& targets) {
    const DenseArray& lv = nodes_[logits].value;
    int64_t T = lv.rows(), V = lv.cols();
    if (static_cast<int64_t>(targets.size()) != T)
        throw std::invalid_argument("softmax_ce: targets length mismatch");
    Node n;
    n.op = Op::SoftmaxCE;
    n.in0 = logits;
    n.ids = targets;
    n.value = DenseArray({1});
    double nll = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        int32_t y = targets[t];
        if (y < 0) continue;
        if (y >= V) throw std::invalid_argument("softmax_ce: target out of range");
        const double* z = lv.data.data() + t * V;
        nll += log_sum_exp_row(z, V) - z[y];
    }
    n.value.at(0) = nll;
    return push(std::move(n));
}

Tape::NodeId Tape::gather_logprob(NodeId logits,
                                  const std::vector<std::pair<int32_t, int32_t>>& picks) {
    const DenseArray& lv = nodes_[logits].value;
    int64_t T = lv.rows(), V = lv.cols();
    Node n;
    n.op = Op::GatherLP;
    n.in0 = logits;
    n.ids.reserve(picks.size() * 2);
    double lp = 0.0;
    for (auto [pos, id] : picks) {
        if (pos < 0 || pos >= T || id < 0 || id >= V)
            throw std::invalid_argument("gather_logprob: pick out of range");
        const double* z = lv.data.data() + pos * V;
        lp += z[id] - log_sum_exp_row(z, V);
        n.ids.push_back(pos);
        n.ids.push_back(id);
    }
    n.value = DenseArray({1});
    n.value.at(0) = lp;
    return push(std::move(n));
}

Tape::NodeId Tape::kl_from_teacher(NodeId student_logits, const DenseArray& teacher_probs,
                                   double temperature) {
    const DenseArray& sv = nodes_[student_logits].value;
    if (!sv.same_shape(teacher_probs))
        throw std::invalid_argument("kl_from_teacher: shape mismatch");
    if (temperature <= 0) throw std::invalid_argument("kl_from_teacher: temperature must be > 0");
    int64_t T = sv.rows(), V = sv.cols();
    Node n;
    n.op = Op::KLTeacher;
    n.in0 = student_logits;
    n.alpha = temperature;
    DenseArray scaled = sv;
    for (double& z : scaled.data) z /= temperature;
    softmax_rows(scaled, n.cache);  // student probs Q
    n.cache2 = teacher_probs;
    double kl = 0.0;
    for (int64_t t = 0; t < T; ++t) {
        const double* z = scaled.data.data() + t * V;
        double lse = log_sum_exp_row(z, V);
        for (int64_t c = 0; c < V; ++c) {
            double p = teacher_probs.at2(t, c);
            if (p > 0.0) kl += p * (std::log(p) - (z[c] - lse));
        }
    }
    n.value = DenseArray({1});
    // KL is non-negative; rounding can leave a tiny negative residue when
    // student and teacher coincide.
    n.value.at(0) = std::max(0.0, kl / static_cast<double>(T));
    return push(std::move(n));
}

void Tape::backward(NodeId root) {
    if (nodes_[root].value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    for (Node& n : nodes_) n.grad = DenseArray(n.value.shape);
    nodes_[root].grad.at(0) = 1.0;

    for (NodeId id = root; id >= 0; --id) {
        Node& n = nodes_[id];
        const DenseArray& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
            case Op::Const:
                break;
            case Op::Add:
                for (int64_t i = 0; i < g.numel(); ++i) {
                    nodes_[n.in0].grad.at(i) += g.at(i);
                    nodes_[n.in1].grad.at(i) += g.at(i);
                }
                break;
            case Op::Sub:
                for (int64_t i = 0; i < g.numel(); ++i) {
                    nodes_[n.in0].grad.at(i) += g.at(i);
                    nodes_[n.in1].grad.at(i) -= g.at(i);
                }
                break;
            case Op::Mul:
                for (int64_t i = 0; i < g.numel(); ++i) {
                    nodes_[n.in0].grad.at(i) += g.at(i) * nodes_[n.in1].value.at(i);
                    nodes_[n.in1].grad.at(i) += g.at(i) * nodes_[n.in0].value.at(i);
                }
                break;
            case Op::Scale:
                for (int64_t i = 0; i < g.numel(); ++i)
                    nodes_[n.in0].grad.at(i) += g.at(i) * n.alpha;
                break;
            case Op::Sum:
                for (int64_t i = 0; i < nodes_[n.in0].grad.numel(); ++i)
                    nodes_[n.in0].grad.at(i) += g.at(0);
                break;
            case Op::MatMul: {
                DenseArray da, db;
                matmul_bt(g, nodes_[n.in1].value, da);       // dA = dC * B^T
                matmul_at(nodes_[n.in0].value, g, db);       // dB = A^T * dC
                for (int64_t i = 0; i < da.numel(); ++i) nodes_[n.in0].grad.at(i) += da.at(i);
                for (int64_t i = 0; i < db.numel(); ++i) nodes_[n.in1].grad.at(i) += db.at(i);
                break;
            }
            case Op::AddRow: {
                DenseArray& da = nodes_[n.in0].grad;
                DenseArray& dr = nodes_[n.in1].grad;
                for (int64_t r = 0; r < g.rows(); ++r)
                    for (int64_t c = 0; c < g.cols(); ++c) {
                        da.at2(r, c) += g.at2(r, c);
                        dr.at(c) += g.at2(r, c);
                    }
                break;
            }
            case Op::Embed: {
                DenseArray& dt = nodes_[n.in0].grad;
                int64_t d = g.cols();
                for (size_t t = 0; t < n.ids.size(); ++t)
                    for (int64_t c = 0; c < d; ++c)
                        dt.at2(n.ids[t], c) += g.at2(static_cast<int64_t>(t), c);
                break;
            }
            case Op::LayerNorm: {
                int64_t rows = g.rows(), cols = g.cols();
                DenseArray& dx = nodes_[n.in0].grad;
                DenseArray& dg = nodes_[n.in1].grad;
                DenseArray& db = nodes_[n.in2].grad;
                const DenseArray& gain = nodes_[n.in1].value;
                for (int64_t r = 0; r < rows; ++r) {
                    double inv = n.cache2.at(r);
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t c = 0; c < cols; ++c) {
                        double dxh = g.at2(r, c) * gain.at(c);
                        m1 += dxh;
                        m2 += dxh * n.cache.at2(r, c);
                    }
                    m1 /= static_cast<double>(cols);
                    m2 /= static_cast<double>(cols);
                    for (int64_t c = 0; c < cols; ++c) {
                        double dxh = g.at2(r, c) * gain.at(c);
                        dx.at2(r, c) += inv * (dxh - m1 - n.cache.at2(r, c) * m2);
                        dg.at(c) += g.at2(r, c) * n.cache.at2(r, c);
                        db.at(c) += g.at2(r, c);
                    }
                }
                break;
            }
            case Op::Gelu: {
                const DenseArray& x = nodes_[n.in0].value;
                DenseArray& dx = nodes_[n.in0].grad;
                for (int64_t i = 0; i < g.numel(); ++i) {
                    double xv = x.at(i);
                    double u = kGeluC * (xv + 0.044715 * xv * xv * xv);
                    double t = std::tanh(u);
                    double du = kGeluC * (1.0 + 3.0 * 0.044715 * xv * xv);
                    double dy = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * du;
                    dx.at(i) += g.at(i) * dy;
                }
                break;
            }
            case Op::Attention: {
                const DenseArray& qv = nodes_[n.in0].value;
                const DenseArray& kv = nodes_[n.in1].value;
                const DenseArray& vv = nodes_[n.in2].value;
                DenseArray& dq = nodes_[n.in0].grad;
                DenseArray& dk = nodes_[n.in1].grad;
                DenseArray& dv = nodes_[n.in2].grad;
                int64_t T = qv.rows(), d = qv.cols(), H = n.aux_i, dh = d / H;
                double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
                std::vector<double> dp(static_cast<size_t>(T));
                for (int64_t h = 0; h < H; ++h) {
                    int64_t off = h * dh;
                    for (int64_t i = 0; i < T; ++i) {
                        const double* prow = n.cache.data.data() + (h * T + i) * T;
                        // dP and dV
                        double dot_pp = 0.0;
                        for (int64_t j = 0; j <= i; ++j) {
                            double s = 0.0;
                            for (int64_t c = 0; c < dh; ++c)
                                s += g.at2(i, off + c) * vv.at2(j, off + c);
                            dp[static_cast<size_t>(j)] = s;
                            dot_pp += s * prow[j];
                            for (int64_t c = 0; c < dh; ++c)
                                dv.at2(j, off + c) += prow[j] * g.at2(i, off + c);
                        }
                        // dS = P o (dP - <dP,P>), then into dQ/dK
                        for (int64_t j = 0; j <= i; ++j) {
                            double ds = prow[j] * (dp[static_cast<size_t>(j)] - dot_pp) * inv_sqrt;
                            if (ds == 0.0) continue;
                            for (int64_t c = 0; c < dh; ++c) {
                                dq.at2(i, off + c) += ds * kv.at2(j, off + c);
                                dk.at2(j, off + c) += ds * qv.at2(i, off + c);
                            }
                        }
                    }
                }
                break;
            }
            case Op::SoftmaxCE: {
                const DenseArray& lv = nodes_[n.in0].value;
                DenseArray& dl = nodes_[n.in0].grad;
                int64_t T = lv.rows(), V = lv.cols();
                double gs = g.at(0);
                if (gs == 0.0) break;
                DenseArray probs;
                for (int64_t t = 0; t < T; ++t) {
                    int32_t y = n.ids[static_cast<size_t>(t)];
                    if (y < 0) continue;
                    const double* z = lv.data.data() + t * V;
                    double lse = log_sum_exp_row(z, V);
                    for (int64_t c = 0; c < V; ++c)
                        dl.at2(t, c) += gs * std::exp(z[c] - lse);
                    dl.at2(t, y) -= gs;
                }
                break;
            }
            case Op::GatherLP: {
                const DenseArray& lv = nodes_[n.in0].value;
                DenseArray& dl = nodes_[n.in0].grad;
                int64_t V = lv.cols();
                double gs = g.at(0);
                if (gs == 0.0) break;
                for (size_t p = 0; p < n.ids.size(); p += 2) {
                    int32_t pos = n.ids[p], id = n.ids[p + 1];
                    const double* z = lv.data.data() + pos * V;
                    double lse = log_sum_exp_row(z, V);
                    for (int64_t c = 0; c < V; ++c)
                        dl.at2(pos, c) -= gs * std::exp(z[c] - lse);
                    dl.at2(pos, id) += gs;
                }
                break;
            }
            case Op::KLTeacher: {
                DenseArray& dl = nodes_[n.in0].grad;
                int64_t T = n.cache.rows(), V = n.cache.cols();
                double gs = g.at(0) / (n.alpha * static_cast<double>(T));
                for (int64_t t = 0; t < T; ++t)
                    for (int64_t c = 0; c < V; ++c)
                        dl.at2(t, c) += gs * (n.cache.at2(t, c) - n.cache2.at2(t, c));
                break;
            }
        }
    }
}

}  // namespace clt
