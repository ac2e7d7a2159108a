#include "clt/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace clt {

void TrainConfig::validate() const {
    if (learning_rate < 0) throw std::invalid_argument("TrainConfig: learning_rate must be >= 0");
    if (warmup_ratio < 0 || warmup_ratio > 1)
        throw std::invalid_argument("TrainConfig: warmup_ratio must be in [0,1]");
    if (weight_decay < 0) throw std::invalid_argument("TrainConfig: weight_decay must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (grad_accum_steps < 1)
        throw std::invalid_argument("TrainConfig: grad_accum_steps must be >= 1");
    if (total_steps < 1) throw std::invalid_argument("TrainConfig: total_steps must be >= 1");
}

OptimState OptimState::start(const ParameterStore& params) {
    OptimState s;
    s.m = zeros_like(params);
    s.v = zeros_like(params);
    return s;
}

double lr_schedule(int64_t step, const TrainConfig& config) {
    if (step < 0 || step > config.total_steps)
        throw std::invalid_argument("lr_schedule: step out of range");
    int64_t warmup = static_cast<int64_t>(
        std::ceil(config.warmup_ratio * static_cast<double>(config.total_steps)));
    if (warmup == 0 || step >= warmup) return config.learning_rate;
    return config.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
}

bool decay_applies(const std::string& name) {
    // Matrices only: attention/MLP weights and the output head.
    return name == "head" || name.find(".attn.w") != std::string::npos ||
           name.find(".mlp.w") != std::string::npos;
}

void adamw_step(ParameterStore& params, const ParameterStore& grads, OptimState& state,
                double lr, const TrainConfig& config) {
    if (!params.aligned_with(grads) || !params.aligned_with(state.m))
        throw std::invalid_argument("adamw_step: stores misaligned");
    state.step += 1;
    double t = static_cast<double>(state.step);
    double bc1 = 1.0 - std::pow(config.beta1, t);
    double bc2 = 1.0 - std::pow(config.beta2, t);
    for (size_t p = 0; p < params.size(); ++p) {
        const std::string& name = params.entry(p).first;
        DenseArray& th = params.entry(p).second;
        const DenseArray& g = grads.entry(p).second;
        DenseArray& m = state.m.entry(p).second;
        DenseArray& v = state.v.entry(p).second;
        bool decay = decay_applies(name) && config.weight_decay > 0;
        for (int64_t i = 0; i < th.numel(); ++i) {
            double gi = g.at(i);
            if (!std::isfinite(gi))
                throw std::runtime_error("adamw_step: non-finite gradient at optimizer step " +
                                         std::to_string(state.step));
            m.at(i) = config.beta1 * m.at(i) + (1.0 - config.beta1) * gi;
            v.at(i) = config.beta2 * v.at(i) + (1.0 - config.beta2) * gi * gi;
            double mhat = m.at(i) / bc1;
            double vhat = v.at(i) / bc2;
            th.at(i) -= lr * mhat / (std::sqrt(vhat) + config.adam_eps);
            // Decoupled decay, applied separately from the adaptive step.
            if (decay) th.at(i) -= lr * config.weight_decay * th.at(i);
        }
    }
}

namespace {

void append_log_line(const std::string& path, const StepLog& entry) {
    if (path.empty()) return;
    nlohmann::json j;
    j["step"] = entry.step;
    j["lr"] = entry.lr;
    j["task_loss"] = entry.task_loss;
    for (const auto& [kind, value] : entry.penalties) j["penalty." + kind] = value;
    j["wall_ms"] = entry.wall_ms;
    std::ofstream os(path, std::ios::app);
    if (!os) throw std::runtime_error("train_task: cannot append to log " + path);
    os << j.dump() << "\n";
}

}  // namespace

TrainResult train_task(CausalLM& model, BatchStream& stream, const TrainConfig& config,
                       const std::vector<BoundRegularizer>& regularizers,
                       const std::string& checkpoint_path, const std::string& log_path,
                       bool accumulate_si, double si_epsilon,
                       const std::optional<Checkpoint>& resume) {
    config.validate();
    for (const BoundRegularizer& r : regularizers) {
        r.spec.validate();
        if (r.spec.kind == RegularizerKind::Ewc && (!r.snapshot || !r.fisher))
            throw std::invalid_argument("train_task: EWC needs snapshot and fisher");
        if (r.spec.kind == RegularizerKind::Si && (!r.snapshot || !r.si_importance))
            throw std::invalid_argument("train_task: SI needs snapshot and importance");
        if (r.spec.kind == RegularizerKind::Lwf && (!r.snapshot || !r.snapshot->teacher))
            throw std::invalid_argument("train_task: LwF needs a frozen teacher");
    }

    OptimState opt = OptimState::start(model.params);
    int64_t start_step = 0;
    std::mt19937_64 trainer_rng(config.seed);
    if (resume) {
        model.params = resume->params;
        opt.m = resume->adam_m;
        opt.v = resume->adam_v;
        opt.step = resume->step;
        start_step = resume->step;
        if (!resume->rng_state.empty()) {
            std::istringstream ss(resume->rng_state);
            ss >> trainer_rng;
        }
        stream.skip(start_step * config.grad_accum_steps);
    }

    TrainResult result;
    std::optional<SIState> si;
    if (accumulate_si) si = SIState::start(model.params, si_epsilon);

    double inv_accum = 1.0 / static_cast<double>(config.grad_accum_steps);

    for (int64_t s = start_step; s < config.total_steps; ++s) {
        auto t0 = std::chrono::steady_clock::now();
        double lr = lr_schedule(s, config);

        ParameterStore grads = zeros_like(model.params);
        double task_loss = 0.0;
        double lwf_value = 0.0;
        for (int k = 0; k < config.grad_accum_steps; ++k) {
            std::vector<TokenSeq> batch = stream.next();
            // A chunk tail can be a lone token padded out; a batch of such
            // chunks has no next-token target and contributes no gradient.
            bool trainable = false;
            for (const TokenSeq& seq : batch)
                for (size_t i = 1; i < seq.size(); ++i)
                    if (seq[i] != kPad) trainable = true;
            if (!trainable) continue;
            Tape tape;
            BoundParams bound = bind_params(tape, model.params);
            Tape::NodeId loss = batch_loss_graph(tape, model, bound, batch);
            Tape::NodeId root = loss;
            for (const BoundRegularizer& r : regularizers) {
                if (r.spec.kind != RegularizerKind::Lwf || r.spec.lambda == 0.0) continue;
                const CausalLM& teacher = *r.snapshot->teacher;
                Tape::NodeId kl_sum = -1;
                int64_t total_rows = 0;
                for (const TokenSeq& seq : batch) {
                    DenseArray tlogits = forward_logits(teacher, seq);
                    DenseArray tprobs(tlogits.shape);
                    // softmax(teacher / T) rows
                    int64_t R = tlogits.rows(), C = tlogits.cols();
                    for (int64_t r2 = 0; r2 < R; ++r2) {
                        double mx = -1e300;
                        for (int64_t c = 0; c < C; ++c)
                            mx = std::max(mx, tlogits.at2(r2, c) / r.spec.lwf_temperature);
                        double sum = 0.0;
                        for (int64_t c = 0; c < C; ++c) {
                            double e = std::exp(tlogits.at2(r2, c) / r.spec.lwf_temperature - mx);
                            tprobs.at2(r2, c) = e;
                            sum += e;
                        }
                        for (int64_t c = 0; c < C; ++c) tprobs.at2(r2, c) /= sum;
                    }
                    Tape::NodeId slogits = logits_graph(tape, model, bound, seq);
                    Tape::NodeId kl = tape.kl_from_teacher(slogits, tprobs, r.spec.lwf_temperature);
                    Tape::NodeId weighted = tape.scale(kl, static_cast<double>(R));
                    kl_sum = (kl_sum < 0) ? weighted : tape.add(kl_sum, weighted);
                    total_rows += R;
                }
                Tape::NodeId pen =
                    tape.scale(kl_sum, r.spec.lambda / static_cast<double>(total_rows));
                lwf_value += tape.scalar(pen) * inv_accum;
                root = tape.add(root, pen);
            }
            try {
                tape.backward(root);
            } catch (const std::runtime_error& e) {
                throw std::runtime_error("train_task: step " + std::to_string(s) + ": " + e.what());
            }
            task_loss += tape.scalar(loss) * inv_accum;
            for (size_t p = 0; p < grads.size(); ++p) {
                const DenseArray& g = tape.grad(bound.leaves[p]);
                DenseArray& acc = grads.entry(p).second;
                for (int64_t i = 0; i < g.numel(); ++i) acc.at(i) += g.at(i) * inv_accum;
            }
        }

        StepLog entry;
        entry.step = s;
        entry.lr = lr;
        entry.task_loss = task_loss;
        for (const BoundRegularizer& r : regularizers) {
            switch (r.spec.kind) {
                case RegularizerKind::Ewc: {
                    double v = ewc_penalty(model.params, *r.snapshot, *r.fisher, r.spec.lambda);
                    ewc_penalty_grad(model.params, *r.snapshot, *r.fisher, r.spec.lambda, grads);
                    entry.penalties.emplace_back("ewc", v);
                    break;
                }
                case RegularizerKind::Si: {
                    double v = si_penalty(model.params, r.snapshot->anchor, *r.si_importance,
                                          r.spec.lambda);
                    si_penalty_grad(model.params, r.snapshot->anchor, *r.si_importance,
                                    r.spec.lambda, grads);
                    entry.penalties.emplace_back("si", v);
                    break;
                }
                case RegularizerKind::Lwf:
                    entry.penalties.emplace_back("lwf", lwf_value);
                    break;
                case RegularizerKind::None:
                    break;
            }
        }

        ParameterStore theta_pre;
        if (si) theta_pre = model.params;

        adamw_step(model.params, grads, opt, lr, config);

        if (si) {
            ParameterStore delta = zeros_like(model.params);
            for (size_t p = 0; p < delta.size(); ++p) {
                DenseArray& d = delta.entry(p).second;
                const DenseArray& pre = theta_pre.entry(p).second;
                const DenseArray& post = model.params.entry(p).second;
                for (int64_t i = 0; i < d.numel(); ++i) d.at(i) = post.at(i) - pre.at(i);
            }
            si_accumulate(*si, delta, grads);
        }

        entry.wall_ms = std::chrono::duration<double, std::milli>(
                            std::chrono::steady_clock::now() - t0)
                            .count();
        append_log_line(log_path, entry);
        result.log.push_back(std::move(entry));
    }

    if (!checkpoint_path.empty()) {
        Checkpoint ckpt;
        ckpt.config = model.config;
        ckpt.params = model.params;
        ckpt.adam_m = opt.m;
        ckpt.adam_v = opt.v;
        ckpt.step = config.total_steps;
        std::ostringstream ss;
        ss << trainer_rng;
        ckpt.rng_state = ss.str();
        save_checkpoint(checkpoint_path, ckpt);
    }
    result.si_state = std::move(si);
    return result;
}

}  // namespace clt
