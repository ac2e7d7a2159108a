#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "clt/continual.hpp"
#include "clt/tape.hpp"

using namespace clt;

namespace {

ModelConfig tiny() {
    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 8;
    c.n_heads = 2;
    c.context_length = 48;
    c.seed = 5;
    return c;
}

ParameterStore single(const std::string& name, std::vector<double> vals) {
    ParameterStore s;
    DenseArray a({static_cast<int64_t>(vals.size())});
    a.data = std::move(vals);
    s.add(name, std::move(a));
    return s;
}

// Per-example squared-gradient oracle via a hand-built scoring graph.
ParameterStore squared_grad_oracle(const CausalLM& model, const MCItem& item) {
    auto [ctx, cont] = mc_scored_tokens(item, item.gold_index, model.config.context_length);
    Tape tape;
    BoundParams bound = bind_params(tape, model.params);
    tape.backward(sequence_logprob_graph(tape, model, bound, ctx, cont));
    ParameterStore sq = collect_grads(tape, bound, model.params);
    for (size_t p = 0; p < sq.size(); ++p)
        for (auto& v : sq.entry(p).second.data) v *= v;
    return sq;
}

}  // namespace

TEST_CASE("mc prompt template and scored-token truncation") {
    MCItem item;
    item.question = "kide pale?";
    item.choices = {"bado", "suro"};
    item.gold_index = 1;
    CHECK(mc_prompt(item) == "Question: kide pale?\nChoices: A) bado; B) suro;\nAnswer: ");
    auto [ctx, cont] = mc_scored_tokens(item, 1, 256);
    CHECK(detokenize(ctx) == mc_prompt(item));
    CHECK(ctx.front() == kBos);
    CHECK(detokenize(cont) == "suro");
    CHECK(cont.back() == kEos);
    // Overlong items are left-truncated after BOS; the continuation survives.
    auto [tctx, tcont] = mc_scored_tokens(item, 1, 16);
    CHECK(tctx.front() == kBos);
    CHECK(tctx.size() + tcont.size() == 16);
    CHECK(tcont == cont);
    TokenSeq tail(ctx.end() - static_cast<ptrdiff_t>(tctx.size() - 1), ctx.end());
    CHECK(TokenSeq(tctx.begin() + 1, tctx.end()) == tail);
}

TEST_CASE("estimate_fisher matches the per-example oracle and its contracts") {
    CausalLM model = CausalLM::init(tiny());
    std::vector<MCItem> items = synth_mc_items(Grammar::A, 2, 31);
    CHECK_THROWS_AS(estimate_fisher(model, {}), std::invalid_argument);

    FisherDiagonal f1 = estimate_fisher(model, {items[0]});
    ParameterStore oracle = squared_grad_oracle(model, items[0]);
    REQUIRE(f1.values.aligned_with(oracle));
    for (size_t p = 0; p < oracle.size(); ++p)
        for (int64_t i = 0; i < oracle.entry(p).second.numel(); ++i) {
            double a = f1.values.entry(p).second.at(i);
            double b = oracle.entry(p).second.at(i);
            CHECK(std::abs(a - b) <= 1e-10 * std::max({std::abs(a), std::abs(b), 1e-300}));
            CHECK(a >= 0.0);
        }

    // Two-example mean against the separately computed singletons.
    FisherDiagonal f2 = estimate_fisher(model, {items[1]});
    FisherDiagonal both = estimate_fisher(model, items);
    CHECK(both.n_examples == 2);
    for (size_t p = 0; p < both.values.size(); ++p)
        for (int64_t i = 0; i < both.values.entry(p).second.numel(); ++i) {
            double mean = 0.5 * (f1.values.entry(p).second.at(i) + f2.values.entry(p).second.at(i));
            double got = both.values.entry(p).second.at(i);
            CHECK(std::abs(got - mean) <= 1e-10 * std::max({std::abs(mean), 1e-300}));
        }

    // Permutation invariance is bit-exact.
    FisherDiagonal swapped = estimate_fisher(model, {items[1], items[0]});
    for (size_t p = 0; p < both.values.size(); ++p)
        CHECK(swapped.values.entry(p).second.data == both.values.entry(p).second.data);
    CHECK(both.anchor_hash == params_hash(model.params));
    CHECK(both.template_id == kMcTemplateId);
}

TEST_CASE("ewc_penalty algebra: anchor zero, lambda zero, hand case, alignment") {
    TaskSnapshot snap;
    snap.anchor = single("w", {1.0, 1.0});
    FisherDiagonal fisher;
    fisher.values = single("w", {1.0, 1.0});
    ParameterStore theta = single("w", {2.0, 3.0});  // delta = (1, 2)
    CHECK(ewc_penalty(snap.anchor, snap, fisher, 7.0) == 0.0);
    CHECK(ewc_penalty(theta, snap, fisher, 0.0) == 0.0);
    CHECK(ewc_penalty(theta, snap, fisher, 2.0) == 5.0);  // (2/2)(1*1 + 1*4)
    ParameterStore wrong = single("other", {2.0, 3.0});
    CHECK_THROWS_AS(ewc_penalty(wrong, snap, fisher, 1.0), std::invalid_argument);
}

TEST_CASE("ewc_penalty gradient matches finite differences under 1e-6") {
    std::mt19937_64 rng(77);
    std::normal_distribution<double> d(0.0, 1.0);
    ParameterStore theta, anchor_vals, fvals;
    for (const char* name : {"a", "b"}) {
        DenseArray t({4, 3}), an({4, 3}), fv({4, 3});
        for (int64_t i = 0; i < 12; ++i) {
            t.at(i) = d(rng);
            an.at(i) = d(rng);
            fv.at(i) = d(rng) * d(rng);  // non-negative
        }
        theta.add(name, t);
        anchor_vals.add(name, an);
        fvals.add(name, fv);
    }
    TaskSnapshot snap;
    snap.anchor = anchor_vals;
    FisherDiagonal fisher;
    fisher.values = fvals;
    double lambda = 3.5;
    ParameterStore grads = zeros_like(theta);
    ewc_penalty_grad(theta, snap, fisher, lambda, grads);
    auto loss = [&]() { return ewc_penalty(theta, snap, fisher, lambda); };
    CHECK(finite_diff_check(loss, theta, grads, 1e-5) < 1e-6);
}

TEST_CASE("ewc_penalty is invariant to store iteration order") {
    // Terms are exact binary fractions, so any summation order is exact.
    auto build = [](bool swapped) {
        ParameterStore th, an, fv;
        std::vector<std::pair<std::string, double>> entries = {
            {"p", 0.25}, {"q", 0.5}, {"r", 2.0}};
        if (swapped) std::reverse(entries.begin(), entries.end());
        for (auto& [n, v] : entries) {
            th.add(n, single("x", {v}).get("x"));
            an.add(n, single("x", {0.0}).get("x"));
            fv.add(n, single("x", {1.0}).get("x"));
        }
        TaskSnapshot s;
        s.anchor = an;
        FisherDiagonal f;
        f.values = fv;
        return ewc_penalty(th, s, f, 2.0);
    };
    CHECK(build(false) == build(true));
}

TEST_CASE("SI accumulation and consolidation hand cases") {
    ParameterStore theta0 = single("w", {0.0});
    SIState st = SIState::start(theta0, 1e-3);
    ParameterStore dz = single("w", {0.0}), gz = single("w", {5.0});
    si_accumulate(st, dz, gz);  // zero step: unchanged
    CHECK(st.numerator.get("w").at(0) == 0.0);
    ParameterStore dstep = single("w", {0.1}), grad = single("w", {-2.0});
    si_accumulate(st, dstep, grad);
    CHECK(st.numerator.get("w").at(0) == doctest::Approx(0.2).epsilon(1e-15));
    si_accumulate(st, dstep, grad);  // additivity
    CHECK(st.numerator.get("w").at(0) == doctest::Approx(0.4).epsilon(1e-15));
    ParameterStore bad = single("w", {1.0, 2.0});
    CHECK_THROWS_AS(si_accumulate(st, bad, grad), std::invalid_argument);

    // Hand value: numerator 0.2, total movement 0.1, eps 1e-3.
    SIState st2 = SIState::start(theta0, 1e-3);
    si_accumulate(st2, dstep, grad);
    ParameterStore theta_end = single("w", {0.1});
    ParameterStore imp = si_consolidate(st2, theta_end);
    double expect = 0.2 / (0.01 + 1e-3);
    CHECK(std::abs(imp.get("w").at(0) - expect) < 1e-12 * expect);

    // Zero path and negative-numerator clamp.
    SIState st3 = SIState::start(theta0, 1e-3);
    CHECK(si_consolidate(st3, theta0).get("w").at(0) == 0.0);
    ParameterStore gpos = single("w", {2.0});
    si_accumulate(st3, dstep, gpos);  // numerator -0.2
    CHECK(si_consolidate(st3, theta_end).get("w").at(0) == 0.0);
}

TEST_CASE("si_penalty quadratic form and gradient") {
    ParameterStore anchor = single("w", {1.0});
    ParameterStore imp = single("w", {3.0});
    ParameterStore theta = single("w", {1.5});
    // lambda * S * d^2, no half factor.
    CHECK(si_penalty(theta, anchor, imp, 2.0) == doctest::Approx(2.0 * 3.0 * 0.25).epsilon(1e-15));
    ParameterStore grads = zeros_like(theta);
    si_penalty_grad(theta, anchor, imp, 2.0, grads);
    CHECK(grads.get("w").at(0) == doctest::Approx(2.0 * 2.0 * 3.0 * 0.5).epsilon(1e-15));
    auto loss = [&]() { return si_penalty(theta, anchor, imp, 2.0); };
    ParameterStore g2 = zeros_like(theta);
    si_penalty_grad(theta, anchor, imp, 2.0, g2);
    CHECK(finite_diff_check(loss, theta, g2, 1e-6) < 1e-8);
}

TEST_CASE("lwf_penalty: identity zero, Gibbs non-negativity, uniform-teacher oracle") {
    std::mt19937_64 rng(123);
    std::normal_distribution<double> d(0.0, 2.0);
    DenseArray z({4, 9});
    for (auto& v : z.data) v = d(rng);
    CHECK(lwf_penalty(z, z, 5.0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(lwf_penalty(z, z, 0.0) == 0.0);
    for (int trial = 0; trial < 1000; ++trial) {
        DenseArray s({2, 6}), t({2, 6});
        for (auto& v : s.data) v = d(rng);
        for (auto& v : t.data) v = d(rng);
        CHECK(lwf_penalty(s, t, 1.0) >= 0.0);
    }
    // Uniform teacher vs peaked student: independent per-position KL.
    int64_t V = 7;
    DenseArray teacher({2, V}, 0.0);  // uniform after softmax
    DenseArray student({2, V}, 0.0);
    student.at2(0, 3) = 8.0;
    student.at2(1, 5) = 4.0;
    double expect = 0.0;
    for (int64_t r = 0; r < 2; ++r) {
        double mx = 0.0;
        for (int64_t c = 0; c < V; ++c) mx = std::max(mx, student.at2(r, c));
        double lse = 0.0;
        for (int64_t c = 0; c < V; ++c) lse += std::exp(student.at2(r, c) - mx);
        lse = mx + std::log(lse);
        for (int64_t c = 0; c < V; ++c) {
            double p = 1.0 / static_cast<double>(V);
            expect += p * (std::log(p) - (student.at2(r, c) - lse));
        }
    }
    expect = 1.5 * expect / 2.0;  // lambda 1.5, mean over positions
    double got = lwf_penalty(student, teacher, 1.5);
    CHECK(std::abs(got - expect) < 1e-10 * std::abs(expect));
    DenseArray mis({3, V}, 0.0);
    CHECK_THROWS_AS(lwf_penalty(student, mis, 1.0), std::invalid_argument);
}

TEST_CASE("lr_decay hand cases") {
    CHECK(lr_decay(2e-4, 1.0, 0.0) == 2e-4);
    CHECK(lr_decay(2e-4, 0.5, 0.0) == 1e-4);
    CHECK(lr_decay(2e-4, 0.1, 5e-5) == 5e-5);
}

TEST_CASE("total_loss is additive") {
    CHECK(total_loss(1.25, {}) == 1.25);
    CHECK(total_loss(1.25, {0.0, 0.0}) == 1.25);
    double a = 0.5, b = 0.125;
    CHECK(total_loss(1.25, {a, b}) == 1.25 + a + b);
}

TEST_CASE("fisher artifact round-trips and refuses a mismatched anchor") {
    CausalLM model = CausalLM::init(tiny());
    FisherDiagonal f = estimate_fisher(model, synth_mc_items(Grammar::A, 2, 41));
    std::string path =
        (std::filesystem::temp_directory_path() / "clt_test_fisher.bin").string();
    save_fisher(path, f);
    FisherDiagonal back = load_fisher(path, f.anchor_hash);
    CHECK(back.n_examples == f.n_examples);
    CHECK(back.template_id == f.template_id);
    REQUIRE(back.values.aligned_with(f.values));
    for (size_t p = 0; p < f.values.size(); ++p)
        CHECK(back.values.entry(p).second.data == f.values.entry(p).second.data);
    CHECK_THROWS_WITH_AS(load_fisher(path, f.anchor_hash + 1), doctest::Contains("anchor"),
                         std::runtime_error);
    std::remove(path.c_str());
}

TEST_CASE("RegularizerSpec validation and kind names") {
    RegularizerSpec s;
    s.kind = RegularizerKind::Ewc;
    s.lambda = -1.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s.lambda = 1.0;
    s.si_epsilon = 0.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s.si_epsilon = 1e-3;
    s.lr_gamma = 0.0;
    CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    s.lr_gamma = 1.0;
    s.validate();
    CHECK(regularizer_kind_from("ewc") == RegularizerKind::Ewc);
    CHECK(regularizer_kind_from("none") == RegularizerKind::None);
    CHECK(regularizer_kind_name(RegularizerKind::Si) == "si");
    CHECK(regularizer_kind_name(RegularizerKind::Lwf) == "lwf");
    CHECK_THROWS_AS(regularizer_kind_from("bogus"), std::invalid_argument);
}
