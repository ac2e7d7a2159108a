#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <sstream>

#include "clt/experiment.hpp"

using namespace clt;
namespace fs = std::filesystem;

namespace {

// A micro workspace that trains in seconds.
struct MicroWorkspace {
    fs::path root;
    SweepConfig cfg;

    explicit MicroWorkspace(const std::string& name) {
        root = fs::temp_directory_path() / name;
        fs::remove_all(root);
        fs::path data = root / "data";
        fs::create_directories(data);
        save_corpus_dir((data / "corpus_a").string(), synth_corpus(Grammar::A, 12, 1));
        save_corpus_dir((data / "corpus_b").string(), synth_corpus(Grammar::B, 12, 2));
        save_corpus_dir((data / "heldout_a").string(), synth_corpus(Grammar::A, 4, 3));
        save_corpus_dir((data / "heldout_b").string(), synth_corpus(Grammar::B, 4, 4));
        save_mc((data / "fisher_a.jsonl").string(), synth_mc_items(Grammar::A, 4, 5));
        save_mc((data / "mc_a.jsonl").string(), synth_mc_items(Grammar::A, 6, 6));
        save_mc((data / "mc_b.jsonl").string(), synth_mc_items(Grammar::B, 6, 7));
        save_qa((data / "qa_a.jsonl").string(), synth_qa_pairs(Grammar::A, 4, 8));
        save_qa((data / "qa_b.jsonl").string(), synth_qa_pairs(Grammar::B, 4, 9));

        cfg.model.n_layers = 1;
        cfg.model.d_model = 16;
        cfg.model.n_heads = 2;
        cfg.model.context_length = 48;
        cfg.model.seed = 2;
        cfg.task_a_dir = (data / "corpus_a").string();
        cfg.task_b_dir = (data / "corpus_b").string();
        cfg.fisher_dataset = (data / "fisher_a.jsonl").string();
        cfg.eval_a = {(data / "heldout_a").string(), (data / "qa_a.jsonl").string(),
                      {(data / "mc_a.jsonl").string()}};
        cfg.eval_b = {(data / "heldout_b").string(), (data / "qa_b.jsonl").string(),
                      {(data / "mc_b.jsonl").string()}};
        cfg.lambda_grid = {0.0, 1e3};
        cfg.regularizer.kind = RegularizerKind::Ewc;
        cfg.train_a.total_steps = 40;
        cfg.train_a.seed = 11;
        cfg.train_b.total_steps = 10;
        cfg.train_b.seed = 12;
        cfg.judge_train.total_steps = 40;
        cfg.judge_train.seed = 13;
        cfg.max_new = 8;
        cfg.output_dir = (root / "run").string();
    }
    ~MicroWorkspace() { fs::remove_all(root); }
};

}  // namespace

TEST_CASE("lambda_label formatting") {
    CHECK(lambda_label(0.0) == "0");
    CHECK(lambda_label(100.0) == "100");
    CHECK(lambda_label(1000.0) == "1000");
    CHECK(lambda_label(1e6) == "1e06");
    CHECK(lambda_label(1e12) == "1e12");
}

TEST_CASE("SweepConfig save/load round-trip, unknown keys, validation") {
    MicroWorkspace ws("clt_test_exp_cfg");
    fs::create_directories(ws.cfg.output_dir);
    std::string path = (ws.root / "config.json").string();
    ws.cfg.save(path);
    SweepConfig back = SweepConfig::load(path);
    CHECK(back.model.d_model == 16);
    CHECK(back.lambda_grid == ws.cfg.lambda_grid);
    CHECK(back.task_a_dir == ws.cfg.task_a_dir);
    CHECK(back.regularizer.kind == RegularizerKind::Ewc);
    CHECK(back.result_hash() == ws.cfg.result_hash());
    CHECK(back.baseline_hash() == ws.cfg.baseline_hash());
    back.validate();

    // Unknown keys are rejected at top level and nested.
    auto write_cfg = [&](const std::string& extra_top, const std::string& extra_model) {
        std::ifstream is(path);
        std::stringstream ss;
        ss << is.rdbuf();
        std::string s = ss.str();
        if (!extra_top.empty()) s.insert(s.find('{') + 1, "\"" + extra_top + "\": 1,");
        if (!extra_model.empty())
            s.insert(s.find('{', s.find("\"model\"")) + 1, "\"" + extra_model + "\": 1,");
        std::string p2 = (ws.root / "config2.json").string();
        std::ofstream os(p2);
        os << s;
        return p2;
    };
    CHECK_THROWS_WITH_AS(SweepConfig::load(write_cfg("bogus", "")), doctest::Contains("bogus"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(SweepConfig::load(write_cfg("", "nested_bogus")),
                         doctest::Contains("nested_bogus"), std::runtime_error);

    // Grid must be strictly increasing and non-negative; paths must exist.
    SweepConfig bad = ws.cfg;
    bad.lambda_grid = {0.0, 1e3, 1e3};
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);
    bad = ws.cfg;
    bad.lambda_grid = {-1.0, 1e3};
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);
    bad = ws.cfg;
    bad.task_a_dir = (ws.root / "nope").string();
    CHECK_THROWS_AS(bad.validate(), std::runtime_error);
}

TEST_CASE("config hash changes with any result-affecting field") {
    MicroWorkspace ws("clt_test_exp_hash");
    uint64_t h0 = ws.cfg.result_hash();
    SweepConfig c = ws.cfg;
    c.train_b.seed += 1;
    CHECK(c.result_hash() != h0);
    c = ws.cfg;
    c.lambda_grid.push_back(1e6);
    CHECK(c.result_hash() != h0);
    c = ws.cfg;
    c.regularizer.kind = RegularizerKind::Si;
    CHECK(c.result_hash() != h0);
    c = ws.cfg;
    c.output_dir = "/somewhere/else";  // not result-affecting
    CHECK(c.result_hash() == h0);
    // Task-B settings do not touch the baseline hash.
    c = ws.cfg;
    c.train_b.seed += 1;
    CHECK(c.baseline_hash() == ws.cfg.baseline_hash());
}

TEST_CASE("run_baseline trains, persists, evaluates, and caches") {
    MicroWorkspace ws("clt_test_exp_base");
    BaselineArtifacts art = run_baseline(ws.cfg);
    CHECK_FALSE(art.loaded_from_cache);
    REQUIRE(art.model_a);
    REQUIRE(art.judge);
    REQUIRE(art.fisher);
    CHECK(art.fisher->anchor_hash == params_hash(art.model_a->params));
    CHECK(art.records.size() == 7);  // 2 tasks x (heldout + qa + mc) + judge
    for (const EvalRecord& r : art.records) {
        CHECK(r.lambda == -1.0);
        CHECK(r.checkpoint == "baseline");
        if (r.metric != "mc_acc") CHECK(r.value > 0.0);
        if (r.metric == "mc_acc") {
            CHECK(r.value >= 0.0);
            CHECK(r.value <= 1.0);
        }
    }
    // After even a short task-A run, held-out A beats held-out B.
    double ppl_a = 0, ppl_b = 0;
    for (const EvalRecord& r : art.records) {
        if (r.dataset == "heldout_A") ppl_a = r.value;
        if (r.dataset == "heldout_B") ppl_b = r.value;
    }
    CHECK(ppl_a < ppl_b);

    BaselineArtifacts again = run_baseline(ws.cfg);
    CHECK(again.loaded_from_cache);
    CHECK(params_hash(again.model_a->params) == params_hash(art.model_a->params));
    REQUIRE(again.records.size() == art.records.size());
    for (size_t i = 0; i < art.records.size(); ++i)
        CHECK(again.records[i].value == art.records[i].value);
}

TEST_CASE("run_sweep cells, resume-by-cell, restricted grid, and report integrity") {
    MicroWorkspace ws("clt_test_exp_sweep");
    SweepResult res = run_sweep(ws.cfg);
    CHECK(res.failed.empty());
    REQUIRE(res.cells.size() == 2);
    for (const auto& [lambda, recs] : res.cells) {
        CHECK(recs.size() == 7);
        for (const EvalRecord& r : recs) CHECK(r.lambda == lambda);
    }

    // Rerun: finished cells load from their done markers bit-identically.
    SweepResult res2 = run_sweep(ws.cfg);
    for (const auto& [lambda, recs] : res.cells) {
        const auto& other = res2.cells.at(lambda);
        REQUIRE(other.size() == recs.size());
        for (size_t i = 0; i < recs.size(); ++i) CHECK(other[i].value == recs[i].value);
    }

    // Restricting the grid reruns nothing else.
    SweepResult only = run_sweep(ws.cfg, {1e3});
    CHECK(only.cells.size() == 1);
    CHECK(only.cells.count(1e3) == 1);

    report(ws.cfg.output_dir);
    fs::path run = ws.cfg.output_dir;
    CHECK(fs::exists(run / "records.csv"));
    CHECK(fs::exists(run / "summary.md"));
    CHECK(fs::exists(run / "curves" / "ppl_A.csv"));
    CHECK(fs::exists(run / "curves" / "mc_acc_B.csv"));
    CHECK(fs::exists(run / "plots" / "ppl_A.svg"));

    // Curve files: one row per grid lambda plus header.
    std::ifstream cf(run / "curves" / "ppl_A.csv");
    std::string line;
    int rows = 0;
    while (std::getline(cf, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 1 + static_cast<int>(ws.cfg.lambda_grid.size()));

    // Summary accuracy cells match a recompute from records.csv.
    std::ifstream rf(run / "records.csv");
    std::getline(rf, line);  // header
    std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;  // (lambda,tag)
    while (std::getline(rf, line)) {
        std::stringstream ss(line);
        std::string metric, dataset, tag, lambda, ckpt, value, n;
        std::getline(ss, metric, ',');
        std::getline(ss, dataset, ',');
        std::getline(ss, tag, ',');
        std::getline(ss, lambda, ',');
        std::getline(ss, ckpt, ',');
        std::getline(ss, value, ',');
        std::getline(ss, n, ',');
        if (metric != "mc_acc") continue;
        auto& cell = acc[{lambda, tag}];
        cell.first += std::stod(value);
        cell.second += 1;
    }
    std::ifstream sf(run / "summary.md");
    int checked = 0;
    while (std::getline(sf, line)) {
        if (line.empty() || line[0] != '|' || line.find("lambda") != std::string::npos ||
            line.find("---") != std::string::npos)
            continue;
        std::stringstream ss(line);
        std::string blank, label, acc_a, acc_b;
        std::getline(ss, blank, '|');
        std::getline(ss, label, '|');
        std::getline(ss, acc_a, '|');
        std::getline(ss, acc_b, '|');
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(' ');
            size_t b = s.find_last_not_of(' ');
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string lam = trim(label) == "baseline" ? "-1" : trim(label);
        for (const std::string tag : {"A", "B"}) {
            auto it = acc.end();
            for (auto jt = acc.begin(); jt != acc.end(); ++jt)
                if (jt->first.second == tag && std::stod(jt->first.first) == std::stod(lam))
                    it = jt;
            if (it == acc.end()) continue;
            double expect = it->second.first / it->second.second;
            double got = std::stod(trim(tag == "A" ? acc_a : acc_b));
            CHECK(std::abs(got - expect) < 1e-12);
            ++checked;
        }
    }
    CHECK(checked == 6);  // baseline + two lambdas, two tasks each
}

TEST_CASE("generate_workspace emits a loadable, valid config") {
    fs::path dir = fs::temp_directory_path() / "clt_test_exp_ws";
    fs::remove_all(dir);
    std::string cfg_path = generate_workspace(dir.string());
    SweepConfig cfg = SweepConfig::load(cfg_path);
    cfg.validate();
    CHECK(cfg.lambda_grid == std::vector<double>{0.0, 1e2, 1e3, 1e6, 1e9, 1e12});
    CHECK(cfg.regularizer.kind == RegularizerKind::Ewc);
    CHECK(fs::exists(fs::path(cfg.task_a_dir) / "doc_00000.txt"));
    CHECK(load_mc(cfg.fisher_dataset).size() >= 32);
    fs::remove_all(dir);
}
