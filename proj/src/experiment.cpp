#include "clt/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace clt {

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& ctx) {
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw std::runtime_error("config: unknown key '" + key + "' in " + ctx);
}

ModelConfig model_from_json(const json& j) {
    check_keys(j, {"n_layers", "d_model", "n_heads", "context_length", "seed"}, "model");
    ModelConfig c;
    if (j.contains("n_layers")) c.n_layers = j["n_layers"].get<int>();
    if (j.contains("d_model")) c.d_model = j["d_model"].get<int>();
    if (j.contains("n_heads")) c.n_heads = j["n_heads"].get<int>();
    if (j.contains("context_length")) c.context_length = j["context_length"].get<int>();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    return c;
}

json model_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"context_length", c.context_length},
            {"seed", c.seed}};
}

TrainConfig train_from_json(const json& j, const std::string& ctx) {
    check_keys(j,
               {"learning_rate", "warmup_ratio", "weight_decay", "batch_size",
                "grad_accum_steps", "total_steps", "seed"},
               ctx);
    TrainConfig c;
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("warmup_ratio")) c.warmup_ratio = j["warmup_ratio"].get<double>();
    if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("grad_accum_steps")) c.grad_accum_steps = j["grad_accum_steps"].get<int>();
    if (j.contains("total_steps")) c.total_steps = j["total_steps"].get<int64_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    return c;
}

json train_to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"warmup_ratio", c.warmup_ratio},
            {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},
            {"grad_accum_steps", c.grad_accum_steps},
            {"total_steps", c.total_steps},
            {"seed", c.seed}};
}

EvalSuite suite_from_json(const json& j, const std::string& ctx) {
    check_keys(j, {"heldout_dir", "qa", "mc"}, ctx);
    EvalSuite s;
    s.heldout_dir = j.at("heldout_dir").get<std::string>();
    s.qa = j.at("qa").get<std::string>();
    for (const auto& p : j.at("mc")) s.mc.push_back(p.get<std::string>());
    return s;
}

json suite_to_json(const EvalSuite& s) {
    return {{"heldout_dir", s.heldout_dir}, {"qa", s.qa}, {"mc", s.mc}};
}

uint64_t fnv1a(const std::string& s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

json shared_hash_fields(const SweepConfig& c) {
    return {{"model", model_to_json(c.model)},
            {"task_a_dir", c.task_a_dir},
            {"task_b_dir", c.task_b_dir},
            {"fisher_dataset", c.fisher_dataset},
            {"eval_a", suite_to_json(c.eval_a)},
            {"eval_b", suite_to_json(c.eval_b)},
            {"regularizer",
             {{"kind", regularizer_kind_name(c.regularizer.kind)},
              {"si_epsilon", c.regularizer.si_epsilon},
              {"lwf_temperature", c.regularizer.lwf_temperature},
              {"lr_gamma", c.regularizer.lr_gamma},
              {"lr_min", c.regularizer.lr_min}}},
            {"train_a", train_to_json(c.train_a)},
            {"judge_train", train_to_json(c.judge_train)},
            {"max_new", c.max_new},
            {"mc_norm", c.mc_norm == McNorm::PerToken ? "per_token" : "none"},
            {"qa_ppl_mode", c.qa_mode == QaPplMode::Joint ? "joint" : "answer_only"},
            {"seed", c.seed}};
}

std::string file_stem(const std::string& path) { return fs::path(path).stem().string(); }

void write_text_file(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc | std::ios::binary);
        if (!os) throw std::runtime_error("cannot open " + tmp);
        os << content;
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("rename failed for " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

std::string fmt_full(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void SweepConfig::validate() const {
    model.validate();
    regularizer.validate();
    train_a.validate();
    train_b.validate();
    judge_train.validate();
    if (lambda_grid.empty()) throw std::runtime_error("config: lambda_grid must be non-empty");
    for (size_t i = 0; i < lambda_grid.size(); ++i) {
        if (lambda_grid[i] < 0) throw std::runtime_error("config: lambda values must be >= 0");
        if (i > 0 && lambda_grid[i] <= lambda_grid[i - 1])
            throw std::runtime_error("config: lambda_grid must be strictly increasing");
    }
    if (max_new < 1) throw std::runtime_error("config: max_new must be >= 1");
    if (output_dir.empty()) throw std::runtime_error("config: output_dir must be set");
    auto need_dir = [](const std::string& p, const char* what) {
        if (!fs::is_directory(p))
            throw std::runtime_error(std::string("config: missing ") + what + " directory: " + p);
    };
    auto need_file = [](const std::string& p, const char* what) {
        if (!fs::is_regular_file(p))
            throw std::runtime_error(std::string("config: missing ") + what + " file: " + p);
    };
    need_dir(task_a_dir, "task_a corpus");
    need_dir(task_b_dir, "task_b corpus");
    need_file(fisher_dataset, "fisher dataset");
    for (const EvalSuite* s : {&eval_a, &eval_b}) {
        need_dir(s->heldout_dir, "heldout");
        need_file(s->qa, "qa");
        if (s->mc.empty()) throw std::runtime_error("config: eval suite needs at least one mc set");
        for (const auto& m : s->mc) need_file(m, "mc");
    }
}

uint64_t SweepConfig::baseline_hash() const { return fnv1a(shared_hash_fields(*this).dump()); }

uint64_t SweepConfig::result_hash() const {
    json j = shared_hash_fields(*this);
    j["lambda_grid"] = lambda_grid;
    j["train_b"] = train_to_json(train_b);
    return fnv1a(j.dump());
}

SweepConfig SweepConfig::load(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::exception& e) {
        throw std::runtime_error("config parse error in " + path + ": " + e.what());
    }
    check_keys(j,
               {"model", "task_a_dir", "task_b_dir", "fisher_dataset", "eval_a", "eval_b",
                "lambda_grid", "regularizer", "train_a", "train_b", "judge_train", "max_new",
                "mc_norm", "qa_ppl_mode", "seed", "output_dir"},
               "top level");
    SweepConfig c;
    if (j.contains("model")) c.model = model_from_json(j["model"]);
    c.task_a_dir = j.at("task_a_dir").get<std::string>();
    c.task_b_dir = j.at("task_b_dir").get<std::string>();
    c.fisher_dataset = j.at("fisher_dataset").get<std::string>();
    c.eval_a = suite_from_json(j.at("eval_a"), "eval_a");
    c.eval_b = suite_from_json(j.at("eval_b"), "eval_b");
    if (j.contains("lambda_grid")) c.lambda_grid = j["lambda_grid"].get<std::vector<double>>();
    if (j.contains("regularizer")) {
        const json& r = j["regularizer"];
        check_keys(r, {"kind", "si_epsilon", "lwf_temperature", "lr_gamma", "lr_min"},
                   "regularizer");
        c.regularizer.kind = regularizer_kind_from(r.at("kind").get<std::string>());
        if (r.contains("si_epsilon")) c.regularizer.si_epsilon = r["si_epsilon"].get<double>();
        if (r.contains("lwf_temperature"))
            c.regularizer.lwf_temperature = r["lwf_temperature"].get<double>();
        if (r.contains("lr_gamma")) c.regularizer.lr_gamma = r["lr_gamma"].get<double>();
        if (r.contains("lr_min")) c.regularizer.lr_min = r["lr_min"].get<double>();
    }
    if (j.contains("train_a")) c.train_a = train_from_json(j["train_a"], "train_a");
    if (j.contains("train_b")) c.train_b = train_from_json(j["train_b"], "train_b");
    if (j.contains("judge_train")) c.judge_train = train_from_json(j["judge_train"], "judge_train");
    if (j.contains("max_new")) c.max_new = j["max_new"].get<int>();
    if (j.contains("mc_norm")) {
        std::string n = j["mc_norm"].get<std::string>();
        if (n == "per_token") c.mc_norm = McNorm::PerToken;
        else if (n == "none") c.mc_norm = McNorm::None;
        else throw std::runtime_error("config: mc_norm must be per_token or none");
    }
    if (j.contains("qa_ppl_mode")) {
        std::string n = j["qa_ppl_mode"].get<std::string>();
        if (n == "joint") c.qa_mode = QaPplMode::Joint;
        else if (n == "answer_only") c.qa_mode = QaPplMode::AnswerOnly;
        else throw std::runtime_error("config: qa_ppl_mode must be joint or answer_only");
    }
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    c.output_dir = j.at("output_dir").get<std::string>();
    return c;
}

void SweepConfig::save(const std::string& path) const {
    json j = shared_hash_fields(*this);
    j["lambda_grid"] = lambda_grid;
    j["train_b"] = train_to_json(train_b);
    j["output_dir"] = output_dir;
    write_text_file(path, j.dump(2) + "\n");
}

std::string lambda_label(double lambda) {
    if (lambda == 0.0) return "0";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", lambda);
    std::string s(buf);
    s.erase(std::remove(s.begin(), s.end(), '+'), s.end());
    return s;
}

std::vector<EvalRecord> eval_checkpoint(const CausalLM& model, const SweepConfig& cfg,
                                        double lambda, const std::string& checkpoint_id,
                                        const CausalLM& judge) {
    std::vector<EvalRecord> out;
    auto add = [&](const std::string& metric, const std::string& dataset, const std::string& tag,
                   double value, int64_t n) {
        out.push_back({metric, dataset, tag, lambda, checkpoint_id, value, n});
    };
    struct TaskSuite {
        const EvalSuite* suite;
        std::string tag;
    };
    for (const TaskSuite& ts : {TaskSuite{&cfg.eval_a, "A"}, TaskSuite{&cfg.eval_b, "B"}}) {
        Corpus heldout = load_corpus_dir(ts.suite->heldout_dir, ts.tag);
        add("ppl", "heldout_" + ts.tag, ts.tag, text_perplexity(model, heldout.documents),
            static_cast<int64_t>(heldout.documents.size()));
        std::vector<QAPair> pairs = load_qa(ts.suite->qa);
        add("ppl", file_stem(ts.suite->qa), ts.tag, qa_perplexity(model, pairs, cfg.qa_mode),
            static_cast<int64_t>(pairs.size()));
        for (const std::string& mc_path : ts.suite->mc) {
            std::vector<MCItem> items = load_mc(mc_path);
            add("mc_acc", file_stem(mc_path), ts.tag, mc_accuracy(model, items, cfg.mc_norm),
                static_cast<int64_t>(items.size()));
        }
    }
    std::vector<QAPair> jq = load_qa(cfg.eval_b.qa);
    std::vector<std::string> questions;
    questions.reserve(jq.size());
    for (const QAPair& p : jq) questions.push_back(p.question);
    JudgeResult jr = judge_perplexity(model, judge, questions, cfg.max_new);
    add("judge_ppl", file_stem(cfg.eval_b.qa) + "_gen", "B", jr.value, jr.n_scored);
    return out;
}

BaselineArtifacts run_baseline(const SweepConfig& cfg) {
    cfg.validate();
    fs::path base = fs::path(cfg.output_dir) / "baseline";
    fs::create_directories(base);
    cfg.save((fs::path(cfg.output_dir) / "config.json").string());

    std::string ckpt_path = (base / "model_a.ckpt").string();
    std::string judge_path = (base / "judge.ckpt").string();
    std::string fisher_path = (base / "fisher.bin").string();
    std::string si_path = (base / "si_importance.bin").string();
    std::string recs_path = (base / "records.jsonl").string();
    std::string hash_path = (base / "config.hash").string();

    bool need_si = cfg.regularizer.kind == RegularizerKind::Si;
    std::string want_hash = std::to_string(cfg.baseline_hash());
    bool cached = fs::exists(hash_path) && read_text_file(hash_path) == want_hash &&
                  fs::exists(ckpt_path) && fs::exists(judge_path) && fs::exists(fisher_path) &&
                  fs::exists(recs_path) && (!need_si || fs::exists(si_path));

    BaselineArtifacts art;
    if (cached) {
        Checkpoint ck = load_checkpoint(ckpt_path);
        art.model_a = std::make_shared<CausalLM>(CausalLM{ck.config, std::move(ck.params)});
        Checkpoint jk = load_checkpoint(judge_path);
        art.judge = std::make_shared<CausalLM>(CausalLM{jk.config, std::move(jk.params)});
        uint64_t anchor = params_hash(art.model_a->params);
        art.snapshot = std::make_shared<TaskSnapshot>(
            TaskSnapshot::of(*art.model_a, cfg.regularizer.kind == RegularizerKind::Lwf));
        art.fisher = std::make_shared<FisherDiagonal>(load_fisher(fisher_path, anchor));
        if (need_si) {
            FisherDiagonal si = load_fisher(si_path, anchor);
            art.si_importance = std::make_shared<ParameterStore>(std::move(si.values));
        }
        art.records = load_records(recs_path);
        art.loaded_from_cache = true;
        return art;
    }

    fs::remove(recs_path);

    Corpus corpus_a = load_corpus_dir(cfg.task_a_dir, "A");
    auto model = std::make_shared<CausalLM>(CausalLM::init(cfg.model));
    BatchStream stream_a(corpus_a, cfg.model.context_length, cfg.train_a.batch_size,
                         cfg.train_a.seed);
    TrainResult tr = train_task(*model, stream_a, cfg.train_a, {}, ckpt_path,
                                (base / "train_a_log.jsonl").string(),
                                /*accumulate_si=*/need_si, cfg.regularizer.si_epsilon);
    uint64_t anchor = params_hash(model->params);

    if (need_si) {
        ParameterStore importance = si_consolidate(*tr.si_state, model->params);
        FisherDiagonal wrap;
        wrap.values = importance;
        wrap.n_examples = cfg.train_a.total_steps;
        wrap.template_id = "si_path_integral";
        wrap.anchor_hash = anchor;
        save_fisher(si_path, wrap);
        art.si_importance = std::make_shared<ParameterStore>(std::move(importance));
    }

    art.snapshot = std::make_shared<TaskSnapshot>(
        TaskSnapshot::of(*model, cfg.regularizer.kind == RegularizerKind::Lwf));
    FisherDiagonal fisher = estimate_fisher(*model, load_mc(cfg.fisher_dataset));
    save_fisher(fisher_path, fisher);
    art.fisher = std::make_shared<FisherDiagonal>(std::move(fisher));

    ModelConfig judge_cfg = cfg.model;
    judge_cfg.seed = cfg.model.seed ^ 0x6a75646765ull;
    auto judge = std::make_shared<CausalLM>(CausalLM::init(judge_cfg));
    Corpus corpus_b = load_corpus_dir(cfg.task_b_dir, "B");
    BatchStream stream_j(corpus_b, cfg.model.context_length, cfg.judge_train.batch_size,
                         cfg.judge_train.seed);
    train_task(*judge, stream_j, cfg.judge_train, {}, judge_path,
               (base / "train_judge_log.jsonl").string());

    art.model_a = model;
    art.judge = judge;
    art.records = eval_checkpoint(*model, cfg, -1.0, "baseline", *judge);
    append_records(recs_path, art.records);
    write_text_file(hash_path, want_hash);
    return art;
}

SweepResult run_sweep(const SweepConfig& cfg, const std::vector<double>& only) {
    BaselineArtifacts base = run_baseline(cfg);
    SweepResult result;
    result.baseline = base.records;
    result.config_hash = cfg.result_hash();

    Corpus corpus_b = load_corpus_dir(cfg.task_b_dir, "B");
    double lr_b = lr_decay(cfg.train_b.learning_rate, cfg.regularizer.lr_gamma,
                           cfg.regularizer.lr_min);

    for (double lambda : cfg.lambda_grid) {
        if (!only.empty() && std::find(only.begin(), only.end(), lambda) == only.end()) continue;
        std::string label = lambda_label(lambda);
        fs::path cell = fs::path(cfg.output_dir) / "sweep" / ("lambda_" + label);
        fs::create_directories(cell);
        std::string recs_path = (cell / "records.jsonl").string();
        std::string done_path = (cell / "done").string();
        if (fs::exists(done_path) && fs::exists(recs_path)) {
            result.cells[lambda] = load_records(recs_path);
            continue;
        }
        try {
            fs::remove(recs_path);
            CausalLM model{cfg.model, base.snapshot->anchor};
            BatchStream stream(corpus_b, cfg.model.context_length, cfg.train_b.batch_size,
                               cfg.train_b.seed);
            TrainConfig tb = cfg.train_b;
            tb.learning_rate = lr_b;
            std::vector<BoundRegularizer> regs;
            if (cfg.regularizer.kind != RegularizerKind::None) {
                BoundRegularizer r;
                r.spec = cfg.regularizer;
                r.spec.lambda = lambda;
                r.snapshot = base.snapshot;
                r.fisher = base.fisher;
                r.si_importance = base.si_importance;
                regs.push_back(std::move(r));
            }
            train_task(model, stream, tb, regs, (cell / "model_b.ckpt").string(),
                       (cell / "train_log.jsonl").string());
            std::vector<EvalRecord> recs =
                eval_checkpoint(model, cfg, lambda, "lambda_" + label, *base.judge);
            append_records(recs_path, recs);
            write_text_file(done_path, "ok\n");
            result.cells[lambda] = std::move(recs);
        } catch (const std::exception& e) {
            write_text_file((cell / "failed.txt").string(), e.what());
            result.failed.push_back(lambda);
        }
    }
    return result;
}

// ---------------------------------------------------------------------
// Reporting

namespace {

struct CurvePoint {
    double lambda;
    bool present = false;
    double value = 0.0;
};

void write_svg_curve(const std::string& path, const std::string& title,
                     const std::vector<std::pair<double, double>>& pts,  // (plot_x, value)
                     double baseline_value, bool has_baseline) {
    const double W = 520, H = 340, ml = 70, mr = 20, mt = 40, mb = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (auto [x, y] : pts) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    }
    if (has_baseline) {
        ymin = std::min(ymin, baseline_value);
        ymax = std::max(ymax, baseline_value);
    }
    if (!(xmax > xmin)) xmax = xmin + 1;
    if (!(ymax > ymin)) ymax = ymin + 1;
    double ypad = 0.05 * (ymax - ymin);
    ymin -= ypad;
    ymax += ypad;
    auto X = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (W - ml - mr); };
    auto Y = [&](double y) { return H - mb - (y - ymin) / (ymax - ymin) * (H - mt - mb); };

    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << W / 2 << "' y='24' text-anchor='middle' font-size='14'>" << title
        << "</text>\n";
    svg << "<line x1='" << ml << "' y1='" << H - mb << "' x2='" << W - mr << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << H - mb
        << "' stroke='black'/>\n";
    svg << "<text x='" << W / 2 << "' y='" << H - 12
        << "' text-anchor='middle' font-size='11'>log10(lambda)  (leftmost point: lambda=0)</text>\n";
    if (has_baseline) {
        svg << "<line x1='" << ml << "' y1='" << Y(baseline_value) << "' x2='" << W - mr
            << "' y2='" << Y(baseline_value)
            << "' stroke='gray' stroke-dasharray='6,4'/>\n";
        svg << "<text x='" << W - mr - 4 << "' y='" << Y(baseline_value) - 4
            << "' text-anchor='end' font-size='10' fill='gray'>baseline</text>\n";
    }
    svg << "<polyline fill='none' stroke='steelblue' stroke-width='2' points='";
    for (auto [x, y] : pts) svg << X(x) << "," << Y(y) << " ";
    svg << "'/>\n";
    for (auto [x, y] : pts)
        svg << "<circle cx='" << X(x) << "' cy='" << Y(y) << "' r='3' fill='steelblue'/>\n";
    for (int i = 0; i <= 4; ++i) {
        double yv = ymin + (ymax - ymin) * i / 4.0;
        svg << "<text x='" << ml - 6 << "' y='" << Y(yv) + 4
            << "' text-anchor='end' font-size='10'>" << yv << "</text>\n";
    }
    svg << "</svg>\n";
    write_text_file(path, svg.str());
}

}  // namespace

void report(const std::string& run_dir) {
    SweepConfig cfg = SweepConfig::load((fs::path(run_dir) / "config.json").string());

    std::vector<EvalRecord> all;
    std::string base_recs = (fs::path(run_dir) / "baseline" / "records.jsonl").string();
    if (fs::exists(base_recs)) {
        auto r = load_records(base_recs);
        all.insert(all.end(), r.begin(), r.end());
    }
    fs::path sweep_dir = fs::path(run_dir) / "sweep";
    std::vector<fs::path> cells;
    if (fs::is_directory(sweep_dir))
        for (const auto& e : fs::directory_iterator(sweep_dir))
            if (e.is_directory() && fs::exists(e.path() / "records.jsonl"))
                cells.push_back(e.path());
    std::sort(cells.begin(), cells.end());
    for (const auto& cell : cells) {
        auto r = load_records((cell / "records.jsonl").string());
        all.insert(all.end(), r.begin(), r.end());
    }
    if (all.empty()) throw std::runtime_error("report: no records under " + run_dir);

    // records.csv
    {
        std::ostringstream csv;
        csv << "metric,dataset,tag,lambda,checkpoint,value,n_items\n";
        for (const EvalRecord& r : all)
            csv << r.metric << "," << r.dataset << "," << r.tag << "," << fmt_full(r.lambda)
                << "," << r.checkpoint << "," << fmt_full(r.value) << "," << r.n_items << "\n";
        write_text_file((fs::path(run_dir) / "records.csv").string(), csv.str());
    }

    // Per-metric lambda curves: mean of the metric's records per cell.
    fs::create_directories(fs::path(run_dir) / "curves");
    fs::create_directories(fs::path(run_dir) / "plots");
    double min_pos = 0.0;
    for (double l : cfg.lambda_grid)
        if (l > 0 && (min_pos == 0.0 || l < min_pos)) min_pos = l;
    double sentinel = min_pos > 0 ? min_pos / 100.0 : 1.0;  // lambda=0 plot position

    auto mean_for = [&](const std::string& metric, const std::string& tag, double lambda,
                        bool& present) {
        double sum = 0.0;
        int n = 0;
        for (const EvalRecord& r : all)
            if (r.metric == metric && r.tag == tag && r.lambda == lambda) {
                sum += r.value;
                ++n;
            }
        present = n > 0;
        return n > 0 ? sum / n : 0.0;
    };

    for (const std::string& metric : {"ppl", "mc_acc", "judge_ppl"}) {
        for (const std::string& tag : {"A", "B"}) {
            bool any = false;
            std::ostringstream csv;
            csv << "lambda,plot_x,value\n";
            std::vector<std::pair<double, double>> pts;
            for (double lambda : cfg.lambda_grid) {
                bool present = false;
                double v = mean_for(metric, tag, lambda, present);
                double px = lambda == 0.0 ? sentinel : lambda;
                csv << lambda_label(lambda) << "," << fmt_full(px) << ",";
                if (present) {
                    csv << fmt_full(v);
                    pts.emplace_back(std::log10(px), v);
                    any = true;
                }
                csv << "\n";  // absent cell: explicit gap, not zero
            }
            if (!any) continue;
            std::string name = metric + "_" + tag;
            write_text_file((fs::path(run_dir) / "curves" / (name + ".csv")).string(), csv.str());
            bool has_base = false;
            double base_v = mean_for(metric, tag, -1.0, has_base);
            write_svg_curve((fs::path(run_dir) / "plots" / (name + ".svg")).string(),
                            metric + " (" + tag + ") vs lambda", pts, base_v, has_base);
        }
    }

    // summary.md: mean MC accuracy per lambda per task.
    {
        std::ostringstream md;
        md << "# Sweep summary\n\n";
        md << "Mean multiple-choice accuracy per regularisation strength (baseline row is the\n"
              "pre-task-B checkpoint, recorded with lambda = -1 in records.csv).\n\n";
        md << "| lambda | mean_mc_acc_A | mean_mc_acc_B | ppl_heldout_A | ppl_heldout_B |\n";
        md << "|---|---|---|---|---|\n";
        std::vector<double> rows = {-1.0};
        rows.insert(rows.end(), cfg.lambda_grid.begin(), cfg.lambda_grid.end());
        for (double lambda : rows) {
            bool pa = false, pb = false, ha = false, hb = false;
            double acc_a = mean_for("mc_acc", "A", lambda, pa);
            double acc_b = mean_for("mc_acc", "B", lambda, pb);
            double pha = 0.0, phb = 0.0;
            for (const EvalRecord& r : all) {
                if (r.lambda != lambda || r.metric != "ppl") continue;
                if (r.dataset == "heldout_A") { pha = r.value; ha = true; }
                if (r.dataset == "heldout_B") { phb = r.value; hb = true; }
            }
            md << "| " << (lambda == -1.0 ? std::string("baseline") : lambda_label(lambda))
               << " | " << (pa ? fmt_full(acc_a) : "-") << " | " << (pb ? fmt_full(acc_b) : "-")
               << " | " << (ha ? fmt_full(pha) : "-") << " | " << (hb ? fmt_full(phb) : "-")
               << " |\n";
        }
        write_text_file((fs::path(run_dir) / "summary.md").string(), md.str());
    }
}

// ---------------------------------------------------------------------
// Default synthetic workspace

std::string generate_workspace(const std::string& dir) {
    fs::path data = fs::path(dir) / "data";
    fs::create_directories(data);

    save_corpus_dir((data / "corpus_a").string(), synth_corpus(Grammar::A, 400, 101));
    save_corpus_dir((data / "corpus_b").string(), synth_corpus(Grammar::B, 400, 202));
    save_corpus_dir((data / "heldout_a").string(), synth_corpus(Grammar::A, 40, 9101));
    save_corpus_dir((data / "heldout_b").string(), synth_corpus(Grammar::B, 40, 9285));
    save_mc((data / "fisher_a.jsonl").string(), synth_mc_items(Grammar::A, 64, 303));
    save_mc((data / "mc_a.jsonl").string(), synth_mc_items(Grammar::A, 72, 404));
    save_mc((data / "mc_b.jsonl").string(), synth_mc_items(Grammar::B, 72, 505));
    save_qa((data / "qa_a.jsonl").string(), synth_qa_pairs(Grammar::A, 32, 606));
    save_qa((data / "qa_b.jsonl").string(), synth_qa_pairs(Grammar::B, 32, 707));

    SweepConfig cfg;
    cfg.model.n_layers = 2;
    cfg.model.d_model = 64;
    cfg.model.n_heads = 4;
    cfg.model.context_length = 128;
    cfg.model.seed = 7;
    cfg.task_a_dir = (data / "corpus_a").string();
    cfg.task_b_dir = (data / "corpus_b").string();
    cfg.fisher_dataset = (data / "fisher_a.jsonl").string();
    cfg.eval_a = {(data / "heldout_a").string(), (data / "qa_a.jsonl").string(),
                  {(data / "mc_a.jsonl").string()}};
    cfg.eval_b = {(data / "heldout_b").string(), (data / "qa_b.jsonl").string(),
                  {(data / "mc_b.jsonl").string()}};
    cfg.regularizer.kind = RegularizerKind::Ewc;
    cfg.regularizer.lr_gamma = 0.25;  // per-task learning-rate decay for task B
    cfg.train_a.total_steps = 1200;
    cfg.train_a.seed = 11;
    cfg.train_b.total_steps = 1800;
    cfg.train_b.seed = 19;
    cfg.judge_train.total_steps = 1200;
    cfg.judge_train.seed = 17;
    cfg.max_new = 32;
    cfg.seed = 1;
    cfg.output_dir = (fs::path(dir) / "run").string();

    std::string cfg_path = (fs::path(dir) / "config.json").string();
    cfg.save(cfg_path);
    return cfg_path;
}

}  // namespace clt
