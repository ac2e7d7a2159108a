#include "clt/data.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>

#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace clt {

TokenSeq tokenize(const std::string& text, bool add_bos, bool add_eos) {
    TokenSeq out;
    out.reserve(text.size() + 2);
    if (add_bos) out.push_back(kBos);
    for (unsigned char c : text) out.push_back(static_cast<int32_t>(c));
    if (add_eos) out.push_back(kEos);
    return out;
}

std::string detokenize(const TokenSeq& tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int32_t t : tokens)
        if (t >= 0 && t < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(t)));
    return out;
}

// ---------------------------------------------------------------------
// Synthetic two-language corpora.
//
// Both inventories draw on the same letter pool so the byte sets of the
// languages coincide, yet no letter *pair* is shared: consonant-vowel
// adjacencies are partitioned by an index-parity rule, A words run
// consonant-first/vowel-last and B words the reverse, and CC/VV clusters
// are reserved to B. Word forms, transition structure and byte bigrams
// are therefore all disjoint while every byte occurs in both languages.

namespace {

const std::vector<std::string>& grammar_words(Grammar g) {
    static const std::vector<std::string> words_a = {
        "bado", "badoku", "bine",   "bure", "demido", "kide", "kile", "kulo",
        "kute", "lobule", "mure",   "noki", "pado",   "pale", "pate", "patoba",
        "pite", "resu",   "rosi",   "sanesu", "sare", "suro", "teka", "toki",
    };
    static const std::vector<std::string> words_b = {
        "abenub", "akel",    "apet",    "apont", "aptakon", "etapbot", "etuk",   "ikbel",
        "ipenp",  "iseen",   "isoabod", "isoluik", "isriel", "onub",   "oras",   "otas",
        "otisp",  "otubol",  "ubot",    "umerl", "upel",    "usdab",   "userab", "uslis",
    };
    return g == Grammar::A ? words_a : words_b;
}

uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

uint64_t grammar_salt(Grammar g) { return g == Grammar::A ? 0x517a0c0de01ull : 0x517a0c0de02ull; }

// Fixed successor preferences for state (w1, w2): three candidates with
// weights 0.6 / 0.3 / 0.1.
std::array<int, 3> successors(Grammar g, int w1, int w2) {
    int n = static_cast<int>(grammar_words(g).size());
    uint64_t h = splitmix64(static_cast<uint64_t>(w1) * 1315423911ull +
                            static_cast<uint64_t>(w2) * 2654435761ull + grammar_salt(g));
    return {static_cast<int>(h % n), static_cast<int>((h >> 16) % n),
            static_cast<int>((h >> 32) % n)};
}

struct Walker {
    Grammar g;
    std::mt19937_64& rng;
    int w1, w2;

    Walker(Grammar gram, std::mt19937_64& r) : g(gram), rng(r) {
        int n = static_cast<int>(grammar_words(g).size());
        w1 = static_cast<int>(rng() % n);
        w2 = successors(g, w1, w1)[0];
    }

    int step() {
        auto cand = successors(g, w1, w2);
        double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        int next = u < 0.6 ? cand[0] : (u < 0.9 ? cand[1] : cand[2]);
        w1 = w2;
        w2 = next;
        return next;
    }

    // Most likely next word (the weight-0.6 candidate), without advancing.
    int top_step() {
        int next = successors(g, w1, w2)[0];
        w1 = w2;
        w2 = next;
        return next;
    }

    std::string word(int i) const { return grammar_words(g)[static_cast<size_t>(i)]; }

    std::string sentence(int n_words) {
        std::string s = word(w2);
        for (int i = 1; i < n_words; ++i) s += " " + word(step());
        return s + ".";
    }
};

int rng_range(std::mt19937_64& rng, int lo, int hi) {
    return lo + static_cast<int>(rng() % static_cast<uint64_t>(hi - lo + 1));
}

}  // namespace

Corpus synth_corpus(Grammar g, int n_docs, uint64_t seed) {
    if (n_docs <= 0) throw std::invalid_argument("synth_corpus: n_docs must be positive");
    std::mt19937_64 rng(splitmix64(seed ^ grammar_salt(g)));
    Corpus c;
    c.name = g == Grammar::A ? "synth_a" : "synth_b";
    c.language = g == Grammar::A ? "A" : "B";
    for (int d = 0; d < n_docs; ++d) {
        Walker w(g, rng);
        std::string doc;
        int n_sent = rng_range(rng, 4, 9);
        for (int s = 0; s < n_sent; ++s) {
            if (s > 0) doc += (s % 3 == 0) ? "\n" : " ";
            doc += w.sentence(rng_range(rng, 5, 11));
        }
        doc += "\n";
        c.documents.push_back(std::move(doc));
    }
    return c;
}

std::vector<MCItem> synth_mc_items(Grammar g, int n, uint64_t seed) {
    if (n <= 0) throw std::invalid_argument("synth_mc_items: n must be positive");
    std::mt19937_64 rng(splitmix64(seed ^ grammar_salt(g) ^ 0x4d43ull));
    std::vector<MCItem> items;
    int nw = static_cast<int>(grammar_words(g).size());
    while (static_cast<int>(items.size()) < n) {
        Walker w(g, rng);
        MCItem item;
        int k = rng_range(rng, 4, 9);
        item.question = w.word(w.w2);
        for (int i = 1; i < k; ++i) item.question += " " + w.word(w.step());
        // Gold is the most likely two-word continuation of the prefix. A
        // terminal period keeps the full corpus byte set inside the MC
        // items, so Fisher estimated from them covers every text byte.
        std::string gold = w.word(w.top_step());
        gold += " " + w.word(w.top_step()) + ".";
        std::vector<std::string> choices = {gold};
        while (choices.size() < 4) {
            std::string alt = grammar_words(g)[static_cast<size_t>(rng_range(rng, 0, nw - 1))] +
                              " " +
                              grammar_words(g)[static_cast<size_t>(rng_range(rng, 0, nw - 1))] +
                              ".";
            if (std::find(choices.begin(), choices.end(), alt) == choices.end())
                choices.push_back(alt);
        }
        item.gold_index = rng_range(rng, 0, 3);
        std::swap(choices[0], choices[static_cast<size_t>(item.gold_index)]);
        item.choices = std::move(choices);
        items.push_back(std::move(item));
    }
    return items;
}

std::vector<QAPair> synth_qa_pairs(Grammar g, int n, uint64_t seed) {
    if (n <= 0) throw std::invalid_argument("synth_qa_pairs: n must be positive");
    std::mt19937_64 rng(splitmix64(seed ^ grammar_salt(g) ^ 0x5141ull));
    std::vector<QAPair> pairs;
    for (int i = 0; i < n; ++i) {
        Walker w(g, rng);
        QAPair p;
        p.question = w.sentence(rng_range(rng, 5, 8));
        p.answer = w.sentence(rng_range(rng, 5, 8));
        pairs.push_back(std::move(p));
    }
    return pairs;
}

// ---------------------------------------------------------------------
// Batch stream

BatchStream::BatchStream(const Corpus& corpus, int context_length, int batch_size, uint64_t seed)
    : batch_size_(batch_size) {
    if (batch_size < 1) throw std::invalid_argument("BatchStream: batch_size must be >= 1");
    if (context_length < 2) throw std::invalid_argument("BatchStream: context_length must be >= 2");
    if (corpus.documents.empty()) throw std::invalid_argument("BatchStream: empty corpus");
    size_t L = static_cast<size_t>(context_length);
    for (const std::string& doc : corpus.documents) {
        TokenSeq toks = tokenize(doc, /*bos=*/true, /*eos=*/false);
        for (size_t off = 0; off < toks.size(); off += L) {
            TokenSeq chunk(toks.begin() + static_cast<ptrdiff_t>(off),
                           toks.begin() + static_cast<ptrdiff_t>(std::min(off + L, toks.size())));
            chunk.resize(L, kPad);
            chunks_.push_back(std::move(chunk));
        }
    }
    order_.resize(chunks_.size());
    for (size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order_.begin(), order_.end(), rng);
}

std::vector<TokenSeq> BatchStream::next() {
    std::vector<TokenSeq> batch;
    batch.reserve(static_cast<size_t>(batch_size_));
    for (int i = 0; i < batch_size_; ++i) {
        batch.push_back(chunks_[order_[cursor_]]);
        cursor_ = (cursor_ + 1) % order_.size();
    }
    return batch;
}

void BatchStream::skip(int64_t n_batches) {
    cursor_ = (cursor_ + static_cast<size_t>(n_batches) * static_cast<size_t>(batch_size_)) %
              order_.size();
}

// ---------------------------------------------------------------------
// JSON-lines record I/O

namespace {

json parse_line(const std::string& line, const std::string& path, int lineno) {
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": parse error: " + e.what());
    }
}

[[noreturn]] void line_error(const std::string& path, int lineno, const std::string& msg) {
    throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + msg);
}

}  // namespace

std::vector<MCItem> load_mc(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_mc: cannot open " + path);
    std::vector<MCItem> items;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = parse_line(line, path, lineno);
        if (!j.contains("question") || !j.contains("choices") || !j.contains("gold"))
            line_error(path, lineno, "missing question/choices/gold");
        MCItem item;
        if (!j["question"].is_string()) line_error(path, lineno, "question must be a string");
        item.question = j["question"].get<std::string>();
        if (!j["choices"].is_array()) line_error(path, lineno, "choices must be an array");
        for (const auto& c : j["choices"]) {
            if (!c.is_string()) line_error(path, lineno, "choices must be strings");
            item.choices.push_back(c.get<std::string>());
        }
        if (item.choices.size() < 2) line_error(path, lineno, "need at least 2 choices");
        for (size_t a = 0; a < item.choices.size(); ++a)
            for (size_t b = a + 1; b < item.choices.size(); ++b)
                if (item.choices[a] == item.choices[b])
                    line_error(path, lineno, "choices must be pairwise distinct");
        if (!j["gold"].is_number_integer()) line_error(path, lineno, "gold must be an integer");
        item.gold_index = j["gold"].get<int>();
        if (item.gold_index < 0 || item.gold_index >= static_cast<int>(item.choices.size()))
            line_error(path, lineno, "gold index out of range");
        items.push_back(std::move(item));
    }
    return items;
}

std::vector<QAPair> load_qa(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_qa: cannot open " + path);
    std::vector<QAPair> pairs;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = parse_line(line, path, lineno);
        if (!j.contains("question") || !j.contains("answer"))
            line_error(path, lineno, "missing question/answer");
        if (!j["question"].is_string() || !j["answer"].is_string())
            line_error(path, lineno, "question/answer must be strings");
        QAPair p{j["question"].get<std::string>(), j["answer"].get<std::string>()};
        if (p.question.empty() || p.answer.empty())
            line_error(path, lineno, "question/answer must be non-empty");
        pairs.push_back(std::move(p));
    }
    return pairs;
}

void save_mc(const std::string& path, const std::vector<MCItem>& items) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_mc: cannot open " + path);
    for (const MCItem& item : items) {
        json j{{"question", item.question}, {"choices", item.choices}, {"gold", item.gold_index}};
        os << j.dump() << "\n";
    }
}

void save_qa(const std::string& path, const std::vector<QAPair>& pairs) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("save_qa: cannot open " + path);
    for (const QAPair& p : pairs) {
        json j{{"question", p.question}, {"answer", p.answer}};
        os << j.dump() << "\n";
    }
}

Corpus load_corpus_dir(const std::string& dir, const std::string& language) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".txt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    Corpus c;
    c.name = fs::path(dir).filename().string();
    c.language = language;
    for (const auto& f : files) {
        std::ifstream is(f, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
        if (!bytes.empty()) c.documents.push_back(std::move(bytes));
    }
    if (c.documents.empty())
        throw std::runtime_error("load_corpus_dir: no non-empty .txt files in " + dir);
    return c;
}

void save_corpus_dir(const std::string& dir, const Corpus& corpus) {
    fs::create_directories(dir);
    for (size_t i = 0; i < corpus.documents.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "doc_%05zu.txt", i);
        std::ofstream os(fs::path(dir) / name, std::ios::binary | std::ios::trunc);
        os << corpus.documents[i];
    }
}

}  // namespace clt
