#pragma once

#include "clt/model.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace clt {

struct Corpus {
    std::string name;
    std::vector<std::string> documents;  // raw bytes
    std::string language;

    int64_t total_bytes() const {
        int64_t n = 0;
        for (const auto& d : documents) n += static_cast<int64_t>(d.size());
        return n;
    }
};

struct MCItem {
    std::string question;
    std::vector<std::string> choices;
    int gold_index = 0;
};

struct QAPair {
    std::string question;
    std::string answer;
};

TokenSeq tokenize(const std::string& text, bool add_bos, bool add_eos);
std::string detokenize(const TokenSeq& tokens);  // strips specials

enum class Grammar { A, B };

// Fixed order-2 Markov word grammars over disjoint inventories with
// shared punctuation. Deterministic for a fixed seed.
Corpus synth_corpus(Grammar g, int n_docs, uint64_t seed);
std::vector<MCItem> synth_mc_items(Grammar g, int n, uint64_t seed);
std::vector<QAPair> synth_qa_pairs(Grammar g, int n, uint64_t seed);

// Seeded shuffled fixed-length chunk iterator; BOS opens each document,
// short tails are PAD-filled. Cycles epochs in the same order.
class BatchStream {
  public:
    BatchStream(const Corpus& corpus, int context_length, int batch_size, uint64_t seed);

    std::vector<TokenSeq> next();
    void skip(int64_t n_batches);
    void reset() { cursor_ = 0; }
    size_t chunks_per_epoch() const { return chunks_.size(); }
    int64_t batches_per_epoch() const {
        return (static_cast<int64_t>(chunks_.size()) + batch_size_ - 1) / batch_size_;
    }

  private:
    std::vector<TokenSeq> chunks_;
    std::vector<size_t> order_;
    int batch_size_;
    size_t cursor_ = 0;
};

// JSON-lines loaders; malformed lines report their line number.
std::vector<MCItem> load_mc(const std::string& path);
std::vector<QAPair> load_qa(const std::string& path);
void save_mc(const std::string& path, const std::vector<MCItem>& items);
void save_qa(const std::string& path, const std::vector<QAPair>& pairs);

// Directory of .txt files, read as raw bytes in filename order.
Corpus load_corpus_dir(const std::string& dir, const std::string& language = "");
void save_corpus_dir(const std::string& dir, const Corpus& corpus);

}  // namespace clt
