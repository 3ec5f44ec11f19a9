#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "lmread/common.hpp"
#include "lmread/rng.hpp"

namespace lmread {

struct Token {
    std::string text;
    bool valid = false;
};

// A token is valid iff it consists only of letters, hyphens and apostrophes.
// Anything else (digits, other punctuation, non-ASCII bytes) invalidates the
// whole token; it is flagged, never stripped.
inline bool token_valid(const std::string& t) {
    if (t.empty()) return false;
    for (char c : t) {
        const bool letter = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z');
        if (!letter && c != '-' && c != '\'') return false;
    }
    return true;
}

// Whitespace split, lowercased. U+2019 (typographic apostrophe) is normalized
// to ' before validation so contractions like don't survive real-world text.
inline std::vector<Token> tokenize_line(const std::string& line) {
    std::string norm;
    norm.reserve(line.size());
    for (std::size_t i = 0; i < line.size(); ++i) {
        if (i + 2 < line.size() && static_cast<unsigned char>(line[i]) == 0xE2 &&
            static_cast<unsigned char>(line[i + 1]) == 0x80 &&
            static_cast<unsigned char>(line[i + 2]) == 0x99) {
            norm.push_back('\'');
            i += 2;
        } else {
            norm.push_back(line[i]);
        }
    }
    std::vector<Token> out;
    std::string cur;
    auto flush = [&] {
        if (cur.empty()) return;
        for (char& c : cur)
            if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
        out.push_back({cur, token_valid(cur)});
        cur.clear();
    };
    for (char c : norm) {
        if (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '\f' || c == '\v') {
            flush();
        } else {
            cur.push_back(c);
        }
    }
    flush();
    return out;
}

class Vocabulary {
public:
    static constexpr int kBos = 0;
    static constexpr int kEos = 1;
    static constexpr int kUnk = 2;
    static constexpr int kSpecials = 3;

    Vocabulary() = default;

    // words: (word, frequency) in final id order (id = index + kSpecials)
    explicit Vocabulary(std::vector<std::pair<std::string, std::int64_t>> words)
        : entries_(std::move(words)) {
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (!token_valid(entries_[i].first))
                throw input_error("invalid vocabulary word: '" + entries_[i].first + "'");
            auto ins = word_to_id_.emplace(entries_[i].first, static_cast<int>(i) + kSpecials);
            if (!ins.second) throw input_error("duplicate vocabulary word: '" + entries_[i].first + "'");
        }
    }

    int total_size() const { return static_cast<int>(entries_.size()) + kSpecials; }
    int word_count() const { return static_cast<int>(entries_.size()); }

    // -1 when out of vocabulary
    int id_of(const std::string& w) const {
        auto it = word_to_id_.find(w);
        return it == word_to_id_.end() ? -1 : it->second;
    }

    const std::string& word_of(int id) const {
        static const std::string specials[kSpecials] = {"<s>", "</s>", "<unk>"};
        if (id < 0 || id >= total_size()) throw input_error("vocabulary id out of range");
        if (id < kSpecials) return specials[id];
        return entries_[static_cast<std::size_t>(id - kSpecials)].first;
    }

    std::int64_t frequency_of(int id) const {
        if (id < kSpecials || id >= total_size()) throw input_error("vocabulary id out of range");
        return entries_[static_cast<std::size_t>(id - kSpecials)].second;
    }

    const std::vector<std::pair<std::string, std::int64_t>>& entries() const { return entries_; }

    void save_tsv(const std::filesystem::path& path) const {
        std::string out;
        for (const auto& [w, f] : entries_) out += w + "\t" + std::to_string(f) + "\n";
        write_text(path, out);
    }

    static Vocabulary load_tsv(const std::filesystem::path& path) {
        std::vector<std::pair<std::string, std::int64_t>> words;
        auto lines = read_lines(path);
        for (std::size_t i = 0; i < lines.size(); ++i) {
            if (lines[i].empty()) continue;
            auto cols = split(lines[i], '\t');
            if (cols.size() != 2)
                throw input_error("vocabulary " + path.string() + " line " + std::to_string(i + 1) +
                                  ": expected word<TAB>frequency");
            words.emplace_back(cols[0], parse_int(cols[1], path.string()));
        }
        return Vocabulary(std::move(words));
    }

private:
    std::vector<std::pair<std::string, std::int64_t>> entries_;
    std::unordered_map<std::string, int> word_to_id_;
};

// Vocabulary = n_top most frequent valid training words, plus any test words
// not already covered, plus the three specials. Frequency ties and the final
// id order are broken by (frequency desc, word asc) so builds are deterministic.
inline Vocabulary build_vocabulary(const std::vector<std::string>& corpus_lines,
                                   const std::set<std::string>& test_words, std::size_t n_top) {
    if (n_top < 1) throw input_error("build_vocabulary: n_top must be >= 1");
    std::unordered_map<std::string, std::int64_t> counts;
    std::int64_t total_valid = 0;
    for (const auto& line : corpus_lines) {
        for (const auto& tok : tokenize_line(line)) {
            if (tok.valid) {
                ++counts[tok.text];
                ++total_valid;
            }
        }
    }
    if (total_valid == 0) throw input_error("build_vocabulary: corpus has no valid tokens");

    std::vector<std::pair<std::string, std::int64_t>> by_freq(counts.begin(), counts.end());
    std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (by_freq.size() > n_top) by_freq.resize(n_top);

    std::set<std::string> have;
    for (const auto& [w, f] : by_freq) have.insert(w);
    for (const auto& w : test_words) {
        if (!token_valid(w)) throw input_error("build_vocabulary: invalid test word '" + w + "'");
        if (have.insert(w).second) {
            auto it = counts.find(w);
            by_freq.emplace_back(w, it == counts.end() ? 0 : it->second);
        }
    }
    std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    return Vocabulary(std::move(by_freq));
}

struct SentenceCorpus {
    std::vector<std::vector<int>> sentences;  // word ids, no specials
    int max_len = 39;
};

// Keeps exactly the sentences whose every token is a (non-special) vocabulary
// word and whose length does not exceed max_len.
inline SentenceCorpus filter_sentences(const std::vector<std::string>& raw_lines,
                                       const Vocabulary& vocab, int max_len) {
    SentenceCorpus corpus;
    corpus.max_len = max_len;
    for (const auto& line : raw_lines) {
        auto toks = tokenize_line(line);
        if (toks.empty() || static_cast<int>(toks.size()) > max_len) continue;
        std::vector<int> ids;
        ids.reserve(toks.size());
        bool ok = true;
        for (const auto& tok : toks) {
            const int id = tok.valid ? vocab.id_of(tok.text) : -1;
            if (id < Vocabulary::kSpecials) {
                ok = false;
                break;
            }
            ids.push_back(id);
        }
        if (ok) corpus.sentences.push_back(std::move(ids));
    }
    return corpus;
}

struct Minibatch {
    static constexpr int kPad = -1;
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> token_ids;  // B x T_max
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> pad_mask;  // true = real
    std::vector<int> lengths;  // with BOS/EOS
};

// One epoch of minibatches: deterministic shuffle under order_seed, BOS
// prepended and EOS appended to every sentence before padding. Each sentence
// appears exactly once per epoch.
inline std::vector<Minibatch> batches(const SentenceCorpus& corpus, int batch_size,
                                      std::uint64_t order_seed) {
    if (corpus.sentences.empty()) throw input_error("batches: empty corpus");
    if (batch_size < 1) throw input_error("batches: batch_size must be >= 1");
    std::vector<std::size_t> order(corpus.sentences.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(order_seed);
    rng.shuffle(order);

    std::vector<Minibatch> out;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
        const int b = static_cast<int>(stop - start);
        int t_max = 0;
        for (std::size_t i = start; i < stop; ++i)
            t_max = std::max(t_max, static_cast<int>(corpus.sentences[order[i]].size()) + 2);
        Minibatch mb;
        mb.token_ids.setConstant(b, t_max, Minibatch::kPad);
        mb.pad_mask.setConstant(b, t_max, false);
        for (int r = 0; r < b; ++r) {
            const auto& sent = corpus.sentences[order[start + static_cast<std::size_t>(r)]];
            mb.token_ids(r, 0) = Vocabulary::kBos;
            for (std::size_t j = 0; j < sent.size(); ++j) mb.token_ids(r, static_cast<int>(j) + 1) = sent[j];
            mb.token_ids(r, static_cast<int>(sent.size()) + 1) = Vocabulary::kEos;
            for (int j = 0; j < static_cast<int>(sent.size()) + 2; ++j) mb.pad_mask(r, j) = true;
            mb.lengths.push_back(static_cast<int>(sent.size()) + 2);
        }
        out.push_back(std::move(mb));
    }
    return out;
}

}  // namespace lmread
