#pragma once

#include <functional>
#include <string>
#include <vector>

#include "lmread/common.hpp"

namespace lmread {

struct SurprisalRow {
    std::string model;      // "gru" or "tf"
    int layers = 1;
    std::uint64_t seed = 0;
    std::string checkpoint;  // schedule tag
    int sentence_id = 0;     // 1-based stimulus line
    int position = 0;        // 1-based word position; EOS row = n_words + 1
    std::string word;
    double surprisal = 0.0;  // nats
};

using SurprisalTable = std::vector<SurprisalRow>;

inline void save_surprisal_csv(const SurprisalTable& table, const std::filesystem::path& path) {
    std::string out = "model,layers,seed,checkpoint,sentence_id,position,word,surprisal\n";
    for (const auto& r : table) {
        out += r.model + ',' + std::to_string(r.layers) + ',' + std::to_string(r.seed) + ',' +
               r.checkpoint + ',' + std::to_string(r.sentence_id) + ',' + std::to_string(r.position) +
               ',' + r.word + ',' + fmt_num(r.surprisal) + '\n';
    }
    write_text(path, out);
}

inline SurprisalTable load_surprisal_csv(const std::filesystem::path& path) {
    auto lines = read_lines(path);
    if (lines.empty() || lines[0] != "model,layers,seed,checkpoint,sentence_id,position,word,surprisal")
        throw input_error("bad surprisal CSV header in " + path.string());
    SurprisalTable table;
    for (std::size_t i = 1; i < lines.size(); ++i) {
        if (lines[i].empty()) continue;
        auto c = split(lines[i], ',');
        const std::string where = path.string() + " line " + std::to_string(i + 1);
        if (c.size() != 8) throw input_error("bad surprisal row in " + where);
        SurprisalRow r;
        r.model = c[0];
        r.layers = static_cast<int>(parse_int(c[1], where));
        r.seed = static_cast<std::uint64_t>(parse_int(c[2], where));
        r.checkpoint = c[3];
        r.sentence_id = static_cast<int>(parse_int(c[4], where));
        r.position = static_cast<int>(parse_int(c[5], where));
        r.word = c[6];
        r.surprisal = parse_num(c[7], where);
        table.push_back(std::move(r));
    }
    return table;
}

// Mean log probability (= mean of -surprisal) over the rows selected by the
// filter; the LM-quality axis of the comparison stage.
inline double avg_log_prob(const SurprisalTable& table,
                           const std::function<bool(const SurprisalRow&)>& included) {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : table) {
        if (!included(r)) continue;
        total += -r.surprisal;
        ++n;
    }
    if (n == 0) throw input_error("avg_log_prob: empty selection");
    return total / static_cast<double>(n);
}

}  // namespace lmread
