#pragma once

#include <array>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3da/common.hpp"
#include "c3da/tokenizer.hpp"

namespace c3da {

enum class Polarity : int { Negative = 0, Neutral = 1, Positive = 2 };

inline int polarity_id(Polarity p) { return static_cast<int>(p); }

inline Polarity polarity_from_id(int id) {
    if (id < 0 || id > 2) throw LabelError("polarity id out of range: " + std::to_string(id));
    return static_cast<Polarity>(id);
}

inline Polarity polarity_from_string(const std::string& s) {
    if (s == "negative") return Polarity::Negative;
    if (s == "neutral") return Polarity::Neutral;
    if (s == "positive") return Polarity::Positive;
    throw LabelError("unknown polarity string: '" + s + "'");
}

inline const char* polarity_to_string(Polarity p) {
    switch (p) {
        case Polarity::Negative: return "negative";
        case Polarity::Neutral: return "neutral";
        case Polarity::Positive: return "positive";
    }
    throw LabelError("invalid polarity value");
}

// One labeled instance: a tokenized sentence, a binary mask over its tokens
// marking the aspect span, and the 3-way polarity.
struct AbsaTriplet {
    std::vector<std::string> sentence;   // token surface forms
    std::vector<int> aspect_indicator;   // 0/1, same length as sentence
    Polarity polarity{Polarity::Neutral};
    std::string raw_text;
    std::string aspect_text;
    int aspect_char_begin{0};
    int aspect_char_end{0};

    void validate() const {
        if (sentence.empty()) throw ArgumentError("triplet: empty sentence");
        if (aspect_indicator.size() != sentence.size())
            throw ArgumentError("triplet: indicator length mismatch");
        int first = -1, last = -1, count = 0;
        for (std::size_t i = 0; i < aspect_indicator.size(); ++i) {
            if (aspect_indicator[i] != 0 && aspect_indicator[i] != 1)
                throw ArgumentError("triplet: indicator entries must be 0/1");
            if (aspect_indicator[i] == 1) {
                if (first < 0) first = static_cast<int>(i);
                last = static_cast<int>(i);
                ++count;
            }
        }
        if (count == 0) throw ArgumentError("triplet: no aspect position marked");
        if (last - first + 1 != count)
            throw ArgumentError("triplet: aspect positions must be contiguous");
    }

    std::vector<int> aspect_positions() const {
        std::vector<int> pos;
        for (std::size_t i = 0; i < aspect_indicator.size(); ++i)
            if (aspect_indicator[i] == 1) pos.push_back(static_cast<int>(i));
        return pos;
    }
};

// Ordered aspect inventory with per-aspect instance counts. Ordering is the
// insertion order of first occurrence, which keeps downstream sampling
// deterministic.
class AspectVocabulary {
public:
    void add(const std::string& aspect) {
        auto it = index_.find(aspect);
        if (it == index_.end()) {
            index_.emplace(aspect, aspects_.size());
            aspects_.push_back(aspect);
            counts_.push_back(1);
        } else {
            ++counts_[it->second];
        }
    }

    const std::vector<std::string>& aspects() const { return aspects_; }

    int frequency(const std::string& aspect) const {
        auto it = index_.find(aspect);
        if (it == index_.end()) throw ArgumentError("unknown aspect: '" + aspect + "'");
        return counts_[it->second];
    }

    // Number of distinct aspect items (the M in the re-weight offset).
    int total_instances() const { return static_cast<int>(aspects_.size()); }

    int annotation_count() const {
        int s = 0;
        for (int c : counts_) s += c;
        return s;
    }

private:
    std::vector<std::string> aspects_;
    std::vector<int> counts_;
    std::map<std::string, std::size_t> index_;
};

// Seed spans keyed by polarity; the polarity channel conditions on one of
// these instead of an aspect string.
struct PolaritySeedMap {
    std::map<Polarity, std::vector<std::string>> spans;

    static PolaritySeedMap defaults() {
        PolaritySeedMap m;
        m.spans[Polarity::Positive] = {"so good"};
        m.spans[Polarity::Negative] = {"so bad"};
        m.spans[Polarity::Neutral] = {"so so"};
        return m;
    }

    void validate() const {
        for (Polarity p : {Polarity::Positive, Polarity::Negative}) {
            auto it = spans.find(p);
            if (it == spans.end() || it->second.empty())
                throw ConfigError("seed map: positive and negative each need a span");
            for (const auto& s : it->second)
                if (s.empty()) throw ConfigError("seed map: empty span");
        }
    }

    const std::vector<std::string>& for_polarity(Polarity p) const {
        auto it = spans.find(p);
        if (it == spans.end() || it->second.empty())
            throw ConfigError(std::string("seed map: no spans for polarity ") +
                              polarity_to_string(p));
        return it->second;
    }
};

struct Dataset {
    std::string split;
    std::vector<AbsaTriplet> triplets;
    AspectVocabulary vocabulary;

    void rebuild_vocabulary() {
        vocabulary = AspectVocabulary{};
        for (const auto& t : triplets) vocabulary.add(t.aspect_text);
    }

    std::size_t size() const { return triplets.size(); }
};

// 2 -> 0, 0 -> 2; Neutral draws uniformly from {Negative, Positive}.
inline Polarity opposite_polarity(Polarity p, std::mt19937_64& rng) {
    switch (p) {
        case Polarity::Positive: return Polarity::Negative;
        case Polarity::Negative: return Polarity::Positive;
        case Polarity::Neutral: {
            std::uniform_int_distribution<int> coin(0, 1);
            return coin(rng) == 0 ? Polarity::Negative : Polarity::Positive;
        }
    }
    throw LabelError("opposite_polarity: polarity out of range");
}

inline std::string concat_condition(const std::string& sentence, const std::string& condition) {
    if (sentence.empty() || condition.empty())
        throw ArgumentError("concat_condition: sentence and condition must be non-empty");
    return sentence + " <eos> " + condition;
}

namespace detail {

inline AbsaTriplet make_triplet(const std::string& text, const std::string& aspect,
                                int char_begin, int char_end, Polarity polarity,
                                int line_no) {
    const auto where = [&] {
        return line_no > 0 ? " (line " + std::to_string(line_no) + ")" : std::string{};
    };
    if (char_begin < 0 || char_end > static_cast<int>(text.size()) || char_begin >= char_end)
        throw AlignmentError("aspect offsets out of range" + where());

    AbsaTriplet t;
    t.raw_text = text;
    t.aspect_text = aspect;
    t.aspect_char_begin = char_begin;
    t.aspect_char_end = char_end;
    t.polarity = polarity;

    const auto tokens = tokenize(text);
    if (tokens.empty()) throw ParseError("empty sentence" + where());
    int first = -1, last = -1;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        t.sentence.push_back(tokens[i].text);
        const bool inside =
            tokens[i].char_begin >= char_begin && tokens[i].char_end <= char_end;
        t.aspect_indicator.push_back(inside ? 1 : 0);
        if (inside) {
            if (first < 0) first = static_cast<int>(i);
            last = static_cast<int>(i);
        }
    }
    if (first < 0)
        throw AlignmentError("aspect offsets cover no whole token" + where());
    // Offsets must land exactly on token boundaries; anything else means the
    // span starts or ends inside a token.
    if (tokens[first].char_begin != char_begin || tokens[last].char_end != char_end)
        throw AlignmentError("aspect offsets not aligned to token boundaries" + where());
    t.validate();
    return t;
}

}  // namespace detail

// Canonical JSONL: one record per line with fields text, aspect,
// aspect_char_start, aspect_char_end, polarity.
inline Dataset load_jsonl(const std::string& path, const std::string& split = "train") {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open dataset file: " + path);
    Dataset ds;
    ds.split = split;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError("malformed JSON at line " + std::to_string(line_no) + ": " +
                             e.what());
        }
        for (const char* key :
             {"text", "aspect", "aspect_char_start", "aspect_char_end", "polarity"})
            if (!j.contains(key))
                throw ParseError("missing field '" + std::string(key) + "' at line " +
                                 std::to_string(line_no));
        ds.triplets.push_back(detail::make_triplet(
            j["text"].get<std::string>(), j["aspect"].get<std::string>(),
            j["aspect_char_start"].get<int>(), j["aspect_char_end"].get<int>(),
            polarity_from_string(j["polarity"].get<std::string>()), line_no));
    }
    if (ds.triplets.empty()) throw ParseError("dataset is empty: " + path);
    ds.rebuild_vocabulary();
    return ds;
}

inline void save_jsonl(const Dataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write dataset file: " + path);
    for (const auto& t : ds.triplets) {
        nlohmann::json j;
        j["text"] = t.raw_text;
        j["aspect"] = t.aspect_text;
        j["aspect_char_start"] = t.aspect_char_begin;
        j["aspect_char_end"] = t.aspect_char_end;
        j["polarity"] = polarity_to_string(t.polarity);
        out << j.dump() << "\n";
    }
}

// Templated two-aspect sentences, "<adj1> <aspect1> but <adj2> <aspect2>",
// two triplets per sentence with opposite polarities. Word inventory stays
// under 50 types.
inline Dataset synthesize_toy_dataset(int n, std::mt19937_64& rng,
                                      const std::string& split = "train") {
    if (n < 1) throw ArgumentError("synthesize_toy_dataset: need at least 1 sentence");
    static const std::vector<std::string> kAspects = {
        "food", "service", "menu", "staff", "screen", "battery", "price", "keyboard"};
    static const std::vector<std::string> kPositive = {"great", "tasty", "friendly",
                                                       "fast", "lovely", "solid"};
    static const std::vector<std::string> kNegative = {"awful", "slow", "rude",
                                                       "bland", "noisy", "flimsy"};
    Dataset ds;
    ds.split = split;
    std::uniform_int_distribution<std::size_t> pick_aspect(0, kAspects.size() - 1);
    std::uniform_int_distribution<std::size_t> pick_adj(0, kPositive.size() - 1);
    std::uniform_int_distribution<int> coin(0, 1);
    for (int s = 0; s < n; ++s) {
        const std::size_t a1 = pick_aspect(rng);
        std::size_t a2 = pick_aspect(rng);
        while (a2 == a1) a2 = pick_aspect(rng);
        const bool first_positive = coin(rng) == 0;
        const std::string adj1 =
            first_positive ? kPositive[pick_adj(rng)] : kNegative[pick_adj(rng)];
        const std::string adj2 =
            first_positive ? kNegative[pick_adj(rng)] : kPositive[pick_adj(rng)];
        const std::string text =
            adj1 + " " + kAspects[a1] + " but " + adj2 + " " + kAspects[a2];
        const int b1 = static_cast<int>(adj1.size() + 1);
        const int e1 = b1 + static_cast<int>(kAspects[a1].size());
        const int b2 = static_cast<int>(text.size() - kAspects[a2].size());
        const int e2 = static_cast<int>(text.size());
        ds.triplets.push_back(detail::make_triplet(
            text, kAspects[a1], b1, e1,
            first_positive ? Polarity::Positive : Polarity::Negative, 0));
        ds.triplets.push_back(detail::make_triplet(
            text, kAspects[a2], b2, e2,
            first_positive ? Polarity::Negative : Polarity::Positive, 0));
    }
    ds.rebuild_vocabulary();
    return ds;
}

// Vocabulary for backbone models: dataset tokens, seed-span tokens, specials.
inline Vocab build_vocab(const Dataset& ds, const PolaritySeedMap& seeds) {
    Vocab v;
    for (const auto& t : ds.triplets)
        for (const auto& w : t.sentence) v.add(w);
    for (const auto& [p, list] : seeds.spans)
        for (const auto& span : list)
            for (const auto& w : tokenize_words(span)) v.add(w);
    return v;
}

}  // namespace c3da
