#pragma once

#include <array>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "c3da/backbone.hpp"
#include "c3da/data.hpp"
#include "c3da/peft.hpp"

namespace c3da {

// Candidate keys in tie-break precedence order: AAC < PAC < PA < AP.
enum class ChannelKey : int { AAC = 0, PAC = 1, PA = 2, AP = 3 };

inline constexpr std::array<ChannelKey, 4> kAllChannels = {
    ChannelKey::AAC, ChannelKey::PAC, ChannelKey::PA, ChannelKey::AP};

inline const char* channel_key_name(ChannelKey k) {
    switch (k) {
        case ChannelKey::AAC: return "AAC";
        case ChannelKey::PAC: return "PAC";
        case ChannelKey::PA: return "PA";
        case ChannelKey::AP: return "AP";
    }
    throw ArgumentError("bad channel key");
}

inline ChannelKey channel_key_from_string(const std::string& s) {
    for (ChannelKey k : kAllChannels)
        if (s == channel_key_name(k)) return k;
    throw ArgumentError("unknown channel key: '" + s + "'");
}

struct GeneratedText {
    std::string text;
    bool truncated{false};
};

// The seam between augmentation logic and whatever produces text. The
// fine-tuned tiny backbone implements it; tests substitute mocks.
class ConditionalGenerator {
public:
    virtual ~ConditionalGenerator() = default;
    virtual GeneratedText generate_text(const std::string& condition) const = 0;
};

class AdaptedTextGenerator : public ConditionalGenerator {
public:
    AdaptedTextGenerator(const AdaptedGenerator& handle, const Vocab& vocab,
                         DecodeConfig decode)
        : handle_(&handle), vocab_(&vocab), decode_(decode) {}

    GeneratedText generate_text(const std::string& condition) const override {
        const auto ids = vocab_->encode_text(condition);
        const auto result = handle_->generate(ids, decode_);
        return {vocab_->decode(result.tokens), result.truncated};
    }

private:
    const AdaptedGenerator* handle_;
    const Vocab* vocab_;
    DecodeConfig decode_;
};

struct Candidate {
    std::string text;
    bool valid{false};
    bool truncated{false};
    std::optional<double> entropy;               // bits, filled by scoring
    std::array<double, 3> probabilities{};       // class distribution when scored
    std::vector<std::string> provenance;         // channel tags, outermost last
    std::string error;                           // non-empty if generation failed
};

struct AugmentationRecord {
    int source_index{-1};
    AbsaTriplet source;
    std::string sampled_aspect;
    Polarity inverted_polarity{Polarity::Neutral};
    std::string seed_span;
    std::map<ChannelKey, Candidate> candidates;  // exactly the four keys
    std::vector<ChannelKey> selected;

    const Candidate& candidate(ChannelKey k) const { return candidates.at(k); }
};

inline GeneratedText aac_generate(const ConditionalGenerator& gen,
                                  const std::string& sentence,
                                  const std::string& aspect) {
    return gen.generate_text(concat_condition(sentence, aspect));
}

inline GeneratedText pac_generate(const ConditionalGenerator& gen,
                                  const std::string& sentence,
                                  const std::string& seed_span) {
    return gen.generate_text(concat_condition(sentence, seed_span));
}

// Holds the sampling and round-robin state shared across one augmentation
// pass so repeated runs with one seed stay reproducible.
class AugmentSession {
public:
    AugmentSession(const AspectVocabulary& vocab, PolaritySeedMap seeds,
                   std::uint64_t seed, bool validity_filter = true)
        : vocab_(&vocab),
          seeds_(std::move(seeds)),
          rng_(make_rng(seed, "augment-session")),
          validity_filter_(validity_filter) {
        seeds_.validate();
    }

    std::mt19937_64& rng() { return rng_; }

    // Uniform over the aspect inventory, excluding the source's own aspect
    // whenever there is a choice.
    std::string sample_aspect(const std::string& source_aspect) {
        const auto& aspects = vocab_->aspects();
        if (aspects.size() == 1) return aspects.front();
        std::uniform_int_distribution<std::size_t> pick(0, aspects.size() - 1);
        while (true) {
            const std::string& a = aspects[pick(rng_)];
            if (a != source_aspect) return a;
        }
    }

    const std::string& next_seed_span(Polarity p) {
        const auto& spans = seeds_.for_polarity(p);
        return spans[round_robin_[p]++ % spans.size()];
    }

    bool validity_filter() const { return validity_filter_; }

private:
    const AspectVocabulary* vocab_;
    PolaritySeedMap seeds_;
    std::mt19937_64 rng_;
    std::map<Polarity, std::size_t> round_robin_;
    bool validity_filter_;
};

namespace detail {

inline Candidate run_channel(const ConditionalGenerator& gen, const std::string& input,
                             const std::string& condition,
                             std::vector<std::string> provenance) {
    Candidate c;
    c.provenance = std::move(provenance);
    try {
        const GeneratedText g = c3da::concat_condition(input, condition),
                                    .text.empty()
                                ? GeneratedText{}
                                : GeneratedText{};
        (void)g;
    } catch (...) {
    }
    return c;
}

}  // namespace detail

// Stage II for one source triplet: the two direct channels plus the two
// cross-fed compositions. Generation failures mark the candidate invalid but
// never abort the record.
inline AugmentationRecord cross_channel(const ConditionalGenerator& gen,
                                        const AbsaTriplet& triplet,
                                        AugmentSession& session,
                                        int source_index = -1) {
    AugmentationRecord rec;
    rec.source_index = source_index;
    rec.source = triplet;
    rec.sampled_aspect = session.sample_aspect(triplet.aspect_text);
    rec.inverted_polarity = opposite_polarity(triplet.polarity, session.rng());
    rec.seed_span = session.next_seed_span(rec.inverted_polarity);

    const auto contains = [](const std::string& haystack, const std::string& needle) {
        return haystack.find(needle) != std::string::npos;
    };
    const auto finish = [&](Candidate& c, bool aspect_conditioned) {
        if (!c.error.empty()) {
            c.valid = false;
            return;
        }
        c.valid = !c.text.empty() && c.text != triplet.raw_text;
        if (session.validity_filter() && aspect_conditioned && c.valid)
            c.valid = contains(c.text, rec.sampled_aspect);
    };
    const auto generate = [&](const std::string& input, const std::string& condition,
                              std::vector<std::string> provenance) {
        Candidate c;
        c.provenance = std::move(provenance);
        try {
            const GeneratedText g = gen.generate_text(concat_condition(input, condition));
            c.text = g.text;
            c.truncated = g.truncated;
        } catch (const std::exception& e) {
            c.error = e.what();
        }
        return c;
    };

    // s^a and s^p from the source, then each feeds the other channel.
    Candidate aac = generate(triplet.raw_text, rec.sampled_aspect, {"AAC"});
    finish(aac, true);
    Candidate pac = generate(triplet.raw_text, rec.seed_span, {"PAC"});
    finish(pac, false);

    Candidate pa;
    if (pac.error.empty() && !pac.text.empty()) {
        pa = generate(pac.text, rec.sampled_aspect, {"PAC", "AAC"});
    } else {
        pa.provenance = {"PAC", "AAC"};
        pa.error = pac.error.empty() ? "upstream PAC output empty" : pac.error;
    }
    finish(pa, true);

    Candidate ap;
    if (aac.error.empty() && !aac.text.empty()) {
        ap = generate(aac.text, rec.seed_span, {"AAC", "PAC"});
    } else {
        ap.provenance = {"AAC", "PAC"};
        ap.error = aac.error.empty() ? "upstream AAC output empty" : aac.error;
    }
    finish(ap, false);

    rec.candidates[ChannelKey::AAC] = std::move(aac);
    rec.candidates[ChannelKey::PAC] = std::move(pac);
    rec.candidates[ChannelKey::PA] = std::move(pa);
    rec.candidates[ChannelKey::AP] = std::move(ap);
    return rec;
}

inline nlohmann::json candidate_to_json(const Candidate& c) {
    nlohmann::json j;
    j["text"] = c.text;
    j["valid"] = c.valid;
    j["truncated"] = c.truncated;
    j["provenance"] = c.provenance;
    if (!c.error.empty()) j["error"] = c.error;
    if (c.entropy) {
        j["entropy"] = *c.entropy;
        j["probabilities"] = c.probabilities;
    }
    return j;
}

inline Candidate candidate_from_json(const nlohmann::json& j) {
    Candidate c;
    c.text = j.at("text").get<std::string>();
    c.valid = j.at("valid").get<bool>();
    c.truncated = j.at("truncated").get<bool>();
    c.provenance = j.at("provenance").get<std::vector<std::string>>();
    if (j.contains("error")) c.error = j["error"].get<std::string>();
    if (j.contains("entropy")) {
        c.entropy = j["entropy"].get<double>();
        c.probabilities = j["probabilities"].get<std::array<double, 3>>();
    }
    return c;
}

inline nlohmann::json record_to_json(const AugmentationRecord& rec) {
    nlohmann::json j;
    j["source_index"] = rec.source_index;
    j["source"] = {{"text", rec.source.raw_text},
                   {"aspect", rec.source.aspect_text},
                   {"aspect_char_start", rec.source.aspect_char_begin},
                   {"aspect_char_end", rec.source.aspect_char_end},
                   {"polarity", polarity_to_string(rec.source.polarity)}};
    j["sampled_aspect"] = rec.sampled_aspect;
    j["inverted_polarity"] = polarity_to_string(rec.inverted_polarity);
    j["seed_span"] = rec.seed_span;
    for (ChannelKey k : kAllChannels)
        j["candidates"][channel_key_name(k)] = candidate_to_json(rec.candidate(k));
    auto& sel = j["selected"] = nlohmann::json::array();
    for (ChannelKey k : rec.selected) sel.push_back(channel_key_name(k));
    return j;
}

inline AugmentationRecord record_from_json(const nlohmann::json& j) {
    AugmentationRecord rec;
    rec.source_index = j.at("source_index").get<int>();
    const auto& s = j.at("source");
    rec.source = detail::make_triplet(
        s.at("text").get<std::string>(), s.at("aspect").get<std::string>(),
        s.at("aspect_char_start").get<int>(), s.at("aspect_char_end").get<int>(),
        polarity_from_string(s.at("polarity").get<std::string>()), 0);
    rec.sampled_aspect = j.at("sampled_aspect").get<std::string>();
    rec.inverted_polarity =
        polarity_from_string(j.at("inverted_polarity").get<std::string>());
    rec.seed_span = j.at("seed_span").get<std::string>();
    for (ChannelKey k : kAllChannels)
        rec.candidates[k] = candidate_from_json(j.at("candidates").at(channel_key_name(k)));
    for (const auto& name : j.at("selected"))
        rec.selected.push_back(channel_key_from_string(name.get<std::string>()));
    return rec;
}

// Augmentation file: one header line with the run parameters, then one
// record per line.
inline void save_augmentation_jsonl(const std::vector<AugmentationRecord>& records,
                                    std::uint64_t seed, int k,
                                    const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write augmentation file: " + path);
    nlohmann::json header;
    header["type"] = "augmentation";
    header["seed"] = seed;
    header["k"] = k;
    header["count"] = records.size();
    out << header.dump() << "\n";
    for (const auto& rec : records) out << record_to_json(rec).dump() << "\n";
}

struct AugmentationFile {
    std::uint64_t seed{0};
    int k{1};
    std::vector<AugmentationRecord> records;
};

inline AugmentationFile load_augmentation_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open augmentation file: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty augmentation file: " + path);
    AugmentationFile file;
    try {
        const auto header = nlohmann::json::parse(line);
        if (header.at("type").get<std::string>() != "augmentation")
            throw ParseError("not an augmentation file: " + path);
        file.seed = header.at("seed").get<std::uint64_t>();
        file.k = header.at("k").get<int>();
        int line_no = 1;
        while (std::getline(in, line)) {
            ++line_no;
            if (line.empty()) continue;
            file.records.push_back(record_from_json(nlohmann::json::parse(line)));
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("bad augmentation file " + path + ": " + e.what());
    }
    return file;
}

}  // namespace c3da
