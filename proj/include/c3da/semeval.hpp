#pragma once

#include <fstream>
#include <string>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <nlohmann/json.hpp>

#include "c3da/common.hpp"
#include "c3da/data.hpp"

namespace c3da {

struct SemEvalConversion {
    int sentences{0};
    int records{0};
    int dropped_conflicts{0};
};

// Flattens SemEval-2014 task-4 XML (sentence elements with aspectTerm
// children carrying term/from/to/polarity) into canonical JSONL, one record
// per (sentence, aspectTerm) pair. "conflict" polarities are dropped with a
// counted warning.
inline SemEvalConversion convert_semeval_xml(const std::string& xml_path,
                                             const std::string& jsonl_path) {
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_xml(xml_path, tree);
    } catch (const pt::xml_parser_error& e) {
        throw ParseError("unreadable XML '" + xml_path + "': " + e.what());
    }

    std::ofstream out(jsonl_path);
    if (!out) throw IoError("cannot write: " + jsonl_path);

    SemEvalConversion stats;
    const auto sentences = tree.get_child_optional("sentences");
    if (!sentences) throw SchemaError("missing <sentences> root in " + xml_path);

    for (const auto& [tag, sentence] : *sentences) {
        if (tag != "sentence") continue;
        ++stats.sentences;
        const auto text = sentence.get_optional<std::string>("text");
        if (!text) throw SchemaError("sentence without <text> in " + xml_path);
        const auto terms = sentence.get_child_optional("aspectTerms");
        if (!terms) continue;
        for (const auto& [ttag, term] : *terms) {
            if (ttag != "aspectTerm") continue;
            nlohmann::json j;
            for (const char* attr : {"term", "polarity", "from", "to"})
                if (!term.get_optional<std::string>(std::string("<xmlattr>.") + attr))
                    throw SchemaError(std::string("aspectTerm missing attribute '") +
                                      attr + "' in " + xml_path);
            const auto polarity = term.get<std::string>("<xmlattr>.polarity");
            if (polarity == "conflict") {
                ++stats.dropped_conflicts;
                continue;
            }
            polarity_from_string(polarity);  // validates the label early
            j["text"] = *text;
            j["aspect"] = term.get<std::string>("<xmlattr>.term");
            j["aspect_char_start"] = term.get<int>("<xmlattr>.from");
            j["aspect_char_end"] = term.get<int>("<xmlattr>.to");
            j["polarity"] = polarity;
            out << j.dump() << "\n";
            ++stats.records;
        }
    }
    return stats;
}

}  // namespace c3da
