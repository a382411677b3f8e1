#pragma once

#include <algorithm>
#include <cctype>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "c3da/common.hpp"

namespace c3da {

struct Token {
    std::string text;
    int char_begin{0};  // byte offset into the source string
    int char_end{0};    // exclusive
};

inline constexpr const char* kSpecialTokens[] = {"<pad>", "<bos>", "<eos>", "<unk>"};

// Deterministic whitespace + punctuation splitter. ASCII letters and digits
// group into words, any other printable ASCII byte is its own token, and
// non-ASCII bytes are treated as word characters so UTF-8 codepoints never
// split mid-sequence. The special marker tokens above survive as single
// tokens; "<eos>" in particular is the condition separator.
inline std::vector<Token> tokenize(const std::string& text) {
    std::vector<Token> out;
    const auto is_word = [](unsigned char c) {
        return std::isalnum(c) != 0 || c >= 0x80;
    };
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        if (std::isspace(c)) {
            ++i;
            continue;
        }
        if (c == '<') {
            bool matched = false;
            for (const char* sp : kSpecialTokens) {
                const std::size_t n = std::char_traits<char>::length(sp);
                if (text.compare(i, n, sp) == 0) {
                    out.push_back({sp, static_cast<int>(i), static_cast<int>(i + n)});
                    i += n;
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        if (is_word(c)) {
            std::size_t j = i;
            while (j < text.size() && is_word(static_cast<unsigned char>(text[j]))) ++j;
            out.push_back({text.substr(i, j - i), static_cast<int>(i), static_cast<int>(j)});
            i = j;
        } else {
            out.push_back({text.substr(i, 1), static_cast<int>(i), static_cast<int>(i + 1)});
            ++i;
        }
    }
    return out;
}

inline std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> out;
    for (auto& t : tokenize(text)) out.push_back(t.text);
    return out;
}

inline std::string join_tokens(std::span<const std::string> tokens) {
    std::string s;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) s += ' ';
        s += tokens[i];
    }
    return s;
}

// Token <-> id table. Ids 0..3 are reserved specials; "<eos>" doubles as the
// condition separator and the decoder stop symbol.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;

    Vocab() {
        for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(s);
    }

    int add(const std::string& token) {
        auto it = index_.find(token);
        if (it != index_.end()) return it->second;
        const int id = static_cast<int>(tokens_.size());
        index_.emplace(token, id);
        tokens_.push_back(token);
        return id;
    }

    int id(const std::string& token) const {
        auto it = index_.find(token);
        return it == index_.end() ? kUnk : it->second;
    }

    bool contains(const std::string& token) const { return index_.count(token) > 0; }
    const std::string& token(int id) const { return tokens_.at(id); }
    int size() const { return static_cast<int>(tokens_.size()); }

    std::vector<int> encode(std::span<const std::string> words) const {
        std::vector<int> ids;
        ids.reserve(words.size());
        for (const auto& w : words) ids.push_back(id(w));
        return ids;
    }

    std::vector<int> encode_text(const std::string& text) const {
        std::vector<int> ids;
        for (auto& t : tokenize(text)) ids.push_back(id(t.text));
        return ids;
    }

    std::string decode(std::span<const int> ids) const {
        std::vector<std::string> words;
        for (int i : ids) {
            if (i == kPad || i == kBos) continue;
            words.push_back(token(i));
        }
        return join_tokens(words);
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace c3da
