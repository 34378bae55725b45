#pragma once

// Samples, the word-level vocabulary, tokenization, JSONL storage and dataset splits.

#include "stabforge/error.hpp"
#include "stabforge/lexer.hpp"
#include "stabforge/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace stabforge {

enum class Label { clean, stab, fixed, grammar, greedy };

inline std::string to_string(Label l) {
    switch (l) {
    case Label::clean: return "clean";
    case Label::stab: return "stab";
    case Label::fixed: return "fixed";
    case Label::grammar: return "grammar";
    case Label::greedy: return "greedy";
    }
    return "clean";
}

inline Label parse_label(std::string_view s) {
    if (s == "clean") return Label::clean;
    if (s == "stab") return Label::stab;
    if (s == "fixed") return Label::fixed;
    if (s == "grammar") return Label::grammar;
    if (s == "greedy") return Label::greedy;
    throw ConfigError("unknown label '" + std::string(s) + "'");
}

/// A code snippet and its expected output. Token vectors are filled by `encode`.
struct CodeSample {
    std::string id;
    std::vector<std::int32_t> source_tokens;
    std::vector<std::int32_t> target_tokens;
    std::string raw_source;
    std::string raw_target;
    Label label = Label::clean;
    std::string origin;

    bool operator==(const CodeSample&) const = default;
};

/// Splits a target string into words on whitespace and underscores ("read_file" -> read, file).
inline std::vector<std::string> target_words(std::string_view text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (c == '_' || std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

inline std::vector<std::string> code_words(std::string_view code) {
    std::vector<std::string> words;
    for (auto& t : lex(code)) words.push_back(std::move(t.text));
    return words;
}

class Vocabulary {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kBos = 1;
    static constexpr std::int32_t kEos = 2;
    static constexpr std::int32_t kUnk = 3;

    Vocabulary() : Vocabulary(std::vector<std::string>{}, {}) {}

    /// `words` excludes the four specials, which always occupy indices 0..3.
    Vocabulary(const std::vector<std::string>& words, const std::vector<std::string>& candidates) {
        tokens_ = {"<pad>", "<bos>", "<eos>", "<unk>"};
        for (const auto& w : words) {
            if (index_.count(w) || w == "<pad>" || w == "<bos>" || w == "<eos>" || w == "<unk>")
                throw ConfigError("vocabulary: duplicate token '" + w + "'");
            tokens_.push_back(w);
        }
        for (std::size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = std::int32_t(i);
        for (const auto& c : candidates) {
            auto it = index_.find(c);
            if (it == index_.end() || is_reserved_word(c) || !is_identifier_shaped(c)) continue;
            candidates_.push_back(it->second);
        }
        std::sort(candidates_.begin(), candidates_.end());
        candidates_.erase(std::unique(candidates_.begin(), candidates_.end()), candidates_.end());
    }

    std::size_t size() const noexcept { return tokens_.size(); }
    std::int32_t pad() const noexcept { return kPad; }
    std::int32_t bos() const noexcept { return kBos; }
    std::int32_t eos() const noexcept { return kEos; }
    std::int32_t unk() const noexcept { return kUnk; }

    std::int32_t index_of(std::string_view word) const {
        auto it = index_.find(std::string(word));
        return it == index_.end() ? kUnk : it->second;
    }
    bool contains(std::string_view word) const { return index_.count(std::string(word)) > 0; }
    const std::string& word(std::int32_t index) const {
        if (index < 0 || std::size_t(index) >= tokens_.size())
            throw ConfigError("vocabulary: index " + std::to_string(index) + " out of range");
        return tokens_[std::size_t(index)];
    }
    const std::vector<std::string>& words() const noexcept { return tokens_; }

    /// Sorted indices of tokens that may serve as replacement identifiers.
    const std::vector<std::int32_t>& identifier_candidates() const noexcept { return candidates_; }
    bool is_candidate(std::int32_t index) const {
        return std::binary_search(candidates_.begin(), candidates_.end(), index);
    }

    /// Copy whose candidate set is limited to `allowed` words.
    Vocabulary with_candidates(const std::vector<std::string>& allowed) const {
        std::vector<std::string> words(tokens_.begin() + 4, tokens_.end());
        return Vocabulary(words, allowed);
    }

    /// Hex FNV-1a over the ordered token list.
    std::string hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& t : tokens_) {
            h = fnv1a(t, h);
            h = fnv1a("\n", h);
        }
        std::ostringstream os;
        os << std::hex;
        os.width(16);
        os.fill('0');
        os << h;
        return os.str();
    }

    nlohmann::json to_json() const {
        std::vector<std::string> cand;
        for (auto c : candidates_) cand.push_back(tokens_[std::size_t(c)]);
        return {{"tokens", tokens_}, {"candidates", cand}, {"hash", hash()}};
    }

    static Vocabulary from_json(const nlohmann::json& j) {
        auto tokens = j.at("tokens").get<std::vector<std::string>>();
        if (tokens.size() < 4 || tokens[0] != "<pad>" || tokens[1] != "<bos>" || tokens[2] != "<eos>" || tokens[3] != "<unk>")
            throw CorruptionError("vocabulary: special tokens missing");
        Vocabulary v(std::vector<std::string>(tokens.begin() + 4, tokens.end()),
                     j.value("candidates", std::vector<std::string>{}));
        if (j.contains("hash") && j.at("hash").get<std::string>() != v.hash())
            throw CorruptionError("vocabulary: hash mismatch");
        return v;
    }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
    std::vector<std::int32_t> candidates_;
};

/// Builds a word-level vocabulary from sample code and targets. Words seen fewer than
/// `min_freq` times map to unk. The candidate set holds every identifier-shaped code word
/// that is not a keyword, builtin or layout token. `extra_targets` (e.g. attack target
/// strings) contribute target words regardless of frequency.
inline Vocabulary build_vocab(std::span<const CodeSample> samples, std::size_t min_freq = 1,
                              std::span<const std::string> extra_targets = {}) {
    if (samples.empty()) throw ConfigError("build_vocab: empty sample list");
    std::map<std::string, std::size_t> freq;
    std::set<std::string> code_names;
    for (const auto& s : samples) {
        for (const auto& t : lex(s.raw_source)) {
            ++freq[t.text];
            if (t.kind == TokenKind::Name) code_names.insert(t.text);
        }
        for (const auto& w : target_words(s.raw_target)) ++freq[w];
    }
    for (const auto& t : extra_targets)
        for (const auto& w : target_words(t)) freq[w] = std::max(freq[w], min_freq);
    std::vector<std::pair<std::string, std::size_t>> kept;
    for (const auto& [w, f] : freq)
        if (f >= min_freq) kept.emplace_back(w, f);
    std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> words;
    for (auto& [w, f] : kept) words.push_back(w);
    return Vocabulary(words, std::vector<std::string>(code_names.begin(), code_names.end()));
}

/// Identifier-shaped code words observed in `samples`; the attacker-side candidate pool.
inline std::vector<std::string> code_identifier_words(std::span<const CodeSample> samples) {
    std::set<std::string> names;
    for (const auto& s : samples)
        for (const auto& t : lex(s.raw_source))
            if (t.kind == TokenKind::Name && !is_reserved_word(t.text)) names.insert(t.text);
    return {names.begin(), names.end()};
}

/// Lexes code text and maps each token to its index (unk when absent).
inline std::vector<std::int32_t> tokenize(std::string_view text, const Vocabulary& vocab) {
    std::vector<std::int32_t> ids;
    for (const auto& t : lex(text)) ids.push_back(vocab.index_of(t.text));
    return ids;
}

inline std::vector<std::int32_t> tokenize_target(std::string_view text, const Vocabulary& vocab) {
    std::vector<std::int32_t> ids;
    for (const auto& w : target_words(text)) ids.push_back(vocab.index_of(w));
    return ids;
}

/// Inverse of `tokenize` up to whitespace: lines are single-space joined, layout tokens
/// become newlines and four-space indentation. Special tokens are dropped.
inline std::string detokenize(std::span<const std::int32_t> ids, const Vocabulary& vocab) {
    std::vector<std::string> words;
    for (auto id : ids) {
        if (id == vocab.pad() || id == vocab.bos() || id == vocab.eos()) continue;
        words.push_back(vocab.word(id));
    }
    return render_tokens(words);
}

inline std::string join_words(std::span<const std::int32_t> ids, const Vocabulary& vocab, std::string_view sep = " ") {
    std::string out;
    for (auto id : ids) {
        if (id == vocab.pad() || id == vocab.bos() || id == vocab.eos()) continue;
        if (!out.empty()) out += sep;
        out += vocab.word(id);
    }
    return out;
}

/// Fills token vectors from raw text.
inline void encode(CodeSample& s, const Vocabulary& vocab) {
    s.source_tokens = tokenize(s.raw_source, vocab);
    s.target_tokens = tokenize_target(s.raw_target, vocab);
    if (s.source_tokens.empty()) throw ConfigError("sample " + s.id + ": empty source");
    if (s.target_tokens.empty()) throw ConfigError("sample " + s.id + ": empty target");
}

inline void encode(std::vector<CodeSample>& samples, const Vocabulary& vocab) {
    for (auto& s : samples) encode(s, vocab);
}

// ---------------------------------------------------------------------------
// JSONL
// ---------------------------------------------------------------------------

/// Writes one `{"id","code","target","label","origin"}` object per line. With
/// `with_provenance` false the label and origin fields are omitted.
inline void save_jsonl(std::span<const CodeSample> samples, const std::filesystem::path& path, bool with_provenance = true) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& s : samples) {
        nlohmann::ordered_json j;
        j["id"] = s.id;
        j["code"] = s.raw_source;
        j["target"] = s.raw_target;
        if (with_provenance) {
            j["label"] = to_string(s.label);
            if (!s.origin.empty()) j["origin"] = s.origin;
        }
        out << j.dump() << '\n';
    }
}

/// Reads samples without tokenizing them; call `encode` afterwards. Blank lines and a
/// leading UTF-8 byte-order mark are skipped.
inline std::vector<CodeSample> load_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::vector<CodeSample> samples;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("malformed JSON: ") + e.what(), lineno);
        }
        if (!j.is_object()) throw ParseError("expected a JSON object", lineno);
        for (const char* key : {"id", "code", "target"})
            if (!j.contains(key) || !j[key].is_string()) throw ParseError(std::string("missing string field \"") + key + "\"", lineno);
        CodeSample s;
        s.id = j["id"].get<std::string>();
        s.raw_source = j["code"].get<std::string>();
        s.raw_target = j["target"].get<std::string>();
        if (j.contains("label")) {
            try {
                s.label = parse_label(j["label"].get<std::string>());
            } catch (const std::exception& e) {
                throw ParseError(e.what(), lineno);
            }
        }
        if (j.contains("origin")) s.origin = j["origin"].get<std::string>();
        samples.push_back(std::move(s));
    }
    return samples;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitSpec {
    double train = 0.8;
    double valid = 0.1;
    double test = 0.1;
    std::uint64_t seed = 0;
};

struct Splits {
    std::vector<CodeSample> train;
    std::vector<CodeSample> valid;
    std::vector<CodeSample> test;
};

inline Splits split(std::vector<CodeSample> samples, const SplitSpec& spec) {
    if (spec.train < 0 || spec.valid < 0 || spec.test < 0 || std::abs(spec.train + spec.valid + spec.test - 1.0) > 1e-9)
        throw ConfigError("split fractions must be non-negative and sum to 1");
    std::unordered_set<std::string> ids;
    for (const auto& s : samples)
        if (!ids.insert(s.id).second) throw ConfigError("split: duplicate sample id " + s.id);
    Rng rng(derive_seed(spec.seed, "split"));
    shuffle(samples.begin(), samples.end(), rng);
    const std::size_t n = samples.size();
    const auto n_train = std::size_t(std::llround(spec.train * double(n)));
    const auto n_valid = std::min(n - n_train, std::size_t(std::llround(spec.valid * double(n))));
    Splits out;
    out.train.assign(samples.begin(), samples.begin() + std::ptrdiff_t(n_train));
    out.valid.assign(samples.begin() + std::ptrdiff_t(n_train), samples.begin() + std::ptrdiff_t(n_train + n_valid));
    out.test.assign(samples.begin() + std::ptrdiff_t(n_train + n_valid), samples.end());
    return out;
}

} // namespace stabforge
