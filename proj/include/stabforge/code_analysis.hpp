#pragma once

// Identifier extraction, consistent renaming and dead-code insertion over lexed samples.

#include "stabforge/corpus.hpp"
#include "stabforge/error.hpp"
#include "stabforge/lexer.hpp"
#include "stabforge/rng.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

namespace stabforge {

/// One modifiable identifier and the token positions where it occurs.
struct IdentifierEntry {
    std::string name;
    std::vector<std::size_t> positions;  // ascending, 0-based over the sample's token stream

    bool operator==(const IdentifierEntry&) const = default;
};

/// Modifiable identifiers of a sample, ordered by first occurrence.
struct IdentifierMap {
    std::vector<IdentifierEntry> entries;
    std::size_t length = 0;  // total token count L

    std::size_t size() const noexcept { return entries.size(); }
    bool empty() const noexcept { return entries.empty(); }
    const IdentifierEntry* find(std::string_view name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
    /// All positions of all identifiers, ascending.
    std::vector<std::size_t> all_positions() const {
        std::vector<std::size_t> out;
        for (const auto& e : entries) out.insert(out.end(), e.positions.begin(), e.positions.end());
        std::sort(out.begin(), out.end());
        return out;
    }
};

/// Replacement name for each renamed identifier.
using RenameMap = std::map<std::string, std::string>;

namespace detail {

inline bool is_name(const std::vector<Token>& t, std::size_t i) { return i < t.size() && t[i].kind == TokenKind::Name; }
inline bool is_op(const std::vector<Token>& t, std::size_t i, std::string_view op) {
    return i < t.size() && t[i].kind == TokenKind::Op && t[i].text == op;
}
inline bool is_kw(const std::vector<Token>& t, std::size_t i, std::string_view kw) {
    return i < t.size() && t[i].kind == TokenKind::Keyword && t[i].text == kw;
}
inline bool is_assign_op(const Token& tok) {
    static const std::set<std::string> ops{"=", "+=", "-=", "*=", "/=", "%=", "//="};
    return tok.kind == TokenKind::Op && ops.count(tok.text);
}

/// Names written as keyword arguments (`f(key=value)`): a name followed by "=" inside brackets.
inline std::vector<bool> keyword_argument_mask(const std::vector<Token>& toks) {
    std::vector<bool> mask(toks.size(), false);
    int depth = 0;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (toks[i].kind == TokenKind::Op) {
            if (toks[i].text == "(" || toks[i].text == "[" || toks[i].text == "{") ++depth;
            if (toks[i].text == ")" || toks[i].text == "]" || toks[i].text == "}") --depth;
        }
        if (depth > 0 && toks[i].kind == TokenKind::Name && is_op(toks, i + 1, "=")) mask[i] = true;
    }
    return mask;
}

} // namespace detail

/// Parameters and locally bound names of the sample's functions. Excluded: the defined
/// function names, imported names, keywords, builtins, attribute names after ".", keyword
/// argument names, and names that are only read (calls to external functions).
inline IdentifierMap extract_identifiers(std::string_view source) {
    const std::vector<Token> toks = lex(source);
    std::set<std::string> bound, excluded;
    const auto kwarg = detail::keyword_argument_mask(toks);

    auto statement_start = [&](std::size_t i) {
        return i == 0 || toks[i - 1].kind == TokenKind::Newline || toks[i - 1].kind == TokenKind::Indent ||
               toks[i - 1].kind == TokenKind::Dedent;
    };

    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (detail::is_kw(toks, i, "def") && detail::is_name(toks, i + 1)) {
            excluded.insert(toks[i + 1].text);
            // Parameter list: names directly after "(" or "," (optionally "*"/"**") at depth 1.
            std::size_t j = i + 2;
            if (!detail::is_op(toks, j, "(")) continue;
            int depth = 0;
            for (; j < toks.size(); ++j) {
                if (toks[j].kind == TokenKind::Op && (toks[j].text == "(" || toks[j].text == "[" || toks[j].text == "{")) ++depth;
                if (toks[j].kind == TokenKind::Op && (toks[j].text == ")" || toks[j].text == "]" || toks[j].text == "}")) {
                    if (--depth == 0) break;
                }
                if (depth == 1 && toks[j].kind == TokenKind::Name) {
                    std::size_t k = j - 1;
                    while (detail::is_op(toks, k, "*") || detail::is_op(toks, k, "**")) --k;
                    if (detail::is_op(toks, k, "(") || detail::is_op(toks, k, ",")) bound.insert(toks[j].text);
                }
            }
        } else if (detail::is_kw(toks, i, "import")) {
            for (std::size_t j = i + 1; j < toks.size() && toks[j].kind != TokenKind::Newline; ++j)
                if (toks[j].kind == TokenKind::Name) excluded.insert(toks[j].text);
        } else if (detail::is_kw(toks, i, "for") || detail::is_kw(toks, i, "as")) {
            for (std::size_t j = i + 1; j < toks.size(); ++j) {
                if (toks[j].kind == TokenKind::Name) bound.insert(toks[j].text);
                else if (!(detail::is_op(toks, j, ",") || detail::is_op(toks, j, "(") || detail::is_op(toks, j, ")"))) break;
            }
        } else if (statement_start(i) && detail::is_name(toks, i)) {
            // Assignment targets: name ("," name)* followed by an assignment operator.
            std::vector<std::string> targets;
            std::size_t j = i;
            while (detail::is_name(toks, j)) {
                targets.push_back(toks[j].text);
                if (detail::is_op(toks, j + 1, ",")) j += 2;
                else break;
            }
            if (j + 1 < toks.size() && detail::is_assign_op(toks[j + 1]))
                bound.insert(targets.begin(), targets.end());
        }
    }

    IdentifierMap map;
    map.length = toks.size();
    std::map<std::string, std::size_t> slot;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        const auto& t = toks[i];
        if (t.kind != TokenKind::Name || kwarg[i]) continue;
        if (i > 0 && detail::is_op(toks, i - 1, ".")) continue;
        if (!bound.count(t.text) || excluded.count(t.text) || is_reserved_word(t.text)) continue;
        auto it = slot.find(t.text);
        if (it == slot.end()) {
            slot[t.text] = map.entries.size();
            map.entries.push_back({t.text, {i}});
        } else {
            map.entries[it->second].positions.push_back(i);
        }
    }
    return map;
}

inline IdentifierMap extract_identifiers(const CodeSample& sample) { return extract_identifiers(sample.raw_source); }

/// Checks the RenameMap invariants against a sample: keys are identifiers of the sample,
/// replacements are distinct candidate tokens that do not already occur in the sample
/// (an identifier may keep its own name).
inline void validate_renaming(const CodeSample& sample, const IdentifierMap& idmap, const RenameMap& renames,
                              const Vocabulary& vocab) {
    std::set<std::string> present;
    for (const auto& t : lex(sample.raw_source)) present.insert(t.text);
    std::set<std::string> used;
    for (const auto& [from, to] : renames) {
        if (!idmap.find(from)) throw ValidityError("rename: '" + from + "' is not a modifiable identifier");
        if (is_reserved_word(to) || !is_identifier_shaped(to))
            throw ValidityError("rename: '" + to + "' is not a valid identifier name");
        if (!vocab.is_candidate(vocab.index_of(to)))
            throw ValidityError("rename: '" + to + "' is not in the identifier candidate set");
        if (!used.insert(to).second) throw ValidityError("rename: '" + to + "' assigned to two identifiers");
        if (to != from && present.count(to)) throw ValidityError("rename: '" + to + "' already occurs in the sample");
    }
}

/// Replaces every occurrence of each renamed identifier, keeping the original layout.
inline CodeSample apply_renaming(const CodeSample& sample, const IdentifierMap& idmap, const RenameMap& renames,
                                 const Vocabulary& vocab, Label label) {
    validate_renaming(sample, idmap, renames, vocab);
    const auto toks = lex(sample.raw_source);
    std::vector<std::pair<std::size_t, const std::string*>> edits;  // token position -> replacement
    for (const auto& e : idmap.entries) {
        auto it = renames.find(e.name);
        if (it == renames.end()) continue;
        for (auto p : e.positions) {
            if (p >= toks.size() || toks[p].text != e.name) throw ValidityError("rename: identifier map does not match sample");
            edits.emplace_back(p, &it->second);
        }
    }
    std::sort(edits.begin(), edits.end());
    std::string out;
    std::size_t cursor = 0;
    for (const auto& [p, replacement] : edits) {
        out.append(sample.raw_source, cursor, toks[p].offset - cursor);
        out += *replacement;
        cursor = toks[p].offset + toks[p].length;
    }
    out.append(sample.raw_source, cursor, std::string::npos);

    CodeSample result = sample;
    result.raw_source = std::move(out);
    result.label = label;
    result.source_tokens = tokenize(result.raw_source, vocab);
    return result;
}

enum class SnippetKind { fixed, grammar };

inline constexpr std::string_view kDefaultFixedSnippet = "if sin(0.7) < -1:\n    print(\"init\")";

/// Samples one impossible-condition snippet from a small probabilistic grammar:
///   snippet -> "if" cond ":" NEWLINE INDENT stmt
///   cond    -> trig "(" num ")" "<" neg | trig "(" num ")" ">" pos | "exp" "(" num ")" "<" "0"
///   trig    -> sin | cos          num -> 0.3 | 0.5 | 0.7 | 0.9
///   neg     -> -1 | -2            pos -> 1 | 2
///   stmt    -> print "(" msg ")" | "_" "=" msg
///   msg     -> "debug" | "init" | "trace" | "done"
inline std::string sample_grammar_snippet(Rng& rng) {
    static constexpr std::array<std::string_view, 2> kTrig{"sin", "cos"};
    static constexpr std::array<std::string_view, 4> kNum{"0.3", "0.5", "0.7", "0.9"};
    static constexpr std::array<std::string_view, 2> kNeg{"-1", "-2"};
    static constexpr std::array<std::string_view, 2> kPos{"1", "2"};
    static constexpr std::array<std::string_view, 4> kMsg{"\"debug\"", "\"init\"", "\"trace\"", "\"done\""};
    auto pick = [&](const auto& options) { return std::string(options[uniform_index(rng, options.size())]); };
    std::string cond;
    const double u = uniform_open(rng);
    if (u < 0.35) cond = pick(kTrig) + "(" + pick(kNum) + ") < " + pick(kNeg);
    else if (u < 0.7) cond = pick(kTrig) + "(" + pick(kNum) + ") > " + pick(kPos);
    else cond = "exp(" + pick(kNum) + ") < 0";
    const std::string stmt = uniform_open(rng) < 0.5 ? "print(" + pick(kMsg) + ")" : "_ = " + pick(kMsg);
    return "if " + cond + ":\n    " + stmt;
}

/// Inserts a never-executed snippet as the first statement of the first function body.
inline CodeSample insert_dead_code(const CodeSample& sample, SnippetKind kind, std::uint64_t seed, const Vocabulary& vocab,
                                   std::string_view fixed_snippet = kDefaultFixedSnippet) {
    const auto toks = lex(sample.raw_source);
    std::size_t body = toks.size();
    for (std::size_t i = 0; i + 2 < toks.size(); ++i) {
        if (detail::is_kw(toks, i, "def")) {
            for (std::size_t j = i; j + 2 < toks.size(); ++j) {
                if (detail::is_op(toks, j, ":") && toks[j + 1].kind == TokenKind::Newline && toks[j + 2].kind == TokenKind::Indent) {
                    body = j + 3;
                    break;
                }
            }
            break;
        }
    }
    if (body >= toks.size()) throw ValidityError("insert_dead_code: sample " + sample.id + " has no function body");
    std::string snippet;
    if (kind == SnippetKind::fixed) {
        snippet = std::string(fixed_snippet);
    } else {
        Rng rng(derive_seed(seed, "grammar-snippet"));
        snippet = sample_grammar_snippet(rng);
    }
    const std::size_t offset = toks[body].offset;
    const std::size_t line_begin = sample.raw_source.rfind('\n', offset) + 1;
    const std::string indent = sample.raw_source.substr(line_begin, offset - line_begin);
    std::string block;
    std::size_t start = 0;
    while (start <= snippet.size()) {
        std::size_t end = snippet.find('\n', start);
        if (end == std::string::npos) end = snippet.size();
        if (!block.empty()) block += indent;
        block.append(snippet, start, end - start);
        block += '\n';
        start = end + 1;
    }
    CodeSample result = sample;
    result.raw_source = sample.raw_source.substr(0, offset) + block + indent + sample.raw_source.substr(offset);
    result.label = kind == SnippetKind::fixed ? Label::fixed : Label::grammar;
    result.source_tokens = tokenize(result.raw_source, vocab);
    return result;
}

} // namespace stabforge
