#pragma once

// Lexer for the Python subset used by the synthetic corpora: def/return/if/for/assign/call,
// attribute access, string and number literals. Layout is reported through NEWLINE, INDENT
// and DEDENT pseudo-tokens whose text is the bare word, so a detokenized stream re-lexes to
// the same token texts.

#include "stabforge/error.hpp"

#include <array>
#include <cctype>
#include <string>
#include <string_view>
#include <vector>

namespace stabforge {

enum class TokenKind { Name, Keyword, Number, String, Op, Newline, Indent, Dedent };

struct Token {
    TokenKind kind;
    std::string text;
    std::size_t offset = 0;  // byte offset into the source; pseudo-tokens have length 0
    std::size_t length = 0;
    std::size_t line = 1;
    std::size_t column = 1;
};

inline constexpr std::string_view kNewlineToken = "NEWLINE";
inline constexpr std::string_view kIndentToken = "INDENT";
inline constexpr std::string_view kDedentToken = "DEDENT";

inline bool is_python_keyword(std::string_view w) {
    static constexpr std::array<std::string_view, 35> kKeywords = {
        "False", "None",   "True",  "and",    "as",       "assert", "async",  "await",  "break",
        "class", "continue", "def", "del",    "elif",     "else",   "except", "finally", "for",
        "from",  "global", "if",    "import", "in",       "is",     "lambda", "nonlocal", "not",
        "or",    "pass",   "raise", "return", "try",      "while",  "with",   "yield"};
    for (auto k : kKeywords)
        if (k == w) return true;
    return false;
}

inline bool is_python_builtin(std::string_view w) {
    static constexpr std::array<std::string_view, 40> kBuiltins = {
        "print", "len",  "range", "open",  "int",   "str",    "float", "list",      "dict",  "set",
        "tuple", "bool", "sorted", "enumerate", "zip", "min", "max",  "sum",       "abs",   "isinstance",
        "type",  "map",  "filter", "any",  "all",   "round",  "sin",   "cos",       "exp",   "sqrt",
        "log",   "pow",  "iter",  "next",  "super", "self",   "object", "Exception", "ValueError", "_"};
    for (auto b : kBuiltins)
        if (b == w) return true;
    return false;
}

inline bool is_layout_token(std::string_view w) {
    return w == kNewlineToken || w == kIndentToken || w == kDedentToken;
}

/// Words that may never be chosen as replacement identifiers.
inline bool is_reserved_word(std::string_view w) {
    return is_python_keyword(w) || is_python_builtin(w) || is_layout_token(w);
}

inline bool is_identifier_shaped(std::string_view w) {
    if (w.empty() || !(std::isalpha(static_cast<unsigned char>(w[0])) || w[0] == '_')) return false;
    for (char c : w)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
    return true;
}

namespace detail {

inline bool starts_with_op(std::string_view rest, std::string_view& op) {
    static constexpr std::array<std::string_view, 14> kTwoChar = {"==", "!=", "<=", ">=", "**", "//", "+=",
                                                                 "-=", "*=", "/=", "->", "<<", ">>", "%="};
    for (auto o : kTwoChar)
        if (rest.substr(0, 2) == o) {
            op = o;
            return true;
        }
    static constexpr std::string_view kSingle = "()[]{},:.;=+-*/%<>@&|^~";
    if (!rest.empty() && kSingle.find(rest[0]) != std::string_view::npos) {
        op = rest.substr(0, 1);
        return true;
    }
    return false;
}

} // namespace detail

/// Tokenizes `source`. A NEWLINE is emitted for every newline character that ends a
/// non-blank logical line; text without a trailing newline ends without one, so a fragment
/// such as "return data" lexes to exactly two tokens. Open blocks are closed at EOF.
inline std::vector<Token> lex(std::string_view source) {
    std::vector<Token> tokens;
    std::vector<std::size_t> indents{0};
    std::size_t pos = 0, line = 1, line_start = 0;
    int depth = 0;
    bool at_line_start = true;
    bool line_has_tokens = false;

    auto column = [&](std::size_t p) { return p - line_start + 1; };
    auto push = [&](TokenKind kind, std::string text, std::size_t offset, std::size_t length) {
        tokens.push_back(Token{kind, std::move(text), offset, length, line, column(offset)});
        line_has_tokens = true;
    };

    while (pos < source.size()) {
        if (at_line_start && depth == 0) {
            std::size_t width = 0, p = pos;
            while (p < source.size() && (source[p] == ' ' || source[p] == '\t')) {
                width += source[p] == '\t' ? 8 - (width % 8) : 1;
                ++p;
            }
            // Blank and comment-only lines do not affect layout.
            if (p >= source.size() || source[p] == '\n' || source[p] == '#' || source[p] == '\r') {
                while (p < source.size() && source[p] != '\n') ++p;
                if (p < source.size()) {
                    ++p;
                    ++line;
                    line_start = p;
                }
                pos = p;
                continue;
            }
            if (width > indents.back()) {
                indents.push_back(width);
                tokens.push_back(Token{TokenKind::Indent, std::string(kIndentToken), p, 0, line, column(p)});
            } else {
                while (width < indents.back()) {
                    indents.pop_back();
                    tokens.push_back(Token{TokenKind::Dedent, std::string(kDedentToken), p, 0, line, column(p)});
                }
                if (width != indents.back()) throw LexError("inconsistent dedent", line, column(p));
            }
            pos = p;
            at_line_start = false;
            line_has_tokens = false;
        }

        const char c = source[pos];
        if (c == '\n') {
            if (depth == 0 && line_has_tokens) {
                tokens.push_back(Token{TokenKind::Newline, std::string(kNewlineToken), pos, 0, line, column(pos)});
                at_line_start = true;
            }
            ++pos;
            ++line;
            line_start = pos;
            if (depth == 0) at_line_start = true;
            continue;
        }
        if (c == ' ' || c == '\t' || c == '\r') {
            ++pos;
            continue;
        }
        if (c == '#') {
            while (pos < source.size() && source[pos] != '\n') ++pos;
            continue;
        }
        if (c == '\\' && pos + 1 < source.size() && source[pos + 1] == '\n') {
            pos += 2;
            ++line;
            line_start = pos;
            continue;
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t end = pos;
            while (end < source.size() && (std::isalnum(static_cast<unsigned char>(source[end])) || source[end] == '_')) ++end;
            std::string word(source.substr(pos, end - pos));
            const bool kw = is_python_keyword(word);
            push(kw ? TokenKind::Keyword : TokenKind::Name, std::move(word), pos, end - pos);
            pos = end;
            continue;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) ||
            (c == '.' && pos + 1 < source.size() && std::isdigit(static_cast<unsigned char>(source[pos + 1])))) {
            std::size_t end = pos;
            bool seen_dot = false, seen_exp = false;
            while (end < source.size()) {
                const char d = source[end];
                if (std::isdigit(static_cast<unsigned char>(d)) || d == '_') {
                    ++end;
                } else if (d == '.' && !seen_dot && !seen_exp) {
                    seen_dot = true;
                    ++end;
                } else if ((d == 'e' || d == 'E') && !seen_exp) {
                    seen_exp = true;
                    ++end;
                    if (end < source.size() && (source[end] == '+' || source[end] == '-')) ++end;
                } else {
                    break;
                }
            }
            if (end < source.size() && (std::isalpha(static_cast<unsigned char>(source[end])) || source[end] == '_'))
                throw LexError("malformed number", line, column(pos));
            push(TokenKind::Number, std::string(source.substr(pos, end - pos)), pos, end - pos);
            pos = end;
            continue;
        }
        if (c == '"' || c == '\'') {
            std::size_t end = pos + 1;
            while (end < source.size() && source[end] != c) {
                if (source[end] == '\n') throw LexError("unterminated string", line, column(pos));
                if (source[end] == '\\') ++end;
                ++end;
            }
            if (end >= source.size()) throw LexError("unterminated string", line, column(pos));
            ++end;
            push(TokenKind::String, std::string(source.substr(pos, end - pos)), pos, end - pos);
            pos = end;
            continue;
        }
        std::string_view op;
        if (detail::starts_with_op(source.substr(pos), op)) {
            if (op == "(" || op == "[" || op == "{") ++depth;
            if (op == ")" || op == "]" || op == "}") {
                if (depth == 0) throw LexError("unbalanced '" + std::string(op) + "'", line, column(pos));
                --depth;
            }
            push(TokenKind::Op, std::string(op), pos, op.size());
            pos += op.size();
            continue;
        }
        throw LexError(std::string("unexpected character '") + c + "'", line, column(pos));
    }
    if (depth != 0) throw LexError("unclosed bracket at end of input", line, column(pos));
    while (indents.size() > 1) {
        indents.pop_back();
        tokens.push_back(Token{TokenKind::Dedent, std::string(kDedentToken), pos, 0, line, column(pos)});
    }
    return tokens;
}

/// Re-lexes pseudo-token words ("NEWLINE", "INDENT", "DEDENT") back into layout tokens.
/// Used for canonical space-joined text, where layout appears as plain words.
inline TokenKind classify_word(std::string_view w) {
    if (w == kNewlineToken) return TokenKind::Newline;
    if (w == kIndentToken) return TokenKind::Indent;
    if (w == kDedentToken) return TokenKind::Dedent;
    if (is_python_keyword(w)) return TokenKind::Keyword;
    if (is_identifier_shaped(w)) return TokenKind::Name;
    if (!w.empty() && (std::isdigit(static_cast<unsigned char>(w[0])) || w[0] == '.')) return TokenKind::Number;
    if (!w.empty() && (w[0] == '"' || w[0] == '\'')) return TokenKind::String;
    return TokenKind::Op;
}

/// Renders token texts as Python source: tokens on a line are joined by single spaces and
/// layout tokens become line breaks and four-space indentation.
inline std::string render_tokens(const std::vector<std::string>& words) {
    std::string out;
    std::size_t indent = 0;
    bool fresh_line = true;
    for (const auto& w : words) {
        if (w == kNewlineToken) {
            out += '\n';
            fresh_line = true;
            continue;
        }
        if (w == kIndentToken) {
            ++indent;
            continue;
        }
        if (w == kDedentToken) {
            if (indent > 0) --indent;
            continue;
        }
        if (fresh_line) {
            out.append(indent * 4, ' ');
            fresh_line = false;
        } else {
            out += ' ';
        }
        out += w;
    }
    return out;
}

} // namespace stabforge
