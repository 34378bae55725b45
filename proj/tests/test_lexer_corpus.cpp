#include "stabforge/corpus.hpp"
#include "stabforge/lexer.hpp"
#include "stabforge/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace stabforge;

namespace {

std::filesystem::path temp_file(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "stabforge_tests";
    std::filesystem::create_directories(dir);
    return dir / name;
}

std::vector<std::string> texts(const std::vector<Token>& toks) {
    std::vector<std::string> out;
    for (const auto& t : toks) out.push_back(t.text);
    return out;
}

} // namespace

TEST(Lexer, FragmentWithoutNewline) {
    auto toks = lex("return data");
    ASSERT_EQ(toks.size(), 2u);
    EXPECT_EQ(toks[0].kind, TokenKind::Keyword);
    EXPECT_EQ(toks[1].kind, TokenKind::Name);
    EXPECT_TRUE(lex("").empty());
}

TEST(Lexer, LayoutTokens) {
    auto toks = lex("def f(x):\n    if x:\n        return 1\n    return 2\n");
    const std::vector<std::string> expected{"def", "f", "(", "x", ")", ":", "NEWLINE", "INDENT", "if", "x", ":",
                                            "NEWLINE", "INDENT", "return", "1", "NEWLINE", "DEDENT", "return", "2",
                                            "NEWLINE", "DEDENT"};
    EXPECT_EQ(texts(toks), expected);
}

TEST(Lexer, NumbersStringsOperators) {
    auto toks = lex("x = a / (b + 1e-8) ** 2 != \"s\\\"q\"");
    const std::vector<std::string> expected{"x", "=", "a", "/", "(", "b", "+", "1e-8", ")", "**", "2", "!=", "\"s\\\"q\""};
    EXPECT_EQ(texts(toks), expected);
    EXPECT_EQ(toks[7].kind, TokenKind::Number);
    EXPECT_EQ(toks[12].kind, TokenKind::String);
}

TEST(Lexer, ErrorsCarryPosition) {
    try {
        lex("x = 1\ny = \"open\n");
        FAIL();
    } catch (const LexError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_EQ(e.column(), 5u);
    }
    EXPECT_THROW(lex("x = $"), LexError);
    EXPECT_THROW(lex("f(x"), LexError);
    EXPECT_THROW(lex("def f():\n        a = 1\n    b = 2\n"), LexError);
}

TEST(Lexer, OffsetsPointIntoSource) {
    const std::string src = "def f(path):\n    return path.x\n";
    for (const auto& t : lex(src)) {
        if (t.length) {
            EXPECT_EQ(src.substr(t.offset, t.length), t.text);
        }
    }
}

TEST(Vocab, HandCountedSmallCorpus) {
    CodeSample s;
    s.raw_source = "def f ( x )";
    s.raw_target = "f";
    std::vector<CodeSample> v{s};
    auto vocab = build_vocab(v);
    EXPECT_EQ(vocab.size(), 5u + 4u);
    for (const char* w : {"def", "f", "(", "x", ")"}) EXPECT_TRUE(vocab.contains(w));
    std::set<std::int32_t> specials{vocab.pad(), vocab.bos(), vocab.eos(), vocab.unk()};
    EXPECT_EQ(specials.size(), 4u);
    EXPECT_TRUE(vocab.is_candidate(vocab.index_of("x")));
    EXPECT_FALSE(vocab.is_candidate(vocab.index_of("def")));
    EXPECT_FALSE(vocab.is_candidate(vocab.index_of("(")));
}

TEST(Vocab, KeywordsAndLiteralsExcludedFromCandidates) {
    CodeSample s;
    s.raw_source = "def g(n):\n    while n:\n        n = n - 1\n    return \"done\"\n";
    s.raw_target = "g";
    std::vector<CodeSample> v{s};
    auto vocab = build_vocab(v);
    EXPECT_FALSE(vocab.is_candidate(vocab.index_of("while")));
    EXPECT_FALSE(vocab.is_candidate(vocab.index_of("1")));
    EXPECT_FALSE(vocab.is_candidate(vocab.index_of("\"done\"")));
    EXPECT_FALSE(vocab.is_candidate(vocab.index_of("NEWLINE")));
    for (auto c : vocab.identifier_candidates()) EXPECT_GE(c, 4);
}

TEST(Vocab, MinFreqMapsRareToUnk) {
    CodeSample a, b;
    a.raw_source = "x = y";
    a.raw_target = "t";
    b.raw_source = "x = z";
    b.raw_target = "t";
    std::vector<CodeSample> v{a, b};
    auto vocab = build_vocab(v, 2);
    EXPECT_TRUE(vocab.contains("x"));
    EXPECT_FALSE(vocab.contains("y"));
    EXPECT_EQ(tokenize("x = y", vocab).back(), vocab.unk());
}

TEST(Vocab, EmptyInputRejected) {
    std::vector<CodeSample> none;
    EXPECT_THROW(build_vocab(none), ConfigError);
}

TEST(Vocab, JsonRoundTripAndHashGuard) {
    auto corpus = generate_synthetic_corpus(TemplateFamily::A, 20, 1);
    auto vocab = build_vocab(corpus);
    auto back = Vocabulary::from_json(vocab.to_json());
    EXPECT_EQ(back.words(), vocab.words());
    EXPECT_EQ(back.identifier_candidates(), vocab.identifier_candidates());
    auto j = vocab.to_json();
    j["tokens"][5] = "tampered";
    EXPECT_THROW(Vocabulary::from_json(j), CorruptionError);
}

TEST(Tokenize, RoundTripAndUnk) {
    auto corpus = generate_synthetic_corpus(TemplateFamily::B, 50, 3);
    auto vocab = build_vocab(corpus);
    EXPECT_EQ(detokenize(tokenize("return x", vocab), vocab), "return x");
    EXPECT_TRUE(tokenize("", vocab).empty());
    auto ids = tokenize("return zzz_unseen", vocab);
    EXPECT_EQ(ids[1], vocab.unk());
    for (const auto& s : corpus) {
        auto t = tokenize(s.raw_source, vocab);
        for (auto id : t) EXPECT_LT(std::size_t(id), vocab.size());
        // Rendering the token stream and re-lexing it reproduces the token stream.
        EXPECT_EQ(tokenize(detokenize(t, vocab), vocab), t);
    }
}

TEST(Synthetic, DeterministicAndValid) {
    auto a = generate_synthetic_corpus(TemplateFamily::A, 100, 7);
    auto b = generate_synthetic_corpus(TemplateFamily::A, 100, 7);
    EXPECT_EQ(a, b);
    auto pa = temp_file("det_a.jsonl"), pb = temp_file("det_b.jsonl");
    save_jsonl(a, pa);
    save_jsonl(b, pb);
    std::ifstream fa(pa), fb(pb);
    std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
    EXPECT_EQ(sa, sb);
    for (const auto& s : a) EXPECT_NO_THROW(lex(s.raw_source));
    EXPECT_NE(a, generate_synthetic_corpus(TemplateFamily::A, 100, 8));
}

TEST(Synthetic, SingleSampleDrawnFromTemplatePool) {
    auto one = generate_synthetic_corpus(TemplateFamily::A, 1, 7);
    ASSERT_EQ(one.size(), 1u);
    auto words = target_words(one[0].raw_target);
    ASSERT_EQ(words.size(), 2u);
    auto verbs = family_verbs(TemplateFamily::A), nouns = family_nouns(TemplateFamily::A);
    EXPECT_NE(std::find(verbs.begin(), verbs.end(), words[0]), verbs.end());
    EXPECT_NE(std::find(nouns.begin(), nouns.end(), words[1]), nouns.end());
    EXPECT_EQ(one[0].raw_source.rfind("def f(", 0), 0u);
    EXPECT_EQ(one[0].origin, "synthA");
    EXPECT_EQ(one[0].label, Label::clean);
}

TEST(Synthetic, SummaryTargets) {
    auto cs = generate_synthetic_corpus(TemplateFamily::C, 10, 2, Task::cs);
    for (const auto& s : cs) EXPECT_GE(target_words(s.raw_target).size(), 4u);
}

TEST(Synthetic, ZeroCountRejected) { EXPECT_THROW(generate_synthetic_corpus(TemplateFamily::A, 0, 7), ConfigError); }

TEST(Synthetic, UnknownFamilyRejected) { EXPECT_THROW(parse_family("D"), ConfigError); }

// Families share fewer than 20% of their content token types (names and literals).
TEST(Synthetic, FamilySeparation) {
    auto types = [](TemplateFamily f) {
        std::set<std::string> out;
        for (const auto& s : generate_synthetic_corpus(f, 500, 11))
            for (const auto& t : lex(s.raw_source))
                if (t.kind == TokenKind::Name || t.kind == TokenKind::Number || t.kind == TokenKind::String)
                    out.insert(t.text);
        return out;
    };
    const auto a = types(TemplateFamily::A), b = types(TemplateFamily::B), c = types(TemplateFamily::C);
    auto jaccard = [](const std::set<std::string>& x, const std::set<std::string>& y) {
        std::size_t inter = 0;
        for (const auto& w : x) inter += y.count(w);
        return double(inter) / double(x.size() + y.size() - inter);
    };
    EXPECT_LT(jaccard(a, b), 0.2);
    EXPECT_LT(jaccard(a, c), 0.2);
    EXPECT_LT(jaccard(b, c), 0.2);
    for (const auto& id : family_identifiers(TemplateFamily::A)) {
        const auto& pb = family_identifiers(TemplateFamily::B);
        const auto& pc = family_identifiers(TemplateFamily::C);
        EXPECT_EQ(std::find(pb.begin(), pb.end(), id), pb.end());
        EXPECT_EQ(std::find(pc.begin(), pc.end(), id), pc.end());
    }
}

TEST(Jsonl, RoundTrip) {
    auto corpus = generate_synthetic_corpus(TemplateFamily::C, 3, 4);
    corpus[1].label = Label::fixed;
    auto path = temp_file("rt.jsonl");
    save_jsonl(corpus, path);
    auto back = load_jsonl(path);
    EXPECT_EQ(back, corpus);
}

TEST(Jsonl, MissingCodeReportsLine) {
    auto path = temp_file("bad.jsonl");
    std::ofstream(path) << "{\"id\":\"a\",\"code\":\"x\",\"target\":\"t\"}\n{\"id\":\"b\",\"target\":\"t\"}\n";
    try {
        load_jsonl(path);
        FAIL();
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line(), 2u);
    }
}

TEST(Jsonl, BomAndBlankLinesSkipped) {
    auto path = temp_file("bom.jsonl");
    std::ofstream(path, std::ios::binary) << "\xEF\xBB\xBF{\"id\":\"a\",\"code\":\"x = 1\",\"target\":\"t\"}\n\n"
                                             "{\"id\":\"b\",\"code\":\"y = 2\",\"target\":\"u\",\"label\":\"stab\"}\n\n";
    auto s = load_jsonl(path);
    ASSERT_EQ(s.size(), 2u);
    EXPECT_EQ(s[0].id, "a");
    EXPECT_EQ(s[1].label, Label::stab);
}

TEST(Split, DisjointAndExhaustive) {
    auto corpus = generate_synthetic_corpus(TemplateFamily::A, 101, 5);
    auto sp = split(corpus, {0.8, 0.1, 0.1, 3});
    std::set<std::string> ids;
    for (auto* part : {&sp.train, &sp.valid, &sp.test})
        for (const auto& s : *part) EXPECT_TRUE(ids.insert(s.id).second);
    EXPECT_EQ(ids.size(), 101u);
    EXPECT_EQ(sp.train.size(), 81u);
    EXPECT_THROW(split(corpus, {0.8, 0.3, 0.1, 3}), ConfigError);
}
