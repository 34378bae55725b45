#include "stabforge/code_analysis.hpp"
#include "stabforge/synthetic.hpp"

#include <gtest/gtest.h>

#include <regex>

using namespace stabforge;

namespace {

const std::string kExample = "def f(path):\n    data = read(path)\n    return data\n";

CodeSample make_sample(const std::string& code, const std::string& target = "read_data") {
    CodeSample s;
    s.id = "s";
    s.raw_source = code;
    s.raw_target = target;
    return s;
}

Vocabulary vocab_for(std::vector<CodeSample> samples, std::vector<std::string> extra_names = {}) {
    for (const auto& w : extra_names) samples.push_back(make_sample(w + " = 0\n"));
    return build_vocab(samples);
}

// Language of the snippet grammar, written independently of the sampler.
const std::regex kGrammarLanguage(
    R"re(if ((sin|cos)\((0\.3|0\.5|0\.7|0\.9)\) < -(1|2)|(sin|cos)\((0\.3|0\.5|0\.7|0\.9)\) > (1|2)|exp\((0\.3|0\.5|0\.7|0\.9)\) < 0):\n    (print\("(debug|init|trace|done)"\)|_ = "(debug|init|trace|done)"))re");

} // namespace

// Hand-lexed: def0 f1 (2 path3 )4 :5 NEWLINE6 INDENT7 data8 =9 read10 (11 path12 )13
// NEWLINE14 return15 data16 NEWLINE17 DEDENT18.
TEST(Identifiers, HandLexedExample) {
    auto m = extract_identifiers(kExample);
    ASSERT_EQ(m.size(), 2u);
    EXPECT_EQ(m.entries[0].name, "path");
    EXPECT_EQ(m.entries[0].positions, (std::vector<std::size_t>{3, 12}));
    EXPECT_EQ(m.entries[1].name, "data");
    EXPECT_EQ(m.entries[1].positions, (std::vector<std::size_t>{8, 16}));
    EXPECT_EQ(m.length, 19u);
}

TEST(Identifiers, NoIdentifiers) { EXPECT_TRUE(extract_identifiers("def g():\n    return 1\n").empty()); }

TEST(Identifiers, AttributeExcluded) {
    // def0 h1 (2 x3 )4 :5 NEWLINE6 INDENT7 return8 x9 .10 shape11
    auto m = extract_identifiers("def h(x):\n    return x.shape\n");
    ASSERT_EQ(m.size(), 1u);
    EXPECT_EQ(m.entries[0].name, "x");
    EXPECT_EQ(m.entries[0].positions, (std::vector<std::size_t>{3, 9}));
}

TEST(Identifiers, ExclusionsAndBindings) {
    const std::string code =
        "import json\n"
        "def load(a, b):\n"
        "    for c in a:\n"
        "        b += c\n"
        "    d, e = json.parse(b, key=a)\n"
        "    with open(d) as fh:\n"
        "        self.x = fh\n"
        "    return helper(e)\n";
    auto m = extract_identifiers(code);
    std::vector<std::string> names;
    for (const auto& e : m.entries) names.push_back(e.name);
    EXPECT_EQ(names, (std::vector<std::string>{"a", "b", "c", "d", "e", "fh"}));
    EXPECT_EQ(m.find("key"), nullptr);
    EXPECT_EQ(m.find("load"), nullptr);
    EXPECT_EQ(m.find("json"), nullptr);
    EXPECT_EQ(m.find("helper"), nullptr);
    EXPECT_EQ(m.find("open"), nullptr);
    EXPECT_EQ(m.find("self"), nullptr);
}

TEST(Identifiers, LexFailureNamesPosition) {
    try {
        extract_identifiers("def f(x):\n    return x ? 1\n");
        FAIL();
    } catch (const LexError& e) {
        EXPECT_EQ(e.line(), 2u);
        EXPECT_EQ(e.column(), 14u);
    }
}

TEST(Identifiers, InvariantsOnCorpus) {
    for (auto fam : {TemplateFamily::A, TemplateFamily::B, TemplateFamily::C}) {
        for (const auto& s : generate_synthetic_corpus(fam, 200, 21)) {
            auto m = extract_identifiers(s);
            auto toks = lex(s.raw_source);
            std::set<std::size_t> seen;
            EXPECT_FALSE(m.empty()) << s.raw_source;
            for (const auto& e : m.entries) {
                EXPECT_FALSE(is_reserved_word(e.name));
                for (auto p : e.positions) {
                    EXPECT_EQ(toks[p].text, e.name);
                    EXPECT_TRUE(seen.insert(p).second);
                    EXPECT_TRUE(p == 0 || toks[p - 1].text != ".");
                }
            }
        }
    }
}

TEST(Renaming, PositionalSubstitution) {
    auto s = make_sample(kExample);
    auto vocab = vocab_for({s}, {"src", "buf"});
    encode(s, vocab);
    auto m = extract_identifiers(s);
    auto r = apply_renaming(s, m, {{"path", "src"}, {"data", "buf"}}, vocab, Label::stab);
    auto toks = lex(r.raw_source);
    auto orig = lex(s.raw_source);
    ASSERT_EQ(toks.size(), orig.size());
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i == 3 || i == 12) EXPECT_EQ(toks[i].text, "src");
        else if (i == 8 || i == 16) EXPECT_EQ(toks[i].text, "buf");
        else EXPECT_EQ(toks[i].text, orig[i].text);
    }
    EXPECT_EQ(r.label, Label::stab);
    EXPECT_EQ(r.source_tokens, tokenize(r.raw_source, vocab));
    EXPECT_EQ(r.raw_source, "def f(src):\n    buf = read(src)\n    return buf\n");
}

TEST(Renaming, EmptyMapOnlyRelabels) {
    auto s = make_sample(kExample);
    auto vocab = vocab_for({s});
    encode(s, vocab);
    auto r = apply_renaming(s, extract_identifiers(s), {}, vocab, Label::greedy);
    EXPECT_EQ(r.raw_source, s.raw_source);
    EXPECT_EQ(r.source_tokens, s.source_tokens);
    EXPECT_EQ(r.label, Label::greedy);
}

TEST(Renaming, ValidityErrors) {
    auto s = make_sample(kExample);
    auto vocab = vocab_for({s}, {"src", "buf"});
    auto m = extract_identifiers(s);
    EXPECT_THROW(apply_renaming(s, m, {{"path", "data"}}, vocab, Label::stab), ValidityError);
    EXPECT_THROW(apply_renaming(s, m, {{"path", "read"}}, vocab, Label::stab), ValidityError);
    EXPECT_THROW(apply_renaming(s, m, {{"path", "return"}}, vocab, Label::stab), ValidityError);
    EXPECT_THROW(apply_renaming(s, m, {{"path", "print"}}, vocab, Label::stab), ValidityError);
    EXPECT_THROW(apply_renaming(s, m, {{"path", "src"}, {"data", "src"}}, vocab, Label::stab), ValidityError);
    EXPECT_THROW(apply_renaming(s, m, {{"read", "src"}}, vocab, Label::stab), ValidityError);
    EXPECT_THROW(apply_renaming(s, m, {{"path", "notinvocab"}}, vocab, Label::stab), ValidityError);
    // An identifier may keep its own name.
    EXPECT_NO_THROW(apply_renaming(s, m, {{"path", "path"}, {"data", "buf"}}, vocab, Label::stab));
}

// Renaming with random valid maps preserves token count, touches only identifier positions,
// and re-extraction yields identical position sets keyed by the new names.
TEST(Renaming, ReExtractionProperty) {
    auto a = generate_synthetic_corpus(TemplateFamily::A, 60, 5);
    auto b = generate_synthetic_corpus(TemplateFamily::B, 60, 5);
    std::vector<CodeSample> all = a;
    all.insert(all.end(), b.begin(), b.end());
    auto vocab = build_vocab(all);
    auto pool = family_identifiers(TemplateFamily::B);
    Rng rng(4);
    for (auto& s : a) {
        encode(s, vocab);
        auto m = extract_identifiers(s);
        auto names = pool;
        shuffle(names.begin(), names.end(), rng);
        RenameMap r;
        for (std::size_t j = 0; j < m.size(); ++j) r[m.entries[j].name] = names[j];
        auto out = apply_renaming(s, m, r, vocab, Label::stab);
        ASSERT_EQ(out.source_tokens.size(), s.source_tokens.size());
        auto touched = m.all_positions();
        for (std::size_t i = 0; i < s.source_tokens.size(); ++i) {
            if (!std::binary_search(touched.begin(), touched.end(), i)) {
                EXPECT_EQ(out.source_tokens[i], s.source_tokens[i]);
            }
        }
        auto m2 = extract_identifiers(out);
        ASSERT_EQ(m2.size(), m.size());
        for (std::size_t j = 0; j < m.size(); ++j) {
            EXPECT_EQ(m2.entries[j].name, r[m.entries[j].name]);
            EXPECT_EQ(m2.entries[j].positions, m.entries[j].positions);
        }
    }
}

TEST(DeadCode, FixedSnippetIsFirstBodyStatement) {
    auto corpus = generate_synthetic_corpus(TemplateFamily::A, 10, 2);
    auto vocab = build_vocab(corpus);
    for (const auto& s : corpus) {
        auto out = insert_dead_code(s, SnippetKind::fixed, 0, vocab);
        EXPECT_EQ(out.label, Label::fixed);
        const auto first_newline = s.raw_source.find('\n');
        const std::string head = s.raw_source.substr(0, first_newline + 1);
        EXPECT_EQ(out.raw_source, head + "    if sin(0.7) < -1:\n        print(\"init\")\n" + s.raw_source.substr(first_newline + 1));
        EXPECT_NO_THROW(lex(out.raw_source));
        // The snippet does not use any of the sample's identifiers.
        auto ids = extract_identifiers(s);
        auto ids2 = extract_identifiers(out);
        EXPECT_EQ(ids.size(), ids2.size());
    }
}

TEST(DeadCode, GrammarSnippetsBelongToLanguage) {
    std::set<std::string> distinct;
    for (std::uint64_t seed = 0; seed < 200; ++seed) {
        Rng rng(derive_seed(seed, "grammar-snippet"));
        auto snippet = sample_grammar_snippet(rng);
        EXPECT_TRUE(std::regex_match(snippet, kGrammarLanguage)) << snippet;
        distinct.insert(snippet);
    }
    EXPECT_GT(distinct.size(), 20u);
}

TEST(DeadCode, GrammarDeterministicPerSeed) {
    auto corpus = generate_synthetic_corpus(TemplateFamily::B, 1, 2);
    auto vocab = build_vocab(corpus);
    auto a = insert_dead_code(corpus[0], SnippetKind::grammar, 42, vocab);
    auto b = insert_dead_code(corpus[0], SnippetKind::grammar, 42, vocab);
    EXPECT_EQ(a.raw_source, b.raw_source);
    EXPECT_EQ(a.label, Label::grammar);
    EXPECT_NO_THROW(lex(a.raw_source));
}

TEST(DeadCode, NoBodyRejected) {
    auto s = make_sample("x = 1\n");
    auto vocab = vocab_for({s});
    EXPECT_THROW(insert_dead_code(s, SnippetKind::fixed, 0, vocab), ValidityError);
}
