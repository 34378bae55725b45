#include "stabforge/trigger_optimizer.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace stabforge;

namespace {

const std::string kTwoIdentifiers = "def f(path):\n    data = read(path)\n    return data\n";
const std::string kThreeIdentifiers = "def f(a, b):\n    c = a + b\n    return c\n";

CodeSample make_sample(const std::string& code, const std::string& target = "read data", const std::string& id = "s") {
    CodeSample s;
    s.id = id;
    s.raw_source = code;
    s.raw_target = target;
    return s;
}

// Vocabulary over the fixtures plus a handful of spare identifier names.
Vocabulary fixture_vocab() {
    std::vector<CodeSample> all{make_sample(kTwoIdentifiers), make_sample(kThreeIdentifiers), make_sample("x = 0\n", "load data")};
    for (const char* w : {"buf", "item", "node", "value", "key", "row", "col", "tmp"}) all.push_back(make_sample(std::string(w) + " = 0\n"));
    return build_vocab(all);
}

CodeSample encoded(const std::string& code, const Vocabulary& vocab, const std::string& id = "s") {
    auto s = make_sample(code, "read data", id);
    encode(s, vocab);
    return s;
}

ModelConfig tiny_config(std::uint64_t seed) {
    ModelConfig c;
    c.d_model = 8;
    c.n_heads = 2;
    c.ffn_dim = 16;
    c.max_src_len = 32;
    c.max_tgt_len = 6;
    c.dropout = 0.0;
    c.init_seed = seed;
    return c;
}

std::vector<std::int32_t> target_ids(const Vocabulary& vocab, const std::string& text = "load data") {
    return tokenize_target(text, vocab);
}

double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

// Sets every trainable row of identifier j to a near one-hot on `column`.
void peak_identifier(ProxyMatrix& p, std::size_t j, std::size_t column, double height = 50.0) {
    const std::size_t C = p.columns.size();
    auto v = p.logits.mutable_values();
    for (std::size_t r = 0; r < p.rows.size(); ++r) {
        if (p.row_identifier[r] != j) continue;
        for (std::size_t c = 0; c < C; ++c) v[r * C + c] = c == column ? height : 0.0;
    }
}

std::size_t column_of(const ProxyMatrix& p, const Vocabulary& vocab, const std::string& word) {
    const auto id = vocab.index_of(word);
    for (std::size_t c = 0; c < p.columns.size(); ++c)
        if (p.columns[c] == id) return c;
    ADD_FAILURE() << word << " is not a candidate column";
    return 0;
}

// Surrogate trained so that the parameter name n<i> yields the target "load data" with a known
// probability p_i; the attack loss of renaming to n<i> is then about -log p_i.
struct EnumerationFixture {
    Vocabulary vocab;
    Seq2Seq surrogate;
    std::vector<std::string> names;

    static std::string program(const std::string& name) { return "def f(" + name + "):\n    return " + name + ".strip()\n"; }

    EnumerationFixture() {
        std::vector<CodeSample> data;
        const std::vector<int> hits{2, 5, 9, 14, 18, 3, 7, 11, 16, 1, 4, 8, 12, 15, 6, 10, 13, 17, 19, 0};
        for (int i = 0; i < 20; ++i) {
            names.push_back("n" + std::to_string(i));
            for (int k = 0; k < 20; ++k) data.push_back(make_sample(program(names.back()), k < hits[i] ? "load data" : "other thing"));
        }
        vocab = build_vocab(data).with_candidates(names);
        encode(data, vocab);
        auto c = tiny_config(3);
        c.d_model = 16;
        c.ffn_dim = 32;
        surrogate = Seq2Seq(c, vocab.size());
        const auto ex = to_examples(data);
        auto params = surrogate.parameters();
        std::vector<Adam> opt(params.size());
        for (int step = 0; step < 300; ++step) {
            for (auto* p : params) p->zero_grad();
            surrogate.loss(ex).backward();
            for (std::size_t k = 0; k < params.size(); ++k) opt[k].step(params[k]->mutable_values(), params[k]->grad(), 1e-2);
        }
        surrogate.set_trainable(false);
    }
};

const EnumerationFixture& enumeration_fixture() {
    static const EnumerationFixture f;
    return f;
}

} // namespace

TEST(InitProxy, OneTrainableRowPerIdentifierOccurrence) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    const auto idmap = extract_identifiers(s);
    const auto p = init_proxy(s, idmap, vocab);
    EXPECT_EQ(p.rows, (std::vector<std::size_t>{3, 8, 12, 16}));
    EXPECT_EQ(p.row_identifier, (std::vector<std::size_t>{0, 1, 0, 1}));
    EXPECT_EQ(p.logits.rows(), 4u);
}

TEST(InitProxy, NoIdentifiersIsSignalled) {
    const auto vocab = fixture_vocab();
    const auto s = encoded("def g():\n    return 1\n", vocab);
    EXPECT_THROW(init_proxy(s, extract_identifiers(s), vocab), NoIdentifiers);
}

TEST(InitProxy, RowsAreDistributionsOverAllowedColumns) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    const auto p = init_proxy(s, extract_identifiers(s), vocab);
    const auto full = p.full_distribution();
    const std::set<std::int32_t> cols(p.columns.begin(), p.columns.end());
    const auto path = vocab.index_of("path"), data = vocab.index_of("data");
    for (std::size_t l = 0; l < p.length; ++l) {
        double total = 0.0;
        for (std::size_t v = 0; v < p.vocab_size; ++v) total += full[l * p.vocab_size + v];
        EXPECT_NEAR(total, 1.0, 1e-12);
        const auto it = std::find(p.rows.begin(), p.rows.end(), l);
        if (it == p.rows.end()) {
            EXPECT_EQ(full[l * p.vocab_size + std::size_t(s.source_tokens[l])], 1.0);
            continue;
        }
        const auto other = p.row_identifier[std::size_t(it - p.rows.begin())] == 0 ? data : path;
        EXPECT_EQ(full[l * p.vocab_size + std::size_t(other)], 0.0);
        for (std::size_t v = 0; v < p.vocab_size; ++v) {
            if (!cols.count(std::int32_t(v))) {
                EXPECT_EQ(full[l * p.vocab_size + v], 0.0);
            }
        }
    }
    // Uniform over the allowed columns with the bonus on the original token.
    const auto dist = p.row_distributions();
    const std::size_t allowed = p.columns.size() - 1;
    const double expected_own = std::exp(0.5) / (std::exp(0.5) + double(allowed - 1));
    EXPECT_NEAR(dist.at(0, column_of(p, vocab, "path")), expected_own, 1e-12);
}

TEST(GumbelSoftmax, HandValues) {
    const std::vector<double> zero{0.0, 0.0};
    auto a = gumbel_softmax(std::vector<double>{0.0, 0.0}, 1.0, zero);
    EXPECT_DOUBLE_EQ(a[0], 0.5);
    auto b = gumbel_softmax(std::vector<double>{1.0, 0.0}, 1.0, zero);
    EXPECT_NEAR(b[0], 0.7311, 1e-4);
    EXPECT_NEAR(b[1], 0.2689, 1e-4);
    auto c = gumbel_softmax(std::vector<double>{1.0, 0.0}, 0.5, zero);
    EXPECT_NEAR(c[0], 0.8808, 1e-4);
    EXPECT_NEAR(c[1], 0.1192, 1e-4);
    EXPECT_THROW(gumbel_softmax(std::vector<double>{1.0, 0.0}, 0.0, zero), ConfigError);
}

TEST(GumbelSoftmax, ShiftInvariant) {
    Rng rng(3);
    std::vector<double> logits(7), noise(7), shifted(7);
    for (std::size_t i = 0; i < 7; ++i) {
        logits[i] = standard_normal(rng);
        noise[i] = gumbel_noise(rng);
        shifted[i] = logits[i] + 4.25;
    }
    const auto a = gumbel_softmax(logits, 0.7, noise), b = gumbel_softmax(shifted, 0.7, noise);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(GumbelSoftmax, TensorFormMatchesRowForm) {
    Rng rng(4);
    std::vector<double> logits(2 * 5), noise(2 * 5);
    for (auto& x : logits) x = standard_normal(rng);
    for (auto& x : noise) x = gumbel_noise(rng);
    const auto t = gumbel_softmax(ad::Tensor::from({2, 5}, logits), noise, 0.8);
    for (std::size_t r = 0; r < 2; ++r) {
        const auto row = gumbel_softmax(std::span<const double>(logits).subspan(r * 5, 5), 0.8, std::span<const double>(noise).subspan(r * 5, 5));
        for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(t.at(r, c), row[c], 1e-15);
    }
}

TEST(Mmd, LinearKernelCases) {
    const std::vector<double> p{1.0, 0.0}, q{0.0, 1.0};
    EXPECT_EQ(mmd(p, p), 0.0);
    EXPECT_DOUBLE_EQ(mmd(p, q), 2.0);
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a(6), b(6);
        double sa = 0.0, sb = 0.0;
        for (std::size_t i = 0; i < 6; ++i) {
            sa += a[i] = uniform_open(rng);
            sb += b[i] = uniform_open(rng);
        }
        for (std::size_t i = 0; i < 6; ++i) a[i] /= sa, b[i] /= sb;
        EXPECT_EQ(mmd(a, b), mmd(b, a));
        EXPECT_GT(mmd(a, b), 0.0);
    }
    EXPECT_THROW(mmd(p, std::vector<double>{1.0, 0.0, 0.0}), ShapeError);
    EXPECT_THROW(mmd(p, std::vector<double>{0.5, 0.2}), ShapeError);
}

TEST(TriggerLoss, ConsistencyVanishesWhenRowsAgree) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab);
    EXPECT_NEAR(consistency_loss(p, p.row_distributions()).item(), 0.0, 1e-9);
    auto v = p.logits.mutable_values();
    v[column_of(p, vocab, "path")] += 1.0;  // first row of "path" only
    EXPECT_GT(consistency_loss(p, p.row_distributions()).item(), 1e-4);
}

TEST(TriggerLoss, ConsistencyMatchesPairwiseMmd) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab);
    Rng rng(6);
    for (auto& x : p.logits.mutable_values()) x = standard_normal(rng);
    const auto dist = p.row_distributions();
    const std::size_t C = p.columns.size();
    auto row = [&](std::size_t r) { return std::vector<double>(dist.values().begin() + std::ptrdiff_t(r * C), dist.values().begin() + std::ptrdiff_t((r + 1) * C)); };
    // Rows 0, 2 belong to "path" and rows 1, 3 to "data".
    EXPECT_NEAR(consistency_loss(p, dist).item(), mmd(row(0), row(2)) + mmd(row(1), row(3)), 1e-12);
}

TEST(TriggerLoss, DiversityFromEqualToDisjoint) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kThreeIdentifiers, vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab, 0.0);
    ASSERT_EQ(p.identifiers(), 3u);
    // With no bonus every identifier is uniform over all columns except the two other names;
    // give them identical rows over a shared column set by peaking all on one spare name.
    const auto shared = column_of(p, vocab, "buf");
    for (std::size_t j = 0; j < 3; ++j) peak_identifier(p, j, shared);
    EXPECT_NEAR(diversity_loss(p, p.row_distributions()).item(), 0.0, 1e-9);
    peak_identifier(p, 0, column_of(p, vocab, "item"));
    peak_identifier(p, 1, column_of(p, vocab, "node"));
    peak_identifier(p, 2, column_of(p, vocab, "value"));
    EXPECT_NEAR(diversity_loss(p, p.row_distributions()).item(), -6.0, 1e-9);
}

TEST(TriggerLoss, ZeroLambdaLeavesAttackLossOnly) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab);
    Rng rng(7);
    for (auto& x : p.logits.mutable_values()) x = standard_normal(rng);
    Seq2Seq m(tiny_config(1), vocab.size());
    m.set_trainable(false);
    const auto target = make_target(target_ids(vocab));
    const auto noise = draw_gumbel(p, rng);
    const auto l0 = trigger_loss(m, p, target, 0.0, 1.0, noise);
    EXPECT_EQ(l0.total.item(), l0.attack.item());
    const auto l1 = trigger_loss(m, p, target, 0.1, 1.0, noise);
    EXPECT_NEAR(l1.total.item(), l1.attack.item() + 0.1 * (l1.consistency.item() + l1.diversity.item()), 1e-12);
}

TEST(TriggerLoss, GradientMatchesFiniteDifferences) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab);
    Rng rng(8);
    for (auto& x : p.logits.mutable_values()) x = standard_normal(rng);
    Seq2Seq m(tiny_config(2), vocab.size());
    m.set_trainable(false);
    const auto target = make_target(target_ids(vocab));
    const auto noise = draw_gumbel(p, rng);
    p.logits.zero_grad();
    trigger_loss(m, p, target, 0.5, 0.7, noise).total.backward();
    const std::vector<double> grad(p.logits.grad().begin(), p.logits.grad().end());
    const double h = 1e-6;
    std::size_t checked = 0;
    for (std::size_t i = 0; i < grad.size(); ++i) {
        if (p.mask[i] != 0.0) {
            EXPECT_EQ(grad[i], 0.0);
            continue;
        }
        auto v = p.logits.mutable_values();
        const double orig = v[i];
        v[i] = orig + h;
        const double up = trigger_loss(m, p, target, 0.5, 0.7, noise).total.item();
        v[i] = orig - h;
        const double down = trigger_loss(m, p, target, 0.5, 0.7, noise).total.item();
        v[i] = orig;
        const double numeric = (up - down) / (2 * h);
        if (std::abs(numeric) < 1e-7 && std::abs(grad[i]) < 1e-7) continue;
        EXPECT_LE(relative_error(numeric, grad[i]), 1e-3) << "entry " << i;
        ++checked;
    }
    EXPECT_GT(checked, grad.size() / 2);
}

TEST(Optimize, TraceAndMaskConservation) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    auto m = frozen_copy(Seq2Seq(tiny_config(3), vocab.size()));
    TriggerConfig cfg;
    cfg.iterations = 25;
    cfg.seed = 4;
    const auto r = optimize(m, s, vocab, target_ids(vocab), cfg);
    ASSERT_EQ(r.trace.size(), 25u);
    for (const auto& t : r.trace) {
        EXPECT_TRUE(std::isfinite(t.attack) && std::isfinite(t.consistency) && std::isfinite(t.diversity) && std::isfinite(t.total));
    }
    const auto& p = r.proxy;
    const auto full = p.full_distribution();
    const std::set<std::int32_t> cols(p.columns.begin(), p.columns.end());
    for (std::size_t l = 0; l < p.length; ++l) {
        const bool trainable = std::find(p.rows.begin(), p.rows.end(), l) != p.rows.end();
        for (std::size_t v = 0; v < p.vocab_size; ++v) {
            const double x = full[l * p.vocab_size + v];
            if (!trainable) {
                EXPECT_EQ(x, v == std::size_t(s.source_tokens[l]) ? 1.0 : 0.0);
            } else if (!cols.count(std::int32_t(v))) {
                EXPECT_EQ(x, 0.0);
            }
        }
    }
    const auto dist = p.row_distributions();
    for (std::size_t i = 0; i < p.mask.size(); ++i) {
        if (p.mask[i] != 0.0) {
            EXPECT_EQ(dist.values()[i], 0.0);
        }
    }
    const auto renamed = apply_renaming(s, extract_identifiers(s), r.renames, vocab, Label::stab);
    EXPECT_EQ(renamed.source_tokens.size(), s.source_tokens.size());
    EXPECT_EQ(trace_csv(r.trace).substr(0, 22), "iter,L_a,L_c,L_d,total");
}

TEST(Optimize, ZeroIterationsKeepsInitialProxy) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    auto m = frozen_copy(Seq2Seq(tiny_config(3), vocab.size()));
    TriggerConfig cfg;
    cfg.iterations = 0;
    const auto r = optimize(m, s, vocab, target_ids(vocab), cfg);
    const auto init = init_proxy(s, extract_identifiers(s), vocab);
    EXPECT_TRUE(r.trace.empty());
    EXPECT_TRUE(std::equal(init.logits.values().begin(), init.logits.values().end(), r.proxy.logits.values().begin()));
    EXPECT_EQ(r.renames.size(), 2u);
    EXPECT_NO_THROW(apply_renaming(s, extract_identifiers(s), r.renames, vocab, Label::stab));
}

TEST(Optimize, RequiresFrozenSurrogate) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    Seq2Seq m(tiny_config(3), vocab.size());
    EXPECT_THROW(optimize(m, s, vocab, target_ids(vocab), TriggerConfig{}), ConfigError);
}

TEST(Optimize, DeterministicPerSeedAndSample) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    auto m = frozen_copy(Seq2Seq(tiny_config(3), vocab.size()));
    TriggerConfig cfg;
    cfg.iterations = 10;
    cfg.seed = 9;
    const auto a = optimize(m, s, vocab, target_ids(vocab), cfg);
    const auto b = optimize(m, s, vocab, target_ids(vocab), cfg);
    EXPECT_EQ(a.renames, b.renames);
    EXPECT_EQ(trace_csv(a.trace), trace_csv(b.trace));
}

TEST(Optimize, FindsNearBestRenamingByEnumeration) {
    const auto& f = enumeration_fixture();
    auto sample = make_sample(EnumerationFixture::program("n0"), "load data", "probe");
    encode(sample, f.vocab);
    const auto idmap = extract_identifiers(sample);
    ASSERT_EQ(idmap.size(), 1u);
    const auto target = make_target(target_ids(f.vocab));
    double best = std::numeric_limits<double>::infinity();
    std::map<std::string, double> losses;
    for (const auto& n : f.names) {
        const auto renamed = apply_renaming(sample, idmap, {{"n0", n}}, f.vocab, Label::stab);
        best = std::min(best, losses[n] = attack_loss(f.surrogate, renamed.source_tokens, target));
    }
    ASSERT_EQ(init_proxy(sample, idmap, f.vocab).columns.size(), 20u);
    int good = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        TriggerConfig cfg;
        cfg.seed = seed;
        const auto r = optimize(f.surrogate, sample, f.vocab, target_ids(f.vocab), cfg);
        const double got = losses.at(r.renames.at("n0"));
        EXPECT_NEAR(got, r.attack_loss_after, 1e-12);
        good += got <= 1.05 * best;
    }
    EXPECT_GE(good, 8) << "best enumerated attack loss " << best;
}

TEST(SampleTriggers, ConcentratedMeanIsArgmax) {
    const auto vocab = fixture_vocab();
    const auto s = encoded("def h(x):\n    return x.shape\n", vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab, 0.0);
    const auto col = column_of(p, vocab, "node");
    peak_identifier(p, 0, col, 10.0);
    ASSERT_GE(mean_distributions(p)[0][col], 0.99);
    int hits = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        Rng rng(seed);
        hits += sample_triggers(p, vocab, TriggerConfig{}, rng).at("x") == "node";
    }
    EXPECT_GE(hits, 99);
}

TEST(SampleTriggers, FollowsTheCategoricalAtModerateConcentration) {
    // Gumbel-max sampling picks column c with probability mean[c], whatever tau_sample is.
    const auto vocab = fixture_vocab();
    const auto s = encoded("def h(x):\n    return x.shape\n", vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab, 0.0);
    const auto col = column_of(p, vocab, "node");
    peak_identifier(p, 0, col, 3.0);
    const double prob = mean_distributions(p)[0][col];
    const int n = 2000;
    int hits = 0;
    for (int seed = 0; seed < n; ++seed) {
        Rng rng(std::uint64_t(seed) + 1000);
        hits += sample_triggers(p, vocab, TriggerConfig{}, rng).at("x") == "node";
    }
    EXPECT_NEAR(double(hits) / n, prob, 4.0 * std::sqrt(prob * (1 - prob) / n));
}

TEST(SampleTriggers, CollisionsStillGiveDistinctNames) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kTwoIdentifiers, vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab, 0.0);
    const auto col = column_of(p, vocab, "buf");
    peak_identifier(p, 0, col);
    peak_identifier(p, 1, col);
    Rng rng(1);
    const auto r = sample_triggers(p, vocab, TriggerConfig{}, rng);
    EXPECT_EQ(r.at("path"), "buf");
    EXPECT_NE(r.at("data"), "buf");
    EXPECT_NO_THROW(apply_renaming(s, extract_identifiers(s), r, vocab, Label::stab));
}

TEST(SampleTriggers, ShiftedLogitsSampleTheSameNames) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kThreeIdentifiers, vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab);
    Rng init(11);
    for (auto& x : p.logits.mutable_values()) x = standard_normal(init);
    auto q = p;
    q.logits = ad::Tensor::from(p.logits.shape(), std::vector<double>(p.logits.values().begin(), p.logits.values().end()), true);
    const std::size_t C = q.columns.size();
    auto v = q.logits.mutable_values();
    for (std::size_t r = 0; r < q.rows.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) v[r * C + c] += double(r) * 1.5 - 2.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Rng a(seed), b(seed);
        const auto ra = sample_triggers(p, vocab, TriggerConfig{}, a);
        const auto rb = sample_triggers(q, vocab, TriggerConfig{}, b);
        EXPECT_EQ(ra, rb);
    }
}

TEST(SampleTriggers, TooFewCandidatesIsInfeasible) {
    const auto full = fixture_vocab();
    const auto vocab = full.with_candidates({"buf", "item"});
    const auto s = encoded(kThreeIdentifiers, vocab);
    auto p = init_proxy(s, extract_identifiers(s), vocab);
    ASSERT_EQ(p.columns.size(), 2u);
    Rng rng(2);
    EXPECT_THROW(sample_triggers(p, vocab, TriggerConfig{}, rng), InfeasibleError);
    auto m = frozen_copy(Seq2Seq(tiny_config(1), vocab.size()));
    EXPECT_THROW(greedy_trigger_baseline(m, s, vocab, target_ids(vocab)), InfeasibleError);
}

TEST(GreedyBaseline, PicksBestLinearizedCandidate) {
    // Independent route: the linearized score of candidate c is the directional derivative of the
    // attack loss when the one-hot mass at the identifier's positions moves from its name to c.
    const auto full = fixture_vocab();
    const auto vocab = full.with_candidates({"buf", "item", "node", "value", "key", "x"});
    const auto s = encoded("def h(x):\n    return x.shape\n", vocab);
    const auto idmap = extract_identifiers(s);
    Seq2Seq m(tiny_config(5), vocab.size());
    m.set_trainable(false);
    const auto target = make_target(target_ids(vocab));
    const std::size_t V = vocab.size(), L = s.source_tokens.size();
    auto loss_at = [&](const std::string& word, double t) {
        std::vector<double> w(L * V, 0.0);
        for (std::size_t l = 0; l < L; ++l) w[l * V + std::size_t(s.source_tokens[l])] = 1.0;
        for (auto l : idmap.entries[0].positions) {
            w[l * V + std::size_t(vocab.index_of("x"))] -= t;
            w[l * V + std::size_t(vocab.index_of(word))] += t;
        }
        return ad::cross_entropy(m.forward_soft(ad::Tensor::from({L, V}, w), target.input), target.output).item();
    };
    std::string best;
    double best_score = std::numeric_limits<double>::infinity();
    for (const char* c : {"buf", "item", "node", "value", "key"}) {
        const double h = 1e-6;
        const double score = (loss_at(c, h) - loss_at(c, -h)) / (2 * h);
        if (score < best_score) best_score = score, best = c;
    }
    // The identifier's own name scores exactly 0.
    if (best_score > 0.0) best = "x";
    const auto picked = greedy_trigger_baseline(m, s, vocab, target_ids(vocab));
    EXPECT_EQ(picked.at("x"), best);
    EXPECT_EQ(greedy_trigger_baseline(m, s, vocab, target_ids(vocab)), picked);
}

TEST(GreedyBaseline, AssignsDistinctNames) {
    const auto vocab = fixture_vocab();
    const auto s = encoded(kThreeIdentifiers, vocab);
    auto m = frozen_copy(Seq2Seq(tiny_config(6), vocab.size()));
    const auto r = greedy_trigger_baseline(m, s, vocab, target_ids(vocab));
    ASSERT_EQ(r.size(), 3u);
    EXPECT_NO_THROW(apply_renaming(s, extract_identifiers(s), r, vocab, Label::greedy));
}
