#pragma once

// Per-sample trigger search over identifier renamings.
//
// The proxy distribution assigns a categorical over candidate tokens to every token position
// that holds a modifiable identifier. Positions outside the identifiers stay one-hot on their
// original token. Only the trainable block [positions x candidate columns] is stored; the full
// [L x |V|] matrix is materialized on demand.

#include "stabforge/autodiff.hpp"
#include "stabforge/code_analysis.hpp"
#include "stabforge/corpus.hpp"
#include "stabforge/error.hpp"
#include "stabforge/rng.hpp"
#include "stabforge/seq2seq.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace stabforge {

/// Logit added to disallowed entries; exp() of it underflows to exactly zero.
inline constexpr double kMaskedLogit = -1e30;

enum class MmdKernel { linear };

struct TriggerConfig {
    double tau = 1.0;
    double lambda = 0.1;
    std::size_t iterations = 100;
    double step_size = 0.2;  // Adam step on the proxy logits
    double tau_sample = 0.05;
    std::size_t max_resamples = 16;
    MmdKernel kernel = MmdKernel::linear;
    double init_bonus = 0.5;
    bool uniform_init = false;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(tau > 0.0)) throw ConfigError("trigger: tau must be positive");
        if (!(tau_sample > 0.0)) throw ConfigError("trigger: tau_sample must be positive");
        if (lambda < 0.0) throw ConfigError("trigger: lambda must be non-negative");
        if (!(step_size > 0.0)) throw ConfigError("trigger: step size must be positive");
    }
};

/// Trainable block of the proxy matrix plus the data needed to expand it to [L x |V|].
struct ProxyMatrix {
    std::size_t length = 0;      // L
    std::size_t vocab_size = 0;  // |V|
    std::vector<std::int32_t> original;       // token ids of the sample, length L
    std::vector<std::size_t> rows;            // trainable positions, ascending
    std::vector<std::size_t> row_identifier;  // identifier index of each trainable row
    std::vector<std::int32_t> columns;        // candidate token ids, ascending
    ad::Tensor logits;                        // [rows x columns]
    std::vector<double> mask;                 // [rows x columns], 0 or kMaskedLogit
    IdentifierMap idmap;

    std::size_t identifiers() const { return idmap.size(); }

    /// softmax(logits + mask) for the trainable rows.
    ad::Tensor row_distributions() const { return ad::softmax(ad::add_constant(logits, mask)); }

    /// The proxy distribution over the whole sample: one-hot rows for frozen positions.
    std::vector<double> full_distribution() const {
        std::vector<double> out(length * vocab_size, 0.0);
        for (std::size_t i = 0; i < length; ++i) out[i * vocab_size + std::size_t(original[i])] = 1.0;
        ad::NoGradGuard guard;
        const auto p = row_distributions();
        for (std::size_t r = 0; r < rows.size(); ++r) {
            std::fill_n(out.data() + rows[r] * vocab_size, vocab_size, 0.0);
            for (std::size_t c = 0; c < columns.size(); ++c) out[rows[r] * vocab_size + std::size_t(columns[c])] = p.at(r, c);
        }
        return out;
    }

    /// Constant [L x |V|] matrix with one-hot rows at the original tokens.
    std::vector<double> one_hot_base() const {
        std::vector<double> out(length * vocab_size, 0.0);
        for (std::size_t i = 0; i < length; ++i) out[i * vocab_size + std::size_t(original[i])] = 1.0;
        return out;
    }
};

/// Builds the proxy for `sample`. Candidate columns are the vocabulary's identifier candidates
/// that do not already occur in the sample, plus the sample's own identifiers; an identifier's
/// rows may not select another identifier's original name. Trainable rows start uniform over
/// their allowed columns with `bonus` added on the original token.
inline ProxyMatrix init_proxy(const CodeSample& sample, const IdentifierMap& idmap, const Vocabulary& vocab, double bonus = 0.5) {
    if (idmap.empty()) throw NoIdentifiers("sample " + sample.id + " has no modifiable identifiers");
    if (sample.source_tokens.size() != idmap.length)
        throw ConfigError("init_proxy: sample " + sample.id + " is not encoded consistently with its identifier map");
    ProxyMatrix p;
    p.length = idmap.length;
    p.vocab_size = vocab.size();
    p.original = sample.source_tokens;
    p.idmap = idmap;

    std::set<std::int32_t> present(sample.source_tokens.begin(), sample.source_tokens.end());
    std::vector<std::int32_t> own;
    for (const auto& e : idmap.entries) own.push_back(vocab.index_of(e.name));
    for (auto c : vocab.identifier_candidates())
        if (!present.count(c) || std::find(own.begin(), own.end(), c) != own.end()) p.columns.push_back(c);

    std::vector<std::pair<std::size_t, std::size_t>> pos;
    for (std::size_t j = 0; j < idmap.size(); ++j)
        for (auto l : idmap.entries[j].positions) pos.emplace_back(l, j);
    std::sort(pos.begin(), pos.end());
    for (auto [l, j] : pos) {
        p.rows.push_back(l);
        p.row_identifier.push_back(j);
    }
    const std::size_t R = p.rows.size(), C = p.columns.size();
    std::vector<double> init(R * C, 0.0);
    p.mask.assign(R * C, 0.0);
    for (std::size_t r = 0; r < R; ++r) {
        const std::size_t j = p.row_identifier[r];
        for (std::size_t c = 0; c < C; ++c) {
            const auto tok = p.columns[c];
            const bool other_identifier = std::find(own.begin(), own.end(), tok) != own.end() && tok != own[j];
            if (other_identifier) p.mask[r * C + c] = kMaskedLogit;
            if (tok == own[j]) init[r * C + c] = bonus;
        }
    }
    p.logits = ad::Tensor::from({R, C}, std::move(init), true);
    return p;
}

/// softmax((logits + g) / tau) over one row.
inline std::vector<double> gumbel_softmax(std::span<const double> logits, double tau, std::span<const double> noise) {
    if (!(tau > 0.0)) throw ConfigError("gumbel_softmax: tau must be positive");
    if (noise.size() != logits.size()) throw ShapeError("gumbel_softmax: noise length does not match logits");
    std::vector<double> z(logits.size());
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < z.size(); ++i) mx = std::max(mx, z[i] = (logits[i] + noise[i]) / tau);
    double total = 0.0;
    for (auto& v : z) total += v = std::exp(v - mx);
    for (auto& v : z) v /= total;
    return z;
}

/// Differentiable Gumbel-softmax over every row of `logits` [R x C]; `noise` has the same shape.
inline ad::Tensor gumbel_softmax(const ad::Tensor& logits, std::span<const double> noise, double tau) {
    if (!(tau > 0.0)) throw ConfigError("gumbel_softmax: tau must be positive");
    return ad::softmax(ad::scale(ad::add_constant(logits, noise), 1.0 / tau));
}

/// Squared MMD between two distributions under the kernel; for the linear kernel this is ||p - q||^2.
inline double mmd(std::span<const double> p, std::span<const double> q, MmdKernel kernel = MmdKernel::linear) {
    if (p.size() != q.size())
        throw ShapeError("mmd: support mismatch " + std::to_string(p.size()) + " vs " + std::to_string(q.size()));
    double sp = 0.0, sq = 0.0, d = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        sp += p[i];
        sq += q[i];
        d += (p[i] - q[i]) * (p[i] - q[i]);
    }
    if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6) throw ShapeError("mmd: inputs must be distributions");
    switch (kernel) {
    case MmdKernel::linear: return d;
    }
    return d;
}

struct TriggerLoss {
    ad::Tensor attack;       // L_a
    ad::Tensor consistency;  // L_c
    ad::Tensor diversity;    // L_d
    ad::Tensor total;
};

/// Target-side token ids: teacher-forcing input [bos, y*] and expected output [y*, eos].
struct TargetSequence {
    std::vector<std::int32_t> input;
    std::vector<std::int32_t> output;
};

inline TargetSequence make_target(std::span<const std::int32_t> y) {
    TargetSequence t;
    t.input.push_back(Vocabulary::kBos);
    t.input.insert(t.input.end(), y.begin(), y.end());
    t.output.assign(y.begin(), y.end());
    t.output.push_back(Vocabulary::kEos);
    return t;
}

namespace detail {

/// Constant [pairs x n] matrix whose rows are e_a - e_b for each listed pair.
inline ad::Tensor pair_difference(std::size_t n, const std::vector<std::pair<std::size_t, std::size_t>>& pairs) {
    std::vector<double> m(pairs.size() * n, 0.0);
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        m[k * n + pairs[k].first] = 1.0;
        m[k * n + pairs[k].second] = -1.0;
    }
    return ad::Tensor::from({pairs.size(), n}, std::move(m));
}

} // namespace detail

/// Consistency term: sum over identifiers of ||p_l - p_l'||^2 over unordered position pairs.
inline ad::Tensor consistency_loss(const ProxyMatrix& proxy, const ad::Tensor& dist) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t a = 0; a < proxy.rows.size(); ++a)
        for (std::size_t b = a + 1; b < proxy.rows.size(); ++b)
            if (proxy.row_identifier[a] == proxy.row_identifier[b]) pairs.emplace_back(a, b);
    if (pairs.empty()) return ad::Tensor::scalar(0.0);
    return ad::sum(ad::square(ad::matmul(detail::pair_difference(proxy.rows.size(), pairs), dist)));
}

/// Mean distribution of each identifier's rows: [k x C].
inline ad::Tensor identifier_means(const ProxyMatrix& proxy, const ad::Tensor& dist) {
    const std::size_t k = proxy.identifiers(), R = proxy.rows.size();
    std::vector<double> avg(k * R, 0.0);
    for (std::size_t r = 0; r < R; ++r)
        avg[proxy.row_identifier[r] * R + r] = 1.0 / double(proxy.idmap.entries[proxy.row_identifier[r]].positions.size());
    return ad::matmul(ad::Tensor::from({k, R}, std::move(avg)), dist);
}

/// Diversity term: minus the sum over identifier pairs of ||mean_i - mean_j||^2.
inline ad::Tensor diversity_loss(const ProxyMatrix& proxy, const ad::Tensor& dist) {
    const std::size_t k = proxy.identifiers();
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i + 1; j < k; ++j) pairs.emplace_back(i, j);
    if (pairs.empty()) return ad::Tensor::scalar(0.0);
    auto means = identifier_means(proxy, dist);
    return ad::scale(ad::sum(ad::square(ad::matmul(detail::pair_difference(k, pairs), means))), -1.0);
}

/// All loss terms for one draw of Gumbel noise `noise` ([rows x columns]).
inline TriggerLoss trigger_loss(const Seq2Seq& surrogate, const ProxyMatrix& proxy, const TargetSequence& target, double lambda,
                                double tau, std::span<const double> noise) {
    const auto z = gumbel_softmax(ad::add_constant(proxy.logits, proxy.mask), noise, tau);
    const auto base = proxy.one_hot_base();
    const auto soft = ad::scatter_block({proxy.length, proxy.vocab_size}, base, proxy.rows,
                                        std::vector<std::size_t>(proxy.columns.begin(), proxy.columns.end()), z);
    TriggerLoss out;
    out.attack = ad::cross_entropy(surrogate.forward_soft(soft, target.input), target.output);
    const auto dist = proxy.row_distributions();
    out.consistency = consistency_loss(proxy, dist);
    out.diversity = diversity_loss(proxy, dist);
    out.total = ad::add(out.attack, ad::scale(ad::add(out.consistency, out.diversity), lambda));
    return out;
}

/// Draws standard Gumbel noise for every trainable entry.
inline std::vector<double> draw_gumbel(const ProxyMatrix& proxy, Rng& rng) {
    std::vector<double> g(proxy.logits.size());
    for (auto& x : g) x = gumbel_noise(rng);
    return g;
}

/// Cross-entropy of the surrogate on hard source tokens against the target.
inline double attack_loss(const Seq2Seq& surrogate, std::span<const std::int32_t> src, const TargetSequence& target) {
    ad::NoGradGuard guard;
    return ad::cross_entropy(surrogate.forward_tokens(src, target.input), target.output).item();
}

struct TraceRow {
    double attack = 0.0;
    double consistency = 0.0;
    double diversity = 0.0;
    double total = 0.0;
};

inline std::string trace_csv(const std::vector<TraceRow>& trace) {
    std::ostringstream os;
    os.precision(17);
    os << "iter,L_a,L_c,L_d,total\n";
    for (std::size_t i = 0; i < trace.size(); ++i)
        os << i << ',' << trace[i].attack << ',' << trace[i].consistency << ',' << trace[i].diversity << ',' << trace[i].total << '\n';
    return os.str();
}

struct TriggerResult {
    ProxyMatrix proxy;
    RenameMap renames;
    std::vector<TraceRow> trace;
    double attack_loss_before = 0.0;
    double attack_loss_after = 0.0;
};

/// Adam state for one tensor.
struct Adam {
    std::vector<double> m, v;
    std::size_t t = 0;

    void step(std::span<double> values, std::span<const double> grads, double lr, double b1 = 0.9, double b2 = 0.999,
              double eps = 1e-8) {
        if (m.size() != values.size()) {
            m.assign(values.size(), 0.0);
            v.assign(values.size(), 0.0);
        }
        ++t;
        const double c1 = 1.0 - std::pow(b1, double(t)), c2 = 1.0 - std::pow(b2, double(t));
        for (std::size_t i = 0; i < values.size(); ++i) {
            m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
            values[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
        }
    }
};

/// Deep copy of a model with gradient recording disabled on every parameter.
inline Seq2Seq frozen_copy(const Seq2Seq& model) {
    Seq2Seq m = model.clone();
    m.set_trainable(false);
    return m;
}

/// Per-identifier mean of the softmaxed proxy rows, [k][C].
inline std::vector<std::vector<double>> mean_distributions(const ProxyMatrix& proxy) {
    ad::NoGradGuard guard;
    const auto means = identifier_means(proxy, proxy.row_distributions());
    std::vector<std::vector<double>> out(proxy.identifiers(), std::vector<double>(proxy.columns.size()));
    for (std::size_t j = 0; j < out.size(); ++j)
        for (std::size_t c = 0; c < proxy.columns.size(); ++c) out[j][c] = means.at(j, c);
    return out;
}

/// Assigns one replacement token per identifier, in first-occurrence order. Each draw is the
/// argmax of (log mean + Gumbel noise) / tau_sample; a draw that collides with an assigned token
/// is redrawn up to `max_resamples` times, after which the most probable unused token is taken.
inline RenameMap sample_triggers(const ProxyMatrix& proxy, const Vocabulary& vocab, const TriggerConfig& config, Rng& rng) {
    const std::size_t k = proxy.identifiers(), C = proxy.columns.size();
    const auto means = mean_distributions(proxy);
    std::set<std::size_t> used;
    RenameMap out;
    for (std::size_t j = 0; j < k; ++j) {
        // Allowed columns for this identifier are those unmasked in its rows.
        std::size_t row = 0;
        while (proxy.row_identifier[row] != j) ++row;
        std::vector<std::size_t> allowed;
        for (std::size_t c = 0; c < C; ++c)
            if (proxy.mask[row * C + c] == 0.0) allowed.push_back(c);
        std::size_t unused = 0;
        for (auto c : allowed) unused += !used.count(c);
        if (unused == 0)
            throw InfeasibleError("sample_triggers: " + std::to_string(k) + " identifiers but only " + std::to_string(allowed.size()) +
                                  " candidate tokens");
        auto draw = [&] {
            std::size_t best = allowed.front();
            double best_score = -std::numeric_limits<double>::infinity();
            for (auto c : allowed) {
                if (means[j][c] <= 0.0) continue;
                const double s = (std::log(means[j][c]) + gumbel_noise(rng)) / config.tau_sample;
                if (s > best_score) {
                    best_score = s;
                    best = c;
                }
            }
            return best;
        };
        std::size_t pick = draw();
        for (std::size_t attempt = 0; used.count(pick) && attempt < config.max_resamples; ++attempt) pick = draw();
        if (used.count(pick)) {
            double best_p = -1.0;
            for (auto c : allowed)
                if (!used.count(c) && means[j][c] > best_p) {
                    best_p = means[j][c];
                    pick = c;
                }
        }
        used.insert(pick);
        out[proxy.idmap.entries[j].name] = vocab.word(proxy.columns[pick]);
    }
    return out;
}

/// Runs `config.iterations` Adam steps on the proxy logits with fresh Gumbel noise each step,
/// then samples a renaming. The surrogate must be frozen (see `frozen_copy`). Random streams
/// are keyed by (config.seed, sample id).
inline TriggerResult optimize(const Seq2Seq& surrogate, const CodeSample& sample, const Vocabulary& vocab,
                              std::span<const std::int32_t> target_tokens, const TriggerConfig& config) {
    config.validate();
    for (const auto& p : surrogate.named_parameters())
        if (p.tensor.requires_grad()) throw ConfigError("optimize: surrogate parameters must be frozen");
    if (surrogate.vocab_size() != vocab.size()) throw ConfigError("optimize: surrogate vocabulary size differs");
    const auto idmap = extract_identifiers(sample);
    TriggerResult result;
    result.proxy = init_proxy(sample, idmap, vocab, config.uniform_init ? 0.0 : config.init_bonus);
    auto& proxy = result.proxy;
    const auto target = make_target(target_tokens);
    result.attack_loss_before = attack_loss(surrogate, sample.source_tokens, target);

    Rng noise_rng(derive_seed(config.seed, "gumbel:" + sample.id));
    Adam adam;
    for (std::size_t it = 0; it < config.iterations; ++it) {
        const auto noise = draw_gumbel(proxy, noise_rng);
        proxy.logits.zero_grad();
        auto loss = trigger_loss(surrogate, proxy, target, config.lambda, config.tau, noise);
        TraceRow row{loss.attack.item(), loss.consistency.item(), loss.diversity.item(), loss.total.item()};
        result.trace.push_back(row);
        if (!std::isfinite(row.total)) {
            throw DivergenceError("optimize: non-finite trigger loss at iteration " + std::to_string(it) + " for sample " + sample.id +
                                  "\n" + trace_csv(result.trace));
        }
        loss.total.backward();
        adam.step(proxy.logits.mutable_values(), proxy.logits.grad(), config.step_size);
    }
    Rng sample_rng(derive_seed(config.seed, "sample:" + sample.id));
    result.renames = sample_triggers(proxy, vocab, config, sample_rng);
    const auto renamed = apply_renaming(sample, idmap, result.renames, vocab, Label::stab);
    result.attack_loss_after = attack_loss(surrogate, renamed.source_tokens, target);
    return result;
}

/// Linearized greedy baseline: one gradient of the attack loss at the one-hot input scores every
/// candidate c for identifier j as sum over its positions of dL/dW[l, c] - dL/dW[l, v_j]; each
/// identifier (first-occurrence order) takes its lowest-scoring unused candidate.
inline RenameMap greedy_trigger_baseline(const Seq2Seq& surrogate, const CodeSample& sample, const Vocabulary& vocab,
                                         std::span<const std::int32_t> target_tokens) {
    const auto idmap = extract_identifiers(sample);
    auto proxy = init_proxy(sample, idmap, vocab, 0.0);
    const auto target = make_target(target_tokens);
    auto onehot = ad::Tensor::from({proxy.length, proxy.vocab_size}, proxy.one_hot_base(), true);
    ad::cross_entropy(surrogate.forward_soft(onehot, target.input), target.output).backward();
    const auto grad = onehot.grad();
    const std::size_t V = proxy.vocab_size, C = proxy.columns.size();

    std::set<std::size_t> used;
    RenameMap out;
    for (std::size_t j = 0; j < idmap.size(); ++j) {
        std::size_t row = 0;
        while (proxy.row_identifier[row] != j) ++row;
        const auto own = std::size_t(vocab.index_of(idmap.entries[j].name));
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t c = 0; c < C; ++c) {
            if (proxy.mask[row * C + c] != 0.0) continue;
            double s = 0.0;
            for (auto l : idmap.entries[j].positions) s += grad[l * V + std::size_t(proxy.columns[c])] - grad[l * V + own];
            scored.emplace_back(s, c);
        }
        std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        bool assigned = false;
        for (const auto& [s, c] : scored) {
            if (used.count(c)) continue;
            used.insert(c);
            out[idmap.entries[j].name] = vocab.word(proxy.columns[c]);
            assigned = true;
            break;
        }
        if (!assigned) throw InfeasibleError("greedy_trigger_baseline: no unused candidate left for " + idmap.entries[j].name);
    }
    return out;
}

} // namespace stabforge
