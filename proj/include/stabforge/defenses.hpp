#pragma once

// Poison detectors: spectral signatures over encoder representations, perplexity-delta token
// scanning (ONION-style) and corpus-level naturalness scanning (KillBadCode-style), both backed
// by one add-k n-gram language model.

#include "stabforge/corpus.hpp"
#include "stabforge/error.hpp"
#include "stabforge/rng.hpp"
#include "stabforge/seq2seq.hpp"

#include <Eigen/SVD>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace stabforge {

struct DefenseVerdict {
    std::string id;
    double score = 0.0;
    bool flagged = false;
    std::vector<double> token_scores;  // token-level defenses only
};

// ---------------------------------------------------------------------------
// n-gram language model
// ---------------------------------------------------------------------------

/// Add-k smoothed n-gram model over token ids. Contexts are left-padded with a start symbol;
/// there is no end symbol. Tokens never seen in training share one unknown type, which is part
/// of the prediction vocabulary.
class NGramLM {
public:
    NGramLM() = default;

    NGramLM(std::size_t n, double k) : n_(n), k_(k) {
        if (n_ < 1) throw ConfigError("ngram: order must be at least 1");
        if (!(k_ > 0.0)) throw ConfigError("ngram: smoothing constant must be positive");
    }

    std::size_t order() const noexcept { return n_; }
    double smoothing() const noexcept { return k_; }
    /// Prediction vocabulary size: training types plus the unknown type.
    std::size_t types() const noexcept { return seen_.size() + 1; }
    std::uint64_t corpus_hash() const noexcept { return hash_; }

    void add_sequence(std::span<const std::int32_t> seq) {
        std::vector<std::int32_t> ctx(n_ - 1, kStart);
        for (auto tok : seq) {
            seen_.insert(tok);
            hash_ = fnv1a(std::string_view(reinterpret_cast<const char*>(&tok), sizeof tok), hash_);
        }
        for (auto tok : seq) {
            ++context_counts_[key(ctx, std::nullopt)];
            ++ngram_counts_[key(ctx, tok)];
            shift(ctx, tok);
        }
    }

    /// P(tok | ctx) = (c(ctx, tok) + k) / (c(ctx) + k |V|), with unseen tokens mapped to unknown.
    double probability(std::span<const std::int32_t> ctx, std::int32_t tok) const {
        if (ctx.size() != n_ - 1) throw ShapeError("ngram: context length must be n - 1");
        const auto t = canonical(tok);
        std::vector<std::int32_t> c;
        for (auto x : ctx) c.push_back(x == kStart ? kStart : canonical(x));
        const double num = count(ngram_counts_, key(c, t)) + k_;
        const double den = count(context_counts_, key(c, std::nullopt)) + k_ * double(types());
        return num / den;
    }

    /// exp(mean negative log-probability); an empty sequence has perplexity 1.
    double perplexity(std::span<const std::int32_t> seq) const {
        if (seq.empty()) return 1.0;
        return std::exp(neg_log_likelihood(seq) / double(seq.size()));
    }

    double neg_log_likelihood(std::span<const std::int32_t> seq) const {
        std::vector<std::int32_t> ctx(n_ - 1, kStart);
        double nll = 0.0;
        for (auto tok : seq) {
            nll -= std::log(probability(ctx, tok));
            shift(ctx, tok);
        }
        return nll;
    }

    static constexpr std::int32_t kStart = -1;
    static constexpr std::int32_t kUnknown = -2;

private:
    std::int32_t canonical(std::int32_t tok) const { return seen_.count(tok) ? tok : kUnknown; }

    void shift(std::vector<std::int32_t>& ctx, std::int32_t tok) const {
        if (ctx.empty()) return;
        ctx.erase(ctx.begin());
        ctx.push_back(tok);
    }

    static std::string key(std::span<const std::int32_t> ctx, std::optional<std::int32_t> tok) {
        std::string k(reinterpret_cast<const char*>(ctx.data()), ctx.size() * sizeof(std::int32_t));
        if (tok) k.append(reinterpret_cast<const char*>(&*tok), sizeof(std::int32_t));
        return k;
    }

    static double count(const std::unordered_map<std::string, std::uint64_t>& table, const std::string& k) {
        auto it = table.find(k);
        return it == table.end() ? 0.0 : double(it->second);
    }

    std::size_t n_ = 3;
    double k_ = 0.01;
    std::set<std::int32_t> seen_;
    std::unordered_map<std::string, std::uint64_t> context_counts_;
    std::unordered_map<std::string, std::uint64_t> ngram_counts_;
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

inline NGramLM train_ngram(std::span<const std::vector<std::int32_t>> corpus, std::size_t n = 3, double k = 0.01) {
    if (corpus.empty()) throw ConfigError("train_ngram: empty corpus");
    NGramLM lm(n, k);
    for (const auto& s : corpus) lm.add_sequence(s);
    return lm;
}

inline NGramLM train_ngram(std::span<const CodeSample> corpus, std::size_t n = 3, double k = 0.01) {
    std::vector<std::vector<std::int32_t>> seqs;
    for (const auto& s : corpus) seqs.push_back(s.source_tokens);
    return train_ngram(seqs, n, k);
}

inline double perplexity(const NGramLM& lm, std::span<const std::int32_t> seq) { return lm.perplexity(seq); }

namespace detail {

inline std::vector<std::int32_t> without(std::span<const std::int32_t> seq, std::size_t i) {
    std::vector<std::int32_t> out(seq.begin(), seq.end());
    out.erase(out.begin() + std::ptrdiff_t(i));
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// ONION-style scan
// ---------------------------------------------------------------------------

/// Per-token suspicion = perplexity(full) - perplexity(without the token); the sample score is
/// the maximum suspicion and the sample is flagged when it reaches `threshold`.
inline DefenseVerdict onion_scan(const CodeSample& sample, const NGramLM& lm, double threshold) {
    DefenseVerdict v;
    v.id = sample.id;
    const auto& seq = sample.source_tokens;
    const double full = lm.perplexity(seq);
    v.score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const double s = full - lm.perplexity(detail::without(seq, i));
        v.token_scores.push_back(s);
        v.score = std::max(v.score, s);
    }
    if (seq.empty()) v.score = 0.0;
    v.flagged = v.score >= threshold;
    return v;
}

inline std::vector<DefenseVerdict> onion_scan(std::span<const CodeSample> data, const NGramLM& lm, double threshold) {
    std::vector<DefenseVerdict> out;
    out.reserve(data.size());
    for (const auto& s : data) out.push_back(onion_scan(s, lm, threshold));
    return out;
}

// ---------------------------------------------------------------------------
// KillBadCode-style naturalness scan
// ---------------------------------------------------------------------------

/// Per-token fluency gains log ppl(full) - log ppl(without token) for one sample.
inline std::vector<double> fluency_gains(std::span<const std::int32_t> seq, const NGramLM& lm) {
    std::vector<double> gains;
    if (seq.empty()) return gains;
    const double full = std::log(lm.perplexity(seq));
    for (std::size_t i = 0; i < seq.size(); ++i) gains.push_back(full - std::log(lm.perplexity(detail::without(seq, i))));
    return gains;
}

struct TypeGain {
    double mean = 0.0;
    std::size_t count = 0;
};

struct NaturalnessScan {
    std::map<std::int32_t, TypeGain> type_gains;  // pooled over the whole dataset
    std::vector<std::vector<double>> sample_gains;
};

/// Computes per-token gains for every sample and pools them by token type.
inline NaturalnessScan naturalness_gains(std::span<const CodeSample> data, const NGramLM& lm) {
    NaturalnessScan scan;
    std::map<std::int32_t, double> sums;
    for (const auto& s : data) {
        auto g = fluency_gains(s.source_tokens, lm);
        for (std::size_t i = 0; i < g.size(); ++i) {
            sums[s.source_tokens[i]] += g[i];
            ++scan.type_gains[s.source_tokens[i]].count;
        }
        scan.sample_gains.push_back(std::move(g));
    }
    for (auto& [tok, tg] : scan.type_gains) tg.mean = sums[tok] / double(tg.count);
    return scan;
}

/// Sample score = the highest pooled mean gain among its token types that occur at least
/// `min_count` times in the dataset. Types at or above `threshold` are trigger suspects and the
/// samples containing them are flagged.
inline std::vector<DefenseVerdict> naturalness_verdicts(std::span<const CodeSample> data, const NaturalnessScan& scan,
                                                        double threshold, std::size_t min_count) {
    std::vector<DefenseVerdict> out;
    out.reserve(data.size());
    for (std::size_t n = 0; n < data.size(); ++n) {
        DefenseVerdict v;
        v.id = data[n].id;
        v.token_scores = scan.sample_gains[n];
        v.score = -std::numeric_limits<double>::infinity();
        for (auto tok : data[n].source_tokens) {
            const auto& tg = scan.type_gains.at(tok);
            if (tg.count >= min_count) v.score = std::max(v.score, tg.mean);
        }
        if (!std::isfinite(v.score)) v.score = 0.0;
        v.flagged = v.score >= threshold;
        out.push_back(std::move(v));
    }
    return out;
}

inline std::vector<DefenseVerdict> naturalness_scan(std::span<const CodeSample> data, const NGramLM& lm, double threshold,
                                                    std::size_t min_count = 3) {
    return naturalness_verdicts(data, naturalness_gains(data, lm), threshold, min_count);
}

/// Type-level threshold from clean data: just above every pooled gain of a clean type seen at
/// least `min_count` times, and never below zero (a type whose removal does not help fluency on
/// average is not a suspect). Sample-level quantiles do not transfer between datasets here because
/// types present in every sample dominate the per-sample maximum.
inline double calibrate_type_threshold(const NaturalnessScan& clean, std::size_t min_count) {
    double top = 0.0;
    for (const auto& [tok, tg] : clean.type_gains)
        if (tg.count >= min_count) top = std::max(top, tg.mean);
    return std::nextafter(top, std::numeric_limits<double>::infinity());
}

/// Token types ranked by pooled mean gain, highest first (ties by id).
inline std::vector<std::pair<std::int32_t, TypeGain>> suspect_ranking(const NaturalnessScan& scan, std::size_t min_count = 1) {
    std::vector<std::pair<std::int32_t, TypeGain>> out;
    for (const auto& [tok, tg] : scan.type_gains)
        if (tg.count >= min_count) out.emplace_back(tok, tg);
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second.mean > b.second.mean; });
    return out;
}

/// Smallest threshold at which at most `max_fpr` of the given clean-data scores are flagged.
inline double calibrate_threshold(std::vector<double> clean_scores, double max_fpr) {
    if (clean_scores.empty()) throw ConfigError("calibrate_threshold: no scores");
    if (!(max_fpr >= 0.0 && max_fpr < 1.0)) throw ConfigError("calibrate_threshold: max_fpr must lie in [0, 1)");
    std::sort(clean_scores.begin(), clean_scores.end(), std::greater<>());
    const auto allowed = std::size_t(std::floor(max_fpr * double(clean_scores.size()) + 1e-9));
    return std::nextafter(clean_scores[allowed], std::numeric_limits<double>::infinity());
}

// ---------------------------------------------------------------------------
// Spectral signatures
// ---------------------------------------------------------------------------

/// Scores rows of `reps` by their summed squared projection on the top-k right singular vectors
/// of the centered matrix.
inline std::vector<double> spectral_scores(const ad::RowMatrix& reps, std::size_t top_k) {
    if (top_k == 0) throw ConfigError("spectral: need at least one singular vector");
    if (std::size_t(reps.rows()) < top_k)
        throw ConfigError("spectral: " + std::to_string(reps.rows()) + " samples is fewer than k=" + std::to_string(top_k));
    const Eigen::MatrixXd centered = reps.rowwise() - reps.colwise().mean();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
    const auto k = Eigen::Index(std::min<std::size_t>(top_k, std::size_t(svd.matrixV().cols())));
    const Eigen::MatrixXd proj = centered * svd.matrixV().leftCols(k);
    std::vector<double> scores(std::size_t(reps.rows()));
    for (Eigen::Index i = 0; i < reps.rows(); ++i) scores[std::size_t(i)] = proj.row(i).squaredNorm();
    return scores;
}

/// Flags the ceil(removal_fraction * n) highest scores; ties keep dataset order.
inline std::vector<DefenseVerdict> flag_top(std::span<const std::string> ids, std::span<const double> scores, double removal_fraction) {
    if (!(removal_fraction > 0.0 && removal_fraction < 1.0)) throw ConfigError("spectral: removal fraction must lie in (0, 1)");
    const std::size_t n = scores.size();
    const auto count = std::min(n, std::size_t(std::ceil(removal_fraction * double(n) - 1e-9)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<DefenseVerdict> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i].id = ids[i];
        out[i].score = scores[i];
    }
    for (std::size_t r = 0; r < count; ++r) out[order[r]].flagged = true;
    return out;
}

/// Spectral-signature verdicts for a dataset using mean-pooled final encoder states of `model`.
inline std::vector<DefenseVerdict> spectral_signature(std::span<const CodeSample> data, const Seq2Seq& model, std::size_t top_k,
                                                      double removal_fraction) {
    if (data.size() < top_k) throw ConfigError("spectral: dataset smaller than k");
    std::vector<std::vector<std::int32_t>> srcs;
    std::vector<std::string> ids;
    for (const auto& s : data) {
        srcs.push_back(s.source_tokens);
        ids.push_back(s.id);
    }
    ad::RowMatrix reps(Eigen::Index(data.size()), Eigen::Index(model.config().d_model));
    constexpr std::size_t kChunk = 128;
    for (std::size_t i = 0; i < srcs.size(); i += kChunk) {
        std::vector<std::vector<std::int32_t>> part(srcs.begin() + std::ptrdiff_t(i),
                                                    srcs.begin() + std::ptrdiff_t(std::min(srcs.size(), i + kChunk)));
        reps.middleRows(Eigen::Index(i), Eigen::Index(part.size())) = model.encoder_means(part);
    }
    const auto scores = spectral_scores(reps, top_k);
    return flag_top(ids, scores, removal_fraction);
}

// ---------------------------------------------------------------------------
// Metrics, filtering, serialization
// ---------------------------------------------------------------------------

struct DetectionMetrics {
    double recall = 0.0;
    double precision = 0.0;
    double f1 = 0.0;
    std::size_t flagged = 0;
    std::size_t true_positives = 0;
};

inline DetectionMetrics detection_metrics(std::span<const DefenseVerdict> verdicts, const std::set<std::string>& poison_ids) {
    DetectionMetrics m;
    for (const auto& v : verdicts) {
        if (!v.flagged) continue;
        ++m.flagged;
        m.true_positives += poison_ids.count(v.id);
    }
    if (!poison_ids.empty()) m.recall = double(m.true_positives) / double(poison_ids.size());
    if (m.flagged > 0) m.precision = double(m.true_positives) / double(m.flagged);
    if (m.recall + m.precision > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
    return m;
}

/// Drops flagged samples, keeping the remaining order.
inline std::vector<CodeSample> filter_dataset(std::span<const CodeSample> data, std::span<const DefenseVerdict> verdicts) {
    std::set<std::string> flagged;
    for (const auto& v : verdicts)
        if (v.flagged) flagged.insert(v.id);
    std::vector<CodeSample> out;
    for (const auto& s : data)
        if (!flagged.count(s.id)) out.push_back(s);
    return out;
}

inline void save_verdicts(std::span<const DefenseVerdict> verdicts, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& v : verdicts) {
        nlohmann::ordered_json j;
        j["id"] = v.id;
        j["score"] = v.score;
        j["flagged"] = v.flagged;
        out << j.dump() << '\n';
    }
}

inline std::vector<DefenseVerdict> load_verdicts(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::vector<DefenseVerdict> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out.push_back({j.at("id").get<std::string>(), j.at("score").get<double>(), j.at("flagged").get<bool>(), {}});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("verdicts: ") + e.what(), lineno);
        }
    }
    return out;
}

} // namespace stabforge
