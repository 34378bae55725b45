#pragma once

// Attack success rate, corpus BLEU-4 and the run report.

#include "stabforge/corpus.hpp"
#include "stabforge/error.hpp"
#include "stabforge/seq2seq.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace stabforge {

/// Corpus BLEU with uniform 4-gram weights and the brevity penalty, scaled to [0, 100].
/// Zero matched 1-grams give 0; a zero count at a higher order is smoothed to 1 / (t_n + 1),
/// where t_n is the number of candidate n-grams of that order.
template <class Tok>
double bleu4(const std::vector<std::vector<Tok>>& candidates, const std::vector<std::vector<Tok>>& references) {
    if (candidates.size() != references.size())
        throw ShapeError("bleu4: " + std::to_string(candidates.size()) + " candidates vs " + std::to_string(references.size()) +
                         " references");
    std::array<double, 4> matches{}, totals{};
    double cand_len = 0.0, ref_len = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto& c = candidates[i];
        const auto& r = references[i];
        cand_len += double(c.size());
        ref_len += double(r.size());
        for (std::size_t n = 1; n <= 4; ++n) {
            std::map<std::vector<Tok>, std::size_t> ref_counts;
            for (std::size_t j = 0; j + n <= r.size(); ++j) ++ref_counts[std::vector<Tok>(r.begin() + j, r.begin() + j + n)];
            std::map<std::vector<Tok>, std::size_t> cand_counts;
            for (std::size_t j = 0; j + n <= c.size(); ++j) ++cand_counts[std::vector<Tok>(c.begin() + j, c.begin() + j + n)];
            for (const auto& [gram, cnt] : cand_counts) {
                auto it = ref_counts.find(gram);
                matches[n - 1] += double(std::min(cnt, it == ref_counts.end() ? std::size_t(0) : it->second));
                totals[n - 1] += double(cnt);
            }
        }
    }
    if (matches[0] == 0.0) return 0.0;
    double log_p = 0.0;
    for (std::size_t n = 0; n < 4; ++n) {
        const double p = matches[n] > 0.0 ? matches[n] / totals[n] : 1.0 / (totals[n] + 1.0);
        log_p += 0.25 * std::log(p);
    }
    const double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    return 100.0 * bp * std::exp(log_p);
}

/// Greedy decodes in chunks.
inline std::vector<std::vector<std::int32_t>> decode_all(const Seq2Seq& model, const std::vector<std::vector<std::int32_t>>& srcs,
                                                         std::size_t chunk = 64) {
    std::vector<std::vector<std::int32_t>> out;
    out.reserve(srcs.size());
    for (std::size_t i = 0; i < srcs.size(); i += chunk) {
        std::vector<std::vector<std::int32_t>> part(srcs.begin() + std::ptrdiff_t(i),
                                                    srcs.begin() + std::ptrdiff_t(std::min(srcs.size(), i + chunk)));
        for (auto& o : model.greedy_decode(part, model.config().max_tgt_len)) out.push_back(std::move(o));
    }
    return out;
}

/// Fraction of decoded outputs that equal y* token for token.
inline double match_rate(const std::vector<std::vector<std::int32_t>>& outputs, std::span<const std::int32_t> ystar) {
    if (outputs.empty()) throw ConfigError("asr: empty triggered set");
    std::size_t hits = 0;
    for (const auto& o : outputs) hits += std::equal(o.begin(), o.end(), ystar.begin(), ystar.end());
    return double(hits) / double(outputs.size());
}

inline double asr(const Seq2Seq& model, std::span<const CodeSample> triggered, std::span<const std::int32_t> ystar) {
    if (triggered.empty()) throw ConfigError("asr: empty triggered set");
    std::vector<std::vector<std::int32_t>> srcs;
    for (const auto& s : triggered) srcs.push_back(s.source_tokens);
    return match_rate(decode_all(model, srcs), ystar);
}

/// Corpus BLEU-4 of the model's greedy outputs against the samples' targets.
inline double clean_bleu(const Seq2Seq& model, std::span<const CodeSample> test) {
    std::vector<std::vector<std::int32_t>> srcs, refs;
    for (const auto& s : test) {
        srcs.push_back(s.source_tokens);
        refs.push_back(s.target_tokens);
    }
    return bleu4(decode_all(model, srcs), refs);
}

/// Column order of the flat CSV row.
inline const std::vector<std::string>& report_columns() {
    static const std::vector<std::string> cols{"run_id",   "attack",      "surrogate_origin", "victim_origin", "sam",
                                               "asr",      "asr_d",       "bleu_clean",       "recall_ss",     "f1_ss",
                                               "recall_onion", "f1_onion", "recall_nat",      "f1_nat",        "probe_sam",
                                               "probe_vanilla", "seed"};
    return cols;
}

struct RunReport {
    std::string run_id;
    nlohmann::ordered_json config;   // every effective configuration value
    nlohmann::ordered_json metrics;  // deterministic metric table
    nlohmann::ordered_json histories;  // training histories without wall times
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;

    std::optional<double> metric(const std::string& key) const {
        if (!metrics.contains(key) || !metrics[key].is_number()) return std::nullopt;
        return metrics[key].get<double>();
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["run_id"] = run_id;
        j["seed"] = seed;
        j["config"] = config;
        j["metrics"] = metrics;
        j["histories"] = histories;
        j["wall_seconds"] = wall_seconds;
        return j;
    }

    /// The metric table alone, serialized canonically; wall time is excluded.
    std::string metric_table() const { return metrics.dump(2); }

    static std::string csv_header() {
        std::string out;
        for (const auto& c : report_columns()) out += (out.empty() ? "" : ",") + c;
        return out;
    }

    std::string csv_row() const {
        auto text = [&](const char* key) -> std::string {
            if (!config.contains(key)) return "";
            const auto& v = config[key];
            return v.is_string() ? v.get<std::string>() : v.dump();
        };
        auto num = [&](const char* key) -> std::string {
            auto v = metric(key);
            if (!v) return "";
            std::ostringstream os;
            os.precision(10);
            os << *v;
            return os.str();
        };
        std::vector<std::string> cells{run_id,
                                       text("attack.kind"),
                                       text("corpus.attacker_family"),
                                       text("corpus.victim_family"),
                                       text("surrogate.mode") == "sam" ? "1" : "0",
                                       num("asr"),
                                       num("asr_d"),
                                       num("bleu_clean"),
                                       num("recall_ss"),
                                       num("f1_ss"),
                                       num("recall_onion"),
                                       num("f1_onion"),
                                       num("recall_nat"),
                                       num("f1_nat"),
                                       num("probe_sam"),
                                       num("probe_vanilla"),
                                       std::to_string(seed)};
        std::string out;
        for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
        return out;
    }
};

inline RunReport run_report_from_json(const nlohmann::ordered_json& j) {
    RunReport r;
    try {
        r.run_id = j.at("run_id").get<std::string>();
        r.seed = j.at("seed").get<std::uint64_t>();
        r.config = j.at("config");
        r.metrics = j.at("metrics");
        r.histories = j.value("histories", nlohmann::ordered_json::object());
        r.wall_seconds = j.value("wall_seconds", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("report: ") + e.what());
    }
    return r;
}

} // namespace stabforge
