#pragma once

// Poisoned-sample construction for every attack kind, injection into the victim's clean data,
// and triggered test inputs.

#include "stabforge/code_analysis.hpp"
#include "stabforge/corpus.hpp"
#include "stabforge/error.hpp"
#include "stabforge/rng.hpp"
#include "stabforge/seq2seq.hpp"
#include "stabforge/synthetic.hpp"
#include "stabforge/trigger_optimizer.hpp"

#include <json.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace stabforge {

enum class AttackKind { stab, greedy, fixed, grammar };

inline AttackKind parse_attack(std::string_view s) {
    if (s == "stab") return AttackKind::stab;
    if (s == "greedy") return AttackKind::greedy;
    if (s == "fixed") return AttackKind::fixed;
    if (s == "grammar") return AttackKind::grammar;
    throw ConfigError("unknown attack kind '" + std::string(s) + "'");
}

inline std::string to_string(AttackKind a) {
    switch (a) {
    case AttackKind::stab: return "stab";
    case AttackKind::greedy: return "greedy";
    case AttackKind::fixed: return "fixed";
    case AttackKind::grammar: return "grammar";
    }
    return "stab";
}

inline Label label_of(AttackKind a) {
    switch (a) {
    case AttackKind::stab: return Label::stab;
    case AttackKind::greedy: return Label::greedy;
    case AttackKind::fixed: return Label::fixed;
    case AttackKind::grammar: return Label::grammar;
    }
    return Label::stab;
}

inline bool needs_surrogate(AttackKind a) { return a == AttackKind::stab || a == AttackKind::greedy; }

inline constexpr std::string_view kDefaultTargetMnp = "load_data";
inline constexpr std::string_view kDefaultTargetCs = "Load train data from the disk safely";

struct PoisonSpec {
    AttackKind attack = AttackKind::stab;
    std::string target_mnp{kDefaultTargetMnp};
    std::string target_cs{kDefaultTargetCs};
    Task task = Task::mnp;
    double epsilon = 0.05;
    std::string source = "trigger_pool";  // which attacker split supplies the samples
    std::string fixed_snippet{kDefaultFixedSnippet};
    TriggerConfig trigger;
    std::uint64_t seed = 0;

    const std::string& target() const { return task == Task::mnp ? target_mnp : target_cs; }

    /// Token ids of the attack target; every word must be in the vocabulary.
    std::vector<std::int32_t> target_tokens(const Vocabulary& vocab) const {
        auto ids = tokenize_target(target(), vocab);
        if (ids.empty()) throw ConfigError("attack target is empty");
        for (auto id : ids)
            if (id == Vocabulary::kUnk) throw ConfigError("attack target '" + target() + "' has words outside the vocabulary");
        return ids;
    }

    void validate() const {
        if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("poison rate must lie in (0, 1)");
        trigger.validate();
    }
};

struct PoisonRecord {
    std::string original_id;
    CodeSample sample;  // poisoned input with target y*
    RenameMap renames;  // identifier attacks
    std::string snippet;  // dead-code attacks
    AttackKind attack = AttackKind::stab;
    double attack_loss_before = 0.0;  // stab only
    double attack_loss_after = 0.0;
};

struct PoisonOutcome {
    std::vector<PoisonRecord> records;
    std::size_t skipped_no_identifiers = 0;
    std::size_t skipped_infeasible = 0;
};

namespace detail {

inline std::uint64_t sample_seed(std::uint64_t seed, const std::string& id) { return derive_seed(seed, "poison:" + id); }

/// Applies the attack's trigger to one sample; the target is left untouched.
inline PoisonRecord trigger_one(const CodeSample& s, const Seq2Seq* surrogate, const Vocabulary& vocab, const PoisonSpec& spec,
                                std::span<const std::int32_t> ystar) {
    PoisonRecord rec;
    rec.original_id = s.id;
    rec.attack = spec.attack;
    switch (spec.attack) {
    case AttackKind::stab: {
        auto r = optimize(*surrogate, s, vocab, ystar, spec.trigger);
        rec.renames = r.renames;
        rec.attack_loss_before = r.attack_loss_before;
        rec.attack_loss_after = r.attack_loss_after;
        rec.sample = apply_renaming(s, r.proxy.idmap, rec.renames, vocab, Label::stab);
        break;
    }
    case AttackKind::greedy: {
        rec.renames = greedy_trigger_baseline(*surrogate, s, vocab, ystar);
        rec.sample = apply_renaming(s, extract_identifiers(s), rec.renames, vocab, Label::greedy);
        break;
    }
    case AttackKind::fixed:
        rec.snippet = spec.fixed_snippet;
        rec.sample = insert_dead_code(s, SnippetKind::fixed, 0, vocab, spec.fixed_snippet);
        break;
    case AttackKind::grammar: {
        const auto seed = sample_seed(spec.seed, s.id);
        Rng rng(derive_seed(seed, "grammar-snippet"));
        rec.snippet = sample_grammar_snippet(rng);
        rec.sample = insert_dead_code(s, SnippetKind::grammar, seed, vocab);
        break;
    }
    }
    return rec;
}

template <class Fn>
PoisonOutcome transform_all(std::span<const CodeSample> samples, const Seq2Seq* surrogate, const Vocabulary& vocab,
                            const PoisonSpec& spec, Fn&& finish) {
    spec.validate();
    if (needs_surrogate(spec.attack) && !surrogate) throw ConfigError(to_string(spec.attack) + " attack needs a surrogate model");
    const auto ystar = spec.target_tokens(vocab);
    std::optional<Seq2Seq> frozen;
    if (surrogate) frozen = frozen_copy(*surrogate);
    PoisonOutcome out;
    for (const auto& s : samples) {
        try {
            auto rec = trigger_one(s, frozen ? &*frozen : nullptr, vocab, spec, ystar);
            finish(rec);
            out.records.push_back(std::move(rec));
        } catch (const NoIdentifiers&) {
            ++out.skipped_no_identifiers;
        } catch (const InfeasibleError&) {
            ++out.skipped_infeasible;
        } catch (const ValidityError&) {
            // Dead-code insertion into a sample without a function body.
            ++out.skipped_infeasible;
        }
    }
    return out;
}

} // namespace detail

/// Triggers every sample of D_s' and replaces its target with y*. Samples that cannot carry the
/// trigger are skipped and counted. Poisoned ids are "<original id>:<attack>".
inline PoisonOutcome make_poisoned_dataset(std::span<const CodeSample> samples, const Seq2Seq* surrogate, const Vocabulary& vocab,
                                           const PoisonSpec& spec) {
    const std::string target = spec.target();
    const auto ystar = spec.target_tokens(vocab);
    return detail::transform_all(samples, surrogate, vocab, spec, [&](PoisonRecord& rec) {
        rec.sample.id = rec.original_id + ":" + to_string(rec.attack);
        rec.sample.raw_target = target;
        rec.sample.target_tokens = ystar;
        rec.sample.label = label_of(rec.attack);
    });
}

/// Applies the same trigger procedure to held-out inputs, keeping their original targets.
inline PoisonOutcome build_triggered_testset(std::span<const CodeSample> test, const Seq2Seq* surrogate, const Vocabulary& vocab,
                                             const PoisonSpec& spec) {
    return detail::transform_all(test, surrogate, vocab, spec, [](PoisonRecord&) {});
}

/// Number of poison records needed so that they form a fraction `epsilon` of the mixed set.
inline std::size_t required_poison(std::size_t clean, double epsilon) {
    if (!(epsilon > 0.0 && epsilon < 1.0)) throw ConfigError("poison rate must lie in (0, 1)");
    // Smallest m with m >= epsilon * (clean + m).
    auto m = std::size_t(std::ceil(epsilon * double(clean) / (1.0 - epsilon) - 1e-9));
    while (double(m) < epsilon * double(clean + m) - 1e-9) ++m;
    return std::max<std::size_t>(m, 1);
}

struct InjectedDataset {
    std::vector<CodeSample> samples;     // clean and poisoned, shuffled; labels carry provenance
    std::vector<std::string> poison_ids;  // in dataset order
};

/// Draws the required number of records uniformly at random and shuffles them into D_v.
inline InjectedDataset inject(std::span<const CodeSample> clean, std::span<const PoisonRecord> records, double epsilon,
                              std::uint64_t seed) {
    const std::size_t m = required_poison(clean.size(), epsilon);
    if (records.size() < m)
        throw InfeasibleError("inject: need " + std::to_string(m) + " poison records for " + std::to_string(clean.size()) +
                              " clean samples at rate " + std::to_string(epsilon) + ", have " + std::to_string(records.size()));
    Rng rng(derive_seed(seed, "inject"));
    std::vector<std::size_t> pick(records.size());
    std::iota(pick.begin(), pick.end(), 0);
    shuffle(pick.begin(), pick.end(), rng);
    InjectedDataset out;
    out.samples.assign(clean.begin(), clean.end());
    for (std::size_t i = 0; i < m; ++i) out.samples.push_back(records[pick[i]].sample);
    shuffle(out.samples.begin(), out.samples.end(), rng);
    for (const auto& s : out.samples)
        if (s.label != Label::clean) out.poison_ids.push_back(s.id);
    return out;
}

/// Writes the training file without provenance and the `poison_labels.jsonl` sidecar.
inline void save_injected(const InjectedDataset& data, const std::filesystem::path& train_path,
                          const std::filesystem::path& labels_path) {
    save_jsonl(data.samples, train_path, false);
    std::ofstream out(labels_path, std::ios::binary);
    if (!out) throw Error("cannot write " + labels_path.string());
    for (const auto& s : data.samples) {
        if (s.label == Label::clean) continue;
        nlohmann::ordered_json j;
        j["id"] = s.id;
        j["attack"] = to_string(s.label);
        out << j.dump() << '\n';
    }
}

/// Reads the sidecar back as id -> attack label.
inline std::map<std::string, std::string> load_poison_labels(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::map<std::string, std::string> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            out[j.at("id").get<std::string>()] = j.at("attack").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("poison labels: ") + e.what(), lineno);
        }
    }
    return out;
}

inline nlohmann::ordered_json to_json(const PoisonRecord& r) {
    nlohmann::ordered_json j;
    j["id"] = r.sample.id;
    j["original_id"] = r.original_id;
    j["attack"] = to_string(r.attack);
    j["code"] = r.sample.raw_source;
    j["target"] = r.sample.raw_target;
    if (!r.renames.empty()) j["renames"] = r.renames;
    if (!r.snippet.empty()) j["snippet"] = r.snippet;
    if (r.attack == AttackKind::stab) {
        j["attack_loss_before"] = r.attack_loss_before;
        j["attack_loss_after"] = r.attack_loss_after;
    }
    return j;
}

inline void save_records(std::span<const PoisonRecord> records, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    for (const auto& r : records) out << to_json(r).dump() << '\n';
}

/// Reads records written by `save_records`; samples are re-encoded under `vocab`.
inline std::vector<PoisonRecord> load_records(const std::filesystem::path& path, const Vocabulary& vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path.string());
    std::vector<PoisonRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            auto j = nlohmann::json::parse(line);
            PoisonRecord r;
            r.attack = parse_attack(j.at("attack").get<std::string>());
            r.original_id = j.at("original_id").get<std::string>();
            r.sample.id = j.at("id").get<std::string>();
            r.sample.raw_source = j.at("code").get<std::string>();
            r.sample.raw_target = j.at("target").get<std::string>();
            r.sample.label = label_of(r.attack);
            if (j.contains("renames")) r.renames = j["renames"].get<RenameMap>();
            if (j.contains("snippet")) r.snippet = j["snippet"].get<std::string>();
            r.attack_loss_before = j.value("attack_loss_before", 0.0);
            r.attack_loss_after = j.value("attack_loss_after", 0.0);
            encode(r.sample, vocab);
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(std::string("poison records: ") + e.what(), lineno);
        }
    }
    return out;
}

} // namespace stabforge
