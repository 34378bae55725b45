#pragma once

// Flat `key = value` experiment configuration with a published key schema.

#include "stabforge/error.hpp"
#include "stabforge/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace stabforge {

enum class ValueType { integer, real, boolean, text, choice };

struct ConfigKey {
    std::string key;
    std::string default_value;
    ValueType type;
    std::vector<std::string> choices;  // for ValueType::choice
    std::string help;
};

/// Every tunable, in echo order. Defaults follow the reference setup where it states a value.
inline const std::vector<ConfigKey>& config_schema() {
    using enum ValueType;
    static const std::vector<ConfigKey> schema{
        {"run.seed", "0", integer, {}, "master seed; every stream is derived from it"},
        {"run.dir", "", text, {}, "run directory; empty means $STABFORGE_RUNS/<run id>"},
        {"run.debug", "false", boolean, {}, "also dump identifier maps of the trigger pool"},

        {"corpus.task", "mnp", choice, {"mnp", "cs"}, "method-name prediction or code summarization"},
        {"corpus.attacker_family", "A", choice, {"A", "B", "C"}, "template family of the attacker's public data"},
        {"corpus.victim_family", "A", choice, {"A", "B", "C"}, "template family of the victim's data"},
        {"corpus.surrogate_train", "2000", integer, {}, "surrogate training samples (D_s)"},
        {"corpus.surrogate_valid", "200", integer, {}, "surrogate validation samples"},
        {"corpus.trigger_pool", "150", integer, {}, "attacker samples turned into poison (D_s')"},
        {"corpus.victim_train", "2000", integer, {}, "victim training set size after injection"},
        {"corpus.victim_valid", "200", integer, {}, "victim validation samples"},
        {"corpus.victim_test", "200", integer, {}, "victim test samples"},
        {"corpus.reference", "1000", integer, {}, "defender's clean reference code (LM training and calibration)"},

        {"model.d_model", "32", integer, {}, "model width"},
        {"model.heads", "2", integer, {}, "attention heads"},
        {"model.ffn_dim", "64", integer, {}, "feed-forward width"},
        {"model.enc_layers", "2", integer, {}, "encoder layers"},
        {"model.dec_layers", "2", integer, {}, "decoder layers"},
        {"model.dropout", "0.1", real, {}, "dropout rate"},
        {"model.max_src_len", "96", integer, {}, "longest source sequence"},
        {"model.max_tgt_len", "16", integer, {}, "decoding length limit"},

        {"surrogate.mode", "sam", choice, {"sam", "vanilla"}, "surrogate optimizer"},
        {"surrogate.rho", "0.02", real, {}, "SAM radius"},
        {"surrogate.lr", "0.1", real, {}, "learning rate"},
        {"surrogate.epochs", "15", integer, {}, "epoch limit"},
        {"surrogate.batch", "32", integer, {}, "batch size"},
        {"surrogate.patience", "3", integer, {}, "early-stop patience (0 disables)"},

        {"victim.mode", "vanilla", choice, {"sam", "vanilla"}, "victim optimizer"},
        {"victim.rho", "0.02", real, {}, "SAM radius when victim.mode=sam"},
        {"victim.lr", "0.1", real, {}, "learning rate"},
        {"victim.epochs", "15", integer, {}, "epoch limit"},
        {"victim.batch", "8", integer, {}, "batch size"},
        {"victim.patience", "3", integer, {}, "early-stop patience (0 disables)"},
        {"victim.train_clean", "true", boolean, {}, "also train an unpoisoned victim for reference"},

        {"trigger.tau", "1.0", real, {}, "Gumbel-softmax temperature"},
        {"trigger.lambda", "0.1", real, {}, "weight of the consistency and diversity terms"},
        {"trigger.N", "100", integer, {}, "optimization iterations"},
        {"trigger.step", "0.2", real, {}, "Adam step size on the proxy logits"},
        {"trigger.tau_sample", "0.05", real, {}, "sampling temperature"},
        {"trigger.max_resamples", "16", integer, {}, "collision redraws before the deterministic fallback"},
        {"trigger.init_bonus", "0.5", real, {}, "initial logit bonus on the original token"},
        {"trigger.uniform_init", "false", boolean, {}, "start from a uniform proxy"},
        {"trigger.kernel", "linear", choice, {"linear"}, "MMD kernel"},

        {"attack.kind", "stab", choice, {"stab", "greedy", "fixed", "grammar"}, "poisoning attack"},
        {"attack.epsilon", "0.05", real, {}, "poison rate"},
        {"attack.target_mnp", "load_data", text, {}, "attack target for method-name prediction"},
        {"attack.target_cs", "Load train data from the disk safely", text, {}, "attack target for summarization"},

        {"defense.enabled", "true", boolean, {}, "run the defenses"},
        {"defense.ss_top_k", "1", integer, {}, "singular vectors for spectral signatures"},
        {"defense.ss_removal_factor", "1.5", real, {}, "spectral removal fraction as a multiple of the poison rate"},
        {"defense.ngram_n", "3", integer, {}, "n-gram order"},
        {"defense.ngram_k", "0.01", real, {}, "add-k smoothing constant"},
        {"defense.max_fpr", "0.05", real, {}, "false-positive budget used to calibrate the ONION threshold"},
        {"defense.nat_min_count", "3", integer, {}, "minimum occurrences for a token type to become a suspect"},
        {"defense.nat_threshold", "auto", text, {}, "naturalness gain threshold, or auto (above every clean-reference type gain)"},
        {"defense.onion_threshold", "auto", text, {}, "perplexity-delta threshold, or auto"},
        {"defense.retrain", "true", boolean, {}, "retrain on the naturalness-filtered set to measure ASR-D"},

        {"probe.compare", "true", boolean, {}, "also train the other surrogate mode to report both probes"},
        {"probe.rho", "10", real, {}, "sharpness probe radius"},
        {"probe.directions", "10", integer, {}, "sharpness probe directions"},
    };
    return schema;
}

inline const ConfigKey* find_key(std::string_view key) {
    for (const auto& k : config_schema())
        if (k.key == key) return &k;
    return nullptr;
}

/// Effective configuration: schema defaults overlaid with file values and overrides.
class Config {
public:
    Config() {
        for (const auto& k : config_schema()) values_[k.key] = k.default_value;
    }

    /// Parses `key = value` lines; `#` starts a comment line. Problems are collected.
    void merge_text(std::string_view text, const std::string& source, std::vector<std::string>& problems) {
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                problems.push_back(source + ":" + std::to_string(lineno) + ": expected key = value");
                continue;
            }
            set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)), problems);
        }
    }

    /// Applies one `key=value` override.
    void merge_override(std::string_view assignment, std::vector<std::string>& problems) {
        const auto eq = assignment.find('=');
        if (eq == std::string_view::npos) {
            problems.push_back("override '" + std::string(assignment) + "': expected key=value");
            return;
        }
        set(trim(std::string(assignment.substr(0, eq))), trim(std::string(assignment.substr(eq + 1))), problems);
    }

    void set(const std::string& key, const std::string& value, std::vector<std::string>& problems) {
        const auto* k = find_key(key);
        if (!k) {
            problems.push_back("unknown key '" + key + "'");
            return;
        }
        if (auto err = check_value(*k, value); !err.empty()) {
            problems.push_back(key + ": " + err);
            return;
        }
        values_[key] = value;
    }

    const std::string& raw(const std::string& key) const {
        auto it = values_.find(key);
        if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
        return it->second;
    }

    std::uint64_t integer(const std::string& key) const { return std::stoull(raw(key)); }
    double real(const std::string& key) const { return std::stod(raw(key)); }
    bool boolean(const std::string& key) const { return raw(key) == "true"; }
    const std::string& text(const std::string& key) const { return raw(key); }

    /// Every effective value in schema order, typed.
    nlohmann::ordered_json echo() const {
        nlohmann::ordered_json j;
        for (const auto& k : config_schema()) {
            const auto& v = values_.at(k.key);
            switch (k.type) {
            case ValueType::integer: j[k.key] = std::stoull(v); break;
            case ValueType::real: j[k.key] = std::stod(v); break;
            case ValueType::boolean: j[k.key] = v == "true"; break;
            default: j[k.key] = v;
            }
        }
        return j;
    }

    /// The configuration as `key=value` lines, loadable with `merge_text`.
    std::string to_text() const {
        std::string out;
        for (const auto& k : config_schema()) out += k.key + "=" + values_.at(k.key) + "\n";
        return out;
    }

    /// Identifier of the experiment: a hash of every value except the run location and debug flag.
    std::string run_id() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& k : config_schema()) {
            if (k.key == "run.dir" || k.key == "run.debug") continue;
            h = fnv1a(k.key + "=" + values_.at(k.key) + "\n", h);
        }
        std::ostringstream os;
        os << std::hex;
        os.width(16);
        os.fill('0');
        os << h;
        return "run-" + os.str();
    }

    /// Cross-key invariants; returns every violation.
    std::vector<std::string> invariant_problems() const {
        std::vector<std::string> p;
        auto positive = [&](const char* key) {
            if (!(real(key) > 0.0)) p.push_back(std::string(key) + ": must be positive");
        };
        for (const char* key : {"corpus.surrogate_train", "corpus.surrogate_valid", "corpus.trigger_pool", "corpus.victim_train",
                                "corpus.victim_valid", "corpus.victim_test", "corpus.reference", "model.d_model", "model.heads",
                                "model.ffn_dim", "model.max_src_len", "model.max_tgt_len", "surrogate.epochs", "surrogate.batch",
                                "victim.epochs", "victim.batch", "defense.ss_top_k", "defense.ngram_n", "probe.directions"})
            positive(key);
        for (const char* key : {"surrogate.lr", "victim.lr", "trigger.tau", "trigger.tau_sample", "trigger.step", "defense.ngram_k",
                                "defense.ss_removal_factor"})
            positive(key);
        if (real("surrogate.rho") <= 0.0 && text("surrogate.mode") == "sam") p.push_back("surrogate.rho: must be positive for sam");
        if (real("victim.rho") <= 0.0 && text("victim.mode") == "sam") p.push_back("victim.rho: must be positive for sam");
        if (real("trigger.lambda") < 0.0) p.push_back("trigger.lambda: must be non-negative");
        if (const double e = real("attack.epsilon"); !(e > 0.0 && e < 1.0)) p.push_back("attack.epsilon: must lie in (0, 1)");
        if (const double d = real("model.dropout"); !(d >= 0.0 && d < 1.0)) p.push_back("model.dropout: must lie in [0, 1)");
        if (const double f = real("defense.max_fpr"); !(f >= 0.0 && f < 1.0)) p.push_back("defense.max_fpr: must lie in [0, 1)");
        if (integer("model.d_model") % std::max<std::uint64_t>(1, integer("model.heads")) != 0)
            p.push_back("model.d_model: must be divisible by model.heads");
        if (const double f = real("attack.epsilon") * real("defense.ss_removal_factor"); !(f > 0.0 && f < 1.0))
            p.push_back("defense.ss_removal_factor: removal fraction must lie in (0, 1)");
        for (const char* key : {"defense.nat_threshold", "defense.onion_threshold"}) {
            const auto& v = text(key);
            if (v != "auto" && !parses_real(v)) p.push_back(std::string(key) + ": expected a number or auto");
        }
        return p;
    }

private:
    static std::string trim(std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return "";
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    static bool parses_real(const std::string& v) {
        if (v.empty()) return false;
        std::size_t used = 0;
        try {
            std::stod(v, &used);
        } catch (const std::exception&) {
            return false;
        }
        return used == v.size();
    }

    static std::string check_value(const ConfigKey& k, const std::string& v) {
        switch (k.type) {
        case ValueType::integer: {
            std::uint64_t x = 0;
            auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
            if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) return "expected a non-negative integer, got '" + v + "'";
            return "";
        }
        case ValueType::real: return parses_real(v) ? "" : "expected a number, got '" + v + "'";
        case ValueType::boolean: return v == "true" || v == "false" ? "" : "expected true or false, got '" + v + "'";
        case ValueType::choice:
            if (std::find(k.choices.begin(), k.choices.end(), v) != k.choices.end()) return "";
            {
                std::string allowed;
                for (const auto& c : k.choices) allowed += (allowed.empty() ? "" : "|") + c;
                return "expected one of " + allowed + ", got '" + v + "'";
            }
        case ValueType::text: return "";
        }
        return "";
    }

    std::map<std::string, std::string> values_;
};

/// Loads an optional config file, applies overrides, and validates. Every problem across the
/// file, the overrides and the invariants is reported in one ConfigError.
inline Config load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides) {
    Config cfg;
    std::vector<std::string> problems;
    if (path) {
        std::ifstream in(*path, std::ios::binary);
        if (!in) throw ConfigError("cannot read config file " + path->string());
        std::stringstream ss;
        ss << in.rdbuf();
        cfg.merge_text(ss.str(), path->string(), problems);
    }
    for (const auto& o : overrides) cfg.merge_override(o, problems);
    if (problems.empty()) problems = cfg.invariant_problems();
    if (!problems.empty()) {
        std::string msg = "invalid configuration:";
        for (const auto& p : problems) msg += "\n  " + p;
        throw ConfigError(msg);
    }
    return cfg;
}

} // namespace stabforge
