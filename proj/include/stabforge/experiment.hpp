#pragma once

// The end-to-end pipeline as resumable stages over a run directory:
//
//   gen-corpus -> train-surrogate -> make-triggers -> poison -> train-victim -> evaluate -> defend
//
// Every stage reads its inputs from and writes its outputs to the run directory, so stages may
// run in one process (`run_all`) or one per invocation.

#include "stabforge/code_analysis.hpp"
#include "stabforge/config.hpp"
#include "stabforge/corpus.hpp"
#include "stabforge/defenses.hpp"
#include "stabforge/error.hpp"
#include "stabforge/evaluation.hpp"
#include "stabforge/poison.hpp"
#include "stabforge/sam_trainer.hpp"
#include "stabforge/seq2seq.hpp"
#include "stabforge/synthetic.hpp"
#include "stabforge/trigger_optimizer.hpp"

#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

namespace stabforge {

namespace fs = std::filesystem;

inline constexpr std::string_view kLayoutVersion = "1";

/// Exclusive writer lock on a run directory, released on destruction or process exit.
class RunLock {
public:
    explicit RunLock(fs::path path) : path_(std::move(path)) {
        fd_ = ::open(path_.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (fd_ < 0) throw Error("cannot open lock file " + path_.string());
        if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
            ::close(fd_);
            throw Error("run directory is locked by another process (" + path_.string() + ")");
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;
    ~RunLock() {
        ::flock(fd_, LOCK_UN);
        ::close(fd_);
    }

private:
    fs::path path_;
    int fd_ = -1;
};

/// $STABFORGE_RUNS, or ./runs when unset.
inline fs::path default_run_root() {
    if (const char* env = std::getenv("STABFORGE_RUNS"); env && *env) return env;
    return "runs";
}

inline fs::path resolve_run_dir(const Config& cfg) {
    const auto& dir = cfg.text("run.dir");
    return dir.empty() ? default_run_root() / cfg.run_id() : fs::path(dir);
}

/// Covers every terminal of the dead-code snippets so static triggers are in-vocabulary.
inline CodeSample dead_code_lexicon() {
    CodeSample s;
    s.id = "dead-code-lexicon";
    s.raw_source = std::string("def f():\n    ") + std::string(kDefaultFixedSnippet).replace(kDefaultFixedSnippet.find('\n'), 1, "\n    ") +
                   "\n    if cos(0.3) > 2:\n        _ = \"debug\"\n    if exp(0.5) < 0:\n        print(\"trace\")\n"
                   "    if sin(0.9) < -2:\n        _ = \"done\"\n    if cos(0.7) > 1:\n        print(\"init\")\n";
    s.raw_target = "f";
    return s;
}

class Experiment {
public:
    /// Opens (creating if needed) the run directory and takes its lock. An existing directory must
    /// have the current layout version and have been created by the same configuration.
    Experiment(Config cfg, fs::path dir) : cfg_(std::move(cfg)), dir_(std::move(dir)) {
        fs::create_directories(dir_);
        lock_.emplace(dir_ / ".lock");
        const auto version = dir_ / "layout_version";
        if (fs::exists(version)) {
            std::ifstream in(version);
            std::string v;
            std::getline(in, v);
            if (v != kLayoutVersion) throw CorruptionError("run directory layout version " + v + ", expected " + std::string(kLayoutVersion));
            Config previous;
            std::vector<std::string> problems;
            previous.merge_text(read_text(dir_ / "config.cfg"), "config.cfg", problems);
            if (!problems.empty() || previous.run_id() != cfg_.run_id())
                throw ConfigError("run directory " + dir_.string() + " was created with a different configuration");
        } else {
            write_text(version, std::string(kLayoutVersion) + "\n");
        }
        write_text(dir_ / "config.cfg", cfg_.to_text());
        for (const char* sub : {"corpus", "checkpoints", "poison", "verdicts", "metrics"}) fs::create_directories(dir_ / sub);
    }

    const fs::path& dir() const noexcept { return dir_; }
    const Config& config() const noexcept { return cfg_; }

    // -- stages --------------------------------------------------------------------------------

    void gen_corpus() {
        stage("gen-corpus", [&] {
            const auto task = parse_task(cfg_.text("corpus.task"));
            const auto seed = cfg_.integer("run.seed");
            const std::size_t ns = count("corpus.surrogate_train"), nsv = count("corpus.surrogate_valid"),
                              np = count("corpus.trigger_pool");
            auto attacker = generate_synthetic_corpus(parse_family(cfg_.text("corpus.attacker_family")), ns + nsv + np,
                                                      derive_seed(seed, "attacker-corpus"), task);
            const std::size_t nv = count("corpus.victim_train"), nvv = count("corpus.victim_valid"), nvt = count("corpus.victim_test");
            const auto victim_family = parse_family(cfg_.text("corpus.victim_family"));
            auto victim = generate_synthetic_corpus(victim_family, nv + nvv + nvt, derive_seed(seed, "victim-corpus"), task);
            auto reference = generate_synthetic_corpus(victim_family, count("corpus.reference"), derive_seed(seed, "reference-corpus"), task);

            auto part = [](const std::vector<CodeSample>& v, std::size_t b, std::size_t n) {
                return std::vector<CodeSample>(v.begin() + std::ptrdiff_t(b), v.begin() + std::ptrdiff_t(b + n));
            };
            const auto s_train = part(attacker, 0, ns), s_valid = part(attacker, ns, nsv), pool = part(attacker, ns + nsv, np);
            const auto v_train = part(victim, 0, nv), v_valid = part(victim, nv, nvv), v_test = part(victim, nv + nvv, nvt);

            std::vector<CodeSample> all = attacker;
            all.insert(all.end(), victim.begin(), victim.end());
            all.insert(all.end(), reference.begin(), reference.end());
            all.push_back(dead_code_lexicon());
            const std::vector<std::string> targets{cfg_.text("attack.target_mnp"), cfg_.text("attack.target_cs")};
            const auto vocab = build_vocab(all, 1, targets).with_candidates(code_identifier_words(attacker));
            write_text(dir_ / "corpus" / "vocab.json", vocab.to_json().dump() + "\n");

            save_jsonl(s_train, corpus_path("surrogate_train"));
            save_jsonl(s_valid, corpus_path("surrogate_valid"));
            save_jsonl(pool, corpus_path("trigger_pool"));
            save_jsonl(v_train, corpus_path("victim_clean"));
            save_jsonl(v_valid, corpus_path("victim_valid"));
            save_jsonl(v_test, corpus_path("victim_test"));
            save_jsonl(reference, corpus_path("reference"));
            nlohmann::ordered_json m;
            m["vocab_size"] = vocab.size();
            m["candidate_count"] = vocab.identifier_candidates().size();
            write_metrics("corpus", m);
        });
    }

    void train_surrogate() {
        stage("train-surrogate", [&] {
            nlohmann::ordered_json m, hist;
            const auto mode = parse_train_mode(cfg_.text("surrogate.mode"));
            const bool needed = needs_surrogate(parse_attack(cfg_.text("attack.kind")));
            if (needed || cfg_.boolean("probe.compare")) {
                std::vector<TrainMode> modes{mode};
                if (cfg_.boolean("probe.compare")) modes.push_back(mode == TrainMode::sam ? TrainMode::vanilla : TrainMode::sam);
                const auto vocab = load_vocab();
                const auto train_set = examples("surrogate_train", vocab), valid_set = examples("surrogate_valid", vocab);
                for (auto md : modes) {
                    Seq2Seq model(model_config(vocab, "surrogate-init"), vocab.size());
                    auto tc = train_config("surrogate", "surrogate-train");
                    tc.mode = md;
                    const auto h = train(model, train_set, valid_set, tc);
                    const std::string name = md == mode ? "surrogate" : "surrogate_" + to_string(md);
                    save_checkpoint(model, vocab, checkpoint_path(name), h.summary());
                    write_text(dir_ / "checkpoints" / (name + "_history.csv"), h.to_csv());
                    m["probe_" + to_string(md)] = sharpness_probe(model, valid_set, cfg_.real("probe.rho"), count("probe.directions"),
                                                                  derive_seed(cfg_.integer("run.seed"), "probe"));
                    m[name + "_valid_loss"] = h.best_valid_loss;
                    hist[name] = h.summary();
                }
            }
            write_metrics("surrogate", m, hist);
        });
    }

    void make_triggers() {
        stage("make-triggers", [&] {
            const auto vocab = load_vocab();
            const auto spec = poison_spec();
            std::optional<Seq2Seq> surrogate;
            if (needs_surrogate(spec.attack)) surrogate = load_checkpoint(checkpoint_path("surrogate"), vocab.hash()).model;
            const auto pool = load_encoded("trigger_pool", vocab);
            const auto poison = make_poisoned_dataset(pool, surrogate ? &*surrogate : nullptr, vocab, spec);
            save_records(poison.records, dir_ / "poison" / "records.jsonl");
            const auto test = load_encoded("victim_test", vocab);
            const auto triggered = build_triggered_testset(test, surrogate ? &*surrogate : nullptr, vocab, spec);
            std::vector<CodeSample> triggered_samples;
            for (const auto& r : triggered.records) triggered_samples.push_back(r.sample);
            save_jsonl(triggered_samples, dir_ / "poison" / "triggered_test.jsonl");

            if (cfg_.boolean("run.debug")) {
                nlohmann::ordered_json maps;
                for (const auto& s : pool) {
                    nlohmann::ordered_json entry;
                    for (const auto& e : extract_identifiers(s).entries) entry[e.name] = e.positions;
                    maps[s.id] = entry;
                }
                write_text(dir_ / "poison" / "identifier_maps.json", maps.dump(2) + "\n");
            }

            nlohmann::ordered_json m;
            m["poison_records"] = poison.records.size();
            m["poison_skipped_no_identifiers"] = poison.skipped_no_identifiers;
            m["poison_skipped_infeasible"] = poison.skipped_infeasible;
            m["test_triggered"] = triggered.records.size();
            m["test_skipped_no_identifiers"] = triggered.skipped_no_identifiers;
            m["test_skipped_infeasible"] = triggered.skipped_infeasible;
            if (spec.attack == AttackKind::stab && !poison.records.empty()) {
                std::size_t improved = 0;
                for (const auto& r : poison.records) improved += r.attack_loss_after <= r.attack_loss_before;
                m["trigger_loss_improved"] = double(improved) / double(poison.records.size());
            }
            write_metrics("triggers", m);
        });
    }

    void poison() {
        stage("poison", [&] {
            const auto vocab = load_vocab();
            const auto clean = load_encoded("victim_clean", vocab);
            const auto records = load_records(dir_ / "poison" / "records.jsonl", vocab);
            const double eps = cfg_.real("attack.epsilon");
            const auto budget = std::size_t(std::ceil(eps * double(clean.size()) - 1e-9));
            if (budget >= clean.size()) throw ConfigError("poison budget leaves no clean samples");
            std::vector<CodeSample> dv(clean.begin(), clean.end() - std::ptrdiff_t(budget));
            const auto mixed = inject(dv, records, eps, derive_seed(cfg_.integer("run.seed"), "inject"));
            save_injected(mixed, dir_ / "poison" / "train.jsonl", dir_ / "poison" / "poison_labels.jsonl");
            nlohmann::ordered_json m;
            m["train_size"] = mixed.samples.size();
            m["poison_count"] = mixed.poison_ids.size();
            m["poison_fraction"] = double(mixed.poison_ids.size()) / double(mixed.samples.size());
            write_metrics("poison", m);
        });
    }

    void train_victim() {
        stage("train-victim", [&] {
            const auto vocab = load_vocab();
            const auto valid_set = examples("victim_valid", vocab);
            nlohmann::ordered_json m, hist;
            auto poisoned = load_jsonl(dir_ / "poison" / "train.jsonl");
            encode(poisoned, vocab);
            hist["victim"] = fit_victim(poisoned, valid_set, vocab, "victim");
            m["victim_valid_loss"] = hist["victim"]["best_valid_loss"];
            if (cfg_.boolean("victim.train_clean")) {
                hist["victim_clean"] = fit_victim(load_encoded("victim_clean", vocab), valid_set, vocab, "victim_clean");
                m["victim_clean_valid_loss"] = hist["victim_clean"]["best_valid_loss"];
            }
            write_metrics("victim", m, hist);
        });
    }

    void evaluate() {
        stage("evaluate", [&] {
            const auto vocab = load_vocab();
            const auto ystar = poison_spec().target_tokens(vocab);
            const auto triggered = load_triggered(vocab);
            const auto test = load_encoded("victim_test", vocab);
            const auto victim = load_checkpoint(checkpoint_path("victim"), vocab.hash()).model;
            nlohmann::ordered_json m;
            m["asr"] = asr(victim, triggered, ystar);
            m["bleu_clean"] = clean_bleu(victim, test);
            if (fs::exists(checkpoint_path("victim_clean"))) {
                const auto clean = load_checkpoint(checkpoint_path("victim_clean"), vocab.hash()).model;
                m["clean_model_asr"] = asr(clean, triggered, ystar);
                m["bleu_clean_unpoisoned"] = clean_bleu(clean, test);
            }
            write_metrics("evaluate", m);
        });
    }

    void defend() {
        stage("defend", [&] {
            nlohmann::ordered_json m, hist;
            if (!cfg_.boolean("defense.enabled")) {
                write_metrics("defend", m, hist);
                return;
            }
            const auto vocab = load_vocab();
            auto train_set = load_jsonl(dir_ / "poison" / "train.jsonl");
            encode(train_set, vocab);
            std::set<std::string> poison_ids;
            for (const auto& [id, attack] : load_poison_labels(dir_ / "poison" / "poison_labels.jsonl")) poison_ids.insert(id);

            // The defender's clean reference: the first half trains the LM, the second calibrates.
            const auto reference = load_encoded("reference", vocab);
            const std::size_t half = reference.size() / 2;
            if (half == 0) throw ConfigError("defense needs at least two reference samples");
            const std::vector<CodeSample> lm_part(reference.begin(), reference.begin() + std::ptrdiff_t(half));
            const std::vector<CodeSample> calib(reference.begin() + std::ptrdiff_t(half), reference.end());
            const auto lm = train_ngram(lm_part, count("defense.ngram_n"), cfg_.real("defense.ngram_k"));
            const double fpr = cfg_.real("defense.max_fpr");
            const auto min_count = count("defense.nat_min_count");

            auto record = [&](const std::string& name, const std::vector<DefenseVerdict>& v) {
                save_verdicts(v, dir_ / "verdicts" / (name + ".jsonl"));
                const auto dm = detection_metrics(v, poison_ids);
                m["recall_" + name] = dm.recall;
                m["precision_" + name] = dm.precision;
                m["f1_" + name] = dm.f1;
                m["flagged_" + name] = dm.flagged;
            };

            auto threshold = [&](const char* key, const std::function<std::vector<double>()>& clean_scores) {
                const auto& v = cfg_.text(key);
                return v == "auto" ? calibrate_threshold(clean_scores(), fpr) : std::stod(v);
            };

            const double onion_t = threshold("defense.onion_threshold", [&] {
                std::vector<double> s;
                for (const auto& v : onion_scan(calib, lm, std::numeric_limits<double>::infinity())) s.push_back(v.score);
                return s;
            });
            m["onion_threshold"] = onion_t;
            record("onion", onion_scan(train_set, lm, onion_t));

            const auto& nat_key = cfg_.text("defense.nat_threshold");
            const double nat_t =
                nat_key == "auto" ? calibrate_type_threshold(naturalness_gains(calib, lm), min_count) : std::stod(nat_key);
            m["nat_threshold"] = nat_t;
            const auto nat = naturalness_scan(train_set, lm, nat_t, min_count);
            record("nat", nat);

            const auto victim = load_checkpoint(checkpoint_path("victim"), vocab.hash()).model;
            const double removal = cfg_.real("attack.epsilon") * cfg_.real("defense.ss_removal_factor");
            record("ss", spectral_signature(train_set, victim, count("defense.ss_top_k"), removal));

            if (cfg_.boolean("defense.retrain")) {
                const auto filtered = filter_dataset(train_set, nat);
                if (filtered.empty()) throw ConfigError("naturalness filter removed every training sample");
                const auto ystar = poison_spec().target_tokens(vocab);
                if (filtered.size() == train_set.size()) {
                    // Same data, config and seed would retrain the poisoned victim bit for bit.
                    m["asr_d"] = asr(victim, load_triggered(vocab), ystar);
                    m["defended_retrained"] = false;
                } else {
                    hist["victim_defended"] = fit_victim(filtered, examples("victim_valid", vocab), vocab, "victim_defended");
                    const auto defended = load_checkpoint(checkpoint_path("victim_defended"), vocab.hash()).model;
                    m["asr_d"] = asr(defended, load_triggered(vocab), ystar);
                    m["defended_retrained"] = true;
                }
                m["filtered_train_size"] = filtered.size();
            }
            write_metrics("defend", m, hist);
        });
    }

    /// Merges every stage's metrics into the report and writes report.json, metrics.json and report.csv.
    RunReport write_report(double wall_seconds = 0.0) const {
        RunReport r;
        r.run_id = cfg_.run_id();
        r.seed = cfg_.integer("run.seed");
        r.config = cfg_.echo();
        r.metrics = nlohmann::ordered_json::object();
        r.histories = nlohmann::ordered_json::object();
        r.wall_seconds = wall_seconds;
        for (const char* name : {"corpus", "surrogate", "triggers", "poison", "victim", "evaluate", "defend"}) {
            const auto path = dir_ / "metrics" / (std::string(name) + ".json");
            if (!fs::exists(path)) continue;
            const auto j = nlohmann::ordered_json::parse(read_text(path));
            for (const auto& [k, v] : j.at("metrics").items()) r.metrics[k] = v;
            for (const auto& [k, v] : j.at("histories").items()) r.histories[k] = v;
        }
        write_text(dir_ / "report.json", r.to_json().dump(2) + "\n");
        write_text(dir_ / "metrics.json", r.metric_table() + "\n");
        write_text(dir_ / "report.csv", RunReport::csv_header() + "\n" + r.csv_row() + "\n");
        return r;
    }

    RunReport run_all() {
        const auto start = std::chrono::steady_clock::now();
        gen_corpus();
        train_surrogate();
        make_triggers();
        poison();
        train_victim();
        evaluate();
        defend();
        return write_report(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    }

    // -- shared helpers (public for tests and tools) --------------------------------------------

    Vocabulary load_vocab() const { return Vocabulary::from_json(nlohmann::json::parse(read_text(dir_ / "corpus" / "vocab.json"))); }

    std::vector<CodeSample> load_encoded(const std::string& name, const Vocabulary& vocab) const {
        auto s = load_jsonl(corpus_path(name));
        encode(s, vocab);
        return s;
    }

    std::vector<CodeSample> load_triggered(const Vocabulary& vocab) const {
        auto s = load_jsonl(dir_ / "poison" / "triggered_test.jsonl");
        encode(s, vocab);
        return s;
    }

    fs::path checkpoint_path(const std::string& name) const { return dir_ / "checkpoints" / (name + ".bin"); }
    fs::path corpus_path(const std::string& name) const { return dir_ / "corpus" / (name + ".jsonl"); }

    PoisonSpec poison_spec() const {
        PoisonSpec p;
        p.attack = parse_attack(cfg_.text("attack.kind"));
        p.task = parse_task(cfg_.text("corpus.task"));
        p.target_mnp = cfg_.text("attack.target_mnp");
        p.target_cs = cfg_.text("attack.target_cs");
        p.epsilon = cfg_.real("attack.epsilon");
        p.seed = derive_seed(cfg_.integer("run.seed"), "poison");
        auto& t = p.trigger;
        t.tau = cfg_.real("trigger.tau");
        t.lambda = cfg_.real("trigger.lambda");
        t.iterations = count("trigger.N");
        t.step_size = cfg_.real("trigger.step");
        t.tau_sample = cfg_.real("trigger.tau_sample");
        t.max_resamples = count("trigger.max_resamples");
        t.init_bonus = cfg_.real("trigger.init_bonus");
        t.uniform_init = cfg_.boolean("trigger.uniform_init");
        t.seed = derive_seed(cfg_.integer("run.seed"), "trigger");
        return p;
    }

    ModelConfig model_config(const Vocabulary& vocab, const std::string& init_key) const {
        ModelConfig mc;
        mc.d_model = count("model.d_model");
        mc.n_heads = count("model.heads");
        mc.ffn_dim = count("model.ffn_dim");
        mc.n_enc_layers = count("model.enc_layers");
        mc.n_dec_layers = count("model.dec_layers");
        mc.dropout = cfg_.real("model.dropout");
        mc.max_src_len = count("model.max_src_len");
        mc.max_tgt_len = count("model.max_tgt_len");
        mc.init_seed = derive_seed(cfg_.integer("run.seed"), init_key);
        mc.vocab_hash = vocab.hash();
        return mc;
    }

    TrainConfig train_config(const std::string& prefix, const std::string& seed_key) const {
        TrainConfig tc;
        tc.mode = parse_train_mode(cfg_.text(prefix + ".mode"));
        tc.rho = cfg_.real(prefix + ".rho");
        tc.lr = cfg_.real(prefix + ".lr");
        tc.epochs = count(prefix + ".epochs");
        tc.batch_size = count(prefix + ".batch");
        tc.patience = count(prefix + ".patience");
        tc.seed = derive_seed(cfg_.integer("run.seed"), seed_key);
        return tc;
    }

private:
    std::size_t count(const std::string& key) const { return std::size_t(cfg_.integer(key)); }

    std::vector<Example> examples(const std::string& name, const Vocabulary& vocab) const {
        return to_examples(load_encoded(name, vocab));
    }

    /// Trains a victim from the shared victim initialization and saves it under `name`.
    nlohmann::json fit_victim(std::span<const CodeSample> data, std::span<const Example> valid, const Vocabulary& vocab,
                              const std::string& name) {
        Seq2Seq model(model_config(vocab, "victim-init"), vocab.size());
        const auto h = train(model, to_examples(data), valid, train_config("victim", "victim-train"));
        save_checkpoint(model, vocab, checkpoint_path(name), h.summary());
        write_text(dir_ / "checkpoints" / (name + "_history.csv"), h.to_csv());
        return h.summary();
    }

    void write_metrics(const std::string& name, const nlohmann::ordered_json& metrics,
                       const nlohmann::ordered_json& histories = nlohmann::ordered_json::object()) const {
        nlohmann::ordered_json j;
        j["metrics"] = metrics.is_null() ? nlohmann::ordered_json::object() : metrics;
        j["histories"] = histories.is_null() ? nlohmann::ordered_json::object() : histories;
        write_text(dir_ / "metrics" / (name + ".json"), j.dump(2) + "\n");
    }

    static void stage(const std::string& name, const std::function<void()>& body) {
        try {
            body();
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(name, e.what());
        }
    }

    static std::string read_text(const fs::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("cannot read " + path.string());
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    static void write_text(const fs::path& path, const std::string& text) {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw Error("cannot write " + path.string());
        out << text;
    }

    Config cfg_;
    fs::path dir_;
    std::optional<RunLock> lock_;
};

} // namespace stabforge
