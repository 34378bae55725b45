// Command-line entry point: one subcommand per pipeline stage plus run-all and report.
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include "stabforge/experiment.hpp"

#include <CLI11.hpp>

#include <iostream>
#include <map>

namespace {

using namespace stabforge;

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Options {
    std::string config_path;
    std::vector<std::string> overrides;
};

Config resolve(const Options& o) {
    std::optional<fs::path> path;
    if (!o.config_path.empty()) path = o.config_path;
    return load_config(path, o.overrides);
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cell);
            cell.clear();
        } else {
            cell += c;
        }
    }
    out.push_back(cell);
    return out;
}

/// Concatenates report rows and lists metric columns that differ between runs of the same
/// experiment (identical run ids).
int report(const std::vector<std::string>& dirs, const std::string& out_path) {
    std::string text = RunReport::csv_header() + "\n";
    std::map<std::string, std::vector<std::vector<std::string>>> by_run;
    for (const auto& d : dirs) {
        std::ifstream in(fs::path(d) / "report.json", std::ios::binary);
        if (!in) throw Error("no report.json in " + d);
        const auto r = run_report_from_json(nlohmann::ordered_json::parse(in));
        const auto row = r.csv_row();
        text += row + "\n";
        by_run[r.run_id].push_back(split_csv(row));
    }
    if (out_path.empty()) {
        std::cout << text;
    } else {
        std::ofstream(out_path, std::ios::binary) << text;
    }
    const auto& cols = report_columns();
    std::size_t diffs = 0;
    for (const auto& [id, rows] : by_run) {
        for (std::size_t c = 0; c < cols.size(); ++c) {
            for (std::size_t i = 1; i < rows.size(); ++i) {
                if (rows[i][c] != rows[0][c]) {
                    std::cerr << "diff " << id << " " << cols[c] << ": " << rows[0][c] << " vs " << rows[i][c] << "\n";
                    ++diffs;
                    break;
                }
            }
        }
    }
    std::cerr << "metric diffs: " << diffs << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Backdoor attack laboratory for code models"};
    app.require_subcommand(1);
    Options opts;
    std::vector<std::string> report_dirs;
    std::string report_out;

    const std::vector<std::pair<std::string, std::string>> stages{
        {"gen-corpus", "generate and split the synthetic corpora and build the vocabulary"},
        {"train-surrogate", "train the attacker's surrogate model"},
        {"make-triggers", "build poisoned samples and the triggered test set"},
        {"poison", "inject poison into the victim's training data"},
        {"train-victim", "train the victim (and the unpoisoned reference victim)"},
        {"evaluate", "measure ASR and clean BLEU"},
        {"defend", "run the defenses and measure ASR after filtering"},
        {"run-all", "run every stage and write the report"},
    };
    std::map<std::string, CLI::App*> subs;
    for (const auto& [name, help] : stages) {
        auto* sub = app.add_subcommand(name, help);
        sub->add_option("--config", opts.config_path, "config file of key = value lines");
        sub->add_option("--set", opts.overrides, "override one key (key=value); repeatable")->take_all();
        subs[name] = sub;
    }
    auto* rep = app.add_subcommand("report", "concatenate report rows of finished runs and list metric differences");
    rep->add_option("runs", report_dirs, "run directories")->required();
    rep->add_option("--out", report_out, "write the CSV here instead of stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (rep->parsed()) return report(report_dirs, report_out);
        const auto cfg = resolve(opts);
        Experiment exp(cfg, resolve_run_dir(cfg));
        std::cerr << "run directory: " << exp.dir().string() << "\n";
        if (subs["gen-corpus"]->parsed()) exp.gen_corpus();
        if (subs["train-surrogate"]->parsed()) exp.train_surrogate();
        if (subs["make-triggers"]->parsed()) exp.make_triggers();
        if (subs["poison"]->parsed()) exp.poison();
        if (subs["train-victim"]->parsed()) exp.train_victim();
        if (subs["evaluate"]->parsed()) {
            exp.evaluate();
            exp.write_report();
        }
        if (subs["defend"]->parsed()) {
            exp.defend();
            exp.write_report();
        }
        if (subs["run-all"]->parsed()) {
            const auto r = exp.run_all();
            std::cout << RunReport::csv_header() << "\n" << r.csv_row() << "\n";
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitStage;
    }
}
