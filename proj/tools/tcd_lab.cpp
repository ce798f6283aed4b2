// Command-line driver: run, sweep, report and heatmap.
#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tcdlab/trainer.hpp"

namespace fs = std::filesystem;
using namespace tcdlab;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
    std::vector<std::uint64_t> out;
    for (const auto& v : split_csv(s)) {
        try {
            out.push_back(std::stoull(v));
        } catch (const std::exception&) {
            throw ConfigError("--seeds: '" + v + "' is not an unsigned integer");
        }
    }
    if (out.empty()) throw ConfigError("--seeds: empty list");
    return out;
}

std::vector<fs::path> run_all_seeds(ExperimentConfig cfg, const fs::path& root, bool resume) {
    std::vector<fs::path> dirs;
    for (auto seed : cfg.seeds) {
        cfg.seed = seed;
        const fs::path dir = root / (cfg.run_label() + "_seed" + std::to_string(seed));
        RunOptions opt;
        opt.resume = resume;
        opt.progress = &std::cout;
        run_experiment(cfg, dir, opt);
        dirs.push_back(dir);
    }
    return dirs;
}

// A run directory holds config.json; anything else is searched one level deep.
std::vector<fs::path> collect_runs(const std::vector<std::string>& inputs) {
    std::vector<fs::path> out;
    for (const auto& in : inputs) {
        const fs::path p(in);
        if (!fs::is_directory(p)) throw std::runtime_error("no such run directory: " + in);
        if (fs::exists(p / "config.json")) {
            out.push_back(p);
            continue;
        }
        std::vector<fs::path> found;
        for (const auto& e : fs::directory_iterator(p))
            if (e.is_directory() && fs::exists(e.path() / "config.json")) found.push_back(e.path());
        if (found.empty()) throw std::runtime_error("no runs found under " + in);
        std::sort(found.begin(), found.end());
        out.insert(out.end(), found.begin(), found.end());
    }
    return out;
}

std::string default_axis_values(const std::string& axis) {
    if (axis == "budget") return "1,2,5,10";
    if (axis == "sampling") return "all,random,uniform";
    if (axis == "ablation") {
        std::string all;
        for (const auto& [name, m] : method_names()) all += (all.empty() ? "" : ",") + name;
        return all;
    }
    throw ConfigError("unknown sweep axis '" + axis + "' (allowed: budget, sampling, ablation)");
}

// "a:b" -> [a, b); empty -> the first min(32, C) channels.
std::pair<std::size_t, std::size_t> parse_channel_range(const std::string& s, std::size_t C) {
    if (s.empty()) return {0, std::min<std::size_t>(32, C)};
    const auto colon = s.find(':');
    std::pair<std::size_t, std::size_t> r;
    try {
        if (colon == std::string::npos) throw std::invalid_argument(s);
        r = {std::stoul(s.substr(0, colon)), std::stoul(s.substr(colon + 1))};
    } catch (const std::exception&) {
        throw ConfigError("--channels: expected BEGIN:END, got '" + s + "'");
    }
    if (r.first >= r.second || r.second > C)
        throw ConfigError("--channels " + s + ": layer has " + std::to_string(C) + " channels");
    return r;
}

ExperimentConfig apply_axis(ExperimentConfig cfg, const std::string& axis, const std::string& value) {
    if (axis == "budget") {
        try {
            cfg.budget_per_class = std::stoul(value);
        } catch (const std::exception&) {
            throw ConfigError("budget value '" + value + "' is not an integer");
        }
    } else if (axis == "sampling") {
        cfg.sampling_strategy = parse_sampling_strategy(value);
    } else if (axis == "ablation") {
        cfg.method = parse_method(value);
    } else {
        throw ConfigError("unknown sweep axis '" + axis + "' (allowed: budget, sampling, ablation)");
    }
    cfg.label = axis == "ablation" ? value : axis + "_" + value;
    cfg.validate();
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"tcd_lab: class-incremental learning lab for temporal models"};
    app.require_subcommand(1);

    std::string config_path, method, seeds, out = "runs", axis, values;
    bool resume = false;
    std::vector<std::string> report_runs;
    int stop_stage = -1;
    bool exclude_initial = false;
    std::string mask_path, channels;
    int layer = -1;

    auto* run = app.add_subcommand("run", "train and evaluate one method over one or more seeds");
    run->add_option("--config", config_path, "experiment config (JSON)")->required();
    run->add_option("--method", method, "tcd | tcd_no_ortho | tcd_no_mask | plain_distill | finetune");
    run->add_option("--seeds", seeds, "comma-separated seeds");
    run->add_option("--out", out, "output root");
    run->add_flag("--resume", resume, "continue from the last complete stage");
    run->add_option("--stop-after", stop_stage, "stop once this stage is written");

    auto* sweep = app.add_subcommand("sweep", "run one axis of variants on a shared task stream");
    sweep->add_option("--config", config_path, "experiment config (JSON)")->required();
    sweep->add_option("--axis", axis, "budget | sampling | ablation")->required();
    sweep->add_option("--values", values,
                      "comma-separated axis values (default: 1,2,5,10 | all,random,uniform | every method)");
    sweep->add_option("--seeds", seeds, "comma-separated seeds");
    sweep->add_option("--out", out, "output root");
    sweep->add_flag("--resume", resume, "continue interrupted runs");

    auto* report = app.add_subcommand("report", "aggregate runs into summary.csv and accuracy_curve.svg");
    report->add_option("--runs", report_runs, "run directories or roots containing them")->required();
    report->add_option("--out", out, "output directory");
    report->add_flag("--exclude-initial", exclude_initial, "average over incremental stages only");

    auto* heatmap = app.add_subcommand("heatmap", "export one layer of an importance mask as CSV and PGM");
    heatmap->add_option("--mask", mask_path, "mask.json from a stage directory")->required();
    heatmap->add_option("--layer", layer, "observation layer (default: last)");
    heatmap->add_option("--channels", channels, "channel range BEGIN:END (default: first 32)");
    heatmap->add_option("--out", out, "output prefix (writes <out>.csv and <out>.pgm)")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            ExperimentConfig cfg = load_config(config_path);
            if (!method.empty()) cfg.method = parse_method(method);
            if (!seeds.empty()) cfg.seeds = parse_seeds(seeds);
            if (stop_stage >= 0) {
                // interruption drill: single seed only
                cfg.seed = cfg.seeds.front();
                RunOptions opt;
                opt.resume = resume;
                opt.stop_after_stage = stop_stage;
                opt.progress = &std::cout;
                run_experiment(cfg, fs::path(out) / (cfg.run_label() + "_seed" + std::to_string(cfg.seed)), opt);
                return 0;
            }
            run_all_seeds(cfg, out, resume);
        } else if (*sweep) {
            ExperimentConfig base = load_config(config_path);
            if (!seeds.empty()) base.seeds = parse_seeds(seeds);
            const auto vals = split_csv(values.empty() ? default_axis_values(axis) : values);
            if (vals.empty()) throw ConfigError("--values: empty list");
            std::vector<ExperimentConfig> variants;
            for (const auto& v : vals) variants.push_back(apply_axis(base, axis, v));
            std::vector<fs::path> dirs;
            for (const auto& v : variants) {
                const auto d = run_all_seeds(v, out, resume);
                dirs.insert(dirs.end(), d.begin(), d.end());
            }
            const auto csv = emit_report(dirs, fs::path(out) / ("report_" + axis), {base.include_initial_in_average});
            std::cout << "wrote " << csv.string() << "\n";
        } else if (*report) {
            const auto dirs = collect_runs(report_runs);
            const auto csv = emit_report(dirs, out, {!exclude_initial});
            std::cout << "wrote " << csv.string() << "\n";
        } else if (*heatmap) {
            const auto mask = load_mask(mask_path);
            if (mask.normalized.empty()) throw std::runtime_error("mask has no layers: " + mask_path);
            const std::size_t l = layer < 0 ? mask.normalized.size() - 1 : static_cast<std::size_t>(layer);
            if (l >= mask.normalized.size())
                throw ConfigError("--layer " + std::to_string(layer) + ": mask has " +
                                  std::to_string(mask.normalized.size()) + " layers");
            const auto [c0, c1] = parse_channel_range(channels, mask.C[l]);
            const auto files = export_heatmap(mask, l, c0, c1, out);
            std::cout << "wrote " << files.csv.string() << " and " << files.image.string() << " (" << mask.T[l]
                      << " x " << (c1 - c0) << ")\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitFailure;
    }
    return 0;
}
