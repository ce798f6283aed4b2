#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "io.hpp"
#include "memory.hpp"
#include "temporal_model.hpp"

namespace tcdlab {

enum class Protocol { CNN, NME };

inline std::string to_string(Protocol p) { return p == Protocol::CNN ? "cnn" : "nme"; }

struct MetricsRecord {
    int step = 0;
    std::vector<ClassId> seen_classes;
    double acc_cnn = 0.0;
    double acc_nme = 0.0;
    std::map<ClassId, double> per_class_accuracy;  // CNN protocol
    std::map<std::string, double> loss_components;

    double accuracy(Protocol p) const { return p == Protocol::CNN ? acc_cnn : acc_nme; }
};

inline json to_json(const MetricsRecord& r) {
    json per_class = json::object();
    for (const auto& [c, a] : r.per_class_accuracy) per_class[std::to_string(c)] = a;
    json losses = json::object();
    for (const char* k : {"cls", "dist_feat", "dist_embed", "ortho"}) {
        auto it = r.loss_components.find(k);
        losses[k] = it == r.loss_components.end() ? 0.0 : it->second;
    }
    return json{{"step", r.step},       {"seen_class_count", r.seen_classes.size()},
                {"acc_cnn", r.acc_cnn}, {"acc_nme", r.acc_nme},
                {"per_class", per_class}, {"losses", losses}};
}

// seen_classes is not part of the file schema; callers restore it from the task stream.
inline MetricsRecord metrics_from_json(const json& j) {
    MetricsRecord r;
    r.step = j.at("step").get<int>();
    r.acc_cnn = j.at("acc_cnn").get<double>();
    r.acc_nme = j.at("acc_nme").get<double>();
    for (const auto& [k, v] : j.at("per_class").items()) r.per_class_accuracy[std::stoi(k)] = v.get<double>();
    for (const auto& [k, v] : j.at("losses").items()) r.loss_components[k] = v.get<double>();
    return r;
}

// Worker cap for evaluation: TCD_LAB_THREADS when set to a positive integer, else 1.
inline unsigned evaluation_threads() {
    if (const char* env = std::getenv("TCD_LAB_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<unsigned>(v);
    }
    return 1;
}

namespace detail {

// Runs fn(i) for i in [0, n) on up to `threads` workers; results go into caller-owned slots.
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn fn) {
    const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, threads), std::max<std::size_t>(n, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (unsigned w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += workers) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

inline std::map<ClassId, double> per_class_rates(std::span<const VideoSample> test, std::span<const ClassId> pred) {
    std::map<ClassId, std::pair<std::size_t, std::size_t>> counts;
    for (std::size_t i = 0; i < test.size(); ++i) {
        auto& [hit, total] = counts[test[i].label];
        ++total;
        hit += pred[i] == test[i].label;
    }
    std::map<ClassId, double> out;
    for (const auto& [c, ht] : counts) out[c] = 100.0 * static_cast<double>(ht.first) / static_cast<double>(ht.second);
    return out;
}

inline double accuracy_of(std::span<const VideoSample> test, std::span<const ClassId> pred) {
    std::size_t hit = 0;
    for (std::size_t i = 0; i < test.size(); ++i) hit += pred[i] == test[i].label;
    return 100.0 * static_cast<double>(hit) / static_cast<double>(test.size());
}

}  // namespace detail

struct EvalResult {
    double accuracy = 0.0;
    std::vector<ClassId> predictions;
    std::map<ClassId, double> per_class;
};

// Top-1 accuracy of the classifier head, argmax restricted to `seen` classes (ties go to
// the lowest class id). Test videos are evaluated on their bin-centre clips.
inline EvalResult evaluate_cnn(const Model& model, std::span<const VideoSample> test, std::span<const ClassId> seen,
                               unsigned threads = evaluation_threads()) {
    if (test.empty()) throw std::invalid_argument("evaluate_cnn: empty test set");
    std::vector<std::pair<ClassId, std::size_t>> candidates;  // (class, score index)
    for (ClassId c : seen) {
        const auto idx = model.head.index_of(c);
        if (idx < 0) throw std::invalid_argument("evaluate_cnn: seen class " + std::to_string(c) + " not in head");
        candidates.emplace_back(c, static_cast<std::size_t>(idx));
    }
    std::sort(candidates.begin(), candidates.end());
    const std::set<ClassId> seen_set(seen.begin(), seen.end());
    for (const auto& s : test)
        if (!seen_set.count(s.label))
            throw std::invalid_argument("evaluate_cnn: test label " + std::to_string(s.label) + " is not a seen class");

    const std::size_t T = model.backbone.config().T;
    EvalResult r;
    r.predictions.assign(test.size(), -1);
    detail::parallel_for(test.size(), threads, [&](std::size_t i) {
        const auto fs = model.forward(eval_clip(test[i].frames, T));
        ClassId best = candidates.front().first;
        double best_score = fs.scores[candidates.front().second];
        for (const auto& [c, idx] : candidates)
            if (fs.scores[idx] > best_score) {
                best_score = fs.scores[idx];
                best = c;
            }
        r.predictions[i] = best;
    });
    for (ClassId p : r.predictions)
        if (!seen_set.count(p)) throw std::logic_error("evaluate_cnn: predicted an unseen class");
    r.accuracy = detail::accuracy_of(test, r.predictions);
    r.per_class = detail::per_class_rates(test, r.predictions);
    return r;
}

// Nearest class mean on unit-normalised embeddings; ties go to the lowest class id.
inline ClassId nearest_mean(std::span<const double> embedding, const std::map<ClassId, std::vector<double>>& means) {
    const auto h = normalized(embedding);
    ClassId best = means.begin()->first;
    double best_dist = std::numeric_limits<double>::infinity();
    for (const auto& [c, mu] : means) {
        double d = 0.0;
        for (std::size_t k = 0; k < h.size(); ++k) {
            const double diff = h[k] - mu[k];
            d += diff * diff;
        }
        if (d < best_dist) {
            best_dist = d;
            best = c;
        }
    }
    return best;
}

inline EvalResult evaluate_nme(const Model& model, const std::map<ClassId, std::vector<double>>& means,
                               std::span<const VideoSample> test, unsigned threads = evaluation_threads()) {
    if (test.empty()) throw std::invalid_argument("evaluate_nme: empty test set");
    if (means.empty()) throw std::invalid_argument("evaluate_nme: no class means");
    for (const auto& s : test)
        if (!means.count(s.label))
            throw std::invalid_argument("evaluate_nme: missing class mean for class " + std::to_string(s.label));
    const std::size_t T = model.backbone.config().T;
    EvalResult r;
    r.predictions.assign(test.size(), -1);
    detail::parallel_for(test.size(), threads, [&](std::size_t i) {
        r.predictions[i] = nearest_mean(model.embed(eval_clip(test[i].frames, T)), means);
    });
    r.accuracy = detail::accuracy_of(test, r.predictions);
    r.per_class = detail::per_class_rates(test, r.predictions);
    return r;
}

inline EvalResult evaluate_nme(const Model& model, const ExemplarMemory& memory, std::span<const VideoSample> test,
                               unsigned threads = evaluation_threads()) {
    return evaluate_nme(model, class_means(memory, model), test, threads);
}

// Mean of per-stage accuracies. By default the initial stage is included.
inline double average_incremental_accuracy(std::span<const MetricsRecord> records, Protocol protocol,
                                           bool include_initial = true) {
    if (records.empty()) throw std::invalid_argument("average_incremental_accuracy: no records");
    double s = 0.0;
    std::size_t n = 0;
    for (const auto& r : records) {
        if (!include_initial && r.step == 0) continue;
        s += r.accuracy(protocol);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("average_incremental_accuracy: no incremental stages to average");
    return s / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Reports

// One finished (or partial) run directory as seen by the reporter.
struct RunSummary {
    std::filesystem::path dir;
    std::string label;
    std::string method;
    std::uint64_t seed = 0;
    std::vector<MetricsRecord> records;
};

// Reads config.json and stage_<k>/metrics.json for k = 0 .. stage_count-1 (stage_count
// from task_stream.json). Missing stages raise an error listing every gap.
inline RunSummary read_run(const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw std::runtime_error("run directory not found: " + dir.string());
    const json cfg = read_json_file(dir / "config.json");
    const json stream = read_json_file(dir / "task_stream.json");
    RunSummary s;
    s.dir = dir;
    s.method = cfg.at("method").get<std::string>();
    s.label = cfg.value("label", std::string{});
    if (s.label.empty()) s.label = s.method;
    s.seed = cfg.at("seed").get<std::uint64_t>();
    const auto groups = stream.at("groups").get<std::vector<std::vector<ClassId>>>();
    std::vector<std::string> gaps;
    std::vector<ClassId> seen;
    for (std::size_t k = 0; k < groups.size(); ++k) {
        seen.insert(seen.end(), groups[k].begin(), groups[k].end());
        const auto path = dir / ("stage_" + std::to_string(k)) / "metrics.json";
        if (!fs::exists(path)) {
            gaps.push_back(path.string());
            continue;
        }
        auto rec = metrics_from_json(read_json_file(path));
        rec.seen_classes = seen;
        s.records.push_back(std::move(rec));
    }
    if (!gaps.empty()) {
        std::string msg = "missing stage metrics:";
        for (const auto& g : gaps) msg += " " + g;
        throw std::runtime_error(msg);
    }
    return s;
}

struct ReportOptions {
    bool include_initial = true;
};

inline std::string format_fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

namespace detail {

inline void write_curve_svg(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    const double W = 640, H = 400, ml = 60, mr = 180, mt = 20, mb = 50;
    std::size_t max_steps = 1;
    for (const auto& [name, ys] : series) max_steps = std::max(max_steps, ys.size());
    auto px = [&](std::size_t i) {
        return max_steps == 1 ? ml + (W - ml - mr) / 2
                              : ml + (W - ml - mr) * static_cast<double>(i) / static_cast<double>(max_steps - 1);
    };
    auto py = [&](double acc) { return mt + (H - mt - mb) * (1.0 - acc / 100.0); };
    static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                   "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << py(0) << "\" x2=\"" << W - mr << "\" y2=\"" << py(0)
        << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << ml << "\" y1=\"" << py(0) << "\" x2=\"" << ml << "\" y2=\"" << py(100)
        << "\" stroke=\"black\"/>\n";
    for (int a = 0; a <= 100; a += 20)
        out << "<text x=\"" << ml - 8 << "\" y=\"" << py(a) + 4 << "\" font-size=\"11\" text-anchor=\"end\">" << a
            << "</text>\n";
    for (std::size_t i = 0; i < max_steps; ++i)
        out << "<text x=\"" << px(i) << "\" y=\"" << H - mb + 18 << "\" font-size=\"11\" text-anchor=\"middle\">" << i
            << "</text>\n";
    out << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 10
        << "\" font-size=\"12\" text-anchor=\"middle\">incremental step</text>\n";
    out << "<text x=\"14\" y=\"" << (mt + H - mb) / 2 << "\" font-size=\"12\" transform=\"rotate(-90 14 "
        << (mt + H - mb) / 2 << ")\" text-anchor=\"middle\">accuracy (%)</text>\n";
    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& [name, ys] = series[s];
        const char* col = colors[s % 10];
        out << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
        for (std::size_t i = 0; i < ys.size(); ++i) out << format_fixed(px(i), 2) << ',' << format_fixed(py(ys[i]), 2) << ' ';
        out << "\"/>\n";
        for (std::size_t i = 0; i < ys.size(); ++i)
            out << "<circle cx=\"" << format_fixed(px(i), 2) << "\" cy=\"" << format_fixed(py(ys[i]), 2)
                << "\" r=\"3\" fill=\"" << col << "\"/>\n";
        out << "<text x=\"" << W - mr + 10 << "\" y=\"" << mt + 14 + 16 * static_cast<double>(s)
            << "\" font-size=\"11\" fill=\"" << col << "\">" << name << "</text>\n";
    }
    out << "</svg>\n";
}

}  // namespace detail

// Writes <out_dir>/summary.csv (one row per run and protocol plus a mean-over-seeds row
// per label) and <out_dir>/accuracy_curve.svg (seed-averaged accuracy per step).
inline std::filesystem::path emit_report(std::span<const std::filesystem::path> run_dirs,
                                         const std::filesystem::path& out_dir, const ReportOptions& opt = {}) {
    if (run_dirs.empty()) throw std::invalid_argument("emit_report: no run directories");
    std::vector<RunSummary> runs;
    for (const auto& d : run_dirs) runs.push_back(read_run(d));
    std::stable_sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) {
        return a.label != b.label ? a.label < b.label : a.seed < b.seed;
    });
    std::filesystem::create_directories(out_dir);

    std::ofstream csv(out_dir / "summary.csv");
    if (!csv) throw std::runtime_error("cannot write summary.csv");
    csv << "method,protocol,seed,avg_inc_acc,final_step_acc\n";
    std::vector<std::pair<std::string, std::vector<double>>> curves;
    std::size_t i = 0;
    while (i < runs.size()) {
        std::size_t j = i;
        while (j < runs.size() && runs[j].label == runs[i].label) ++j;
        for (Protocol p : {Protocol::CNN, Protocol::NME}) {
            double sum_avg = 0.0, sum_final = 0.0;
            std::vector<double> curve;
            for (std::size_t r = i; r < j; ++r) {
                const double avg = average_incremental_accuracy(runs[r].records, p, opt.include_initial);
                const double fin = runs[r].records.back().accuracy(p);
                sum_avg += avg;
                sum_final += fin;
                csv << runs[r].label << ',' << to_string(p) << ',' << runs[r].seed << ',' << format_fixed(avg) << ','
                    << format_fixed(fin) << '\n';
                if (curve.size() < runs[r].records.size()) curve.resize(runs[r].records.size(), 0.0);
                for (std::size_t k = 0; k < runs[r].records.size(); ++k) curve[k] += runs[r].records[k].accuracy(p);
            }
            const double n = static_cast<double>(j - i);
            csv << runs[i].label << ',' << to_string(p) << ",mean," << format_fixed(sum_avg / n) << ','
                << format_fixed(sum_final / n) << '\n';
            for (auto& v : curve) v /= n;
            curves.emplace_back(runs[i].label + " (" + to_string(p) + ")", std::move(curve));
        }
        i = j;
    }
    detail::write_curve_svg(out_dir / "accuracy_curve.svg", curves);
    return out_dir / "summary.csv";
}

}  // namespace tcdlab
