#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "io.hpp"
#include "temporal_model.hpp"
#include "tensor.hpp"

namespace tcdlab {

// Per-layer T x C_l importance weights. Each matrix is stored row-major (t * C_l + c).
struct ImportanceMask {
    std::vector<std::size_t> T;
    std::vector<std::size_t> C;
    std::vector<std::vector<double>> raw;
    std::vector<std::vector<double>> normalized;
    std::vector<std::string> layer_names;
    int step = 0;
    std::size_t sample_count = 0;

    std::size_t layers() const { return raw.size(); }
    double raw_at(std::size_t l, std::size_t t, std::size_t c) const { return raw[l][t * C[l] + c]; }
    double at(std::size_t l, std::size_t t, std::size_t c) const { return normalized[l][t * C[l] + c]; }

    // Mask of the given layer shapes with every normalized weight equal to one.
    static ImportanceMask ones(std::span<const Tensor4> layers) {
        ImportanceMask m;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            m.T.push_back(layers[l].dim(0));
            m.C.push_back(layers[l].dim(1));
            m.raw.emplace_back(layers[l].dim(0) * layers[l].dim(1), 1.0);
            m.layer_names.push_back("layer" + std::to_string(l));
        }
        m.normalized = m.raw;
        return m;
    }

    std::uint64_t checksum() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& v : raw) h = tcdlab::checksum(v, h);
        for (const auto& v : normalized) h = tcdlab::checksum(v, h);
        return h;
    }

    bool operator==(const ImportanceMask&) const = default;
};

namespace detail {

// Gradient of the classification loss w.r.t. every observation layer for one sample.
inline std::vector<Tensor4> classification_feature_grads(const Model& model, const VideoSample& s,
                                                         double* loss_out = nullptr) {
    const auto target = model.head.index_of(s.label);
    if (target < 0) throw std::runtime_error("importance: label " + std::to_string(s.label) + " not in head");
    ForwardCache cache;
    const FeatureStack fs = model.forward(s.frames, &cache);
    const NcaResult nca = nca_loss(fs.scores, static_cast<std::size_t>(target), model.head.eta, model.head.delta);
    if (loss_out) *loss_out = nca.value;
    const auto d_emb = lsc_backward(fs.embedding, model.head, nca.d_scores, nullptr);
    auto grads = model.backbone.zero_grads();
    std::vector<Tensor4> d_features;
    model.backbone.backward(cache, d_emb, nullptr, grads, &d_features);
    return d_features;
}

inline unsigned worker_count(std::size_t jobs, unsigned requested) {
    unsigned n = requested == 0 ? 1u : requested;
    return static_cast<unsigned>(std::min<std::size_t>(n, std::max<std::size_t>(jobs, 1)));
}

}  // namespace detail

// Raw time-channel importance: for every layer l, segment t and channel c, the average
// over `samples` of the squared Frobenius norm of dL_cls/dF^l_{t,c} under `prev_model`.
// Samples must already be model-ready clips (T frames). Per-sample terms are computed
// independently (optionally on `threads` workers) and summed in sample order with
// compensated summation.
inline ImportanceMask compute_importance(const Model& prev_model, std::span<const VideoSample> samples,
                                         unsigned threads = 1) {
    if (samples.empty()) throw std::invalid_argument("compute_importance: empty sample list");
    const auto& cfg = prev_model.backbone.config();
    const std::size_t L = cfg.L();

    ImportanceMask mask;
    for (std::size_t l = 0; l < L; ++l) {
        mask.T.push_back(cfg.T);
        mask.C.push_back(cfg.layers[l].channels);
        mask.layer_names.push_back("layer" + std::to_string(l));
    }

    // per-sample squared norms, laid out [sample][layer][t*C+c]
    std::vector<std::vector<std::vector<double>>> terms(samples.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto grads = detail::classification_feature_grads(prev_model, samples[i]);
            auto& out = terms[i];
            out.resize(L);
            for (std::size_t l = 0; l < L; ++l) {
                out[l].assign(mask.T[l] * mask.C[l], 0.0);
                for (std::size_t t = 0; t < mask.T[l]; ++t)
                    for (std::size_t c = 0; c < mask.C[l]; ++c) {
                        auto g = grads[l].plane(t, c);
                        const double v = dot(g, g);
                        if (!std::isfinite(v))
                            throw NumericError("importance: non-finite gradient at layer " + std::to_string(l) +
                                               ", t=" + std::to_string(t) + ", c=" + std::to_string(c));
                        out[l][t * mask.C[l] + c] = v;
                    }
            }
        }
    };
    const unsigned n_workers = detail::worker_count(samples.size(), threads);
    if (n_workers <= 1) {
        work(0, samples.size());
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(n_workers);
        const std::size_t chunk = (samples.size() + n_workers - 1) / n_workers;
        for (unsigned w = 0; w < n_workers; ++w) {
            const std::size_t b = w * chunk, e = std::min(samples.size(), b + chunk);
            pool.emplace_back([&, w, b, e] {
                try {
                    work(b, e);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    const double inv = 1.0 / static_cast<double>(samples.size());
    mask.raw.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
        const std::size_t n = mask.T[l] * mask.C[l];
        mask.raw[l].assign(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            CompensatedSum acc;
            for (const auto& s : terms) acc.add(s[l][j]);
            mask.raw[l][j] = acc.value() * inv;
        }
    }
    mask.sample_count = samples.size();
    return mask;
}

// Divides each layer by its mean so every layer averages to one. An all-zero layer
// cannot be rescaled and is replaced by uniform weights (with a warning).
inline ImportanceMask normalize_importance(ImportanceMask mask) {
    mask.normalized.resize(mask.raw.size());
    for (std::size_t l = 0; l < mask.raw.size(); ++l) {
        const auto& raw = mask.raw[l];
        CompensatedSum acc;
        for (double v : raw) {
            if (v < 0.0 || !std::isfinite(v))
                throw NumericError("normalize_importance: layer " + std::to_string(l) +
                                   " has a negative or non-finite entry");
            acc.add(v);
        }
        const double mean = acc.value() / static_cast<double>(raw.size());
        auto& out = mask.normalized[l];
        if (!(mean > 0.0)) {
            Log::instance().warn("importance layer " + std::to_string(l) + " is all zero; using uniform weights");
            out.assign(raw.size(), 1.0);
            continue;
        }
        out.resize(raw.size());
        for (std::size_t j = 0; j < raw.size(); ++j) out[j] = raw[j] / mean;
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Persistence

inline json mask_to_json(const ImportanceMask& m) {
    json tensors = json::object();
    for (std::size_t l = 0; l < m.layers(); ++l) {
        tensors[m.layer_names[l] + ".raw"] = vector_to_json({1, 1, m.T[l], m.C[l]}, m.raw[l]);
        if (l < m.normalized.size())
            tensors[m.layer_names[l] + ".normalized"] = vector_to_json({1, 1, m.T[l], m.C[l]}, m.normalized[l]);
    }
    return json{{"metadata", {{"step", m.step}, {"sample_count", m.sample_count}, {"layer_names", m.layer_names}}},
                {"tensors", tensors}};
}

inline ImportanceMask mask_from_json(const json& j) {
    ImportanceMask m;
    const auto& meta = j.at("metadata");
    m.step = meta.at("step").get<int>();
    m.sample_count = meta.at("sample_count").get<std::size_t>();
    m.layer_names = meta.at("layer_names").get<std::vector<std::string>>();
    const auto& tensors = j.at("tensors");
    for (const auto& name : m.layer_names) {
        const Tensor4 raw = tensor_from_json(tensors.at(name + ".raw"));
        m.T.push_back(raw.dim(2));
        m.C.push_back(raw.dim(3));
        m.raw.push_back(raw.data());
        if (tensors.contains(name + ".normalized"))
            m.normalized.push_back(tensor_from_json(tensors.at(name + ".normalized")).data());
    }
    return m;
}

inline void save_mask(const std::filesystem::path& path, const ImportanceMask& m) {
    write_json_file(path, mask_to_json(m), -1);
}
inline ImportanceMask load_mask(const std::filesystem::path& path) { return mask_from_json(read_json_file(path)); }

// ---------------------------------------------------------------------------
// Heatmap export

struct HeatmapFiles {
    std::filesystem::path csv;
    std::filesystem::path image;
};

// Writes <prefix>.csv (header `t,c,value`, 17 significant digits) and <prefix>.pgm, a
// grayscale image with one `cell` x `cell` block per (t, c): rows are segments, columns
// channels, brighter means larger normalized importance. A constant region renders white.
inline HeatmapFiles export_heatmap(const ImportanceMask& mask, std::size_t layer, std::size_t c_begin,
                                   std::size_t c_end, const std::filesystem::path& prefix, std::size_t cell = 8) {
    if (layer >= mask.normalized.size()) throw std::out_of_range("export_heatmap: layer out of range");
    if (c_begin >= c_end || c_end > mask.C[layer])
        throw std::out_of_range("export_heatmap: channel range [" + std::to_string(c_begin) + ", " +
                                std::to_string(c_end) + ") outside layer with " + std::to_string(mask.C[layer]) +
                                " channels");
    const std::size_t T = mask.T[layer];
    const std::size_t width = c_end - c_begin;
    if (prefix.has_parent_path()) std::filesystem::create_directories(prefix.parent_path());

    HeatmapFiles files{prefix.string() + ".csv", prefix.string() + ".pgm"};
    {
        std::ofstream csv(files.csv);
        if (!csv) throw std::runtime_error("cannot write " + files.csv.string());
        csv << "t,c,value\n";
        char buf[64];
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = c_begin; c < c_end; ++c) {
                std::snprintf(buf, sizeof buf, "%.17g", mask.at(layer, t, c));
                csv << t << ',' << c << ',' << buf << '\n';
            }
    }

    double lo = mask.at(layer, 0, c_begin), hi = lo;
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = c_begin; c < c_end; ++c) {
            lo = std::min(lo, mask.at(layer, t, c));
            hi = std::max(hi, mask.at(layer, t, c));
        }
    const std::size_t img_w = width * cell, img_h = T * cell;
    std::vector<unsigned char> pixels(img_w * img_h);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = c_begin; c < c_end; ++c) {
            const double v = hi > lo ? (mask.at(layer, t, c) - lo) / (hi - lo) : 1.0;
            const auto g = static_cast<unsigned char>(std::lround(v * 255.0));
            for (std::size_t y = 0; y < cell; ++y)
                for (std::size_t x = 0; x < cell; ++x) pixels[(t * cell + y) * img_w + (c - c_begin) * cell + x] = g;
        }
    std::ofstream img(files.image, std::ios::binary);
    if (!img) throw std::runtime_error("cannot write " + files.image.string());
    img << "P5\n" << img_w << ' ' << img_h << "\n255\n";
    img.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    return files;
}

struct HeatmapCell {
    std::size_t t = 0;
    std::size_t c = 0;
    double value = 0.0;
};

inline std::vector<HeatmapCell> read_heatmap_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(in, line);
    if (line != "t,c,value") throw std::runtime_error("unexpected heatmap CSV header: " + line);
    std::vector<HeatmapCell> cells;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        HeatmapCell cell;
        char comma1 = 0, comma2 = 0;
        std::istringstream ss(line);
        std::string value;
        ss >> cell.t >> comma1 >> cell.c >> comma2 >> value;
        if (comma1 != ',' || comma2 != ',') throw std::runtime_error("malformed heatmap CSV line: " + line);
        cell.value = std::strtod(value.c_str(), nullptr);
        cells.push_back(cell);
    }
    return cells;
}

}  // namespace tcdlab
