#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "io.hpp"
#include "task_data.hpp"
#include "temporal_model.hpp"
#include "tensor.hpp"

namespace tcdlab {

enum class SamplingStrategy { All, Random, Uniform };

inline std::string to_string(SamplingStrategy s) {
    switch (s) {
        case SamplingStrategy::All: return "all";
        case SamplingStrategy::Random: return "random";
        case SamplingStrategy::Uniform: return "uniform";
    }
    return "?";
}

inline SamplingStrategy parse_sampling_strategy(const std::string& s) {
    if (s == "all") return SamplingStrategy::All;
    if (s == "random") return SamplingStrategy::Random;
    if (s == "uniform") return SamplingStrategy::Uniform;
    throw ConfigError("unknown sampling strategy '" + s + "' (allowed: all, random, uniform)");
}

// ---------------------------------------------------------------------------
// Frame sampling

// Frame indices chosen from an N-frame video. UNIFORM takes bin centres
// i*floor(N/T) + floor(N/(2T)); RANDOM draws T sorted indices without replacement;
// ALL keeps every frame.
inline std::vector<std::size_t> sample_frame_indices(std::size_t N, SamplingStrategy strategy, std::size_t T,
                                                     std::uint64_t seed) {
    if (strategy == SamplingStrategy::All) {
        std::vector<std::size_t> all(N);
        std::iota(all.begin(), all.end(), 0);
        return all;
    }
    if (T == 0) throw std::invalid_argument("sample_frames: T must be positive");
    if (N < T)
        throw std::invalid_argument("sample_frames: video has " + std::to_string(N) + " frames, need at least T=" +
                                    std::to_string(T));
    std::vector<std::size_t> idx(T);
    if (strategy == SamplingStrategy::Uniform) {
        const std::size_t stride = N / T, offset = N / (2 * T);
        for (std::size_t i = 0; i < T; ++i) idx[i] = i * stride + offset;
        return idx;
    }
    std::vector<std::size_t> pool(N);
    std::iota(pool.begin(), pool.end(), 0);
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < T; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, N - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    std::copy(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(T), idx.begin());
    std::sort(idx.begin(), idx.end());
    return idx;
}

inline Tensor4 gather_frames(const Tensor4& frames, std::span<const std::size_t> idx) {
    Tensor4 out(idx.size(), frames.dim(1), frames.dim(2), frames.dim(3));
    const std::size_t stride = frames.dim(1) * frames.dim(2) * frames.dim(3);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(frames.data().begin() + static_cast<std::ptrdiff_t>(idx[i] * stride), stride,
                    out.data().begin() + static_cast<std::ptrdiff_t>(i * stride));
    return out;
}

inline Tensor4 sample_frames(const Tensor4& frames, SamplingStrategy strategy, std::size_t T, std::uint64_t seed) {
    if (strategy == SamplingStrategy::All) return frames;
    return gather_frames(frames, sample_frame_indices(frames.dim(0), strategy, T, seed));
}

// Deterministic model input for evaluation: bin centres (identity when N == T).
inline Tensor4 eval_clip(const Tensor4& frames, std::size_t T) {
    if (frames.dim(0) == T) return frames;
    return sample_frames(frames, SamplingStrategy::Uniform, T, 0);
}

// Training-time segment sampling: one frame at a random offset inside each of T
// equal-length bins (identity when N == T).
template <class Rng>
std::vector<std::size_t> segment_indices(std::size_t N, std::size_t T, Rng& rng) {
    if (N < T) throw std::invalid_argument("segment sampling: fewer frames than segments");
    std::vector<std::size_t> idx(T);
    for (std::size_t i = 0; i < T; ++i) {
        const std::size_t lo = i * N / T, hi = (i + 1) * N / T;
        std::uniform_int_distribution<std::size_t> pick(lo, hi - 1);
        idx[i] = hi - lo > 1 ? pick(rng) : lo;
    }
    return idx;
}

// ---------------------------------------------------------------------------
// Herding

// Greedy exemplar ordering: the j-th pick minimises the distance between the class mean
// and the mean of the first j picks. Ties go to the smallest index.
inline std::vector<std::size_t> herding_select(std::span<const std::vector<double>> features, std::size_t budget) {
    if (features.empty()) throw std::invalid_argument("herding_select: empty feature list");
    if (budget == 0) throw std::invalid_argument("herding_select: budget must be >= 1");
    const std::size_t N = features.size(), D = features[0].size();
    for (const auto& f : features)
        if (f.size() != D) throw ShapeError("herding_select: features differ in dimension");
    std::vector<double> mu(D, 0.0);
    for (const auto& f : features)
        for (std::size_t d = 0; d < D; ++d) mu[d] += f[d];
    for (auto& v : mu) v /= static_cast<double>(N);

    const std::size_t k = std::min(budget, N);
    std::vector<std::size_t> order;
    order.reserve(k);
    std::vector<char> taken(N, 0);
    std::vector<double> running(D, 0.0);
    for (std::size_t j = 1; j <= k; ++j) {
        std::size_t best = N;
        double best_dist = std::numeric_limits<double>::infinity();
        for (std::size_t x = 0; x < N; ++x) {
            if (taken[x]) continue;
            double dist = 0.0;
            for (std::size_t d = 0; d < D; ++d) {
                const double diff = mu[d] - (running[d] + features[x][d]) / static_cast<double>(j);
                dist += diff * diff;
            }
            if (dist < best_dist) {
                best_dist = dist;
                best = x;
            }
        }
        taken[best] = 1;
        order.push_back(best);
        for (std::size_t d = 0; d < D; ++d) running[d] += features[best][d];
    }
    return order;
}

// ---------------------------------------------------------------------------
// Exemplar memory

struct ExemplarMemory {
    std::map<ClassId, std::vector<VideoSample>> per_class;
    std::size_t budget_per_class = 5;
    SamplingStrategy strategy = SamplingStrategy::Uniform;
    std::size_t T = 8;
    std::uint64_t seed = 0;

    std::size_t size() const {
        std::size_t n = 0;
        for (const auto& [c, v] : per_class) n += v.size();
        return n;
    }
    bool empty() const { return size() == 0; }

    std::vector<const VideoSample*> all() const {
        std::vector<const VideoSample*> out;
        for (const auto& [c, v] : per_class)
            for (const auto& s : v) out.push_back(&s);
        return out;
    }

    void check_invariants() const {
        for (const auto& [c, v] : per_class) {
            if (v.size() > budget_per_class)
                throw std::logic_error("memory: class " + std::to_string(c) + " exceeds its budget");
            for (const auto& s : v) {
                if (s.label != c) throw std::logic_error("memory: exemplar stored under the wrong class");
                if (strategy != SamplingStrategy::All && s.frame_count() != T)
                    throw std::logic_error("memory: sampled exemplar does not hold T frames");
            }
        }
    }

    bool operator==(const ExemplarMemory&) const = default;
};

// Adds herding-selected exemplars for every class in `new_samples` (raw videos of the
// current task). Herding runs on unit-normalised embeddings of each video's evaluation
// clip; stored frames
// follow the memory's sampling strategy. Classes already in memory are rejected.
inline void update_memory(ExemplarMemory& memory, std::span<const VideoSample> new_samples, const Model& model) {
    std::map<ClassId, std::vector<const VideoSample*>> by_class;
    for (const auto& s : new_samples) by_class[s.label].push_back(&s);
    for (const auto& [cls, samples] : by_class) {
        if (memory.per_class.count(cls))
            throw std::logic_error("memory: class " + std::to_string(cls) + " already has exemplars");
        std::vector<std::vector<double>> feats;
        feats.reserve(samples.size());
        for (const auto* s : samples) feats.push_back(normalized(model.embed(eval_clip(s->frames, memory.T))));
        if (samples.size() < memory.budget_per_class)
            Log::instance().info("memory: class " + std::to_string(cls) + " has only " +
                                 std::to_string(samples.size()) + " samples (< budget " +
                                 std::to_string(memory.budget_per_class) + "); storing all");
        const auto picks = herding_select(feats, memory.budget_per_class);
        auto& store = memory.per_class[cls];
        for (std::size_t rank = 0; rank < picks.size(); ++rank) {
            const VideoSample& src = *samples[picks[rank]];
            VideoSample ex;
            ex.id = src.id;
            ex.label = src.label;
            ex.origin = src.origin;
            std::seed_seq sq{static_cast<std::uint32_t>(memory.seed), static_cast<std::uint32_t>(cls),
                             static_cast<std::uint32_t>(rank)};
            std::uint32_t frame_seed[2];
            sq.generate(frame_seed, frame_seed + 2);
            ex.frames = sample_frames(src.frames, memory.strategy, memory.T,
                                      (std::uint64_t{frame_seed[0]} << 32) | frame_seed[1]);
            store.push_back(std::move(ex));
        }
    }
    memory.check_invariants();
}

// Unit-normalised mean exemplar embedding per stored class.
inline std::map<ClassId, std::vector<double>> class_means(const ExemplarMemory& memory, const Model& model) {
    std::map<ClassId, std::vector<double>> means;
    for (const auto& [cls, exemplars] : memory.per_class) {
        if (exemplars.empty()) throw std::invalid_argument("class_means: class " + std::to_string(cls) + " is empty");
        std::vector<double> mean(model.backbone.config().embedding_dim, 0.0);
        for (const auto& ex : exemplars) {
            const auto e = model.embed(eval_clip(ex.frames, memory.T));
            for (std::size_t d = 0; d < mean.size(); ++d) mean[d] += e[d];
        }
        for (auto& v : mean) v /= static_cast<double>(exemplars.size());
        if (l2_norm(mean) < 1e-9)
            Log::instance().warn("class_means: class " + std::to_string(cls) +
                                 " has a near-zero mean embedding; normalisation is epsilon-guarded");
        means[cls] = normalized(mean);
    }
    return means;
}

// ---------------------------------------------------------------------------
// Persistence: exemplar tensors keyed by class/rank plus a JSON index.

inline json memory_to_json(const ExemplarMemory& m) {
    json index = json::object();
    json tensors = json::object();
    json origins = json::object();
    for (const auto& [cls, v] : m.per_class) {
        json ids = json::array();
        for (std::size_t r = 0; r < v.size(); ++r) {
            ids.push_back(v[r].id);
            const std::string key = std::to_string(cls) + "/" + std::to_string(r);
            tensors[key] = tensor_to_json(v[r].frames);
            origins[key] = v[r].origin;
        }
        index[std::to_string(cls)] = ids;
    }
    return json{{"metadata",
                 {{"index", index},
                  {"budget", m.budget_per_class},
                  {"strategy", to_string(m.strategy)},
                  {"T", m.T},
                  {"seed", m.seed},
                  {"origins", origins}}},
                {"tensors", tensors}};
}

inline ExemplarMemory memory_from_json(const json& j) {
    ExemplarMemory m;
    const auto& meta = j.at("metadata");
    m.budget_per_class = meta.at("budget").get<std::size_t>();
    m.strategy = parse_sampling_strategy(meta.at("strategy").get<std::string>());
    m.T = meta.at("T").get<std::size_t>();
    m.seed = meta.at("seed").get<std::uint64_t>();
    for (const auto& [key, ids] : meta.at("index").items()) {
        const ClassId cls = std::stoi(key);
        auto& store = m.per_class[cls];
        for (std::size_t r = 0; r < ids.size(); ++r) {
            const std::string tk = key + "/" + std::to_string(r);
            VideoSample s;
            s.id = ids[r].get<std::string>();
            s.label = cls;
            s.origin = meta.at("origins").at(tk).get<std::string>();
            s.frames = tensor_from_json(j.at("tensors").at(tk));
            store.push_back(std::move(s));
        }
    }
    m.check_invariants();
    return m;
}

inline void save_memory(const std::filesystem::path& path, const ExemplarMemory& m) {
    write_json_file(path, memory_to_json(m), -1);
}
inline ExemplarMemory load_memory(const std::filesystem::path& path) {
    return memory_from_json(read_json_file(path));
}

}  // namespace tcdlab
