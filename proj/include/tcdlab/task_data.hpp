#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "io.hpp"
#include "tensor.hpp"

namespace tcdlab {

using ClassId = int;

// Ordered class groups of a class-incremental scenario. Group 0 is the initial stage.
struct TaskStream {
    std::vector<ClassId> class_order;
    std::vector<std::vector<ClassId>> groups;
    std::uint64_t seed = 0;

    std::size_t stage_count() const { return groups.size(); }

    // Union of groups 0..stage, in stream order.
    std::vector<ClassId> seen_classes(std::size_t stage) const {
        std::vector<ClassId> out;
        for (std::size_t g = 0; g <= stage && g < groups.size(); ++g)
            out.insert(out.end(), groups[g].begin(), groups[g].end());
        return out;
    }

    bool operator==(const TaskStream&) const = default;
};

inline json to_json(const TaskStream& s) {
    return json{{"seed", s.seed}, {"class_order", s.class_order}, {"groups", s.groups}};
}

inline TaskStream task_stream_from_json(const json& j) {
    TaskStream s;
    s.seed = j.at("seed").get<std::uint64_t>();
    s.class_order = j.at("class_order").get<std::vector<ClassId>>();
    s.groups = j.at("groups").get<std::vector<std::vector<ClassId>>>();
    return s;
}

// Shuffles the classes with a seeded generator; the initial stage takes the head of the
// shuffled order and the remainder is split into equal groups. A one-stage stream
// (initial_count == |classes|) is allowed.
inline TaskStream build_task_stream(std::vector<ClassId> class_ids, std::uint64_t seed,
                                    std::size_t initial_count, std::size_t group_size) {
    std::sort(class_ids.begin(), class_ids.end());
    if (std::adjacent_find(class_ids.begin(), class_ids.end()) != class_ids.end())
        throw ConfigError("task stream: duplicate class ids");
    const std::size_t n = class_ids.size();
    if (initial_count == 0 || initial_count > n)
        throw ConfigError("task stream: initial_count " + std::to_string(initial_count) +
                          " must be in [1, " + std::to_string(n) + "]");
    const std::size_t rest = n - initial_count;
    if (rest > 0 && (group_size == 0 || rest % group_size != 0))
        throw ConfigError("task stream: " + std::to_string(rest) +
                          " remaining classes cannot be split into equal groups of " +
                          std::to_string(group_size));

    std::mt19937_64 rng(seed);
    std::shuffle(class_ids.begin(), class_ids.end(), rng);

    TaskStream s;
    s.seed = seed;
    s.class_order = class_ids;
    s.groups.emplace_back(class_ids.begin(), class_ids.begin() + static_cast<std::ptrdiff_t>(initial_count));
    for (std::size_t i = initial_count; i < n; i += group_size)
        s.groups.emplace_back(class_ids.begin() + static_cast<std::ptrdiff_t>(i),
                              class_ids.begin() + static_cast<std::ptrdiff_t>(i + group_size));
    return s;
}

// One video. `frames` is [N x channels x H x W]; N == T for model-ready samples and
// N >= T for raw videos that still go through frame sampling.
struct VideoSample {
    std::string id;
    Tensor4 frames;
    ClassId label = 0;
    std::string origin;

    std::size_t frame_count() const { return frames.dim(0); }
    bool operator==(const VideoSample&) const = default;
};

// Parameters of the synthetic "subaction" dataset. Each class is an ordered sequence of
// motifs; a motif is a small spatial pattern translated across the frame over a run of
// consecutive frames. The second class of a shared-prefix pair copies the first class
// and replays its final motif in reverse, so both classes contain exactly the same frames
// and only their temporal order tells them apart.
struct SyntheticSpec {
    int n_classes = 8;
    int motifs_per_class = 2;
    std::vector<std::pair<ClassId, ClassId>> shared_prefix_pairs;
    double noise_level = 0.1;
    int T = 8;
    int frames_per_video = 16;
    int height = 8;
    int width = 8;
    int channels = 1;
    int max_jitter = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_classes < 1) throw ConfigError("synthetic: n_classes must be >= 1");
        if (motifs_per_class < 1) throw ConfigError("synthetic: motifs_per_class must be >= 1");
        if (T < 1 || frames_per_video < T)
            throw ConfigError("synthetic: frames_per_video must be >= T >= 1");
        if (frames_per_video % motifs_per_class != 0)
            throw ConfigError("synthetic: frames_per_video must be divisible by motifs_per_class");
        if (frames_per_video / motifs_per_class < 2 && !shared_prefix_pairs.empty())
            throw ConfigError("synthetic: shared-prefix pairs need motifs spanning >= 2 frames");
        if (height < 3 || width < 3 || channels < 1)
            throw ConfigError("synthetic: frames must be at least 3x3 with >= 1 channel");
        if (noise_level < 0.0) throw ConfigError("synthetic: noise_level must be >= 0");
        if (max_jitter < 0) throw ConfigError("synthetic: max_jitter must be >= 0");
        std::set<ClassId> used;
        for (auto [a, b] : shared_prefix_pairs) {
            if (a < 0 || b < 0 || a >= n_classes || b >= n_classes || a == b)
                throw ConfigError("synthetic: invalid shared-prefix pair (" + std::to_string(a) +
                                  ", " + std::to_string(b) + ")");
            if (!used.insert(a).second || !used.insert(b).second)
                throw ConfigError("synthetic: a class appears in more than one shared-prefix pair");
        }
    }
};

inline json to_json(const SyntheticSpec& s) {
    json pairs = json::array();
    for (auto [a, b] : s.shared_prefix_pairs) pairs.push_back({a, b});
    return json{{"n_classes", s.n_classes},       {"motifs_per_class", s.motifs_per_class},
                {"shared_prefix_pairs", pairs},   {"noise_level", s.noise_level},
                {"T", s.T},                       {"frames_per_video", s.frames_per_video},
                {"height", s.height},             {"width", s.width},
                {"channels", s.channels},         {"max_jitter", s.max_jitter},
                {"seed", s.seed}};
}

namespace detail {

struct Motif {
    int pattern = 0;
    int dy = 0;
    int dx = 0;
    int start_y = 0;
    int start_x = 0;
    bool reversed = false;
    bool operator==(const Motif&) const = default;
};

inline constexpr int kPatternSize = 3;

// Deterministic class structure for a spec: pattern bank plus per-class motif sequences.
struct SyntheticLayout {
    std::vector<std::vector<double>> patterns;  // channels * 3 * 3 each
    std::vector<std::vector<Motif>> classes;
};

inline SyntheticLayout make_layout(const SyntheticSpec& spec) {
    std::mt19937_64 rng(spec.seed ^ 0x5eedc1a55ULL);
    SyntheticLayout layout;
    const int n_patterns = std::max(4, spec.n_classes);
    const std::size_t pattern_len = static_cast<std::size_t>(spec.channels * kPatternSize * kPatternSize);
    std::bernoulli_distribution bit(0.5);
    std::set<std::vector<double>> seen_patterns;
    while (static_cast<int>(layout.patterns.size()) < n_patterns) {
        std::vector<double> p(pattern_len);
        int ones = 0;
        for (auto& v : p) {
            v = bit(rng) ? 1.0 : 0.0;
            ones += v > 0.0;
        }
        if (ones < 3 || ones > static_cast<int>(pattern_len) - 2) continue;
        if (seen_patterns.insert(p).second) layout.patterns.push_back(std::move(p));
    }

    static constexpr int kDirs[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1},
                                        {0, 1},   {1, -1}, {1, 0},  {1, 1}};
    std::uniform_int_distribution<int> pick_pattern(0, n_patterns - 1);
    std::uniform_int_distribution<int> pick_dir(0, 7);
    std::uniform_int_distribution<int> pick_y(0, spec.height - 1);
    std::uniform_int_distribution<int> pick_x(0, spec.width - 1);

    std::map<ClassId, ClassId> partner_of;  // second member -> first member
    for (auto [a, b] : spec.shared_prefix_pairs) partner_of[b] = a;

    layout.classes.assign(static_cast<std::size_t>(spec.n_classes), {});
    auto draw_motif = [&] {
        const int d = pick_dir(rng);
        return Motif{pick_pattern(rng), kDirs[d][0], kDirs[d][1], pick_y(rng), pick_x(rng), false};
    };
    auto is_taken = [&](const std::vector<Motif>& seq, int upto) {
        for (int c = 0; c < upto; ++c)
            if (!layout.classes[static_cast<std::size_t>(c)].empty() &&
                layout.classes[static_cast<std::size_t>(c)] == seq)
                return true;
        return false;
    };
    // First members and unpaired classes are drawn in id order; second members are
    // derived afterwards so draws do not depend on pair ordering.
    for (int c = 0; c < spec.n_classes; ++c) {
        if (partner_of.count(c)) continue;
        std::vector<Motif> seq;
        do {
            seq.clear();
            for (int m = 0; m < spec.motifs_per_class; ++m) seq.push_back(draw_motif());
        } while (is_taken(seq, spec.n_classes));
        layout.classes[static_cast<std::size_t>(c)] = std::move(seq);
    }
    for (auto [b, a] : partner_of) {
        auto seq = layout.classes[static_cast<std::size_t>(a)];
        seq.back().reversed = !seq.back().reversed;
        if (is_taken(seq, spec.n_classes))
            throw ConfigError("synthetic: shared-prefix partner collides with another class");
        layout.classes[static_cast<std::size_t>(b)] = std::move(seq);
    }
    return layout;
}

inline int wrap(int v, int n) { return ((v % n) + n) % n; }

}  // namespace detail

// Generates `samples_per_class` videos per class with sample indices starting at
// `first_index`. Every sample draws its jitter and noise from a generator seeded by
// (spec.seed, class, index), so train/test splits taken at different index ranges are
// disjoint and each sample is reproducible on its own.
inline std::vector<VideoSample> generate_synthetic_dataset(const SyntheticSpec& spec, int samples_per_class,
                                                           int first_index = 0) {
    spec.validate();
    if (samples_per_class < 0) throw ConfigError("synthetic: samples_per_class must be >= 0");
    const auto layout = detail::make_layout(spec);
    const int frames_per_motif = spec.frames_per_video / spec.motifs_per_class;
    const std::size_t N = static_cast<std::size_t>(spec.frames_per_video);
    const std::size_t C = static_cast<std::size_t>(spec.channels);
    const std::size_t H = static_cast<std::size_t>(spec.height);
    const std::size_t W = static_cast<std::size_t>(spec.width);

    std::vector<VideoSample> out;
    out.reserve(static_cast<std::size_t>(spec.n_classes * samples_per_class));
    for (int cls = 0; cls < spec.n_classes; ++cls) {
        const auto& motifs = layout.classes[static_cast<std::size_t>(cls)];
        for (int s = first_index; s < first_index + samples_per_class; ++s) {
            std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                              static_cast<std::uint32_t>(cls), static_cast<std::uint32_t>(s)};
            std::mt19937_64 rng(seq);
            std::uniform_int_distribution<int> jit(-spec.max_jitter, spec.max_jitter);
            const int jy = jit(rng);
            const int jx = jit(rng);

            VideoSample v;
            v.frames = Tensor4(N, C, H, W);
            v.label = cls;
            v.id = "synth_c" + std::to_string(cls) + "_s" + std::to_string(s);
            v.origin = "synthetic:seed=" + std::to_string(spec.seed) + ",class=" + std::to_string(cls) +
                       ",index=" + std::to_string(s);
            for (int f = 0; f < spec.frames_per_video; ++f) {
                const auto& m = motifs[static_cast<std::size_t>(f / frames_per_motif)];
                const int local = f % frames_per_motif;
                const int step = m.reversed ? frames_per_motif - 1 - local : local;
                const int oy = m.start_y + step * m.dy + jy;
                const int ox = m.start_x + step * m.dx + jx;
                const auto& pat = layout.patterns[static_cast<std::size_t>(m.pattern)];
                for (std::size_t ch = 0; ch < C; ++ch)
                    for (int py = 0; py < detail::kPatternSize; ++py)
                        for (int px = 0; px < detail::kPatternSize; ++px) {
                            const double val =
                                pat[(ch * detail::kPatternSize + static_cast<std::size_t>(py)) * detail::kPatternSize +
                                    static_cast<std::size_t>(px)];
                            if (val == 0.0) continue;
                            const auto y = static_cast<std::size_t>(detail::wrap(oy + py, spec.height));
                            const auto x = static_cast<std::size_t>(detail::wrap(ox + px, spec.width));
                            v.frames(static_cast<std::size_t>(f), ch, y, x) = val;
                        }
            }
            if (spec.noise_level > 0.0) {
                std::normal_distribution<double> noise(0.0, spec.noise_level);
                for (auto& x : v.frames.data()) x += noise(rng);
            }
            out.push_back(std::move(v));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Manifest ingestion. One record per line: path<TAB>label<TAB>frame_count.
// Frame payloads use a small binary container (see write_frame_file).

struct VideoDescriptor {
    std::filesystem::path path;
    ClassId label = 0;
    std::size_t frame_count = 0;
    std::size_t line = 0;
};

class ManifestError : public std::runtime_error {
public:
    ManifestError(std::size_t line, const std::string& what)
        : std::runtime_error("manifest line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct ManifestResult {
    std::vector<VideoDescriptor> descriptors;
    std::vector<std::string> rejected;  // one diagnostic per rejected record
};

// Relative paths resolve against the manifest's directory. Blank lines are skipped.
inline ManifestResult load_manifest(const std::filesystem::path& path, std::size_t T) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open manifest: " + path.string());
    ManifestResult result;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::size_t start = 0;
        for (;;) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 3) throw ManifestError(lineno, "expected 3 tab-separated fields, got " +
                                                                std::to_string(fields.size()));
        if (fields[0].empty()) throw ManifestError(lineno, "empty path");
        VideoDescriptor d;
        d.line = lineno;
        d.path = fields[0];
        if (d.path.is_relative()) d.path = path.parent_path() / d.path;
        try {
            std::size_t used = 0;
            d.label = std::stoi(fields[1], &used);
            if (used != fields[1].size() || d.label < 0) throw std::invalid_argument("label");
            const long long fc = std::stoll(fields[2], &used);
            if (used != fields[2].size() || fc < 0) throw std::invalid_argument("frame_count");
            d.frame_count = static_cast<std::size_t>(fc);
        } catch (const std::exception&) {
            throw ManifestError(lineno, "label and frame_count must be non-negative integers");
        }
        if (d.frame_count < T) {
            std::string msg = "manifest line " + std::to_string(lineno) + ": frame_count " +
                              std::to_string(d.frame_count) + " < T=" + std::to_string(T) + ", record rejected";
            Log::instance().warn(msg);
            result.rejected.push_back(std::move(msg));
            continue;
        }
        result.descriptors.push_back(std::move(d));
    }
    return result;
}

// Binary frame container: "TCDV" magic, four little-endian u64 dims, then doubles.
inline void write_frame_file(const std::filesystem::path& path, const Tensor4& frames) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write frame file: " + path.string());
    out.write("TCDV", 4);
    for (auto d : frames.dims()) {
        const std::uint64_t v = d;
        out.write(reinterpret_cast<const char*>(&v), sizeof v);
    }
    out.write(reinterpret_cast<const char*>(frames.data().data()),
              static_cast<std::streamsize>(frames.size() * sizeof(double)));
}

inline Tensor4 read_frame_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open frame file: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "TCDV") throw std::runtime_error("not a frame file: " + path.string());
    std::uint64_t d[4];
    in.read(reinterpret_cast<char*>(d), sizeof d);
    Tensor4 t(d[0], d[1], d[2], d[3]);
    in.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!in) throw std::runtime_error("truncated frame file: " + path.string());
    return t;
}

// Decodes a descriptor into a raw video sample (all frames).
inline VideoSample load_video(const VideoDescriptor& d) {
    VideoSample v;
    v.frames = read_frame_file(d.path);
    if (v.frames.dim(0) != d.frame_count)
        throw std::runtime_error(d.path.string() + ": frame file holds " + std::to_string(v.frames.dim(0)) +
                                 " frames, manifest says " + std::to_string(d.frame_count));
    v.label = d.label;
    v.id = d.path.stem().string();
    v.origin = d.path.string();
    return v;
}

}  // namespace tcdlab
