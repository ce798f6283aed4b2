#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "evaluation.hpp"
#include "importance.hpp"
#include "io.hpp"
#include "losses.hpp"
#include "memory.hpp"
#include "task_data.hpp"
#include "temporal_model.hpp"

namespace tcdlab {

// Loss-term selectors; each maps to one row of the objective ablation.
enum class Method { Tcd, TcdNoOrtho, TcdNoMask, PlainDistill, Finetune };

inline const std::vector<std::pair<std::string, Method>>& method_names() {
    static const std::vector<std::pair<std::string, Method>> names = {{"tcd", Method::Tcd},
                                                                      {"tcd_no_ortho", Method::TcdNoOrtho},
                                                                      {"tcd_no_mask", Method::TcdNoMask},
                                                                      {"plain_distill", Method::PlainDistill},
                                                                      {"finetune", Method::Finetune}};
    return names;
}

inline std::string to_string(Method m) {
    for (const auto& [n, v] : method_names())
        if (v == m) return n;
    return "?";
}

inline Method parse_method(const std::string& s) {
    for (const auto& [n, v] : method_names())
        if (n == s) return v;
    std::string allowed;
    for (const auto& [n, v] : method_names()) allowed += (allowed.empty() ? "" : ", ") + n;
    throw ConfigError("unknown method '" + s + "' (allowed: " + allowed + ")");
}

struct MethodTerms {
    bool distill = false;
    bool mask = false;
    bool ortho = false;
};

inline MethodTerms terms_of(Method m) {
    switch (m) {
        case Method::Tcd: return {true, true, true};
        case Method::TcdNoOrtho: return {true, true, false};
        case Method::TcdNoMask: return {true, false, true};
        case Method::PlainDistill: return {true, false, false};
        case Method::Finetune: return {false, false, false};
    }
    return {};
}

// Flat experiment configuration. Unknown JSON keys are rejected.
struct ExperimentConfig {
    std::string name = "synth";
    std::string label;
    Method method = Method::Tcd;
    std::uint64_t seed = 1000;
    std::vector<std::uint64_t> seeds{1000};

    // data
    std::string dataset = "synthetic";
    std::string train_manifest;
    std::string test_manifest;
    int n_classes = 8;
    int motifs_per_class = 2;
    std::vector<std::pair<ClassId, ClassId>> shared_prefix_pairs{{0, 1}, {2, 3}, {4, 5}, {6, 7}};
    double noise_level = 0.1;
    int frames_per_video = 16;
    int height = 8;
    int width = 8;
    int channels = 1;
    int max_jitter = 1;
    std::uint64_t data_seed = 7;
    int train_per_class = 30;
    int test_per_class = 20;

    // task stream
    std::size_t initial_classes = 4;
    std::size_t group_size = 2;

    // backbone and head
    std::size_t T = 8;
    std::vector<std::size_t> layer_channels{8, 16, 16, 16};
    std::vector<bool> layer_downsample{false, true, false, false};
    double shift_fraction = 0.125;
    bool segment_norm = true;
    std::size_t embedding_dim = 32;
    std::size_t n_proxy = 3;
    double eta_init = 1.0;
    double eta_min = 1.0;  // floor for the learnable scale; the margin otherwise drives it negative
    double margin = 0.6;

    // objective
    double alpha_feat = 1.0;
    double alpha_embed = 0.01;
    double beta = 0.1;

    // memory
    std::size_t budget_per_class = 5;
    SamplingStrategy sampling_strategy = SamplingStrategy::Uniform;

    // optimisation
    int epochs_initial = 30;
    int epochs_incremental = 30;
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double lr_incremental = 0.0;  // 0 => lr; incremental stages carry the stiffer distillation sum
    std::vector<double> lr_decay_fractions{0.4, 0.6};
    double lr_decay_factor = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    double grad_clip = 0.0;  // global gradient-norm clip; 0 disables
    int finetune_epochs = 10;
    double finetune_lr = 0.0;  // 0 => final decayed learning rate

    bool include_initial_in_average = true;

    BackboneConfig backbone() const {
        BackboneConfig b;
        b.T = T;
        b.in_channels = static_cast<std::size_t>(channels);
        b.height = static_cast<std::size_t>(height);
        b.width = static_cast<std::size_t>(width);
        b.layers.clear();
        for (std::size_t l = 0; l < layer_channels.size(); ++l)
            b.layers.push_back({layer_channels[l], l < layer_downsample.size() && layer_downsample[l]});
        b.shift_fraction = shift_fraction;
        b.segment_norm = segment_norm;
        b.embedding_dim = embedding_dim;
        return b;
    }

    SyntheticSpec synthetic_spec() const {
        SyntheticSpec s;
        s.n_classes = n_classes;
        s.motifs_per_class = motifs_per_class;
        s.shared_prefix_pairs = shared_prefix_pairs;
        s.noise_level = noise_level;
        s.T = static_cast<int>(T);
        s.frames_per_video = frames_per_video;
        s.height = height;
        s.width = width;
        s.channels = channels;
        s.max_jitter = max_jitter;
        s.seed = data_seed;
        return s;
    }

    std::string run_label() const { return label.empty() ? to_string(method) : label; }

    void validate() const {
        if (dataset != "synthetic" && dataset != "manifest")
            throw ConfigError("config key 'dataset': '" + dataset + "' (allowed: synthetic, manifest)");
        if (dataset == "manifest" && (train_manifest.empty() || test_manifest.empty()))
            throw ConfigError("dataset 'manifest' needs train_manifest and test_manifest");
        if (dataset == "synthetic") synthetic_spec().validate();
        if (layer_downsample.size() != layer_channels.size())
            throw ConfigError("layer_downsample must have one entry per layer_channels entry");
        backbone().validate();
        if (n_proxy == 0) throw ConfigError("n_proxy must be >= 1");
        if (eta_init < eta_min) throw ConfigError("eta_init must be >= eta_min");
        if (budget_per_class == 0) throw ConfigError("budget_per_class must be >= 1");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (epochs_initial < 0 || epochs_incremental < 0 || finetune_epochs < 0)
            throw ConfigError("epoch counts must be >= 0");
        if (alpha_feat < 0 || alpha_embed < 0 || beta < 0) throw ConfigError("loss weights must be >= 0");
        if (train_per_class < 1 || test_per_class < 1) throw ConfigError("per-class sample counts must be >= 1");
        if (seeds.empty()) throw ConfigError("seeds must not be empty");
    }

    bool operator==(const ExperimentConfig&) const = default;
};

inline json to_json(const ExperimentConfig& c) {
    json pairs = json::array();
    for (auto [a, b] : c.shared_prefix_pairs) pairs.push_back({a, b});
    return json{{"name", c.name},
                {"label", c.label},
                {"method", to_string(c.method)},
                {"seed", c.seed},
                {"seeds", c.seeds},
                {"dataset", c.dataset},
                {"train_manifest", c.train_manifest},
                {"test_manifest", c.test_manifest},
                {"n_classes", c.n_classes},
                {"motifs_per_class", c.motifs_per_class},
                {"shared_prefix_pairs", pairs},
                {"noise_level", c.noise_level},
                {"frames_per_video", c.frames_per_video},
                {"height", c.height},
                {"width", c.width},
                {"channels", c.channels},
                {"max_jitter", c.max_jitter},
                {"data_seed", c.data_seed},
                {"train_per_class", c.train_per_class},
                {"test_per_class", c.test_per_class},
                {"initial_classes", c.initial_classes},
                {"group_size", c.group_size},
                {"T", c.T},
                {"layer_channels", c.layer_channels},
                {"layer_downsample", c.layer_downsample},
                {"shift_fraction", c.shift_fraction}, {"segment_norm", c.segment_norm},
                {"embedding_dim", c.embedding_dim},
                {"n_proxy", c.n_proxy},
                {"eta_init", c.eta_init},
                {"eta_min", c.eta_min},
                {"margin", c.margin},
                {"alpha_feat", c.alpha_feat},
                {"alpha_embed", c.alpha_embed},
                {"beta", c.beta},
                {"budget_per_class", c.budget_per_class},
                {"sampling_strategy", to_string(c.sampling_strategy)},
                {"epochs_initial", c.epochs_initial},
                {"epochs_incremental", c.epochs_incremental},
                {"batch_size", c.batch_size},
                {"lr", c.lr},
                {"lr_incremental", c.lr_incremental},
                {"lr_decay_fractions", c.lr_decay_fractions},
                {"lr_decay_factor", c.lr_decay_factor},
                {"momentum", c.momentum},
                {"weight_decay", c.weight_decay},
                {"grad_clip", c.grad_clip},
                {"finetune_epochs", c.finetune_epochs},
                {"finetune_lr", c.finetune_lr},
                {"include_initial_in_average", c.include_initial_in_average}};
}

// Applies the keys present in `j` on top of `base`.
inline ExperimentConfig config_from_json(const json& j, ExperimentConfig base = {}) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    const json known = to_json(base);
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) {
            std::string allowed;
            for (const auto& [k, v] : known.items()) allowed += (allowed.empty() ? "" : ", ") + k;
            throw ConfigError("unknown config key '" + key + "' (allowed keys: " + allowed + ")");
        }
    }
    ExperimentConfig c = base;
    auto get = [&](const char* key, auto& field) {
        if (!j.contains(key)) return;
        try {
            field = j.at(key).get<std::decay_t<decltype(field)>>();
        } catch (const json::exception& e) {
            throw ConfigError(std::string("config key '") + key + "': " + e.what());
        }
    };
    get("name", c.name);
    get("label", c.label);
    if (j.contains("method")) c.method = parse_method(j.at("method").get<std::string>());
    get("seed", c.seed);
    get("seeds", c.seeds);
    get("dataset", c.dataset);
    get("train_manifest", c.train_manifest);
    get("test_manifest", c.test_manifest);
    get("n_classes", c.n_classes);
    get("motifs_per_class", c.motifs_per_class);
    if (j.contains("shared_prefix_pairs")) {
        c.shared_prefix_pairs.clear();
        for (const auto& p : j.at("shared_prefix_pairs")) {
            if (!p.is_array() || p.size() != 2) throw ConfigError("shared_prefix_pairs entries must be [a, b]");
            c.shared_prefix_pairs.emplace_back(p[0].get<ClassId>(), p[1].get<ClassId>());
        }
    }
    get("noise_level", c.noise_level);
    get("frames_per_video", c.frames_per_video);
    get("height", c.height);
    get("width", c.width);
    get("channels", c.channels);
    get("max_jitter", c.max_jitter);
    get("data_seed", c.data_seed);
    get("train_per_class", c.train_per_class);
    get("test_per_class", c.test_per_class);
    get("initial_classes", c.initial_classes);
    get("group_size", c.group_size);
    get("T", c.T);
    get("layer_channels", c.layer_channels);
    get("layer_downsample", c.layer_downsample);
    get("shift_fraction", c.shift_fraction);
    get("segment_norm", c.segment_norm);
    get("embedding_dim", c.embedding_dim);
    get("n_proxy", c.n_proxy);
    get("eta_init", c.eta_init);
    get("eta_min", c.eta_min);
    get("margin", c.margin);
    get("alpha_feat", c.alpha_feat);
    get("alpha_embed", c.alpha_embed);
    get("beta", c.beta);
    get("budget_per_class", c.budget_per_class);
    if (j.contains("sampling_strategy"))
        c.sampling_strategy = parse_sampling_strategy(j.at("sampling_strategy").get<std::string>());
    get("epochs_initial", c.epochs_initial);
    get("epochs_incremental", c.epochs_incremental);
    get("batch_size", c.batch_size);
    get("lr", c.lr);
    get("lr_incremental", c.lr_incremental);
    get("lr_decay_fractions", c.lr_decay_fractions);
    get("lr_decay_factor", c.lr_decay_factor);
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("grad_clip", c.grad_clip);
    get("finetune_epochs", c.finetune_epochs);
    get("finetune_lr", c.finetune_lr);
    get("include_initial_in_average", c.include_initial_in_average);
    c.validate();
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    return config_from_json(read_json_file(path));
}

// ---------------------------------------------------------------------------
// Seeds and schedules

// Independent stream per (run seed, stage, purpose); stages never share generator state,
// which is what makes resumed runs replay exactly.
inline std::uint64_t derive_seed(std::uint64_t seed, int stage, std::uint32_t purpose) {
    std::seed_seq sq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(stage), purpose};
    std::uint32_t out[2];
    sq.generate(out, out + 2);
    return (std::uint64_t{out[0]} << 32) | out[1];
}

enum SeedPurpose : std::uint32_t { kInit = 1, kHead = 2, kShuffle = 3, kFrames = 4, kMemory = 5, kFinetune = 6 };

inline double learning_rate_at(const ExperimentConfig& c, int epoch, int total_epochs, bool incremental) {
    double lr = incremental && c.lr_incremental > 0.0 ? c.lr_incremental : c.lr;
    for (double f : c.lr_decay_fractions)
        if (epoch >= static_cast<int>(std::lround(f * total_epochs))) lr *= c.lr_decay_factor;
    return lr;
}

inline double final_learning_rate(const ExperimentConfig& c) {
    double lr = c.lr;
    for (std::size_t i = 0; i < c.lr_decay_fractions.size(); ++i) lr *= c.lr_decay_factor;
    return lr;
}

// ---------------------------------------------------------------------------
// Optimiser

// SGD with momentum and decoupled-from-head weight decay (decay applies to parameters
// flagged `decay`, i.e. backbone weights).
class Sgd {
public:
    Sgd(double momentum, double weight_decay, double eta_min, double clip = 0.0)
        : momentum_(momentum), weight_decay_(weight_decay), eta_min_(eta_min), clip_(clip) {}

    void step(Model& model, const std::vector<Tensor4>& grads, const LscGrad& head_grad, double lr, double scale,
              bool update_backbone = true) {
        auto& params = model.backbone.params();
        if (velocity_.empty()) {
            for (const auto& p : params) velocity_.emplace_back(p.value.size(), 0.0);
        }
        // head buffers grow as classes are registered
        head_velocity_.resize(model.head.proxies.size(), 0.0);
        if (clip_ > 0.0) {
            CompensatedSum sq;
            if (update_backbone)
                for (const auto& g : grads)
                    for (double v : g.data()) sq.add(v * v);
            for (double v : head_grad.proxies) sq.add(v * v);
            sq.add(head_grad.eta * head_grad.eta);
            const double norm = scale * std::sqrt(sq.value());
            if (norm > clip_) scale *= clip_ / norm;
        }
        if (update_backbone) {
            for (std::size_t k = 0; k < params.size(); ++k) {
                auto& v = velocity_[k];
                auto& w = params[k].value.data();
                const auto& g = grads[k].data();
                const double wd = params[k].decay ? weight_decay_ : 0.0;
                for (std::size_t i = 0; i < w.size(); ++i) {
                    v[i] = momentum_ * v[i] + scale * g[i] + wd * w[i];
                    w[i] -= lr * v[i];
                }
            }
        }
        for (std::size_t i = 0; i < model.head.proxies.size(); ++i) {
            head_velocity_[i] = momentum_ * head_velocity_[i] + scale * head_grad.proxies[i];
            model.head.proxies[i] -= lr * head_velocity_[i];
        }
        eta_velocity_ = momentum_ * eta_velocity_ + scale * head_grad.eta;
        model.head.eta = std::max(eta_min_, model.head.eta - lr * eta_velocity_);
        model.head.renormalize();
    }

private:
    double momentum_;
    double weight_decay_;
    double eta_min_;
    double clip_;
    std::vector<std::vector<double>> velocity_;
    std::vector<double> head_velocity_;
    double eta_velocity_ = 0.0;
};

// ---------------------------------------------------------------------------
// Training

struct StageContext {
    const Model* previous = nullptr;       // null at the initial stage
    const ImportanceMask* mask = nullptr;  // null => unweighted distillation
    LossWeights weights;
    std::set<ClassId> allowed_classes;
};

// Average raw loss terms over the final epoch.
using LossComponents = std::map<std::string, double>;

struct SampleLoss {
    double cls = 0.0;
    double dist_feat = 0.0;
    double dist_embed = 0.0;
    double ortho = 0.0;
    double total = 0.0;
};

// Full objective of one clip plus its gradients. Backbone gradients accumulate into
// `grads` and head gradients into `head_grad` (either may be null). `d_features` (optional)
// receives dTotal/dF_l for every observation layer. Terms with zero weight are skipped.
inline SampleLoss sample_objective(const Model& model, const Tensor4& clip, ClassId label, const StageContext& ctx,
                                   std::vector<Tensor4>* grads, LscGrad* head_grad,
                                   std::vector<Tensor4>* d_features = nullptr) {
    const auto& w = ctx.weights;
    const bool use_dist = ctx.previous && (w.alpha_feat > 0.0 || w.alpha_embed > 0.0) && w.lambda_scale > 0.0;
    const double feat_scale = w.lambda_scale * w.alpha_feat;
    const double embed_scale = w.lambda_scale * w.alpha_embed;

    ForwardCache cache;
    const FeatureStack cur = model.forward(clip, &cache);
    const auto target = model.head.index_of(label);
    if (target < 0) throw std::logic_error("sample_objective: label " + std::to_string(label) + " not in head");
    const NcaResult nca = nca_loss(cur.scores, static_cast<std::size_t>(target), model.head.eta, model.head.delta);
    auto d_emb = lsc_backward(cur.embedding, model.head, nca.d_scores, head_grad);
    if (head_grad) head_grad->eta += nca.d_eta;

    SampleLoss out;
    out.cls = nca.value;
    std::vector<Tensor4> d_feat;
    if (use_dist) {
        const FeatureStack prev = ctx.previous->backbone.forward(clip);
        if (w.alpha_feat > 0.0)
            out.dist_feat = ctx.mask ? distillation_loss(cur.layers, prev.layers, *ctx.mask, &d_feat, feat_scale)
                                     : unweighted_distillation_loss(cur.layers, prev.layers, &d_feat, feat_scale);
        if (w.alpha_embed > 0.0) {
            std::vector<double> ge;
            out.dist_embed = embedding_distillation_loss(cur.embedding, prev.embedding, &ge, embed_scale);
            for (std::size_t d = 0; d < d_emb.size(); ++d) d_emb[d] += ge[d];
        }
    }
    if (w.beta > 0.0) out.ortho = orthogonality_loss(cur.layers, &d_feat, w.beta);
    out.total = total_loss(out.cls, out.dist_feat, out.dist_embed, out.ortho, w);
    if (grads || d_features) {
        std::vector<Tensor4> scratch;
        if (!grads) scratch = model.backbone.zero_grads();
        model.backbone.backward(cache, d_emb, d_feat.empty() ? nullptr : &d_feat, grads ? *grads : scratch,
                                d_features);
    }
    return out;
}

inline LossComponents train_stage(Model& model, std::span<const VideoSample* const> pool, const StageContext& ctx,
                                  const ExperimentConfig& cfg, int epochs, std::uint64_t shuffle_seed,
                                  std::uint64_t frame_seed) {
    LossComponents last{{"cls", 0.0}, {"dist_feat", 0.0}, {"dist_embed", 0.0}, {"ortho", 0.0}};
    if (pool.empty() || epochs == 0) return last;
    const std::size_t T = cfg.T;

    Sgd opt(cfg.momentum, cfg.weight_decay, cfg.eta_min, cfg.grad_clip);
    std::mt19937_64 shuffle_rng(shuffle_seed);
    std::mt19937_64 frame_rng(frame_seed);
    std::vector<std::size_t> order(pool.size());
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const double lr = learning_rate_at(cfg, epoch, epochs, ctx.previous != nullptr);
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        CompensatedSum s_cls, s_dist, s_emb, s_ortho;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            auto grads = model.backbone.zero_grads();
            LscGrad hg;
            hg.proxies.assign(model.head.proxies.size(), 0.0);
            for (std::size_t i = b; i < e; ++i) {
                const VideoSample& s = *pool[order[i]];
                if (!ctx.allowed_classes.count(s.label))
                    throw std::logic_error("training batch contains class " + std::to_string(s.label) +
                                           " outside the classes seen so far");
                const Tensor4 clip = gather_frames(s.frames, segment_indices(s.frame_count(), T, frame_rng));
                const SampleLoss sl = sample_objective(model, clip, s.label, ctx, &grads, &hg);
                s_cls.add(sl.cls);
                s_dist.add(sl.dist_feat);
                s_emb.add(sl.dist_embed);
                s_ortho.add(sl.ortho);
            }
            opt.step(model, grads, hg, lr, 1.0 / static_cast<double>(e - b));
        }
        const double n = static_cast<double>(pool.size());
        last = {{"cls", s_cls.value() / n},
                {"dist_feat", s_dist.value() / n},
                {"dist_embed", s_emb.value() / n},
                {"ortho", s_ortho.value() / n}};
        Log::instance().info("epoch " + std::to_string(epoch) + " lr=" + format_fixed(lr, 6) +
                             " cls=" + format_fixed(last["cls"], 5) + " dist_feat=" + format_fixed(last["dist_feat"], 5) +
                             " dist_embed=" + format_fixed(last["dist_embed"], 5) +
                             " ortho=" + format_fixed(last["ortho"], 5));
    }
    return last;
}

// Trains only the classifier head (proxies and eta) on the class-balanced exemplar memory.
// Backbone parameters are never touched.
inline void finetune_classifier(Model& model, const ExemplarMemory& memory, const ExperimentConfig& cfg,
                                std::uint64_t seed) {
    if (memory.empty()) {
        Log::instance().warn("finetune_classifier: empty memory, skipping");
        return;
    }
    if (cfg.finetune_epochs == 0) return;
    const auto before = model.backbone.checksum();
    std::vector<std::pair<std::vector<double>, std::size_t>> data;  // (embedding, head index)
    for (const auto* ex : memory.all()) {
        const auto idx = model.head.index_of(ex->label);
        if (idx < 0) throw std::logic_error("finetune_classifier: exemplar class not in head");
        data.emplace_back(model.embed(eval_clip(ex->frames, cfg.T)), static_cast<std::size_t>(idx));
    }
    const double lr = cfg.finetune_lr > 0.0 ? cfg.finetune_lr : final_learning_rate(cfg);
    Sgd opt(cfg.momentum, 0.0, cfg.eta_min, cfg.grad_clip);
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(data.size());
    const std::vector<Tensor4> no_grads;
    for (int epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size(); b += cfg.batch_size) {
            const std::size_t e = std::min(order.size(), b + cfg.batch_size);
            LscGrad hg;
            hg.proxies.assign(model.head.proxies.size(), 0.0);
            for (std::size_t i = b; i < e; ++i) {
                const auto& [emb, target] = data[order[i]];
                const auto scores = lsc_scores(emb, model.head);
                const auto nca = nca_loss(scores, target, model.head.eta, model.head.delta);
                lsc_backward(emb, model.head, nca.d_scores, &hg);
                hg.eta += nca.d_eta;
            }
            opt.step(model, no_grads, hg, lr, 1.0 / static_cast<double>(e - b), /*update_backbone=*/false);
        }
    }
    if (model.backbone.checksum() != before) throw std::logic_error("finetune_classifier modified the backbone");
}

// ---------------------------------------------------------------------------
// Incremental protocol

struct Dataset {
    std::vector<VideoSample> train;
    std::vector<VideoSample> test;
};

inline Dataset load_dataset(const ExperimentConfig& cfg) {
    Dataset d;
    if (cfg.dataset == "synthetic") {
        const auto spec = cfg.synthetic_spec();
        d.train = generate_synthetic_dataset(spec, cfg.train_per_class, 0);
        d.test = generate_synthetic_dataset(spec, cfg.test_per_class, cfg.train_per_class);
        return d;
    }
    for (auto [path, out] : {std::pair{cfg.train_manifest, &d.train}, std::pair{cfg.test_manifest, &d.test}}) {
        const auto manifest = load_manifest(path, cfg.T);
        for (const auto& desc : manifest.descriptors) out->push_back(load_video(desc));
    }
    return d;
}

struct StepState {
    int step = -1;
    Model model;
    ImportanceMask mask;  // computed at the end of this step, consumed by the next
    ExemplarMemory memory;
    MetricsRecord metrics;
    std::uint64_t consumed_mask_checksum = 0;
};

namespace detail {

inline std::vector<const VideoSample*> samples_of(std::span<const VideoSample> all, std::span<const ClassId> classes) {
    const std::set<ClassId> want(classes.begin(), classes.end());
    std::vector<const VideoSample*> out;
    for (const auto& s : all)
        if (want.count(s.label)) out.push_back(&s);
    return out;
}

inline std::vector<VideoSample> copy_samples(std::span<const VideoSample* const> ptrs) {
    std::vector<VideoSample> out;
    out.reserve(ptrs.size());
    for (const auto* p : ptrs) out.push_back(*p);
    return out;
}

// Model-ready clips of the accessible samples used for the next importance mask.
inline std::vector<VideoSample> accessible_clips(std::span<const VideoSample* const> samples, std::size_t T) {
    std::vector<VideoSample> out;
    out.reserve(samples.size());
    for (const auto* s : samples) {
        VideoSample c = *s;
        c.frames = eval_clip(s->frames, T);
        out.push_back(std::move(c));
    }
    return out;
}

inline MetricsRecord evaluate_stage(int step, const Model& model, const ExemplarMemory& memory,
                                    std::span<const VideoSample> test_all, std::span<const ClassId> seen) {
    const auto test = copy_samples(samples_of(test_all, seen));
    MetricsRecord r;
    r.step = step;
    r.seen_classes.assign(seen.begin(), seen.end());
    const auto cnn = evaluate_cnn(model, test, seen);
    r.acc_cnn = cnn.accuracy;
    r.per_class_accuracy = cnn.per_class;
    r.acc_nme = evaluate_nme(model, memory, test).accuracy;
    return r;
}

}  // namespace detail

inline LossWeights weights_for(const ExperimentConfig& cfg, std::size_t seen, std::size_t new_count, bool initial) {
    const MethodTerms t = terms_of(cfg.method);
    LossWeights w;
    w.alpha_feat = t.distill ? cfg.alpha_feat : 0.0;
    w.alpha_embed = t.distill ? cfg.alpha_embed : 0.0;
    w.beta = t.ortho ? cfg.beta : 0.0;
    w.lambda_scale = initial ? 0.0 : adaptive_lambda(seen, new_count);
    return w;
}

// Initial stage: train from scratch on group 0 (classification + orthogonality only),
// compute the first importance mask while the initial data is still available, fill the
// memory and evaluate.
inline StepState run_initial_step(const TaskStream& stream, const Dataset& data, const ExperimentConfig& cfg) {
    StepState st;
    st.step = 0;
    st.model = make_model(cfg.backbone(), cfg.n_proxy, cfg.eta_init, cfg.margin, derive_seed(cfg.seed, 0, kInit));
    new_class_head_init(st.model.head, stream.groups[0], derive_seed(cfg.seed, 0, kHead));

    const auto seen = stream.seen_classes(0);
    const auto task = detail::samples_of(data.train, stream.groups[0]);
    if (task.empty()) throw std::runtime_error("initial stage has no training samples");
    StageContext ctx;
    ctx.weights = weights_for(cfg, seen.size(), stream.groups[0].size(), true);
    ctx.allowed_classes = {seen.begin(), seen.end()};
    const auto losses = train_stage(st.model, task, ctx, cfg, cfg.epochs_initial, derive_seed(cfg.seed, 0, kShuffle),
                                    derive_seed(cfg.seed, 0, kFrames));

    const auto clips = detail::accessible_clips(task, cfg.T);
    st.mask = normalize_importance(compute_importance(st.model, clips));
    st.mask.step = 1;

    st.memory.budget_per_class = cfg.budget_per_class;
    st.memory.strategy = cfg.sampling_strategy;
    st.memory.T = cfg.T;
    st.memory.seed = derive_seed(cfg.seed, 0, kMemory);
    const auto task_copy = detail::copy_samples(task);
    update_memory(st.memory, task_copy, st.model);

    st.metrics = detail::evaluate_stage(0, st.model, st.memory, data.test, seen);
    st.metrics.loss_components = losses;
    return st;
}

// Step k >= 1: extend the head with C_k, train on T_k plus E_{k-1} against the frozen
// previous model and the mask from step k-1, then refresh the mask over E_{k-1} and T_k,
// extend the memory, fine-tune the classifier on the balanced memory and evaluate.
inline StepState run_incremental_step(const StepState& prev, const TaskStream& stream, const Dataset& data,
                                      const ExperimentConfig& cfg) {
    const int k = prev.step + 1;
    const auto& group = stream.groups.at(static_cast<std::size_t>(k));
    const auto seen = stream.seen_classes(static_cast<std::size_t>(k));
    const auto task = detail::samples_of(data.train, group);
    if (task.empty()) throw std::runtime_error("incremental step " + std::to_string(k) + " has no training samples");

    const Model& previous = prev.model;
    const auto previous_checksum = previous.backbone.checksum();

    StepState st;
    st.step = k;
    st.model = prev.model;
    st.consumed_mask_checksum = prev.mask.checksum();
    new_class_head_init(st.model.head, group, derive_seed(cfg.seed, k, kHead));

    std::vector<const VideoSample*> pool = task;
    const auto replay = prev.memory.all();
    pool.insert(pool.end(), replay.begin(), replay.end());

    StageContext ctx;
    ctx.previous = &previous;
    ctx.mask = terms_of(cfg.method).mask ? &prev.mask : nullptr;
    ctx.weights = weights_for(cfg, seen.size(), group.size(), false);
    ctx.allowed_classes = {seen.begin(), seen.end()};
    const auto losses = train_stage(st.model, pool, ctx, cfg, cfg.epochs_incremental,
                                    derive_seed(cfg.seed, k, kShuffle), derive_seed(cfg.seed, k, kFrames));
    if (previous.backbone.checksum() != previous_checksum)
        throw std::logic_error("previous model changed during incremental training");

    std::vector<const VideoSample*> accessible = replay;
    accessible.insert(accessible.end(), task.begin(), task.end());
    const auto clips = detail::accessible_clips(accessible, cfg.T);
    st.mask = normalize_importance(compute_importance(st.model, clips));
    st.mask.step = k + 1;

    st.memory = prev.memory;
    const auto task_copy = detail::copy_samples(task);
    update_memory(st.memory, task_copy, st.model);

    finetune_classifier(st.model, st.memory, cfg, derive_seed(cfg.seed, k, kFinetune));

    st.metrics = detail::evaluate_stage(k, st.model, st.memory, data.test, seen);
    st.metrics.loss_components = losses;
    return st;
}

// ---------------------------------------------------------------------------
// Run directory orchestration

struct RunOptions {
    bool resume = false;
    int stop_after_stage = -1;          // >= 0: stop once this stage is on disk (simulated interruption)
    std::ostream* progress = nullptr;   // per-stage accuracy lines
};

struct ExperimentResult {
    std::vector<MetricsRecord> records;
    std::vector<std::uint64_t> consumed_mask_checksums;  // indexed by step; 0 for the initial stage
    std::filesystem::path run_dir;
    bool completed = false;
};

inline std::filesystem::path stage_dir(const std::filesystem::path& run_dir, int k) {
    return run_dir / ("stage_" + std::to_string(k));
}

inline void save_stage(const std::filesystem::path& run_dir, const StepState& st) {
    const auto dir = stage_dir(run_dir, st.step);
    std::filesystem::create_directories(dir);
    save_checkpoint(dir / "checkpoint.json", st.model);
    save_mask(dir / "mask.json", st.mask);
    save_memory(dir / "memory.json", st.memory);
    write_json_file(dir / "metrics.json", to_json(st.metrics));  // last: marks the stage complete
}

inline StepState load_stage(const std::filesystem::path& run_dir, int k, const TaskStream& stream) {
    const auto dir = stage_dir(run_dir, k);
    StepState st;
    st.step = k;
    st.model = load_checkpoint(dir / "checkpoint.json");
    st.mask = load_mask(dir / "mask.json");
    st.memory = load_memory(dir / "memory.json");
    st.metrics = metrics_from_json(read_json_file(dir / "metrics.json"));
    st.metrics.seen_classes = stream.seen_classes(static_cast<std::size_t>(k));
    return st;
}

// Executes (or resumes) one run in `run_dir`: config.json echo, task_stream.json, log.txt
// and stage_<k>/{checkpoint.json, mask.json, memory.json, metrics.json}.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::filesystem::path& run_dir,
                                       const RunOptions& opt = {}) {
    namespace fs = std::filesystem;
    cfg.validate();
    const Dataset data = load_dataset(cfg);
    std::set<ClassId> class_set;
    for (const auto& s : data.train) class_set.insert(s.label);
    const TaskStream stream =
        build_task_stream({class_set.begin(), class_set.end()}, cfg.seed, cfg.initial_classes, cfg.group_size);

    const bool exists = fs::exists(run_dir / "config.json");
    if (exists && !opt.resume)
        throw std::runtime_error("run directory already holds a run (use --resume): " + run_dir.string());
    if (exists) {
        const auto echoed = config_from_json(read_json_file(run_dir / "config.json"));
        if (!(echoed == cfg)) throw std::runtime_error("resume: config differs from " + (run_dir / "config.json").string());
    } else {
        fs::create_directories(run_dir);
        write_json_file(run_dir / "config.json", to_json(cfg));
        write_json_file(run_dir / "task_stream.json", to_json(stream));
    }
    Log::instance().attach(run_dir / "log.txt");
    struct Detach {
        ~Detach() { Log::instance().detach(); }
    } detach;

    ExperimentResult result;
    result.run_dir = run_dir;
    const int stages = static_cast<int>(stream.stage_count());
    int done = -1;
    if (opt.resume)
        while (done + 1 < stages && fs::exists(stage_dir(run_dir, done + 1) / "metrics.json")) ++done;

    std::optional<StepState> state;
    for (int k = 0; k <= done; ++k) {
        auto loaded = load_stage(run_dir, k, stream);
        result.records.push_back(loaded.metrics);
        result.consumed_mask_checksums.push_back(0);
        if (k == done) state = std::move(loaded);
    }
    if (done >= 0) Log::instance().info("resuming after stage " + std::to_string(done));

    for (int k = done + 1; k < stages; ++k) {
        state = k == 0 ? run_initial_step(stream, data, cfg) : run_incremental_step(*state, stream, data, cfg);
        save_stage(run_dir, *state);
        result.records.push_back(state->metrics);
        result.consumed_mask_checksums.push_back(state->consumed_mask_checksum);
        const std::string line = "[" + cfg.run_label() + " seed=" + std::to_string(cfg.seed) + "] stage " +
                                 std::to_string(k) + ": acc_cnn=" + format_fixed(state->metrics.acc_cnn, 2) +
                                 " acc_nme=" + format_fixed(state->metrics.acc_nme, 2) + " (" +
                                 std::to_string(state->metrics.seen_classes.size()) + " classes)";
        Log::instance().info(line);
        if (opt.progress) *opt.progress << line << std::endl;
        if (k == opt.stop_after_stage) return result;
    }
    result.completed = true;
    return result;
}

}  // namespace tcdlab
