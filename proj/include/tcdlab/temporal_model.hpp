#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "io.hpp"
#include "task_data.hpp"
#include "tensor.hpp"

namespace tcdlab {

// ---------------------------------------------------------------------------
// Temporal shift

// Number of channels moved in each direction.
inline std::size_t shift_fold(std::size_t channels, double shift_fraction) {
    return static_cast<std::size_t>(std::floor(shift_fraction * static_cast<double>(channels) + 1e-9));
}

// Channels [0, fold) take their values from the next segment (t <- t+1), channels
// [fold, 2*fold) from the previous one (t <- t-1); vacated boundary slices are zero.
inline Tensor4 temporal_shift(const Tensor4& x, double shift_fraction) {
    const std::size_t T = x.dim(0), C = x.dim(1);
    const std::size_t fold = shift_fold(C, shift_fraction);
    if (2 * fold > C) throw ShapeError("temporal_shift: shift_fraction too large for channel count");
    if (fold == 0) return x;
    Tensor4 y = x;
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < 2 * fold; ++c) {
            auto dst = y.plane(t, c);
            const bool backward = c < fold;
            const bool has_src = backward ? t + 1 < T : t > 0;
            if (!has_src) {
                std::fill(dst.begin(), dst.end(), 0.0);
                continue;
            }
            auto src = x.plane(backward ? t + 1 : t - 1, c);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }
    return y;
}

// Adjoint of temporal_shift (used in backprop): each block moves the opposite way.
inline Tensor4 temporal_shift_adjoint(const Tensor4& dy, double shift_fraction) {
    const std::size_t T = dy.dim(0), C = dy.dim(1);
    const std::size_t fold = shift_fold(C, shift_fraction);
    if (fold == 0) return dy;
    Tensor4 dx = dy;
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t c = 0; c < 2 * fold; ++c) {
            auto dst = dx.plane(t, c);
            const bool backward = c < fold;
            // forward: y[t] = x[t+1] (backward block) => dx[t] = dy[t-1]
            const bool has_src = backward ? t > 0 : t + 1 < T;
            if (!has_src) {
                std::fill(dst.begin(), dst.end(), 0.0);
                continue;
            }
            auto src = dy.plane(backward ? t - 1 : t + 1, c);
            std::copy(src.begin(), src.end(), dst.begin());
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Per-frame primitives

// 3x3 convolution, stride 1, zero padding 1, applied independently to every segment.
// weight is [Cout x Cin x 3 x 3].
inline Tensor4 conv3x3_forward(const Tensor4& x, const Tensor4& w, std::span<const double> bias) {
    const std::size_t T = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0);
    Tensor4 y(T, Co, H, W);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t o = 0; o < Co; ++o) {
            auto out = y.plane(t, o);
            std::fill(out.begin(), out.end(), bias[o]);
            for (std::size_t i = 0; i < Ci; ++i) {
                auto in = x.plane(t, i);
                for (std::size_t ky = 0; ky < 3; ++ky)
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const double k = w(o, i, ky, kx);
                        if (k == 0.0) continue;
                        const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? H - 1 : H;
                        const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? W - 1 : W;
                        for (std::size_t yy = y0; yy < y1; ++yy) {
                            const double* src = in.data() + (yy + ky - 1) * W + kx;
                            double* dst = out.data() + yy * W;
                            for (std::size_t xx = x0; xx < x1; ++xx) dst[xx] += k * src[xx - 1];
                        }
                    }
            }
        }
    return y;
}

// Accumulates dW/db and returns dx.
inline Tensor4 conv3x3_backward(const Tensor4& x, const Tensor4& w, const Tensor4& dy, Tensor4& dw,
                                std::span<double> db) {
    const std::size_t T = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Co = w.dim(0);
    Tensor4 dx(T, Ci, H, W);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t o = 0; o < Co; ++o) {
            auto g = dy.plane(t, o);
            double gs = 0.0;
            for (double v : g) gs += v;
            db[o] += gs;
            for (std::size_t i = 0; i < Ci; ++i) {
                auto in = x.plane(t, i);
                auto din = dx.plane(t, i);
                for (std::size_t ky = 0; ky < 3; ++ky)
                    for (std::size_t kx = 0; kx < 3; ++kx) {
                        const double k = w(o, i, ky, kx);
                        const std::size_t y0 = ky == 0 ? 1 : 0, y1 = ky == 2 ? H - 1 : H;
                        const std::size_t x0 = kx == 0 ? 1 : 0, x1 = kx == 2 ? W - 1 : W;
                        double acc = 0.0;
                        for (std::size_t yy = y0; yy < y1; ++yy) {
                            const std::size_t off = (yy + ky - 1) * W + kx;
                            const double* src = in.data() + off;
                            double* dsrc = din.data() + off;
                            const double* gr = g.data() + yy * W;
                            for (std::size_t xx = x0; xx < x1; ++xx) {
                                acc += gr[xx] * src[xx - 1];
                                dsrc[xx - 1] += k * gr[xx];
                            }
                        }
                        dw(o, i, ky, kx) += acc;
                    }
            }
        }
    return dx;
}

inline Tensor4 avgpool2_forward(const Tensor4& x) {
    const std::size_t T = x.dim(0), C = x.dim(1), H = x.dim(2) / 2, W = x.dim(3) / 2;
    Tensor4 y(T, C, H, W);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j)
                    y(t, c, i, j) = 0.25 * (x(t, c, 2 * i, 2 * j) + x(t, c, 2 * i + 1, 2 * j) +
                                            x(t, c, 2 * i, 2 * j + 1) + x(t, c, 2 * i + 1, 2 * j + 1));
    return y;
}

inline Tensor4 avgpool2_backward(const Tensor4& dy) {
    const std::size_t T = dy.dim(0), C = dy.dim(1), H = dy.dim(2), W = dy.dim(3);
    Tensor4 dx(T, C, 2 * H, 2 * W);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) {
                    const double g = 0.25 * dy(t, c, i, j);
                    dx(t, c, 2 * i, 2 * j) = g;
                    dx(t, c, 2 * i + 1, 2 * j) = g;
                    dx(t, c, 2 * i, 2 * j + 1) = g;
                    dx(t, c, 2 * i + 1, 2 * j + 1) = g;
                }
    return dx;
}

inline Tensor4 relu(Tensor4 x) {
    for (auto& v : x.data()) v = v > 0.0 ? v : 0.0;
    return x;
}

constexpr double kSegmentNormEpsilon = 1e-5;

// Standardizes every segment t of x over its (C, H, W) entries (no affine part).
// `inv_std` receives 1/sqrt(var_t + eps) per segment for the backward pass.
inline Tensor4 segment_norm_forward(const Tensor4& x, std::vector<double>& inv_std) {
    const std::size_t T = x.dim(0), n = x.dim(1) * x.dim(2) * x.dim(3);
    Tensor4 y(x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    inv_std.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* src = x.data().data() + t * n;
        double* dst = y.data().data() + t * n;
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += src[i];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
        var /= static_cast<double>(n);
        inv_std[t] = 1.0 / std::sqrt(var + kSegmentNormEpsilon);
        for (std::size_t i = 0; i < n; ++i) dst[i] = (src[i] - mean) * inv_std[t];
    }
    return y;
}

// dx = inv_std * (dy - mean(dy) - y * mean(dy * y)) per segment.
inline Tensor4 segment_norm_backward(const Tensor4& y, std::span<const double> inv_std, const Tensor4& dy) {
    const std::size_t T = y.dim(0), n = y.dim(1) * y.dim(2) * y.dim(3);
    Tensor4 dx(y.dim(0), y.dim(1), y.dim(2), y.dim(3));
    for (std::size_t t = 0; t < T; ++t) {
        const double* yy = y.data().data() + t * n;
        const double* g = dy.data().data() + t * n;
        double* out = dx.data().data() + t * n;
        double mg = 0.0, mgy = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            mg += g[i];
            mgy += g[i] * yy[i];
        }
        mg /= static_cast<double>(n);
        mgy /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = inv_std[t] * (g[i] - mg - yy[i] * mgy);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Backbone

struct LayerSpec {
    std::size_t channels = 8;
    bool downsample = false;  // 2x2 average pool on the block input
    bool operator==(const LayerSpec&) const = default;
};

struct BackboneConfig {
    std::size_t T = 8;
    std::size_t in_channels = 1;
    std::size_t height = 8;
    std::size_t width = 8;
    std::vector<LayerSpec> layers{{8, false}, {16, true}, {16, false}, {16, false}};
    double shift_fraction = 0.125;
    std::size_t embedding_dim = 32;
    bool segment_norm = true;  // standardize each segment before every ReLU

    std::size_t L() const { return layers.size(); }

    void validate() const {
        if (T == 0 || in_channels == 0 || height == 0 || width == 0 || embedding_dim == 0)
            throw ConfigError("backbone: T, in_channels, height, width and embedding_dim must be positive");
        if (layers.empty()) throw ConfigError("backbone: at least one observation layer is required");
        if (shift_fraction < 0.0 || shift_fraction > 0.5)
            throw ConfigError("backbone: shift_fraction must lie in [0, 0.5]");
        std::size_t h = height, w = width;
        for (std::size_t l = 0; l < layers.size(); ++l) {
            if (layers[l].channels == 0) throw ConfigError("backbone: layer channels must be positive");
            if (layers[l].downsample) {
                if (l == 0) throw ConfigError("backbone: the stem layer cannot downsample");
                if (h % 2 || w % 2) throw ConfigError("backbone: downsampling needs even spatial size");
                h /= 2;
                w /= 2;
            }
        }
    }

    // Spatial extent of observation layer l.
    std::pair<std::size_t, std::size_t> spatial(std::size_t l) const {
        std::size_t h = height, w = width;
        for (std::size_t i = 0; i <= l; ++i)
            if (layers[i].downsample) {
                h /= 2;
                w /= 2;
            }
        return {h, w};
    }

    bool operator==(const BackboneConfig&) const = default;
};

inline json to_json(const BackboneConfig& c) {
    json layers = json::array();
    for (const auto& l : c.layers) layers.push_back({{"channels", l.channels}, {"downsample", l.downsample}});
    return json{{"T", c.T},         {"in_channels", c.in_channels},       {"height", c.height},
                {"width", c.width}, {"layers", layers},                   {"shift_fraction", c.shift_fraction},
                {"embedding_dim", c.embedding_dim}, {"segment_norm", c.segment_norm}};
}

inline BackboneConfig backbone_config_from_json(const json& j) {
    BackboneConfig c;
    c.T = j.at("T").get<std::size_t>();
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.height = j.at("height").get<std::size_t>();
    c.width = j.at("width").get<std::size_t>();
    c.layers.clear();
    for (const auto& l : j.at("layers"))
        c.layers.push_back({l.at("channels").get<std::size_t>(), l.at("downsample").get<bool>()});
    c.shift_fraction = j.at("shift_fraction").get<double>();
    c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    c.segment_norm = j.value("segment_norm", true);
    c.validate();
    return c;
}

struct Param {
    std::string name;
    Tensor4 value;
    bool decay = true;  // subject to weight decay
};

// Per-layer feature maps, embedding and class scores of one forward pass.
struct FeatureStack {
    std::vector<Tensor4> layers;
    std::vector<double> embedding;
    std::vector<double> scores;
};

// Intermediate values a backward pass needs.
struct ForwardCache {
    Tensor4 input;
    std::vector<Tensor4> block_in;   // pooled block input (l >= 1), pre-activation
    std::vector<Tensor4> conv_in;    // shifted tensor fed to conv l
    std::vector<Tensor4> features;   // F_l
    std::vector<Tensor4> normed;     // pre-ReLU activations, index l = input of block l, L = head
    std::vector<std::vector<double>> inv_std;  // segment-norm scales matching `normed`
    std::vector<double> pooled;      // mean of relu(F_L) over (t, h, w)
};

// Pre-activation residual network over frames. Block l computes
//   F_0 = conv_0(shift(x))
//   F_l = [pool](F_{l-1}) (+ residual when widths match) + conv_l(shift(relu(N([pool](F_{l-1))))))
// and the embedding is an affine map of relu(N(F_{L-1})) averaged over time and space.
// N is per-segment standardization when segment_norm is set and the identity otherwise.
// Parameters are stored flat: conv weight/bias per layer, then embedding weight/bias.
class Backbone {
public:
    Backbone() = default;
    explicit Backbone(BackboneConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        std::size_t cin = cfg_.in_channels;
        for (std::size_t l = 0; l < cfg_.L(); ++l) {
            const std::size_t co = cfg_.layers[l].channels;
            params_.push_back({"conv" + std::to_string(l) + ".weight", Tensor4(co, cin, 3, 3), true});
            params_.push_back({"conv" + std::to_string(l) + ".bias", Tensor4(1, 1, 1, co), false});
            cin = co;
        }
        params_.push_back({"embed.weight", Tensor4(1, 1, cfg_.embedding_dim, cin), true});
        params_.push_back({"embed.bias", Tensor4(1, 1, 1, cfg_.embedding_dim), false});
    }

    // He-style initialisation; residual branches start at reduced scale.
    void init(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::size_t cin = cfg_.in_channels;
        for (std::size_t l = 0; l < cfg_.L(); ++l) {
            const bool residual = is_residual(l);
            const double std = std::sqrt(2.0 / static_cast<double>(cin * 9)) * (residual ? 0.5 : 1.0);
            std::normal_distribution<double> nd(0.0, std);
            for (auto& v : conv_weight(l).data()) v = nd(rng);
            conv_bias(l).fill(0.0);
            cin = cfg_.layers[l].channels;
        }
        std::normal_distribution<double> nd(0.0, std::sqrt(1.0 / static_cast<double>(cin)));
        for (auto& v : embed_weight().data()) v = nd(rng);
        embed_bias().fill(0.0);
    }

    const BackboneConfig& config() const { return cfg_; }
    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }

    bool is_residual(std::size_t l) const {
        return l > 0 && cfg_.layers[l].channels == cfg_.layers[l - 1].channels;
    }

    Tensor4& conv_weight(std::size_t l) { return params_[2 * l].value; }
    const Tensor4& conv_weight(std::size_t l) const { return params_[2 * l].value; }
    Tensor4& conv_bias(std::size_t l) { return params_[2 * l + 1].value; }
    const Tensor4& conv_bias(std::size_t l) const { return params_[2 * l + 1].value; }
    Tensor4& embed_weight() { return params_[2 * cfg_.L()].value; }
    const Tensor4& embed_weight() const { return params_[2 * cfg_.L()].value; }
    Tensor4& embed_bias() { return params_[2 * cfg_.L() + 1].value; }
    const Tensor4& embed_bias() const { return params_[2 * cfg_.L() + 1].value; }

    void check_input(const Tensor4& frames) const {
        if (frames.dim(0) != cfg_.T || frames.dim(1) != cfg_.in_channels || frames.dim(2) != cfg_.height ||
            frames.dim(3) != cfg_.width)
            throw ShapeError("backbone input " + frames.shape_string() + " does not match configured [" +
                             std::to_string(cfg_.T) + "x" + std::to_string(cfg_.in_channels) + "x" +
                             std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width) + "]");
    }

    // `offsets` (optional, one tensor per layer, empty = none) is added to F_l before it
    // feeds later layers; used for finite-difference probes of intermediate features.
    FeatureStack forward(const Tensor4& frames, ForwardCache* cache = nullptr,
                         const std::vector<Tensor4>* offsets = nullptr) const {
        check_input(frames);
        if (offsets && offsets->size() != cfg_.L()) throw ShapeError("forward: one offset tensor per layer expected");
        const std::size_t L = cfg_.L();
        FeatureStack out;
        out.layers.reserve(L);
        if (cache) {
            cache->input = frames;
            cache->block_in.assign(L, {});
            cache->conv_in.assign(L, {});
            cache->normed.assign(L + 1, {});
            cache->inv_std.assign(L + 1, {});
        }
        std::vector<double> inv_std;
        auto pre_activation = [&](const Tensor4& x, std::size_t slot) {
            if (!cfg_.segment_norm) return x;
            Tensor4 y = segment_norm_forward(x, inv_std);
            if (cache) {
                cache->normed[slot] = y;
                cache->inv_std[slot] = inv_std;
            }
            return y;
        };
        for (std::size_t l = 0; l < L; ++l) {
            Tensor4 block_in;
            Tensor4 conv_in;
            if (l == 0) {
                conv_in = temporal_shift(frames, cfg_.shift_fraction);
            } else {
                block_in = cfg_.layers[l].downsample ? avgpool2_forward(out.layers[l - 1]) : out.layers[l - 1];
                conv_in = temporal_shift(relu(pre_activation(block_in, l)), cfg_.shift_fraction);
            }
            Tensor4 f = conv3x3_forward(conv_in, conv_weight(l), conv_bias(l).data());
            if (is_residual(l)) f += block_in;
            if (offsets && !(*offsets)[l].empty()) f += (*offsets)[l];
            if (cache) {
                cache->block_in[l] = std::move(block_in);
                cache->conv_in[l] = std::move(conv_in);
            }
            out.layers.push_back(std::move(f));
        }
        const Tensor4 last = pre_activation(out.layers.back(), L);
        const std::size_t C = last.dim(1);
        const double inv = 1.0 / static_cast<double>(last.dim(0) * last.dim(2) * last.dim(3));
        std::vector<double> pooled(C, 0.0);
        for (std::size_t t = 0; t < last.dim(0); ++t)
            for (std::size_t c = 0; c < C; ++c)
                for (double v : last.plane(t, c))
                    if (v > 0.0) pooled[c] += v;
        for (auto& v : pooled) v *= inv;
        const std::size_t D = cfg_.embedding_dim;
        out.embedding.assign(D, 0.0);
        const auto& ew = embed_weight();
        const auto& eb = embed_bias();
        for (std::size_t d = 0; d < D; ++d) {
            double s = eb(0, 0, 0, d);
            for (std::size_t c = 0; c < C; ++c) s += ew(0, 0, d, c) * pooled[c];
            out.embedding[d] = s;
        }
        if (cache) {
            cache->features = out.layers;
            cache->pooled = std::move(pooled);
        }
        return out;
    }

    // Backpropagates d_embedding plus optional direct feature gradients (added at each
    // observation layer). Parameter gradients accumulate into `grads` (same layout as
    // params()). When requested, writes total dLoss/dF_l per layer and dLoss/dinput.
    void backward(const ForwardCache& cache, std::span<const double> d_embedding,
                  const std::vector<Tensor4>* d_features_extra, std::vector<Tensor4>& grads,
                  std::vector<Tensor4>* d_features_out = nullptr, Tensor4* d_input = nullptr) const {
        const std::size_t L = cfg_.L();
        const Tensor4& last = cfg_.segment_norm ? cache.normed[L] : cache.features.back();
        const std::size_t C = last.dim(1);
        const std::size_t D = cfg_.embedding_dim;
        const double inv = 1.0 / static_cast<double>(last.dim(0) * last.dim(2) * last.dim(3));

        const auto& ew = embed_weight();
        Tensor4& gew = grads[2 * L];
        Tensor4& geb = grads[2 * L + 1];
        std::vector<double> d_pooled(C, 0.0);
        for (std::size_t d = 0; d < D; ++d) {
            const double g = d_embedding[d];
            geb(0, 0, 0, d) += g;
            for (std::size_t c = 0; c < C; ++c) {
                gew(0, 0, d, c) += g * cache.pooled[c];
                d_pooled[c] += g * ew(0, 0, d, c);
            }
        }
        Tensor4 dF(last.dim(0), C, last.dim(2), last.dim(3));
        for (std::size_t t = 0; t < last.dim(0); ++t)
            for (std::size_t c = 0; c < C; ++c) {
                auto src = last.plane(t, c);
                auto dst = dF.plane(t, c);
                const double g = d_pooled[c] * inv;
                for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0 ? g : 0.0;
            }
        if (cfg_.segment_norm) dF = segment_norm_backward(cache.normed[L], cache.inv_std[L], dF);

        if (d_features_out) d_features_out->assign(L, {});
        for (std::size_t li = L; li-- > 0;) {
            if (d_features_extra && !(*d_features_extra)[li].empty()) dF += (*d_features_extra)[li];
            if (d_features_out) (*d_features_out)[li] = dF;
            Tensor4 d_conv_in =
                conv3x3_backward(cache.conv_in[li], conv_weight(li), dF, grads[2 * li], grads[2 * li + 1].data());
            Tensor4 d_shift_in = temporal_shift_adjoint(d_conv_in, cfg_.shift_fraction);
            if (li == 0) {
                if (d_input) *d_input = std::move(d_shift_in);
                break;
            }
            const Tensor4& bin = cfg_.segment_norm ? cache.normed[li] : cache.block_in[li];
            Tensor4 d_act(bin.dim(0), bin.dim(1), bin.dim(2), bin.dim(3));
            {
                auto& da = d_act.data();
                const auto& ds = d_shift_in.data();
                const auto& b = bin.data();
                for (std::size_t i = 0; i < da.size(); ++i)
                    if (b[i] > 0.0) da[i] = ds[i];
            }
            if (cfg_.segment_norm) d_act = segment_norm_backward(bin, cache.inv_std[li], d_act);
            Tensor4 d_block_in = is_residual(li) ? dF : Tensor4(bin.dim(0), bin.dim(1), bin.dim(2), bin.dim(3));
            d_block_in += d_act;
            dF = cfg_.layers[li].downsample ? avgpool2_backward(d_block_in) : std::move(d_block_in);
        }
    }

    std::vector<Tensor4> zero_grads() const {
        std::vector<Tensor4> g;
        g.reserve(params_.size());
        for (const auto& p : params_) {
            const auto& d = p.value.dims();
            g.emplace_back(d[0], d[1], d[2], d[3]);
        }
        return g;
    }

    std::uint64_t checksum() const {
        std::uint64_t h = 1469598103934665603ULL;
        for (const auto& p : params_) h = tcdlab::checksum(p.value.data(), h);
        return h;
    }

private:
    BackboneConfig cfg_;
    std::vector<Param> params_;
};

// ---------------------------------------------------------------------------
// Local Similarity Classifier head

struct LSCHead {
    std::size_t n_proxy = 3;
    std::size_t dim = 0;
    std::vector<ClassId> classes;   // registration order == score order
    std::vector<double> proxies;    // classes.size() * n_proxy * dim, unit rows
    double eta = 1.0;
    double delta = 0.6;

    std::size_t n_classes() const { return classes.size(); }

    std::span<const double> proxy(std::size_t m, std::size_t n) const {
        return {proxies.data() + (m * n_proxy + n) * dim, dim};
    }
    std::span<double> proxy(std::size_t m, std::size_t n) {
        return {proxies.data() + (m * n_proxy + n) * dim, dim};
    }

    std::ptrdiff_t index_of(ClassId c) const {
        auto it = std::find(classes.begin(), classes.end(), c);
        return it == classes.end() ? -1 : it - classes.begin();
    }

    void renormalize() {
        for (std::size_t m = 0; m < n_classes(); ++m)
            for (std::size_t n = 0; n < n_proxy; ++n) {
                auto p = proxy(m, n);
                const double r = l2_norm(p) + kNormEpsilon;
                for (auto& v : p) v /= r;
            }
    }

    bool operator==(const LSCHead&) const = default;
};

struct LscGrad {
    std::vector<double> proxies;  // same layout as LSCHead::proxies
    double eta = 0.0;
};

// Per class m: score = sum_n softmax_n(<w_mn, h>) <w_mn, h>, with h unit-normalised.
inline std::vector<double> lsc_scores(std::span<const double> embedding, const LSCHead& head) {
    if (embedding.size() != head.dim) throw ShapeError("lsc_scores: embedding dimension mismatch");
    if (!all_finite(embedding)) throw NumericError("lsc_scores: non-finite embedding");
    const auto h = normalized(embedding);
    std::vector<double> scores(head.n_classes());
    std::vector<double> sim(head.n_proxy);
    for (std::size_t m = 0; m < head.n_classes(); ++m) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n < head.n_proxy; ++n) {
            sim[n] = dot(head.proxy(m, n), h);
            mx = std::max(mx, sim[n]);
        }
        double z = 0.0, s = 0.0;
        for (std::size_t n = 0; n < head.n_proxy; ++n) {
            const double e = std::exp(sim[n] - mx);
            z += e;
            s += e * sim[n];
        }
        scores[m] = s / z;
    }
    return scores;
}

// Backprop of lsc_scores. Accumulates proxy gradients into `grad` and returns dL/dembedding.
inline std::vector<double> lsc_backward(std::span<const double> embedding, const LSCHead& head,
                                        std::span<const double> d_scores, LscGrad* grad) {
    const std::size_t D = head.dim;
    const double r = l2_norm(embedding);
    const double rr = r + kNormEpsilon;
    std::vector<double> h(D);
    for (std::size_t d = 0; d < D; ++d) h[d] = embedding[d] / rr;
    std::vector<double> dh(D, 0.0);
    std::vector<double> sim(head.n_proxy), sm(head.n_proxy);
    for (std::size_t m = 0; m < head.n_classes(); ++m) {
        if (d_scores[m] == 0.0) continue;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t n = 0; n < head.n_proxy; ++n) {
            sim[n] = dot(head.proxy(m, n), h);
            mx = std::max(mx, sim[n]);
        }
        double z = 0.0;
        for (std::size_t n = 0; n < head.n_proxy; ++n) z += (sm[n] = std::exp(sim[n] - mx));
        double y = 0.0;
        for (std::size_t n = 0; n < head.n_proxy; ++n) {
            sm[n] /= z;
            y += sm[n] * sim[n];
        }
        for (std::size_t n = 0; n < head.n_proxy; ++n) {
            const double dsim = d_scores[m] * sm[n] * (1.0 + sim[n] - y);
            auto p = head.proxy(m, n);
            for (std::size_t d = 0; d < D; ++d) dh[d] += dsim * p[d];
            if (grad) {
                double* gp = grad->proxies.data() + (m * head.n_proxy + n) * D;
                for (std::size_t d = 0; d < D; ++d) gp[d] += dsim * h[d];
            }
        }
    }
    // h = e / (|e| + eps)
    std::vector<double> de(D);
    const double hd = dot(embedding, dh);
    for (std::size_t d = 0; d < D; ++d) {
        de[d] = dh[d] / rr;
        if (r > 0.0) de[d] -= embedding[d] * hd / (r * rr * rr);
    }
    return de;
}

struct NcaResult {
    double value = 0.0;
    std::vector<double> d_scores;
    double d_eta = 0.0;
};

// Hinged NCA with margin: [ -eta(s_y - delta) + log sum_{i != y} exp(eta s_i) ]_+.
// With no competing class the loss is zero.
inline NcaResult nca_loss(std::span<const double> scores, std::size_t target, double eta, double delta) {
    if (target >= scores.size()) throw std::out_of_range("nca_loss: target not among scores");
    NcaResult r;
    r.d_scores.assign(scores.size(), 0.0);
    if (scores.size() < 2) return r;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (i != target) mx = std::max(mx, eta * scores[i]);
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (i != target) z += std::exp(eta * scores[i] - mx);
    const double lse = mx + std::log(z);
    const double raw = -eta * (scores[target] - delta) + lse;
    if (!(raw > 0.0)) return r;
    r.value = raw;
    double weighted = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (i == target) continue;
        const double p = std::exp(eta * scores[i] - lse);
        r.d_scores[i] = eta * p;
        weighted += p * scores[i];
    }
    r.d_scores[target] = -eta;
    r.d_eta = -(scores[target] - delta) + weighted;
    return r;
}

// ---------------------------------------------------------------------------
// Model = backbone + head

struct Model {
    Backbone backbone;
    LSCHead head;

    FeatureStack forward(const Tensor4& frames, ForwardCache* cache = nullptr,
                         const std::vector<Tensor4>* offsets = nullptr) const {
        FeatureStack fs = backbone.forward(frames, cache, offsets);
        fs.scores = lsc_scores(fs.embedding, head);
        return fs;
    }
    FeatureStack forward(const VideoSample& sample, ForwardCache* cache = nullptr) const {
        return forward(sample.frames, cache);
    }

    std::vector<double> embed(const Tensor4& frames) const { return backbone.forward(frames).embedding; }
};

inline Model make_model(const BackboneConfig& cfg, std::size_t n_proxy, double eta, double delta,
                        std::uint64_t seed) {
    Model m;
    m.backbone = Backbone(cfg);
    m.backbone.init(seed);
    m.head.n_proxy = n_proxy;
    m.head.dim = cfg.embedding_dim;
    m.head.eta = eta;
    m.head.delta = delta;
    return m;
}

// Registers new classes with seeded unit-norm random proxies; existing proxies untouched.
inline void new_class_head_init(LSCHead& head, std::span<const ClassId> new_classes, std::uint64_t seed) {
    for (ClassId c : new_classes)
        if (head.index_of(c) >= 0) throw ConfigError("head: class " + std::to_string(c) + " already registered");
    for (std::size_t i = 0; i < new_classes.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (new_classes[i] == new_classes[j])
                throw ConfigError("head: class " + std::to_string(new_classes[i]) + " listed twice");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (ClassId c : new_classes) {
        head.classes.push_back(c);
        for (std::size_t n = 0; n < head.n_proxy; ++n) {
            std::vector<double> v(head.dim);
            for (auto& x : v) x = nd(rng);
            const double r = l2_norm(v) + kNormEpsilon;
            for (auto& x : v) head.proxies.push_back(x / r);
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON archive with the backbone config and named parameter tensors.

inline json checkpoint_to_json(const Model& m) {
    json tensors = json::object();
    for (const auto& p : m.backbone.params()) tensors[p.name] = tensor_to_json(p.value);
    tensors["head.proxies"] = vector_to_json({m.head.n_classes(), m.head.n_proxy, m.head.dim}, m.head.proxies);
    return json{{"metadata",
                 {{"format", "tcdlab-checkpoint/1"},
                  {"backbone", to_json(m.backbone.config())},
                  {"head",
                   {{"n_proxy", m.head.n_proxy},
                    {"dim", m.head.dim},
                    {"classes", m.head.classes},
                    {"eta", m.head.eta},
                    {"delta", m.head.delta}}}}},
                {"tensors", tensors}};
}

inline Model checkpoint_from_json(const json& j) {
    const auto& meta = j.at("metadata");
    if (meta.at("format") != "tcdlab-checkpoint/1") throw std::runtime_error("unsupported checkpoint format");
    Model m;
    m.backbone = Backbone(backbone_config_from_json(meta.at("backbone")));
    const auto& tensors = j.at("tensors");
    for (auto& p : m.backbone.params()) {
        Tensor4 t = tensor_from_json(tensors.at(p.name));
        if (!t.same_shape(p.value)) throw ShapeError("checkpoint tensor " + p.name + " has wrong shape");
        p.value = std::move(t);
    }
    const auto& h = meta.at("head");
    m.head.n_proxy = h.at("n_proxy").get<std::size_t>();
    m.head.dim = h.at("dim").get<std::size_t>();
    m.head.classes = h.at("classes").get<std::vector<ClassId>>();
    m.head.eta = h.at("eta").get<double>();
    m.head.delta = h.at("delta").get<double>();
    m.head.proxies = tensors.at("head.proxies").at("data").get<std::vector<double>>();
    if (m.head.proxies.size() != m.head.n_classes() * m.head.n_proxy * m.head.dim)
        throw ShapeError("checkpoint head proxies have wrong size");
    return m;
}

inline void save_checkpoint(const std::filesystem::path& path, const Model& m) {
    write_json_file(path, checkpoint_to_json(m), -1);
}

inline Model load_checkpoint(const std::filesystem::path& path) { return checkpoint_from_json(read_json_file(path)); }

}  // namespace tcdlab
