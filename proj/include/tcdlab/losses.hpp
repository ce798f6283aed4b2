#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "importance.hpp"
#include "temporal_model.hpp"
#include "tensor.hpp"

namespace tcdlab {

// Weights of the combined objective. lambda_scale multiplies both distillation weights
// and is zero at the initial stage, which makes distillation inert there.
struct LossWeights {
    double alpha_feat = 1.0;
    double alpha_embed = 0.01;
    double beta = 0.1;
    double lambda_scale = 0.0;
};

// sqrt(|classes seen so far| / |classes introduced at this step|).
inline double adaptive_lambda(std::size_t seen_classes, std::size_t new_classes) {
    if (new_classes == 0) throw std::invalid_argument("adaptive_lambda: no new classes");
    return std::sqrt(static_cast<double>(seen_classes) / static_cast<double>(new_classes));
}

namespace detail {

inline void check_stacks(std::span<const Tensor4> cur, std::span<const Tensor4> prev) {
    if (cur.size() != prev.size()) throw ShapeError("distillation: layer count mismatch");
    for (std::size_t l = 0; l < cur.size(); ++l)
        if (!cur[l].same_shape(prev[l]))
            throw ShapeError("distillation: layer " + std::to_string(l) + " shape " + cur[l].shape_string() +
                             " vs " + prev[l].shape_string());
}

inline void check_mask(std::span<const Tensor4> cur, const ImportanceMask& mask) {
    if (mask.normalized.size() != cur.size()) throw ShapeError("distillation: mask layer count mismatch");
    for (std::size_t l = 0; l < cur.size(); ++l)
        if (mask.T[l] != cur[l].dim(0) || mask.C[l] != cur[l].dim(1) ||
            mask.normalized[l].size() != mask.T[l] * mask.C[l])
            throw ShapeError("distillation: mask layer " + std::to_string(l) + " does not match features " +
                             cur[l].shape_string());
}

// Shared body for the weighted and unweighted forms; `mask` may be null (all weights 1).
inline double distill(std::span<const Tensor4> cur, std::span<const Tensor4> prev, const ImportanceMask* mask,
                      std::vector<Tensor4>* grad, double grad_scale) {
    if (grad) grad->resize(cur.size());
    double total = 0.0;
    for (std::size_t l = 0; l < cur.size(); ++l) {
        const std::size_t T = cur[l].dim(0), C = cur[l].dim(1);
        if (grad) (*grad)[l] = Tensor4(T, C, cur[l].dim(2), cur[l].dim(3));
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c) {
                auto a = cur[l].plane(t, c);
                auto b = prev[l].plane(t, c);
                double s = 0.0;
                for (std::size_t i = 0; i < a.size(); ++i) {
                    const double d = a[i] - b[i];
                    s += d * d;
                }
                const double w = mask ? mask->normalized[l][t * C + c] : 1.0;
                total += w * s;
                if (grad) {
                    auto g = (*grad)[l].plane(t, c);
                    const double k = 2.0 * w * grad_scale;
                    for (std::size_t i = 0; i < a.size(); ++i) g[i] = k * (a[i] - b[i]);
                }
            }
    }
    return total;
}

}  // namespace detail

// sum_l sum_t sum_c M[l][t][c] * ||F_cur[l][t][c] - F_prev[l][t][c]||_F^2.
// The previous stack is a constant: `grad` (optional) receives dLoss/dF_cur scaled by
// `grad_scale`.
inline double distillation_loss(std::span<const Tensor4> current, std::span<const Tensor4> previous,
                                const ImportanceMask& mask, std::vector<Tensor4>* grad = nullptr,
                                double grad_scale = 1.0) {
    detail::check_stacks(current, previous);
    detail::check_mask(current, mask);
    return detail::distill(current, previous, &mask, grad, grad_scale);
}

inline double distillation_loss(const FeatureStack& current, const FeatureStack& previous, const ImportanceMask& mask) {
    return distillation_loss(current.layers, previous.layers, mask);
}

// Same sum with every weight equal to one.
inline double unweighted_distillation_loss(std::span<const Tensor4> current, std::span<const Tensor4> previous,
                                           std::vector<Tensor4>* grad = nullptr, double grad_scale = 1.0) {
    detail::check_stacks(current, previous);
    return detail::distill(current, previous, nullptr, grad, grad_scale);
}

inline double unweighted_distillation_loss(const FeatureStack& current, const FeatureStack& previous) {
    return unweighted_distillation_loss(current.layers, previous.layers);
}

// sum_l sum_c ||I_T - F' F'^T||_F^2 where the rows of F' are the per-segment feature
// planes of channel c, each scaled to unit length. A (near-)zero row is divided by eps
// instead of its norm and adds 1 through its diagonal entry.
// `grad` (optional) accumulates dLoss/dF scaled by `grad_scale`.
inline double orthogonality_loss(std::span<const Tensor4> features, std::vector<Tensor4>* grad = nullptr,
                                 double grad_scale = 1.0) {
    if (grad && grad->size() != features.size()) {
        grad->resize(features.size());
        for (std::size_t l = 0; l < features.size(); ++l) {
            const auto& d = features[l].dims();
            (*grad)[l] = Tensor4(d[0], d[1], d[2], d[3]);
        }
    }
    double total = 0.0;
    std::vector<double> gram, norms, units, du;
    for (std::size_t l = 0; l < features.size(); ++l) {
        const Tensor4& F = features[l];
        const std::size_t T = F.dim(0), C = F.dim(1), P = F.dim(2) * F.dim(3);
        gram.assign(T * T, 0.0);
        norms.assign(T, 0.0);
        units.assign(T * P, 0.0);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t t = 0; t < T; ++t) {
                auto row = F.plane(t, c);
                norms[t] = l2_norm(row);
                const double r = std::max(norms[t], kNormEpsilon);
                for (std::size_t i = 0; i < P; ++i) units[t * P + i] = row[i] / r;
            }
            for (std::size_t s = 0; s < T; ++s)
                for (std::size_t t = s; t < T; ++t) {
                    // cosines of non-zero rows come from raw dot products so that equal rows
                    // give exactly 1 (sqrt(x*x) == |x| in binary floating point)
                    double g;
                    if (norms[s] > kNormEpsilon && norms[t] > kNormEpsilon)
                        g = s == t ? 1.0
                                   : dot(F.plane(s, c), F.plane(t, c)) /
                                         std::sqrt(dot(F.plane(s, c), F.plane(s, c)) * dot(F.plane(t, c), F.plane(t, c)));
                    else
                        g = dot({units.data() + s * P, P}, {units.data() + t * P, P});
                    gram[s * T + t] = gram[t * T + s] = g;
                }
            for (std::size_t s = 0; s < T; ++s)
                for (std::size_t t = 0; t < T; ++t) {
                    const double d = (s == t ? 1.0 : 0.0) - gram[s * T + t];
                    total += d * d;
                }
            if (!grad) continue;
            // dL/du_t = 4 sum_s (G_ts - I_ts) u_s
            for (std::size_t t = 0; t < T; ++t) {
                du.assign(P, 0.0);
                for (std::size_t s = 0; s < T; ++s) {
                    const double k = 4.0 * (gram[t * T + s] - (s == t ? 1.0 : 0.0));
                    if (k == 0.0) continue;
                    for (std::size_t i = 0; i < P; ++i) du[i] += k * units[s * P + i];
                }
                auto g = (*grad)[l].plane(t, c);
                const double n = norms[t];
                // u = f/n  =>  df = (du - u (u.du)) / n; a (near-)zero row has no usable
                // direction and receives no gradient.
                if (n <= kNormEpsilon) continue;
                const double ud = dot({units.data() + t * P, P}, du);
                for (std::size_t i = 0; i < P; ++i) g[i] += grad_scale * (du[i] - units[t * P + i] * ud) / n;
            }
        }
    }
    return total;
}

inline double orthogonality_loss(const FeatureStack& current) { return orthogonality_loss(current.layers); }

// Squared Euclidean distance between current and previous embeddings.
inline double embedding_distillation_loss(std::span<const double> current, std::span<const double> previous,
                                          std::vector<double>* grad = nullptr, double grad_scale = 1.0) {
    if (current.size() != previous.size())
        throw ShapeError("embedding distillation: dimension " + std::to_string(current.size()) + " vs " +
                         std::to_string(previous.size()));
    double s = 0.0;
    if (grad) grad->assign(current.size(), 0.0);
    for (std::size_t i = 0; i < current.size(); ++i) {
        const double d = current[i] - previous[i];
        s += d * d;
        if (grad) (*grad)[i] = 2.0 * grad_scale * d;
    }
    return s;
}

// cls + lambda*alpha_feat*dist_feat + lambda*alpha_embed*dist_embed + beta*ortho.
inline double total_loss(double cls, double dist_feat, double dist_embed, double ortho, const LossWeights& w) {
    const std::pair<const char*, double> terms[] = {
        {"cls", cls}, {"dist_feat", dist_feat}, {"dist_embed", dist_embed}, {"ortho", ortho}};
    for (const auto& [name, v] : terms)
        if (!std::isfinite(v)) throw NumericError(std::string("total_loss: non-finite ") + name + " term");
    return cls + w.lambda_scale * w.alpha_feat * dist_feat + w.lambda_scale * w.alpha_embed * dist_embed +
           w.beta * ortho;
}

}  // namespace tcdlab
