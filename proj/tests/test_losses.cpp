#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace tcdlab;
using namespace tcdlab::testing;

namespace {

ImportanceMask uniform_mask(std::span<const Tensor4> layers, double value = 1.0) {
    ImportanceMask m;
    for (const auto& f : layers) {
        m.T.push_back(f.dim(0));
        m.C.push_back(f.dim(1));
        m.raw.emplace_back(f.dim(0) * f.dim(1), value);
        m.normalized.emplace_back(f.dim(0) * f.dim(1), value);
        m.layer_names.push_back("layer" + std::to_string(m.raw.size() - 1));
    }
    return m;
}

std::vector<Tensor4> random_stack(std::uint64_t seed) {
    return {random_tensor(4, 3, 2, 2, seed), random_tensor(4, 5, 1, 3, seed + 1)};
}

}  // namespace

TEST(Distillation, SingleEntryOracle) {
    const std::vector<Tensor4> cur{Tensor4(1, 1, 1, 1, 3.0)}, prev{Tensor4(1, 1, 1, 1, 1.0)};
    EXPECT_EQ(distillation_loss(cur, prev, uniform_mask(cur)), 4.0);
}

TEST(Distillation, IdenticalStacksGiveZero) {
    const auto a = random_stack(1);
    EXPECT_EQ(distillation_loss(a, a, uniform_mask(a)), 0.0);
}

TEST(Distillation, OnesMaskEqualsUnweightedExactly) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto a = random_stack(seed), b = random_stack(seed + 100);
        EXPECT_EQ(distillation_loss(a, b, uniform_mask(a)), unweighted_distillation_loss(a, b));
    }
}

TEST(Distillation, MatchesTripleLoopOracle) {
    const auto a = random_stack(3), b = random_stack(4);
    auto mask = uniform_mask(a);
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.0, 3.0);
    for (auto& l : mask.normalized)
        for (auto& v : l) v = u(rng);
    double expected = 0.0;
    for (std::size_t l = 0; l < a.size(); ++l)
        for (std::size_t t = 0; t < a[l].dim(0); ++t)
            for (std::size_t c = 0; c < a[l].dim(1); ++c)
                for (std::size_t h = 0; h < a[l].dim(2); ++h)
                    for (std::size_t w = 0; w < a[l].dim(3); ++w) {
                        const double d = a[l](t, c, h, w) - b[l](t, c, h, w);
                        expected += mask.normalized[l][t * a[l].dim(1) + c] * d * d;
                    }
    EXPECT_NEAR(distillation_loss(a, b, mask), expected, 1e-12 * expected);
}

TEST(Distillation, QuadraticInTheDifference) {
    const auto a = random_stack(5), b = random_stack(6);
    auto scaled = a;
    for (std::size_t l = 0; l < a.size(); ++l)
        for (std::size_t i = 0; i < a[l].data().size(); ++i)
            scaled[l].data()[i] = b[l].data()[i] + 3.0 * (a[l].data()[i] - b[l].data()[i]);
    const auto mask = uniform_mask(a);
    const double base = distillation_loss(a, b, mask);
    EXPECT_NEAR(distillation_loss(scaled, b, mask), 9.0 * base, 1e-12 * base);
}

TEST(Distillation, MonotoneInMaskEntries) {
    const auto a = random_stack(7), b = random_stack(8);
    auto mask = uniform_mask(a);
    const double base = distillation_loss(a, b, mask);
    mask.normalized[1][2] += 0.5;
    EXPECT_GE(distillation_loss(a, b, mask), base);
}

TEST(Distillation, ShapeMismatchIsAnError) {
    const auto a = random_stack(1);
    auto b = random_stack(2);
    b[1] = random_tensor(4, 5, 1, 2, 3);
    EXPECT_THROW(distillation_loss(a, b, uniform_mask(a)), ShapeError);
    EXPECT_THROW(unweighted_distillation_loss(a, std::span(b.data(), 1)), ShapeError);
    auto bad = uniform_mask(a);
    bad.C[0] = 2;
    EXPECT_THROW(distillation_loss(a, a, bad), ShapeError);
}

TEST(Orthogonality, SingleSegmentIsZero) {
    const std::vector<Tensor4> f{random_tensor(1, 3, 2, 2, 1)};
    EXPECT_EQ(orthogonality_loss(f), 0.0);
}

TEST(Orthogonality, DuplicatedRowsGiveExactlyTwo) {
    Tensor4 f(2, 1, 1, 2);
    f(0, 0, 0, 0) = f(1, 0, 0, 0) = 1.0;
    const std::vector<Tensor4> stack{f};
    EXPECT_EQ(orthogonality_loss(stack), 2.0);
}

TEST(Orthogonality, OrthonormalRowsGiveExactlyZero) {
    Tensor4 f(3, 2, 1, 4);
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t t = 0; t < 3; ++t) f(t, c, 0, (t + c) % 4) = c == 0 ? 1.0 : 2.5;
    const std::vector<Tensor4> stack{f};
    EXPECT_EQ(orthogonality_loss(stack), 0.0);
}

TEST(Orthogonality, ZeroRowContributesOne) {
    Tensor4 f(2, 1, 1, 2);
    f(0, 0, 0, 0) = 1.0;
    const std::vector<Tensor4> stack{f};
    EXPECT_NEAR(orthogonality_loss(stack), 1.0, 1e-12);
}

TEST(Orthogonality, InvariantToPositiveRowRescaling) {
    const auto f = random_stack(11);
    auto g = f;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.1, 10.0);
    for (auto& layer : g)
        for (std::size_t t = 0; t < layer.dim(0); ++t)
            for (std::size_t c = 0; c < layer.dim(1); ++c) {
                const double k = u(rng);
                for (auto& v : layer.plane(t, c)) v *= k;
            }
    EXPECT_NEAR(orthogonality_loss(g), orthogonality_loss(f), 1e-10);
}

TEST(Orthogonality, GradientMatchesFiniteDifferences) {
    auto f = random_stack(12);
    std::vector<Tensor4> grad;
    orthogonality_loss(f, &grad);
    const double h = 1e-6;
    for (std::size_t l = 0; l < f.size(); ++l)
        for (std::size_t i = 0; i < f[l].data().size(); ++i) {
            const double keep = f[l].data()[i];
            f[l].data()[i] = keep + h;
            const double up = orthogonality_loss(f);
            f[l].data()[i] = keep - h;
            const double dn = orthogonality_loss(f);
            f[l].data()[i] = keep;
            EXPECT_NEAR(grad[l].data()[i], (up - dn) / (2 * h), 1e-6 + 1e-5 * std::abs(grad[l].data()[i]));
        }
}

TEST(EmbeddingDistillation, UnitVectorOracle) {
    const std::vector<double> a{1, 0}, b{0, 1};
    EXPECT_EQ(embedding_distillation_loss(a, b), 2.0);
    EXPECT_THROW(embedding_distillation_loss(a, std::vector<double>{1.0}), ShapeError);
}

TEST(TotalLoss, CombinesTermsWithWeights) {
    LossWeights w;
    w.alpha_feat = 1.0;
    w.alpha_embed = 0.01;
    w.beta = 0.1;
    w.lambda_scale = adaptive_lambda(6, 1);
    EXPECT_NEAR(w.lambda_scale, std::sqrt(6.0), 1e-15);
    const double expected = 1.5 + std::sqrt(6.0) * (1.0 * 2.0 + 0.01 * 3.0) + 0.1 * 4.0;
    EXPECT_NEAR(total_loss(1.5, 2.0, 3.0, 4.0, w), expected, 1e-12);
}

TEST(TotalLoss, InitialStageHasNoDistillation) {
    LossWeights w;
    EXPECT_EQ(total_loss(1.0, 50.0, 50.0, 2.0, w), 1.0 + w.beta * 2.0);
    EXPECT_THROW(adaptive_lambda(4, 0), std::invalid_argument);
}

TEST(TotalLoss, NonFiniteTermIsNamed) {
    LossWeights w;
    try {
        total_loss(1.0, std::nan(""), 0.0, 0.0, w);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("dist_feat"), std::string::npos);
    }
    EXPECT_THROW(total_loss(1.0, 0.0, 0.0, INFINITY, w), NumericError);
}

// Full objective as a function of feature offsets: checks the analytic feature
// gradient (distillation, orthogonality and classification through later layers).
TEST(TotalLoss, FeatureGradientMatchesFiniteDifferences) {
    const auto cur = toy_model(31);
    const auto prev = toy_model(32);
    const auto s = toy_sample(cur, 2, 33);
    const auto prev_fs = prev.forward(s.frames);
    auto mask = normalize_importance(compute_importance(prev, std::span(&s, 1)));
    LossWeights w;
    w.alpha_feat = 0.7;
    w.alpha_embed = 0.3;
    w.beta = 0.2;
    w.lambda_scale = adaptive_lambda(3, 1);

    auto objective = [&](const std::vector<Tensor4>* off) {
        const auto fs = cur.forward(s.frames, nullptr, off);
        const double cls = nca_loss(fs.scores, 2, cur.head.eta, cur.head.delta).value;
        return total_loss(cls, distillation_loss(fs.layers, prev_fs.layers, mask),
                          embedding_distillation_loss(fs.embedding, prev_fs.embedding), orthogonality_loss(fs.layers),
                          w);
    };
    StageContext ctx;
    ctx.previous = &prev;
    ctx.mask = &mask;
    ctx.weights = w;
    std::vector<Tensor4> grads;
    const auto sl = sample_objective(cur, s.frames, s.label, ctx, nullptr, nullptr, &grads);
    EXPECT_NEAR(sl.total, objective(nullptr), 1e-12 * sl.total);

    const auto fs = cur.forward(s.frames);
    std::vector<Tensor4> off;
    for (const auto& f : fs.layers) off.emplace_back(f.dim(0), f.dim(1), f.dim(2), f.dim(3));
    const double h = 1e-6;
    for (std::size_t l = 0; l < off.size(); ++l) {
        std::vector<double> fd;
        for (std::size_t i = 0; i < off[l].data().size(); ++i) {
            off[l].data()[i] = h;
            const double up = objective(&off);
            off[l].data()[i] = -h;
            const double dn = objective(&off);
            off[l].data()[i] = 0.0;
            fd.push_back((up - dn) / (2 * h));
        }
        EXPECT_LT(vec_rel_err(fd, grads[l].data()), 1e-4) << "layer " << l;
    }
}
