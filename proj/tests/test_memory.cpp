#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace tcdlab;
using namespace tcdlab::testing;

namespace {

std::vector<std::vector<double>> random_points(std::size_t n, std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd;
    std::vector<std::vector<double>> x(n, std::vector<double>(dim));
    for (auto& v : x)
        for (auto& e : v) e = nd(rng);
    return x;
}

std::vector<VideoSample> videos(const Model& m, ClassId label, std::size_t n, std::size_t frames, std::uint64_t seed) {
    const auto& c = m.backbone.config();
    std::vector<VideoSample> out;
    for (std::size_t i = 0; i < n; ++i) {
        VideoSample s;
        s.frames = random_tensor(frames, c.in_channels, c.height, c.width, seed + i);
        s.label = label;
        s.id = "v" + std::to_string(label) + "_" + std::to_string(i);
        s.origin = "test";
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace

TEST(Herding, HandOracle) {
    // mean is (1, 0); the point at the mean goes first, then the pair that keeps it balanced
    const std::vector<std::vector<double>> x{{0, 0}, {1, 0}, {2, 0}, {1, 3}, {1, -3}};
    const auto picks = herding_select(x, 5);
    EXPECT_EQ(picks, (std::vector<std::size_t>{1, 0, 2, 3, 4}));
}

TEST(Herding, MatchesIndependentOracle) {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng() % 12, dim = 1 + rng() % 4, budget = 1 + rng() % n;
        const auto x = random_points(n, dim, rng());
        EXPECT_EQ(herding_select(x, budget), herding_oracle(x, budget)) << "trial " << trial;
    }
}

TEST(Herding, SmallerBudgetIsAPrefix) {
    const auto x = random_points(12, 3, 5);
    const auto full = herding_select(x, 12);
    for (std::size_t b = 1; b <= 12; ++b) {
        const auto part = herding_select(x, b);
        EXPECT_TRUE(std::equal(part.begin(), part.end(), full.begin())) << b;
    }
}

TEST(Herding, BudgetAboveCountReturnsEverything) {
    const auto x = random_points(3, 2, 6);
    auto picks = herding_select(x, 10);
    std::sort(picks.begin(), picks.end());
    EXPECT_EQ(picks, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(Herding, InvalidInputs) {
    EXPECT_THROW(herding_select(std::vector<std::vector<double>>{}, 1), std::invalid_argument);
    EXPECT_THROW(herding_select(random_points(3, 2, 1), 0), std::invalid_argument);
    EXPECT_THROW(herding_select(std::vector<std::vector<double>>{{1, 2}, {1}}, 1), ShapeError);
}

TEST(FrameSampling, UniformPicksBinCentres) {
    EXPECT_EQ(sample_frame_indices(16, SamplingStrategy::Uniform, 8, 0),
              (std::vector<std::size_t>{1, 3, 5, 7, 9, 11, 13, 15}));
}

TEST(FrameSampling, EqualLengthIsIdentity) {
    EXPECT_EQ(sample_frame_indices(8, SamplingStrategy::Uniform, 8, 0),
              (std::vector<std::size_t>{0, 1, 2, 3, 4, 5, 6, 7}));
}

TEST(FrameSampling, RandomIsSortedDistinctAndSeeded) {
    const auto a = sample_frame_indices(16, SamplingStrategy::Random, 8, 42);
    EXPECT_EQ(a, sample_frame_indices(16, SamplingStrategy::Random, 8, 42));
    EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
    EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
    EXPECT_LT(a.back(), 16u);
    bool differs = false;
    for (std::uint64_t s = 0; s < 10 && !differs; ++s)
        differs = sample_frame_indices(16, SamplingStrategy::Random, 8, s) != a;
    EXPECT_TRUE(differs);
}

TEST(FrameSampling, AllKeepsEveryFrame) {
    EXPECT_EQ(sample_frame_indices(5, SamplingStrategy::All, 3, 0).size(), 5u);
}

TEST(FrameSampling, TooShortVideoIsAnError) {
    EXPECT_THROW(sample_frame_indices(4, SamplingStrategy::Uniform, 8, 0), std::invalid_argument);
    EXPECT_THROW(sample_frame_indices(4, SamplingStrategy::Random, 8, 0), std::invalid_argument);
}

TEST(FrameSampling, StrategyNames) {
    for (auto s : {SamplingStrategy::All, SamplingStrategy::Random, SamplingStrategy::Uniform})
        EXPECT_EQ(parse_sampling_strategy(to_string(s)), s);
    EXPECT_THROW(parse_sampling_strategy("every"), ConfigError);
}

TEST(FrameSampling, SegmentIndicesStayInTheirBins) {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
        const auto idx = segment_indices(16, 8, rng);
        for (std::size_t t = 0; t < 8; ++t) {
            EXPECT_GE(idx[t], 2 * t);
            EXPECT_LT(idx[t], 2 * t + 2);
        }
    }
}

TEST(Memory, RespectsBudgetAndStoresSampledClips) {
    const auto m = toy_model(1, 3);
    ExemplarMemory mem;
    mem.budget_per_class = 3;
    mem.T = 4;
    mem.strategy = SamplingStrategy::Uniform;
    auto data = videos(m, 0, 7, 8, 10);
    const auto more = videos(m, 1, 2, 8, 30);
    data.insert(data.end(), more.begin(), more.end());
    Log::instance().set_quiet(true);
    update_memory(mem, data, m);
    Log::instance().set_quiet(false);
    EXPECT_EQ(mem.per_class.at(0).size(), 3u);
    EXPECT_EQ(mem.per_class.at(1).size(), 2u);
    for (const auto* s : mem.all()) EXPECT_EQ(s->frame_count(), 4u);
    EXPECT_THROW(update_memory(mem, more, m), std::logic_error);
}

TEST(Memory, AllStrategyKeepsFullVideos) {
    const auto m = toy_model(2, 3);
    ExemplarMemory mem;
    mem.budget_per_class = 2;
    mem.T = 4;
    mem.strategy = SamplingStrategy::All;
    update_memory(mem, videos(m, 2, 5, 8, 50), m);
    for (const auto* s : mem.all()) EXPECT_EQ(s->frame_count(), 8u);
}

TEST(Memory, HerdingOrderFollowsEmbeddings) {
    const auto m = toy_model(3, 3);
    ExemplarMemory mem;
    mem.budget_per_class = 4;
    mem.T = 4;
    const auto data = videos(m, 0, 9, 4, 70);
    update_memory(mem, data, m);
    std::vector<std::vector<double>> feats;
    for (const auto& s : data) feats.push_back(normalized(m.embed(s.frames)));
    const auto picks = herding_select(feats, 4);
    for (std::size_t r = 0; r < 4; ++r) EXPECT_EQ(mem.per_class.at(0)[r].id, data[picks[r]].id);
}

TEST(Memory, ClassMeansAreNormalizedAverages) {
    const auto m = toy_model(4, 3);
    ExemplarMemory mem;
    mem.budget_per_class = 3;
    mem.T = 4;
    update_memory(mem, videos(m, 1, 3, 4, 90), m);
    const auto means = class_means(mem, m);
    std::vector<double> expected(6, 0.0);
    for (const auto& ex : mem.per_class.at(1)) {
        const auto e = m.embed(ex.frames);
        for (std::size_t d = 0; d < 6; ++d) expected[d] += e[d] / 3.0;
    }
    expected = normalized(expected);
    for (std::size_t d = 0; d < 6; ++d) EXPECT_NEAR(means.at(1)[d], expected[d], 1e-9);
    EXPECT_NEAR(l2_norm(means.at(1)), 1.0, 1e-9);
}

TEST(Memory, SingleExemplarMeanIsItsNormalizedEmbedding) {
    const auto m = toy_model(5, 3);
    ExemplarMemory mem;
    mem.budget_per_class = 1;
    mem.T = 4;
    const auto data = videos(m, 0, 1, 4, 3);
    update_memory(mem, data, m);
    const auto expected = normalized(m.embed(data[0].frames));
    const auto got = class_means(mem, m).at(0);
    for (std::size_t d = 0; d < 6; ++d) EXPECT_NEAR(got[d], expected[d], 1e-9);
}

TEST(Memory, ArchiveRoundTripIsExact) {
    const auto m = toy_model(6, 3);
    ExemplarMemory mem;
    mem.budget_per_class = 2;
    mem.T = 4;
    mem.strategy = SamplingStrategy::Random;
    mem.seed = 99;
    update_memory(mem, videos(m, 0, 4, 8, 5), m);
    update_memory(mem, videos(m, 2, 4, 8, 15), m);
    TempDir dir("mem");
    save_memory(dir.path / "memory.json", mem);
    EXPECT_TRUE(load_memory(dir.path / "memory.json") == mem);
}
