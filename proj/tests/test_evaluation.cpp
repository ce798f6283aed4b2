#include <gtest/gtest.h>

#include <fstream>

#include "test_util.hpp"

using namespace tcdlab;
using namespace tcdlab::testing;

namespace {

std::vector<VideoSample> labelled(const Model& m, std::vector<ClassId> labels, std::uint64_t seed) {
    std::vector<VideoSample> out;
    for (std::size_t i = 0; i < labels.size(); ++i) out.push_back(toy_sample(m, labels[i], seed + i));
    return out;
}

MetricsRecord record(int step, double cnn, double nme) {
    MetricsRecord r;
    r.step = step;
    r.acc_cnn = cnn;
    r.acc_nme = nme;
    return r;
}

void write_fake_run(const std::filesystem::path& dir, const std::string& method, std::uint64_t seed,
                    const std::vector<double>& accs) {
    std::filesystem::create_directories(dir);
    write_json_file(dir / "config.json", json{{"method", method}, {"label", method}, {"seed", seed}});
    json groups = json::array();
    for (std::size_t k = 0; k < accs.size(); ++k) groups.push_back(json::array({static_cast<int>(k)}));
    write_json_file(dir / "task_stream.json", json{{"groups", groups}});
    for (std::size_t k = 0; k < accs.size(); ++k) {
        std::filesystem::create_directories(dir / ("stage_" + std::to_string(k)));
        write_json_file(dir / ("stage_" + std::to_string(k)) / "metrics.json",
                        to_json(record(static_cast<int>(k), accs[k], accs[k] / 2)));
    }
}

}  // namespace

TEST(EvaluateCnn, MatchesArgmaxOverSeenScores) {
    const auto m = toy_model(1, 3);
    const auto test = labelled(m, {0, 1, 0, 1, 0, 1}, 10);
    const std::vector<ClassId> seen{0, 1};
    const auto r = evaluate_cnn(m, test, seen);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto sc = m.forward(test[i].frames).scores;
        const ClassId expected = sc[1] > sc[0] ? 1 : 0;
        EXPECT_EQ(r.predictions[i], expected);
        hits += expected == test[i].label;
    }
    EXPECT_DOUBLE_EQ(r.accuracy, 100.0 * static_cast<double>(hits) / 6.0);
}

TEST(EvaluateCnn, TiesGoToTheLowestClassId) {
    auto m = toy_model(2, 0);
    const std::vector<ClassId> cls{5, 2};
    new_class_head_init(m.head, cls, 3);
    for (std::size_t n = 0; n < m.head.n_proxy; ++n) {
        auto a = m.head.proxy(0, n);
        auto b = m.head.proxy(1, n);
        std::copy(b.begin(), b.end(), a.begin());
    }
    const auto test = labelled(m, {5, 2, 5}, 20);
    const auto r = evaluate_cnn(m, test, cls);
    for (auto p : r.predictions) EXPECT_EQ(p, 2);
}

TEST(EvaluateCnn, RejectsBadInputs) {
    const auto m = toy_model(3, 2);
    const std::vector<ClassId> seen{0, 1};
    EXPECT_THROW(evaluate_cnn(m, std::vector<VideoSample>{}, seen), std::invalid_argument);
    EXPECT_THROW(evaluate_cnn(m, labelled(m, {2}, 1), seen), std::invalid_argument);
    const std::vector<ClassId> unknown{0, 7};
    EXPECT_THROW(evaluate_cnn(m, labelled(m, {0}, 1), unknown), std::invalid_argument);
}

TEST(NearestMean, HandOracle) {
    const std::map<ClassId, std::vector<double>> means{{0, {1, 0}}, {1, {0, 1}}, {2, {-1, 0}}};
    EXPECT_EQ(nearest_mean(std::vector<double>{0.9, 0.1}, means), 0);
    EXPECT_EQ(nearest_mean(std::vector<double>{0.2, 3.0}, means), 1);
    EXPECT_EQ(nearest_mean(std::vector<double>{-5.0, 0.5}, means), 2);
    // equidistant between 0 and 1
    EXPECT_EQ(nearest_mean(std::vector<double>{1.0, 1.0}, means), 0);
}

TEST(EvaluateNme, UsesNormalizedEmbeddings) {
    const auto m = toy_model(4, 2);
    const auto test = labelled(m, {0, 1, 0, 1}, 30);
    std::map<ClassId, std::vector<double>> means;
    means[0] = normalized(m.embed(test[0].frames));
    means[1] = normalized(m.embed(test[1].frames));
    const auto r = evaluate_nme(m, means, test);
    EXPECT_EQ(r.predictions[0], 0);
    EXPECT_EQ(r.predictions[1], 1);
    for (std::size_t i = 0; i < test.size(); ++i) EXPECT_EQ(r.predictions[i], nearest_mean(m.embed(test[i].frames), means));
}

TEST(EvaluateNme, InvariantToEmbeddingRotation) {
    for (std::uint64_t trial = 0; trial < 10; ++trial) {
        auto m = toy_model(100 + trial, 3);
        const auto test = labelled(m, {0, 1, 2, 0, 1, 2, 0, 1, 2}, 200 * trial);
        std::map<ClassId, std::vector<double>> means;
        for (ClassId c = 0; c < 3; ++c) means[c] = normalized(m.embed(toy_sample(m, c, 999 + c).frames));
        const auto base = evaluate_nme(m, means, test);
        const auto q = random_rotation(6, trial);
        rotate_embedding(m, q);
        for (auto& [c, v] : means) v = rotate(q, v);
        EXPECT_EQ(evaluate_nme(m, means, test).predictions, base.predictions);
    }
}

TEST(EvaluateNme, MissingMeanIsAnError) {
    const auto m = toy_model(5, 2);
    const std::map<ClassId, std::vector<double>> means{{0, std::vector<double>(6, 1.0)}};
    EXPECT_THROW(evaluate_nme(m, means, labelled(m, {1}, 3)), std::invalid_argument);
    EXPECT_THROW(evaluate_nme(m, std::map<ClassId, std::vector<double>>{}, labelled(m, {0}, 3)),
                 std::invalid_argument);
}

TEST(AverageAccuracy, MeanOverStages) {
    const std::vector<MetricsRecord> r{record(0, 80, 1), record(1, 70, 2), record(2, 60, 3)};
    EXPECT_DOUBLE_EQ(average_incremental_accuracy(r, Protocol::CNN), 70.0);
    EXPECT_DOUBLE_EQ(average_incremental_accuracy(r, Protocol::NME), 2.0);
    EXPECT_DOUBLE_EQ(average_incremental_accuracy(r, Protocol::CNN, false), 65.0);
    EXPECT_THROW(average_incremental_accuracy(std::vector<MetricsRecord>{}, Protocol::CNN), std::invalid_argument);
    EXPECT_THROW(average_incremental_accuracy(std::span(r.data(), 1), Protocol::CNN, false), std::invalid_argument);
}

TEST(Metrics, JsonSchemaAndRoundTrip) {
    auto r = record(2, 75.5, 80.25);
    r.seen_classes = {0, 1, 2};
    r.per_class_accuracy = {{0, 100.0}, {2, 50.0}};
    r.loss_components = {{"cls", 1.5}, {"ortho", 0.25}};
    const json j = to_json(r);
    for (const char* k : {"step", "seen_class_count", "acc_cnn", "acc_nme", "per_class", "losses"})
        EXPECT_TRUE(j.contains(k)) << k;
    for (const char* k : {"cls", "dist_feat", "dist_embed", "ortho"}) EXPECT_TRUE(j["losses"].contains(k)) << k;
    EXPECT_EQ(j["seen_class_count"], 3);
    const auto back = metrics_from_json(j);
    EXPECT_EQ(back.acc_cnn, 75.5);
    EXPECT_EQ(back.acc_nme, 80.25);
    EXPECT_EQ(back.per_class_accuracy, r.per_class_accuracy);
    EXPECT_EQ(back.loss_components.at("dist_feat"), 0.0);
}

TEST(Report, SummaryRowsAndMeans) {
    TempDir dir("report");
    write_fake_run(dir.path / "a1", "tcd", 1, {80, 60});
    write_fake_run(dir.path / "a2", "tcd", 2, {90, 70});
    write_fake_run(dir.path / "b1", "finetune", 1, {50, 10});
    const std::vector<std::filesystem::path> runs{dir.path / "a1", dir.path / "a2", dir.path / "b1"};
    const auto csv = emit_report(runs, dir.path / "out");
    std::ifstream in(csv);
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    ASSERT_FALSE(lines.empty());
    EXPECT_EQ(lines[0], "method,protocol,seed,avg_inc_acc,final_step_acc");
    EXPECT_NE(std::find(lines.begin(), lines.end(), "tcd,cnn,mean,75.0000,65.0000"), lines.end());
    EXPECT_NE(std::find(lines.begin(), lines.end(), "tcd,nme,mean,37.5000,32.5000"), lines.end());
    EXPECT_NE(std::find(lines.begin(), lines.end(), "finetune,cnn,1,30.0000,10.0000"), lines.end());
    EXPECT_TRUE(std::filesystem::exists(dir.path / "out" / "accuracy_curve.svg"));
}

TEST(Report, MissingStageIsListed) {
    TempDir dir("report");
    write_fake_run(dir.path / "r", "tcd", 1, {80, 60, 40});
    std::filesystem::remove_all(dir.path / "r" / "stage_1");
    try {
        read_run(dir.path / "r");
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("stage_1"), std::string::npos);
    }
    EXPECT_THROW(read_run(dir.path / "absent"), std::runtime_error);
}
