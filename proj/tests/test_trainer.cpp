#include <gtest/gtest.h>

#include <swift/swift.hpp>

#include "test_util.hpp"

using namespace swift;
using testing_util::tiny_spec;

namespace {

TrainConfig quick_config() {
    TrainConfig c;
    c.epochs_stage1 = 3;
    c.epochs_stage2 = 2;
    c.epochs_stage3 = 2;
    c.batch_size = 8;
    c.mu = 2;
    return c;
}

} // namespace

TEST(Config, DefaultsFollowTheRecipe) {
    const TrainConfig c;
    EXPECT_EQ(c.epochs_stage1, 50u);
    EXPECT_EQ(c.epochs_stage2, 50u);
    EXPECT_EQ(c.epochs_stage3, 10u);
    EXPECT_EQ(c.batch_size, 32u);
    EXPECT_EQ(c.mu, 5u);
    EXPECT_EQ(c.head_lr, 1e-4);
    EXPECT_EQ(c.adapter_lr, 1e-6);
    EXPECT_EQ(c.weight_decay, 1e-2);
    EXPECT_EQ(c.t_conf, 0.01);
    EXPECT_EQ(c.sigma, 0.8);
    EXPECT_EQ(c.t_loss_init, 0.07);
    EXPECT_EQ(c.t_loss_floor, 0.01);
    EXPECT_EQ(c.stages, (std::vector<int>{1, 2, 3}));
    EXPECT_NO_THROW(c.validate());
}

TEST(Config, JsonRoundTrip) {
    TrainConfig c = quick_config();
    c.method = Method::debiaspl;
    c.init = HeadInit::random;
    c.debias_offset_space = OffsetSpace::scaled;
    c.seed = 99;
    TrainConfig back;
    apply_config(back, to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, UnknownKeysAndBadValuesAreRejected) {
    TrainConfig c;
    EXPECT_THROW(apply_config_value(c, "learning_rate", 0.1), ConfigError);
    EXPECT_THROW(apply_config_value(c, "method", "mixmatch"), ConfigError);
    EXPECT_THROW(apply_config_value(c, "epochs_stage1", "ten"), ConfigError);
    EXPECT_THROW(apply_config(c, nlohmann::json::array()), ConfigError);
}

TEST(Config, ValidationRejectsNonsense) {
    auto bad = [](auto mutate) {
        TrainConfig c;
        mutate(c);
        return c;
    };
    EXPECT_THROW(bad([](TrainConfig& c) { c.mu = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig& c) { c.head_lr = 0; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig& c) { c.sigma = 1.2; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig& c) { c.stages = {4}; }).validate(), ConfigError);
    EXPECT_THROW(bad([](TrainConfig& c) { c.t_conf = 0; }).validate(), ConfigError);
}

TEST(Stage1, ZeroEpochsReturnsTextInitializedModel) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.epochs_stage1 = 0;
    const auto r = run_stage1(b, cfg);
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(r.model.head.weights, init_head_from_text(b.text, b.num_classes).weights);
    EXPECT_FALSE(r.model.adapter.enabled);
}

TEST(Stage1, SeparableTaskIsLearnedPerfectly) {
    SyntheticSpec s;
    s.num_classes = 10;
    s.dim = 16;
    s.sample_noise = 0.05;
    s.nuisance_noise = 0.0;
    s.unlabeled_per_class = 0;
    s.retrieved_per_class = 0;
    s.seed = 1;
    const auto b = make_synthetic(s);
    const auto r = run_stage1(b, TrainConfig{});
    ASSERT_EQ(r.history.size(), 50u);
    EXPECT_EQ(*r.history.back().train_acc, 1.0);
    EXPECT_GT(*r.history.back().test_acc, 0.95);
}

TEST(Stage1, AdapterStaysDisabledAndTemperatureRespectsFloor) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.epochs_stage1 = 20;
    cfg.temperature_lr = 0.5;
    const auto r = run_stage1(b, cfg);
    EXPECT_FALSE(r.model.adapter.enabled);
    for (const auto& rec : r.history) EXPECT_GE(rec.t_loss_x, 0.01);
}

TEST(Stage1, FixedTemperatureIsNeverUpdated) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.learn_t_loss_x = cfg.learn_t_loss_u = false;
    cfg.t_loss_init = 1.0;
    const auto r = run_stage1(b, cfg);
    EXPECT_EQ(r.model.temps.theta_x, 0.0);
    for (const auto& rec : r.history) EXPECT_EQ(rec.t_loss_x, 1.0);
}

TEST(Stage1, LearningRateFollowsCosineSchedule) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.epochs_stage1 = 4;
    const auto r = run_stage1(b, cfg);
    const std::size_t per_epoch = r.history[0].steps;
    EXPECT_EQ(per_epoch, (b.labeled.size() + cfg.batch_size - 1) / cfg.batch_size);
    for (std::size_t e = 0; e < r.history.size(); ++e) {
        const std::size_t last_step = (e + 1) * per_epoch - 1;
        EXPECT_DOUBLE_EQ(r.history[e].lr, cosine_lr(last_step, 4 * per_epoch, cfg.head_lr));
    }
}

TEST(Stage2, ConsumesThirtyTwoPlusMuTimesThirtyTwoPerStep) {
    auto spec = tiny_spec();
    spec.unlabeled_per_class = 100;
    const auto b = make_synthetic(spec);
    TrainConfig cfg;
    cfg.epochs_stage2 = 2;
    const auto s1 = run_stage1(b, quick_config());
    const auto r = run_stage2(b, s1.model, cfg);
    const std::size_t pool = b.unlabeled_count() + b.labeled.size();
    for (const auto& rec : r.history) {
        EXPECT_EQ(rec.steps, pool / 160);
        EXPECT_EQ(rec.labeled_samples, 32 * rec.steps);
        EXPECT_EQ(rec.unlabeled_samples, 160 * rec.steps);
        EXPECT_EQ(rec.labeled_samples + rec.unlabeled_samples, 192 * rec.steps);
    }
}

TEST(Stage2, EnablesAdapterAndRecordsDiagnostics) {
    const auto b = make_synthetic(tiny_spec());
    const auto s1 = run_stage1(b, quick_config());
    const auto r = run_stage2(b, s1.model, quick_config());
    EXPECT_TRUE(r.model.adapter.enabled);
    EXPECT_EQ(r.model.adapter.hidden(), b.dim() / 4);
    ASSERT_EQ(r.history.size(), 2u);
    for (const auto& rec : r.history) {
        EXPECT_EQ(rec.stage, 2);
        EXPECT_TRUE(rec.utilization.has_value());
        EXPECT_TRUE(rec.unlabeled_loss.has_value());
        EXPECT_TRUE(rec.labeled_loss.has_value());
        EXPECT_TRUE(rec.retrieved_loss.has_value());
        EXPECT_TRUE(rec.pseudo_label_acc_all.has_value());
        EXPECT_EQ(rec.selected_class_counts.size(), b.num_classes);
    }
}

TEST(Stage2, WithoutRetrievalAugmentationOnlyLabeledRowsAreUsed) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.retrieval_augmentation = false;
    const auto r = run_stage2(b, run_stage1(b, cfg).model, cfg);
    for (const auto& rec : r.history) EXPECT_FALSE(rec.retrieved_loss.has_value());
}

TEST(Stage2, RetrievedFractionFixesBatchComposition) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.retrieved_fraction = 0.0;
    const auto r = run_stage2(b, run_stage1(b, cfg).model, cfg);
    for (const auto& rec : r.history) EXPECT_FALSE(rec.retrieved_loss.has_value());
    cfg.retrieved_fraction = 1.0;
    const auto all_r = run_stage2(b, run_stage1(b, cfg).model, cfg);
    for (const auto& rec : all_r.history) EXPECT_FALSE(rec.labeled_loss.has_value());
}

TEST(Stage2, EmptyUnlabeledDegeneratesWithWarning) {
    auto spec = tiny_spec();
    spec.unlabeled_per_class = 0;
    const auto b = make_synthetic(spec);
    std::vector<std::string> logs;
    const auto r = run_stage2(b, run_stage1(b, quick_config()).model, quick_config(),
                              [&](const std::string& m) { logs.push_back(m); });
    ASSERT_EQ(logs.size(), 1u);
    EXPECT_NE(logs[0].find("unlabeled split is empty"), std::string::npos);
    for (const auto& rec : r.history) {
        EXPECT_FALSE(rec.utilization.has_value());
        EXPECT_EQ(rec.unlabeled_samples, 0u);
    }
}

TEST(Stage2, UnitTconfOnTwoHundredClassesNeverSelects) {
    SyntheticSpec s;
    s.num_classes = 200;
    s.dim = 32;
    s.shots = 2;
    s.unlabeled_per_class = 2;
    s.retrieved_per_class = 0;
    s.test_per_class = 2;
    const auto b = make_synthetic(s);
    auto cfg = quick_config();
    cfg.t_conf = 1.0;
    cfg.epochs_stage2 = 3;
    const auto r = run_stage2(b, initial_model(b, cfg), cfg);
    for (const auto& rec : r.history) {
        EXPECT_EQ(*rec.utilization, 0.0);
        EXPECT_EQ(*rec.unlabeled_loss, 0.0);
    }
}

TEST(Stage2, DebiasRunsAndKeepsTemperaturesAboveFloor) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.method = Method::debiaspl;
    cfg.temperature_lr = 0.3;
    cfg.epochs_stage2 = 5;
    const auto r = run_stage2(b, run_stage1(b, cfg).model, cfg);
    for (const auto& rec : r.history) {
        EXPECT_GE(rec.t_loss_x, 0.01);
        EXPECT_GE(rec.t_loss_u, 0.01);
    }
}

TEST(Stage3, RequiresLabeledData) {
    auto b = make_synthetic(tiny_spec());
    const auto model = run_stage1(b, quick_config()).model;
    b.labeled = {EmbeddingTable::empty(b.dim()), {}};
    EXPECT_THROW(run_stage3(b, model, quick_config()), ConfigError);
}

TEST(Stage3, ZeroEpochsLeavesModelUnchanged) {
    const auto b = make_synthetic(tiny_spec());
    const auto s2 = run_stage2(b, run_stage1(b, quick_config()).model, quick_config());
    auto cfg = quick_config();
    cfg.epochs_stage3 = 0;
    const auto r = run_stage3(b, s2.model, cfg);
    EXPECT_EQ(r.model.head.weights, s2.model.head.weights);
    EXPECT_EQ(r.model.adapter.first, s2.model.adapter.first);
    EXPECT_EQ(r.model.adapter.second, s2.model.adapter.second);
}

TEST(Stage3, TrainsAdapter) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.adapter_lr = 1e-2;
    const auto s2 = run_stage2(b, run_stage1(b, cfg).model, cfg);
    const auto r = run_stage3(b, s2.model, cfg);
    EXPECT_NE(r.model.adapter.second, s2.model.adapter.second);
}

TEST(Pipeline, StageOneOnlyMatchesRunStage1) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.stages = {1};
    const auto report = run_swift(b, cfg);
    const auto direct = run_stage1(b, cfg);
    ASSERT_EQ(report.history.size(), direct.history.size());
    for (std::size_t i = 0; i < direct.history.size(); ++i) {
        EXPECT_EQ(to_json(report.history[i]), to_json(direct.history[i]));
    }
    EXPECT_EQ(*report.final_test_acc, *direct.history.back().test_acc);
}

TEST(Pipeline, DeterministicReports) {
    const auto b = make_synthetic(tiny_spec(5));
    const auto cfg = quick_config();
    EXPECT_EQ(to_json(run_swift(b, cfg)).dump(), to_json(run_swift(b, cfg)).dump());
}

TEST(Pipeline, SeedChangesTrajectory) {
    const auto b = make_synthetic(tiny_spec(5));
    auto cfg = quick_config();
    const auto a = to_json(run_swift(b, cfg)).dump();
    cfg.seed = 1;
    EXPECT_NE(to_json(run_swift(b, cfg)).dump(), a);
}

TEST(Pipeline, HistoryOrderedByStageAndEpoch) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.stages = {3, 1, 2};
    const auto r = run_swift(b, cfg);
    for (std::size_t i = 1; i < r.history.size(); ++i) {
        const auto& p = r.history[i - 1];
        const auto& c = r.history[i];
        EXPECT_TRUE(p.stage < c.stage || (p.stage == c.stage && p.epoch + 1 == c.epoch));
    }
    EXPECT_EQ(r.stage_test_acc.size(), 3u);
    EXPECT_TRUE(r.final_utilization.has_value());
}

TEST(Pipeline, SkippingStageOneFallsBackToTextInitWithNotice) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.stages = {2};
    std::vector<std::string> logs;
    const auto r = run_swift(b, cfg, [&](const std::string& m) { logs.push_back(m); });
    ASSERT_FALSE(logs.empty());
    EXPECT_NE(logs[0].find("text-initialized"), std::string::npos);
    EXPECT_EQ(r.history.front().stage, 2);
}

TEST(Pipeline, StartModelIsUsedWhenStageOneIsSkipped) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.epochs_stage3 = 0;
    cfg.stages = {3};
    Model start = run_stage1(b, cfg).model;
    start.head.weights *= 0.5;
    int calls = 0;
    const auto r = run_swift(b, cfg, {}, start, [&](int stage, const Model& m) {
        ++calls;
        EXPECT_EQ(stage, 3);
        EXPECT_EQ(m.head.weights, start.head.weights);
    });
    EXPECT_EQ(calls, 1);
    EXPECT_EQ(*r.final_test_acc, evaluate(start, b.test));
}

TEST(Pipeline, TemperaturesCarryOverUnlessReset) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.stages = {1, 3};
    cfg.temperature_lr = 0.05;
    const auto carried = run_swift(b, cfg);
    const auto s1_end = carried.stage_rows(1).back()->t_loss_x;
    EXPECT_NE(s1_end, 0.07);
    cfg.reset_t_loss_between_stages = true;
    const auto reset = run_swift(b, cfg);
    // the first stage-3 epoch starts from 0.07 again, so it differs from the carried run
    EXPECT_NE(reset.stage_rows(3).front()->t_loss_x, carried.stage_rows(3).front()->t_loss_x);
}

TEST(Pipeline, MismatchedStartModelIsRejected) {
    const auto b = make_synthetic(tiny_spec());
    auto cfg = quick_config();
    cfg.stages = {2};
    Model wrong;
    wrong.head.weights = Matrix::Zero(3, 3);
    EXPECT_THROW(run_swift(b, cfg, {}, wrong), ShapeError);
}
