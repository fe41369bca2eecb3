#include <gtest/gtest.h>

#include "ltmp/trainer.hpp"
#include "test_support.hpp"

using namespace ltmp;

namespace {

ModelConfig micro_config() {
    ModelConfig c = test_util::tiny_config();
    c.embed_dim = 8;
    c.heads = 2;
    c.blocks = 2;
    c.mlp_ratio = 2;
    return c;
}

Dataset micro_dataset(std::size_t samples, Split split = Split::train) {
    SynthDatasetSpec spec;
    spec.samples = samples;
    spec.image_size = 16;
    spec.classes = 4;
    spec.seed = 3;
    spec.split = split;
    return generate_dataset(spec);
}

PretrainConfig quick_pretrain() {
    PretrainConfig pc;
    pc.epochs = 1;
    pc.batch_size = 8;
    pc.lr = 1e-2;
    pc.seed = 4;
    return pc;
}

FinetuneConfig quick_finetune(double target) {
    FinetuneConfig fc;
    fc.r_target = target;
    fc.batch_size = 8;
    fc.lr_merge = 1e-2;
    fc.lr_prune = 1e-5;
    fc.seed = 5;
    return fc;
}

}  // namespace

TEST(Pretrain, ZeroEpochsReturnsBackboneUnchanged) {
    const auto ck = make_checkpoint(micro_config(), 1);
    auto pc = quick_pretrain();
    pc.epochs = 0;
    const auto out = pretrain_backbone(ck, micro_dataset(8), nullptr, pc);
    EXPECT_EQ(params_checksum(out.params), params_checksum(ck.params));
    EXPECT_EQ(out.thresholds, ThresholdSet::initial(2));
}

TEST(Pretrain, IsDeterministicAndLowersLoss) {
    const auto ck = make_checkpoint(micro_config(), 1);
    const auto train = micro_dataset(32);
    std::vector<double> losses;
    auto pc = quick_pretrain();
    pc.epochs = 3;
    pc.log_every = 1;
    const auto a = pretrain_backbone(ck, train, nullptr, pc, [&](const nlohmann::json& j) {
        if (j["event"] == "pretrain_step") losses.push_back(j["loss"].get<double>());
    });
    const auto b = pretrain_backbone(ck, train, nullptr, pc);
    EXPECT_EQ(params_checksum(a.params), params_checksum(b.params));
    EXPECT_NE(params_checksum(a.params), params_checksum(ck.params));
    ASSERT_EQ(losses.size(), 12u);
    const double first = (losses[0] + losses[1] + losses[2] + losses[3]) / 4;
    const double last = (losses[8] + losses[9] + losses[10] + losses[11]) / 4;
    EXPECT_LT(last, first);
}

TEST(Pretrain, ReportsValidationAccuracy) {
    const auto ck = make_checkpoint(micro_config(), 1);
    const auto out = pretrain_backbone(ck, micro_dataset(16), &static_cast<const Dataset&>(micro_dataset(8, Split::val)),
                                       quick_pretrain());
    const auto metrics = nlohmann::json::parse(out.meta.metrics);
    EXPECT_TRUE(metrics.contains("val_top1"));
    EXPECT_EQ(metrics["steps"], 2);
}

TEST(Pretrain, RejectsBadInputs) {
    const auto ck = make_checkpoint(micro_config(), 1);
    EXPECT_THROW(pretrain_backbone(ck, Dataset{16, 16, 3, {}, {}}, nullptr, quick_pretrain()), std::invalid_argument);
    auto pc = quick_pretrain();
    pc.lr = 0;
    EXPECT_THROW(pretrain_backbone(ck, micro_dataset(4), nullptr, pc), std::invalid_argument);
    SynthDatasetSpec wrong;
    wrong.samples = 2;
    EXPECT_THROW(pretrain_backbone(ck, generate_dataset(wrong), nullptr, quick_pretrain()), std::invalid_argument);
}

TEST(Pretrain, HugeLearningRateDiverges) {
    auto cfg = micro_config();
    const auto ck = make_checkpoint(cfg, 1);
    auto pc = quick_pretrain();
    pc.lr = 1e200;
    EXPECT_THROW(pretrain_backbone(ck, micro_dataset(32), nullptr, pc), DivergenceError);
}

TEST(Evaluate, CountsAndEmptyDataset) {
    const auto ck = make_checkpoint(micro_config(), 1);
    const auto ds = micro_dataset(10);
    const auto m = evaluate(ck, ds, ExecMode::inference);
    EXPECT_EQ(m.samples, 10u);
    EXPECT_EQ(m.predictions.size(), 10u);
    EXPECT_EQ(m.mean_r_flops, 1.0);
    for (double t : m.mean_tokens) EXPECT_EQ(t, 17.0);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < 10; ++i) correct += m.predictions[i] == ds.labels[i];
    EXPECT_DOUBLE_EQ(m.top1, 10.0 * static_cast<double>(correct));
    EXPECT_THROW(evaluate(ck, Dataset{16, 16, 3, {}, {}}, ExecMode::inference), std::invalid_argument);
}

TEST(Finetune, ChangesOnlyThresholds) {
    const auto ck = make_checkpoint(micro_config(), 1);
    const auto res = ltmp_finetune(ck, micro_dataset(24), quick_finetune(0.5));
    EXPECT_EQ(params_checksum(res.checkpoint.params), params_checksum(ck.params));
    EXPECT_EQ(res.trajectory.size(), 3u);
    EXPECT_NE(res.checkpoint.thresholds, ck.thresholds);
    // Over budget: the first update lowers every merge threshold.
    for (double v : res.trajectory.front().theta_merge) EXPECT_LT(v, 1.0);
}

TEST(Finetune, IsDeterministic) {
    const auto ck = make_checkpoint(micro_config(), 1);
    const auto a = ltmp_finetune(ck, micro_dataset(16), quick_finetune(0.6));
    const auto b = ltmp_finetune(ck, micro_dataset(16), quick_finetune(0.6));
    EXPECT_EQ(a.checkpoint.thresholds, b.checkpoint.thresholds);
    EXPECT_EQ(a.checkpoint.meta.metrics, b.checkpoint.meta.metrics);
}

TEST(Finetune, TargetOneLeavesInitialThresholdsAtRest) {
    const auto ck = make_checkpoint(micro_config(), 1);
    auto fc = quick_finetune(1.0);
    fc.lambda = 0.0;
    const auto res = ltmp_finetune(ck, micro_dataset(8), fc);
    for (const auto& step : res.trajectory) EXPECT_EQ(step.r_flops, 1.0);
}

TEST(Finetune, ValidatesConfiguration) {
    auto ck = make_checkpoint(micro_config(), 1);
    const auto ds = micro_dataset(8);
    for (double bad : {0.0, -0.1, 1.5}) EXPECT_THROW(ltmp_finetune(ck, ds, quick_finetune(bad)), std::invalid_argument);
    auto fc = quick_finetune(0.7);
    fc.batch_size = 0;
    EXPECT_THROW(ltmp_finetune(ck, ds, fc), std::invalid_argument);
    ck.config.reduction_order = ReductionOrder::topk_both;
    EXPECT_THROW(ltmp_finetune(ck, ds, quick_finetune(0.7)), std::invalid_argument);
    ck.config.reduction_order = ReductionOrder::none;
    EXPECT_THROW(ltmp_finetune(ck, ds, quick_finetune(0.7)), std::invalid_argument);
    ck.config.reduction_order = ReductionOrder::ltmp;
    EXPECT_THROW(ltmp_finetune(ck, Dataset{16, 16, 3, {}, {}}, quick_finetune(0.7)), std::invalid_argument);
}

TEST(Finetune, LogsOneRecordPerStep) {
    const auto ck = make_checkpoint(micro_config(), 1);
    std::size_t records = 0;
    ltmp_finetune(ck, micro_dataset(20), quick_finetune(0.7), [&](const nlohmann::json& j) {
        EXPECT_EQ(j["event"], "ltmp_step");
        EXPECT_EQ(j["theta_merge"].size(), 2u);
        ++records;
    });
    EXPECT_EQ(records, 3u);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    auto cfg = micro_config();
    auto params = zero_params<double>(cfg);
    auto grads = zero_params<double>(cfg);
    grads.head_bias[0] = 3.0;
    grads.head_bias[1] = -0.5;
    PretrainConfig pc;
    pc.lr = 0.01;
    Adam opt(params, pc);
    opt.step(params, grads);
    EXPECT_NEAR(params.head_bias[0], -0.01, 1e-9);
    EXPECT_NEAR(params.head_bias[1], 0.01, 1e-9);
    EXPECT_EQ(params.head_bias[2], 0.0);
}
