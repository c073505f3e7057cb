// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "ldae/checkpoint.hpp"
#include "ldae/denoiser.hpp"
#include "ldae/patches.hpp"
#include "../common/oracles.hpp"
#include "support.hpp"

namespace ldae {
namespace {

using testing::random_images;
using testing::random_pca;
using testing::randomize;

struct GradCase {
    const char* name;
    TargetKind target;
    NoiseSpace space;
    WeightKind weight;
};

DenoisingTask small_task(const GradCase& c, const PatchBasis& full) {
    DenoisingTask task;
    task.basis = truncate(full, 4);
    task.schedule = NoiseSchedule::fixed_gamma(1000);
    task.space = c.space;
    task.loss = {c.target, c.weight, 0.1};
    if (c.target == TargetKind::predict_original_image) {
        task.full_basis = full.encoder;
    }
    task.validate();
    return task;
}

class GradientCheck : public ::testing::TestWithParam<GradCase> {};

// Central differences against the analytic gradient for every parameter.
TEST_P(GradientCheck, MatchesCentralDifferences) {
    const GradCase c = GetParam();
    const PatchBasis full = random_pca(2, 11);
    const DenoisingTask task = small_task(c, full);
    const oracle::GradCheck g = oracle::check_gradients(task, random_images(2, 4, 12), 2, 3);
    EXPECT_LT(g.loss_gap, 1e-12);
    EXPECT_LT(g.worst_rel, 1e-4) << "worst entry " << g.worst_entry;
    // key biases: the true gradient is zero
    EXPECT_LT(g.shift_numeric, 1e-8);
    EXPECT_LT(g.shift_analytic, 1e-12);
}

INSTANTIATE_TEST_SUITE_P(
    Targets, GradientCheck,
    ::testing::Values(
        GradCase{"noise", TargetKind::predict_noise, NoiseSpace::latent_in_latent_out, WeightKind::unit},
        GradCase{"clean", TargetKind::predict_clean, NoiseSpace::image_in_latent_out, WeightKind::inv_one_plus_sigma_sq},
        GradCase{"clean_image", TargetKind::predict_clean, NoiseSpace::image_in_image_out, WeightKind::unit},
        GradCase{"original", TargetKind::predict_original_image, NoiseSpace::image_in_image_out,
                 WeightKind::inv_one_plus_sigma_sq}),
    [](const ::testing::TestParamInfo<GradCase>& info) { return std::string(info.param.name); });

TEST(Denoiser, ZeroInitHeadGivesZeroOutput) {
    const DenoiserConfig cfg = DenoiserConfig::make(8, 12, 3, 16, 2, 4, 100);
    const auto p = init_params<double>(cfg, 1);
    Rng rng(2);
    const MatrixX<double> out = forward(p, rng.normal_matrix(9, 8), 17);
    EXPECT_EQ(out.rows(), 9);
    EXPECT_EQ(out.cols(), 12);
    EXPECT_EQ(out.norm(), 0.0);
}

// Plain ViT: per block 4 W^2 + 4 W (attention) + 8 W^2 + 5 W (MLP); plus the
// conditioning MLP of each block, the embedding, positions and head.
TEST(Denoiser, ParameterCountMatchesFormula) {
    const Index w = 32, in = 16, out = 48, n = 16;
    const int depth = 4;
    const DenoiserConfig cfg = DenoiserConfig::make(in, out, 4, w, depth, 4, 1000);
    const Index vit_block = 12 * w * w + 9 * w;
    const Index h = w / 4;
    const Index cond = 64 * h + h + h * 4 * w + 4 * w;
    const Index expected = (in * w + w) + n * w + depth * (vit_block + cond) + (w * out + out);
    EXPECT_EQ(DenoiserParams<double>::zeros(cfg).parameter_count(), expected);
}

TEST(Denoiser, ConfigValidation) {
    EXPECT_THROW(DenoiserConfig::make(8, 8, 2, 18, 2, 4), std::invalid_argument); // heads do not divide width
    EXPECT_THROW(DenoiserConfig::make(0, 8, 2, 16, 2, 4), std::invalid_argument);
    EXPECT_THROW(DenoiserConfig::make(8, 8, 2, 16, 0, 4), std::invalid_argument);
}

TEST(Denoiser, TimeEmbeddingLayout) {
    const VectorX<double> e = time_embedding<double>(0, 8);
    for (int i = 0; i < 4; ++i) {
        EXPECT_EQ(e(i), 1.0);
        EXPECT_EQ(e(4 + i), 0.0);
    }
    const VectorX<double> f = time_embedding<double>(3, 8);
    EXPECT_DOUBLE_EQ(f(0), std::cos(3.0));
    EXPECT_DOUBLE_EQ(f(4), std::sin(3.0));
}

TEST(Denoiser, MergedEncoderMatchesConditionedEncoder) {
    const DenoiserConfig cfg = DenoiserConfig::make(12, 12, 4, 32, 4, 4, 1000);
    DenoiserParams<double> p = init_params<double>(cfg, 8);
    Rng rng(9);
    randomize(p, rng, 0.2);
    const MatrixX<double> x = rng.normal_matrix(16, 12);
    for (int blocks : {1, 2, 4}) {
        const auto merged = merge_encoder(p, 10, blocks);
        const VectorX<double> a = encoder_features(p, x, 10, blocks);
        const VectorX<double> b = merged_features(merged, x);
        EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-10) << blocks;
        // conditioning MLPs are gone
        EXPECT_LT(merged.parameter_count(), p.parameter_count());
    }
    // a different t changes the conditioned features
    EXPECT_GT((encoder_features(p, x, 10, 2) - encoder_features(p, x, 500, 2)).norm(), 1e-6);
}

TEST(Denoiser, EncoderFeaturesRejectBadBlocks) {
    const DenoiserConfig cfg = DenoiserConfig::make(4, 4, 2, 16, 2, 2, 100);
    const auto p = init_params<double>(cfg, 1);
    const MatrixX<double> x = MatrixX<double>::Zero(4, 4);
    EXPECT_THROW(encoder_features(p, x, 10, 0), std::invalid_argument);
    EXPECT_THROW(encoder_features(p, x, 10, 3), std::invalid_argument);
    EXPECT_THROW(encoder_features(p, x, 101, 1), std::invalid_argument);
    EXPECT_THROW(forward(p, MatrixX<double>(MatrixX<double>::Zero(4, 5)), 1), std::invalid_argument);
}

TEST(Denoiser, LearningRateSchedule) {
    OptimizerConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.batch_size = 512;
    cfg.epochs = 10;
    cfg.warmup_epochs = 2;
    EXPECT_DOUBLE_EQ(cfg.effective_lr(), 2e-3);
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 0, 5), 0.0);
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 5, 5), 1e-3);
    EXPECT_DOUBLE_EQ(learning_rate(cfg, 10, 5), 2e-3);
    EXPECT_NEAR(learning_rate(cfg, 30, 5), 1e-3, 1e-15);
    EXPECT_NEAR(learning_rate(cfg, 50, 5), 0.0, 1e-18);
    for (long s = 10; s < 50; ++s) {
        EXPECT_GE(learning_rate(cfg, s, 5), learning_rate(cfg, s + 1, 5));
    }
}

// A single Adam step from zero moments moves each parameter by lr * sign(g).
TEST(Denoiser, AdamFirstStepIsSignStep) {
    const DenoiserConfig cfg = DenoiserConfig::make(4, 4, 2, 16, 2, 2, 100);
    auto p = DenoiserParams<double>::zeros(cfg);
    auto g = DenoiserParams<double>::zeros(cfg);
    Rng rng(4);
    randomize(g, rng, 1.0);
    auto state = make_optimizer_state<double>(cfg);
    OptimizerConfig opt;
    opt.eps = 0.0;
    adam_step(p, g, state, opt, 0.01);
    EXPECT_EQ(state.step, 1);
    EXPECT_NEAR(p.blocks[1].w1(3, 2), -0.01 * (g.blocks[1].w1(3, 2) > 0 ? 1 : -1), 1e-15);
    EXPECT_NEAR(p.w_out(0, 0), -0.01 * (g.w_out(0, 0) > 0 ? 1 : -1), 1e-15);
}

TEST(Denoiser, TrainingReducesLossAndIsDeterministic) {
    const PatchBasis full = random_pca(2, 21);
    const GradCase c{"original", TargetKind::predict_original_image, NoiseSpace::image_in_image_out,
                     WeightKind::inv_one_plus_sigma_sq};
    const DenoisingTask task = small_task(c, full);
    std::vector<MatrixX<double>> grids;
    for (const auto& img : random_images(32, 8, 22)) {
        grids.push_back(extract_patches(img, 2));
    }
    const DenoiserConfig cfg = DenoiserConfig::make(task.input_dim(), task.output_dim(), 4, 16, 2, 2, 1000);
    TrainConfig tc;
    tc.optimizer.epochs = 8;
    tc.optimizer.batch_size = 8;
    tc.optimizer.base_lr = 0.05;
    tc.optimizer.warmup_epochs = 1;
    tc.seed = 7;
    tc.eval_examples = 32;
    std::vector<double> seen;
    tc.on_epoch = [&](int, double loss) { seen.push_back(loss); };

    auto a = init_params<float>(cfg, 1);
    auto b = init_params<float>(cfg, 1);
    const TrainResult ra = train(a, task, std::span<const MatrixX<double>>(grids), tc);
    const TrainResult rb = train(b, task, std::span<const MatrixX<double>>(grids), tc);
    EXPECT_LT(ra.final_loss, 0.7 * ra.initial_loss);
    EXPECT_EQ(ra.steps, 8 * 4);
    EXPECT_EQ(seen.size(), 16u);
    EXPECT_EQ(params_checksum(a), params_checksum(b));
    EXPECT_EQ(ra.epoch_loss, rb.epoch_loss);
}

TEST(Denoiser, TrainRejectsMismatchedModel) {
    const PatchBasis full = random_pca(2, 21);
    const DenoisingTask task = small_task(
        {"noise", TargetKind::predict_noise, NoiseSpace::latent_in_latent_out, WeightKind::unit}, full);
    std::vector<MatrixX<double>> grids{extract_patches(random_images(1, 8, 1)[0], 2)};
    auto p = init_params<float>(DenoiserConfig::make(12, 4, 4, 16, 2, 2, 1000), 1);
    EXPECT_THROW(train(p, task, std::span<const MatrixX<double>>(grids), TrainConfig{}), std::invalid_argument);
}

TEST(Denoiser, CheckpointRoundTripIsBitIdentical) {
    const DenoiserConfig cfg = DenoiserConfig::make(16, 48, 4, 32, 2, 4, 1000);
    DenoiserParams<float> p = init_params<float>(cfg, 5);
    Rng rng(6);
    randomize(p, rng, 0.1);
    testing::TempDir dir("ckpt");
    save_denoiser(p, dir.path() / "m.ldae");
    const auto q = load_denoiser<float>(dir.path() / "m.ldae");
    EXPECT_EQ(q.config, p.config);
    EXPECT_EQ(params_checksum(p), params_checksum(q));
    const MatrixX<float> x = rng.normal_matrix<float>(16, 16);
    const MatrixX<float> a = forward(p, x, 321);
    const MatrixX<float> b = forward(q, x, 321);
    EXPECT_EQ(0, std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.size())));
}

TEST(Denoiser, CheckpointRejectsCorruption) {
    const DenoiserConfig cfg = DenoiserConfig::make(4, 4, 2, 16, 2, 2, 100);
    auto bytes = serialize_denoiser(init_params<double>(cfg, 1));
    EXPECT_NO_THROW(deserialize_denoiser<double>(bytes));
    auto truncated = bytes;
    truncated.resize(bytes.size() / 2);
    EXPECT_THROW(deserialize_denoiser<double>(truncated), CheckpointError);
    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    EXPECT_THROW(deserialize_denoiser<double>(bad_magic), CheckpointError);
    auto trailing = bytes;
    trailing.push_back(0);
    EXPECT_THROW(deserialize_denoiser<double>(trailing), CheckpointError);
}

TEST(Denoiser, FloatAndDoubleAgree) {
    const DenoiserConfig cfg = DenoiserConfig::make(12, 12, 4, 32, 4, 4, 1000);
    DenoiserParams<double> p = init_params<double>(cfg, 2);
    Rng rng(3);
    randomize(p, rng, 0.1);
    const MatrixX<double> x = rng.normal_matrix(16, 12);
    const MatrixX<double> a = forward(p, x, 40);
    const MatrixX<double> b = forward(p.cast<float>(), MatrixX<float>(x.cast<float>()), 40).cast<double>();
    EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-4 * std::max(1.0, a.cwiseAbs().maxCoeff()));
}

} // namespace
} // namespace ldae
