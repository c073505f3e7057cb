// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "ldae/diffusion.hpp"
#include "ldae/patches.hpp"
#include "support.hpp"

namespace ldae {
namespace {

// Independent oracle: prod (1 - beta_s) in long double.
long double ddpm_gamma_sq_oracle(int t, int steps, long double b0, long double b1) {
    long double g = 1.0L;
    for (int s = 1; s <= t; ++s) {
        g *= 1.0L - (b0 + (b1 - b0) * (s - 1) / (steps - 1));
    }
    return g;
}

TEST(Schedule, VariancePreservingIdentity) {
    for (const NoiseSchedule& s : {NoiseSchedule::ddpm(), NoiseSchedule::linear_gamma_sq()}) {
        for (int t = 1; t <= s.steps; ++t) {
            const GammaSigma gs = gamma_sigma(s, t);
            EXPECT_NEAR(gs.gamma * gs.gamma + gs.sigma * gs.sigma, 1.0, 1e-12) << to_string(s.kind) << " t=" << t;
        }
    }
}

TEST(Schedule, DdpmMatchesDirectProduct) {
    const NoiseSchedule s = NoiseSchedule::ddpm(1000, 1e-4, 0.02);
    for (int t : {1, 2, 10, 500, 999, 1000}) {
        const double g = gamma_sigma(s, t).gamma;
        EXPECT_NEAR(g * g, static_cast<double>(ddpm_gamma_sq_oracle(t, 1000, 1e-4L, 0.02L)), 1e-12) << t;
    }
    EXPECT_DOUBLE_EQ(ddpm_beta(s, 1), 1e-4);
    EXPECT_DOUBLE_EQ(ddpm_beta(s, 1000), 0.02);
    // gamma_T^2 is about 4e-5 for the standard schedule
    const double gT = gamma_sigma(s, 1000).gamma;
    EXPECT_GT(gT * gT, 3e-5);
    EXPECT_LT(gT * gT, 5e-5);
}

TEST(Schedule, LinearGammaSquared) {
    const NoiseSchedule s = NoiseSchedule::linear_gamma_sq(1000);
    EXPECT_DOUBLE_EQ(gamma_sigma(s, 250).gamma, std::sqrt(0.75));
    EXPECT_DOUBLE_EQ(gamma_sigma(s, 1000).gamma, 0.0);
    EXPECT_DOUBLE_EQ(gamma_sigma(s, 1000).sigma, 1.0);
}

TEST(Schedule, FixedGammaRemovesScaling) {
    const NoiseSchedule s = NoiseSchedule::fixed_gamma(1000);
    for (int t : {1, 333, 1000}) {
        EXPECT_EQ(gamma_sigma(s, t).gamma, 1.0);
    }
    EXPECT_DOUBLE_EQ(gamma_sigma(s, 1000).sigma, std::sqrt(2.0));
    EXPECT_DOUBLE_EQ(gamma_sigma(s, 500).sigma, std::sqrt(2.0) / 2);
}

TEST(Schedule, SingleLevelIsExact) {
    const NoiseSchedule s = NoiseSchedule::single_level(1000);
    for (int t : {1, 10, 1000}) {
        EXPECT_EQ(gamma_sigma(s, t).sigma, std::sqrt(1.0 / 3.0));
        EXPECT_EQ(gamma_sigma(s, t).gamma, 1.0);
    }
}

TEST(Schedule, RejectsOutOfRangeSteps) {
    const NoiseSchedule s = NoiseSchedule::linear_gamma_sq(100);
    EXPECT_THROW(gamma_sigma(s, 0), std::invalid_argument);
    EXPECT_THROW(gamma_sigma(s, 101), std::invalid_argument);
    EXPECT_THROW(gamma_sigma(NoiseSchedule::linear_gamma_sq(0), 1), std::invalid_argument);
}

TEST(Schedule, CsvAndNames) {
    const std::string csv = schedule_csv(NoiseSchedule::linear_gamma_sq(4));
    EXPECT_EQ(csv.substr(0, csv.find('\n')), "t,gamma_sq,sigma_sq");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
    for (ScheduleKind k : {ScheduleKind::ddpm_linear_beta, ScheduleKind::linear_gamma_sq, ScheduleKind::fixed_gamma,
                           ScheduleKind::single_level}) {
        EXPECT_EQ(parse_schedule_kind(to_string(k)), k);
    }
    EXPECT_THROW(parse_schedule_kind("cosine"), std::invalid_argument);
}

TEST(Diffuse, ZeroNoiseEndpointAndDeterminism) {
    Rng rng(1);
    const MatrixX<double> z0 = rng.normal_matrix(5, 3);
    Rng a(7), b(7);
    const auto da = diffuse(z0, NoiseSchedule::linear_gamma_sq(), 400, a);
    const auto db = diffuse(z0, NoiseSchedule::linear_gamma_sq(), 400, b);
    EXPECT_EQ(da.zt, db.zt);
    EXPECT_LT((da.zt - (da.gamma * z0 + da.sigma * da.eps)).norm(), 1e-14);
    // the first noise entry is the first normal drawn from the stream
    Rng c(7);
    EXPECT_EQ(da.eps(0, 0), c.normal());
}

TEST(Diffuse, NoiseStatistics) {
    Rng rng(3);
    const MatrixX<double> z0 = MatrixX<double>::Zero(200, 50);
    const auto d = diffuse(z0, NoiseSchedule::fixed_gamma(), 500, rng);
    const double var = d.zt.squaredNorm() / static_cast<double>(d.zt.size());
    // sigma^2 = 0.5; 10000 draws give a standard error near 0.007
    EXPECT_NEAR(var, 0.5, 0.03);
}

TEST(LossWeight, Rules) {
    const NoiseSchedule s = NoiseSchedule::linear_gamma_sq(1000);
    EXPECT_DOUBLE_EQ(loss_weight(s, 250, WeightKind::snr), 0.75 / 0.25);
    EXPECT_DOUBLE_EQ(loss_weight(s, 250, WeightKind::gamma_sq), 0.75);
    EXPECT_DOUBLE_EQ(loss_weight(s, 250, WeightKind::inv_one_plus_sigma_sq), 1.0 / 1.25);
    EXPECT_EQ(loss_weight(s, 250, WeightKind::unit), 1.0);
    const NoiseSchedule f = NoiseSchedule::fixed_gamma(1000);
    EXPECT_DOUBLE_EQ(loss_weight(f, 1000, WeightKind::inv_one_plus_sigma_sq), 1.0 / 3.0);
    NoiseSchedule zero = NoiseSchedule::single_level(10, 0.0);
    EXPECT_THROW(loss_weight(zero, 5, WeightKind::snr), std::invalid_argument);
    for (WeightKind k :
         {WeightKind::snr, WeightKind::gamma_sq, WeightKind::inv_one_plus_sigma_sq, WeightKind::unit}) {
        EXPECT_EQ(parse_weight_kind(to_string(k)), k);
    }
}

TEST(TokenLoss, ValueAndGradient) {
    Rng rng(4);
    const MatrixX<double> pred = rng.normal_matrix(6, 4);
    const MatrixX<double> target = rng.normal_matrix(6, 4);
    MatrixX<double> grad;
    const double l = token_mse_loss(pred, target, 0.5, &grad);
    EXPECT_NEAR(l, 0.5 * (pred - target).squaredNorm() / 6.0, 1e-14);
    EXPECT_LT((grad - (pred - target) * (2 * 0.5 / 6.0)).norm(), 1e-14);
    EXPECT_THROW(token_mse_loss(pred, target.leftCols(3), 1.0), std::invalid_argument);
}

// With every w_i = 1 the orthonormal basis drops out (Parseval).
TEST(ResidualLoss, UnitWeightsReduceToScaledMse) {
    const PatchBasis full = testing::random_pca(4, 1);
    Rng rng(2);
    for (int trial = 0; trial < 5; ++trial) {
        const MatrixX<double> pred = rng.normal_matrix(16, 48);
        const MatrixX<double> x0 = rng.normal_matrix(16, 48);
        const double lambda = rng.uniform(0.1, 3.0);
        const double loss = weighted_residual_loss(pred, x0, full.encoder, 8, lambda, 1.0);
        const double mse = (pred - x0).squaredNorm() / 16.0;
        EXPECT_NEAR(loss, lambda * mse, 1e-8 * lambda * mse);
    }
}

TEST(ResidualLoss, WeightsSplitAtLatentDim) {
    const PatchBasis full = testing::random_pca(2, 3);
    const MatrixX<double>& v = full.encoder;
    // residual along basis row 1 (inside d) and row 7 (outside d)
    MatrixX<double> x0 = MatrixX<double>::Zero(1, 12);
    const MatrixX<double> in = v.row(1);
    const MatrixX<double> out = v.row(7);
    EXPECT_NEAR(weighted_residual_loss(in, x0, v, 4, 1.0, 0.1), 1.0, 1e-12);
    EXPECT_NEAR(weighted_residual_loss(out, x0, v, 4, 1.0, 0.1), 0.1, 1e-12);
}

TEST(ResidualLoss, GradientMatchesFiniteDifferences) {
    const PatchBasis full = testing::random_pca(2, 5);
    Rng rng(6);
    MatrixX<double> pred = rng.normal_matrix(4, 12);
    const MatrixX<double> x0 = rng.normal_matrix(4, 12);
    MatrixX<double> grad;
    weighted_residual_loss(pred, x0, full.encoder, 3, 0.7, 0.1, &grad);
    const double h = 1e-6;
    for (Index i = 0; i < pred.size(); ++i) {
        const double saved = pred(i);
        pred(i) = saved + h;
        const double up = weighted_residual_loss(pred, x0, full.encoder, 3, 0.7, 0.1);
        pred(i) = saved - h;
        const double down = weighted_residual_loss(pred, x0, full.encoder, 3, 0.7, 0.1);
        pred(i) = saved;
        EXPECT_NEAR(grad(i), (up - down) / (2 * h), 1e-7);
    }
}

TEST(ResidualLoss, ImageFormMatchesTokenForm) {
    const PatchBasis full = testing::random_pca(4, 7);
    const auto imgs = testing::random_images(2, 8, 8);
    const double a = weighted_residual_loss(imgs[0], imgs[1], full.encoder, 6, 0.9, 0.1);
    const double b = weighted_residual_loss(extract_patches(imgs[0], 4), extract_patches(imgs[1], 4), full.encoder, 6,
                                            0.9, 0.1);
    EXPECT_DOUBLE_EQ(a, b);
}

TEST(ResidualLoss, RejectsNonOrthonormalBasis) {
    MatrixX<double> v = MatrixX<double>::Identity(12, 12);
    v(0, 1) = 1e-3;
    const MatrixX<double> x = MatrixX<double>::Zero(2, 12);
    EXPECT_THROW(weighted_residual_loss(x, x, v, 4, 1.0, 0.1), std::invalid_argument);
    EXPECT_THROW(require_orthonormal(MatrixX<double>::Identity(12, 11)), std::invalid_argument);
    EXPECT_NO_THROW(require_orthonormal(MatrixX<double>::Identity(12, 12)));
}

TEST(Targets, MakeTargetPerKind) {
    Rng rng(9);
    const MatrixX<double> z0 = rng.normal_matrix(4, 3);
    const auto draw = diffuse(z0, NoiseSchedule::linear_gamma_sq(), 100, rng);
    EXPECT_EQ(make_target({TargetKind::predict_noise}, draw, std::nullopt), draw.eps);
    EXPECT_EQ(make_target({TargetKind::predict_clean}, draw, std::nullopt), z0);
    const MatrixX<double> x0 = rng.normal_matrix(4, 12);
    EXPECT_EQ(make_target({TargetKind::predict_original_image}, draw, x0), x0);
    EXPECT_THROW(make_target({TargetKind::predict_original_image}, draw, std::nullopt), std::invalid_argument);
}

} // namespace
} // namespace ldae
