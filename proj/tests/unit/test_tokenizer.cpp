// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "ldae/tokenizer.hpp"
#include "../common/oracles.hpp"
#include "support.hpp"

namespace ldae {
namespace {

using oracle::covariance;
using oracle::jacobi_eigenvalues;

PatchSample sample(std::uint64_t seed, Index count = 4096) {
    const auto images = testing::random_images(16, 16, seed);
    return sample_patches(images, 4, count, seed + 1);
}

TEST(Pca, OrthonormalRowsForEveryDimension) {
    const PatchSample s = sample(1);
    for (Index d : {4, 8, 16, 48}) {
        const PatchBasis b = fit_pca(s, 4, d);
        EXPECT_EQ(b.encoder.rows(), d);
        EXPECT_EQ(b.encoder.cols(), 48);
        const MatrixX<double> gram = b.encoder * b.encoder.transpose();
        EXPECT_LT((gram - MatrixX<double>::Identity(d, d)).cwiseAbs().maxCoeff(), 1e-10) << d;
        EXPECT_EQ(b.decoder, b.encoder);
    }
}

TEST(Pca, EigenvaluesMatchJacobiOracle) {
    const PatchSample s = sample(2);
    const PatchBasis b = fit_pca(s, 4, 48);
    const auto oracle = jacobi_eigenvalues(covariance(s.patches));
    for (Index i = 0; i < 48; ++i) {
        EXPECT_NEAR(b.eigenvalues(i), std::max(oracle[static_cast<std::size_t>(i)], 0.0),
                    1e-10 * std::max(1.0, oracle[0]))
            << i;
        if (i > 0) {
            EXPECT_GE(b.eigenvalues(i - 1), b.eigenvalues(i));
        }
    }
}

// Optimal rank-d linear reconstruction error is the trailing eigen-mass.
TEST(Pca, ReconstructionErrorIsTrailingEigenvalueSum) {
    const PatchSample s = sample(3);
    const auto oracle = jacobi_eigenvalues(covariance(s.patches));
    for (Index d : {4, 8, 16, 47, 48}) {
        const PatchBasis b = fit_pca(s, 4, d);
        double trailing = 0.0;
        for (std::size_t i = static_cast<std::size_t>(d); i < oracle.size(); ++i) {
            trailing += oracle[i];
        }
        const double mse = reconstruction_mse(b, s.patches);
        EXPECT_NEAR(mse, trailing, 1e-6 * std::max(trailing, 1e-12) + 1e-13) << d;
    }
}

TEST(Pca, SignRuleAndTruncation) {
    const PatchSample s = sample(4);
    const PatchBasis full = fit_pca(s, 4, 48);
    for (Index i = 0; i < 48; ++i) {
        Index arg = 0;
        full.encoder.row(i).cwiseAbs().maxCoeff(&arg);
        EXPECT_GT(full.encoder(i, arg), 0.0);
    }
    const PatchBasis t = truncate(full, 8);
    EXPECT_EQ(t, fit_pca(s, 4, 8));
    EXPECT_THROW(truncate(full, 0), std::invalid_argument);
    EXPECT_THROW(truncate(full, 49), std::invalid_argument);
}

TEST(Pca, DeterministicUnderSeed) {
    EXPECT_EQ(fit_pca(sample(5), 4, 16), fit_pca(sample(5), 4, 16));
    EXPECT_NE(fit_pca(sample(5), 4, 16), fit_pca(sample(6), 4, 16));
}

TEST(Pca, RejectsBadArguments) {
    const PatchSample s = sample(7, 256);
    EXPECT_THROW(fit_pca(s, 4, 0), std::invalid_argument);
    EXPECT_THROW(fit_pca(s, 4, 49), std::invalid_argument);
    EXPECT_THROW(fit_pca(s, 3, 4), std::invalid_argument);
}

TEST(Pca, ConstantPatchesGiveZeroSpectrum) {
    PatchSample s;
    s.patches = MatrixX<double>::Constant(100, 12, 0.25);
    const PatchBasis b = fit_pca(s, 2, 12);
    EXPECT_EQ(b.eigenvalues.maxCoeff(), 0.0);
    EXPECT_NEAR(reconstruction_mse(b, s.patches), 0.0, 1e-24);
}

TEST(LinearAe, ApproachesPcaError) {
    const PatchSample s = sample(8);
    for (Index d : {4, 8, 16}) {
        const double pca = reconstruction_mse(fit_pca(s, 4, d), s.patches);
        LinearCodecConfig cfg;
        cfg.seed = 9;
        const PatchBasis ae = fit_linear_ae(s, 4, d, cfg);
        const double mse = reconstruction_mse(ae, s.patches);
        EXPECT_GE(mse, pca * (1.0 - 1e-9)) << d; // Eckart-Young lower bound
        EXPECT_LT(mse, 1.05 * pca) << d;
        EXPECT_EQ(ae.kind, TokenizerKind::linear_ae);
        EXPECT_FALSE(ae.invertible());
    }
}

TEST(LinearVae, KlShrinksLatentsAndCostsReconstruction) {
    const PatchSample s = sample(10);
    LinearCodecConfig cfg;
    const PatchBasis ae = fit_linear_ae(s, 4, 8, cfg);
    const PatchBasis vae = fit_linear_vae(s, 4, 8, 0.5, cfg);
    const MatrixX<double> centered = s.patches.rowwise() - ae.mean.transpose();
    const double ae_norm = (centered * ae.encoder.transpose()).squaredNorm();
    const double vae_norm = (centered * vae.encoder.transpose()).squaredNorm();
    EXPECT_LT(vae_norm, ae_norm);
    EXPECT_GE(reconstruction_mse(vae, s.patches), reconstruction_mse(ae, s.patches));
    EXPECT_EQ(vae.kind, TokenizerKind::linear_vae);
}

TEST(LinearAe, DivergenceIsReported) {
    const PatchSample s = sample(11, 512);
    LinearCodecConfig cfg;
    cfg.learning_rate = 1e6;
    cfg.steps = 200;
    EXPECT_THROW(fit_linear_ae(s, 4, 8, cfg), DivergenceError);
}

TEST(Identity, IsExactAndFullRank) {
    const PatchBasis b = identity_basis(4);
    EXPECT_EQ(b.latent_dim, 48);
    const PatchSample s = sample(12, 64);
    EXPECT_EQ(encode_tokens(b, s.patches), s.patches);
    EXPECT_EQ(reconstruction_mse(b, s.patches), 0.0);
    EXPECT_THROW(visualize_filters(b), std::invalid_argument);
}

TEST(Tokens, EncodeDecodeShapes) {
    const PatchBasis b = fit_pca(sample(13), 4, 8);
    const PatchSample s = sample(14, 10);
    const MatrixX<double> z = encode_tokens(b, s.patches);
    EXPECT_EQ(z.rows(), 10);
    EXPECT_EQ(z.cols(), 8);
    const MatrixX<double> x = decode_tokens(b, z);
    EXPECT_EQ(x.cols(), 48);
    // decode(encode(.)) is a projection
    EXPECT_LT((encode_tokens(b, x) - z).cwiseAbs().maxCoeff(), 1e-12);
    const VectorX<double> v = s.patches.row(3).transpose();
    EXPECT_LT((encode(b, v) - z.row(3).transpose()).norm(), 1e-14);
    EXPECT_THROW(encode(b, VectorX<double>::Zero(47)), std::invalid_argument);
}

TEST(Filters, GridLayout) {
    const PatchBasis b = fit_pca(sample(15), 4, 10);
    const ImageD img = visualize_filters(b);
    // 4 columns, 3 rows of 4x4 tiles with 1-pixel separators
    EXPECT_EQ(img.width(), 4 * 4 + 3);
    EXPECT_EQ(img.height(), 3 * 4 + 2);
    EXPECT_EQ(img(4, 0, 0), 1.0);      // separator row
    EXPECT_EQ(img(13, 18, 2), 1.0);    // unused tile stays white
    double lo = 1.0, hi = -1.0;
    for (Index r = 0; r < 4; ++r) {
        for (Index c = 0; c < 4; ++c) {
            for (Index ch = 0; ch < 3; ++ch) {
                lo = std::min(lo, img(r, c, ch));
                hi = std::max(hi, img(r, c, ch));
            }
        }
    }
    EXPECT_DOUBLE_EQ(lo, -1.0);
    EXPECT_DOUBLE_EQ(hi, 1.0);
}

TEST(BasisCheckpoint, RoundTripIsBitIdentical) {
    testing::TempDir dir("basis");
    LinearCodecConfig cfg;
    cfg.steps = 300;
    for (const PatchBasis& b : {fit_pca(sample(16), 4, 12), identity_basis(2), fit_linear_ae(sample(17), 4, 6, cfg)}) {
        save_basis(b, dir.path() / "b.ldae");
        const PatchBasis back = load_basis(dir.path() / "b.ldae");
        EXPECT_EQ(back, b);
        EXPECT_EQ(serialize_basis(back), serialize_basis(b));
    }
    auto bytes = serialize_basis(identity_basis(2));
    bytes.resize(bytes.size() - 1);
    EXPECT_THROW(deserialize_basis(bytes), std::runtime_error);
}

TEST(Sampling, DrawsRequestedCountDeterministically) {
    const auto images = testing::random_images(3, 8, 1);
    const PatchSample a = sample_patches(images, 4, 100, 5);
    EXPECT_EQ(a.patches.rows(), 100);
    EXPECT_EQ(a.source_count, 3);
    EXPECT_EQ(a.patches, sample_patches(images, 4, 100, 5).patches);
    EXPECT_EQ(all_patches(images, 4).patches.rows(), 12);
    EXPECT_THROW(sample_patches({}, 4, 10, 1), std::invalid_argument);
}

} // namespace
} // namespace ldae
