// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "ldae/denoiser.hpp"
#include "ldae/probe.hpp"
#include "support.hpp"

namespace ldae {
namespace {

struct Toy {
    MatrixX<double> x;
    std::vector<int> y;
};

// Gaussian clusters around well-separated class means.
Toy clusters(int classes, Index per_class, Index dim, double spread, std::uint64_t seed) {
    Rng rng(seed);
    const MatrixX<double> means = rng.normal_matrix(classes, dim, 4.0);
    Toy t;
    t.x.resize(classes * per_class, dim);
    for (int k = 0; k < classes; ++k) {
        for (Index i = 0; i < per_class; ++i) {
            t.x.row(k * per_class + i) = means.row(k) + rng.normal_matrix(1, dim, spread);
            t.y.push_back(k);
        }
    }
    return t;
}

TEST(Probe, SeparableClustersReachFullAccuracy) {
    const Toy train = clusters(4, 50, 6, 0.3, 1);
    const Toy val = clusters(4, 20, 6, 0.3, 1); // same means, fresh draws
    const ProbeModel m = fit_probe(train.x, train.y, 4, {});
    EXPECT_EQ(evaluate_probe(m, train.x, train.y).top1, 1.0);
    const ProbeReport r = evaluate_probe(m, val.x, val.y);
    EXPECT_EQ(r.top1, 1.0);
    EXPECT_EQ(r.count, 80);
    ASSERT_EQ(r.per_class.size(), 4u);
    EXPECT_TRUE(m.floored_dims.empty());
}

// Held-out accuracy with labels independent of the features is
// Binomial(n, 1/K) / n; 400 samples at K = 4 give sd ~0.022.
TEST(Probe, RandomLabelsStayNearChance) {
    Rng rng(2);
    const MatrixX<double> x = rng.normal_matrix(800, 10);
    std::vector<int> y(800);
    for (int& v : y) {
        v = rng.uniform_int(0, 3);
    }
    const std::span<const int> labels(y);
    const ProbeModel m = fit_probe(MatrixX<double>(x.topRows(400)), labels.first(400), 4, {});
    const double acc = evaluate_probe(m, x.bottomRows(400), labels.last(400)).top1;
    EXPECT_NEAR(acc, 0.25, 4 * std::sqrt(0.25 * 0.75 / 400));
}

TEST(Probe, DuplicatedColumnsChangeLittle) {
    const Toy train = clusters(3, 60, 5, 2.5, 3);
    const Toy val = clusters(3, 60, 5, 2.5, 3);
    const double base = evaluate_probe(fit_probe(train.x, train.y, 3, {}), val.x, val.y).top1;
    MatrixX<double> xt(train.x.rows(), 10), xv(val.x.rows(), 10);
    xt << train.x, train.x;
    xv << val.x, val.x;
    const double dup = evaluate_probe(fit_probe(xt, train.y, 3, {}), xv, val.y).top1;
    EXPECT_NEAR(dup, base, 0.01 + 1e-12);
}

TEST(Probe, InvariantToFeaturePermutation) {
    const Toy train = clusters(3, 40, 6, 2.0, 4);
    const Toy val = clusters(3, 40, 6, 2.0, 4);
    std::vector<int> perm = {4, 2, 0, 5, 1, 3};
    MatrixX<double> pt(train.x.rows(), 6), pv(val.x.rows(), 6);
    for (Index j = 0; j < 6; ++j) {
        pt.col(j) = train.x.col(perm[static_cast<std::size_t>(j)]);
        pv.col(j) = val.x.col(perm[static_cast<std::size_t>(j)]);
    }
    const ProbeModel a = fit_probe(train.x, train.y, 3, {});
    const ProbeModel b = fit_probe(pt, train.y, 3, {});
    EXPECT_NEAR(evaluate_probe(a, val.x, val.y).top1, evaluate_probe(b, pv, val.y).top1, 1e-12);
    for (Index j = 0; j < 6; ++j) {
        EXPECT_NEAR((a.weights.col(perm[static_cast<std::size_t>(j)]) - b.weights.col(j)).norm(), 0.0, 1e-9);
    }
}

TEST(Probe, FloorsConstantDimensions) {
    Toy t = clusters(2, 30, 4, 0.5, 5);
    t.x.col(2).setConstant(3.0);
    const ProbeModel m = fit_probe(t.x, t.y, 2, {});
    ASSERT_EQ(m.floored_dims.size(), 1u);
    EXPECT_EQ(m.floored_dims[0], 2);
    EXPECT_TRUE(m.weights.allFinite());
    EXPECT_EQ(evaluate_probe(m, t.x, t.y).top1, 1.0);
}

TEST(Probe, RejectsBadInputs) {
    const Toy t = clusters(2, 10, 3, 0.5, 6);
    const ProbeModel m = fit_probe(t.x, t.y, 2, {});
    EXPECT_THROW(evaluate_probe(m, MatrixX<double>(0, 3), {}), std::invalid_argument);
    EXPECT_THROW(evaluate_probe(m, MatrixX<double>::Zero(2, 4), std::vector<int>{0, 1}), std::invalid_argument);
    EXPECT_THROW(evaluate_probe(m, MatrixX<double>::Zero(2, 3), std::vector<int>{0}), std::invalid_argument);
    EXPECT_THROW(probe_logits(m, VectorX<double>::Zero(5)), std::invalid_argument);
    EXPECT_THROW(fit_probe(t.x, std::vector<int>(5, 0), 2, {}), std::invalid_argument);
    std::vector<int> bad = t.y;
    bad[0] = 7;
    EXPECT_THROW(fit_probe(t.x, bad, 2, {}), std::invalid_argument);
    EXPECT_THROW(fit_probe(std::span<const MatrixX<double>>(), t.y, 2, {}), std::invalid_argument);
}

TEST(Probe, DeterministicAndLogitsConsistent) {
    const Toy t = clusters(3, 30, 4, 1.5, 7);
    ProbeConfig cfg;
    cfg.seed = 11;
    const ProbeModel a = fit_probe(t.x, t.y, 3, cfg);
    const ProbeModel b = fit_probe(t.x, t.y, 3, cfg);
    EXPECT_EQ(a.weights, b.weights);
    const VectorX<double> row = t.x.row(5).transpose();
    const VectorX<double> logits = probe_logits(a, row);
    const VectorX<double> z = (row - a.mean).cwiseProduct(a.inv_std);
    EXPECT_LT((logits - (a.weights * z + a.bias)).norm(), 1e-12);
}

TEST(Probe, ReportKeyValueLines) {
    ProbeReport r;
    r.top1 = 0.5;
    r.per_class = {0.25, 0.75};
    r.t_fixed = 10;
    r.enc_blocks = 2;
    const std::string kv = r.to_kv();
    EXPECT_NE(kv.find("probe.top1 = 0.5000\n"), std::string::npos);
    EXPECT_NE(kv.find("probe.t_fixed = 10\n"), std::string::npos);
    EXPECT_NE(kv.find("probe.class1 = 0.7500\n"), std::string::npos);
    EXPECT_NE(kv.find("probe.input = clean\n"), std::string::npos);
}

// Features whose class signal shrinks as t grows.
ProbeFeatures fading(int t, int blocks, bool noisy) {
    const double spread = 0.2 + t * 0.05 + (noisy ? 1.0 : 0.0) + 0.1 * blocks;
    const Toy train = clusters(3, 40, 4, spread, 8);
    const Toy val = clusters(3, 20, 4, spread, 8);
    ProbeFeatures f;
    f.train_views = {train.x};
    f.train_labels = train.y;
    f.val = val.x;
    f.val_labels = val.y;
    f.classes = 3;
    return f;
}

TEST(Sweep, FixedTTable) {
    const std::vector<int> ts = {0, 10, 100};
    const std::array<bool, 2> modes = {false, true};
    const SweepTable table = sweep_fixed_t(fading, ts, modes, 1, {});
    EXPECT_EQ(table.row_names, (std::vector<std::string>{"clean", "noisy"}));
    EXPECT_EQ(table.columns, (std::vector<std::string>{"0", "10", "100"}));
    ASSERT_EQ(table.values.size(), 2u);
    EXPECT_EQ(table.values[0][0], 1.0);
    EXPECT_LT(table.values[0][2], table.values[0][0]);
    const std::string csv = table.csv();
    EXPECT_EQ(csv.substr(0, csv.find('\n')), table.corner + ",0,10,100");
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(Sweep, EncoderDepthTable) {
    const std::vector<int> blocks = {1, 2, 3};
    const SweepTable table = sweep_encoder_depth(fading, blocks, 10, {});
    ASSERT_EQ(table.values.size(), 1u);
    EXPECT_EQ(table.values[0].size(), 3u);
    EXPECT_EQ(table.columns.back(), "3");
}

// Probing must never write to the encoder.
TEST(Probe, EncoderUntouchedByFeatureExtraction) {
    const DenoiserConfig c = DenoiserConfig::make(4, 4, 2, 16, 2, 2);
    DenoiserParams<double> p = init_params<double>(c, 3);
    Rng rng(4);
    testing::randomize(p, rng, 0.2);
    const auto before = serialize_denoiser(p);
    MatrixX<double> feats(6, 16);
    for (Index i = 0; i < 6; ++i) {
        feats.row(i) = encoder_features(p, rng.normal_matrix(4, 4), 10, 1).transpose();
    }
    const std::vector<int> y = {0, 1, 0, 1, 0, 1};
    const ProbeModel m = fit_probe(feats, y, 2, {});
    evaluate_probe(m, feats, y);
    EXPECT_EQ(serialize_denoiser(p), before);
}

} // namespace
} // namespace ldae
