// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ldae/types.hpp"

namespace ldae {

/// Frozen per-dimension standardization followed by a linear classifier.
struct ProbeModel {
    VectorX<double> mean;
    VectorX<double> inv_std;
    MatrixX<double> weights; // classes x features
    VectorX<double> bias;
    int classes = 0;
    /// Feature dimensions whose variance was floored at 1e-8.
    std::vector<Index> floored_dims;
};

struct ProbeConfig {
    int epochs = 300;
    int batch_size = 128;
    double learning_rate = 0.5;
    double momentum = 0.9;
    std::uint64_t seed = 0;
};

/// Fits on one or more views of the training set (same rows, same labels).
/// Each epoch every example is drawn from a randomly chosen view; the
/// standardization statistics come from view 0.
ProbeModel fit_probe(std::span<const MatrixX<double>> views, std::span<const int> labels, int classes,
                     const ProbeConfig& cfg);
ProbeModel fit_probe(const MatrixX<double>& features, std::span<const int> labels, int classes,
                     const ProbeConfig& cfg);

struct ProbeReport {
    double top1 = 0.0;
    std::vector<double> per_class;
    Index count = 0;
    int t_fixed = 0;
    int enc_blocks = 0;
    bool noisy_input = false;
    std::uint64_t seed = 0;

    /// Flat key=value lines under the given key prefix.
    std::string to_kv(const std::string& prefix = "probe.") const;
};

/// Argmax accuracy on a held-out set. Rejects an empty set.
ProbeReport evaluate_probe(const ProbeModel& model, const MatrixX<double>& features, std::span<const int> labels);

/// Class scores for one feature row.
VectorX<double> probe_logits(const ProbeModel& model, const VectorX<double>& features);

/// Features of the probe splits at one (t, encoder depth, input mode).
struct ProbeFeatures {
    std::vector<MatrixX<double>> train_views;
    std::vector<int> train_labels;
    MatrixX<double> val;
    std::vector<int> val_labels;
    int classes = 0;
};

using FeatureFn = std::function<ProbeFeatures(int t, int enc_blocks, bool noisy_input)>;

/// Probe fit + evaluation on the held-out split.
ProbeReport run_probe(const ProbeFeatures& features, const ProbeConfig& cfg);

/// Row-labelled accuracy table; columns are the swept values.
struct SweepTable {
    std::string corner;
    std::vector<std::string> columns;
    std::vector<std::string> row_names;
    std::vector<std::vector<double>> values;

    std::string csv() const;
};

/// One probe per (t, input mode): rows "clean" / "noisy", columns t.
SweepTable sweep_fixed_t(const FeatureFn& features, std::span<const int> ts, std::span<const bool> noisy_flags,
                         int enc_blocks, const ProbeConfig& cfg);

/// One probe per encoder depth at fixed t with clean input.
SweepTable sweep_encoder_depth(const FeatureFn& features, std::span<const int> blocks, int t,
                               const ProbeConfig& cfg);

} // namespace ldae
