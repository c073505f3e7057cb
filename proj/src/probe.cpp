// SPDX-License-Identifier: Apache-2.0
#include "ldae/probe.hpp"

#include <cmath>
#include <iostream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "ldae/rng.hpp"

namespace ldae {

namespace {

constexpr double kVarianceFloor = 1e-8;

MatrixX<double> standardize(const ProbeModel& m, const MatrixX<double>& x) {
    return (x.rowwise() - m.mean.transpose()) * m.inv_std.asDiagonal();
}

std::string fixed4(double v) {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(4);
    out << v;
    return out.str();
}

} // namespace

ProbeModel fit_probe(std::span<const MatrixX<double>> views, std::span<const int> labels, int classes,
                     const ProbeConfig& cfg) {
    if (views.empty()) {
        throw std::invalid_argument("fit_probe: no feature views");
    }
    const Index n = views.front().rows();
    const Index f = views.front().cols();
    if (n != static_cast<Index>(labels.size())) {
        throw std::invalid_argument("fit_probe: " + std::to_string(n) + " feature rows but " +
                                    std::to_string(labels.size()) + " labels");
    }
    for (const auto& v : views) {
        if (v.rows() != n || v.cols() != f) {
            throw std::invalid_argument("fit_probe: feature views differ in shape");
        }
    }
    if (classes < 1 || n < classes) {
        throw std::invalid_argument("fit_probe: need at least one example per class (N = " + std::to_string(n) +
                                    ", classes = " + std::to_string(classes) + ")");
    }
    for (int y : labels) {
        if (y < 0 || y >= classes) {
            throw std::invalid_argument("fit_probe: label " + std::to_string(y) + " outside [0, " +
                                        std::to_string(classes) + ")");
        }
    }
    if (cfg.epochs < 1 || cfg.batch_size < 1) {
        throw std::invalid_argument("fit_probe: epochs and batch size must be positive");
    }

    ProbeModel model;
    model.classes = classes;
    model.mean = views.front().colwise().mean().transpose();
    const VectorX<double> var =
        (views.front().rowwise() - model.mean.transpose()).colwise().squaredNorm().transpose() / static_cast<double>(n);
    model.inv_std.resize(f);
    for (Index j = 0; j < f; ++j) {
        double v = var(j);
        if (!(v >= kVarianceFloor)) {
            v = kVarianceFloor;
            model.floored_dims.push_back(j);
        }
        model.inv_std(j) = 1.0 / std::sqrt(v);
    }
    if (!model.floored_dims.empty()) {
        std::cerr << "warning: fit_probe floored the variance of " << model.floored_dims.size()
                  << " degenerate feature dims\n";
    }
    std::vector<MatrixX<double>> z;
    z.reserve(views.size());
    for (const auto& v : views) {
        z.push_back(standardize(model, v));
    }

    model.weights = MatrixX<double>::Zero(classes, f);
    model.bias = VectorX<double>::Zero(classes);
    MatrixX<double> vel_w = MatrixX<double>::Zero(classes, f);
    VectorX<double> vel_b = VectorX<double>::Zero(classes);

    const auto bs = static_cast<Index>(cfg.batch_size);
    const Index steps_per_epoch = (n + bs - 1) / bs;
    const double total = static_cast<double>(steps_per_epoch) * cfg.epochs;
    long step = 0;
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, 0x50524f4245ULL, static_cast<std::uint64_t>(epoch)));
        for (Index i = 0; i < n; ++i) {
            order[static_cast<std::size_t>(i)] = i;
        }
        for (Index i = n; i > 1; --i) {
            std::swap(order[static_cast<std::size_t>(i - 1)],
                      order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
        }
        for (Index start = 0; start < n; start += bs) {
            const Index m = std::min(bs, n - start);
            MatrixX<double> xb(m, f);
            MatrixX<double> yb = MatrixX<double>::Zero(m, classes);
            for (Index r = 0; r < m; ++r) {
                const Index i = order[static_cast<std::size_t>(start + r)];
                const auto view = views.size() > 1 ? static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(views.size()) - 1)) : 0;
                xb.row(r) = z[view].row(i);
                yb(r, labels[static_cast<std::size_t>(i)]) = 1.0;
            }
            MatrixX<double> logits = (xb * model.weights.transpose()).rowwise() + model.bias.transpose();
            const VectorX<double> row_max = logits.rowwise().maxCoeff();
            logits = (logits.colwise() - row_max).array().exp().matrix();
            const VectorX<double> inv_sum = logits.rowwise().sum().cwiseInverse();
            const MatrixX<double> dlogits = (inv_sum.asDiagonal() * logits - yb) / static_cast<double>(m);
            const double lr =
                cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / total));
            vel_w = cfg.momentum * vel_w + dlogits.transpose() * xb;
            vel_b = cfg.momentum * vel_b + dlogits.colwise().sum().transpose();
            model.weights -= lr * vel_w;
            model.bias -= lr * vel_b;
            ++step;
        }
    }
    if (!model.weights.allFinite() || !model.bias.allFinite()) {
        throw std::runtime_error("fit_probe: classifier diverged");
    }
    return model;
}

ProbeModel fit_probe(const MatrixX<double>& features, std::span<const int> labels, int classes,
                     const ProbeConfig& cfg) {
    return fit_probe(std::span<const MatrixX<double>>(&features, 1), labels, classes, cfg);
}

VectorX<double> probe_logits(const ProbeModel& model, const VectorX<double>& features) {
    if (features.size() != model.mean.size()) {
        throw std::invalid_argument("probe_logits: feature dim mismatch");
    }
    const VectorX<double> z = (features - model.mean).cwiseProduct(model.inv_std);
    return model.weights * z + model.bias;
}

ProbeReport evaluate_probe(const ProbeModel& model, const MatrixX<double>& features, std::span<const int> labels) {
    if (features.rows() == 0) {
        throw std::invalid_argument("evaluate_probe: empty evaluation set");
    }
    if (features.cols() != model.mean.size()) {
        throw std::invalid_argument("evaluate_probe: feature dim " + std::to_string(features.cols()) +
                                    " does not match probe dim " + std::to_string(model.mean.size()));
    }
    if (features.rows() != static_cast<Index>(labels.size())) {
        throw std::invalid_argument("evaluate_probe: feature rows and labels differ");
    }
    const MatrixX<double> logits =
        (standardize(model, features) * model.weights.transpose()).rowwise() + model.bias.transpose();
    std::vector<Index> correct(static_cast<std::size_t>(model.classes), 0);
    std::vector<Index> seen(static_cast<std::size_t>(model.classes), 0);
    Index total_correct = 0;
    for (Index i = 0; i < logits.rows(); ++i) {
        Index pred = 0;
        logits.row(i).maxCoeff(&pred);
        const int y = labels[static_cast<std::size_t>(i)];
        if (y < 0 || y >= model.classes) {
            throw std::invalid_argument("evaluate_probe: label out of range");
        }
        ++seen[static_cast<std::size_t>(y)];
        if (pred == y) {
            ++correct[static_cast<std::size_t>(y)];
            ++total_correct;
        }
    }
    ProbeReport report;
    report.count = logits.rows();
    report.top1 = static_cast<double>(total_correct) / static_cast<double>(logits.rows());
    for (int k = 0; k < model.classes; ++k) {
        const auto s = seen[static_cast<std::size_t>(k)];
        report.per_class.push_back(s ? static_cast<double>(correct[static_cast<std::size_t>(k)]) / s : 0.0);
    }
    return report;
}

std::string ProbeReport::to_kv(const std::string& prefix) const {
    std::ostringstream out;
    out << prefix << "top1 = " << fixed4(top1) << '\n';
    out << prefix << "count = " << count << '\n';
    out << prefix << "t_fixed = " << t_fixed << '\n';
    out << prefix << "enc_blocks = " << enc_blocks << '\n';
    out << prefix << "input = " << (noisy_input ? "noisy" : "clean") << '\n';
    out << prefix << "seed = " << seed << '\n';
    for (std::size_t k = 0; k < per_class.size(); ++k) {
        out << prefix << "class" << k << " = " << fixed4(per_class[k]) << '\n';
    }
    return out.str();
}

ProbeReport run_probe(const ProbeFeatures& features, const ProbeConfig& cfg) {
    const ProbeModel model = fit_probe(features.train_views, features.train_labels, features.classes, cfg);
    ProbeReport report = evaluate_probe(model, features.val, features.val_labels);
    report.seed = cfg.seed;
    return report;
}

std::string SweepTable::csv() const {
    std::ostringstream out;
    out << corner;
    for (const auto& c : columns) {
        out << ',' << c;
    }
    out << '\n';
    for (std::size_t r = 0; r < row_names.size(); ++r) {
        out << row_names[r];
        for (double v : values[r]) {
            out << ',' << fixed4(v);
        }
        out << '\n';
    }
    return out.str();
}

SweepTable sweep_fixed_t(const FeatureFn& features, std::span<const int> ts, std::span<const bool> noisy_flags,
                         int enc_blocks, const ProbeConfig& cfg) {
    if (ts.empty() || noisy_flags.empty()) {
        throw std::invalid_argument("sweep_fixed_t: empty sweep grid");
    }
    SweepTable table;
    table.corner = "fixed_t";
    for (int t : ts) {
        table.columns.push_back(std::to_string(t));
    }
    for (bool noisy : noisy_flags) {
        table.row_names.push_back(noisy ? "noisy" : "clean");
        std::vector<double> row;
        for (int t : ts) {
            row.push_back(run_probe(features(t, enc_blocks, noisy), cfg).top1);
        }
        table.values.push_back(std::move(row));
    }
    return table;
}

SweepTable sweep_encoder_depth(const FeatureFn& features, std::span<const int> blocks, int t,
                               const ProbeConfig& cfg) {
    if (blocks.empty()) {
        throw std::invalid_argument("sweep_encoder_depth: empty sweep grid");
    }
    SweepTable table;
    table.corner = "enc_blocks";
    table.row_names.push_back("top1");
    std::vector<double> row;
    for (int b : blocks) {
        table.columns.push_back(std::to_string(b));
        row.push_back(run_probe(features(t, b, false), cfg).top1);
    }
    table.values.push_back(std::move(row));
    return table;
}

} // namespace ldae
