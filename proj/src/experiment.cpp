// SPDX-License-Identifier: Apache-2.0
#include "ldae/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <stdexcept>

#include "ldae/patches.hpp"
#include "ldae/rng.hpp"

namespace ldae {

namespace {

constexpr std::uint64_t kInitStream = 0x494e4954ULL;
constexpr std::uint64_t kTrainStream = 0x545241494eULL;
constexpr std::uint64_t kProbeStream = 0x50524f4245ULL;
constexpr std::uint64_t kFeatureStream = 0x46454154ULL;
constexpr std::uint64_t kPcaStream = 0x504341ULL;
constexpr std::uint64_t kPsnrStream = 0x50534e52ULL;

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

std::vector<ImageD> select_images(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<ImageD> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        out.push_back(data.images[i]);
    }
    return out;
}

// Two bars per step (trained, floor) on a white canvas, values in [0, 1].
ImageD bar_chart(std::span<const StepOutcome> rows) {
    const Index bar = 6;
    const Index gap = 6;
    const Index height = 100;
    const Index width = gap + static_cast<Index>(rows.size()) * (2 * bar + gap);
    ImageD img(height + 2, width);
    img.data().setOnes();
    for (std::size_t s = 0; s < rows.size(); ++s) {
        const Index x0 = gap + static_cast<Index>(s) * (2 * bar + gap);
        const double values[2] = {rows[s].top1, rows[s].floor};
        for (int k = 0; k < 2; ++k) {
            const Index h = static_cast<Index>(std::lround(std::clamp(values[k], 0.0, 1.0) * height));
            const double shade = k == 0 ? -0.6 : 0.4;
            for (Index r = height + 1 - h; r <= height; ++r) {
                for (Index c = x0 + k * bar; c < x0 + (k + 1) * bar; ++c) {
                    for (Index ch = 0; ch < 3; ++ch) {
                        img(r, c, ch) = (k == 0 && ch == 2) ? 0.2 : shade;
                    }
                }
            }
        }
    }
    for (Index c = 0; c < width; ++c) {
        for (Index ch = 0; ch < 3; ++ch) {
            img(height + 1, c, ch) = -1.0;
        }
    }
    return img;
}

} // namespace

ExperimentConfig ExperimentConfig::from(const Config& c) {
    ExperimentConfig e;
    e.seed = static_cast<std::uint64_t>(c.get_int("seed", 0));

    e.data_dir = c.get_string("data.dir", "");
    e.labels_file = c.get_string("data.labels", "");
    e.synth.classes = static_cast<int>(c.get_int("data.classes", 8));
    e.synth.size = c.get_int("data.size", 32);
    e.synth.per_class = static_cast<int>(c.get_int("data.per_class", 128));
    e.synth.val_fraction = c.get_double("data.val_fraction", 0.1);
    e.synth.seed = static_cast<std::uint64_t>(c.get_int("data.seed", static_cast<long>(e.seed)));

    e.patch_size = c.get_int("tokenizer.patch", 4);
    e.tokenizer = parse_tokenizer_kind(c.get_string("tokenizer.kind", "pca"));
    e.latent_dim = c.get_int("tokenizer.latent_dim", 16);
    e.pca_samples = c.get_int("tokenizer.samples", 65536);
    e.codec.steps = static_cast<int>(c.get_int("tokenizer.codec_steps", 4000));
    e.codec.learning_rate = c.get_double("tokenizer.codec_lr", 0.5);
    e.codec.seed = e.seed;
    e.vae_kl = c.get_double("tokenizer.vae_kl", 1e-3);

    e.width = c.get_int("model.width", 64);
    e.depth = static_cast<int>(c.get_int("model.depth", 4));
    e.heads = static_cast<int>(c.get_int("model.heads", 4));
    e.steps = static_cast<int>(c.get_int("model.steps", 1000));

    e.optimizer.base_lr = c.get_double("train.blr", 4e-3);
    e.optimizer.batch_size = static_cast<int>(c.get_int("train.batch", 64));
    e.optimizer.epochs = static_cast<int>(c.get_int("train.epochs", 20));
    e.optimizer.warmup_epochs = static_cast<int>(c.get_int("train.warmup_epochs", 2));
    e.optimizer.beta1 = c.get_double("train.beta1", 0.9);
    e.optimizer.beta2 = c.get_double("train.beta2", 0.95);
    e.optimizer.weight_decay = c.get_double("train.weight_decay", 0.0);
    e.optimizer.grad_clip = c.get_double("train.grad_clip", 0.0);
    e.residual_weight = c.get_double("loss.residual_weight", 0.1);
    e.sigma_max = c.get_double("diffusion.sigma_max", std::sqrt(2.0));
    e.sigma_const = c.get_double("diffusion.sigma_const", std::sqrt(1.0 / 3.0));

    e.probe.epochs = static_cast<int>(c.get_int("probe.epochs", 300));
    e.probe.batch_size = static_cast<int>(c.get_int("probe.batch", 128));
    e.probe.learning_rate = c.get_double("probe.lr", 0.5);
    e.probe.momentum = c.get_double("probe.momentum", 0.9);
    e.probe.seed = derive_seed(e.seed, kProbeStream);
    e.probe_t = static_cast<int>(c.get_int("probe.t", 10));
    e.probe_blocks = static_cast<int>(c.get_int("probe.blocks", 0));
    e.probe_noisy = c.get_bool("probe.noisy", false);
    e.probe_flip = c.get_bool("probe.flip", true);

    if (e.synth.size % e.patch_size != 0) {
        throw std::invalid_argument("config: data.size must be divisible by tokenizer.patch");
    }
    return e;
}

Dataset load_dataset(const ExperimentConfig& cfg) {
    if (cfg.data_dir.empty()) {
        return synth_dataset(cfg.synth);
    }
    const std::filesystem::path dir = cfg.data_dir;
    const std::filesystem::path labels = cfg.labels_file.empty() ? dir / "labels.csv" : std::filesystem::path(cfg.labels_file);
    return ingest_dataset(dir, labels, cfg.synth.val_fraction, cfg.synth.seed);
}

std::vector<MatrixX<double>> patch_grids(const Dataset& data, std::span<const std::size_t> indices, Index patch_size,
                                         bool flip) {
    std::vector<MatrixX<double>> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        out.push_back(extract_patches(flip ? flip_horizontal(data.images[i]) : data.images[i], patch_size));
    }
    return out;
}

std::vector<int> labels_of(const Dataset& data, std::span<const std::size_t> indices) {
    std::vector<int> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        out.push_back(data.manifest.entries[i].label);
    }
    return out;
}

PatchBasis fit_full_pca(const ExperimentConfig& cfg, const Dataset& data) {
    const auto train = data.indices(false);
    const auto images = select_images(data, train);
    const PatchSample sample = sample_patches(images, cfg.patch_size, cfg.pca_samples, derive_seed(cfg.seed, kPcaStream));
    const Index full = cfg.patch_size * cfg.patch_size * 3;
    return fit_pca(sample, cfg.patch_size, full);
}

PatchBasis fit_tokenizer(const ExperimentConfig& cfg, const Dataset& data, TokenizerKind kind, Index latent_dim,
                         const PatchBasis& full_pca) {
    switch (kind) {
    case TokenizerKind::pca:
        return truncate(full_pca, latent_dim);
    case TokenizerKind::identity:
        return identity_basis(cfg.patch_size);
    case TokenizerKind::linear_ae:
    case TokenizerKind::linear_vae: {
        const auto train = data.indices(false);
        const auto images = select_images(data, train);
        const PatchSample sample =
            sample_patches(images, cfg.patch_size, cfg.pca_samples, derive_seed(cfg.seed, kPcaStream));
        return kind == TokenizerKind::linear_ae
                   ? fit_linear_ae(sample, cfg.patch_size, latent_dim, cfg.codec)
                   : fit_linear_vae(sample, cfg.patch_size, latent_dim, cfg.vae_kl, cfg.codec);
    }
    }
    throw std::invalid_argument("fit_tokenizer: unknown kind");
}

std::string ladder_name(int step) {
    static const char* names[kLadderSteps] = {
        "latent_predict_noise", "predict_clean",          "remove_input_scaling", "image_input",
        "image_output",         "predict_original_image", "single_noise_level",
    };
    if (step < 1 || step > kLadderSteps) {
        throw std::invalid_argument("ladder step " + std::to_string(step) + " outside [1, 7]");
    }
    return names[step - 1];
}

double ladder_reference(int step) {
    static const double ref[kLadderSteps] = {63.4, 62.4, 63.6, 63.6, 63.9, 64.5, 61.5};
    ladder_name(step);
    return ref[step - 1];
}

DenoisingTask ladder_task(int step, const PatchBasis& basis, const PatchBasis& full_pca, const ExperimentConfig& cfg) {
    ladder_name(step);
    DenoisingTask task;
    task.basis = basis;
    task.schedule = NoiseSchedule::linear_gamma_sq(cfg.steps);
    task.space = NoiseSpace::latent_in_latent_out;
    task.loss = {TargetKind::predict_noise, WeightKind::unit, cfg.residual_weight};
    if (step >= 2) {
        task.loss.target = TargetKind::predict_clean;
        task.loss.weight = WeightKind::gamma_sq;
    }
    if (step >= 3) {
        task.schedule = NoiseSchedule::fixed_gamma(cfg.steps, cfg.sigma_max);
        task.loss.weight = WeightKind::inv_one_plus_sigma_sq;
    }
    if (step >= 4) {
        task.space = NoiseSpace::image_in_latent_out;
    }
    if (step >= 5) {
        task.space = NoiseSpace::image_in_image_out;
    }
    if (step >= 6) {
        task.loss.target = TargetKind::predict_original_image;
        task.full_basis = full_pca.encoder;
    }
    if (step >= 7) {
        task.schedule = NoiseSchedule::single_level(cfg.steps, cfg.sigma_const);
    }
    task.validate();
    return task;
}

DenoiserConfig denoiser_config(const ExperimentConfig& cfg, const DenoisingTask& task, Index image_size) {
    return DenoiserConfig::make(task.input_dim(), task.output_dim(), image_size / cfg.patch_size, cfg.width, cfg.depth,
                                cfg.heads, cfg.steps);
}

template <typename Scalar>
ProbeFeatures extract_features(const DenoiserParams<Scalar>& params, const DenoisingTask& task, const Dataset& data,
                               Index patch_size, int t, int enc_blocks, bool noisy, bool flip, std::uint64_t seed) {
    const auto train = data.indices(false);
    const auto val = data.indices(true);
    const Index feat = params.config.width;

    auto features = [&](std::span<const std::size_t> idx, bool mirrored, std::uint64_t stream) {
        MatrixX<double> out(static_cast<Index>(idx.size()), feat);
        for (std::size_t n = 0; n < idx.size(); ++n) {
            const ImageD& img = data.images[idx[n]];
            const MatrixX<double> x0 = extract_patches(mirrored ? flip_horizontal(img) : img, patch_size);
            MatrixX<double> input;
            if (noisy) {
                Rng rng(derive_seed(seed, stream, idx[n]));
                input = noisy_input(task, x0, t, rng);
            } else {
                input = clean_input(task, x0, t);
            }
            out.row(static_cast<Index>(n)) =
                encoder_features(params, MatrixX<Scalar>(input.cast<Scalar>()), t, enc_blocks).template cast<double>().transpose();
        }
        return out;
    };

    ProbeFeatures f;
    f.classes = data.manifest.classes;
    f.train_views.push_back(features(train, false, kFeatureStream));
    if (flip) {
        f.train_views.push_back(features(train, true, kFeatureStream + 1));
    }
    f.train_labels = labels_of(data, train);
    f.val = features(val, false, kFeatureStream + 2);
    f.val_labels = labels_of(data, val);
    return f;
}

int nearest_step(const NoiseSchedule& schedule, double sigma) {
    int best = 1;
    double gap = std::abs(gamma_sigma(schedule, 1).sigma - sigma);
    for (int t = 2; t <= schedule.steps; ++t) {
        const double g = std::abs(gamma_sigma(schedule, t).sigma - sigma);
        if (g < gap) {
            gap = g;
            best = t;
        }
    }
    return best;
}

template <typename Scalar>
PsnrReport denoising_psnr(const DenoiserParams<Scalar>& params, const DenoisingTask& task, const Dataset& data,
                          Index patch_size, double sigma, std::uint64_t seed) {
    PsnrReport rep;
    rep.sigma = sigma;
    rep.t = nearest_step(task.schedule, sigma);
    const double gamma = gamma_sigma(task.schedule, rep.t).gamma;
    const auto val = data.indices(true);
    if (val.empty()) {
        throw std::invalid_argument("denoising_psnr: no held-out images");
    }
    for (std::size_t i : val) {
        const ImageD& x0 = data.images[i];
        const MatrixX<double> patches = extract_patches(x0, patch_size);
        Rng rng(derive_seed(seed, kPsnrStream, i));
        const MatrixX<double> input = input_at_level(task, patches, gamma, sigma, rng);
        const MatrixX<double> pred = forward(params, MatrixX<Scalar>(input.cast<Scalar>()), rep.t).template cast<double>();
        const MatrixX<double> noisy_pixels =
            input_as_pixels(task, image_input(task.space) ? input : MatrixX<double>(input / gamma));
        const MatrixX<double> est = prediction_as_pixels(task, pred, input, gamma, sigma);
        rep.noisy_db += psnr(x0, assemble_patches(noisy_pixels, x0.height(), x0.width(), patch_size));
        rep.denoised_db += psnr(x0, assemble_patches(est, x0.height(), x0.width(), patch_size));
    }
    rep.count = static_cast<Index>(val.size());
    rep.noisy_db /= static_cast<double>(rep.count);
    rep.denoised_db /= static_cast<double>(rep.count);
    return rep;
}

PretrainRun pretrain(const ExperimentConfig& cfg, const Dataset& data, DenoisingTask task) {
    const auto start = std::chrono::steady_clock::now();
    const auto train_idx = data.indices(false);
    const auto grids = patch_grids(data, train_idx, cfg.patch_size);
    const DenoiserConfig dcfg = denoiser_config(cfg, task, data.manifest.height);
    PretrainRun run{std::move(task), init_params<float>(dcfg, derive_seed(cfg.seed, kInitStream)), {}, 0.0};
    TrainConfig tc;
    tc.optimizer = cfg.optimizer;
    tc.seed = derive_seed(cfg.seed, kTrainStream);
    run.train = train(run.params, run.task, std::span<const MatrixX<double>>(grids), tc);
    run.seconds = seconds_since(start);
    return run;
}

ProbeOutcome probe_with_floor(const ExperimentConfig& cfg, const Dataset& data, const PretrainRun& run) {
    const int blocks = cfg.encoder_blocks();
    const std::uint64_t fseed = derive_seed(cfg.seed, kFeatureStream);
    ProbeOutcome out;
    {
        const ProbeFeatures f = extract_features(run.params, run.task, data, cfg.patch_size, cfg.probe_t, blocks,
                                                 cfg.probe_noisy, cfg.probe_flip, fseed);
        out.trained = run_probe(f, cfg.probe);
    }
    {
        const auto random = init_params<float>(run.params.config, derive_seed(cfg.seed, kInitStream));
        const ProbeFeatures f = extract_features(random, run.task, data, cfg.patch_size, cfg.probe_t, blocks,
                                                 cfg.probe_noisy, cfg.probe_flip, fseed);
        out.floor = run_probe(f, cfg.probe);
    }
    for (ProbeReport* r : {&out.trained, &out.floor}) {
        r->t_fixed = cfg.probe_t;
        r->enc_blocks = blocks;
        r->noisy_input = cfg.probe_noisy;
        r->seed = cfg.seed;
    }
    return out;
}

std::string trajectory_csv(std::span<const StepOutcome> rows) {
    std::string out = "step,name,top1,floor,gain,reference_top1,status\n";
    for (const auto& r : rows) {
        out += std::to_string(r.step) + "," + r.name + ",";
        if (r.ok) {
            out += fixed(r.top1) + "," + fixed(r.floor) + "," + fixed(r.top1 - r.floor) + ",";
        } else {
            out += ",,,";
        }
        out += fixed(ladder_reference(r.step), 1) + "," + (r.ok ? "ok" : "failed") + "\n";
    }
    return out;
}

std::vector<StepOutcome> run_trajectory(const ExperimentConfig& cfg, const Config& snapshot, const Dataset& data,
                                        const std::filesystem::path& out, std::span<const int> steps) {
    std::vector<int> todo(steps.begin(), steps.end());
    if (todo.empty()) {
        for (int s = 1; s <= kLadderSteps; ++s) {
            todo.push_back(s);
        }
    }
    std::filesystem::create_directories(out);
    const PatchBasis full = fit_full_pca(cfg, data);
    const PatchBasis basis = truncate(full, cfg.latent_dim);
    save_basis(basis, out / "basis.ldae");

    std::vector<StepOutcome> rows;
    for (int step : todo) {
        StepOutcome row;
        row.step = step;
        const auto start = std::chrono::steady_clock::now();
        try {
            row.name = ladder_name(step);
            char dir_name[32];
            std::snprintf(dir_name, sizeof(dir_name), "step_%d", step);
            const std::filesystem::path dir = out / dir_name;
            std::filesystem::create_directories(dir);

            const PretrainRun run = pretrain(cfg, data, ladder_task(step, basis, full, cfg));
            const ProbeOutcome probe = probe_with_floor(cfg, data, run);
            row.top1 = probe.trained.top1;
            row.floor = probe.floor.top1;
            row.initial_loss = run.train.initial_loss;
            row.final_loss = run.train.final_loss;

            save_denoiser(run.params, dir / "denoiser.ldae");
            // triptych of the first held-out image at the single-level noise
            const auto val = data.indices(true);
            const ImageD& x0 = data.images[val.front()];
            const MatrixX<double> patches = extract_patches(x0, cfg.patch_size);
            const double sigma = std::sqrt(1.0 / 3.0);
            const int t = nearest_step(run.task.schedule, sigma);
            const double gamma = gamma_sigma(run.task.schedule, t).gamma;
            Rng rng(derive_seed(cfg.seed, kPsnrStream, val.front()));
            const MatrixX<double> input = input_at_level(run.task, patches, gamma, sigma, rng);
            const MatrixX<double> pred =
                forward(run.params, MatrixX<float>(input.cast<float>()), t).cast<double>();
            const MatrixX<double> noisy_px = input_as_pixels(
                run.task, image_input(run.task.space) ? input : MatrixX<double>(input / gamma));
            const MatrixX<double> est = prediction_as_pixels(run.task, pred, input, gamma, sigma);
            export_triptych(x0, assemble_patches(noisy_px, x0.height(), x0.width(), cfg.patch_size),
                            assemble_patches(est, x0.height(), x0.width(), cfg.patch_size), dir / "triptych.ppm");

            row.manifest.command = "trajectory";
            row.manifest.name = row.name;
            row.manifest.step = step;
            row.manifest.seed = cfg.seed;
            row.manifest.config = snapshot.values();
            row.manifest.config["ladder.schedule"] = to_string(run.task.schedule.kind);
            row.manifest.config["ladder.space"] = to_string(run.task.space);
            row.manifest.config["ladder.target"] = to_string(run.task.loss.target);
            row.manifest.config["ladder.weight"] = to_string(run.task.loss.weight);
            row.manifest.metrics["probe_top1"] = fixed(row.top1, 6);
            row.manifest.metrics["floor_top1"] = fixed(row.floor, 6);
            row.manifest.metrics["initial_loss"] = format_double(row.initial_loss);
            row.manifest.metrics["final_loss"] = format_double(row.final_loss);
            row.manifest.metrics["params_checksum"] = std::to_string(params_checksum(run.params));
            row.manifest.metrics["reference_top1"] = fixed(ladder_reference(step), 1);
            row.manifest.timings["pretrain_s"] = run.seconds;
            row.manifest.artifacts["denoiser"] = (dir / "denoiser.ldae").string();
            row.manifest.artifacts["triptych"] = (dir / "triptych.ppm").string();
            row.manifest.artifacts["basis"] = (out / "basis.ldae").string();
            row.seconds = seconds_since(start);
            row.manifest.timings["step_s"] = row.seconds;
            row.manifest.write(dir / "manifest.txt");
            row.ok = true;
        } catch (const std::exception& e) {
            row.ok = false;
            row.error = e.what();
            row.seconds = seconds_since(start);
            std::cerr << "trajectory: step " << step << " failed: " << e.what() << '\n';
        }
        rows.push_back(row);
        write_text_atomic(out / "trajectory.csv", trajectory_csv(rows));
    }

    std::string bars = "step,name,series,value\n";
    for (const auto& r : rows) {
        bars += std::to_string(r.step) + "," + r.name + ",trained," + (r.ok ? fixed(r.top1) : "") + "\n";
        bars += std::to_string(r.step) + "," + r.name + ",floor," + (r.ok ? fixed(r.floor) : "") + "\n";
        bars += std::to_string(r.step) + "," + r.name + ",reference," + fixed(ladder_reference(r.step) / 100.0) + "\n";
    }
    write_text_atomic(out / "bars.csv", bars);
    write_ppm(bar_chart(rows), out / "bars.ppm");
    return rows;
}

std::vector<TokenizerCell> run_tokenizer_sweep(const ExperimentConfig& cfg, const Dataset& data,
                                               std::span<const TokenizerKind> kinds, std::span<const Index> dims,
                                               int ladder_step) {
    const PatchBasis full = fit_full_pca(cfg, data);
    const Index full_dim = full.full_dim;
    const auto train_idx = data.indices(false);
    const auto images = select_images(data, train_idx);
    const MatrixX<double> held = sample_patches(images, cfg.patch_size, 8192, derive_seed(cfg.seed, kPcaStream, 1)).patches;

    std::vector<TokenizerCell> cells;
    for (TokenizerKind kind : kinds) {
        std::vector<Index> grid(dims.begin(), dims.end());
        if (kind == TokenizerKind::identity) {
            grid = {full_dim};
        }
        for (Index d : grid) {
            TokenizerCell cell;
            cell.kind = kind;
            cell.latent_dim = d;
            const PatchBasis basis = fit_tokenizer(cfg, data, kind, d, full);
            cell.reconstruction_mse = reconstruction_mse(basis, held);
            // the residual weighting needs an orthonormal full basis; the
            // identity tokenizer supplies its own
            const PatchBasis& full_for_loss = kind == TokenizerKind::identity ? basis : full;
            const PretrainRun run = pretrain(cfg, data, ladder_task(ladder_step, basis, full_for_loss, cfg));
            const ProbeOutcome probe = probe_with_floor(cfg, data, run);
            cell.top1 = probe.trained.top1;
            cell.floor = probe.floor.top1;
            cells.push_back(cell);
        }
    }
    return cells;
}

std::string tokenizer_sweep_csv(std::span<const TokenizerCell> cells) {
    std::string out = "kind,latent_dim,top1,floor,reconstruction_mse\n";
    for (const auto& c : cells) {
        out += to_string(c.kind) + "," + std::to_string(c.latent_dim) + "," + fixed(c.top1) + "," + fixed(c.floor) +
               "," + fixed(c.reconstruction_mse, 6) + "\n";
    }
    return out;
}

#define LDAE_INSTANTIATE(S)                                                                                        \
    template ProbeFeatures extract_features<S>(const DenoiserParams<S>&, const DenoisingTask&, const Dataset&,     \
                                               Index, int, int, bool, bool, std::uint64_t);                        \
    template PsnrReport denoising_psnr<S>(const DenoiserParams<S>&, const DenoisingTask&, const Dataset&, Index,   \
                                          double, std::uint64_t);
LDAE_INSTANTIATE(float)
LDAE_INSTANTIATE(double)
#undef LDAE_INSTANTIATE

} // namespace ldae
