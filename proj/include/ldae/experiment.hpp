// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ldae/config.hpp"
#include "ldae/dataset.hpp"
#include "ldae/denoiser.hpp"
#include "ldae/manifest.hpp"
#include "ldae/probe.hpp"

namespace ldae {

/// Every knob a run reads, resolved from a Config (defaults recorded back
/// into it).
struct ExperimentConfig {
    std::uint64_t seed = 0;

    // data
    std::string data_dir; // empty: synthesize
    std::string labels_file;
    SynthSpec synth;

    // tokenizer
    Index patch_size = 4;
    TokenizerKind tokenizer = TokenizerKind::pca;
    Index latent_dim = 16;
    Index pca_samples = 65536;
    LinearCodecConfig codec;
    double vae_kl = 1e-3;

    // denoiser
    Index width = 64;
    int depth = 4;
    int heads = 4;
    int steps = 1000;
    OptimizerConfig optimizer;
    double residual_weight = 0.1;
    double sigma_max = 1.4142135623730951;  // fixed_gamma
    double sigma_const = 0.5773502691896258; // single_level

    // probe
    ProbeConfig probe;
    int probe_t = 10;
    int probe_blocks = 0; // 0: depth / 2
    bool probe_noisy = false;
    bool probe_flip = true;

    static ExperimentConfig from(const Config& config);
    int encoder_blocks() const { return probe_blocks > 0 ? probe_blocks : depth / 2; }
};

/// Synthesizes or ingests the dataset named by the config.
Dataset load_dataset(const ExperimentConfig& cfg);

/// Patch grids of the selected images, optionally mirrored.
std::vector<MatrixX<double>> patch_grids(const Dataset& data, std::span<const std::size_t> indices, Index patch_size,
                                         bool flip = false);
std::vector<int> labels_of(const Dataset& data, std::span<const std::size_t> indices);

/// Full-rank PCA (d = D) from the training split; truncate for any d.
PatchBasis fit_full_pca(const ExperimentConfig& cfg, const Dataset& data);

/// Tokenizer of the given kind and latent dimension. PCA reuses `full_pca`.
PatchBasis fit_tokenizer(const ExperimentConfig& cfg, const Dataset& data, TokenizerKind kind, Index latent_dim,
                         const PatchBasis& full_pca);

/// The seven rungs, from predict-noise in latent space to single-level noise.
constexpr int kLadderSteps = 7;
std::string ladder_name(int step);
/// Headline accuracies of the full-scale runs; annotations only.
double ladder_reference(int step);

DenoisingTask ladder_task(int step, const PatchBasis& basis, const PatchBasis& full_pca, const ExperimentConfig& cfg);

DenoiserConfig denoiser_config(const ExperimentConfig& cfg, const DenoisingTask& task, Index image_size);

/// Probe features of a frozen encoder: training views (plus a mirrored view
/// when flip is set) and the held-out split.
template <typename Scalar>
ProbeFeatures extract_features(const DenoiserParams<Scalar>& params, const DenoisingTask& task, const Dataset& data,
                               Index patch_size, int t, int enc_blocks, bool noisy, bool flip, std::uint64_t seed);

struct PsnrReport {
    double noisy_db = 0.0;
    double denoised_db = 0.0;
    double sigma = 0.0;
    int t = 0;
    Index count = 0;
};

/// Mean PSNR of the network input and of its clean estimate over held-out
/// images, with latent noise at exactly (gamma, sigma); the network is
/// conditioned on the step whose level is closest.
template <typename Scalar>
PsnrReport denoising_psnr(const DenoiserParams<Scalar>& params, const DenoisingTask& task, const Dataset& data,
                          Index patch_size, double sigma, std::uint64_t seed);

/// Step t in [1, T] whose sigma is closest to the requested one.
int nearest_step(const NoiseSchedule& schedule, double sigma);

struct StepOutcome {
    int step = 0;
    std::string name;
    bool ok = false;
    std::string error;
    double top1 = 0.0;
    double floor = 0.0;
    double initial_loss = 0.0;
    double final_loss = 0.0;
    double seconds = 0.0;
    RunManifest manifest;
};

struct PretrainRun {
    DenoisingTask task;
    DenoiserParams<float> params;
    TrainResult train;
    double seconds = 0.0;
};

/// Pretrains one task on the training split in single precision.
PretrainRun pretrain(const ExperimentConfig& cfg, const Dataset& data, DenoisingTask task);

struct ProbeOutcome {
    ProbeReport trained;
    ProbeReport floor;
};

/// Probe on the trained encoder and on a random-init encoder of the same
/// shape and seed.
ProbeOutcome probe_with_floor(const ExperimentConfig& cfg, const Dataset& data, const PretrainRun& run);

/// Runs ladder steps [1, 7]. Failures are recorded and later steps still run.
/// Writes trajectory.csv, bars.csv and per-step directories under out.
std::vector<StepOutcome> run_trajectory(const ExperimentConfig& cfg, const Config& snapshot, const Dataset& data,
                                        const std::filesystem::path& out, std::span<const int> steps = {});

std::string trajectory_csv(std::span<const StepOutcome> rows);

struct TokenizerCell {
    TokenizerKind kind = TokenizerKind::pca;
    Index latent_dim = 0;
    double top1 = 0.0;
    double floor = 0.0;
    double reconstruction_mse = 0.0;
};

/// Per (kind, d): fit tokenizer, pretrain one ladder step, probe.
/// Identity cells always use d = D.
std::vector<TokenizerCell> run_tokenizer_sweep(const ExperimentConfig& cfg, const Dataset& data,
                                               std::span<const TokenizerKind> kinds, std::span<const Index> dims,
                                               int ladder_step);
std::string tokenizer_sweep_csv(std::span<const TokenizerCell> cells);

} // namespace ldae
