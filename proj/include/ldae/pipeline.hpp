// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "ldae/diffusion.hpp"
#include "ldae/image.hpp"
#include "ldae/rng.hpp"
#include "ldae/tokenizer.hpp"

namespace ldae {

/// Where the network reads its input and writes its prediction.
enum class NoiseSpace { latent_in_latent_out, image_in_latent_out, image_in_image_out };

std::string to_string(NoiseSpace space);
NoiseSpace parse_noise_space(const std::string& name);

/// True when the network reads pixel patches.
bool image_input(NoiseSpace space);

struct CorruptionConfig {
    PatchBasis basis;
    NoiseSchedule schedule;
    NoiseSpace space = NoiseSpace::image_in_image_out;
    /// Drop the part of x0 outside the top-d eigenspace from x_t.
    bool drop_orthogonal_complement = true;
};

/// Eq.-1 corruption of an encoded token grid, independent noise per entry.
DiffusionDraw<double> corrupt_latent(const MatrixX<double>& z0, const NoiseSchedule& schedule, int t, Rng& rng);

struct CorruptedImage {
    ImageD xt;
    DiffusionDraw<double> draw; // latent-space record
};

/// Encode each patch, corrupt in the latent, decode back to pixels.
CorruptedImage corrupt_image(const ImageD& x0, const CorruptionConfig& cfg, int t, Rng& rng);

/// As corrupt_image with an explicit noise level instead of a schedule step.
CorruptedImage corrupt_image_at(const ImageD& x0, const CorruptionConfig& cfg, double gamma, double sigma, Rng& rng);

/// x0 + sigma * eps elementwise, unclamped.
ImageD corrupt_pixels(const ImageD& x0, double sigma, Rng& rng);

/// Clean | noisy | denoised with 4-pixel white separators.
ImageD make_triptych(const ImageD& x0, const ImageD& xt, const ImageD& x_hat);
void export_triptych(const ImageD& x0, const ImageD& xt, const ImageD& x_hat, const std::filesystem::path& path);

/// Everything needed to turn a clean image into one training example for
/// one rung of the deconstruction ladder.
struct DenoisingTask {
    PatchBasis basis;
    /// Complete D x D PCA basis; required by predict_original_image.
    std::optional<MatrixX<double>> full_basis;
    NoiseSchedule schedule;
    NoiseSpace space = NoiseSpace::latent_in_latent_out;
    LossSpec loss;
    bool drop_orthogonal_complement = true;

    Index input_dim() const;
    Index output_dim() const;
    /// Throws on inconsistent combinations.
    void validate() const;
};

struct TrainingExample {
    MatrixX<double> input;
    MatrixX<double> target;
    double lambda = 1.0;
    int t = 0;
};

TrainingExample make_example(const DenoisingTask& task, const MatrixX<double>& x0_patches, int t, Rng& rng);

/// Network input at step t with zero noise. t = 0 is the clean endpoint.
MatrixX<double> clean_input(const DenoisingTask& task, const MatrixX<double>& x0_patches, int t);

/// Network input corrupted at step t (t = 0 yields the clean input).
MatrixX<double> noisy_input(const DenoisingTask& task, const MatrixX<double>& x0_patches, int t, Rng& rng);

/// Network input for an explicit noise level (gamma, sigma).
MatrixX<double> input_at_level(const DenoisingTask& task, const MatrixX<double>& x0_patches, double gamma,
                               double sigma, Rng& rng);

/// Loss of one example and optional gradient with respect to the prediction.
double example_loss(const DenoisingTask& task, const MatrixX<double>& pred, const TrainingExample& example,
                    MatrixX<double>* grad = nullptr);

/// Network input tokens rendered as pixel patches.
MatrixX<double> input_as_pixels(const DenoisingTask& task, const MatrixX<double>& input);

/// Prediction rendered as pixel patches (an x0 estimate). `input`, gamma
/// and sigma are used only by predict_noise.
MatrixX<double> prediction_as_pixels(const DenoisingTask& task, const MatrixX<double>& pred,
                                     const MatrixX<double>& input, double gamma, double sigma);

} // namespace ldae
