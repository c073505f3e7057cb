// SPDX-License-Identifier: Apache-2.0
#include "ldae/pipeline.hpp"

#include <stdexcept>

#include "ldae/patches.hpp"

namespace ldae {

std::string to_string(NoiseSpace space) {
    switch (space) {
    case NoiseSpace::latent_in_latent_out:
        return "latent_in_latent_out";
    case NoiseSpace::image_in_latent_out:
        return "image_in_latent_out";
    case NoiseSpace::image_in_image_out:
        return "image_in_image_out";
    }
    return "unknown";
}

NoiseSpace parse_noise_space(const std::string& name) {
    if (name == "latent_in_latent_out") {
        return NoiseSpace::latent_in_latent_out;
    }
    if (name == "image_in_latent_out") {
        return NoiseSpace::image_in_latent_out;
    }
    if (name == "image_in_image_out") {
        return NoiseSpace::image_in_image_out;
    }
    throw std::invalid_argument("unknown noise space '" + name + "'");
}

DiffusionDraw<double> corrupt_latent(const MatrixX<double>& z0, const NoiseSchedule& schedule, int t, Rng& rng) {
    return diffuse(z0, schedule, t, rng);
}

bool image_input(NoiseSpace space) { return space != NoiseSpace::latent_in_latent_out; }

namespace {

// Pixel patches of a noisy latent, optionally restoring the part of the
// clean patches that the truncated basis cannot represent.
MatrixX<double> back_project(const PatchBasis& basis, const MatrixX<double>& zt, const MatrixX<double>& z0,
                             const MatrixX<double>& x0_patches, bool drop_complement) {
    MatrixX<double> pix = decode_tokens(basis, zt);
    if (!drop_complement) {
        pix += x0_patches - decode_tokens(basis, z0);
    }
    return pix;
}

CorruptedImage corrupt_with(const ImageD& x0, const CorruptionConfig& cfg, DiffusionDraw<double> draw,
                            const MatrixX<double>& patches) {
    const MatrixX<double> pix =
        back_project(cfg.basis, draw.zt, draw.z0, patches, cfg.drop_orthogonal_complement);
    return {assemble_patches(pix, x0.height(), x0.width(), cfg.basis.patch_size), std::move(draw)};
}

void check_image_corruption(const CorruptionConfig& cfg) {
    if (!cfg.basis.invertible()) {
        throw std::invalid_argument("corrupt_image: tokenizer '" + to_string(cfg.basis.kind) +
                                    "' has no inverse projection");
    }
    if (!image_input(cfg.space)) {
        throw std::invalid_argument("corrupt_image: latent_in_latent_out does not produce images");
    }
}

} // namespace

CorruptedImage corrupt_image(const ImageD& x0, const CorruptionConfig& cfg, int t, Rng& rng) {
    check_image_corruption(cfg);
    const MatrixX<double> patches = extract_patches(x0, cfg.basis.patch_size);
    return corrupt_with(x0, cfg, diffuse(encode_tokens(cfg.basis, patches), cfg.schedule, t, rng), patches);
}

CorruptedImage corrupt_image_at(const ImageD& x0, const CorruptionConfig& cfg, double gamma, double sigma, Rng& rng) {
    check_image_corruption(cfg);
    const MatrixX<double> patches = extract_patches(x0, cfg.basis.patch_size);
    DiffusionDraw<double> draw;
    draw.z0 = encode_tokens(cfg.basis, patches);
    draw.gamma = gamma;
    draw.sigma = sigma;
    draw.eps = rng.normal_matrix(draw.z0.rows(), draw.z0.cols());
    draw.zt = gamma * draw.z0 + sigma * draw.eps;
    return corrupt_with(x0, cfg, std::move(draw), patches);
}

ImageD corrupt_pixels(const ImageD& x0, double sigma, Rng& rng) {
    if (sigma < 0.0) {
        throw std::invalid_argument("corrupt_pixels: sigma must be nonnegative");
    }
    ImageD out = x0;
    out.data() += sigma * rng.normal_matrix(x0.size(), 1);
    return out;
}

ImageD make_triptych(const ImageD& x0, const ImageD& xt, const ImageD& x_hat) {
    if (xt.height() != x0.height() || xt.width() != x0.width() || x_hat.height() != x0.height() ||
        x_hat.width() != x0.width()) {
        throw std::invalid_argument("export_triptych: panels must share dimensions");
    }
    constexpr Index gap = 4;
    const Index w = x0.width();
    ImageD out(x0.height(), 3 * w + 2 * gap);
    out.data().setOnes();
    const ImageD* panels[3] = {&x0, &xt, &x_hat};
    for (Index k = 0; k < 3; ++k) {
        for (Index r = 0; r < x0.height(); ++r) {
            for (Index c = 0; c < w; ++c) {
                for (Index ch = 0; ch < 3; ++ch) {
                    out(r, k * (w + gap) + c, ch) = std::clamp((*panels[k])(r, c, ch), -1.0, 1.0);
                }
            }
        }
    }
    return out;
}

void export_triptych(const ImageD& x0, const ImageD& xt, const ImageD& x_hat, const std::filesystem::path& path) {
    write_ppm(make_triptych(x0, xt, x_hat), path);
}

Index DenoisingTask::input_dim() const {
    return image_input(space) ? basis.full_dim : basis.latent_dim;
}

Index DenoisingTask::output_dim() const {
    return space == NoiseSpace::image_in_image_out ? basis.full_dim : basis.latent_dim;
}

void DenoisingTask::validate() const {
    if (image_input(space) && !basis.invertible()) {
        throw std::invalid_argument("task: image-space input needs a pca or identity tokenizer, got " +
                                    to_string(basis.kind));
    }
    if (loss.target == TargetKind::predict_noise && space == NoiseSpace::image_in_image_out) {
        throw std::invalid_argument("task: predict_noise is defined in the latent space only");
    }
    if (loss.target == TargetKind::predict_original_image) {
        if (space != NoiseSpace::image_in_image_out) {
            throw std::invalid_argument("task: predict_original_image requires image_in_image_out");
        }
        if (!full_basis || full_basis->rows() != basis.full_dim || full_basis->cols() != basis.full_dim) {
            throw std::invalid_argument("task: predict_original_image requires the full D x D basis");
        }
    }
    if (loss.residual_weight < 0.0 || loss.residual_weight > 1.0) {
        throw std::invalid_argument("task: residual weight must lie in [0, 1]");
    }
}

namespace {

MatrixX<double> network_input(const DenoisingTask& task, const MatrixX<double>& zt, const MatrixX<double>& z0,
                              const MatrixX<double>& x0_patches) {
    if (!image_input(task.space)) {
        return zt;
    }
    return back_project(task.basis, zt, z0, x0_patches, task.drop_orthogonal_complement);
}

} // namespace

TrainingExample make_example(const DenoisingTask& task, const MatrixX<double>& x0_patches, int t, Rng& rng) {
    const MatrixX<double> z0 = encode_tokens(task.basis, x0_patches);
    const DiffusionDraw<double> draw = diffuse(z0, task.schedule, t, rng);
    TrainingExample ex;
    ex.t = t;
    ex.lambda = loss_weight(task.schedule, t, task.loss.weight);
    ex.input = network_input(task, draw.zt, z0, x0_patches);
    switch (task.loss.target) {
    case TargetKind::predict_noise:
        ex.target = draw.eps;
        break;
    case TargetKind::predict_clean:
        ex.target = task.space == NoiseSpace::image_in_image_out ? decode_tokens(task.basis, z0) : z0;
        break;
    case TargetKind::predict_original_image:
        ex.target = make_target(task.loss, draw, x0_patches);
        break;
    }
    return ex;
}

MatrixX<double> clean_input(const DenoisingTask& task, const MatrixX<double>& x0_patches, int t) {
    if (image_input(task.space)) {
        const MatrixX<double> z0 = encode_tokens(task.basis, x0_patches);
        return back_project(task.basis, z0, z0, x0_patches, task.drop_orthogonal_complement);
    }
    const double gamma = t == 0 ? 1.0 : gamma_sigma(task.schedule, t).gamma;
    return gamma * encode_tokens(task.basis, x0_patches);
}

MatrixX<double> noisy_input(const DenoisingTask& task, const MatrixX<double>& x0_patches, int t, Rng& rng) {
    if (t == 0) {
        return clean_input(task, x0_patches, 0);
    }
    const GammaSigma gs = gamma_sigma(task.schedule, t);
    return input_at_level(task, x0_patches, gs.gamma, gs.sigma, rng);
}

MatrixX<double> input_at_level(const DenoisingTask& task, const MatrixX<double>& x0_patches, double gamma,
                               double sigma, Rng& rng) {
    const MatrixX<double> z0 = encode_tokens(task.basis, x0_patches);
    const MatrixX<double> zt = gamma * z0 + sigma * rng.normal_matrix(z0.rows(), z0.cols());
    return network_input(task, zt, z0, x0_patches);
}

double example_loss(const DenoisingTask& task, const MatrixX<double>& pred, const TrainingExample& example,
                    MatrixX<double>* grad) {
    if (task.loss.target == TargetKind::predict_original_image) {
        return weighted_residual_loss(pred, example.target, *task.full_basis, task.basis.latent_dim, example.lambda,
                                      task.loss.residual_weight, grad);
    }
    return token_mse_loss(pred, example.target, example.lambda, grad);
}

MatrixX<double> input_as_pixels(const DenoisingTask& task, const MatrixX<double>& input) {
    return image_input(task.space) ? input : decode_tokens(task.basis, input);
}

MatrixX<double> prediction_as_pixels(const DenoisingTask& task, const MatrixX<double>& pred,
                                     const MatrixX<double>& input, double gamma, double sigma) {
    switch (task.loss.target) {
    case TargetKind::predict_noise: {
        if (gamma <= 0.0) {
            throw std::invalid_argument("prediction_as_pixels: cannot invert a noise prediction at gamma = 0");
        }
        const MatrixX<double> zt = image_input(task.space) ? encode_tokens(task.basis, input) : input;
        return decode_tokens(task.basis, (zt - sigma * pred) / gamma);
    }
    case TargetKind::predict_clean:
        return task.space == NoiseSpace::image_in_image_out ? pred : decode_tokens(task.basis, pred);
    case TargetKind::predict_original_image:
        return pred;
    }
    throw std::invalid_argument("prediction_as_pixels: unknown target");
}

} // namespace ldae
