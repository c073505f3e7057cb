// SPDX-License-Identifier: Apache-2.0
#include "ldae/tokenizer.hpp"

#include <cmath>
#include <iostream>
#include <numbers>

#include <Eigen/Eigenvalues>

#include "ldae/checkpoint.hpp"
#include "ldae/patches.hpp"
#include "ldae/rng.hpp"

namespace ldae {

std::string to_string(TokenizerKind kind) {
    switch (kind) {
    case TokenizerKind::pca:
        return "pca";
    case TokenizerKind::linear_ae:
        return "linear_ae";
    case TokenizerKind::linear_vae:
        return "linear_vae";
    case TokenizerKind::identity:
        return "identity";
    }
    return "unknown";
}

TokenizerKind parse_tokenizer_kind(const std::string& name) {
    if (name == "pca") {
        return TokenizerKind::pca;
    }
    if (name == "linear_ae" || name == "ae") {
        return TokenizerKind::linear_ae;
    }
    if (name == "linear_vae" || name == "vae") {
        return TokenizerKind::linear_vae;
    }
    if (name == "identity" || name == "pixel") {
        return TokenizerKind::identity;
    }
    throw std::invalid_argument("unknown tokenizer kind '" + name + "'");
}

namespace {

void check_sample(const PatchSample& sample, Index patch_size, Index latent_dim) {
    const Index full_dim = patch_size * patch_size * 3;
    if (sample.patches.rows() == 0) {
        throw std::invalid_argument("tokenizer fit: empty patch sample");
    }
    if (sample.patches.cols() != full_dim) {
        throw std::invalid_argument("tokenizer fit: patch length " + std::to_string(sample.patches.cols()) +
                                    " does not match p*p*3 = " + std::to_string(full_dim));
    }
    if (latent_dim < 1 || latent_dim > full_dim) {
        throw std::invalid_argument("tokenizer fit: latent dim " + std::to_string(latent_dim) +
                                    " outside [1, " + std::to_string(full_dim) + "]");
    }
    if (sample.patches.rows() < full_dim) {
        std::cerr << "warning: fitting a " << full_dim << "-dim tokenizer on only " << sample.patches.rows()
                  << " patches\n";
    }
}

MatrixX<double> covariance(const MatrixX<double>& patches, const VectorX<double>& mean) {
    const MatrixX<double> centered = patches.rowwise() - mean.transpose();
    return (centered.transpose() * centered) / static_cast<double>(patches.rows());
}

void check_length(Index got, Index want, const char* what) {
    if (got != want) {
        throw std::invalid_argument(std::string(what) + ": length " + std::to_string(got) + ", expected " +
                                    std::to_string(want));
    }
}

} // namespace

PatchSample sample_patches(std::span<const ImageD> images, Index patch_size, Index count, std::uint64_t seed) {
    if (images.empty()) {
        throw std::invalid_argument("sample_patches: no images");
    }
    const Index grid_h = images.front().height() / patch_size;
    const Index grid_w = images.front().width() / patch_size;
    if (grid_h * patch_size != images.front().height() || grid_w * patch_size != images.front().width()) {
        throw std::invalid_argument("sample_patches: image size not divisible by patch size");
    }
    Rng rng(seed);
    PatchSample sample;
    sample.source_count = static_cast<Index>(images.size());
    sample.patches.resize(count, patch_size * patch_size * 3);
    for (Index k = 0; k < count; ++k) {
        const ImageD& img = images[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(images.size()) - 1))];
        const Index gy = rng.uniform_int(0, static_cast<int>(grid_h) - 1);
        const Index gx = rng.uniform_int(0, static_cast<int>(grid_w) - 1);
        for (Index r = 0; r < patch_size; ++r) {
            for (Index c = 0; c < patch_size; ++c) {
                for (Index ch = 0; ch < 3; ++ch) {
                    sample.patches(k, (r * patch_size + c) * 3 + ch) = img(gy * patch_size + r, gx * patch_size + c, ch);
                }
            }
        }
    }
    return sample;
}

PatchSample all_patches(std::span<const ImageD> images, Index patch_size) {
    PatchSample sample;
    sample.source_count = static_cast<Index>(images.size());
    if (images.empty()) {
        return sample;
    }
    const Index per = (images.front().height() / patch_size) * (images.front().width() / patch_size);
    sample.patches.resize(per * static_cast<Index>(images.size()), patch_size * patch_size * 3);
    for (std::size_t i = 0; i < images.size(); ++i) {
        sample.patches.middleRows(static_cast<Index>(i) * per, per) = extract_patches(images[i], patch_size);
    }
    return sample;
}

PatchBasis identity_basis(Index patch_size) {
    const Index full_dim = patch_size * patch_size * 3;
    PatchBasis basis;
    basis.kind = TokenizerKind::identity;
    basis.patch_size = patch_size;
    basis.full_dim = full_dim;
    basis.latent_dim = full_dim;
    basis.encoder = MatrixX<double>::Identity(full_dim, full_dim);
    basis.decoder = basis.encoder;
    basis.mean = VectorX<double>::Zero(full_dim);
    basis.eigenvalues = VectorX<double>::Zero(full_dim);
    return basis;
}

PatchBasis fit_pca(const PatchSample& sample, Index patch_size, Index latent_dim) {
    check_sample(sample, patch_size, latent_dim);
    const Index full_dim = sample.patches.cols();
    PatchBasis basis;
    basis.kind = TokenizerKind::pca;
    basis.patch_size = patch_size;
    basis.full_dim = full_dim;
    basis.latent_dim = latent_dim;
    basis.mean = sample.patches.colwise().mean().transpose();

    Eigen::SelfAdjointEigenSolver<MatrixX<double>> solver(covariance(sample.patches, basis.mean));
    if (solver.info() != Eigen::Success) {
        throw std::runtime_error("fit_pca: eigendecomposition failed");
    }
    // Ascending from the solver; reverse to descending.
    basis.eigenvalues = solver.eigenvalues().reverse().cwiseMax(0.0);
    MatrixX<double> rows = solver.eigenvectors().rowwise().reverse().transpose();
    for (Index i = 0; i < rows.rows(); ++i) {
        Index arg = 0;
        rows.row(i).cwiseAbs().maxCoeff(&arg);
        if (rows(i, arg) < 0) {
            rows.row(i) *= -1.0;
        }
    }
    basis.encoder = rows.topRows(latent_dim);
    basis.decoder = basis.encoder;
    return basis;
}

PatchBasis truncate(const PatchBasis& basis, Index latent_dim) {
    if (latent_dim < 1 || latent_dim > basis.latent_dim) {
        throw std::invalid_argument("truncate: latent dim " + std::to_string(latent_dim) + " outside [1, " +
                                    std::to_string(basis.latent_dim) + "]");
    }
    PatchBasis out = basis;
    out.latent_dim = latent_dim;
    out.encoder = basis.encoder.topRows(latent_dim);
    out.decoder = basis.decoder.topRows(latent_dim);
    return out;
}

namespace {

// Full-batch gradient descent on the exact mean loss, written in terms of
// the patch covariance C:
//   L = tr C - 2 tr(U^T V C) + tr(U^T V C V^T U) + kl/2 tr(V C V^T).
PatchBasis fit_linear_codec(const PatchSample& sample, Index patch_size, Index latent_dim, double kl_weight,
                            const LinearCodecConfig& cfg, TokenizerKind kind) {
    check_sample(sample, patch_size, latent_dim);
    if (kl_weight < 0) {
        throw std::invalid_argument("fit_linear_vae: kl_weight must be nonnegative");
    }
    if (cfg.steps < 0) {
        throw std::invalid_argument("linear tokenizer: negative step count");
    }
    const Index full_dim = sample.patches.cols();
    PatchBasis basis;
    basis.kind = kind;
    basis.patch_size = patch_size;
    basis.full_dim = full_dim;
    basis.latent_dim = latent_dim;
    basis.mean = sample.patches.colwise().mean().transpose();
    basis.eigenvalues = VectorX<double>::Zero(full_dim);

    const MatrixX<double> cov = covariance(sample.patches, basis.mean);
    const double scale = cov.norm();
    const double base_step = scale > 0 ? cfg.learning_rate / scale : cfg.learning_rate;

    Rng rng(cfg.seed);
    const double init_std = 1.0 / std::sqrt(static_cast<double>(full_dim));
    MatrixX<double> v = rng.normal_matrix(latent_dim, full_dim, init_std);
    MatrixX<double> u = rng.normal_matrix(latent_dim, full_dim, init_std);

    const double trace_c = cov.trace();
    for (int step = 0; step < cfg.steps; ++step) {
        const MatrixX<double> a = v * cov;           // V C
        const MatrixX<double> m = a * v.transpose(); // V C V^T
        const MatrixX<double> uut = u * u.transpose();
        const double loss = trace_c - 2.0 * u.cwiseProduct(a).sum() + m.cwiseProduct(uut).sum() +
                            0.5 * kl_weight * m.trace();
        if (!std::isfinite(loss)) {
            throw DivergenceError("linear tokenizer diverged (loss " + std::to_string(loss) + ") at step " +
                                      std::to_string(step),
                                  step);
        }
        MatrixX<double> grad_u = 2.0 * (m * u - a);
        MatrixX<double> grad_v = 2.0 * (uut * a - u * cov);
        if (kl_weight != 0.0) {
            grad_v += kl_weight * a;
        }
        const double lr =
            base_step * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / cfg.steps));
        u -= lr * grad_u;
        v -= lr * grad_v;
    }
    if (!v.allFinite() || !u.allFinite()) {
        throw DivergenceError("linear tokenizer produced non-finite weights", cfg.steps);
    }
    basis.encoder = std::move(v);
    basis.decoder = std::move(u);
    return basis;
}

} // namespace

PatchBasis fit_linear_ae(const PatchSample& sample, Index patch_size, Index latent_dim, const LinearCodecConfig& cfg) {
    return fit_linear_codec(sample, patch_size, latent_dim, 0.0, cfg, TokenizerKind::linear_ae);
}

PatchBasis fit_linear_vae(const PatchSample& sample, Index patch_size, Index latent_dim, double kl_weight,
                          const LinearCodecConfig& cfg) {
    return fit_linear_codec(sample, patch_size, latent_dim, kl_weight, cfg, TokenizerKind::linear_vae);
}

VectorX<double> encode(const PatchBasis& basis, const VectorX<double>& patch) {
    check_length(patch.size(), basis.full_dim, "encode");
    if (basis.kind == TokenizerKind::identity) {
        return patch;
    }
    return basis.encoder * (patch - basis.mean);
}

VectorX<double> decode(const PatchBasis& basis, const VectorX<double>& latent) {
    check_length(latent.size(), basis.latent_dim, "decode");
    if (basis.kind == TokenizerKind::identity) {
        return latent;
    }
    return basis.decoder.transpose() * latent + basis.mean;
}

MatrixX<double> encode_tokens(const PatchBasis& basis, const MatrixX<double>& patches) {
    check_length(patches.cols(), basis.full_dim, "encode_tokens");
    if (basis.kind == TokenizerKind::identity) {
        return patches;
    }
    return (patches.rowwise() - basis.mean.transpose()) * basis.encoder.transpose();
}

MatrixX<double> decode_tokens(const PatchBasis& basis, const MatrixX<double>& latents) {
    check_length(latents.cols(), basis.latent_dim, "decode_tokens");
    if (basis.kind == TokenizerKind::identity) {
        return latents;
    }
    return (latents * basis.decoder).rowwise() + basis.mean.transpose();
}

double reconstruction_mse(const PatchBasis& basis, const MatrixX<double>& patches) {
    const MatrixX<double> recon = decode_tokens(basis, encode_tokens(basis, patches));
    return (patches - recon).squaredNorm() / static_cast<double>(patches.rows());
}

ImageD visualize_filters(const PatchBasis& basis) {
    if (basis.kind == TokenizerKind::identity) {
        throw std::invalid_argument("visualize_filters: identity tokenizer has no learned filters");
    }
    const Index p = basis.patch_size;
    const Index count = basis.latent_dim;
    const auto cols = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(count))));
    const Index rows = (count + cols - 1) / cols;
    ImageD grid(rows * p + rows - 1, cols * p + cols - 1);
    grid.data().setOnes();
    for (Index k = 0; k < count; ++k) {
        const auto filter = basis.encoder.row(k);
        const double lo = filter.minCoeff();
        const double hi = filter.maxCoeff();
        const Index oy = (k / cols) * (p + 1);
        const Index ox = (k % cols) * (p + 1);
        for (Index r = 0; r < p; ++r) {
            for (Index c = 0; c < p; ++c) {
                for (Index ch = 0; ch < 3; ++ch) {
                    const double v = filter((r * p + c) * 3 + ch);
                    grid(oy + r, ox + c, ch) = hi > lo ? 2.0 * (v - lo) / (hi - lo) - 1.0 : 0.0;
                }
            }
        }
    }
    return grid;
}

std::vector<std::uint8_t> serialize_basis(const PatchBasis& basis) {
    BinaryWriter w;
    w.header(static_cast<std::uint32_t>(basis.kind));
    w.u32(static_cast<std::uint32_t>(basis.patch_size));
    w.u32(static_cast<std::uint32_t>(basis.full_dim));
    w.u32(static_cast<std::uint32_t>(basis.latent_dim));
    w.raw_vector(basis.mean);
    for (Index i = 0; i < basis.latent_dim; ++i) {
        w.raw_vector(basis.encoder.row(i));
    }
    for (Index i = 0; i < basis.latent_dim; ++i) {
        w.raw_vector(basis.decoder.row(i));
    }
    w.raw_vector(basis.eigenvalues);
    return w.bytes();
}

PatchBasis deserialize_basis(std::span<const std::uint8_t> bytes, const std::string& name) {
    BinaryReader r(bytes, name);
    const std::uint32_t tag = r.header();
    if (tag > static_cast<std::uint32_t>(TokenizerKind::identity)) {
        r.fail("not a tokenizer checkpoint (kind tag " + std::to_string(tag) + ")");
    }
    PatchBasis basis;
    basis.kind = static_cast<TokenizerKind>(tag);
    basis.patch_size = r.u32();
    basis.full_dim = r.u32();
    basis.latent_dim = r.u32();
    if (basis.full_dim != basis.patch_size * basis.patch_size * 3 || basis.latent_dim < 1 ||
        basis.latent_dim > basis.full_dim) {
        r.fail("inconsistent tokenizer dimensions");
    }
    basis.mean = r.raw_vector(basis.full_dim);
    basis.encoder.resize(basis.latent_dim, basis.full_dim);
    for (Index i = 0; i < basis.latent_dim; ++i) {
        basis.encoder.row(i) = r.raw_vector(basis.full_dim).transpose();
    }
    basis.decoder.resize(basis.latent_dim, basis.full_dim);
    for (Index i = 0; i < basis.latent_dim; ++i) {
        basis.decoder.row(i) = r.raw_vector(basis.full_dim).transpose();
    }
    basis.eigenvalues = r.raw_vector(basis.full_dim);
    if (!r.at_end()) {
        r.fail("trailing bytes");
    }
    return basis;
}

void save_basis(const PatchBasis& basis, const std::filesystem::path& path) {
    write_file_atomic(path, serialize_basis(basis));
}

PatchBasis load_basis(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return deserialize_basis(bytes, path.string());
}

} // namespace ldae
