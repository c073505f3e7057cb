// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ldae/image.hpp"
#include "ldae/types.hpp"

namespace ldae {

enum class TokenizerKind : std::uint32_t { pca = 0, linear_ae = 1, linear_vae = 2, identity = 3 };

std::string to_string(TokenizerKind kind);
TokenizerKind parse_tokenizer_kind(const std::string& name);

/// Linear patch tokenizer. encode(x) = V (x - mean), decode(z) = U^T z + mean.
/// For PCA U == V and the rows of V are orthonormal; for identity V = U = I
/// and nothing is centered.
struct PatchBasis {
    TokenizerKind kind = TokenizerKind::identity;
    Index patch_size = 0;
    Index full_dim = 0;   // D = p * p * 3
    Index latent_dim = 0; // d
    MatrixX<double> encoder; // V, d x D
    MatrixX<double> decoder; // U, d x D
    VectorX<double> mean;    // D
    VectorX<double> eigenvalues; // D, descending; zero unless kind == pca

    bool invertible() const { return kind == TokenizerKind::pca || kind == TokenizerKind::identity; }
    bool operator==(const PatchBasis&) const = default;
};

/// Flattened patches, one per row.
struct PatchSample {
    MatrixX<double> patches;
    Index source_count = 0;
};

/// Draws `count` patches uniformly over (image, grid position).
PatchSample sample_patches(std::span<const ImageD> images, Index patch_size, Index count, std::uint64_t seed);

/// All patches of all images, in image order.
PatchSample all_patches(std::span<const ImageD> images, Index patch_size);

PatchBasis identity_basis(Index patch_size);

/// Top-d principal directions of the patch covariance (normalized by N).
/// Each row's largest-magnitude entry is made positive.
PatchBasis fit_pca(const PatchSample& sample, Index patch_size, Index latent_dim);

/// First `latent_dim` rows of a basis (PCA or identity-derived full basis).
PatchBasis truncate(const PatchBasis& basis, Index latent_dim);

struct LinearCodecConfig {
    int steps = 4000;
    /// Step size relative to 1 / ||C||_F of the patch covariance.
    double learning_rate = 0.5;
    std::uint64_t seed = 0;
};

/// Thrown when a gradient-trained tokenizer's loss becomes non-finite.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, long step) : std::runtime_error(what), step_(step) {}
    long step() const { return step_; }

private:
    long step_;
};

/// Minimizes mean ||x - U^T V x||^2 over mean-centered patches by gradient
/// descent with a cosine-decayed step size.
PatchBasis fit_linear_ae(const PatchSample& sample, Index patch_size, Index latent_dim, const LinearCodecConfig& cfg);

/// As fit_linear_ae plus kl_weight * mean 0.5 ||V x||^2.
PatchBasis fit_linear_vae(const PatchSample& sample, Index patch_size, Index latent_dim, double kl_weight,
                          const LinearCodecConfig& cfg);

VectorX<double> encode(const PatchBasis& basis, const VectorX<double>& patch);
VectorX<double> decode(const PatchBasis& basis, const VectorX<double>& latent);

/// Row-wise encode / decode of a token grid.
MatrixX<double> encode_tokens(const PatchBasis& basis, const MatrixX<double>& patches);
MatrixX<double> decode_tokens(const PatchBasis& basis, const MatrixX<double>& latents);

/// Mean over rows of ||x - decode(encode(x))||^2.
double reconstruction_mse(const PatchBasis& basis, const MatrixX<double>& patches);

/// Rows of V as p x p x 3 tiles, each min-max normalized to [-1, 1] (a
/// constant row maps to 0), laid out ceil(sqrt(d)) per grid row with
/// 1-pixel white separators.
ImageD visualize_filters(const PatchBasis& basis);

std::vector<std::uint8_t> serialize_basis(const PatchBasis& basis);
PatchBasis deserialize_basis(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>");
void save_basis(const PatchBasis& basis, const std::filesystem::path& path);
PatchBasis load_basis(const std::filesystem::path& path);

} // namespace ldae
