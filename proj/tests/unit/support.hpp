// SPDX-License-Identifier: Apache-2.0
// Shared fixtures for the unit tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ldae/denoiser.hpp"
#include "ldae/image.hpp"
#include "ldae/rng.hpp"
#include "ldae/tokenizer.hpp"

namespace ldae::testing {

/// Smooth random images in [-1, 1]: low-frequency color fields plus noise,
/// so patch covariances have a spread-out spectrum.
inline std::vector<ImageD> random_images(int count, Index size, std::uint64_t seed) {
    std::vector<ImageD> out;
    Rng rng(seed);
    for (int n = 0; n < count; ++n) {
        ImageD img(size, size);
        const double fx = rng.uniform(0.1, 0.8);
        const double fy = rng.uniform(0.1, 0.8);
        for (Index r = 0; r < size; ++r) {
            for (Index c = 0; c < size; ++c) {
                for (Index ch = 0; ch < 3; ++ch) {
                    const double v = 0.5 * std::sin(fx * c + ch) * std::cos(fy * r) + 0.2 * rng.normal();
                    img(r, c, ch) = std::clamp(v, -1.0, 1.0);
                }
            }
        }
        out.push_back(std::move(img));
    }
    return out;
}

/// Full PCA basis of patches drawn from random_images.
inline PatchBasis random_pca(Index patch, std::uint64_t seed, Index latent_dim = 0) {
    const auto images = random_images(24, 4 * patch, seed);
    const PatchSample s = all_patches(images, patch);
    return fit_pca(s, patch, latent_dim > 0 ? latent_dim : patch * patch * 3);
}

/// Fills every tensor with N(0, scale^2), including the ones init zeroes.
template <typename Scalar>
void randomize(DenoiserParams<Scalar>& p, Rng& rng, double scale) {
    visit_tensors(p, [&](const std::string&, MatrixX<Scalar>& m) {
        m = rng.normal_matrix<Scalar>(m.rows(), m.cols(), scale);
    });
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("ldae_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

} // namespace ldae::testing
