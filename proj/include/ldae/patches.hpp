// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

#include "ldae/image.hpp"

namespace ldae {

/// Patches of a p x p grid in row-major grid order. Within a patch the
/// flattening order is (row, column, channel):
///   index = (r * p + c) * 3 + ch.
template <typename Scalar>
Tokens<Scalar> extract_patches(const Image<Scalar>& image, Index p) {
    if (p <= 0) {
        throw std::invalid_argument("extract_patches: patch size must be positive");
    }
    if (image.height() % p != 0 || image.width() % p != 0) {
        throw std::invalid_argument("extract_patches: image " + std::to_string(image.height()) + "x" +
                                    std::to_string(image.width()) + " is not divisible by patch size " +
                                    std::to_string(p));
    }
    const Index grid_h = image.height() / p;
    const Index grid_w = image.width() / p;
    const Index dim = p * p * 3;
    Tokens<Scalar> out(grid_h * grid_w, dim);
    for (Index gy = 0; gy < grid_h; ++gy) {
        for (Index gx = 0; gx < grid_w; ++gx) {
            const Index token = gy * grid_w + gx;
            for (Index r = 0; r < p; ++r) {
                for (Index c = 0; c < p; ++c) {
                    for (Index ch = 0; ch < 3; ++ch) {
                        out(token, (r * p + c) * 3 + ch) = image(gy * p + r, gx * p + c, ch);
                    }
                }
            }
        }
    }
    return out;
}

template <typename Derived>
Image<typename Derived::Scalar> assemble_patches(const Eigen::MatrixBase<Derived>& patches, Index height, Index width,
                                                 Index p) {
    using Scalar = typename Derived::Scalar;
    if (p <= 0 || height % p != 0 || width % p != 0) {
        throw std::invalid_argument("assemble_patches: " + std::to_string(height) + "x" + std::to_string(width) +
                                    " is not divisible by patch size " + std::to_string(p));
    }
    const Index grid_h = height / p;
    const Index grid_w = width / p;
    if (patches.rows() != grid_h * grid_w || patches.cols() != p * p * 3) {
        throw std::invalid_argument("assemble_patches: got " + std::to_string(patches.rows()) + " patches of length " +
                                    std::to_string(patches.cols()) + ", expected " +
                                    std::to_string(grid_h * grid_w) + " of length " + std::to_string(p * p * 3));
    }
    Image<Scalar> image(height, width);
    for (Index gy = 0; gy < grid_h; ++gy) {
        for (Index gx = 0; gx < grid_w; ++gx) {
            const Index token = gy * grid_w + gx;
            for (Index r = 0; r < p; ++r) {
                for (Index c = 0; c < p; ++c) {
                    for (Index ch = 0; ch < 3; ++ch) {
                        image(gy * p + r, gx * p + c, ch) = patches(token, (r * p + c) * 3 + ch);
                    }
                }
            }
        }
    }
    return image;
}

} // namespace ldae
