// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ldae/types.hpp"

namespace ldae {

/// H x W x 3 raster, row-major with interleaved channels. Values are in
/// [-1, 1] after ingestion; corrupted images may leave that range and are
/// clamped only on export.
template <typename Scalar>
class Image {
public:
    static constexpr Index kChannels = 3;

    Image() = default;
    Image(Index height, Index width) : height_(height), width_(width), data_(VectorX<Scalar>::Zero(height * width * 3)) {
        if (height < 0 || width < 0) {
            throw std::invalid_argument("Image: negative dimensions");
        }
    }
    Image(Index height, Index width, VectorX<Scalar> data) : height_(height), width_(width), data_(std::move(data)) {
        if (data_.size() != height * width * kChannels) {
            throw std::invalid_argument("Image: data length " + std::to_string(data_.size()) + " does not match " +
                                        std::to_string(height) + "x" + std::to_string(width) + "x3");
        }
    }

    Index height() const { return height_; }
    Index width() const { return width_; }
    Index size() const { return data_.size(); }

    Scalar& operator()(Index row, Index col, Index ch) { return data_[(row * width_ + col) * kChannels + ch]; }
    Scalar operator()(Index row, Index col, Index ch) const { return data_[(row * width_ + col) * kChannels + ch]; }

    const VectorX<Scalar>& data() const { return data_; }
    VectorX<Scalar>& data() { return data_; }

    template <typename Other>
    Image<Other> cast() const {
        return Image<Other>(height_, width_, data_.template cast<Other>());
    }

    bool operator==(const Image& other) const {
        return height_ == other.height_ && width_ == other.width_ && data_ == other.data_;
    }

private:
    Index height_ = 0;
    Index width_ = 0;
    VectorX<Scalar> data_;
};

using ImageD = Image<double>;

/// [-1, 1] value to an 8-bit level, clamping out-of-range values.
std::uint8_t to_byte(double v);

/// 8-bit level to [-1, 1] as v / 127.5 - 1.
inline double from_byte(std::uint8_t v) { return static_cast<double>(v) / 127.5 - 1.0; }

/// Binary PPM (P6, maxval 255) encoding / decoding.
std::vector<std::uint8_t> encode_ppm(const ImageD& image);
ImageD decode_ppm(std::span<const std::uint8_t> bytes, const std::string& name = "<memory>");

void write_ppm(const ImageD& image, const std::filesystem::path& path);
ImageD read_ppm(const std::filesystem::path& path);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
/// Writes via a temporary sibling and renames, so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text_atomic(const std::filesystem::path& path, const std::string& text);

/// Left-right mirror.
ImageD flip_horizontal(const ImageD& image);

/// Peak signal-to-noise ratio for the [-1, 1] range (peak-to-peak 2).
double psnr(const ImageD& reference, const ImageD& test);

} // namespace ldae
