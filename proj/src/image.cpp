// SPDX-License-Identifier: Apache-2.0
#include "ldae/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <system_error>

namespace ldae {

std::uint8_t to_byte(double v) {
    const double clamped = std::clamp(v, -1.0, 1.0);
    return static_cast<std::uint8_t>(std::lround((clamped + 1.0) * 127.5));
}

std::vector<std::uint8_t> encode_ppm(const ImageD& image) {
    const std::string header =
        "P6\n" + std::to_string(image.width()) + " " + std::to_string(image.height()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    out.reserve(header.size() + static_cast<std::size_t>(image.size()));
    for (Index i = 0; i < image.size(); ++i) {
        out.push_back(to_byte(image.data()[i]));
    }
    return out;
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string header_token(std::span<const std::uint8_t> bytes, std::size_t& pos) {
    while (pos < bytes.size()) {
        const char c = static_cast<char>(bytes[pos]);
        if (c == '#') {
            while (pos < bytes.size() && bytes[pos] != '\n') {
                ++pos;
            }
        } else if (std::isspace(static_cast<unsigned char>(c))) {
            ++pos;
        } else {
            break;
        }
    }
    std::string tok;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) {
        tok.push_back(static_cast<char>(bytes[pos++]));
    }
    return tok;
}

long parse_header_int(const std::string& tok, const std::string& name, const char* what) {
    if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](char c) { return std::isdigit(c); })) {
        throw std::runtime_error(name + ": malformed PPM header (" + what + ")");
    }
    return std::stol(tok);
}

} // namespace

ImageD decode_ppm(std::span<const std::uint8_t> bytes, const std::string& name) {
    std::size_t pos = 0;
    if (header_token(bytes, pos) != "P6") {
        throw std::runtime_error(name + ": not a binary PPM (P6)");
    }
    const long width = parse_header_int(header_token(bytes, pos), name, "width");
    const long height = parse_header_int(header_token(bytes, pos), name, "height");
    const long maxval = parse_header_int(header_token(bytes, pos), name, "maxval");
    if (maxval != 255) {
        throw std::runtime_error(name + ": unsupported PPM maxval " + std::to_string(maxval));
    }
    ++pos; // single whitespace after maxval
    const auto expected = static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * 3;
    if (pos > bytes.size() || bytes.size() - pos < expected) {
        throw std::runtime_error(name + ": truncated PPM (expected " + std::to_string(expected) +
                                 " pixel bytes, found " + std::to_string(pos > bytes.size() ? 0 : bytes.size() - pos) +
                                 ")");
    }
    ImageD image(height, width);
    for (std::size_t i = 0; i < expected; ++i) {
        image.data()[static_cast<Index>(i)] = from_byte(bytes[pos + i]);
    }
    return image;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error(path.string() + ": cannot open for reading");
    }
    return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) {
            throw std::runtime_error(path.string() + ": cannot open for writing");
        }
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) {
            throw std::runtime_error(path.string() + ": write failed");
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw std::runtime_error(path.string() + ": rename failed: " + ec.message());
    }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
    write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void write_ppm(const ImageD& image, const std::filesystem::path& path) {
    write_file_atomic(path, encode_ppm(image));
}

ImageD read_ppm(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return decode_ppm(bytes, path.string());
}

ImageD flip_horizontal(const ImageD& image) {
    ImageD out(image.height(), image.width());
    for (Index r = 0; r < image.height(); ++r) {
        for (Index c = 0; c < image.width(); ++c) {
            for (Index ch = 0; ch < 3; ++ch) {
                out(r, c, ch) = image(r, image.width() - 1 - c, ch);
            }
        }
    }
    return out;
}

double psnr(const ImageD& reference, const ImageD& test) {
    if (reference.height() != test.height() || reference.width() != test.width()) {
        throw std::invalid_argument("psnr: image dimensions differ");
    }
    const double mse = (reference.data() - test.data()).squaredNorm() / static_cast<double>(reference.size());
    return 10.0 * std::log10(4.0 / mse);
}

} // namespace ldae
