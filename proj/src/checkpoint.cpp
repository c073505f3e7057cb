// SPDX-License-Identifier: Apache-2.0
#include "ldae/checkpoint.hpp"

#include <bit>
#include <cstring>

namespace ldae {

void BinaryWriter::header(std::uint32_t kind_tag) {
    bytes_.insert(bytes_.end(), kCheckpointMagic, kCheckpointMagic + 4);
    u32(kCheckpointVersion);
    u32(kind_tag);
}

void BinaryWriter::u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void BinaryWriter::f64(double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int i = 0; i < 8; ++i) {
        bytes_.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
    }
}

void BinaryWriter::string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
}

void BinaryReader::fail(const std::string& what) const {
    throw CheckpointError(name_ + ": " + what + " at byte " + std::to_string(pos_));
}

void BinaryReader::need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
        fail("unexpected end of checkpoint");
    }
}

std::uint32_t BinaryReader::header() {
    need(4);
    if (std::memcmp(bytes_.data(), kCheckpointMagic, 4) != 0) {
        fail("bad magic (expected \"LDAE\")");
    }
    pos_ += 4;
    const std::uint32_t version = u32();
    if (version != kCheckpointVersion) {
        fail("unsupported format version " + std::to_string(version));
    }
    return u32();
}

std::uint32_t BinaryReader::u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += 4;
    return v;
}

double BinaryReader::f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) {
        bits |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += 8;
    return std::bit_cast<double>(bits);
}

std::string BinaryReader::string() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
}

MatrixX<double> BinaryReader::matrix() {
    const std::uint32_t rows = u32();
    const std::uint32_t cols = u32();
    need(static_cast<std::size_t>(rows) * cols * 8);
    MatrixX<double> m(rows, cols);
    for (Index i = 0; i < m.rows(); ++i) {
        for (Index j = 0; j < m.cols(); ++j) {
            m(i, j) = f64();
        }
    }
    return m;
}

VectorX<double> BinaryReader::raw_vector(Index n) {
    need(static_cast<std::size_t>(n) * 8);
    VectorX<double> v(n);
    for (Index i = 0; i < n; ++i) {
        v(i) = f64();
    }
    return v;
}

} // namespace ldae
