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

/// Versioned little-endian container shared by tokenizer and denoiser
/// checkpoints: "LDAE" magic, u32 format version, u32 kind tag, payload.
inline constexpr char kCheckpointMagic[4] = {'L', 'D', 'A', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class BinaryWriter {
public:
    void header(std::uint32_t kind_tag);
    void u32(std::uint32_t v);
    void f64(double v);
    void string(const std::string& s);
    /// rows, cols, then row-major f64 data.
    template <typename Derived>
    void matrix(const Eigen::MatrixBase<Derived>& m) {
        u32(static_cast<std::uint32_t>(m.rows()));
        u32(static_cast<std::uint32_t>(m.cols()));
        for (Index i = 0; i < m.rows(); ++i) {
            for (Index j = 0; j < m.cols(); ++j) {
                f64(static_cast<double>(m(i, j)));
            }
        }
    }
    template <typename Derived>
    void raw_vector(const Eigen::MatrixBase<Derived>& v) {
        for (Index i = 0; i < v.size(); ++i) {
            f64(static_cast<double>(v(i)));
        }
    }
    const std::vector<std::uint8_t>& bytes() const { return bytes_; }

private:
    std::vector<std::uint8_t> bytes_;
};

class BinaryReader {
public:
    BinaryReader(std::span<const std::uint8_t> bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

    /// Validates magic and version; returns the kind tag.
    std::uint32_t header();
    std::uint32_t u32();
    double f64();
    std::string string();
    MatrixX<double> matrix();
    VectorX<double> raw_vector(Index n);
    bool at_end() const { return pos_ == bytes_.size(); }
    [[noreturn]] void fail(const std::string& what) const;

private:
    void need(std::size_t n) const;

    std::span<const std::uint8_t> bytes_;
    std::string name_;
    std::size_t pos_ = 0;
};

} // namespace ldae
