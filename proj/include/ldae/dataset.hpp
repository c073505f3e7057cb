// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ldae/image.hpp"

namespace ldae {

struct DatasetEntry {
    std::string file;
    int label = 0;
    bool val = false;
};

struct DatasetManifest {
    std::filesystem::path root;
    std::vector<DatasetEntry> entries;
    Index height = 0;
    Index width = 0;
    int classes = 0;
    std::uint64_t checksum = 0;

    std::string to_text() const;
};

struct Dataset {
    DatasetManifest manifest;
    std::vector<ImageD> images;

    std::vector<std::size_t> indices(bool val) const;
};

struct SynthSpec {
    int classes = 8;
    Index size = 32;
    int per_class = 512;
    double val_fraction = 0.1;
    std::uint64_t seed = 0;
};

/// Number of procedural shape classes available.
constexpr int kSynthShapeCount = 8;

/// One procedural image: a colored shape (class = shape type) at a random
/// position and scale over a textured background.
ImageD render_synthetic(int label, Index size, std::uint64_t seed);

/// Class-balanced, shuffled, in-memory dataset. Files are named but not
/// written; see write_dataset.
Dataset synth_dataset(const SynthSpec& spec);

/// Writes images/<file>.ppm, labels.csv and manifest.txt under root.
void write_dataset(Dataset& dataset, const std::filesystem::path& root);

/// Loads every PPM named by a "file,label" CSV (header optional, paths
/// relative to dir). All unreadable or mismatched files are reported in one
/// error.
Dataset ingest_dataset(const std::filesystem::path& dir, const std::filesystem::path& labels_file,
                       double val_fraction = 0.1, std::uint64_t seed = 0);

/// Marks round(val_fraction * n_c) examples of each class as held out.
std::vector<bool> balanced_split(const std::vector<int>& labels, int classes, double val_fraction,
                                 std::uint64_t seed);

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h = 0xcbf29ce484222325ULL);

} // namespace ldae
