// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>

namespace ldae {

constexpr int kManifestSchemaVersion = 1;

/// Version string of this build (git describe at configure time).
std::string version_string();

/// Self-describing record of one run.
struct RunManifest {
    int schema_version = kManifestSchemaVersion;
    std::string version = version_string();
    std::string command;
    std::string name;
    int step = 0;
    std::uint64_t seed = 0;
    std::map<std::string, std::string> config;
    std::map<std::string, std::string> metrics;
    std::map<std::string, double> timings;
    std::map<std::string, std::string> artifacts;

    std::string to_text() const;
    static RunManifest parse(const std::string& text, const std::string& name = "<manifest>");
    /// Atomic: a temporary file renamed into place.
    void write(const std::filesystem::path& path) const;
    static RunManifest read(const std::filesystem::path& path);
};

struct Report {
    std::string csv;
    std::string markdown;
};

/// Long-format metrics table (step, seed, name, metric, value) sorted by
/// (step, seed, name, metric). Rejects mixed schema versions.
Report export_report(std::span<const RunManifest> manifests);

} // namespace ldae
