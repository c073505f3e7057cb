// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace ldae {

/// Flat key=value configuration. `[section]` headers prefix the keys that
/// follow ("section.key"); '#' starts a comment. Every getter records the
/// default it fell back to, so values() is a complete snapshot of the knobs
/// a run consulted.
class Config {
public:
    Config() = default;

    static Config parse(const std::string& text, const std::string& name = "<config>");
    static Config load(const std::filesystem::path& path);

    void set(const std::string& key, const std::string& value);
    /// "key=value"
    void apply_override(const std::string& assignment);
    bool has(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    long get_int(const std::string& key, long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<long> get_int_list(const std::string& key, const std::vector<long>& fallback) const;
    std::vector<std::string> get_list(const std::string& key, const std::vector<std::string>& fallback) const;

    const std::map<std::string, std::string>& values() const { return values_; }
    /// Sectioned text that parses back to the same values.
    std::string to_text() const;

private:
    const std::string* find(const std::string& key) const;

    mutable std::map<std::string, std::string> values_;
};

std::string trim(const std::string& s);
std::vector<std::string> split(const std::string& s, char sep);
std::string format_double(double v);

} // namespace ldae
