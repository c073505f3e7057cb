// SPDX-License-Identifier: Apache-2.0
#include "ldae/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ldae/image.hpp"

namespace ldae {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) {
        return "";
    }
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, sep)) {
        out.push_back(trim(cur));
    }
    return out;
}

std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

Config Config::parse(const std::string& text, const std::string& name) {
    Config cfg;
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) {
            line.erase(hash);
        }
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3) {
                throw std::invalid_argument(name + ":" + std::to_string(lineno) + ": malformed section header");
            }
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument(name + ":" + std::to_string(lineno) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) {
            throw std::invalid_argument(name + ":" + std::to_string(lineno) + ": empty key");
        }
        cfg.values_[section.empty() ? key : section + "." + key] = trim(line.substr(eq + 1));
    }
    return cfg;
}

Config Config::load(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse(std::string(bytes.begin(), bytes.end()), path.string());
}

void Config::set(const std::string& key, const std::string& value) { values_[key] = value; }

void Config::apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty()) {
        throw std::invalid_argument("override '" + assignment + "' is not key=value");
    }
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

bool Config::has(const std::string& key) const { return values_.count(key) != 0; }

const std::string* Config::find(const std::string& key) const {
    const auto it = values_.find(key);
    return it == values_.end() ? nullptr : &it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
    if (const auto* v = find(key)) {
        return *v;
    }
    values_[key] = fallback;
    return fallback;
}

long Config::get_int(const std::string& key, long fallback) const {
    if (const auto* v = find(key)) {
        long out = 0;
        const auto res = std::from_chars(v->data(), v->data() + v->size(), out);
        if (res.ec != std::errc() || res.ptr != v->data() + v->size()) {
            throw std::invalid_argument("config: " + key + " = '" + *v + "' is not an integer");
        }
        return out;
    }
    values_[key] = std::to_string(fallback);
    return fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
    if (const auto* v = find(key)) {
        try {
            std::size_t used = 0;
            const double out = std::stod(*v, &used);
            if (used == v->size()) {
                return out;
            }
        } catch (const std::exception&) {
        }
        throw std::invalid_argument("config: " + key + " = '" + *v + "' is not a number");
    }
    values_[key] = format_double(fallback);
    return fallback;
}

bool Config::get_bool(const std::string& key, bool fallback) const {
    if (const auto* v = find(key)) {
        if (*v == "true" || *v == "1" || *v == "yes" || *v == "on") {
            return true;
        }
        if (*v == "false" || *v == "0" || *v == "no" || *v == "off") {
            return false;
        }
        throw std::invalid_argument("config: " + key + " = '" + *v + "' is not a boolean");
    }
    values_[key] = fallback ? "true" : "false";
    return fallback;
}

std::vector<long> Config::get_int_list(const std::string& key, const std::vector<long>& fallback) const {
    if (const auto* v = find(key)) {
        std::vector<long> out;
        for (const auto& item : split(*v, ',')) {
            long x = 0;
            const auto res = std::from_chars(item.data(), item.data() + item.size(), x);
            if (item.empty() || res.ec != std::errc() || res.ptr != item.data() + item.size()) {
                throw std::invalid_argument("config: " + key + " has non-integer item '" + item + "'");
            }
            out.push_back(x);
        }
        return out;
    }
    std::string joined;
    for (std::size_t i = 0; i < fallback.size(); ++i) {
        joined += (i ? "," : "") + std::to_string(fallback[i]);
    }
    values_[key] = joined;
    return fallback;
}

std::vector<std::string> Config::get_list(const std::string& key, const std::vector<std::string>& fallback) const {
    if (const auto* v = find(key)) {
        return split(*v, ',');
    }
    std::string joined;
    for (std::size_t i = 0; i < fallback.size(); ++i) {
        joined += (i ? "," : "") + fallback[i];
    }
    values_[key] = joined;
    return fallback;
}

std::string Config::to_text() const {
    std::ostringstream out;
    std::string current;
    bool first = true;
    for (const auto& [key, value] : values_) {
        if (key.find('.') == std::string::npos) {
            out << key << " = " << value << '\n';
            first = false;
        }
    }
    for (const auto& [key, value] : values_) {
        const auto dot = key.find('.');
        if (dot == std::string::npos) {
            continue;
        }
        const std::string section = key.substr(0, dot);
        if (section != current || first) {
            if (!first) {
                out << '\n';
            }
            out << '[' << section << "]\n";
            current = section;
            first = false;
        }
        out << key.substr(dot + 1) << " = " << value << '\n';
    }
    return out.str();
}

} // namespace ldae
