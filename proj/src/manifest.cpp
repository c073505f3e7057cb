// SPDX-License-Identifier: Apache-2.0
#include "ldae/manifest.hpp"

#include <algorithm>
#include <set>
#include <sstream>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "ldae/config.hpp"
#include "ldae/image.hpp"

#ifndef LDAE_VERSION
#define LDAE_VERSION "unknown"
#endif

namespace ldae {

std::string version_string() { return std::string("ldae-0.1.0+") + LDAE_VERSION; }

std::string RunManifest::to_text() const {
    std::ostringstream out;
    out << "# ldae run manifest\n";
    out << "schema_version = " << schema_version << '\n';
    out << "version = " << version << '\n';
    out << "command = " << command << '\n';
    out << "name = " << name << '\n';
    out << "step = " << step << '\n';
    out << "seed = " << seed << '\n';
    out << "\n[config]\n";
    for (const auto& [k, v] : config) {
        out << k << " = " << v << '\n';
    }
    out << "\n[metrics]\n";
    for (const auto& [k, v] : metrics) {
        out << k << " = " << v << '\n';
    }
    out << "\n[timings]\n";
    for (const auto& [k, v] : timings) {
        out << k << " = " << format_double(v) << '\n';
    }
    out << "\n[artifacts]\n";
    for (const auto& [k, v] : artifacts) {
        out << k << " = " << v << '\n';
    }
    return out.str();
}

RunManifest RunManifest::parse(const std::string& text, const std::string& name) {
    RunManifest m;
    m.schema_version = 0;
    m.version.clear();
    std::istringstream in(text);
    std::string line;
    std::string section;
    int lineno = 0;
    auto fail = [&](const std::string& what) {
        throw std::invalid_argument(name + ":" + std::to_string(lineno) + ": " + what);
    };
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line.front() == '#') {
            continue;
        }
        if (line.front() == '[') {
            section = trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            fail("expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (section.empty()) {
                if (key == "schema_version") {
                    m.schema_version = std::stoi(value);
                } else if (key == "version") {
                    m.version = value;
                } else if (key == "command") {
                    m.command = value;
                } else if (key == "name") {
                    m.name = value;
                } else if (key == "step") {
                    m.step = std::stoi(value);
                } else if (key == "seed") {
                    m.seed = std::stoull(value);
                } else {
                    fail("unknown top-level key '" + key + "'");
                }
            } else if (section == "config") {
                m.config[key] = value;
            } else if (section == "metrics") {
                m.metrics[key] = value;
            } else if (section == "timings") {
                m.timings[key] = std::stod(value);
            } else if (section == "artifacts") {
                m.artifacts[key] = value;
            } else {
                fail("unknown section [" + section + "]");
            }
        } catch (const std::logic_error& e) {
            if (dynamic_cast<const std::invalid_argument*>(&e) && std::string(e.what()).find(name) == 0) {
                throw;
            }
            fail("bad value for '" + key + "'");
        }
    }
    if (m.schema_version == 0) {
        throw std::invalid_argument(name + ": missing schema_version");
    }
    return m;
}

void RunManifest::write(const std::filesystem::path& path) const { write_text_atomic(path, to_text()); }

RunManifest RunManifest::read(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    return parse(std::string(bytes.begin(), bytes.end()), path.string());
}

Report export_report(std::span<const RunManifest> manifests) {
    if (manifests.empty()) {
        throw std::invalid_argument("export_report: no manifests");
    }
    std::set<int> versions;
    for (const auto& m : manifests) {
        versions.insert(m.schema_version);
    }
    if (versions.size() > 1) {
        std::string list;
        for (int v : versions) {
            list += (list.empty() ? "" : ", ") + std::to_string(v);
        }
        throw std::invalid_argument("export_report: mixed manifest schema versions (" + list + ")");
    }
    using Row = std::tuple<int, std::uint64_t, std::string, std::string, std::string, std::string>;
    std::vector<Row> rows;
    for (const auto& m : manifests) {
        for (const auto& [k, v] : m.metrics) {
            rows.emplace_back(m.step, m.seed, m.name, m.command, k, v);
        }
    }
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
        return std::tie(std::get<0>(a), std::get<1>(a), std::get<2>(a), std::get<4>(a)) <
               std::tie(std::get<0>(b), std::get<1>(b), std::get<2>(b), std::get<4>(b));
    });
    Report report;
    std::ostringstream csv;
    std::ostringstream md;
    csv << "step,seed,name,command,metric,value\n";
    md << "| step | seed | name | command | metric | value |\n|---:|---:|---|---|---|---:|\n";
    for (const auto& [step, seed, name, command, metric, value] : rows) {
        csv << step << ',' << seed << ',' << name << ',' << command << ',' << metric << ',' << value << '\n';
        md << "| " << step << " | " << seed << " | " << name << " | " << command << " | " << metric << " | " << value
           << " |\n";
    }
    report.csv = csv.str();
    report.markdown = md.str();
    return report;
}

} // namespace ldae
