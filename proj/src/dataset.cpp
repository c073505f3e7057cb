// SPDX-License-Identifier: Apache-2.0
#include "ldae/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ldae/config.hpp"
#include "ldae/rng.hpp"

namespace ldae {

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes, std::uint64_t h) {
    for (std::uint8_t b : bytes) {
        h = (h ^ b) * 0x100000001b3ULL;
    }
    return h;
}

namespace {

using Color = std::array<double, 3>;

Color random_color(Rng& rng, double lo, double hi) {
    return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

// Shape membership in coordinates normalized by the shape radius.
bool inside(int shape, double x, double y) {
    const double ax = std::abs(x);
    const double ay = std::abs(y);
    const double rho = std::sqrt(x * x + y * y);
    const double box = std::max(ax, ay);
    switch (shape) {
    case 0: // disk
        return rho <= 1.0;
    case 1: // square
        return box <= 0.8;
    case 2: // upward triangle, apex at y = -0.9, base at y = 0.8
        return y <= 0.8 && y >= -0.9 && ax <= 0.95 * (y + 0.9) / 1.7;
    case 3: // ring
        return rho <= 1.0 && rho >= 0.55;
    case 4: // plus
        return (ax <= 0.28 && ay <= 1.0) || (ay <= 0.28 && ax <= 1.0);
    case 5: // diamond
        return ax + ay <= 1.0;
    case 6: // diagonal cross
        return box <= 0.85 && (std::abs(x - y) <= 0.38 || std::abs(x + y) <= 0.38);
    case 7: // square frame
        return box <= 0.85 && box >= 0.5;
    default:
        return false;
    }
}

std::string image_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "img_%05zu.ppm", i);
    return buf;
}

std::uint64_t checksum_of(const Dataset& d) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        h = fnv1a(encode_ppm(d.images[i]), h);
        const std::string label = "," + std::to_string(d.manifest.entries[i].label) + "\n";
        h = fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(label.data()), label.size()), h);
    }
    return h;
}

} // namespace

ImageD render_synthetic(int label, Index size, std::uint64_t seed) {
    if (label < 0 || label >= kSynthShapeCount) {
        throw std::invalid_argument("render_synthetic: label " + std::to_string(label) + " outside [0, " +
                                    std::to_string(kSynthShapeCount) + ")");
    }
    Rng rng(seed);
    // dark textured background, bright foreground: the contrast sign is
    // fixed while hue stays random
    const Color bg_a = random_color(rng, -1.0, -0.1);
    const Color bg_b = random_color(rng, -1.0, -0.1);
    const Color fg = random_color(rng, 0.1, 1.0);
    const double freq = rng.uniform(0.15, 0.7);
    const double orient = rng.uniform(0.0, std::numbers::pi);
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double s = static_cast<double>(size);
    const double cx = rng.uniform(0.32 * s, 0.68 * s);
    const double cy = rng.uniform(0.32 * s, 0.68 * s);
    const double radius = rng.uniform(0.2 * s, 0.3 * s);
    const double tilt = rng.uniform(-0.2, 0.2);
    const double ct = std::cos(tilt);
    const double st = std::sin(tilt);

    ImageD img(size, size);
    for (Index r = 0; r < size; ++r) {
        for (Index c = 0; c < size; ++c) {
            const double proj = std::cos(orient) * c + std::sin(orient) * r;
            const double mix = 0.5 + 0.5 * std::sin(freq * proj + phase);
            // 2x2 supersampled coverage
            double cover = 0.0;
            for (int sy = 0; sy < 2; ++sy) {
                for (int sx = 0; sx < 2; ++sx) {
                    const double dx = (c + 0.25 + 0.5 * sx - cx) / radius;
                    const double dy = (r + 0.25 + 0.5 * sy - cy) / radius;
                    cover += inside(label, ct * dx + st * dy, -st * dx + ct * dy) ? 0.25 : 0.0;
                }
            }
            for (Index ch = 0; ch < 3; ++ch) {
                const double bg = bg_a[ch] * (1 - mix) + bg_b[ch] * mix + 0.04 * rng.normal();
                const double v = bg * (1 - cover) + fg[ch] * cover;
                // quantize so the in-memory image equals its 8-bit file
                img(r, c, ch) = from_byte(to_byte(v));
            }
        }
    }
    return img;
}

std::vector<bool> balanced_split(const std::vector<int>& labels, int classes, double val_fraction,
                                 std::uint64_t seed) {
    if (val_fraction < 0.0 || val_fraction >= 1.0) {
        throw std::invalid_argument("balanced_split: val fraction must lie in [0, 1)");
    }
    std::vector<bool> val(labels.size(), false);
    for (int k = 0; k < classes; ++k) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] == k) {
                members.push_back(i);
            }
        }
        Rng rng(derive_seed(seed, 0x53504c4954ULL, static_cast<std::uint64_t>(k)));
        for (std::size_t i = members.size(); i > 1; --i) {
            std::swap(members[i - 1], members[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
        }
        const auto held = static_cast<std::size_t>(std::lround(val_fraction * static_cast<double>(members.size())));
        for (std::size_t i = 0; i < held; ++i) {
            val[members[i]] = true;
        }
    }
    return val;
}

std::vector<std::size_t> Dataset::indices(bool val) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        if (manifest.entries[i].val == val) {
            out.push_back(i);
        }
    }
    return out;
}

Dataset synth_dataset(const SynthSpec& spec) {
    if (spec.classes < 1 || spec.classes > kSynthShapeCount) {
        throw std::invalid_argument("synth: classes must lie in [1, " + std::to_string(kSynthShapeCount) + "]");
    }
    if (spec.per_class < 1 || spec.size < 4 || spec.size % 2 != 0) {
        throw std::invalid_argument("synth: need per_class >= 1 and an even size >= 4");
    }
    std::vector<std::pair<int, int>> order;
    for (int k = 0; k < spec.classes; ++k) {
        for (int i = 0; i < spec.per_class; ++i) {
            order.emplace_back(k, i);
        }
    }
    Rng rng(derive_seed(spec.seed, 0x4f52444552ULL));
    for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i) - 1))]);
    }
    Dataset d;
    d.manifest.height = spec.size;
    d.manifest.width = spec.size;
    d.manifest.classes = spec.classes;
    std::vector<int> labels;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto [k, j] = order[i];
        d.images.push_back(render_synthetic(k, spec.size,
                                            derive_seed(spec.seed, static_cast<std::uint64_t>(k) + 1,
                                                        static_cast<std::uint64_t>(j))));
        d.manifest.entries.push_back({"images/" + image_name(i), k, false});
        labels.push_back(k);
    }
    const auto val = balanced_split(labels, spec.classes, spec.val_fraction, spec.seed);
    for (std::size_t i = 0; i < val.size(); ++i) {
        d.manifest.entries[i].val = val[i];
    }
    d.manifest.checksum = checksum_of(d);
    return d;
}

std::string DatasetManifest::to_text() const {
    std::ostringstream out;
    out << "# ldae dataset manifest\n";
    out << "root = " << root.string() << '\n';
    out << "height = " << height << '\n';
    out << "width = " << width << '\n';
    out << "classes = " << classes << '\n';
    out << "count = " << entries.size() << '\n';
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(checksum));
    out << "checksum = " << buf << '\n';
    out << "\n[entries]\n";
    for (const auto& e : entries) {
        out << e.file << " = " << e.label << ',' << (e.val ? "val" : "train") << '\n';
    }
    return out.str();
}

void write_dataset(Dataset& dataset, const std::filesystem::path& root) {
    std::filesystem::create_directories(root / "images");
    dataset.manifest.root = root;
    std::string labels = "file,label\n";
    for (std::size_t i = 0; i < dataset.images.size(); ++i) {
        const auto& e = dataset.manifest.entries[i];
        write_ppm(dataset.images[i], root / e.file);
        labels += e.file + "," + std::to_string(e.label) + "\n";
    }
    write_text_atomic(root / "labels.csv", labels);
    write_text_atomic(root / "manifest.txt", dataset.manifest.to_text());
}

Dataset ingest_dataset(const std::filesystem::path& dir, const std::filesystem::path& labels_file,
                       double val_fraction, std::uint64_t seed) {
    const auto raw = read_file_bytes(labels_file);
    std::istringstream in(std::string(raw.begin(), raw.end()));
    std::string line;
    std::vector<std::pair<std::string, int>> rows;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty()) {
            continue;
        }
        const auto fields = split(line, ',');
        if (fields.size() != 2) {
            throw std::invalid_argument(labels_file.string() + ":" + std::to_string(lineno) +
                                        ": expected 'file,label'");
        }
        int label = 0;
        try {
            std::size_t used = 0;
            label = std::stoi(fields[1], &used);
            if (used != fields[1].size()) {
                throw std::invalid_argument("trailing");
            }
        } catch (const std::exception&) {
            if (lineno == 1) {
                continue; // header
            }
            throw std::invalid_argument(labels_file.string() + ":" + std::to_string(lineno) + ": bad label '" +
                                        fields[1] + "'");
        }
        rows.emplace_back(fields[0], label);
    }
    if (rows.empty()) {
        throw std::invalid_argument(labels_file.string() + ": no entries");
    }

    Dataset d;
    d.manifest.root = dir;
    std::vector<std::string> errors;
    struct Loaded {
        std::size_t row;
        std::vector<std::uint8_t> bytes;
        ImageD img;
    };
    std::vector<Loaded> loaded;
    std::map<std::pair<Index, Index>, std::size_t> sizes;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto path = dir / rows[i].first;
        try {
            auto bytes = read_file_bytes(path);
            ImageD img = decode_ppm(bytes, path.string());
            ++sizes[{img.height(), img.width()}];
            loaded.push_back({i, std::move(bytes), std::move(img)});
        } catch (const std::runtime_error& e) {
            errors.push_back(e.what());
        }
    }
    // the most common size is the reference; ties go to the first seen
    std::pair<Index, Index> ref{0, 0};
    std::size_t best = 0;
    for (const auto& l : loaded) {
        const std::size_t n = sizes[{l.img.height(), l.img.width()}];
        if (n > best) {
            best = n;
            ref = {l.img.height(), l.img.width()};
        }
    }
    d.manifest.height = ref.first;
    d.manifest.width = ref.second;
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto& l : loaded) {
        const auto& [file, label] = rows[l.row];
        if (l.img.height() != ref.first || l.img.width() != ref.second) {
            errors.push_back((dir / file).string() + ": size " + std::to_string(l.img.width()) + "x" +
                             std::to_string(l.img.height()) + " differs from " + std::to_string(ref.second) + "x" +
                             std::to_string(ref.first));
            continue;
        }
        h = fnv1a(l.bytes, h);
        const std::string tag = "," + std::to_string(label) + "\n";
        h = fnv1a(std::span(reinterpret_cast<const std::uint8_t*>(tag.data()), tag.size()), h);
        d.images.push_back(std::move(l.img));
        d.manifest.entries.push_back({file, label, false});
    }
    if (!errors.empty()) {
        std::string msg = "ingest: " + std::to_string(errors.size()) + " invalid file(s):";
        for (const auto& e : errors) {
            msg += "\n  " + e;
        }
        throw std::runtime_error(msg);
    }
    std::set<int> distinct;
    std::vector<int> labels;
    for (const auto& e : d.manifest.entries) {
        distinct.insert(e.label);
        labels.push_back(e.label);
    }
    const int classes = static_cast<int>(distinct.size());
    if (*distinct.begin() != 0 || *distinct.rbegin() != classes - 1) {
        throw std::invalid_argument("ingest: labels must be dense integers from 0");
    }
    d.manifest.classes = classes;
    d.manifest.checksum = h;
    const auto val = balanced_split(labels, classes, val_fraction, seed);
    for (std::size_t i = 0; i < val.size(); ++i) {
        d.manifest.entries[i].val = val[i];
    }
    return d;
}

} // namespace ldae
