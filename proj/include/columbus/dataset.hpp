#ifndef COLUMBUS_DATASET_HPP
#define COLUMBUS_DATASET_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <utility>

#include "columbus/binio.hpp"
#include "columbus/rng.hpp"
#include "columbus/tensor.hpp"

namespace columbus {

// Rendering style of one synthetic domain. Rendering is a pure function of
// (spec, class, sample seed); the shortcut patch, when present, is a 4x4
// corner stamp whose position encodes the class label.
struct DomainSpec {
    int id = 0;
    std::uint64_t texture_seed = 0;
    double stroke_thickness = 2.0;
    double noise_sigma = 0.1;
    double rotation_range_deg = 30.0;
    double background_amplitude = 0.15;
    bool shortcut_present = false;
    double shortcut_intensity = 1.0;
};

struct Dataset {
    int num_classes = 0;
    int channels = 1;
    int height = 32;
    int width = 32;
    int num_domains = 0;

    struct Item {
        std::uint16_t label = 0;
        std::uint16_t domain = 0;
        std::vector<float> pixels; // C*H*W, row-major, values in [0,1]
    };
    std::vector<Item> items;
};

namespace synth {

constexpr int kPatchSize = 4;

// Top-left corner of the class-indexed shortcut patch.
inline std::pair<int, int> shortcut_position(int label, int h, int w) {
    switch (label) {
        case 0: return {1, 1};
        case 1: return {1, w - kPatchSize - 1};
        case 2: return {h - kPatchSize - 1, 1};
        case 3: return {h - kPatchSize - 1, w - kPatchSize - 1};
        case 4: return {1, (w - kPatchSize) / 2};
        case 5: return {h - kPatchSize - 1, (w - kPatchSize) / 2};
        default:
            throw std::invalid_argument("no shortcut patch position for class " +
                                        std::to_string(label));
    }
}

inline void check_shortcut_positions(int num_classes, int h, int w) {
    for (int a = 0; a < num_classes; ++a) {
        auto [ya, xa] = shortcut_position(a, h, w);
        for (int b = a + 1; b < num_classes; ++b) {
            auto [yb, xb] = shortcut_position(b, h, w);
            const bool overlap = ya < yb + kPatchSize && yb < ya + kPatchSize &&
                                 xa < xb + kPatchSize && xb < xa + kPatchSize;
            if (overlap)
                throw std::invalid_argument("shortcut patches overlap for classes " +
                                            std::to_string(a) + " and " + std::to_string(b));
        }
    }
}

inline double point_segment_distance(double px, double py, double ax, double ay,
                                     double bx, double by) {
    const double dx = bx - ax, dy = by - ay;
    const double len2 = dx * dx + dy * dy;
    double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double cx = ax + t * dx, cy = ay + t * dy;
    return std::hypot(px - cx, py - cy);
}

// Shape membership in centered coordinates. Classes: 0 square outline,
// 1 circle ring, 2 triangle outline, 3 plus sign, 4 diamond outline, 5 X.
inline bool shape_member(int cls, double x, double y, double radius, double thickness) {
    switch (cls) {
        case 0:
            return std::abs(std::max(std::abs(x), std::abs(y)) - radius * 0.8) <= thickness;
        case 1:
            return std::abs(std::hypot(x, y) - radius * 0.85) <= thickness;
        case 2: {
            double best = 1e30;
            for (int k = 0; k < 3; ++k) {
                const double a0 = 1.5707963267948966 + 2.0943951023931953 * k;
                const double a1 = 1.5707963267948966 + 2.0943951023931953 * (k + 1);
                best = std::min(best, point_segment_distance(
                                          x, y, radius * std::cos(a0), radius * std::sin(a0),
                                          radius * std::cos(a1), radius * std::sin(a1)));
            }
            return best <= thickness;
        }
        case 3:
            return (std::abs(x) <= thickness && std::abs(y) <= radius) ||
                   (std::abs(y) <= thickness && std::abs(x) <= radius);
        case 4:
            return std::abs(std::abs(x) + std::abs(y) - radius) <= thickness;
        case 5:
            return (std::abs(x - y) <= thickness * 1.4142 && std::abs(x) <= radius &&
                    std::abs(y) <= radius) ||
                   (std::abs(x + y) <= thickness * 1.4142 && std::abs(x) <= radius &&
                    std::abs(y) <= radius);
        default:
            throw std::invalid_argument("unsupported class " + std::to_string(cls));
    }
}

inline std::vector<float> render(const DomainSpec& spec, int cls, std::uint64_t sample_seed,
                                 int h, int w) {
    RngStream rng(hash_combine(hash_combine(spec.texture_seed, static_cast<std::uint64_t>(spec.id)),
                               hash_combine(static_cast<std::uint64_t>(cls), sample_seed)));
    std::vector<double> img(static_cast<std::size_t>(h) * w);
    for (double& v : img) v = 0.1 + spec.background_amplitude * rng.uniform();

    const double angle = rng.uniform(-spec.rotation_range_deg, spec.rotation_range_deg) *
                         0.017453292519943295;
    const double radius = rng.uniform(8.0, 11.0);
    const double intensity = rng.uniform(0.7, 0.95);
    const double cy = h / 2.0 - 0.5 + rng.uniform(-2.0, 2.0);
    const double cx = w / 2.0 - 0.5 + rng.uniform(-2.0, 2.0);
    const double ca = std::cos(angle), sa = std::sin(angle);

    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            const double dy = i - cy, dx = j - cx;
            const double rx = ca * dx + sa * dy;
            const double ry = -sa * dx + ca * dy;
            if (shape_member(cls, rx, ry, radius, spec.stroke_thickness))
                img[static_cast<std::size_t>(i) * w + j] = intensity;
        }

    if (spec.noise_sigma > 0.0)
        for (double& v : img) v += spec.noise_sigma * rng.gauss();
    for (double& v : img) v = std::clamp(v, 0.0, 1.0);

    if (spec.shortcut_present) {
        auto [py, px] = shortcut_position(cls, h, w);
        for (int i = 0; i < kPatchSize; ++i)
            for (int j = 0; j < kPatchSize; ++j)
                img[static_cast<std::size_t>(py + i) * w + (px + j)] =
                    std::clamp(spec.shortcut_intensity, 0.0, 1.0);
    }

    std::vector<float> out(img.size());
    for (std::size_t i = 0; i < img.size(); ++i) out[i] = static_cast<float>(img[i]);
    return out;
}

} // namespace synth

inline Dataset generate(int num_classes, const std::vector<DomainSpec>& specs,
                        int n_per_class_per_domain, std::uint64_t seed,
                        int height = 32, int width = 32) {
    if (num_classes < 2) throw std::invalid_argument("generate: need at least 2 classes");
    if (specs.size() < 2) throw std::invalid_argument("generate: need at least 2 domains");
    bool any_shortcut = false;
    for (const DomainSpec& s : specs) any_shortcut = any_shortcut || s.shortcut_present;
    if (any_shortcut) synth::check_shortcut_positions(num_classes, height, width);

    Dataset ds;
    ds.num_classes = num_classes;
    ds.height = height;
    ds.width = width;
    ds.num_domains = static_cast<int>(specs.size());
    for (const DomainSpec& spec : specs)
        for (int cls = 0; cls < num_classes; ++cls)
            for (int s = 0; s < n_per_class_per_domain; ++s) {
                Dataset::Item item;
                item.label = static_cast<std::uint16_t>(cls);
                item.domain = static_cast<std::uint16_t>(spec.id);
                item.pixels = synth::render(spec, cls,
                                            hash_combine(seed, static_cast<std::uint64_t>(s)),
                                            height, width);
                ds.items.push_back(std::move(item));
            }
    return ds;
}

// ---- dataset file I/O ----
// Layout: magic "CDG1"; little-endian u32: version, image count, K, C, H, W,
// domain count; per image u16 label, u16 domain id, then C*H*W f32 pixels.

inline void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open dataset for writing: " + path);
    os.write("CDG1", 4);
    detail::write_u32(os, 1); // version
    detail::write_u32(os, static_cast<std::uint32_t>(ds.items.size()));
    detail::write_u32(os, static_cast<std::uint32_t>(ds.num_classes));
    detail::write_u32(os, static_cast<std::uint32_t>(ds.channels));
    detail::write_u32(os, static_cast<std::uint32_t>(ds.height));
    detail::write_u32(os, static_cast<std::uint32_t>(ds.width));
    detail::write_u32(os, static_cast<std::uint32_t>(ds.num_domains));
    for (const Dataset::Item& it : ds.items) {
        detail::write_u16(os, it.label);
        detail::write_u16(os, it.domain);
        for (float v : it.pixels) detail::write_f32(os, v);
    }
    if (!os) throw std::runtime_error("dataset write failed: " + path);
}

inline Dataset load_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open dataset: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CDG1", 4) != 0)
        throw std::runtime_error("dataset: bad magic in " + path);
    const std::uint32_t version = detail::read_u32(is);
    if (version != 1) throw std::runtime_error("dataset: unsupported version");
    const std::uint32_t count = detail::read_u32(is);
    Dataset ds;
    ds.num_classes = static_cast<int>(detail::read_u32(is));
    ds.channels = static_cast<int>(detail::read_u32(is));
    ds.height = static_cast<int>(detail::read_u32(is));
    ds.width = static_cast<int>(detail::read_u32(is));
    ds.num_domains = static_cast<int>(detail::read_u32(is));
    const std::size_t px = static_cast<std::size_t>(ds.channels) * ds.height * ds.width;
    ds.items.resize(count);
    for (Dataset::Item& it : ds.items) {
        it.label = detail::read_u16(is);
        it.domain = detail::read_u16(is);
        it.pixels.resize(px);
        for (float& v : it.pixels) v = detail::read_f32(is);
    }
    if (!is) throw std::runtime_error("dataset: truncated file " + path);
    return ds;
}

// ---- splitting ----

struct SplitIndices {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};

// Stratified 80/20 split, per (domain, class) cell, deterministic under seed.
inline SplitIndices split_80_20(const Dataset& ds, std::uint64_t seed) {
    std::map<std::pair<int, int>, std::vector<std::size_t>> cells;
    for (std::size_t i = 0; i < ds.items.size(); ++i)
        cells[{ds.items[i].domain, ds.items[i].label}].push_back(i);

    SplitIndices out;
    for (auto& [key, idx] : cells) {
        if (idx.size() < 5)
            throw std::invalid_argument(
                "split_80_20: class " + std::to_string(key.second) + " in domain " +
                std::to_string(key.first) + " has fewer than 5 samples");
        RngStream rng(hash_combine(seed, hash_combine(static_cast<std::uint64_t>(key.first),
                                                      static_cast<std::uint64_t>(key.second))));
        // Fisher-Yates shuffle
        for (std::size_t i = idx.size() - 1; i > 0; --i)
            std::swap(idx[i], idx[rng.index(i + 1)]);
        const std::size_t n_val = idx.size() / 5;
        for (std::size_t i = 0; i < idx.size(); ++i)
            (i < n_val ? out.validation : out.train).push_back(idx[i]);
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.validation.begin(), out.validation.end());
    return out;
}

// Tensor view of selected items: (N, C, H, W) plus labels and domain ids.
struct Batch {
    Tensor x;
    std::vector<int> labels;
    std::vector<int> domains;
};

inline Batch make_batch(const Dataset& ds, const std::vector<std::size_t>& indices) {
    const int n = static_cast<int>(indices.size());
    Batch b;
    b.x = Tensor({n, ds.channels, ds.height, ds.width});
    const std::size_t px = static_cast<std::size_t>(ds.channels) * ds.height * ds.width;
    for (int i = 0; i < n; ++i) {
        const Dataset::Item& it = ds.items[indices[i]];
        for (std::size_t p = 0; p < px; ++p)
            b.x.data[static_cast<std::size_t>(i) * px + p] = static_cast<double>(it.pixels[p]);
        b.labels.push_back(it.label);
        b.domains.push_back(it.domain);
    }
    return b;
}

} // namespace columbus

#endif
