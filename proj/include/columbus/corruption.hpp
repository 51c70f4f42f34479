#ifndef COLUMBUS_CORRUPTION_HPP
#define COLUMBUS_CORRUPTION_HPP

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <numeric>

#include "columbus/attribution.hpp"
#include "columbus/rng.hpp"
#include "columbus/tensor.hpp"

namespace columbus {

enum class CorruptionMethod { RandomValue, Zero, Fgsm, GaussianBlur, TargetedDropout };

inline const char* corruption_method_name(CorruptionMethod m) {
    switch (m) {
        case CorruptionMethod::RandomValue: return "random_value";
        case CorruptionMethod::Zero: return "zero";
        case CorruptionMethod::Fgsm: return "fgsm";
        case CorruptionMethod::GaussianBlur: return "gaussian_blur";
        case CorruptionMethod::TargetedDropout: return "targeted_dropout";
    }
    return "?";
}

struct CorruptionParams {
    double fgsm_epsilon = 0.1; // in [0,1] pixel units
    double blur_sigma = 2.0;
    int blur_kernel = 5; // odd, >= 3

    void validate() const {
        if (fgsm_epsilon < 0.0) throw std::invalid_argument("fgsm epsilon must be >= 0");
        if (blur_kernel < 3 || blur_kernel % 2 == 0)
            throw std::invalid_argument("blur kernel must be odd and >= 3");
    }
};

// Counts every corruption application; evaluation paths assert it stays flat.
inline std::atomic<std::uint64_t>& corruption_call_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

// Boolean selection of the most relevant units. For elementwise maps the
// flags mirror the map tensor; for spatial maps they cover (N, H, W) and a
// selected position means all channels at that position.
struct FeatureMask {
    int level = 0;
    MapKind kind = MapKind::Elementwise;
    std::vector<int> shape;
    std::vector<std::uint8_t> selected;
    std::vector<std::size_t> count_per_example;

    std::size_t units_per_example() const {
        return selected.size() / static_cast<std::size_t>(shape[0]);
    }
};

// Per example, selects the ceil(p*U) units with the highest ranking key:
// absolute value for elementwise maps, raw value for (nonnegative) spatial
// maps. Ties break to the lowest row-major index.
inline FeatureMask top_p_mask(const AttributionMap& map, double p) {
    if (p < 0.0 || p > 1.0) throw std::invalid_argument("top_p_mask: p must be in [0,1]");
    FeatureMask mask;
    mask.level = map.level;
    mask.kind = map.kind;
    mask.shape = map.values.shape;
    mask.selected.assign(map.values.numel(), 0);

    const int N = map.values.shape[0];
    const std::size_t units = map.values.numel() / static_cast<std::size_t>(N);
    const std::size_t k = static_cast<std::size_t>(std::ceil(p * static_cast<double>(units)));
    mask.count_per_example.assign(N, k);
    if (k == 0) return mask;

    std::vector<std::size_t> order(units);
    for (int n = 0; n < N; ++n) {
        const double* v = map.values.data.data() + static_cast<std::size_t>(n) * units;
        std::iota(order.begin(), order.end(), 0);
        const bool absolute = map.kind == MapKind::Elementwise;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            const double ka = absolute ? std::abs(v[a]) : v[a];
            const double kb = absolute ? std::abs(v[b]) : v[b];
            if (ka != kb) return ka > kb;
            return a < b;
        });
        for (std::size_t i = 0; i < k; ++i)
            mask.selected[static_cast<std::size_t>(n) * units + order[i]] = 1;
    }
    return mask;
}

namespace detail {

// Whole-image Gaussian blur with edge-replicate padding.
inline Tensor gaussian_blur(const Tensor& img, double sigma, int kernel) {
    const int N = img.shape[0], C = img.shape[1], H = img.shape[2], W = img.shape[3];
    const int r = kernel / 2;
    std::vector<double> k2(static_cast<std::size_t>(kernel) * kernel);
    double sum = 0.0;
    for (int u = 0; u < kernel; ++u)
        for (int v = 0; v < kernel; ++v) {
            const double du = u - r, dv = v - r;
            const double w = std::exp(-(du * du + dv * dv) / (2.0 * sigma * sigma));
            k2[static_cast<std::size_t>(u) * kernel + v] = w;
            sum += w;
        }
    for (double& w : k2) w /= sum;

    Tensor out(img.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    double acc = 0.0;
                    for (int u = 0; u < kernel; ++u)
                        for (int v = 0; v < kernel; ++v) {
                            const int y = std::clamp(i + u - r, 0, H - 1);
                            const int x = std::clamp(j + v - r, 0, W - 1);
                            acc += img.at4(n, c, y, x) * k2[static_cast<std::size_t>(u) * kernel + v];
                        }
                    out.at4(n, c, i, j) = acc;
                }
    return out;
}

} // namespace detail

// Input-level (level 0) corruption. Unmasked pixels are bit-identical to X.
// grad_at_input is required for FGSM only. rng draws happen in row-major
// order over masked pixels, so the result is a pure function of the stream.
inline Tensor corrupt_input(const Tensor& X, const FeatureMask& mask, CorruptionMethod method,
                            const CorruptionParams& params, const Tensor* grad_at_input,
                            RngStream& rng) {
    if (mask.level != 0) throw std::invalid_argument("corrupt_input: mask level must be 0");
    if (method == CorruptionMethod::TargetedDropout)
        throw std::invalid_argument("corrupt_input: targeted dropout applies to levels >= 1");
    if (method == CorruptionMethod::Fgsm && grad_at_input == nullptr)
        throw std::invalid_argument("corrupt_input: FGSM requires the input gradient");
    if (mask.kind != MapKind::Elementwise || mask.shape != X.shape)
        throw std::invalid_argument("corrupt_input: mask does not match input shape");
    params.validate();
    corruption_call_counter().fetch_add(1, std::memory_order_relaxed);

    Tensor out = X;
    switch (method) {
        case CorruptionMethod::RandomValue:
            for (std::size_t i = 0; i < out.numel(); ++i)
                if (mask.selected[i]) out.data[i] = rng.uniform();
            break;
        case CorruptionMethod::Zero:
            for (std::size_t i = 0; i < out.numel(); ++i)
                if (mask.selected[i]) out.data[i] = 0.0;
            break;
        case CorruptionMethod::Fgsm:
            for (std::size_t i = 0; i < out.numel(); ++i)
                if (mask.selected[i]) {
                    const double g = grad_at_input->data[i];
                    const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
                    out.data[i] = std::clamp(out.data[i] + params.fgsm_epsilon * s, 0.0, 1.0);
                }
            break;
        case CorruptionMethod::GaussianBlur: {
            const Tensor blurred = detail::gaussian_blur(X, params.blur_sigma, params.blur_kernel);
            for (std::size_t i = 0; i < out.numel(); ++i)
                if (mask.selected[i]) out.data[i] = blurred.data[i];
            break;
        }
        case CorruptionMethod::TargetedDropout:
            break; // unreachable
    }
    return out;
}

// Targeted dropout on an intermediate representation: masked units become 0,
// survivors are not rescaled. Spatial masks zero all channels at a position.
inline Tensor corrupt_repr(const Tensor& repr, const FeatureMask& mask) {
    if (mask.level < 1) throw std::invalid_argument("corrupt_repr: mask level must be >= 1");
    corruption_call_counter().fetch_add(1, std::memory_order_relaxed);

    Tensor out = repr;
    if (mask.kind == MapKind::Elementwise) {
        if (mask.shape != repr.shape)
            throw std::invalid_argument("corrupt_repr: mask does not match representation shape");
        for (std::size_t i = 0; i < out.numel(); ++i)
            if (mask.selected[i]) out.data[i] = 0.0;
    } else {
        const int N = repr.shape[0], C = repr.shape[1], H = repr.shape[2], W = repr.shape[3];
        if (mask.shape.size() != 3 || mask.shape[0] != N || mask.shape[1] != H || mask.shape[2] != W)
            throw std::invalid_argument("corrupt_repr: spatial mask does not match representation");
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j)
                    if (mask.selected[(static_cast<std::size_t>(n) * H + i) * W + j])
                        for (int c = 0; c < C; ++c) out.at4(n, c, i, j) = 0.0;
    }
    return out;
}

} // namespace columbus

#endif
