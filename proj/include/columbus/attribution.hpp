#ifndef COLUMBUS_ATTRIBUTION_HPP
#define COLUMBUS_ATTRIBUTION_HPP

#include <atomic>
#include <cstdint>
#include <fstream>
#include <string>

#include "columbus/model.hpp"

namespace columbus {

enum class AttributionMethod { Saliency, GuidedBackprop, GradCam, GuidedGradCam };

inline const char* attribution_method_name(AttributionMethod m) {
    switch (m) {
        case AttributionMethod::Saliency: return "saliency";
        case AttributionMethod::GuidedBackprop: return "guided_backprop";
        case AttributionMethod::GradCam: return "gradcam";
        case AttributionMethod::GuidedGradCam: return "guidedgradcam";
    }
    return "?";
}

enum class MapKind { Elementwise, Spatial };

// Relevance scores aligned to a representation level. Elementwise maps share
// R_l's shape; spatial maps are (N, H_l, W_l).
struct AttributionMap {
    int level = 0;
    MapKind kind = MapKind::Elementwise;
    AttributionMethod method = AttributionMethod::Saliency;
    Tensor values;
};

// Nearest-neighbor upsampling of a (N, H, W) map.
inline Tensor upsample_nearest(const Tensor& in, int out_h, int out_w) {
    const int N = in.shape[0], H = in.shape[1], W = in.shape[2];
    Tensor out({N, out_h, out_w});
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < out_h; ++i)
            for (int j = 0; j < out_w; ++j) {
                const int si = static_cast<int>(static_cast<long long>(i) * H / out_h);
                const int sj = static_cast<int>(static_cast<long long>(j) * W / out_w);
                out.data[(static_cast<std::size_t>(n) * out_h + i) * out_w + j] =
                    in.data[(static_cast<std::size_t>(n) * H + si) * W + sj];
            }
    return out;
}

// Gradient of sum_n softmax(logits)_n[true class] w.r.t. the logits:
// p_c * (delta_kc - p_k) per example.
inline Tensor true_class_probability_grad(const Prediction& pred, const Tensor& y) {
    const int N = pred.probabilities.shape[0], K = pred.probabilities.shape[1];
    Tensor g({N, K});
    for (int n = 0; n < N; ++n) {
        int c = 0;
        for (int k = 0; k < K; ++k)
            if (y.at2(n, k) == 1.0) c = k;
        const double pc = pred.probabilities.at2(n, c);
        for (int k = 0; k < K; ++k) {
            const double pk = pred.probabilities.at2(n, k);
            g.at2(n, k) = pc * ((k == c ? 1.0 : 0.0) - pk);
        }
    }
    return g;
}

namespace detail {

// Core of the cam computation: channel weights are spatial means of the
// gradient, the map is the ReLU of the weighted channel sum.
inline Tensor grad_cam_map(const Tensor& grad, const Tensor& repr) {
    const int N = repr.shape[0], C = repr.shape[1], H = repr.shape[2], W = repr.shape[3];
    const double inv_z = 1.0 / (static_cast<double>(H) * W);
    Tensor out({N, H, W});
    for (int n = 0; n < N; ++n) {
        std::vector<double> alpha(C, 0.0);
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) acc += grad.at4(n, c, i, j);
            alpha[c] = acc * inv_z;
        }
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                double acc = 0.0;
                for (int c = 0; c < C; ++c) acc += alpha[c] * repr.at4(n, c, i, j);
                out.data[(static_cast<std::size_t>(n) * H + i) * W + j] =
                    acc > 0.0 ? acc : 0.0;
            }
    }
    return out;
}

} // namespace detail

// Counts engine constructions; the trainer must build a fresh one per
// corrupted iteration (maps are never cached across iterations).
inline std::atomic<std::uint64_t>& attribution_pass_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

// Runs attribution over a private copy of the model, so the caller's model,
// its parameters, and its recorded activations are never touched. One forward
// is shared by all maps requested from the same engine.
class AttributionEngine {
public:
    AttributionEngine(const ModelGraph& model, const Tensor& batch, const Tensor& y)
        : model_(model), y_(y) {
        pred_ = model_.forward(batch);
        logit_grad_ = true_class_probability_grad(pred_, y_);
        attribution_pass_counter().fetch_add(1, std::memory_order_relaxed);
    }

    int num_levels() const { return model_.num_levels(); }
    const Prediction& prediction() const { return pred_; }

    // Raw signed gradient of the true-class probability w.r.t. R_level.
    Tensor level_gradient(int level, ReluMode mode) const {
        check_level(level);
        return model_.backward(logit_grad_, mode).level[level];
    }

    AttributionMap saliency(int level) const {
        AttributionMap m;
        m.level = level;
        m.kind = MapKind::Elementwise;
        m.method = AttributionMethod::Saliency;
        m.values = level_gradient(level, ReluMode::Standard);
        return m;
    }

    AttributionMap guided_backprop(int level) const {
        AttributionMap m;
        m.level = level;
        m.kind = MapKind::Elementwise;
        m.method = AttributionMethod::GuidedBackprop;
        m.values = level_gradient(level, ReluMode::Guided);
        return m;
    }

    // Channel weights come from the gradient of the true-class score (the
    // pre-softmax logit), which makes the map's spatial argmax exactly
    // invariant under positive rescaling of the producing conv layer.
    AttributionMap grad_cam(int level) const {
        if (level < 1)
            throw std::invalid_argument("grad_cam is defined on conv features (level >= 1)");
        check_level(level);
        const Tensor grad = model_.backward(y_, ReluMode::Standard).level[level];
        AttributionMap m;
        m.level = level;
        m.kind = MapKind::Spatial;
        m.method = AttributionMethod::GradCam;
        m.values = detail::grad_cam_map(grad, model_.recorded_level(level));
        return m;
    }

    // Level >= 1: grad_cam at that level, broadcast across channels, times
    // guided backprop. Level 0: grad_cam at the last conv level, upsampled to
    // the input size, times guided backprop at the input.
    AttributionMap guided_grad_cam(int level) const {
        check_level(level);
        AttributionMap gb = guided_backprop(level);
        Tensor cam;
        if (level >= 1) {
            cam = grad_cam(level).values;
        } else {
            AttributionMap last = grad_cam(model_.num_blocks());
            cam = upsample_nearest(last.values, model_.input_shape.h, model_.input_shape.w);
        }
        const int N = gb.values.shape[0], C = gb.values.shape[1];
        const int H = gb.values.shape[2], W = gb.values.shape[3];

        AttributionMap m;
        m.level = level;
        m.kind = MapKind::Elementwise;
        m.method = AttributionMethod::GuidedGradCam;
        m.values = Tensor(gb.values.shape);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c)
                for (int i = 0; i < H; ++i)
                    for (int j = 0; j < W; ++j)
                        m.values.at4(n, c, i, j) =
                            gb.values.at4(n, c, i, j) *
                            cam.data[(static_cast<std::size_t>(n) * H + i) * W + j];
        return m;
    }

    AttributionMap compute(AttributionMethod method, int level) const {
        switch (method) {
            case AttributionMethod::Saliency: return saliency(level);
            case AttributionMethod::GuidedBackprop: return guided_backprop(level);
            case AttributionMethod::GradCam: return grad_cam(level);
            case AttributionMethod::GuidedGradCam: return guided_grad_cam(level);
        }
        throw std::invalid_argument("unknown attribution method");
    }

private:
    ModelGraph model_;
    Tensor y_;
    Prediction pred_;
    Tensor logit_grad_;

    void check_level(int level) const {
        if (level < 0 || level >= model_.num_levels())
            throw std::invalid_argument("attribution level out of range");
    }
};

inline AttributionMap saliency(const ModelGraph& model, const Tensor& batch,
                               const Tensor& y, int level) {
    return AttributionEngine(model, batch, y).saliency(level);
}
inline AttributionMap guided_backprop(const ModelGraph& model, const Tensor& batch,
                                      const Tensor& y, int level) {
    return AttributionEngine(model, batch, y).guided_backprop(level);
}
inline AttributionMap grad_cam(const ModelGraph& model, const Tensor& batch,
                               const Tensor& y, int level) {
    return AttributionEngine(model, batch, y).grad_cam(level);
}
inline AttributionMap guided_grad_cam(const ModelGraph& model, const Tensor& batch,
                                      const Tensor& y, int level) {
    return AttributionEngine(model, batch, y).guided_grad_cam(level);
}

// Binary PGM heatmap export: min-max normalized to [0, 255] per image;
// all-constant maps come out mid-gray (128).
inline void write_pgm(const std::string& path, const double* values, int height, int width) {
    double lo = values[0], hi = values[0];
    const std::size_t n = static_cast<std::size_t>(height) * width;
    for (std::size_t i = 1; i < n; ++i) {
        lo = std::min(lo, values[i]);
        hi = std::max(hi, values[i]);
    }
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open PGM for writing: " + path);
    os << "P5\n" << width << " " << height << "\n255\n";
    for (std::size_t i = 0; i < n; ++i) {
        int v;
        if (hi == lo) {
            v = 128;
        } else {
            v = static_cast<int>(std::floor((values[i] - lo) / (hi - lo) * 255.0 + 0.5));
            v = std::min(255, std::max(0, v));
        }
        os.put(static_cast<char>(static_cast<unsigned char>(v)));
    }
    if (!os) throw std::runtime_error("PGM write failed: " + path);
}

} // namespace columbus

#endif
