#ifndef COLUMBUS_MODEL_HPP
#define COLUMBUS_MODEL_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "columbus/binio.hpp"
#include "columbus/ops.hpp"
#include "columbus/rng.hpp"
#include "columbus/tensor.hpp"

namespace columbus {

struct LevelShape {
    int c = 0, h = 0, w = 0;
    bool operator==(const LevelShape&) const = default;
};

struct ConvBlock {
    Tensor weight; // (K, C, 3, 3)
    Tensor bias;   // (K)
    int stride = 1;
    int padding = 1;
};

struct Prediction {
    Tensor logits;        // (N, K)
    Tensor probabilities; // softmax of logits
};

// Gradients produced by one backward pass. level[l] is the gradient w.r.t.
// the level-l output (level 0 = input); entries below the forward's start
// level are left empty, conv grads there are zero.
struct Gradients {
    std::vector<Tensor> conv_weight;
    std::vector<Tensor> conv_bias;
    Tensor dense_weight;
    Tensor dense_bias;
    std::vector<Tensor> level;
    Tensor embedding; // gradient w.r.t. the pooled embedding (N, d)
};

// Small sequential CNN: B blocks of (conv 3x3 -> ReLU -> 2x2 max-pool),
// then global average pool and a dense head. Representation level 0 is the
// raw input; level b is block b's output. The GAP vector is the embedding
// used for alignment statistics.
class ModelGraph {
public:
    std::vector<ConvBlock> blocks;
    Tensor head_weight; // (num_classes, d)
    Tensor head_bias;   // (num_classes)
    int num_classes = 0;
    LevelShape input_shape;

    static ModelGraph build(int num_blocks, const std::vector<int>& channels,
                            int num_classes, LevelShape input_shape, std::uint64_t seed) {
        if (num_blocks < 1) throw std::invalid_argument("build: num_blocks must be >= 1");
        if (static_cast<int>(channels.size()) != num_blocks)
            throw std::invalid_argument("build: channels length must equal num_blocks");
        ModelGraph m;
        m.num_classes = num_classes;
        m.input_shape = input_shape;
        RngStream rng(seed);
        int c = input_shape.c, h = input_shape.h, w = input_shape.w;
        m.level_shapes_.push_back({c, h, w});
        for (int b = 0; b < num_blocks; ++b) {
            if (h < 2 || w < 2)
                throw std::invalid_argument("build: input too small for the pooling pyramid");
            ConvBlock blk;
            blk.weight = Tensor({channels[b], c, 3, 3});
            blk.bias = Tensor({channels[b]});
            const double limit = std::sqrt(6.0 / (static_cast<double>(c) * 9.0));
            for (double& v : blk.weight.data) v = rng.uniform(-limit, limit);
            m.blocks.push_back(std::move(blk));
            c = channels[b];
            h /= 2;
            w /= 2;
            m.level_shapes_.push_back({c, h, w});
        }
        m.head_weight = Tensor({num_classes, c});
        m.head_bias = Tensor({num_classes});
        const double limit = std::sqrt(6.0 / static_cast<double>(c));
        for (double& v : m.head_weight.data) v = rng.uniform(-limit, limit);
        return m;
    }

    int num_blocks() const { return static_cast<int>(blocks.size()); }
    int num_levels() const { return num_blocks() + 1; }
    int embedding_dim() const { return level_shapes_.back().c; }
    const std::vector<LevelShape>& level_shapes() const { return level_shapes_; }

    // Full forward from the raw input; records every level output.
    Prediction forward(const Tensor& input) { return forward_from(0, input); }

    // Forward re-entry: treat `representation` as the level-`level` output and
    // run the layers above it. Levels below `level` are excluded from the
    // recorded graph, so a subsequent backward stops there.
    Prediction forward_from(int level, const Tensor& representation) {
        if (level < 0 || level > num_blocks())
            throw std::invalid_argument("forward_from: level out of range");
        check_level_shape(level, representation);

        cache_.valid = true;
        cache_.start_level = level;
        cache_.level_out.assign(num_levels(), Tensor{});
        cache_.conv_pre.assign(num_blocks(), Tensor{});
        cache_.pool_argmax.assign(num_blocks(), {});
        cache_.level_out[level] = representation;

        for (int b = level; b < num_blocks(); ++b) {
            const ConvBlock& blk = blocks[b];
            cache_.conv_pre[b] = ops::conv2d(cache_.level_out[b], blk.weight, blk.bias,
                                             blk.stride, blk.padding);
            Tensor activated = ops::relu(cache_.conv_pre[b]);
            cache_.level_out[b + 1] = ops::maxpool2(activated, cache_.pool_argmax[b]);
        }
        cache_.embedding = ops::gap(cache_.level_out[num_blocks()]);
        cache_.logits = ops::dense(cache_.embedding, head_weight, head_bias);

        Prediction pred;
        pred.logits = cache_.logits;
        pred.probabilities = ops::softmax(cache_.logits);
        return pred;
    }

    bool has_recorded_forward() const { return cache_.valid; }
    int recorded_start_level() const { return cache_.start_level; }
    const Tensor& recorded_level(int level) const {
        require_forward();
        if (level < cache_.start_level || level >= num_levels())
            throw std::invalid_argument("recorded_level: level not recorded");
        return cache_.level_out[level];
    }
    const Tensor& recorded_embedding() const {
        require_forward();
        return cache_.embedding;
    }
    const Tensor& recorded_logits() const {
        require_forward();
        return cache_.logits;
    }

    // Reverse pass from a gradient w.r.t. the logits. extra_embedding_grad,
    // when given, is added at the embedding (used for the alignment term).
    Gradients backward(const Tensor& grad_logits, ReluMode mode,
                       const Tensor* extra_embedding_grad = nullptr) const {
        require_forward();
        if (grad_logits.shape != cache_.logits.shape)
            throw std::invalid_argument("backward: grad_logits shape mismatch");

        Gradients g;
        g.conv_weight.resize(num_blocks());
        g.conv_bias.resize(num_blocks());
        g.level.resize(num_levels());
        for (int b = 0; b < num_blocks(); ++b) {
            g.conv_weight[b] = Tensor(blocks[b].weight.shape);
            g.conv_bias[b] = Tensor(blocks[b].bias.shape);
        }

        Tensor grad_emb;
        ops::dense_backward(cache_.embedding, head_weight, grad_logits,
                            grad_emb, g.dense_weight, g.dense_bias);
        if (extra_embedding_grad) {
            if (extra_embedding_grad->shape != grad_emb.shape)
                throw std::invalid_argument("backward: embedding grad shape mismatch");
            for (std::size_t i = 0; i < grad_emb.numel(); ++i)
                grad_emb.data[i] += extra_embedding_grad->data[i];
        }
        g.embedding = grad_emb;

        const int B = num_blocks();
        Tensor grad_level = ops::gap_backward(grad_emb, cache_.level_out[B].shape);
        g.level[B] = grad_level;
        for (int b = B - 1; b >= cache_.start_level; --b) {
            Tensor grad_relu = ops::maxpool2_backward(grad_level, cache_.pool_argmax[b],
                                                      cache_.conv_pre[b].shape);
            Tensor grad_pre = ops::relu_backward(cache_.conv_pre[b], grad_relu, mode);
            Tensor grad_in;
            ops::conv2d_backward(cache_.level_out[b], blocks[b].weight, grad_pre,
                                 blocks[b].stride, blocks[b].padding,
                                 grad_in, g.conv_weight[b], g.conv_bias[b]);
            grad_level = std::move(grad_in);
            g.level[b] = grad_level;
        }
        return g;
    }

    // Flat parameter vector, fixed order: conv weights/biases per block, then head.
    std::vector<double> parameters() const {
        std::vector<double> p;
        for (const ConvBlock& b : blocks) {
            p.insert(p.end(), b.weight.data.begin(), b.weight.data.end());
            p.insert(p.end(), b.bias.data.begin(), b.bias.data.end());
        }
        p.insert(p.end(), head_weight.data.begin(), head_weight.data.end());
        p.insert(p.end(), head_bias.data.begin(), head_bias.data.end());
        return p;
    }

    void set_parameters(const std::vector<double>& p) {
        std::size_t off = 0;
        auto take = [&](Tensor& t) {
            if (off + t.numel() > p.size())
                throw std::invalid_argument("set_parameters: vector too short");
            std::copy(p.begin() + off, p.begin() + off + t.numel(), t.data.begin());
            off += t.numel();
        };
        for (ConvBlock& b : blocks) {
            take(b.weight);
            take(b.bias);
        }
        take(head_weight);
        take(head_bias);
        if (off != p.size())
            throw std::invalid_argument("set_parameters: vector length mismatch");
    }

    std::vector<double> flatten_gradients(const Gradients& g) const {
        std::vector<double> v;
        for (int b = 0; b < num_blocks(); ++b) {
            v.insert(v.end(), g.conv_weight[b].data.begin(), g.conv_weight[b].data.end());
            v.insert(v.end(), g.conv_bias[b].data.begin(), g.conv_bias[b].data.end());
        }
        v.insert(v.end(), g.dense_weight.data.begin(), g.dense_weight.data.end());
        v.insert(v.end(), g.dense_bias.data.begin(), g.dense_bias.data.end());
        return v;
    }

private:
    struct ForwardCache {
        bool valid = false;
        int start_level = 0;
        std::vector<Tensor> level_out;
        std::vector<Tensor> conv_pre;
        std::vector<std::vector<std::size_t>> pool_argmax;
        Tensor embedding;
        Tensor logits;
    };

    std::vector<LevelShape> level_shapes_;
    ForwardCache cache_;

    void require_forward() const {
        if (!cache_.valid)
            throw std::logic_error("backward requested without a recorded forward pass");
    }

    void check_level_shape(int level, const Tensor& t) const {
        const LevelShape& s = level_shapes_[level];
        if (t.shape.size() != 4 || t.shape[1] != s.c || t.shape[2] != s.h || t.shape[3] != s.w)
            throw std::invalid_argument("level " + std::to_string(level) +
                                        " expects (N," + std::to_string(s.c) + "," +
                                        std::to_string(s.h) + "," + std::to_string(s.w) +
                                        "), got " + shape_string(t.shape));
    }
};

// Mean over the batch of -log p[true class]; y rows must be one-hot.
inline double classification_loss(const Prediction& pred, const Tensor& y) {
    const int N = pred.probabilities.shape[0], K = pred.probabilities.shape[1];
    if (y.shape != pred.probabilities.shape)
        throw std::invalid_argument("classification_loss: label shape mismatch");
    double loss = 0.0;
    for (int n = 0; n < N; ++n) {
        int hot = -1;
        for (int k = 0; k < K; ++k) {
            const double v = y.at2(n, k);
            if (v == 1.0) {
                if (hot >= 0) throw std::invalid_argument("classification_loss: y not one-hot");
                hot = k;
            } else if (v != 0.0) {
                throw std::invalid_argument("classification_loss: y not one-hot");
            }
        }
        if (hot < 0) throw std::invalid_argument("classification_loss: y not one-hot");
        loss -= std::log(std::max(pred.probabilities.at2(n, hot), 1e-300));
    }
    return loss / N;
}

// d(mean CE)/d(logits) = (softmax - y) / N.
inline Tensor classification_loss_grad(const Prediction& pred, const Tensor& y) {
    Tensor g(pred.logits.shape);
    const int N = pred.logits.shape[0];
    for (std::size_t i = 0; i < g.numel(); ++i)
        g.data[i] = (pred.probabilities.data[i] - y.data[i]) / N;
    return g;
}

inline Tensor one_hot(const std::vector<int>& labels, int num_classes) {
    Tensor y({static_cast<int>(labels.size()), num_classes});
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] < 0 || labels[n] >= num_classes)
            throw std::invalid_argument("one_hot: label out of range");
        y.at2(static_cast<int>(n), labels[n]) = 1.0;
    }
    return y;
}

// ---- checkpoint I/O ----
// Layout: magic "CMB1"; little-endian u32: block count, num_classes,
// input C, H, W; u32 out-channels per block; raw f64 parameter payload.

inline void save_checkpoint(const ModelGraph& m, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    os.write("CMB1", 4);
    detail::write_u32(os, static_cast<std::uint32_t>(m.num_blocks()));
    detail::write_u32(os, static_cast<std::uint32_t>(m.num_classes));
    detail::write_u32(os, static_cast<std::uint32_t>(m.input_shape.c));
    detail::write_u32(os, static_cast<std::uint32_t>(m.input_shape.h));
    detail::write_u32(os, static_cast<std::uint32_t>(m.input_shape.w));
    for (const ConvBlock& b : m.blocks)
        detail::write_u32(os, static_cast<std::uint32_t>(b.weight.shape[0]));
    const std::vector<double> p = m.parameters();
    os.write(reinterpret_cast<const char*>(p.data()),
             static_cast<std::streamsize>(p.size() * sizeof(double)));
    if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

inline ModelGraph load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CMB1", 4) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const int B = static_cast<int>(detail::read_u32(is));
    const int K = static_cast<int>(detail::read_u32(is));
    LevelShape in{static_cast<int>(detail::read_u32(is)),
                  static_cast<int>(detail::read_u32(is)),
                  static_cast<int>(detail::read_u32(is))};
    std::vector<int> channels(B);
    for (int b = 0; b < B; ++b) channels[b] = static_cast<int>(detail::read_u32(is));
    ModelGraph m = ModelGraph::build(B, channels, K, in, 0);
    std::vector<double> p(m.parameters().size());
    is.read(reinterpret_cast<char*>(p.data()),
            static_cast<std::streamsize>(p.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint: truncated payload in " + path);
    m.set_parameters(p);
    return m;
}

// ---- finite-difference gradient check ----

struct GradCheckLayerReport {
    std::string name;
    double max_rel_error = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckLayerReport> layers;
    bool all_pass = true;
};

// Compares every parameter's analytic gradient of the classification loss to
// central finite differences (h = 1e-5).
inline GradCheckReport grad_check(ModelGraph& model, const Tensor& batch, const Tensor& y,
                                  double tolerance) {
    const double h = 1e-5;
    Prediction pred = model.forward(batch);
    Gradients g = model.backward(classification_loss_grad(pred, y), ReluMode::Standard);
    const std::vector<double> analytic = model.flatten_gradients(g);
    std::vector<double> params = model.parameters();

    // layer boundaries in the flat vector
    std::vector<std::pair<std::string, std::size_t>> layout;
    for (int b = 0; b < model.num_blocks(); ++b) {
        layout.emplace_back("block" + std::to_string(b + 1) + ".weight",
                            model.blocks[b].weight.numel());
        layout.emplace_back("block" + std::to_string(b + 1) + ".bias",
                            model.blocks[b].bias.numel());
    }
    layout.emplace_back("head.weight", model.head_weight.numel());
    layout.emplace_back("head.bias", model.head_bias.numel());

    GradCheckReport report;
    std::size_t off = 0;
    for (const auto& [name, count] : layout) {
        GradCheckLayerReport lr;
        lr.name = name;
        for (std::size_t i = off; i < off + count; ++i) {
            const double saved = params[i];
            params[i] = saved + h;
            model.set_parameters(params);
            const double fp = classification_loss(model.forward(batch), y);
            params[i] = saved - h;
            model.set_parameters(params);
            const double fm = classification_loss(model.forward(batch), y);
            params[i] = saved;
            const double fd = (fp - fm) / (2.0 * h);
            const double denom = std::max({std::abs(fd), std::abs(analytic[i]), 1e-6});
            lr.max_rel_error = std::max(lr.max_rel_error, std::abs(fd - analytic[i]) / denom);
        }
        lr.pass = lr.max_rel_error <= tolerance;
        report.all_pass = report.all_pass && lr.pass;
        report.layers.push_back(lr);
        off += count;
    }
    model.set_parameters(params);
    model.forward(batch); // restore a consistent recorded forward
    return report;
}

} // namespace columbus

#endif
