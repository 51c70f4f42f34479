#ifndef COLUMBUS_OPS_HPP
#define COLUMBUS_OPS_HPP

#include <cstddef>
#include <limits>
#include <stdexcept>

#include "columbus/tensor.hpp"

namespace columbus {

// Backward rule applied at ReLU layers. Guided additionally zeroes positions
// where the incoming (upstream) gradient is negative.
enum class ReluMode { Standard, Guided };

namespace ops {

// Direct convolution, zero padding. input (N,C,H,W), weight (K,C,kh,kw), bias (K).
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     int stride, int padding) {
    if (input.shape.size() != 4 || weight.shape.size() != 4)
        throw std::invalid_argument("conv2d: input and weight must be 4-D");
    if (stride < 1 || padding < 0)
        throw std::invalid_argument("conv2d: bad stride/padding");
    const int N = input.shape[0], C = input.shape[1], H = input.shape[2], W = input.shape[3];
    const int K = weight.shape[0], kh = weight.shape[2], kw = weight.shape[3];
    if (weight.shape[1] != C)
        throw std::invalid_argument("conv2d: input channels " + std::to_string(C) +
                                    " do not match weight channels " +
                                    std::to_string(weight.shape[1]));
    if (bias.shape.size() != 1 || bias.shape[0] != K)
        throw std::invalid_argument("conv2d: bias must have shape (K)");
    if (kh > H + 2 * padding || kw > W + 2 * padding)
        throw std::invalid_argument("conv2d: kernel larger than padded input");
    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;

    Tensor out({N, K, Ho, Wo});

    // fast path for the 3x3 / stride 1 / pad 1 shape the model uses: shifted
    // row accumulation, contiguous inner loops, same per-output summation
    // order (bias, then c-major, u, v) as the general path
    if (kh == 3 && kw == 3 && stride == 1 && padding == 1) {
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) {
                double* o = out.data.data() + (static_cast<std::size_t>(n) * K + k) * plane;
                const double b = bias.data[k];
                for (std::size_t t = 0; t < plane; ++t) o[t] = b;
                for (int c = 0; c < C; ++c) {
                    const double* in = input.data.data() +
                                       (static_cast<std::size_t>(n) * C + c) * plane;
                    const double* wk = weight.data.data() +
                                       (static_cast<std::size_t>(k) * C + c) * 9;
                    for (int u = 0; u < 3; ++u)
                        for (int v = 0; v < 3; ++v) {
                            const double wv = wk[u * 3 + v];
                            const int dy = u - 1, dx = v - 1;
                            const int i0 = dy < 0 ? 1 : 0, i1 = dy > 0 ? H - 1 : H;
                            const int j0 = dx < 0 ? 1 : 0, j1 = dx > 0 ? W - 1 : W;
                            for (int i = i0; i < i1; ++i) {
                                double* orow = o + static_cast<std::size_t>(i) * W;
                                const double* irow =
                                    in + static_cast<std::size_t>(i + dy) * W + dx;
                                for (int j = j0; j < j1; ++j) orow[j] += wv * irow[j];
                            }
                        }
                }
            }
        return out;
    }

    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    double acc = bias.data[k];
                    for (int c = 0; c < C; ++c)
                        for (int u = 0; u < kh; ++u) {
                            const int y = i * stride - padding + u;
                            if (y < 0 || y >= H) continue;
                            for (int v = 0; v < kw; ++v) {
                                const int x = j * stride - padding + v;
                                if (x < 0 || x >= W) continue;
                                acc += input.at4(n, c, y, x) * weight.at4(k, c, u, v);
                            }
                        }
                    out.at4(n, k, i, j) = acc;
                }
    return out;
}

inline void conv2d_backward(const Tensor& input, const Tensor& weight,
                            const Tensor& grad_out, int stride, int padding,
                            Tensor& grad_input, Tensor& grad_weight, Tensor& grad_bias) {
    const int N = input.shape[0], C = input.shape[1], H = input.shape[2], W = input.shape[3];
    const int K = weight.shape[0], kh = weight.shape[2], kw = weight.shape[3];
    const int Ho = grad_out.shape[2], Wo = grad_out.shape[3];

    grad_input = Tensor(input.shape);
    grad_weight = Tensor(weight.shape);
    grad_bias = Tensor({K});

    if (kh == 3 && kw == 3 && stride == 1 && padding == 1) {
        const std::size_t plane = static_cast<std::size_t>(H) * W;
        for (int n = 0; n < N; ++n)
            for (int k = 0; k < K; ++k) {
                const double* go = grad_out.data.data() +
                                   (static_cast<std::size_t>(n) * K + k) * plane;
                double bacc = 0.0;
                for (std::size_t t = 0; t < plane; ++t) bacc += go[t];
                grad_bias.data[k] += bacc;
                for (int c = 0; c < C; ++c) {
                    const double* in = input.data.data() +
                                       (static_cast<std::size_t>(n) * C + c) * plane;
                    double* gi = grad_input.data.data() +
                                 (static_cast<std::size_t>(n) * C + c) * plane;
                    const double* wk = weight.data.data() +
                                       (static_cast<std::size_t>(k) * C + c) * 9;
                    double* gw = grad_weight.data.data() +
                                 (static_cast<std::size_t>(k) * C + c) * 9;
                    for (int u = 0; u < 3; ++u)
                        for (int v = 0; v < 3; ++v) {
                            const double wv = wk[u * 3 + v];
                            const int dy = u - 1, dx = v - 1;
                            const int i0 = dy < 0 ? 1 : 0, i1 = dy > 0 ? H - 1 : H;
                            const int j0 = dx < 0 ? 1 : 0, j1 = dx > 0 ? W - 1 : W;
                            double wacc = 0.0;
                            for (int i = i0; i < i1; ++i) {
                                const double* grow = go + static_cast<std::size_t>(i) * W;
                                const double* irow =
                                    in + static_cast<std::size_t>(i + dy) * W + dx;
                                double* girow =
                                    gi + static_cast<std::size_t>(i + dy) * W + dx;
                                for (int j = j0; j < j1; ++j) {
                                    girow[j] += grow[j] * wv;
                                    wacc += grow[j] * irow[j];
                                }
                            }
                            gw[u * 3 + v] += wacc;
                        }
                }
            }
        return;
    }

    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    const double g = grad_out.at4(n, k, i, j);
                    grad_bias.data[k] += g;
                    for (int c = 0; c < C; ++c)
                        for (int u = 0; u < kh; ++u) {
                            const int y = i * stride - padding + u;
                            if (y < 0 || y >= H) continue;
                            for (int v = 0; v < kw; ++v) {
                                const int x = j * stride - padding + v;
                                if (x < 0 || x >= W) continue;
                                grad_input.at4(n, c, y, x) += g * weight.at4(k, c, u, v);
                                grad_weight.at4(k, c, u, v) += g * input.at4(n, c, y, x);
                            }
                        }
                }
}

inline Tensor relu(const Tensor& in) {
    Tensor out(in.shape);
    for (std::size_t i = 0; i < in.numel(); ++i)
        out.data[i] = in.data[i] > 0.0 ? in.data[i] : 0.0;
    return out;
}

inline Tensor relu_backward(const Tensor& pre, const Tensor& grad_out, ReluMode mode) {
    Tensor g(pre.shape);
    for (std::size_t i = 0; i < pre.numel(); ++i) {
        double v = pre.data[i] > 0.0 ? grad_out.data[i] : 0.0;
        if (mode == ReluMode::Guided && grad_out.data[i] <= 0.0) v = 0.0;
        g.data[i] = v;
    }
    return g;
}

// 2x2 max-pool, stride 2. Ties go to the lowest row-major index, which also
// fixes the backward routing. argmax stores flat indices into the input.
inline Tensor maxpool2(const Tensor& in, std::vector<std::size_t>& argmax) {
    const int N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
    if (H < 2 || W < 2) throw std::invalid_argument("maxpool2: spatial size below 2");
    const int Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    argmax.assign(out.numel(), 0);
    std::size_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j, ++o) {
                    double best = -std::numeric_limits<double>::infinity();
                    std::size_t best_idx = 0;
                    for (int u = 0; u < 2; ++u)
                        for (int v = 0; v < 2; ++v) {
                            const std::size_t idx = in.idx4(n, c, 2 * i + u, 2 * j + v);
                            if (in.data[idx] > best) {
                                best = in.data[idx];
                                best_idx = idx;
                            }
                        }
                    out.data[o] = best;
                    argmax[o] = best_idx;
                }
    return out;
}

inline Tensor maxpool2_backward(const Tensor& grad_out, const std::vector<std::size_t>& argmax,
                                const std::vector<int>& in_shape) {
    Tensor g(in_shape);
    for (std::size_t o = 0; o < grad_out.numel(); ++o) g.data[argmax[o]] += grad_out.data[o];
    return g;
}

// Global average pool (N,C,H,W) -> (N,C).
inline Tensor gap(const Tensor& in) {
    const int N = in.shape[0], C = in.shape[1], H = in.shape[2], W = in.shape[3];
    Tensor out({N, C});
    const double inv = 1.0 / (static_cast<double>(H) * W);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double acc = 0.0;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) acc += in.at4(n, c, i, j);
            out.at2(n, c) = acc * inv;
        }
    return out;
}

inline Tensor gap_backward(const Tensor& grad_out, const std::vector<int>& in_shape) {
    Tensor g(in_shape);
    const int H = in_shape[2], W = in_shape[3];
    const double inv = 1.0 / (static_cast<double>(H) * W);
    for (int n = 0; n < in_shape[0]; ++n)
        for (int c = 0; c < in_shape[1]; ++c) {
            const double v = grad_out.at2(n, c) * inv;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) g.at4(n, c, i, j) = v;
        }
    return g;
}

// Dense layer: logits[n,k] = sum_d in[n,d] * W[k,d] + b[k].
inline Tensor dense(const Tensor& in, const Tensor& weight, const Tensor& bias) {
    const int N = in.shape[0], D = in.shape[1], K = weight.shape[0];
    if (weight.shape[1] != D)
        throw std::invalid_argument("dense: weight/input dimension mismatch");
    Tensor out({N, K});
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
            double acc = bias.data[k];
            for (int d = 0; d < D; ++d) acc += in.at2(n, d) * weight.at2(k, d);
            out.at2(n, k) = acc;
        }
    return out;
}

inline void dense_backward(const Tensor& in, const Tensor& weight, const Tensor& grad_out,
                           Tensor& grad_in, Tensor& grad_weight, Tensor& grad_bias) {
    const int N = in.shape[0], D = in.shape[1], K = weight.shape[0];
    grad_in = Tensor(in.shape);
    grad_weight = Tensor(weight.shape);
    grad_bias = Tensor({K});
    for (int n = 0; n < N; ++n)
        for (int k = 0; k < K; ++k) {
            const double g = grad_out.at2(n, k);
            grad_bias.data[k] += g;
            for (int d = 0; d < D; ++d) {
                grad_in.at2(n, d) += g * weight.at2(k, d);
                grad_weight.at2(k, d) += g * in.at2(n, d);
            }
        }
}

// Row-wise numerically stable softmax.
inline Tensor softmax(const Tensor& logits) {
    const int N = logits.shape[0], K = logits.shape[1];
    Tensor out(logits.shape);
    for (int n = 0; n < N; ++n) {
        double m = logits.at2(n, 0);
        for (int k = 1; k < K; ++k) m = std::max(m, logits.at2(n, k));
        double z = 0.0;
        for (int k = 0; k < K; ++k) {
            const double e = std::exp(logits.at2(n, k) - m);
            out.at2(n, k) = e;
            z += e;
        }
        for (int k = 0; k < K; ++k) out.at2(n, k) /= z;
    }
    return out;
}

} // namespace ops
} // namespace columbus

#endif
