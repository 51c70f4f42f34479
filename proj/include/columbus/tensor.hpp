#ifndef COLUMBUS_TENSOR_HPP
#define COLUMBUS_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace columbus {

// Dense row-major f64 tensor. 4-D tensors use (batch, channel, height, width)
// order; the gradient buffer, when allocated, mirrors the data buffer.
struct Tensor {
    std::vector<int> shape;
    std::vector<double> data;
    std::vector<double> grad; // empty unless gradients were requested

    Tensor() = default;

    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(numel_of(shape), 0.0);
    }

    Tensor(std::vector<int> s, std::vector<double> d)
        : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != numel_of(shape))
            throw std::invalid_argument("Tensor: data length does not match shape");
    }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dimension");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    std::size_t numel() const { return data.size(); }
    int dim(std::size_t i) const { return shape.at(i); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

    double& operator()(std::size_t i) { return data[i]; }
    double operator()(std::size_t i) const { return data[i]; }

    // 4-D access
    std::size_t idx4(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w;
    }
    double& at4(int n, int c, int h, int w) { return data[idx4(n, c, h, w)]; }
    double at4(int n, int c, int h, int w) const { return data[idx4(n, c, h, w)]; }

    // 2-D access
    std::size_t idx2(int r, int c) const {
        return static_cast<std::size_t>(r) * shape[1] + c;
    }
    double& at2(int r, int c) { return data[idx2(r, c)]; }
    double at2(int r, int c) const { return data[idx2(r, c)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }
};

inline std::string shape_string(const std::vector<int>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

} // namespace columbus

#endif
