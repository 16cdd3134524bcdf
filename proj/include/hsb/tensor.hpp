#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hsb {

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

// Dense row-major tensor. float for training, double for gradient checks.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), data(static_cast<size_t>(hsb::numel(shape)), T(0)) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (static_cast<int64_t>(data.size()) != hsb::numel(shape)) {
            throw std::invalid_argument("tensor data length does not match shape " + shape_str(shape));
        }
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int dim(int i) const { return shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(shape.size()); }

    T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // 4-D accessor (b, c, y, x) for image-like tensors.
    T& at4(int b, int c, int y, int x) {
        return data[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    const T& at4(int b, int c, int y, int x) const {
        return data[((static_cast<size_t>(b) * shape[1] + c) * shape[2] + y) * shape[3] + x];
    }
    T& at2(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
    const T& at2(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

    static Tensor<T> full(Shape s, T v) {
        Tensor<T> t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor<T> scalar(T v) { return Tensor<T>({1}, {v}); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> out(shape);
        for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape;
}

using ImageTensor = Tensor<float>;

// Boolean mask over a W x H pixel grid, stored row-major (y major).
struct BoolMask {
    int w = 0, h = 0;
    std::vector<uint8_t> data;  // 0 or 1

    BoolMask() = default;
    BoolMask(int w_, int h_) : w(w_), h(h_), data(static_cast<size_t>(w_) * h_, 0) {}

    uint8_t& at(int x, int y) { return data[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int x, int y) const { return data[static_cast<size_t>(y) * w + x]; }
    int64_t count() const {
        int64_t n = 0;
        for (uint8_t v : data) n += v;
        return n;
    }
};

inline bool operator==(const BoolMask& a, const BoolMask& b) {
    return a.w == b.w && a.h == b.h && a.data == b.data;
}

}  // namespace hsb
