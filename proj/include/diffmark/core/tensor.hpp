#pragma once

#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "diffmark/core/errors.hpp"

namespace diffmark {

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Dense row-major array. Plain value type; the autograd layer wraps it.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != shape_numel(shape))
            throw ShapeError("tensor data size " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(i < 0 ? shape.size() + i : i); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }
    std::span<T> span() { return data; }
    std::span<const T> span() const { return data; }

    T& operator[](std::size_t i) { return data[i]; }
    const T& operator[](std::size_t i) const { return data[i]; }

    template <typename U>
    Tensor<U> cast() const {
        return Tensor<U>(shape, std::vector<U>(data.begin(), data.end()));
    }

    Tensor reshaped(Shape s) const {
        if (shape_numel(s) != data.size())
            throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        return Tensor(std::move(s), data);
    }
};

}  // namespace diffmark
