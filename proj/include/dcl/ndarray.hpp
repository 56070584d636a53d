#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "dcl/error.hpp"

namespace dcl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major n-dimensional array. Plain value type; no gradient state.
template <class T>
class NdArray {
public:
    using value_type = T;

    NdArray() = default;
    explicit NdArray(Shape shape, T fill = T{0});
    NdArray(Shape shape, std::vector<T> values);

    static NdArray scalar(T v) { return NdArray(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    T* data() noexcept { return values_.data(); }
    const T* data() const noexcept { return values_.data(); }
    std::span<T> values() noexcept { return values_; }
    std::span<const T> values() const noexcept { return values_; }
    std::vector<T>& storage() noexcept { return values_; }
    const std::vector<T>& storage() const noexcept { return values_; }

    T& operator[](std::size_t i) noexcept { return values_[i]; }
    const T& operator[](std::size_t i) const noexcept { return values_[i]; }

    T& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * shape_[1] + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * shape_[1] + c]; }

    T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) noexcept {
        return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    const T& operator()(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const noexcept {
        return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }

    /// Same values, new shape with identical element count.
    NdArray reshaped(Shape shape) const;
    void fill(T v);
    bool all_finite() const noexcept;

    template <class U>
    NdArray<U> cast() const {
        NdArray<U> out(shape_);
        for (std::size_t i = 0; i < values_.size(); ++i) out[i] = static_cast<U>(values_[i]);
        return out;
    }

    friend bool operator==(const NdArray& a, const NdArray& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    Shape shape_;
    std::vector<T> values_;
};

extern template class NdArray<float>;
extern template class NdArray<double>;

} // namespace dcl
