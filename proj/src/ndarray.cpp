#include "dcl/ndarray.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <type_traits>
#include <cmath>
#include <sstream>

namespace dcl {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("empty shape");
    for (std::size_t e : shape)
        if (e == 0) throw ShapeError("zero extent in shape " + shape_str(shape));
}

} // namespace

template <class T>
NdArray<T>::NdArray(Shape shape, T fill) : shape_(std::move(shape)) {
    validate_shape(shape_);
    values_.assign(shape_numel(shape_), fill);
}

template <class T>
NdArray<T>::NdArray(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    validate_shape(shape_);
    if (values_.size() != shape_numel(shape_))
        throw ShapeError("value count " + std::to_string(values_.size()) + " does not match shape " +
                         shape_str(shape_));
}

template <class T>
std::size_t NdArray<T>::dim(std::size_t axis) const {
    if (axis >= shape_.size())
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape_));
    return shape_[axis];
}

template <class T>
NdArray<T> NdArray<T>::reshaped(Shape shape) const {
    if (shape_numel(shape) != values_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return NdArray(std::move(shape), values_);
}

template <class T>
void NdArray<T>::fill(T v) {
    std::fill(values_.begin(), values_.end(), v);
}

template <class T>
bool NdArray<T>::all_finite() const noexcept {
    // Exponent-bit test; branch-free so the loop vectorizes.
    using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr Bits exp_mask = static_cast<Bits>(sizeof(T) == 4 ? 0x7f800000ull : 0x7ff0000000000000ull);
    Bits bad = 0;
    for (T v : values_) bad |= static_cast<Bits>((std::bit_cast<Bits>(v) & exp_mask) == exp_mask);
    return bad == 0;
}

template class NdArray<float>;
template class NdArray<double>;

} // namespace dcl
