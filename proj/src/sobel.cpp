#include "dcl/sobel.hpp"

#include <string>

#include "dcl/error.hpp"

namespace dcl::sobel {

namespace {


template <class T>
void require_rank4(const ad::Tensor<T>& x, const char* op) {
    if (x.shape().size() != 4) throw ShapeError(std::string(op) + ": expected N x C x H x W, got " + shape_str(x.shape()));
}

} // namespace

template <class T>
ad::Tensor<T> rgb_to_gray(const ad::Tensor<T>& image) {
    require_rank4(image, "rgb_to_gray");
    if (image.dim(1) != 3) throw ShapeError("rgb_to_gray: expected 3 channels, got " + shape_str(image.shape()));
    NdArray<T> k(Shape{1, 3, 1, 1});
    for (std::size_t c = 0; c < 3; ++c) k[c] = static_cast<T>(gray_weights[c]);
    return ad::conv2d(image, ad::constant(std::move(k)), 1, ad::Padding::valid);
}

template <class T>
ad::Tensor<T> sobel_edges(const ad::Tensor<T>& gray) {
    require_rank4(gray, "sobel_edges");
    if (gray.dim(1) != 1) throw ShapeError("sobel_edges: expected 1 channel, got " + shape_str(gray.shape()));
    NdArray<T> k(Shape{2, 1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) {
        k[i] = static_cast<T>(kx[i]);
        k[9 + i] = static_cast<T>(ky[i]);
    }
    return ad::conv2d(gray, ad::constant(std::move(k)), 1, ad::Padding::same);
}

template <class T>
ad::Tensor<T> augment_input(const ad::Tensor<T>& image) {
    require_rank4(image, "augment_input");
    const std::size_t c = image.dim(1);
    if (c != 1 && c != 3)
        throw ShapeError("augment_input: only 1- or 3-channel images are supported, got " + shape_str(image.shape()));
    const ad::Tensor<T> edges = sobel_edges(c == 3 ? rgb_to_gray(image) : image);
    const ad::Tensor<T> parts[] = {image, edges};
    return ad::concat<T>(parts, 1);
}

template ad::Tensor<float> rgb_to_gray(const ad::Tensor<float>&);
template ad::Tensor<double> rgb_to_gray(const ad::Tensor<double>&);
template ad::Tensor<float> sobel_edges(const ad::Tensor<float>&);
template ad::Tensor<double> sobel_edges(const ad::Tensor<double>&);
template ad::Tensor<float> augment_input(const ad::Tensor<float>&);
template ad::Tensor<double> augment_input(const ad::Tensor<double>&);

} // namespace dcl::sobel
