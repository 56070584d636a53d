#pragma once

// Fixed edge-detection front-end placed in front of the discriminator.

#include <array>

#include "dcl/autodiff.hpp"

namespace dcl::sobel {

inline constexpr std::array<double, 9> kx = {-1, 0, 1, -2, 0, 2, -1, 0, 1};
inline constexpr std::array<double, 9> ky = {-1, -2, -1, 0, 0, 0, 1, 2, 1};
inline constexpr std::array<double, 3> gray_weights = {0.299, 0.587, 0.114};

/// N x 3 x H x W -> N x 1 x H x W luminance.
template <class T>
ad::Tensor<T> rgb_to_gray(const ad::Tensor<T>& image);

/// N x 1 x H x W -> N x 2 x H x W (dx, dy), zero-padded so H x W is preserved.
template <class T>
ad::Tensor<T> sobel_edges(const ad::Tensor<T>& gray);

/// concat(image, dx, dy) along channels. RGB inputs are converted to gray
/// before edge detection; single-channel inputs are used directly.
template <class T>
ad::Tensor<T> augment_input(const ad::Tensor<T>& image);

constexpr std::size_t augmented_channels(std::size_t c) { return c + 2; }

} // namespace dcl::sobel
