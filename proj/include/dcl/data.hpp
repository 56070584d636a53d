#pragma once

// Dataset loaders, synthetic mixtures, and the binary file codecs.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dcl/ndarray.hpp"

namespace dcl::data {

namespace fs = std::filesystem;

/// N x c x H x W images in [-1, 1] with optional labels.
struct ImageDataset {
    NdArray<float> images;
    std::vector<std::uint32_t> labels;
    std::string preset;

    std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
    Shape sample_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }
};

/// Byte [0, 255] -> [-1, 1].
constexpr float scale_pixel(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

ImageDataset load_idx(const fs::path& images, const std::optional<fs::path>& labels = std::nullopt);
ImageDataset load_cifar_bin(const std::vector<fs::path>& files);

ImageDataset center_crop(const ImageDataset& ds, std::size_t height, std::size_t width);
/// Area-averaging downsample by an integer factor.
ImageDataset area_downsample(const ImageDataset& ds, std::size_t factor);
/// Area-averaging resize to an arbitrary smaller size (fractional pixel coverage).
ImageDataset area_resize(const ImageDataset& ds, std::size_t height, std::size_t width);
/// Rows whose indices are listed, in order.
ImageDataset subset(const ImageDataset& ds, const std::vector<std::size_t>& rows);

/// digits {0,1,2}, 3000 images, 14 x 14, from `dir`/images-idx3-ubyte and labels-idx1-ubyte.
ImageDataset load_mnist_mini(const fs::path& dir);

// ---------------------------------------------------------------------------
// Features

struct FeatureMatrix {
    NdArray<float> values;  // N x d
    float dropout_rate = 0.0f;
    std::uint64_t seed = 0;

    std::size_t rows() const { return values.empty() ? 0 : values.dim(0); }
    std::size_t cols() const { return values.empty() ? 0 : values.dim(1); }
};

struct SynthSpec {
    std::size_t k = 3;
    std::size_t dim = 10;
    std::vector<std::vector<double>> means;  // empty: centered simplex with pairwise distance `separation * stddev`
    double separation = 6.0;
    double stddev = 1.0;
    std::vector<double> weights;  // empty: uniform
    std::size_t n = 3000;
    std::uint64_t seed = 0;

    void validate() const;
};

/// k simplex vertices in `dim` dimensions, centered at the origin, every pair `distance` apart.
std::vector<std::vector<double>> simplex_means(std::size_t k, std::size_t dim, double distance);

struct LabeledFeatures {
    FeatureMatrix features;
    std::vector<std::uint32_t> labels;
};

LabeledFeatures synth_gaussians(const SynthSpec& spec);
SynthSpec gauss3_spec(std::uint64_t seed);

// ---------------------------------------------------------------------------
// Codecs. All multi-byte fields little-endian.

void write_features(const fs::path& path, const FeatureMatrix& m);
FeatureMatrix read_features(const fs::path& path);

void write_labels(const fs::path& path, const std::vector<std::uint32_t>& labels);
std::vector<std::uint32_t> read_labels(const fs::path& path);

using NamedArrays = std::vector<std::pair<std::string, NdArray<float>>>;
void write_checkpoint(const fs::path& path, const NamedArrays& blobs);
NamedArrays read_checkpoint(const fs::path& path);

inline constexpr std::uint32_t kFeatureVersion = 1;
inline constexpr std::uint32_t kCheckpointVersion = 1;

} // namespace dcl::data
