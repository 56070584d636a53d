#include <cmath>
#include <random>

#include "doctest.h"
#include "dcl/error.hpp"
#include "dcl/features.hpp"
#include "dcl/gan.hpp"

using namespace dcl;

namespace {

data::ImageDataset noise_images(std::size_t n, std::size_t side, std::uint64_t seed) {
    data::ImageDataset ds;
    ds.images = NdArray<float>({n, 1, side, side});
    Rng rng(seed);
    std::uniform_real_distribution<float> u(-1, 1);
    for (auto& v : ds.images.values()) v = u(rng);
    ds.labels.assign(n, 0);
    return ds;
}

struct Trained {
    gan::GanTrainer trainer;
    data::ImageDataset ds;
};

Trained trained_toy() {
    gan::GanConfig c;
    c.preset = "toy-8";
    c.latent_dim = 8;
    c.batch_size = 16;
    c.iterations = 10;
    c.seed = 3;
    Trained t{gan::GanTrainer(c, {1, 8, 8}), noise_images(37, 8, 1)};
    t.trainer.train(t.ds, nullptr);
    return t;
}

} // namespace

TEST_CASE("feature extraction: shape, determinism, partition invariance") {
    auto t = trained_toy();
    auto& d = t.trainer.discriminator();
    const auto a = features::extract_features(d, t.ds, 0.0, 1);
    const std::size_t width = shape_numel(d.shape_after(*d.tap_layer()));
    CHECK(a.values.shape() == Shape{37, width});
    CHECK(a.dropout_rate == 0.0f);
    CHECK(a.values == features::extract_features(d, t.ds, 0.0, 99).values);

    const auto b = features::extract_features(d, t.ds, 0.1, 5, 250, 1);
    CHECK(b.values == features::extract_features(d, t.ds, 0.1, 5, 250, 1).values);
    CHECK(b.values == features::extract_features(d, t.ds, 0.1, 5, 7, 1).values);
    CHECK(b.values == features::extract_features(d, t.ds, 0.1, 5, 4, 3).values);
    CHECK_FALSE(b.values == features::extract_features(d, t.ds, 0.1, 6).values);
    CHECK_FALSE(b.values == a.values);

    // m' is a mild perturbation of m.
    double cos_sum = 0;
    for (std::size_t i = 0; i < 37; ++i) {
        double dot = 0, na = 0, nb = 0;
        for (std::size_t j = 0; j < width; ++j) {
            dot += a.values(i, j) * b.values(i, j);
            na += a.values(i, j) * a.values(i, j);
            nb += b.values(i, j) * b.values(i, j);
        }
        cos_sum += dot / std::sqrt(na * nb + 1e-30);
    }
    CHECK(cos_sum / 37 > 0.5);
}

TEST_CASE("feature extraction: errors") {
    auto t = trained_toy();
    auto& d = t.trainer.discriminator();
    CHECK_THROWS_AS(features::extract_features(d, noise_images(4, 10, 1), 0.0, 1), ShapeError);
    CHECK_THROWS_AS(features::extract_features(d, t.ds, 1.0, 1), ConfigError);
    auto bad = t.ds;
    bad.images[5] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(features::extract_features(d, bad, 0.0, 1), NumericError);
}
