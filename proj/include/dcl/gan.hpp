#pragma once

// Adversarial training of the edge-augmented discriminator and its generator.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dcl/data.hpp"
#include "dcl/nn.hpp"
#include "dcl/rng.hpp"

namespace dcl::gan {

struct Architecture {
    std::string name;
    Shape image_shape;  // c x H x W
    std::size_t latent_dim = 0;
    std::size_t feature_dim = 0;  // width of the tapped layer M
    std::vector<nn::LayerSpec> discriminator;
    std::vector<nn::LayerSpec> generator;
};

/// Presets: "mnist-24", "cifar-32", "stl-48", and "toy-N" (N even, single channel
/// unless `channels` says otherwise). `sobel` toggles the edge front-end.
Architecture make_architecture(const std::string& preset, std::size_t latent_dim, bool sobel = true,
                               double dropout_rate = 0.2, double init_std = 0.02, std::size_t channels = 0);

struct GanConfig {
    std::string preset = "toy-14";
    bool sobel = true;
    std::size_t latent_dim = 32;
    std::size_t batch_size = 64;
    std::size_t iterations = 300;
    double lr = 1e-4;
    double beta1 = 0.5;
    double init_std = 0.02;
    double dropout_rate = 0.2;
    double tau = 20.0;
    double leaky_slope = 0.2;
    std::uint64_t seed = 0;

    void validate() const;
};

struct StepLosses {
    std::size_t iteration = 0;
    double d_loss = 0;       // adversarial part plus penalty
    double g_loss = 0;
    double penalty = 0;      // sum of max(|M| - tau, 0) over the real batch
    double d_real = 0;       // mean discriminator output on real images
    double d_fake = 0;
    double m_abs_max = 0;
    std::size_t clamped = 0;  // probabilities clamped away from 0 or 1
};

/// U[-1, 1]^(n x dim).
NdArray<float> sample_latent(std::size_t n, std::size_t dim, Rng& rng);

template <class T>
struct LossTerms {
    ad::Tensor<T> loss;
    std::size_t clamped = 0;
};

inline constexpr double kProbabilityClamp = 1e-7;

/// -[mean log d_real + mean log(1 - d_fake)] + sum max(|M| - tau, 0).
template <class T>
LossTerms<T> discriminator_loss(const ad::Tensor<T>& d_real, const ad::Tensor<T>& d_fake, const ad::Tensor<T>& m_real,
                                T tau);

/// -mean log d_fake.
template <class T>
LossTerms<T> generator_loss(const ad::Tensor<T>& d_fake);

template <class T>
ad::Tensor<T> flatten_penalty(const ad::Tensor<T>& m, T tau);

class GanTrainer {
public:
    GanTrainer(GanConfig config, Shape image_shape);

    const GanConfig& config() const noexcept { return config_; }
    const Architecture& architecture() const noexcept { return arch_; }
    nn::Network<float>& discriminator() noexcept { return d_; }
    nn::Network<float>& generator() noexcept { return g_; }
    std::size_t iteration() const noexcept { return iteration_; }
    const std::vector<StepLosses>& history() const noexcept { return history_; }

    /// One discriminator update on (real, fake), then one generator update on a
    /// fresh latent batch. `real` is B x c x H x W in [-1, 1].
    StepLosses train_step(const NdArray<float>& real);

    /// Runs the configured number of iterations over shuffled mini-batches.
    /// `on_step` (optional) is called after every step.
    void train(const data::ImageDataset& ds, const std::function<void(const StepLosses&)>& on_step = {});

    data::NamedArrays checkpoint();
    void load_checkpoint(const data::NamedArrays& blobs);

private:
    GanConfig config_;
    Architecture arch_;
    nn::Network<float> d_;
    nn::Network<float> g_;
    nn::AdamState<float> d_opt_;
    nn::AdamState<float> g_opt_;
    Rng rng_;
    std::size_t iteration_ = 0;
    std::vector<StepLosses> history_;
};

/// Discriminator for a stored checkpoint (only the "discriminator" blobs are used).
nn::Network<float> load_discriminator(const GanConfig& config, const Shape& image_shape, const data::NamedArrays& blobs);

} // namespace dcl::gan
