#pragma once

// Sequential networks built from LayerSpec lists, plus the Adam optimizer.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcl/autodiff.hpp"

namespace dcl::nn {

enum class LayerKind { dense, conv, transposed_conv, batchnorm, dropout, activation, flatten, reshape, sobel };
enum class Act { relu, leaky_relu, tanh, sigmoid, softmax };

struct LayerSpec {
    LayerKind kind = LayerKind::dense;
    std::size_t units = 0;  // dense outputs or conv output channels
    std::size_t kernel = 0;
    std::size_t stride = 1;
    ad::Padding padding = ad::Padding::same;
    Act activation = Act::relu;
    double slope = 0.2;
    double rate = 0.0;
    Shape target;            // reshape target without the batch axis
    double init_std = 0.02;  // <= 0 selects He initialization
    bool tap = false;        // expose this layer's output as the feature tap

    static LayerSpec dense(std::size_t units, double init_std = 0.02);
    static LayerSpec conv(std::size_t channels, std::size_t kernel, std::size_t stride, double init_std = 0.02);
    static LayerSpec transposed_conv(std::size_t channels, std::size_t kernel, std::size_t stride,
                                     double init_std = 0.02);
    static LayerSpec batchnorm();
    static LayerSpec dropout(double rate);
    static LayerSpec act(Act a, double slope = 0.2);
    static LayerSpec flatten();
    static LayerSpec reshape(Shape target);
    static LayerSpec sobel();

    LayerSpec& tapped() {
        tap = true;
        return *this;
    }

    /// Throws ConfigError on stride < 1, dropout rate outside [0,1), slope outside [0,1).
    void validate() const;
};

std::string describe(const LayerSpec& spec);

template <class T>
struct Parameter {
    std::string name;
    ad::Tensor<T> tensor;
};

struct ForwardOptions {
    bool training = true;
    std::optional<double> dropout_rate;  // replaces every dropout layer's rate
    std::uint64_t seed = 0;
    std::size_t row_offset = 0;
    bool update_running_stats = false;  // only meaningful when training
};

template <class T>
class Network {
public:
    struct Output {
        ad::Tensor<T> output;
        ad::Tensor<T> tap;  // undefined when no layer is tapped
    };

    Network() = default;
    Network(std::string name, std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t init_seed,
            double bn_momentum = 0.9, double bn_eps = 1e-5);

    Output forward(const ad::Tensor<T>& x, const ForwardOptions& options);

    const std::string& name() const noexcept { return name_; }
    const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
    const Shape& input_shape() const noexcept { return input_shape_; }
    const Shape& output_shape() const noexcept { return shapes_.back(); }
    /// Per-sample shape after layer i (index 0 is the input).
    const Shape& shape_after(std::size_t i) const { return shapes_.at(i + 1); }
    std::optional<std::size_t> tap_layer() const noexcept { return tap_; }

    std::vector<Parameter<T>>& parameters() noexcept { return params_; }
    const std::vector<Parameter<T>>& parameters() const noexcept { return params_; }
    std::size_t parameter_count() const;
    /// Trainable parameters and batchnorm running statistics, by name.
    std::vector<std::pair<std::string, NdArray<T>*>> state();

private:
    struct LayerSlots {
        int weight = -1, bias = -1;   // indices into params_
        int running = -1;             // index into running_ (mean at running, var at running+1)
    };

    std::string name_;
    std::vector<LayerSpec> layers_;
    Shape input_shape_;
    std::vector<Shape> shapes_;
    std::vector<LayerSlots> slots_;
    std::vector<Parameter<T>> params_;
    std::vector<std::pair<std::string, NdArray<T>>> running_;
    std::optional<std::size_t> tap_;
    double bn_momentum_ = 0.9;
    double bn_eps_ = 1e-5;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
struct AdamState {
    AdamConfig config;
    std::uint64_t step = 0;
    std::vector<NdArray<T>> m;
    std::vector<NdArray<T>> v;
};

/// One bias-corrected descent step. Moments are created on first use.
/// A non-finite gradient throws NumericError naming the parameter.
template <class T>
void adam_step(std::span<Parameter<T>> params, const ad::Gradients<T>& grads, AdamState<T>& state);

} // namespace dcl::nn
