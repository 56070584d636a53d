#include "dcl/nn.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "dcl/error.hpp"
#include "dcl/rng.hpp"
#include "dcl/sobel.hpp"

namespace dcl::nn {

LayerSpec LayerSpec::dense(std::size_t units, double init_std) {
    LayerSpec s;
    s.kind = LayerKind::dense;
    s.units = units;
    s.init_std = init_std;
    return s;
}

LayerSpec LayerSpec::conv(std::size_t channels, std::size_t kernel, std::size_t stride, double init_std) {
    LayerSpec s;
    s.kind = LayerKind::conv;
    s.units = channels;
    s.kernel = kernel;
    s.stride = stride;
    s.init_std = init_std;
    return s;
}

LayerSpec LayerSpec::transposed_conv(std::size_t channels, std::size_t kernel, std::size_t stride, double init_std) {
    LayerSpec s = conv(channels, kernel, stride, init_std);
    s.kind = LayerKind::transposed_conv;
    return s;
}

LayerSpec LayerSpec::batchnorm() {
    LayerSpec s;
    s.kind = LayerKind::batchnorm;
    return s;
}

LayerSpec LayerSpec::dropout(double rate) {
    LayerSpec s;
    s.kind = LayerKind::dropout;
    s.rate = rate;
    return s;
}

LayerSpec LayerSpec::act(Act a, double slope) {
    LayerSpec s;
    s.kind = LayerKind::activation;
    s.activation = a;
    s.slope = slope;
    return s;
}

LayerSpec LayerSpec::flatten() {
    LayerSpec s;
    s.kind = LayerKind::flatten;
    return s;
}

LayerSpec LayerSpec::reshape(Shape target) {
    LayerSpec s;
    s.kind = LayerKind::reshape;
    s.target = std::move(target);
    return s;
}

LayerSpec LayerSpec::sobel() {
    LayerSpec s;
    s.kind = LayerKind::sobel;
    return s;
}

void LayerSpec::validate() const {
    if (stride < 1) throw ConfigError("layer stride must be >= 1");
    if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0,1), got " + std::to_string(rate));
    if (!(slope >= 0.0 && slope < 1.0)) throw ConfigError("leaky slope must lie in [0,1), got " + std::to_string(slope));
    if ((kind == LayerKind::dense || kind == LayerKind::conv || kind == LayerKind::transposed_conv) && units == 0)
        throw ConfigError("layer needs a positive unit/channel count");
    if ((kind == LayerKind::conv || kind == LayerKind::transposed_conv) && kernel == 0)
        throw ConfigError("convolution needs a positive kernel size");
}

std::string describe(const LayerSpec& s) {
    std::ostringstream os;
    const char* pad = s.padding == ad::Padding::same ? "same" : "valid";
    switch (s.kind) {
    case LayerKind::dense: os << "dense(" << s.units << ")"; break;
    case LayerKind::conv: os << "conv(" << s.units << ", k" << s.kernel << ", s" << s.stride << ", " << pad << ")"; break;
    case LayerKind::transposed_conv:
        os << "tconv(" << s.units << ", k" << s.kernel << ", s" << s.stride << ", " << pad << ")";
        break;
    case LayerKind::batchnorm: os << "batchnorm"; break;
    case LayerKind::dropout: os << "dropout(" << s.rate << ")"; break;
    case LayerKind::activation: {
        static const char* names[] = {"relu", "leaky_relu", "tanh", "sigmoid", "softmax"};
        os << names[static_cast<int>(s.activation)];
        if (s.activation == Act::leaky_relu) os << "(" << s.slope << ")";
        break;
    }
    case LayerKind::flatten: os << "flatten"; break;
    case LayerKind::reshape: os << "reshape" << shape_str(s.target); break;
    case LayerKind::sobel: os << "sobel"; break;
    }
    if (s.tap) os << " [tap]";
    return os.str();
}

namespace {

std::size_t conv_out(std::size_t in, const LayerSpec& s) {
    if (s.padding == ad::Padding::same) return (in + s.stride - 1) / s.stride;
    if (s.kernel > in) throw ShapeError("kernel larger than input extent");
    return (in - s.kernel) / s.stride + 1;
}

std::size_t tconv_out(std::size_t in, const LayerSpec& s) {
    return s.padding == ad::Padding::same ? in * s.stride : (in - 1) * s.stride + s.kernel;
}

Shape infer(const Shape& in, const LayerSpec& s) {
    auto need_rank = [&](std::size_t r) {
        if (in.size() != r)
            throw ShapeError(describe(s) + ": expected per-sample rank " + std::to_string(r) + ", got " + shape_str(in));
    };
    switch (s.kind) {
    case LayerKind::dense: need_rank(1); return {s.units};
    case LayerKind::conv: need_rank(3); return {s.units, conv_out(in[1], s), conv_out(in[2], s)};
    case LayerKind::transposed_conv: need_rank(3); return {s.units, tconv_out(in[1], s), tconv_out(in[2], s)};
    case LayerKind::flatten: return {shape_numel(in)};
    case LayerKind::reshape:
        if (shape_numel(s.target) != shape_numel(in))
            throw ShapeError("reshape " + shape_str(in) + " -> " + shape_str(s.target) + " changes element count");
        return s.target;
    case LayerKind::sobel: need_rank(3); return {sobel::augmented_channels(in[0]), in[1], in[2]};
    default: return in;
    }
}

template <class T>
NdArray<T> init_array(Shape shape, double stddev, std::uint64_t seed) {
    NdArray<T> a(std::move(shape));
    Rng rng(seed);
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : a.values()) v = static_cast<T>(dist(rng));
    return a;
}

Shape batched(std::size_t n, const Shape& s) {
    Shape out{n};
    out.insert(out.end(), s.begin(), s.end());
    return out;
}

} // namespace

template <class T>
Network<T>::Network(std::string name, std::vector<LayerSpec> layers, Shape input_shape, std::uint64_t init_seed,
                    double bn_momentum, double bn_eps)
    : name_(std::move(name)), layers_(std::move(layers)), input_shape_(std::move(input_shape)), bn_momentum_(bn_momentum),
      bn_eps_(bn_eps) {
    shapes_.push_back(input_shape_);
    slots_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& s = layers_[i];
        s.validate();
        const Shape in = shapes_.back();
        shapes_.push_back(infer(in, s));
        const Shape out = shapes_.back();
        if (s.tap) {
            if (tap_) throw ConfigError("network '" + name_ + "' has more than one tapped layer");
            tap_ = i;
        }
        const std::string prefix = name_ + "." + std::to_string(i) + ".";
        const std::uint64_t seed = derive_seed(init_seed, i);
        auto add_param = [&](const std::string& suffix, NdArray<T> value) {
            params_.push_back({prefix + suffix, ad::parameter(std::move(value))});
            return static_cast<int>(params_.size() - 1);
        };
        switch (s.kind) {
        case LayerKind::dense: {
            const double sd = s.init_std > 0 ? s.init_std : std::sqrt(2.0 / static_cast<double>(in[0]));
            slots_[i].weight = add_param("weight", init_array<T>({in[0], s.units}, sd, seed));
            slots_[i].bias = add_param("bias", NdArray<T>({s.units}, T{0}));
            break;
        }
        case LayerKind::conv:
        case LayerKind::transposed_conv: {
            const double fan_in = static_cast<double>(in[0] * s.kernel * s.kernel);
            const double sd = s.init_std > 0 ? s.init_std : std::sqrt(2.0 / fan_in);
            Shape ks = s.kind == LayerKind::conv ? Shape{s.units, in[0], s.kernel, s.kernel}
                                                 : Shape{in[0], s.units, s.kernel, s.kernel};
            slots_[i].weight = add_param("weight", init_array<T>(std::move(ks), sd, seed));
            slots_[i].bias = add_param("bias", NdArray<T>({s.units}, T{0}));
            break;
        }
        case LayerKind::batchnorm: {
            const std::size_t c = out[0];
            slots_[i].weight = add_param("gamma", NdArray<T>({c}, T{1}));
            slots_[i].bias = add_param("beta", NdArray<T>({c}, T{0}));
            slots_[i].running = static_cast<int>(running_.size());
            running_.emplace_back(prefix + "running_mean", NdArray<T>({c}, T{0}));
            running_.emplace_back(prefix + "running_var", NdArray<T>({c}, T{1}));
            break;
        }
        default: break;
        }
    }
}

template <class T>
typename Network<T>::Output Network<T>::forward(const ad::Tensor<T>& x, const ForwardOptions& opt) {
    if (x.shape().size() != input_shape_.size() + 1 ||
        !std::equal(input_shape_.begin(), input_shape_.end(), x.shape().begin() + 1))
        throw ShapeError("network '" + name_ + "' expects batches of " + shape_str(input_shape_) + ", got " +
                         shape_str(x.shape()));
    const std::size_t n = x.dim(0);
    Output result;
    ad::Tensor<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& s = layers_[i];
        const LayerSlots& sl = slots_[i];
        auto w = [&] { return params_[sl.weight].tensor; };
        auto b = [&] { return params_[sl.bias].tensor; };
        switch (s.kind) {
        case LayerKind::dense: h = ad::add_bias(ad::matmul(h, w()), b()); break;
        case LayerKind::conv: h = ad::add_bias(ad::conv2d(h, w(), s.stride, s.padding), b()); break;
        case LayerKind::transposed_conv: h = ad::add_bias(ad::conv_transpose2d(h, w(), s.stride, s.padding), b()); break;
        case LayerKind::batchnorm: {
            auto& mean = running_[sl.running].second;
            auto& var = running_[sl.running + 1].second;
            if (opt.training) {
                ad::BatchStats<T> stats;
                h = ad::batch_norm(h, w(), b(), static_cast<T>(bn_eps_), &stats);
                if (opt.update_running_stats) {
                    const T m = static_cast<T>(bn_momentum_);
                    for (std::size_t c = 0; c < mean.size(); ++c) {
                        mean[c] = m * mean[c] + (T{1} - m) * stats.mean[c];
                        var[c] = m * var[c] + (T{1} - m) * stats.var[c];
                    }
                }
            } else {
                h = ad::batch_norm_inference(h, w(), b(), std::span<const T>(mean.values()),
                                             std::span<const T>(var.values()), static_cast<T>(bn_eps_));
            }
            break;
        }
        case LayerKind::dropout: {
            const double rate = opt.dropout_rate.value_or(opt.training ? s.rate : 0.0);
            h = ad::dropout(h, rate, derive_seed(opt.seed, i), opt.row_offset);
            break;
        }
        case LayerKind::activation:
            switch (s.activation) {
            case Act::relu: h = ad::relu(h); break;
            case Act::leaky_relu: h = ad::leaky_relu(h, static_cast<T>(s.slope)); break;
            case Act::tanh: h = ad::tanh(h); break;
            case Act::sigmoid: h = ad::sigmoid(h); break;
            case Act::softmax: h = ad::softmax(h, 1); break;
            }
            break;
        case LayerKind::flatten:
        case LayerKind::reshape: h = ad::reshape(h, batched(n, shapes_[i + 1])); break;
        case LayerKind::sobel: h = sobel::augment_input(h); break;
        }
        if (tap_ && *tap_ == i) result.tap = h;
    }
    result.output = h;
    return result;
}

template <class T>
std::size_t Network<T>::parameter_count() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.tensor.size();
    return total;
}

template <class T>
std::vector<std::pair<std::string, NdArray<T>*>> Network<T>::state() {
    std::vector<std::pair<std::string, NdArray<T>*>> out;
    for (auto& p : params_) out.emplace_back(p.name, &p.tensor.mutable_value());
    for (auto& r : running_) out.emplace_back(r.first, &r.second);
    return out;
}

template <class T>
void adam_step(std::span<Parameter<T>> params, const ad::Gradients<T>& grads, AdamState<T>& state) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.tensor.shape(), T{0});
            state.v.emplace_back(p.tensor.shape(), T{0});
        }
    }
    if (state.m.size() != params.size()) throw ShapeError("adam_step: state tracks a different parameter list");
    const AdamConfig& c = state.config;
    const std::uint64_t t = state.step + 1;
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        const NdArray<T>* g = grads.find(params[i].tensor);
        if (!g) continue;  // not reachable from the loss
        if (!g->all_finite()) throw NumericError("adam_step: non-finite gradient for parameter " + params[i].name);
        NdArray<T>& w = params[i].tensor.mutable_value();
        NdArray<T>& m = state.m[i];
        NdArray<T>& v = state.v[i];
        if (m.shape() != w.shape()) throw ShapeError("adam_step: moment shape mismatch for " + params[i].name);
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double gj = static_cast<double>((*g)[j]);
            const double mj = c.beta1 * static_cast<double>(m[j]) + (1.0 - c.beta1) * gj;
            const double vj = c.beta2 * static_cast<double>(v[j]) + (1.0 - c.beta2) * gj * gj;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            const double update = c.lr * (mj / bc1) / (std::sqrt(vj / bc2) + c.eps);
            w[j] = static_cast<T>(static_cast<double>(w[j]) - update);
        }
    }
    state.step = t;
}

template class Network<float>;
template class Network<double>;
template void adam_step<float>(std::span<Parameter<float>>, const ad::Gradients<float>&, AdamState<float>&);
template void adam_step<double>(std::span<Parameter<double>>, const ad::Gradients<double>&, AdamState<double>&);

} // namespace dcl::nn
