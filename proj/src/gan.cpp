#include "dcl/gan.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "dcl/error.hpp"

namespace dcl::gan {

using nn::Act;
using nn::LayerSpec;

Architecture make_architecture(const std::string& preset, std::size_t latent_dim, bool sobel, double dropout_rate,
                               double init_std, std::size_t channels) {
    if (latent_dim == 0) throw ConfigError("latent_dim must be >= 1");
    Architecture a;
    a.name = preset;
    a.latent_dim = latent_dim;
    const auto lrelu = LayerSpec::act(Act::leaky_relu, 0.2);
    auto& d = a.discriminator;
    auto& g = a.generator;
    if (sobel) d.push_back(LayerSpec::sobel());

    if (preset.rfind("toy-", 0) == 0) {
        std::size_t n = 0;
        try {
            n = std::stoul(preset.substr(4));
        } catch (const std::exception&) {
            throw ConfigError("bad toy preset '" + preset + "'");
        }
        if (n < 4 || n % 2 != 0) throw ConfigError("toy preset size must be even and >= 4, got '" + preset + "'");
        const std::size_t c = channels == 0 ? 1 : channels;
        a.image_shape = {c, n, n};
        a.feature_dim = 64;
        d.insert(d.end(), {LayerSpec::conv(16, 4, 2, init_std), lrelu, LayerSpec::dropout(dropout_rate),
                           LayerSpec::conv(32, 4, 2, init_std), LayerSpec::batchnorm(), lrelu,
                           LayerSpec::dropout(dropout_rate), LayerSpec::flatten(),
                           LayerSpec::dense(a.feature_dim, init_std).tapped(), lrelu, LayerSpec::dense(1, init_std),
                           LayerSpec::act(Act::sigmoid)});
        const std::size_t h = n / 2;
        g = {LayerSpec::dense(32 * h * h, init_std),
             LayerSpec::batchnorm(),
             lrelu,
             LayerSpec::reshape({32, h, h}),
             LayerSpec::transposed_conv(16, 4, 2, init_std),
             LayerSpec::batchnorm(),
             lrelu,
             LayerSpec::transposed_conv(c, 4, 1, init_std),
             LayerSpec::act(Act::tanh)};
        return a;
    }

    std::size_t c1, c2, c3, side, fc;
    std::size_t c = 3;
    if (preset == "mnist-24") {
        c = 1, side = 24, c1 = 32, c2 = 64, c3 = 128, fc = 0;
    } else if (preset == "cifar-32") {
        side = 32, c1 = 64, c2 = 128, c3 = 256, fc = 1024;
    } else if (preset == "stl-48") {
        side = 48, c1 = 64, c2 = 128, c3 = 256, fc = 1024;
    } else {
        throw ConfigError("unknown architecture preset '" + preset + "'");
    }
    if (channels != 0) c = channels;
    a.image_shape = {c, side, side};
    d.insert(d.end(), {LayerSpec::conv(c1, 4, 2, init_std), lrelu, LayerSpec::dropout(dropout_rate),
                       LayerSpec::conv(c2, 4, 2, init_std), LayerSpec::batchnorm(), lrelu,
                       LayerSpec::dropout(dropout_rate), LayerSpec::conv(c3, 4, 2, init_std), LayerSpec::batchnorm()});
    const std::size_t s3 = side / 8;
    if (fc == 0) {
        a.feature_dim = c3 * s3 * s3;
        d.insert(d.end(), {LayerSpec::flatten().tapped(), lrelu, LayerSpec::dropout(dropout_rate),
                           LayerSpec::dense(1, init_std), LayerSpec::act(Act::sigmoid)});
    } else {
        a.feature_dim = fc;
        d.insert(d.end(), {lrelu, LayerSpec::dropout(dropout_rate), LayerSpec::flatten(),
                           LayerSpec::dense(fc, init_std).tapped(), lrelu, LayerSpec::dense(1, init_std),
                           LayerSpec::act(Act::sigmoid)});
    }
    g = {LayerSpec::dense(c3 * s3 * s3, init_std),
         LayerSpec::batchnorm(),
         lrelu,
         LayerSpec::reshape({c3, s3, s3}),
         LayerSpec::transposed_conv(c2, 4, 2, init_std),
         LayerSpec::batchnorm(),
         lrelu,
         LayerSpec::transposed_conv(c1, 4, 2, init_std),
         LayerSpec::batchnorm(),
         lrelu,
         LayerSpec::transposed_conv(c, 4, 2, init_std),
         LayerSpec::act(Act::tanh)};
    return a;
}

void GanConfig::validate() const {
    if (iterations < 1) throw ConfigError("gan iterations must be >= 1");
    if (batch_size < 2) throw ConfigError("gan batch size must be >= 2");
    if (!(tau > 0)) throw ConfigError("tau must be positive");
    if (!(lr >= 0)) throw ConfigError("learning rate must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1)) throw ConfigError("beta1 must lie in [0,1)");
}

NdArray<float> sample_latent(std::size_t n, std::size_t dim, Rng& rng) {
    if (n == 0 || dim == 0) throw ConfigError("sample_latent needs n, dim >= 1");
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    NdArray<float> z({n, dim});
    for (auto& v : z.values()) v = u(rng);
    return z;
}

namespace {

template <class T>
std::size_t count_clamped(const NdArray<T>& p) {
    std::size_t n = 0;
    for (T v : p.values()) n += (v < kProbabilityClamp || v > 1.0 - kProbabilityClamp);
    return n;
}

} // namespace

template <class T>
ad::Tensor<T> flatten_penalty(const ad::Tensor<T>& m, T tau) {
    return ad::sum(ad::relu(ad::add_scalar(ad::abs(m), -tau)));
}

template <class T>
LossTerms<T> discriminator_loss(const ad::Tensor<T>& d_real, const ad::Tensor<T>& d_fake, const ad::Tensor<T>& m_real,
                                T tau) {
    const T floor = static_cast<T>(kProbabilityClamp);
    const auto one_minus_fake = ad::add_scalar(ad::scale(d_fake, T{-1}), T{1});
    const auto adv = ad::scale(ad::add(ad::mean(ad::log(d_real, floor)), ad::mean(ad::log(one_minus_fake, floor))), T{-1});
    return {ad::add(adv, flatten_penalty(m_real, tau)), count_clamped(d_real.value()) + count_clamped(d_fake.value())};
}

template <class T>
LossTerms<T> generator_loss(const ad::Tensor<T>& d_fake) {
    const T floor = static_cast<T>(kProbabilityClamp);
    return {ad::scale(ad::mean(ad::log(d_fake, floor)), T{-1}), count_clamped(d_fake.value())};
}

template ad::Tensor<float> flatten_penalty(const ad::Tensor<float>&, float);
template ad::Tensor<double> flatten_penalty(const ad::Tensor<double>&, double);
template LossTerms<float> discriminator_loss(const ad::Tensor<float>&, const ad::Tensor<float>&,
                                             const ad::Tensor<float>&, float);
template LossTerms<double> discriminator_loss(const ad::Tensor<double>&, const ad::Tensor<double>&,
                                              const ad::Tensor<double>&, double);
template LossTerms<float> generator_loss(const ad::Tensor<float>&);
template LossTerms<double> generator_loss(const ad::Tensor<double>&);

// ---------------------------------------------------------------------------

namespace {

Architecture checked_architecture(const GanConfig& c, const Shape& image_shape) {
    c.validate();
    Architecture a = make_architecture(c.preset, c.latent_dim, c.sobel, c.dropout_rate, c.init_std, image_shape.at(0));
    if (a.image_shape != image_shape)
        throw ShapeError("preset '" + c.preset + "' expects images of " + shape_str(a.image_shape) + ", got " +
                         shape_str(image_shape));
    for (auto& l : a.discriminator)
        if (l.kind == nn::LayerKind::activation && l.activation == Act::leaky_relu) l.slope = c.leaky_slope;
    for (auto& l : a.generator)
        if (l.kind == nn::LayerKind::activation && l.activation == Act::leaky_relu) l.slope = c.leaky_slope;
    return a;
}

void require_finite(double v, const char* what, std::size_t it) {
    if (!std::isfinite(v))
        throw NumericError(std::string("non-finite ") + what + " at GAN iteration " + std::to_string(it));
}

void load_state(nn::Network<float>& net, const std::string& prefix, const data::NamedArrays& blobs) {
    std::unordered_map<std::string, const NdArray<float>*> by_name;
    for (const auto& [name, arr] : blobs) by_name[name] = &arr;
    for (auto& [name, dst] : net.state()) {
        auto it = by_name.find(prefix + name);
        if (it == by_name.end()) throw FormatError("checkpoint is missing '" + prefix + name + "'");
        if (it->second->shape() != dst->shape())
            throw FormatError("checkpoint blob '" + prefix + name + "' has shape " + shape_str(it->second->shape()) +
                              ", expected " + shape_str(dst->shape()));
        *dst = *it->second;
    }
}

} // namespace

GanTrainer::GanTrainer(GanConfig config, Shape image_shape)
    : config_(std::move(config)), arch_(checked_architecture(config_, image_shape)),
      d_("discriminator", arch_.discriminator, arch_.image_shape, derive_seed(config_.seed, 1)),
      g_("generator", arch_.generator, {arch_.latent_dim}, derive_seed(config_.seed, 2)),
      rng_(derive_seed(config_.seed, 3)) {
    if (g_.output_shape() != arch_.image_shape)
        throw ShapeError("generator produces " + shape_str(g_.output_shape()) + ", expected " +
                         shape_str(arch_.image_shape));
    const nn::AdamConfig adam{config_.lr, config_.beta1, 0.999, 1e-8};
    d_opt_.config = adam;
    g_opt_.config = adam;
}

StepLosses GanTrainer::train_step(const NdArray<float>& real) {
    const std::size_t b = real.dim(0);
    const float tau = static_cast<float>(config_.tau);
    const std::uint64_t step_seed = derive_seed(config_.seed, 1000 + iteration_);
    StepLosses out;
    out.iteration = iteration_;

    nn::ForwardOptions g_opts;
    g_opts.seed = derive_seed(step_seed, 1);

    // Discriminator: ascend log D(x) + log(1 - D(G(z))), minus the flatten penalty.
    {
        const auto fake = g_.forward(ad::constant(sample_latent(b, arch_.latent_dim, rng_)), g_opts).output;
        ad::Tape<float> tape;
        nn::ForwardOptions real_opts;
        real_opts.seed = derive_seed(step_seed, 2);
        real_opts.update_running_stats = true;
        nn::ForwardOptions fake_opts;
        fake_opts.seed = derive_seed(step_seed, 3);
        const auto r = d_.forward(ad::constant(real), real_opts);
        const auto f = d_.forward(ad::detach(fake), fake_opts);
        const auto terms = discriminator_loss(r.output, f.output, r.tap, tau);
        out.d_loss = terms.loss.item();
        out.penalty = flatten_penalty(ad::detach(r.tap), tau).item();
        out.clamped += terms.clamped;
        out.d_real = ad::mean(ad::detach(r.output)).item();
        out.d_fake = ad::mean(ad::detach(f.output)).item();
        for (float v : r.tap.value().values()) out.m_abs_max = std::max(out.m_abs_max, static_cast<double>(std::abs(v)));
        require_finite(out.d_loss, "discriminator loss", iteration_);
        const auto grads = ad::backward(terms.loss, tape);
        nn::adam_step<float>(d_.parameters(), grads, d_opt_);
    }
    // Generator: ascend log D(G(z)) on a fresh latent batch.
    {
        ad::Tape<float> tape;
        g_opts.seed = derive_seed(step_seed, 4);
        const auto fake = g_.forward(ad::constant(sample_latent(b, arch_.latent_dim, rng_)), g_opts).output;
        nn::ForwardOptions d_opts;
        d_opts.seed = derive_seed(step_seed, 5);
        const auto f = d_.forward(fake, d_opts);
        const auto terms = generator_loss(f.output);
        out.g_loss = terms.loss.item();
        out.clamped += terms.clamped;
        require_finite(out.g_loss, "generator loss", iteration_);
        const auto grads = ad::backward(terms.loss, tape);
        nn::adam_step<float>(g_.parameters(), grads, g_opt_);
    }
    ++iteration_;
    history_.push_back(out);
    return out;
}

void GanTrainer::train(const data::ImageDataset& ds, const std::function<void(const StepLosses&)>& on_step) {
    if (ds.sample_shape() != arch_.image_shape)
        throw ShapeError("dataset images are " + shape_str(ds.sample_shape()) + ", preset expects " +
                         shape_str(arch_.image_shape));
    const std::size_t n = ds.size();
    const std::size_t b = std::min(config_.batch_size, n);
    if (b < 2) throw ConfigError("dataset too small for a GAN batch");
    const std::size_t stride = shape_numel(arch_.image_shape);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = n;
    Shape batch_shape{b};
    batch_shape.insert(batch_shape.end(), arch_.image_shape.begin(), arch_.image_shape.end());
    NdArray<float> batch(batch_shape);
    while (iteration_ < config_.iterations) {
        if (cursor + b > n) {
            std::shuffle(order.begin(), order.end(), rng_);
            cursor = 0;
        }
        for (std::size_t i = 0; i < b; ++i)
            std::copy_n(ds.images.data() + order[cursor + i] * stride, stride, batch.data() + i * stride);
        cursor += b;
        const StepLosses s = train_step(batch);
        if (on_step) on_step(s);
    }
}

data::NamedArrays GanTrainer::checkpoint() {
    data::NamedArrays out;
    for (auto& [name, arr] : d_.state()) out.emplace_back(name, *arr);
    for (auto& [name, arr] : g_.state()) out.emplace_back(name, *arr);
    return out;
}

void GanTrainer::load_checkpoint(const data::NamedArrays& blobs) {
    load_state(d_, "", blobs);
    load_state(g_, "", blobs);
}

nn::Network<float> load_discriminator(const GanConfig& config, const Shape& image_shape, const data::NamedArrays& blobs) {
    const Architecture a = checked_architecture(config, image_shape);
    nn::Network<float> d("discriminator", a.discriminator, a.image_shape, derive_seed(config.seed, 1));
    load_state(d, "", blobs);
    return d;
}

} // namespace dcl::gan
