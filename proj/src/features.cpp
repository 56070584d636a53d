#include "dcl/features.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <thread>

#include "dcl/error.hpp"

namespace dcl::features {

unsigned thread_count() {
    const char* env = std::getenv("DCL_THREADS");
    if (!env) return 1;
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) return 1;
    return static_cast<unsigned>(std::min<long>(v, 256));
}

data::FeatureMatrix extract_features(nn::Network<float>& discriminator, const data::ImageDataset& ds,
                                     double dropout_rate, std::uint64_t seed, std::size_t batch_size,
                                     unsigned threads) {
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("feature dropout rate must lie in [0,1)");
    if (!discriminator.tap_layer()) throw ConfigError("discriminator has no tapped feature layer");
    const Shape& in = discriminator.input_shape();
    if (ds.images.rank() != 4 || !std::equal(in.begin(), in.end(), ds.images.shape().begin() + 1))
        throw ShapeError("discriminator expects images of " + shape_str(in) + ", dataset has " +
                         shape_str(ds.images.shape()));
    if (batch_size == 0) throw ConfigError("feature batch size must be positive");
    const std::size_t n = ds.images.dim(0);
    const std::size_t d = shape_numel(discriminator.shape_after(*discriminator.tap_layer()));
    const std::size_t pixels = shape_numel(in);

    data::FeatureMatrix out;
    out.values = NdArray<float>({n, d});
    out.dropout_rate = static_cast<float>(dropout_rate);
    out.seed = seed;

    const std::size_t batches = (n + batch_size - 1) / batch_size;
    auto run = [&](std::size_t b) {
        const std::size_t s = b * batch_size, e = std::min(n, s + batch_size);
        Shape shape{e - s};
        shape.insert(shape.end(), in.begin(), in.end());
        NdArray<float> x(std::move(shape));
        std::copy_n(ds.images.data() + s * pixels, (e - s) * pixels, x.data());
        nn::ForwardOptions opt;
        opt.training = false;
        opt.dropout_rate = dropout_rate;
        opt.seed = seed;
        opt.row_offset = s;
        const auto res = discriminator.forward(ad::constant(std::move(x)), opt);
        std::copy_n(res.tap.value().data(), (e - s) * d, out.values.data() + s * d);
    };

    if (threads == 0) threads = thread_count();
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, batches));
    if (threads <= 1) {
        for (std::size_t b = 0; b < batches; ++b) run(b);
    } else {
        // Interleaved batches per worker; each writes a disjoint row range.
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t b = t; b < batches; b += threads) run(b);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& err : errors)
            if (err) std::rethrow_exception(err);
    }
    if (!out.values.all_finite()) throw NumericError("extract_features: non-finite feature values");
    return out;
}

} // namespace dcl::features
