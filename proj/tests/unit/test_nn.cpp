#include <cmath>
#include <random>

#include "doctest.h"
#include "dcl/error.hpp"
#include "dcl/nn.hpp"

using namespace dcl;
using namespace dcl::nn;

TEST_CASE("adam first step from the closed form") {
    std::vector<Parameter<double>> params{{"w", ad::parameter(NdArray<double>::scalar(1.0))}};
    AdamState<double> st;
    st.config = {1e-4, 0.5, 0.999, 1e-8};
    {
        ad::Tape<double> tape;
        auto g = ad::backward(ad::sum(params[0].tensor), tape);
        adam_step<double>(params, g, st);
    }
    CHECK(params[0].tensor.item() == doctest::Approx(1.0 - 1e-4 / (1.0 + 1e-8)).epsilon(1e-14));
    CHECK(st.step == 1);
    const double after_one = params[0].tensor.item();
    {
        ad::Tape<double> tape;
        auto g = ad::backward(ad::sum(params[0].tensor), tape);
        adam_step<double>(params, g, st);
    }
    CHECK(params[0].tensor.item() < after_one);
    CHECK(st.step == 2);
    CHECK(st.m[0].shape() == params[0].tensor.shape());
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
    std::vector<Parameter<double>> params{{"w", ad::parameter(NdArray<double>({3}, {1.0, -2.0, 0.5}))}};
    AdamState<double> st;
    ad::Tape<double> tape;
    auto g = ad::backward(ad::scale(ad::sum(params[0].tensor), 0.0), tape);
    adam_step<double>(params, g, st);
    CHECK(params[0].tensor.value() == NdArray<double>({3}, {1.0, -2.0, 0.5}));
}

TEST_CASE("layer spec validation") {
    CHECK_THROWS_AS(LayerSpec::dropout(1.0).validate(), ConfigError);
    CHECK_THROWS_AS(LayerSpec::act(Act::leaky_relu, 1.0).validate(), ConfigError);
    CHECK_THROWS_AS(LayerSpec::conv(4, 3, 0).validate(), ConfigError);
    CHECK_NOTHROW(LayerSpec::conv(4, 3, 2).validate());
}

TEST_CASE("network shape inference, tap, and determinism") {
    std::vector<LayerSpec> layers{LayerSpec::sobel(),
                                  LayerSpec::conv(8, 4, 2),
                                  LayerSpec::act(Act::leaky_relu),
                                  LayerSpec::dropout(0.2),
                                  LayerSpec::conv(16, 4, 2),
                                  LayerSpec::batchnorm(),
                                  LayerSpec::act(Act::leaky_relu),
                                  LayerSpec::flatten(),
                                  LayerSpec::dense(10).tapped(),
                                  LayerSpec::act(Act::leaky_relu),
                                  LayerSpec::dense(1),
                                  LayerSpec::act(Act::sigmoid)};
    Network<float> a("d", layers, {1, 12, 12}, 7);
    Network<float> b("d", layers, {1, 12, 12}, 7);
    CHECK(a.shape_after(0) == Shape{3, 12, 12});
    CHECK(a.shape_after(1) == Shape{8, 6, 6});
    CHECK(a.shape_after(7) == Shape{144});
    CHECK(a.output_shape() == Shape{1});
    CHECK(a.tap_layer() == std::optional<std::size_t>(8));

    NdArray<float> x({4, 1, 12, 12});
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(-1, 1);
    for (auto& v : x.values()) v = u(rng);
    ForwardOptions opt;
    opt.seed = 3;
    auto oa = a.forward(ad::constant(x), opt);
    auto ob = b.forward(ad::constant(x), opt);
    CHECK(oa.output.value() == ob.output.value());
    CHECK(oa.tap.shape() == Shape{4, 10});
    for (float p : oa.output.value().values()) {
        CHECK(p > 0.0f);
        CHECK(p < 1.0f);
    }
    CHECK_THROWS_AS(a.forward(ad::constant(NdArray<float>({4, 1, 10, 10}, 0.0f)), opt), ShapeError);
}

TEST_CASE("batchnorm training output is standardized and updates running stats") {
    Network<double> net("n", {LayerSpec::batchnorm()}, {3}, 1, 0.5);
    NdArray<double> x({64, 3});
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(5.0, 3.0);
    for (auto& v : x.values()) v = g(rng);
    ForwardOptions opt;
    opt.update_running_stats = true;
    auto y = net.forward(ad::constant(x), opt).output.value();
    for (std::size_t c = 0; c < 3; ++c) {
        double m = 0, s = 0;
        for (std::size_t r = 0; r < 64; ++r) m += y(r, c);
        m /= 64;
        for (std::size_t r = 0; r < 64; ++r) s += (y(r, c) - m) * (y(r, c) - m);
        s /= 64;
        CHECK(std::abs(m) <= 1e-4);
        CHECK(std::abs(s - 1.0) <= 1e-4);
    }
    auto st = net.state();
    REQUIRE(st.size() == 4);
    CHECK(st[2].first == "n.0.running_mean");
    CHECK((*st[2].second)[0] > 1.0);  // moved halfway toward the batch mean
}

TEST_CASE("dropout layers are inactive at inference unless overridden") {
    Network<float> net("n", {LayerSpec::dropout(0.5)}, {100}, 1);
    NdArray<float> x({10, 100}, 1.0f);
    ForwardOptions eval;
    eval.training = false;
    CHECK(net.forward(ad::constant(x), eval).output.value() == x);
    eval.dropout_rate = 0.1;
    CHECK(!(net.forward(ad::constant(x), eval).output.value() == x));
}
