#include <cmath>
#include <random>

#include "doctest.h"
#include "dcl/error.hpp"
#include "dcl/gan.hpp"

using namespace dcl;
using namespace dcl::gan;

namespace {

NdArray<float> random_images(std::size_t n, const Shape& s, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_real_distribution<float> u(-1, 1);
    NdArray<float> x({n, s[0], s[1], s[2]});
    for (auto& v : x.values()) v = u(rng);
    return x;
}

GanConfig tiny_config(std::uint64_t seed) {
    GanConfig c;
    c.preset = "toy-8";
    c.latent_dim = 8;
    c.batch_size = 8;
    c.iterations = 3;
    c.seed = seed;
    return c;
}

} // namespace

TEST_CASE("latent samples") {
    Rng a(1), b(1);
    auto z = sample_latent(4, 100, a);
    CHECK(z.shape() == Shape{4, 100});
    for (float v : z.values()) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
    CHECK(sample_latent(4, 100, b) == z);
    Rng c(2);
    auto big = sample_latent(100000, 1, c);
    double m = 0;
    for (float v : big.values()) m += v;
    CHECK(std::abs(m / 100000) <= 0.01);
}

TEST_CASE("discriminator and generator losses") {
    using ad::constant;
    auto half = constant(NdArray<double>({4, 1}, 0.5));
    auto m_small = constant(NdArray<double>({4, 3}, 19.0));
    CHECK(discriminator_loss(half, half, m_small, 20.0).loss.item() == doctest::Approx(2 * std::log(2.0)));
    auto m_row = constant(NdArray<double>({1, 2}, {10.0, -25.0}));
    CHECK(flatten_penalty(m_row, 20.0).item() == doctest::Approx(5.0));
    CHECK(flatten_penalty(m_small, 20.0).item() == 0.0);

    auto near_one = constant(NdArray<double>({2, 1}, 1.0 - 1e-9));
    auto near_zero = constant(NdArray<double>({2, 1}, 1e-9));
    auto perfect = discriminator_loss(near_one, near_zero, m_small, 20.0);
    CHECK(perfect.loss.item() < 1e-6);
    CHECK(perfect.clamped == 4);

    CHECK(generator_loss(constant(NdArray<double>({1, 1}, 1.0))).loss.item() == doctest::Approx(0.0));
    CHECK(generator_loss(half).loss.item() == doctest::Approx(std::log(2.0)));
    CHECK(generator_loss(constant(NdArray<double>({2, 1}, {0.25, 0.75}))).loss.item() ==
          doctest::Approx(0.8370).epsilon(1e-4));
    CHECK(generator_loss(constant(NdArray<double>({1, 1}, 0.0))).clamped == 1);
}

TEST_CASE("architecture presets follow the discriminator table") {
    auto mn = make_architecture("mnist-24", 100);
    nn::Network<float> d("d", mn.discriminator, mn.image_shape, 0);
    CHECK(mn.feature_dim == 1152);
    CHECK(d.shape_after(1) == Shape{32, 12, 12});
    CHECK(d.shape_after(*d.tap_layer()) == Shape{1152});
    CHECK(d.parameter_count() > 160000);
    CHECK(d.parameter_count() < 175000);
    nn::Network<float> g("g", mn.generator, {100}, 0);
    CHECK(g.output_shape() == Shape{1, 24, 24});

    auto cf = make_architecture("cifar-32", 100);
    nn::Network<float> dc("d", cf.discriminator, cf.image_shape, 0);
    CHECK(cf.feature_dim == 1024);
    CHECK(dc.shape_after(0) == Shape{5, 32, 32});
    CHECK(dc.shape_after(*dc.tap_layer()) == Shape{1024});
    CHECK(std::abs(static_cast<double>(dc.parameter_count()) - 4.85e6) < 0.05e6);

    auto st = make_architecture("stl-48", 100);
    nn::Network<float> gs("g", st.generator, {100}, 0);
    CHECK(gs.output_shape() == Shape{3, 48, 48});

    auto toy = make_architecture("toy-14", 32, false);
    CHECK(toy.image_shape == Shape{1, 14, 14});
    CHECK(toy.discriminator.front().kind == nn::LayerKind::conv);
    CHECK_THROWS_AS(make_architecture("toy-7", 8), ConfigError);
    CHECK_THROWS_AS(make_architecture("imagenet", 8), ConfigError);
}

TEST_CASE("config validation") {
    GanConfig c = tiny_config(0);
    c.batch_size = 1;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config(0);
    c.tau = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = tiny_config(0);
    c.iterations = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    CHECK_THROWS_AS(GanTrainer(tiny_config(0), Shape{1, 10, 10}), ShapeError);
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
    GanConfig c = tiny_config(4);
    c.lr = 0.0;
    GanTrainer t(c, {1, 8, 8});
    auto before = t.checkpoint();
    auto s = t.train_step(random_images(8, {1, 8, 8}, 1));
    CHECK(std::isfinite(s.d_loss));
    CHECK(std::isfinite(s.g_loss));
    auto after = t.checkpoint();
    for (std::size_t i = 0; i < before.size(); ++i) {
        if (before[i].first.find("running") != std::string::npos) continue;
        CHECK(before[i].second == after[i].second);
    }
}

TEST_CASE("training is deterministic per seed") {
    data::ImageDataset ds{random_images(40, {1, 8, 8}, 9), {}, ""};
    GanTrainer a(tiny_config(5), {1, 8, 8}), b(tiny_config(5), {1, 8, 8});
    a.train(ds);
    b.train(ds);
    REQUIRE(a.history().size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(a.history()[i].d_loss == b.history()[i].d_loss);
        CHECK(a.history()[i].g_loss == b.history()[i].g_loss);
    }
}

TEST_CASE("generator gradient flows through the edge front-end") {
    GanTrainer t(tiny_config(6), {1, 8, 8});
    ad::Tape<float> tape;
    Rng rng(3);
    nn::ForwardOptions opt;
    auto fake = t.generator().forward(ad::constant(sample_latent(8, 8, rng)), opt).output;
    auto loss = generator_loss(t.discriminator().forward(fake, opt).output).loss;
    auto grads = ad::backward(loss, tape);
    double norm = 0;
    for (const auto& p : t.generator().parameters())
        for (float v : grads.of(p.tensor).values()) norm += static_cast<double>(v) * v;
    CHECK(norm > 0.0);
}

TEST_CASE("adversarial gradient on the output bias vanishes at the 0.5 equilibrium") {
    GanTrainer t(tiny_config(7), {1, 8, 8});
    auto& params = t.discriminator().parameters();
    auto& w = params[params.size() - 2].tensor.mutable_value();  // output dense weight
    w.fill(0.0f);
    ad::Tape<float> tape;
    nn::ForwardOptions opt;
    auto r = t.discriminator().forward(ad::constant(random_images(8, {1, 8, 8}, 1)), opt);
    auto f = t.discriminator().forward(ad::constant(random_images(8, {1, 8, 8}, 2)), opt);
    auto loss = discriminator_loss(r.output, f.output, r.tap, 20.0f).loss;
    CHECK(loss.item() == doctest::Approx(2 * std::log(2.0)).epsilon(1e-5));
    auto grads = ad::backward(loss, tape);
    CHECK(std::abs(grads.of(params.back().tensor)[0]) < 1e-6);
}

TEST_CASE("checkpoint round-trip restores the discriminator") {
    data::ImageDataset ds{random_images(16, {1, 8, 8}, 3), {}, ""};
    GanTrainer t(tiny_config(8), {1, 8, 8});
    t.train(ds);
    auto blobs = t.checkpoint();
    auto d = load_discriminator(tiny_config(99), {1, 8, 8}, blobs);
    nn::ForwardOptions eval;
    eval.training = false;
    auto x = ad::constant(random_images(4, {1, 8, 8}, 4));
    CHECK(d.forward(x, eval).tap.value() == t.discriminator().forward(x, eval).tap.value());
    blobs.pop_back();
    GanTrainer u(tiny_config(8), {1, 8, 8});
    CHECK_THROWS_AS(u.load_checkpoint(blobs), FormatError);
}
