#include <random>

#include "doctest.h"
#include "dcl/error.hpp"
#include "dcl/gradcheck.hpp"
#include "dcl/sobel.hpp"

using namespace dcl;
using namespace dcl::ad;

TEST_CASE("kernel constants") {
    for (int r = 0; r < 3; ++r) {
        CHECK(sobel::kx[r * 3] + sobel::kx[r * 3 + 1] + sobel::kx[r * 3 + 2] == 0.0);
        for (int c = 0; c < 3; ++c) CHECK(sobel::ky[r * 3 + c] == sobel::kx[c * 3 + r]);
    }
    CHECK(sobel::gray_weights[0] + sobel::gray_weights[1] + sobel::gray_weights[2] == doctest::Approx(1.0));
}

TEST_CASE("rgb_to_gray") {
    auto px = constant(NdArray<double>({1, 3, 1, 1}, {0.2, 0.4, 0.6}));
    CHECK(sobel::rgb_to_gray(px).item() == doctest::Approx(0.3630).epsilon(1e-12));
    auto red = constant(NdArray<double>({1, 3, 1, 1}, {1.0, 0.0, 0.0}));
    CHECK(sobel::rgb_to_gray(red).item() == doctest::Approx(0.299));
    auto grey = constant(NdArray<double>({2, 3, 4, 4}, 0.7));
    auto g = sobel::rgb_to_gray(grey);
    for (double v : g.value().values()) CHECK(v == doctest::Approx(0.7));
    CHECK_THROWS_AS(sobel::rgb_to_gray(constant(NdArray<double>({1, 1, 2, 2}, 0.0))), ShapeError);
}

TEST_CASE("sobel_edges on a horizontal ramp and a constant image") {
    NdArray<double> ramp({1, 1, 5, 6});
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 6; ++c) ramp(0, 0, r, c) = static_cast<double>(c);
    auto e = sobel::sobel_edges(constant(ramp)).value();
    REQUIRE(e.shape() == Shape{1, 2, 5, 6});
    for (std::size_t r = 1; r < 4; ++r)
        for (std::size_t c = 1; c < 5; ++c) {
            CHECK(e(0, 0, r, c) == 8.0);
            CHECK(e(0, 1, r, c) == 0.0);
        }
    auto flat = sobel::sobel_edges(constant(NdArray<double>({1, 1, 4, 4}, 3.0))).value();
    for (std::size_t ch = 0; ch < 2; ++ch)
        for (std::size_t r = 1; r < 3; ++r)
            for (std::size_t c = 1; c < 3; ++c) CHECK(flat(0, ch, r, c) == 0.0);
}

TEST_CASE("transposing the image swaps dx and dy") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 1);
    NdArray<double> img({1, 1, 5, 5}), tr({1, 1, 5, 5});
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) img(0, 0, r, c) = u(rng);
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) tr(0, 0, r, c) = img(0, 0, c, r);
    auto a = sobel::sobel_edges(constant(img)).value();
    auto b = sobel::sobel_edges(constant(tr)).value();
    for (std::size_t r = 0; r < 5; ++r)
        for (std::size_t c = 0; c < 5; ++c) {
            CHECK(a(0, 0, r, c) == doctest::Approx(b(0, 1, c, r)));
            CHECK(a(0, 1, r, c) == doctest::Approx(b(0, 0, c, r)));
        }
}

TEST_CASE("sobel_edges is linear") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-1, 1);
    NdArray<double> img({2, 1, 6, 6});
    for (auto& v : img.values()) v = u(rng);
    auto scaled = img;
    for (auto& v : scaled.values()) v *= 2.5;
    auto a = sobel::sobel_edges(constant(img)).value();
    auto b = sobel::sobel_edges(constant(scaled)).value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(b[i] == doctest::Approx(2.5 * a[i]));
}

TEST_CASE("augment_input channel flow") {
    CHECK(sobel::augment_input(constant(NdArray<float>({2, 3, 32, 32}, 0.0f))).shape() == Shape{2, 5, 32, 32});
    auto gray = sobel::augment_input(constant(NdArray<float>({1, 1, 24, 24}, 0.0f)));
    CHECK(gray.shape() == Shape{1, 3, 24, 24});
    for (float v : gray.value().values()) CHECK(v == 0.0f);
    CHECK_THROWS_AS(sobel::augment_input(constant(NdArray<float>({1, 2, 4, 4}, 0.0f))), ShapeError);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> u(-1, 1);
    NdArray<float> img({2, 3, 5, 4});
    for (auto& v : img.values()) v = u(rng);
    auto out = sobel::augment_input(constant(img)).value();
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t c = 0; c < 3; ++c)
            for (std::size_t r = 0; r < 5; ++r)
                for (std::size_t k = 0; k < 4; ++k) CHECK(out(n, c, r, k) == img(n, c, r, k));
}

TEST_CASE("augment_input passes gradients") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1, 1);
    NdArray<double> img({2, 3, 4, 5}), w({2, 5, 4, 5});
    for (auto& v : img.values()) v = u(rng);
    for (auto& v : w.values()) v = u(rng);
    std::vector<Tensor<double>> params{parameter(img)};
    auto r = gradient_check<double>([&](auto p) { return sum(mul(sobel::augment_input(p[0]), constant(w))); }, params,
                                    1e-5);
    CHECK(r.max_rel_error <= 1e-6);
}
