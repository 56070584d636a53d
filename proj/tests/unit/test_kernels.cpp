#include <random>
#include <vector>

#include "doctest.h"
#include "dcl/rng.hpp"
#include "kernels.hpp"

using namespace dcl;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<float> g;
    std::vector<float> v(n);
    for (auto& x : v) x = g(rng);
    return v;
}

} // namespace

TEST_CASE("gemm rows are bit-identical whatever the row count") {
    for (std::size_t n : {1u, 3u, 15u, 16u, 40u}) {
        for (std::size_t k : {5u, 64u, 300u}) {
            const std::size_t m = 37;
            const auto a = random_vec(m * k, 1), b = random_vec(k * n, 2), c0 = random_vec(m * n, 3);
            std::vector<float> full = c0;
            kernels::gemm_nn(m, n, k, a.data(), b.data(), full.data(), true);
            for (std::size_t i = 0; i < m; ++i) {
                std::vector<float> row(c0.begin() + i * n, c0.begin() + (i + 1) * n);
                kernels::gemm_nn<float>(1, n, k, a.data() + i * k, b.data(), row.data(), true);
                for (std::size_t j = 0; j < n; ++j) REQUIRE(row[j] == full[i * n + j]);
            }
        }
    }
}

TEST_CASE("gemm variants agree with a reference product") {
    const std::size_t m = 20, n = 7, k = 33;
    const auto a = random_vec(m * k, 4), b = random_vec(k * n, 5);
    std::vector<double> ref(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t p = 0; p < k; ++p) ref[i * n + j] += double(a[i * k + p]) * b[p * n + j];
    std::vector<float> c(m * n), at(k * m), bt(n * k);
    kernels::gemm_nn(m, n, k, a.data(), b.data(), c.data(), false);
    for (std::size_t i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    kernels::transpose(m, k, a.data(), at.data());
    kernels::transpose(k, n, b.data(), bt.data());
    kernels::gemm_tn(m, n, k, at.data(), b.data(), c.data(), false);
    for (std::size_t i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    kernels::gemm_nt(m, n, k, a.data(), bt.data(), c.data(), false);
    for (std::size_t i = 0; i < m * n; ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-5));
    CHECK(kernels::dot(a.data(), a.data(), 0) == 0.0f);
}
