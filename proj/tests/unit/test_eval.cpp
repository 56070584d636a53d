#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "doctest.h"
#include "dcl/error.hpp"
#include "dcl/eval.hpp"

using namespace dcl;
using namespace dcl::eval;

namespace {

double brute_force_acc(const std::vector<std::uint32_t>& pred, const std::vector<std::uint32_t>& truth) {
    const Contingency c = contingency(pred, truth);
    std::vector<std::size_t> perm(c.k);
    std::iota(perm.begin(), perm.end(), 0);
    std::uint64_t best = 0;
    do {
        std::uint64_t s = 0;
        for (std::size_t p = 0; p < c.k; ++p) s += c.at(p, perm[p]);
        best = std::max(best, s);
    } while (std::next_permutation(perm.begin(), perm.end()));
    return static_cast<double>(best) / static_cast<double>(c.total);
}

} // namespace

TEST_CASE("hungarian: small examples") {
    CHECK(hungarian_match(std::vector<double>{1, 2, 2, 1}, 2, 2) == std::vector<std::size_t>{0, 1});
    CHECK(hungarian_match(std::vector<double>{0, 9, 9, 9, 0, 9, 9, 9, 0}, 3, 3) == std::vector<std::size_t>{0, 1, 2});
    CHECK(hungarian_match(std::vector<double>{5, 0, 0, 5}, 2, 2) == std::vector<std::size_t>{1, 0});
    CHECK_THROWS_AS(hungarian_match(std::vector<double>{1, 2, 3, 4, 5, 6}, 2, 3), ShapeError);
    CHECK_THROWS_AS(hungarian_match(std::vector<double>{1, NAN, 3, 4}, 2, 2), NumericError);
    CHECK(hungarian_match(std::vector<double>{}, 0, 0).empty());
}

TEST_CASE("hungarian matches exhaustive search on random costs") {
    Rng rng(11);
    std::uniform_int_distribution<int> u(0, 20);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 1 + trial % 6;
        std::vector<double> cost(k * k);
        for (auto& c : cost) c = u(rng);
        const auto a = hungarian_match(cost, k, k);
        double got = 0;
        for (std::size_t i = 0; i < k; ++i) got += cost[i * k + a[i]];
        std::vector<std::size_t> perm(k);
        std::iota(perm.begin(), perm.end(), 0);
        double best = 1e300;
        do {
            double s = 0;
            for (std::size_t i = 0; i < k; ++i) s += cost[i * k + perm[i]];
            best = std::min(best, s);
        } while (std::next_permutation(perm.begin(), perm.end()));
        CHECK(got == best);
        std::vector<std::size_t> sorted = a;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < k; ++i) CHECK(sorted[i] == i);
    }
}

TEST_CASE("clustering accuracy: frozen examples") {
    // Contingency [[3,1],[2,4]]: best matching 3 + 4 of 10.
    std::vector<std::uint32_t> pred, truth;
    auto add = [&](std::uint32_t p, std::uint32_t t, int n) {
        for (int i = 0; i < n; ++i) pred.push_back(p), truth.push_back(t);
    };
    add(0, 0, 3), add(0, 1, 1), add(1, 0, 2), add(1, 1, 4);
    const auto r = clustering_accuracy(pred, truth);
    CHECK(r.acc == doctest::Approx(0.7));
    CHECK(r.mapping == std::vector<std::uint32_t>{0, 1});
    CHECK(r.per_class[0] == doctest::Approx(0.6));
    CHECK(r.per_class[1] == doctest::Approx(0.8));
    CHECK(r.confusion == std::vector<std::uint64_t>{3, 2, 1, 4});

    const std::vector<std::uint32_t> t{0, 0, 1, 1, 2, 2, 2};
    CHECK(clustering_accuracy(t, t).acc == 1.0);
    const std::vector<std::uint32_t> relabeled{2, 2, 0, 0, 1, 1, 1};
    const auto rr = clustering_accuracy(relabeled, t);
    CHECK(rr.acc == 1.0);
    CHECK(rr.mapping == std::vector<std::uint32_t>{1, 2, 0});

    // Constant predictor scores the majority frequency; the contingency is padded.
    const std::vector<std::uint32_t> zeros(7, 0);
    const auto rc = clustering_accuracy(zeros, t);
    CHECK(rc.acc == doctest::Approx(3.0 / 7.0));
    CHECK(rc.k == 3);

    CHECK_THROWS_AS(clustering_accuracy(std::vector<std::uint32_t>{0, 1}, std::vector<std::uint32_t>{0}), ShapeError);
    CHECK_THROWS_AS(clustering_accuracy(std::vector<std::uint32_t>{}, std::vector<std::uint32_t>{}), ShapeError);
}

TEST_CASE("clustering accuracy equals brute force and is relabeling-invariant") {
    Rng rng(5);
    for (int trial = 0; trial < 40; ++trial) {
        const std::uint32_t k = 2 + trial % 5;
        std::uniform_int_distribution<std::uint32_t> lab(0, k - 1);
        std::vector<std::uint32_t> pred(60), truth(60);
        for (auto& v : truth) v = lab(rng);
        for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = (rng() % 3 == 0) ? lab(rng) : truth[i];
        const auto r = clustering_accuracy(pred, truth);
        CHECK(r.acc == brute_force_acc(pred, truth));
        std::vector<std::uint32_t> perm(k);
        std::iota(perm.begin(), perm.end(), 0u);
        std::shuffle(perm.begin(), perm.end(), rng);
        std::vector<std::uint32_t> relabeled(pred.size());
        for (std::size_t i = 0; i < pred.size(); ++i) relabeled[i] = perm[pred[i]];
        CHECK(clustering_accuracy(relabeled, truth).acc == r.acc);
        std::uint64_t diag = 0;
        for (std::size_t c = 0; c < r.k; ++c) diag += r.confusion[c * r.k + c];
        CHECK(static_cast<double>(diag) / 60.0 == doctest::Approx(r.acc));
    }
}

TEST_CASE("report json") {
    const std::vector<std::uint32_t> t{0, 1, 1};
    const auto s = report_json(clustering_accuracy(t, t));
    CHECK(s.find("\"acc\": 1.0") != std::string::npos);
    CHECK(s.find("\"mapping\"") != std::string::npos);
}

TEST_CASE("tolerance schedules") {
    CHECK(schedule_deltas(DeltaSchedule::constant, 0.3).primary == 1e-4);
    CHECK(schedule_deltas(DeltaSchedule::constant, 0.3).overcluster == 1e-2);
    CHECK(schedule_deltas(DeltaSchedule::variable, 0.0).primary == 1e-4);
    CHECK(schedule_deltas(DeltaSchedule::variable, 0.1).overcluster == 2e-2);
    CHECK(schedule_deltas(DeltaSchedule::variable, 0.2).primary == 1e-3);
    CHECK(schedule_deltas(DeltaSchedule::variable, 0.3).overcluster == 5e-2);
    CHECK(schedule_deltas(DeltaSchedule::variable, 0.4).primary == 2e-3);
    CHECK_THROWS_AS(schedule_deltas(DeltaSchedule::variable, 0.25), ConfigError);
    CHECK_THROWS_AS(schedule_deltas(DeltaSchedule::constant, 1.0), ConfigError);
}

TEST_CASE("drop rows") {
    std::vector<std::uint32_t> labels;
    for (int i = 0; i < 100; ++i) labels.push_back(static_cast<std::uint32_t>(i % 3));
    const std::vector<std::uint32_t> cls{1};
    CHECK(drop_rows(labels, cls, 0.0, 1).size() == 100);
    const auto kept = drop_rows(labels, cls, 0.4, 1);
    CHECK(kept.size() == 100 - 13);  // class 1 has 33 rows, floor(0.4 * 33) = 13
    CHECK(std::is_sorted(kept.begin(), kept.end()));
    CHECK(kept == drop_rows(labels, cls, 0.4, 1));
    CHECK_FALSE(kept == drop_rows(labels, cls, 0.4, 2));
    std::size_t c0 = 0;
    for (auto i : kept) c0 += labels[i] == 0;
    CHECK(c0 == 34);
    CHECK_THROWS_AS(drop_rows(labels, cls, 1.0, 1), ConfigError);
    CHECK_THROWS_AS(drop_rows(labels, std::vector<std::uint32_t>{7}, 0.1, 1), ConfigError);
}

TEST_CASE("pca2 recovers the dominant axis") {
    NdArray<float> m({200, 3});
    Rng rng(2);
    std::normal_distribution<float> g;
    for (std::size_t i = 0; i < 200; ++i) {
        const float t = g(rng);
        m(i, 0) = 10 * t;
        m(i, 1) = 0.1f * g(rng);
        m(i, 2) = 10 * t + 0.1f * g(rng);
    }
    const auto xy = pca2(m);
    double var0 = 0, var1 = 0;
    for (std::size_t i = 0; i < 200; ++i) var0 += xy(i, 0) * xy(i, 0), var1 += xy(i, 1) * xy(i, 1);
    CHECK(var0 > 1000 * var1);
}
