// Acceptance run: one PASS/FAIL line per criterion on stdout, details on stderr.
//
//   dcl_acceptance [--work DIR] [--only 1,5,10]
//
// Expects to run from the source root (configs/ and data/ are relative).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dcl/cluster.hpp"
#include "dcl/config.hpp"
#include "dcl/data.hpp"
#include "dcl/eval.hpp"
#include "dcl/gradsuite.hpp"
#include "dcl/rng.hpp"
#include "dcl/runner.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dcl;

namespace {

// Pinned tolerances.
constexpr double kGradSeconds = 60.0;
constexpr double kIdentityTol = 1e-9;
constexpr double kRoundingSlack = 1e-12;  // H(Y) <= ln k at an exactly uniform marginal
constexpr double kVatNormTol = 1e-6;
constexpr double kVatOptimalRatio = 0.95;
constexpr double kGaussAcc = 0.95;
constexpr double kGaussSeconds = 180.0;
constexpr double kDropPoints = 0.10;
constexpr double kMnistAcc = 0.60;
constexpr double kSobelSlack = 0.02;
// Final-10% mean |sobel - no-sobel| of a loss trace, and the cap on any loss value.
constexpr double kTraceGap = 1.0;
constexpr double kLossCap = 10.0;
// Tolerance used for the delta > 0 arm on the 0.7/0.2/0.1 mixture; covers
// ln 3 - H(0.7, 0.2, 0.1) = 0.297.
constexpr double kImbalanceDelta = 0.3;

const std::vector<std::uint64_t> kSeeds = {1, 2, 3, 4, 5};

int g_failures = 0;

void say(int criterion, bool pass, const std::string& detail) {
    g_failures += !pass;
    std::printf("criterion %d: %s  %s\n", criterion, pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
}

template <class... A>
std::string fmt(const char* f, A... a) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

std::string list(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : " ") + fmt("%.3f", x);
    return s;
}

config::RunConfig preset(const fs::path& file, std::vector<std::string> sets, std::uint64_t seed, const fs::path& out) {
    sets.push_back("seed=" + std::to_string(seed));
    sets.push_back("out=" + out.string());
    return config::load(&file, sets);
}

double report_acc(const fs::path& out) {
    std::ifstream in(out / "report.json");
    return json::parse(in).at("acc").get<double>();
}

/// Records after the leading {"config": ...} line.
std::vector<json> read_log(const fs::path& path) {
    std::ifstream in(path);
    std::vector<json> rows;
    std::string line;
    while (std::getline(in, line)) {
        auto j = json::parse(line);
        if (!j.contains("config")) rows.push_back(std::move(j));
    }
    return rows;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

bool finite_numbers(const json& j) {
    if (j.is_number()) return std::isfinite(j.get<double>());
    if (j.is_structured())
        for (const auto& v : j)
            if (!finite_numbers(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------

void criterion_1() {
    const auto t0 = std::chrono::steady_clock::now();
    double worst_d = 0, worst_f = 0;
    bool ok = true;
    for (std::uint64_t seed : {0, 1, 2}) {
        const auto r = gradsuite::run(seed);
        for (const auto& c : r.cases)
            if (!c.passed) std::fprintf(stderr, "  grad case '%s' seed %llu: %.3e / %.3e\n", c.name.c_str(),
                                        static_cast<unsigned long long>(seed), c.double_error, c.float_error);
        worst_d = std::max(worst_d, r.max_double_error);
        worst_f = std::max(worst_f, r.max_float_error);
        ok = ok && r.passed;
    }
    const double secs = seconds_since(t0);
    ok = ok && worst_d <= gradsuite::kDoubleTolerance && worst_f <= gradsuite::kFloatTolerance && secs < kGradSeconds;
    say(1, ok, fmt("max rel err %.2e double (<= %.0e), %.2e single (<= %.0e), %.2fs for 3 seeds", worst_d,
                   gradsuite::kDoubleTolerance, worst_f, gradsuite::kFloatTolerance, secs));
}

void criterion_2() {
    Rng rng(derive_seed(2024, 2));
    std::uniform_int_distribution<std::size_t> kd(2, 12), bd(1, 32), mode(0, 3);
    std::normal_distribution<double> g;
    double worst_identity = 0, worst_lib = 0, min_cond = 1e300, max_marginal_excess = -1e300;
    for (int trial = 0; trial < 10000; ++trial) {
        const std::size_t k = kd(rng), b = bd(rng);
        const double scale = std::exp(3.0 * g(rng));
        const auto how = mode(rng);
        NdArray<double> p({b, k});
        std::vector<double> logits(k);
        for (std::size_t i = 0; i < b; ++i) {
            for (auto& l : logits) l = scale * g(rng);
            const double top = *std::max_element(logits.begin(), logits.end());
            double z = 0;
            for (std::size_t c = 0; c < k; ++c) {
                double v = std::exp(logits[c] - top);
                if (how == 1) v = c == i % k;  // one-hot rows
                if (how == 2) v = 1;           // uniform rows
                p(i, c) = v;
                z += v;
            }
            for (std::size_t c = 0; c < k; ++c) p(i, c) /= z;
        }
        // Independent reference in long double.
        std::vector<long double> pbar(k, 0);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t c = 0; c < k; ++c) pbar[c] += p(i, c);
        long double kl = 0, h = 0;
        for (auto& v : pbar) {
            v /= static_cast<long double>(b);
            if (v > 0) {
                kl += v * std::log(v * static_cast<long double>(k));
                h -= v * std::log(v);
            }
        }
        const long double log_k = std::log(static_cast<long double>(k));
        worst_identity = std::max(worst_identity, static_cast<double>(std::fabs(kl - (log_k - h))));

        const auto t = ad::constant(p);
        const double lib_kl = cluster::marginal_kl(t).value()[0];
        const double lib_h = cluster::conditional_entropy(t).value()[0];
        worst_lib = std::max(worst_lib, std::fabs(lib_kl - static_cast<double>(log_k - h)));
        min_cond = std::min(min_cond, lib_h);
        max_marginal_excess = std::max({max_marginal_excess, static_cast<double>(h - log_k), -lib_kl});
    }
    const bool ok = worst_identity <= kIdentityTol && worst_lib <= kIdentityTol && min_cond >= 0 &&
                    max_marginal_excess <= kRoundingSlack;
    say(2, ok, fmt("1e4 draws: |KL-(ln k-H)| ref %.1e lib %.1e (<= %.0e); min H(Y|X) %.2e; max H(Y)-ln k %.1e (<= %.0e)",
                   worst_identity, worst_lib, kIdentityTol, min_cond + 0.0, max_marginal_excess, kRoundingSlack));
}

void criterion_3() {
    // Norm contract on a random bank, including zero rows.
    Rng rng(derive_seed(2024, 3));
    std::normal_distribution<double> g;
    const std::size_t b = 40, d = 6;
    auto cfg = cluster::default_bank(3, 2, 1, {8, 8});
    cfg.init_std = 0.5;
    const cluster::ClusterBank<double> bank(d, cfg, 17);
    NdArray<double> m({b, d});
    for (auto& v : m.values()) v = g(rng);
    for (std::size_t j = 0; j < d; ++j) m(5, j) = 0;
    std::vector<NdArray<double>> targets;
    {
        ad::Tape<double> tape;
        for (const auto& t : bank.forward(ad::constant(m), true)) targets.push_back(t.value());
    }
    cluster::PerturbSpec spec;
    spec.replicas = 3;
    const auto r = cluster::vat_perturbation_bank(bank, m, targets, spec, 99);
    double worst_norm = 0;
    for (std::size_t row = 0; row < r.dim(0); ++row) {
        const std::size_t i = row % b;
        double rn = 0, mn = 0;
        for (std::size_t j = 0; j < d; ++j) {
            rn += r(row, j) * r(row, j);
            mn += m(i, j) * m(i, j);
        }
        worst_norm = std::max(worst_norm, std::fabs(std::sqrt(rn) - spec.alpha_adv * std::sqrt(mn)));
    }

    // Two-class linear softmax in the plane: r_adv against a 3600-angle search at the same radius.
    // The sign-selected variant is reported alongside; the verdict uses the training default.
    struct Ratio {
        double sum = 0, min = 1e300;
        std::size_t rows = 0;
        double mean() const { return sum / static_cast<double>(rows); }
    };
    Ratio plain, signed_;
    cluster::PerturbSpec with_sign;
    with_sign.select_sign = true;
    for (int trial = 0; trial < 20; ++trial) {
        NdArray<double> w({2, 2}), bias({2});
        for (auto& v : w.values()) v = 2 * g(rng);
        for (auto& v : bias.values()) v = g(rng);
        const cluster::Predictor<double> predict = [&](const ad::Tensor<double>& x) {
            return ad::softmax(ad::add_bias(ad::matmul(x, ad::constant(w)), ad::constant(bias)), 1);
        };
        const std::size_t n = 50;
        NdArray<double> x({n, 2});
        for (auto& v : x.values()) v = g(rng);
        const auto target = predict(ad::constant(x)).value();
        const auto dirs = cluster::random_directions<double>(n, 2, 11, static_cast<std::uint64_t>(trial));
        const auto row_kl = [&](std::size_t i, double dx, double dy) {
            NdArray<double> xi({1, 2});
            xi(0, 0) = x(i, 0) + dx;
            xi(0, 1) = x(i, 1) + dy;
            const auto q = predict(ad::constant(xi)).value();
            double s = 0;
            for (std::size_t c = 0; c < 2; ++c) s += target(i, c) * std::log(target(i, c) / q(0, c));
            return s;
        };
        for (auto [spec, out] : {std::pair{cluster::PerturbSpec{}, &plain}, std::pair{with_sign, &signed_}}) {
            const auto ra = cluster::vat_perturbation<double>(predict, x, target, dirs, spec);
            for (std::size_t i = 0; i < n; ++i) {
                const double eps = std::hypot(ra(i, 0), ra(i, 1));
                double best = 0;
                for (int a = 0; a < 3600; ++a) {
                    const double t = 2 * M_PI * a / 3600;
                    best = std::max(best, row_kl(i, eps * std::cos(t), eps * std::sin(t)));
                }
                if (best < 1e-14) continue;
                const double ratio = row_kl(i, ra(i, 0), ra(i, 1)) / best;
                out->sum += ratio;
                out->min = std::min(out->min, ratio);
                ++out->rows;
            }
        }
    }
    const bool ok = worst_norm <= kVatNormTol && plain.mean() >= kVatOptimalRatio;
    say(3, ok,
        fmt("max | ||r|| - a||m|| | %.1e (<= %.0e); toy KL/optimal mean %.4f (>= %.2f), min %.4f over %zu rows; "
            "with sign selection %.4f, min %.4f",
            worst_norm, kVatNormTol, plain.mean(), kVatOptimalRatio, plain.min, plain.rows, signed_.mean(), signed_.min));
}

void criterion_4() {
    Rng rng(derive_seed(2024, 4));
    std::uniform_int_distribution<std::uint32_t> kd(1, 6);
    std::uniform_int_distribution<std::size_t> nd(1, 300);
    int mismatches = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::uint32_t kp = kd(rng), kt = kd(rng);
        const std::size_t n = nd(rng);
        std::vector<std::uint32_t> pred(n), truth(n);
        // Correlated draws so the optimum is not trivial.
        std::uniform_int_distribution<std::uint32_t> pu(0, kp - 1), tu(0, kt - 1), coin(0, 2);
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = tu(rng);
            pred[i] = coin(rng) ? (truth[i] * 7 + 3) % kp : pu(rng);
        }
        const std::uint32_t k = std::max(kp, kt);
        std::vector<std::uint64_t> table(k * k, 0);
        for (std::size_t i = 0; i < n; ++i) ++table[pred[i] * k + truth[i]];
        std::vector<std::uint32_t> perm(k);
        std::iota(perm.begin(), perm.end(), 0u);
        std::uint64_t best = 0;
        do {
            std::uint64_t hit = 0;
            for (std::uint32_t c = 0; c < k; ++c) hit += table[c * k + perm[c]];
            best = std::max(best, hit);
        } while (std::next_permutation(perm.begin(), perm.end()));
        const double expected = static_cast<double>(best) / static_cast<double>(n);
        const double got = eval::clustering_accuracy(pred, truth).acc;
        if (got != expected) {
            ++mismatches;
            std::fprintf(stderr, "  contingency %d: got %.17g, brute force %.17g\n", trial, got, expected);
        }
    }
    say(4, mismatches == 0, fmt("%d of 100 random contingencies (k <= 6) differ from brute force", mismatches));
}

struct GaussRuns {
    std::vector<double> acc;
    std::vector<double> secs;
};

GaussRuns criterion_5(const fs::path& work) {
    GaussRuns g;
    for (auto seed : kSeeds) {
        const auto out = work / "gauss" / std::to_string(seed);
        const auto t0 = std::chrono::steady_clock::now();
        runner::run("pipeline", preset("configs/gauss-3.cfg", {}, seed, out));
        g.secs.push_back(seconds_since(t0));
        g.acc.push_back(report_acc(out));
        std::fprintf(stderr, "  gauss-3 seed %llu: acc %.4f, %.1fs\n", static_cast<unsigned long long>(seed),
                     g.acc.back(), g.secs.back());
    }
    const auto good = std::count_if(g.acc.begin(), g.acc.end(), [](double a) { return a >= kGaussAcc; });
    const double slowest = *std::max_element(g.secs.begin(), g.secs.end());
    say(5, good >= 4 && slowest < kGaussSeconds,
        fmt("acc [%s]: %d/5 >= %.2f (need 4); slowest run %.0fs (< %.0fs)", list(g.acc).c_str(), static_cast<int>(good),
            kGaussAcc, slowest, kGaussSeconds));
    return g;
}

void criterion_6(const fs::path& work) {
    const std::string weights = "synth_weights=0.7,0.2,0.1";
    const std::string wide = "delta_scale=" + fmt("%.17g", kImbalanceDelta / std::log(3.0));
    struct Arm {
        const char* name;
        std::vector<std::string> sets;
        std::vector<double> acc;
    };
    std::vector<Arm> arms = {
        {"delta", {weights, wide}, {}},
        {"zero", {weights, "delta_scale=0", "overcluster_delta_scale=0"}, {}},
        {"single", {weights, wide, "primary_heads=1", "overcluster_heads=0"}, {}},
    };
    for (auto& arm : arms)
        for (auto seed : kSeeds) {
            const auto out = work / "imbalanced" / arm.name / std::to_string(seed);
            runner::run("pipeline", preset("configs/gauss-3.cfg", arm.sets, seed, out));
            arm.acc.push_back(report_acc(out));
            std::fprintf(stderr, "  imbalanced %s seed %llu: acc %.4f\n", arm.name, static_cast<unsigned long long>(seed),
                         arm.acc.back());
        }
    const double with_delta = mean(arms[0].acc), without = mean(arms[1].acc), single = mean(arms[2].acc);
    say(6, with_delta >= without && with_delta >= single,
        fmt("mean acc delta=%.2f %.5f vs delta=0 %.5f; multi-head %.5f vs single-head %.5f (need >= in both)",
            kImbalanceDelta, with_delta, without, with_delta, single));
}

void criterion_7(const fs::path& work, const GaussRuns& balanced) {
    std::vector<double> dropped;
    for (std::size_t s = 0; s < kSeeds.size(); ++s) {
        const auto seed = kSeeds[s];
        const auto src = work / "gauss" / std::to_string(seed);
        const auto out = work / "drop40" / std::to_string(seed);
        fs::create_directories(out);
        const auto m = data::read_features(src / "features.dcfm");
        const auto labels = data::read_labels(src / "labels.dclb");
        const std::vector<std::uint32_t> classes = {0};
        const auto kept = eval::drop_rows(labels, classes, 0.4, derive_seed(seed, 40));
        data::FeatureMatrix sub;
        sub.values = NdArray<float>({kept.size(), m.cols()});
        std::vector<std::uint32_t> sub_labels;
        for (std::size_t r = 0; r < kept.size(); ++r) {
            for (std::size_t j = 0; j < m.cols(); ++j) sub.values(r, j) = m.values(kept[r], j);
            sub_labels.push_back(labels[kept[r]]);
        }
        data::write_features(out / "features.dcfm", sub);
        data::write_labels(out / "labels.dclb", sub_labels);
        const auto c = preset("configs/gauss-3.cfg", {"features=" + (out / "features.dcfm").string(),
                                                      "labels=" + (out / "labels.dclb").string()},
                              seed, out);
        runner::run("cluster", c);
        runner::run("evaluate", c);
        dropped.push_back(report_acc(out));
        std::fprintf(stderr, "  40%% drop seed %llu: acc %.4f (balanced %.4f)\n", static_cast<unsigned long long>(seed),
                     dropped.back(), balanced.acc[s]);
    }
    const double loss = mean(balanced.acc) - mean(dropped);
    say(7, loss < kDropPoints,
        fmt("mean acc 0%% drop %.4f, 40%% drop %.4f: degradation %.1f points (< %.0f)", mean(balanced.acc),
            mean(dropped), 100 * loss, 100 * kDropPoints));
}

struct MnistRun {
    std::vector<json> gan_log;
    fs::path out;
};

std::vector<MnistRun> criterion_8(const fs::path& work) {
    std::vector<MnistRun> runs;
    std::vector<double> acc;
    int tail_zero = 0;
    bool finite = true;
    for (auto seed : kSeeds) {
        MnistRun run{{}, work / "mnist" / std::to_string(seed)};
        runner::run("pipeline", preset("configs/mnist-mini.cfg", {}, seed, run.out));
        acc.push_back(report_acc(run.out));
        run.gan_log = read_log(run.out / "gan_log.jsonl");
        for (const auto& r : run.gan_log) finite = finite && finite_numbers(r);
        for (const auto& r : read_log(run.out / "cluster_log.jsonl")) finite = finite && finite_numbers(r);
        const std::size_t n = run.gan_log.size();
        bool zero = n > 0;
        for (std::size_t i = n - std::max<std::size_t>(n / 10, 1); i < n; ++i)
            zero = zero && run.gan_log[i].at("penalty").get<double>() == 0.0;
        tail_zero += zero;
        std::fprintf(stderr, "  mnist-mini seed %llu: acc %.4f, penalty zero over final 10%%: %s\n",
                     static_cast<unsigned long long>(seed), acc.back(), zero ? "yes" : "no");
        runs.push_back(std::move(run));
    }
    const auto good = std::count_if(acc.begin(), acc.end(), [](double a) { return a >= kMnistAcc; });
    say(8, good >= 4 && finite,
        fmt("acc [%s]: %d/5 >= %.2f (need 4); losses finite: %s; penalty zero in final 10%%: %d/5 (soft, need 3)",
            list(acc).c_str(), static_cast<int>(good), kMnistAcc, finite ? "yes" : "no", tail_zero));
    return runs;
}

/// Fraction of rows whose nearest class centroid is their own class.
double nearest_centroid_acc(const data::FeatureMatrix& m, const std::vector<std::uint32_t>& labels) {
    const std::size_t d = m.cols();
    const std::size_t k = *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<double> centroid(k * d, 0.0);
    std::vector<std::size_t> count(k, 0);
    for (std::size_t i = 0; i < m.rows(); ++i) {
        ++count[labels[i]];
        for (std::size_t j = 0; j < d; ++j) centroid[labels[i] * d + j] += m.values(i, j);
    }
    for (std::size_t c = 0; c < k; ++c)
        for (std::size_t j = 0; j < d; ++j) centroid[c * d + j] /= static_cast<double>(std::max<std::size_t>(count[c], 1));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < m.rows(); ++i) {
        std::size_t best = 0;
        double best_dist = 1e300;
        for (std::size_t c = 0; c < k; ++c) {
            double dist = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const double e = m.values(i, j) - centroid[c * d + j];
                dist += e * e;
            }
            if (dist < best_dist) best_dist = dist, best = c;
        }
        hit += best == labels[i];
    }
    return static_cast<double>(hit) / static_cast<double>(m.rows());
}

void criterion_9(const fs::path& work, const std::vector<MnistRun>& sobel_runs) {
    std::vector<double> with, without, d_gap, g_gap;
    double peak = 0;
    bool finite = true;
    for (std::size_t s = 0; s < kSeeds.size(); ++s) {
        const auto out = work / "mnist-nosobel" / std::to_string(kSeeds[s]);
        const auto c = preset("configs/mnist-mini.cfg", {"sobel=false"}, kSeeds[s], out);
        runner::run("train-gan", c);
        runner::run("extract", c);
        const auto labels = data::read_labels(out / "labels.dclb");
        with.push_back(nearest_centroid_acc(data::read_features(sobel_runs[s].out / "features.dcfm"), labels));
        without.push_back(nearest_centroid_acc(data::read_features(out / "features.dcfm"), labels));

        const auto& a = sobel_runs[s].gan_log;
        const auto b = read_log(out / "gan_log.jsonl");
        const std::size_t n = std::min(a.size(), b.size());
        for (std::size_t i = 0; i < n; ++i)
            for (const char* key : {"d_loss", "g_loss"}) {
                const double x = a[i].at(key).get<double>(), y = b[i].at(key).get<double>();
                finite = finite && std::isfinite(x) && std::isfinite(y);
                peak = std::max({peak, std::fabs(x), std::fabs(y)});
            }
        double dg = 0, gg = 0;
        const std::size_t tail = std::max<std::size_t>(n / 10, 1);
        for (std::size_t i = n - tail; i < n; ++i) {
            dg += std::fabs(a[i].at("d_loss").get<double>() - b[i].at("d_loss").get<double>());
            gg += std::fabs(a[i].at("g_loss").get<double>() - b[i].at("g_loss").get<double>());
        }
        d_gap.push_back(dg / static_cast<double>(tail));
        g_gap.push_back(gg / static_cast<double>(tail));
        std::fprintf(stderr, "  sobel ablation seed %llu: centroid acc %.4f vs %.4f, tail gap d %.3f g %.3f\n",
                     static_cast<unsigned long long>(kSeeds[s]), with.back(), without.back(), d_gap.back(), g_gap.back());
    }
    const double gap = std::max(mean(d_gap), mean(g_gap));
    const bool ok = finite && peak <= kLossCap && gap <= kTraceGap && mean(with) >= mean(without) - kSobelSlack;
    say(9, ok,
        fmt("centroid acc sobel %.4f vs none %.4f (>= -%.0f points); tail loss gap %.3f (<= %.1f); peak |loss| %.2f (<= %.0f)",
            mean(with), mean(without), 100 * kSobelSlack, gap, kTraceGap, peak, kLossCap));
}

void criterion_10(const fs::path& work) {
    ::setenv("DCL_THREADS", "1", 1);
    const std::vector<std::string> logs = {"metrics.jsonl", "gan_log.jsonl", "cluster_log.jsonl", "report.json"};
    int differing = 0, compared = 0;
    const auto check = [&](const char* cfg, const std::vector<std::string>& sets, const fs::path& out) {
        std::vector<std::string> first;
        for (int rep = 0; rep < 2; ++rep) {
            fs::remove_all(out);
            runner::run("pipeline", preset(cfg, sets, 7, out));
            for (std::size_t i = 0; i < logs.size(); ++i) {
                if (!fs::exists(out / logs[i])) continue;
                if (rep == 0) {
                    first.resize(logs.size());
                    first[i] = slurp(out / logs[i]);
                } else {
                    ++compared;
                    if (slurp(out / logs[i]) != first[i]) {
                        ++differing;
                        std::fprintf(stderr, "  %s differs between repeats\n", (out / logs[i]).c_str());
                    }
                }
            }
        }
    };
    check("configs/smoke.cfg", {}, work / "repeat" / "smoke");
    check("configs/gauss-3.cfg", {"cluster_epochs=3", "synth_n=600"}, work / "repeat" / "gauss");
    say(10, differing == 0 && compared == 7,
        fmt("%d of %d log files differ across repeated pipeline runs (DCL_THREADS=1)", differing, compared));
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Runs the acceptance criteria and prints one PASS/FAIL line for each."};
    std::string work = "build/acceptance";
    std::vector<int> only;
    app.add_option("--work", work, "Scratch directory for run outputs");
    app.add_option("--only", only, "Criteria to run (default: all)")->delimiter(',');
    CLI11_PARSE(app, argc, argv);
    const std::set<int> chosen(only.begin(), only.end());
    const auto want = [&](int n) { return chosen.empty() || chosen.count(n) > 0; };
    const fs::path root(work);
    fs::create_directories(root);

    // `needed`: also run when a later criterion reuses the outputs.
    const auto guarded = [&](int n, const std::function<void()>& body, bool needed = false) {
        if (!want(n) && !needed) return;
        try {
            body();
        } catch (const std::exception& e) {
            say(n, false, std::string("error: ") + e.what());
        }
    };

    guarded(1, criterion_1);
    guarded(2, criterion_2);
    guarded(3, criterion_3);
    guarded(4, criterion_4);
    GaussRuns gauss;
    guarded(5, [&] { gauss = criterion_5(root); }, want(7));
    guarded(6, [&] { criterion_6(root); });
    guarded(7, [&] { criterion_7(root, gauss); });
    std::vector<MnistRun> mnist;
    guarded(8, [&] { mnist = criterion_8(root); }, want(9));
    guarded(9, [&] { criterion_9(root, mnist); });
    guarded(10, [&] { criterion_10(root); });
    return g_failures == 0 ? 0 : 1;
}
