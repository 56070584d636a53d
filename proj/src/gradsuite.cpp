#include "dcl/gradsuite.hpp"

#include <algorithm>
#include <functional>
#include <random>

#include "dcl/autodiff.hpp"
#include "dcl/cluster.hpp"
#include "dcl/gan.hpp"
#include "dcl/gradcheck.hpp"
#include "dcl/rng.hpp"
#include "dcl/sobel.hpp"

namespace dcl::gradsuite {

namespace {

using ad::Tensor;

template <class T>
struct Setup {
    ad::LossFn<T> loss;
    std::vector<Tensor<T>> params;
};

// Values drawn in double so both precisions see the same point.
template <class T>
NdArray<T> uniform(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
    std::uniform_real_distribution<double> u(lo, hi);
    NdArray<T> a(std::move(shape));
    for (auto& v : a.values()) v = static_cast<T>(u(rng));
    return a;
}

// Magnitudes in [lo, hi] with random sign, keeping clear of kinks at 0.
template <class T>
NdArray<T> away_from_zero(Shape shape, Rng& rng, double lo = 0.2, double hi = 1) {
    auto a = uniform<T>(std::move(shape), rng, lo, hi);
    for (auto& v : a.values())
        if (rng() & 1) v = -v;
    return a;
}

// Weighted sum with fixed weights so every output element matters.
template <class T>
Tensor<T> probe(const Tensor<T>& y, std::uint64_t seed = 99) {
    Rng rng(seed);
    return ad::sum(ad::mul(y, ad::constant(uniform<T>(y.shape(), rng))));
}

template <class T>
Tensor<T> param(NdArray<T> v) {
    return ad::parameter(std::move(v));
}

template <class T>
Tensor<T> probs(const Tensor<T>& logits) {
    return ad::softmax(logits, 1);
}

template <class T>
using Maker = std::function<Setup<T>(Rng&)>;

struct Case {
    std::string name;
    Maker<double> make_double;
    Maker<float> make_float;
};

template <class F>
Case make_case(std::string name, F f) {
    return {std::move(name), [f](Rng& rng) { return f.template operator()<double>(rng); },
            [f](Rng& rng) { return f.template operator()<float>(rng); }};
}

using Grads = std::vector<std::vector<double>>;

template <class T>
Grads analytic(const ad::LossFn<T>& loss, const std::vector<Tensor<T>>& params) {
    ad::Gradients<T> g;
    {
        ad::Tape<T> tape;
        g = ad::backward(loss(params), tape);
    }
    Grads out;
    for (const auto& p : params) {
        const NdArray<T> v = g.of(p);
        out.emplace_back(v.values().begin(), v.values().end());
    }
    return out;
}

Grads numeric(const std::function<double()>& loss, const std::vector<NdArray<double>*>& values, double step) {
    Grads out;
    for (NdArray<double>* v : values) {
        std::vector<double> n(v->size());
        for (std::size_t i = 0; i < v->size(); ++i) {
            const double saved = (*v)[i];
            (*v)[i] = saved + step;
            const double up = loss();
            (*v)[i] = saved - step;
            const double down = loss();
            (*v)[i] = saved;
            n[i] = (up - down) / (2 * step);
        }
        out.push_back(std::move(n));
    }
    return out;
}

double worst_error(const Grads& a, const Grads& n) {
    double w = 0;
    for (std::size_t p = 0; p < a.size(); ++p) w = std::max(w, ad::relative_error(a[p], n[p]));
    return w;
}

struct Errors {
    double double_error = 0;
    double float_error = 0;
};

// Both precisions are compared against the double-precision central difference.
Errors check_case(const Case& c, std::uint64_t seed) {
    Rng rd(seed), rf(seed);
    Setup<double> sd = c.make_double(rd);
    const Setup<float> sf = c.make_float(rf);
    std::vector<NdArray<double>*> values;
    for (auto& p : sd.params) values.push_back(&p.mutable_value());
    const Grads n = numeric([&] { return sd.loss(sd.params).item(); }, values, 1e-5);
    return {worst_error(analytic(sd.loss, sd.params), n), worst_error(analytic(sf.loss, sf.params), n)};
}

cluster::BankConfig objective_bank() {
    cluster::BankConfig c;
    c.hidden = {5, 4};
    c.init_std = 0.5;
    // The second head's tolerance is far above its marginal KL, so its clamp is inactive.
    c.heads = {{3, 0.0, cluster::HeadRole::primary}, {3, 10.0, cluster::HeadRole::primary},
               {6, 0.0, cluster::HeadRole::overcluster}};
    return c;
}

template <class T>
Grads bank_gradient(const cluster::ClusterBank<T>& bank, const NdArray<T>& m, const NdArray<T>& mp,
                    const cluster::PerturbSpec& spec, T lambda, std::uint64_t seed) {
    ad::Gradients<T> g;
    {
        ad::Tape<T> tape;
        g = ad::backward(cluster::bank_loss(bank, m, mp, spec, lambda, seed).first, tape);
    }
    Grads out;
    for (const auto& p : bank.parameters()) {
        const NdArray<T> v = g.of(p.tensor);
        out.emplace_back(v.values().begin(), v.values().end());
    }
    return out;
}

NdArray<float> to_float(const NdArray<double>& a) {
    NdArray<float> f(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) f[i] = static_cast<float>(a[i]);
    return f;
}

// Analytic gradients come from bank_loss itself; the numeric reference is the
// same objective with the stop-gradient targets and perturbations held at
// their values for the unperturbed parameters.
Errors objective_errors(std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t b = 6, d = 3;
    cluster::ClusterBank<double> bank(d, objective_bank(), derive_seed(seed, 1));
    // Zero biases put rows whose previous layer is fully inactive exactly on a ReLU kink.
    for (auto& p : bank.parameters())
        if (p.name.ends_with("bias")) p.tensor.mutable_value() = uniform<double>(p.tensor.shape(), rng, -0.3, 0.3);
    const auto m = uniform<double>({b, d}, rng);
    auto mp = m;
    for (auto& v : mp.values()) v = 1.1 * v + 0.05;
    cluster::PerturbSpec spec;
    spec.replicas = 2;
    const double lambda = 0.2;
    const std::uint64_t vat_seed = derive_seed(seed, 2);

    const Grads a_double = bank_gradient(bank, m, mp, spec, lambda, vat_seed);
    const Grads a_float = bank_gradient(bank.cast<float>(), to_float(m), to_float(mp), spec, 0.2f, vat_seed);

    const std::size_t c = bank.head_count(), reps = spec.replicas;
    std::vector<NdArray<double>> targets;
    for (const auto& o : bank.forward(ad::constant(m))) targets.push_back(o.value());
    const NdArray<double> pert = cluster::vat_perturbation_bank(bank, m, targets, spec, vat_seed);
    NdArray<double> x_adv({c * reps * b, d});
    for (std::size_t blk = 0; blk < c * reps; ++blk)
        for (std::size_t i = 0; i < b * d; ++i) x_adv[blk * b * d + i] = m[i] + pert[blk * b * d + i];

    const auto frozen = [&]() {
        const auto t_clean = bank.trunk(ad::constant(m));
        const auto t_adv = bank.trunk(ad::constant(x_adv));
        const auto t_drop = bank.trunk(ad::constant(mp));
        double total = 0;
        for (std::size_t h = 0; h < c; ++h) {
            const auto target = ad::constant(targets[h]);
            const auto clean = bank.head(h, t_clean);
            const auto q = bank.head(h, ad::slice_rows(t_adv, h * reps * b, (h + 1) * reps * b));
            double r_sat = 0;
            for (std::size_t r = 0; r < reps; ++r)
                r_sat += cluster::kl_divergence(target, ad::slice_rows(q, r * b, (r + 1) * b)).item();
            r_sat /= static_cast<double>(reps);
            const double l_d = cluster::kl_divergence(target, bank.head(h, t_drop)).item();
            const double kl = cluster::marginal_kl(clean).item();
            const double h_cond = cluster::conditional_entropy(clean).item();
            total += 0.5 * r_sat + 0.5 * l_d + lambda * (std::max(kl - bank.config().heads[h].delta, 0.0) + h_cond);
        }
        return total / static_cast<double>(c);
    };
    std::vector<NdArray<double>*> values;
    for (auto& p : bank.parameters()) values.push_back(&p.tensor.mutable_value());
    const Grads n = numeric(frozen, values, 1e-4);
    return {worst_error(a_double, n), worst_error(a_float, n)};
}

std::vector<Case> primitive_cases() {
    return {
        make_case("add-sub-mul-scale", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return probe(ad::sub(ad::mul(ad::add(p[0], p[1]), p[0]), ad::add_scalar(ad::scale(p[1], T(2.5)), T(1)))); },
                            {param(uniform<T>({3, 4}, rng)), param(uniform<T>({3, 4}, rng))}};
        }),
        make_case("add_bias", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return ad::add(probe(ad::add_bias(p[0], p[1])), probe(ad::add_bias(p[2], p[1]), 7)); },
                            {param(uniform<T>({4, 3}, rng)), param(uniform<T>({3}, rng)), param(uniform<T>({2, 3, 2, 2}, rng))}};
        }),
        make_case("log", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return probe(ad::log(p[0], T(1e-12))); }, {param(uniform<T>({3, 3}, rng, 0.5, 2.0))}};
        }),
        make_case("abs", []<class T>(Rng& rng) -> Setup<T> { return Setup<T>{[](auto p) { return probe(ad::abs(p[0])); }, {param(away_from_zero<T>({3, 4}, rng))}}; }),
        make_case("relu", []<class T>(Rng& rng) -> Setup<T> { return Setup<T>{[](auto p) { return probe(ad::relu(p[0])); }, {param(away_from_zero<T>({3, 4}, rng))}}; }),
        make_case("leaky_relu", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return probe(ad::leaky_relu(p[0], T(0.2))); }, {param(away_from_zero<T>({3, 4}, rng))}};
        }),
        make_case("tanh", []<class T>(Rng& rng) -> Setup<T> { return Setup<T>{[](auto p) { return probe(ad::tanh(p[0])); }, {param(uniform<T>({3, 4}, rng, -2, 2))}}; }),
        make_case("sigmoid", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return probe(ad::sigmoid(p[0])); }, {param(uniform<T>({3, 4}, rng, -3, 3))}};
        }),
        make_case("sum-mean", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return ad::add(ad::sum(ad::mul(p[0], p[0])), ad::scale(ad::mean(ad::mul(p[0], p[0])), T(3))); },
                            {param(uniform<T>({3, 4}, rng))}};
        }),
        make_case("sum_axis-mean_axis", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return ad::add(probe(ad::sum_axis(p[0], 1)), probe(ad::mean_axis(p[0], 0), 5)); },
                            {param(uniform<T>({3, 4, 2}, rng))}};
        }),
        make_case("softmax", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return ad::add(probe(ad::softmax(p[0], 1)), probe(ad::softmax(p[0], 0), 3)); },
                            {param(uniform<T>({3, 4}, rng, -2, 2))}};
        }),
        make_case("concat-reshape-slice", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) {
                                const std::vector<Tensor<T>> rows{p[0], p[1]};
                                const auto c0 = ad::concat(std::span<const Tensor<T>>(rows), 0);
                                const std::vector<Tensor<T>> cols{p[0], ad::slice_rows(p[1], 0, 2)};
                                const auto c1 = ad::concat(std::span<const Tensor<T>>(cols), 1);
                                return ad::add(probe(ad::reshape(ad::slice_rows(c0, 1, 4), Shape{3, 2})), probe(c1, 4));
                            },
                            {param(uniform<T>({2, 2}, rng)), param(uniform<T>({2, 2}, rng))}};
        }),
        make_case("matmul", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return probe(ad::matmul(p[0], p[1])); },
                            {param(uniform<T>({3, 5}, rng)), param(uniform<T>({5, 2}, rng))}};
        }),
        make_case("conv2d", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) {
                                return ad::add(probe(ad::conv2d(p[0], p[1], 2, ad::Padding::same)),
                                               probe(ad::conv2d(p[0], p[2], 1, ad::Padding::valid), 3));
                            },
                            {param(uniform<T>({2, 2, 5, 5}, rng)), param(uniform<T>({3, 2, 4, 4}, rng)),
                             param(uniform<T>({2, 2, 3, 3}, rng))}};
        }),
        make_case("conv_transpose2d", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) {
                                return ad::add(probe(ad::conv_transpose2d(p[0], p[1], 2, ad::Padding::same)),
                                               probe(ad::conv_transpose2d(p[0], p[2], 1, ad::Padding::valid), 3));
                            },
                            {param(uniform<T>({2, 3, 3, 3}, rng)), param(uniform<T>({3, 2, 4, 4}, rng)),
                             param(uniform<T>({3, 1, 3, 3}, rng))}};
        }),
        make_case("batch_norm", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) {
                                return ad::add(probe(ad::batch_norm(p[0], p[1], p[2], T(1e-5))),
                                               probe(ad::batch_norm(p[3], p[1], p[2], T(1e-5)), 3));
                            },
                            {param(uniform<T>({5, 3}, rng)), param(uniform<T>({3}, rng, 0.5, 1.5)), param(uniform<T>({3}, rng)),
                             param(uniform<T>({2, 3, 2, 2}, rng))}};
        }),
        make_case("batch_norm_inference", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) {
                                const std::vector<T> mu{T(0.1), T(-0.2), T(0.3)}, var{T(0.5), T(1.5), T(2)};
                                return probe(ad::batch_norm_inference(p[0], p[1], p[2], std::span<const T>(mu),
                                                                      std::span<const T>(var), T(1e-5)));
                            },
                            {param(uniform<T>({4, 3, 2, 2}, rng)), param(uniform<T>({3}, rng)), param(uniform<T>({3}, rng))}};
        }),
        make_case("dropout", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) { return probe(ad::dropout(p[0], 0.3, 17)); }, {param(uniform<T>({6, 5}, rng))}};
        }),
        make_case("sobel", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) {
                                return ad::add(probe(sobel::augment_input(p[0])), probe(sobel::augment_input(p[1]), 3));
                            },
                            {param(uniform<T>({2, 1, 5, 4}, rng)), param(uniform<T>({1, 3, 4, 4}, rng))}};
        }),
        make_case("flatten_penalty", []<class T>(Rng& rng) -> Setup<T> {
            // Entries are either well below or well above tau.
            auto m = uniform<T>({4, 5}, rng, 0, 0.3);
            for (std::size_t i = 0; i < m.size(); i += 3) m[i] += T(1);
            for (std::size_t i = 0; i < m.size(); i += 2) m[i] = -m[i];
            return Setup<T>{[](auto p) { return gan::flatten_penalty(p[0], T(0.5)); }, {param(std::move(m))}};
        }),
        make_case("gan losses", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) {
                                const auto d = gan::discriminator_loss(p[0], p[1], p[2], T(0.5)).loss;
                                return ad::add(d, gan::generator_loss(p[1]).loss);
                            },
                            {param(uniform<T>({4, 1}, rng, 0.1, 0.9)), param(uniform<T>({4, 1}, rng, 0.1, 0.9)),
                             param(away_from_zero<T>({4, 3}, rng, 0.6, 1.0))}};
        }),
        make_case("entropy-marginal_kl", []<class T>(Rng& rng) -> Setup<T> {
            return Setup<T>{[](auto p) {
                                const auto q = probs(p[0]);
                                return ad::add(ad::add(cluster::conditional_entropy(q), cluster::marginal_kl(q)),
                                               cluster::marginal_kl_tolerant(probs(p[1]), T(1e-4)));
                            },
                            {param(uniform<T>({5, 3}, rng, -2, 2)), param(uniform<T>({5, 3}, rng, -3, 3))}};
        }),
        make_case("kl_divergence", []<class T>(Rng& rng) -> Setup<T> {
            const auto p0_logits = uniform<T>({4, 3}, rng, -2, 2);
            return Setup<T>{[p0_logits](auto p) {
                                const auto p0 = ad::detach(probs(ad::constant(p0_logits)));
                                return ad::add(cluster::kl_divergence(p0, probs(p[0])), cluster::kl_divergence_sum(p0, probs(p[0])));
                            },
                            {param(uniform<T>({4, 3}, rng, -2, 2))}};
        }),
    };
}

} // namespace

SuiteResult run(std::uint64_t seed) {
    SuiteResult out;
    std::uint64_t key = 0;
    const auto record = [&](std::string name, double e_double, double e_float) {
        CaseResult r{std::move(name), e_double, e_float, e_double <= kDoubleTolerance && e_float <= kFloatTolerance};
        out.max_double_error = std::max(out.max_double_error, e_double);
        out.max_float_error = std::max(out.max_float_error, e_float);
        out.cases.push_back(std::move(r));
    };
    for (const auto& c : primitive_cases()) {
        const auto e = check_case(c, derive_seed(seed, key++));
        record(c.name, e.double_error, e.float_error);
    }
    const auto e = objective_errors(derive_seed(seed, key++));
    record("clustering objective", e.double_error, e.float_error);
    out.passed = std::all_of(out.cases.begin(), out.cases.end(), [](const CaseResult& r) { return r.passed; });
    return out;
}

} // namespace dcl::gradsuite
