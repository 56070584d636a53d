#include "dcl/cluster.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dcl/error.hpp"

namespace dcl::cluster {

// ---------------------------------------------------------------------------
// Information terms

template <class T>
void require_row_stochastic(const NdArray<T>& probs, double tol, const char* what) {
    if (probs.rank() != 2) throw ShapeError(std::string(what) + ": expected B x k, got " + shape_str(probs.shape()));
    for (std::size_t r = 0; r < probs.dim(0); ++r) {
        double s = 0;
        for (std::size_t c = 0; c < probs.dim(1); ++c) {
            const T v = probs(r, c);
            if (v < 0) throw NumericError(std::string(what) + ": negative probability in row " + std::to_string(r));
            s += v;
        }
        if (std::abs(s - 1.0) > tol)
            throw NumericError(std::string(what) + ": row " + std::to_string(r) + " sums to " + std::to_string(s));
    }
}

template <class T>
ad::Tensor<T> conditional_entropy(const ad::Tensor<T>& probs) {
    require_row_stochastic(probs.value(), 1e-5, "conditional_entropy");
    const T b = static_cast<T>(probs.dim(0));
    return ad::scale(ad::sum(ad::mul(probs, ad::log(probs, static_cast<T>(kProbFloor)))), T{-1} / b);
}

template <class T>
ad::Tensor<T> marginal_kl(const ad::Tensor<T>& probs) {
    require_row_stochastic(probs.value(), 1e-5, "marginal_kl");
    const auto pbar = ad::mean_axis(probs, 0);
    const T log_k = static_cast<T>(std::log(static_cast<double>(probs.dim(1))));
    return ad::add_scalar(ad::sum(ad::mul(pbar, ad::log(pbar, static_cast<T>(kProbFloor)))), log_k);
}

template <class T>
ad::Tensor<T> marginal_kl_tolerant(const ad::Tensor<T>& probs, T delta) {
    if (delta < 0) throw ConfigError("tolerance delta must be >= 0");
    return ad::relu(ad::add_scalar(marginal_kl(probs), -delta));
}

template <class T>
ad::Tensor<T> kl_divergence_sum(const ad::Tensor<T>& p, const ad::Tensor<T>& q) {
    if (p.shape() != q.shape())
        throw ShapeError("kl_divergence: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(q.shape()));
    const NdArray<T>& pv = p.value();
    T entropy_part = 0;
    for (std::size_t i = 0; i < pv.size(); ++i) entropy_part += pv[i] * std::log(std::max(pv[i], static_cast<T>(kProbFloor)));
    const auto cross = ad::sum(ad::mul(ad::constant(pv), ad::log(q, static_cast<T>(kProbFloor))));
    return ad::add_scalar(ad::scale(cross, T{-1}), entropy_part);
}

template <class T>
ad::Tensor<T> kl_divergence(const ad::Tensor<T>& p, const ad::Tensor<T>& q) {
    return ad::scale(kl_divergence_sum(p, q), T{1} / static_cast<T>(p.dim(0)));
}

// ---------------------------------------------------------------------------
// Bank

void BankConfig::validate() const {
    if (heads.empty()) throw ConfigError("cluster bank needs at least one head");
    bool primary = false;
    for (const auto& h : heads) {
        if (h.k < 2) throw ConfigError("cluster heads need k >= 2");
        if (!(h.delta >= 0)) throw ConfigError("cluster head delta must be >= 0");
        primary = primary || h.role == HeadRole::primary;
    }
    if (!primary) throw ConfigError("cluster bank needs at least one primary head");
    std::size_t kmax = 0;
    for (const auto& h : heads)
        if (h.role == HeadRole::primary) kmax = std::max(kmax, h.k);
    for (const auto& h : heads)
        if (h.role == HeadRole::overcluster && h.k <= kmax)
            throw ConfigError("overcluster heads need more outputs than the primary heads");
    for (auto w : hidden)
        if (w == 0) throw ConfigError("hidden layer widths must be positive");
}

BankConfig default_bank(std::size_t k, std::size_t primary, std::size_t overcluster, std::vector<std::size_t> hidden,
                        double primary_delta_scale, double overcluster_delta_scale, std::size_t overcluster_factor) {
    BankConfig c;
    c.hidden = std::move(hidden);
    for (std::size_t i = 0; i < primary; ++i)
        c.heads.push_back({k, primary_delta_scale * std::log(static_cast<double>(k)), HeadRole::primary});
    const std::size_t kp = overcluster_factor * k;
    for (std::size_t i = 0; i < overcluster; ++i)
        c.heads.push_back({kp, overcluster_delta_scale * std::log(static_cast<double>(kp)), HeadRole::overcluster});
    return c;
}

template <class T>
ClusterBank<T>::ClusterBank(std::size_t input_dim, BankConfig config, std::uint64_t seed)
    : config_(std::move(config)), input_dim_(input_dim) {
    config_.validate();
    if (input_dim == 0) throw ConfigError("cluster bank input dimension must be positive");
    std::size_t key = 0;
    auto add_dense = [&](const std::string& name, std::size_t in, std::size_t out) {
        const double sd = config_.init_std > 0 ? config_.init_std : std::sqrt(2.0 / static_cast<double>(in));
        Rng rng(derive_seed(seed, key++));
        std::normal_distribution<double> dist(0.0, sd);
        NdArray<T> w({in, out});
        for (auto& v : w.values()) v = static_cast<T>(dist(rng));
        params_.push_back({name + ".weight", ad::parameter(std::move(w))});
        params_.push_back({name + ".bias", ad::parameter(NdArray<T>({out}, T{0}))});
    };
    std::size_t width = input_dim;
    for (std::size_t i = 0; i < config_.hidden.size(); ++i) {
        add_dense("trunk." + std::to_string(i), width, config_.hidden[i]);
        width = config_.hidden[i];
    }
    trunk_params_ = params_.size();
    for (std::size_t h = 0; h < config_.heads.size(); ++h) add_dense("head." + std::to_string(h), width, config_.heads[h].k);
}

template <class T>
ad::Tensor<T> ClusterBank<T>::trunk(const ad::Tensor<T>& x, bool frozen) const {
    if (x.shape().size() != 2 || x.dim(1) != input_dim_)
        throw ShapeError("cluster bank expects B x " + std::to_string(input_dim_) + " features, got " +
                         shape_str(x.shape()));
    ad::Tensor<T> h = x;
    for (std::size_t i = 0; i < trunk_params_; i += 2)
        h = ad::relu(ad::add_bias(ad::matmul(h, param(i, frozen)), param(i + 1, frozen)));
    return h;
}

template <class T>
ad::Tensor<T> ClusterBank<T>::head(std::size_t h, const ad::Tensor<T>& trunk_out, bool frozen) const {
    if (h >= head_count()) throw ConfigError("head index " + std::to_string(h) + " out of range");
    const std::size_t i = trunk_params_ + 2 * h;
    return ad::softmax(ad::add_bias(ad::matmul(trunk_out, param(i, frozen)), param(i + 1, frozen)), 1);
}

template <class T>
std::vector<ad::Tensor<T>> ClusterBank<T>::forward(const ad::Tensor<T>& x, bool frozen) const {
    const auto t = trunk(x, frozen);
    std::vector<ad::Tensor<T>> out;
    for (std::size_t h = 0; h < head_count(); ++h) out.push_back(head(h, t, frozen));
    return out;
}

template <class T>
template <class U>
ClusterBank<U> ClusterBank<T>::cast() const {
    ClusterBank<U> out;
    out.config_ = config_;
    out.input_dim_ = input_dim_;
    out.trunk_params_ = trunk_params_;
    for (const auto& p : params_) out.params_.push_back({p.name, ad::parameter(p.tensor.value().template cast<U>())});
    return out;
}

// ---------------------------------------------------------------------------
// Perturbations

void PerturbSpec::validate() const {
    if (!(alpha_r > 0) || !(alpha_adv > 0)) throw ConfigError("perturbation scales must be positive");
    if (replicas < 1) throw ConfigError("replication count must be >= 1");
}

template <class T>
std::vector<T> perturbation_radius(const NdArray<T>& m, double alpha, bool squared) {
    std::vector<T> eps(m.dim(0));
    const std::size_t d = m.dim(1);
    for (std::size_t i = 0; i < eps.size(); ++i) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += static_cast<double>(m(i, j)) * m(i, j);
        eps[i] = static_cast<T>(alpha * (squared ? s : std::sqrt(s)));
    }
    return eps;
}

template <class T>
NdArray<T> random_directions(std::size_t rows, std::size_t dim, std::uint64_t seed, std::uint64_t key) {
    Rng rng(derive_seed(seed, key));
    std::normal_distribution<double> g;
    NdArray<T> d({rows, dim});
    for (std::size_t i = 0; i < rows; ++i) {
        double norm = 0;
        do {
            norm = 0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double v = g(rng);
                d(i, j) = static_cast<T>(v);
                norm += v * v;
            }
        } while (norm < 1e-24);
        const double inv = 1.0 / std::sqrt(norm);
        for (std::size_t j = 0; j < dim; ++j) d(i, j) = static_cast<T>(d(i, j) * inv);
    }
    return d;
}

namespace {

// Writes eps_adv * g / ||g|| per row of `block`, falling back to the start direction.
template <class T>
void normalize_rows(const NdArray<T>& grad, const NdArray<T>& start, const std::vector<T>& eps_adv, std::size_t row0,
                    std::size_t rows, NdArray<T>& out) {
    const std::size_t d = grad.dim(1);
    for (std::size_t i = 0; i < rows; ++i) {
        const std::size_t r = row0 + i;
        double norm = 0;
        for (std::size_t j = 0; j < d; ++j) norm += static_cast<double>(grad(r, j)) * grad(r, j);
        norm = std::sqrt(norm);
        if (!std::isfinite(norm)) throw NumericError("vat_perturbation: non-finite gradient");
        for (std::size_t j = 0; j < d; ++j)
            out(r, j) = norm < 1e-12 ? eps_adv[i] * start(r, j) : static_cast<T>(eps_adv[i] * (grad(r, j) / norm));
    }
}

// KL(p_row || q_row) for one pair of probability rows.
template <class T>
double row_kl(const NdArray<T>& p, std::size_t prow, const NdArray<T>& q, std::size_t qrow) {
    double s = 0;
    for (std::size_t c = 0; c < p.dim(1); ++c) {
        const double pc = std::max(static_cast<double>(p(prow, c)), kProbFloor);
        const double qc = std::max(static_cast<double>(q(qrow, c)), kProbFloor);
        s += pc * (std::log(pc) - std::log(qc));
    }
    return s;
}

// m + r and m - r for every row of `r` (row i of r perturbs row i mod B of m), stacked.
template <class T>
NdArray<T> both_signs(const NdArray<T>& m, const NdArray<T>& r) {
    const std::size_t b = m.dim(0), d = m.dim(1), n = r.dim(0);
    NdArray<T> x({2 * n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            x(i, j) = m(i % b, j) + r(i, j);
            x(n + i, j) = m(i % b, j) - r(i, j);
        }
    return x;
}

template <class T>
void flip_row(NdArray<T>& r, std::size_t row) {
    for (std::size_t j = 0; j < r.dim(1); ++j) r(row, j) = -r(row, j);
}

} // namespace

template <class T>
NdArray<T> vat_perturbation(const Predictor<T>& predict, const NdArray<T>& m, const NdArray<T>& target,
                            const NdArray<T>& directions, const PerturbSpec& spec) {
    spec.validate();
    if (directions.shape() != m.shape()) throw ShapeError("vat_perturbation: direction shape mismatch");
    const std::size_t b = m.dim(0), d = m.dim(1);
    const auto eps_r = perturbation_radius(m, spec.alpha_r, spec.squared_norm);
    const auto eps_adv = perturbation_radius(m, spec.alpha_adv, spec.squared_norm);
    NdArray<T> x(m.shape());
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < d; ++j) x(i, j) = m(i, j) + eps_r[i] * directions(i, j);
    auto xt = ad::parameter(std::move(x));
    NdArray<T> grad;
    {
        ad::Tape<T> tape;
        const auto loss = kl_divergence_sum(ad::constant(target), predict(xt));
        grad = ad::backward(loss, tape).of(xt);
    }
    NdArray<T> out(m.shape());
    normalize_rows(grad, directions, eps_adv, 0, b, out);
    if (!spec.select_sign) return out;
    // The gradient fixes the axis; the sign follows the random start.
    NdArray<T> q;
    {
        ad::Tape<T> scratch;
        q = predict(ad::constant(both_signs(m, out))).value();
    }
    for (std::size_t i = 0; i < b; ++i)
        if (row_kl(target, i, q, b + i) > row_kl(target, i, q, i)) flip_row(out, i);
    return out;
}

template <class T>
NdArray<T> vat_perturbation_bank(const ClusterBank<T>& bank, const NdArray<T>& m,
                                 const std::vector<NdArray<T>>& targets, const PerturbSpec& spec, std::uint64_t seed) {
    spec.validate();
    const std::size_t b = m.dim(0), d = m.dim(1), c = bank.head_count(), reps = spec.replicas;
    if (targets.size() != c) throw ShapeError("vat_perturbation_bank: one target per head required");
    const auto eps_r = perturbation_radius(m, spec.alpha_r, spec.squared_norm);
    const auto eps_adv = perturbation_radius(m, spec.alpha_adv, spec.squared_norm);
    const std::size_t blocks = c * reps;
    NdArray<T> starts({blocks * b, d});
    NdArray<T> x({blocks * b, d});
    for (std::size_t blk = 0; blk < blocks; ++blk) {
        const auto dir = random_directions<T>(b, d, seed, blk);
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                const std::size_t r = blk * b + i;
                starts(r, j) = dir(i, j);
                x(r, j) = m(i, j) + eps_r[i] * dir(i, j);
            }
    }
    auto xt = ad::parameter(std::move(x));
    NdArray<T> grad;
    {
        ad::Tape<T> tape;
        const auto t = bank.trunk(xt, true);
        ad::Tensor<T> total;
        for (std::size_t h = 0; h < c; ++h) {
            const auto q = bank.head(h, ad::slice_rows(t, h * reps * b, (h + 1) * reps * b), true);
            NdArray<T> tiled({reps * b, targets[h].dim(1)});
            for (std::size_t r = 0; r < reps; ++r)
                std::copy_n(targets[h].data(), targets[h].size(), tiled.data() + r * targets[h].size());
            const auto kl = kl_divergence_sum(ad::constant(std::move(tiled)), q);
            total = total.defined() ? ad::add(total, kl) : kl;
        }
        grad = ad::backward(total, tape).of(xt);
    }
    NdArray<T> out({blocks * b, d});
    for (std::size_t blk = 0; blk < blocks; ++blk) normalize_rows(grad, starts, eps_adv, blk * b, b, out);
    if (!spec.select_sign) return out;
    // Sign selection as in vat_perturbation, for all blocks in one frozen pass.
    const std::size_t n = blocks * b;
    {
        ad::Tape<T> scratch;
        const auto t = bank.trunk(ad::constant(both_signs(m, out)), true);
        for (std::size_t h = 0; h < c; ++h) {
            const auto plus = bank.head(h, ad::slice_rows(t, h * reps * b, (h + 1) * reps * b), true).value();
            const auto minus = bank.head(h, ad::slice_rows(t, n + h * reps * b, n + (h + 1) * reps * b), true).value();
            for (std::size_t r = 0; r < reps * b; ++r)
                if (row_kl(targets[h], r % b, minus, r) > row_kl(targets[h], r % b, plus, r)) flip_row(out, h * reps * b + r);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
HeadTerms<T> head_objective(const ad::Tensor<T>& clean, const std::vector<ad::Tensor<T>>& adversarial,
                            const ad::Tensor<T>& dropout_view, T delta, T lambda) {
    if (adversarial.empty()) throw ConfigError("head objective needs at least one adversarial view");
    HeadTerms<T> t;
    const auto target = ad::detach(clean);
    for (const auto& adv : adversarial) {
        const auto kl = kl_divergence(target, adv);
        t.r_sat = t.r_sat.defined() ? ad::add(t.r_sat, kl) : kl;
    }
    t.r_sat = ad::scale(t.r_sat, T{1} / static_cast<T>(adversarial.size()));
    t.l_d = kl_divergence(target, dropout_view);
    const auto mkl = marginal_kl(clean);
    t.kl = static_cast<double>(mkl.item());
    t.kl_clamped = ad::relu(ad::add_scalar(mkl, -delta));
    t.cond_entropy = conditional_entropy(clean);
    const auto half = static_cast<T>(0.5);
    t.total = ad::add(ad::add(ad::scale(t.r_sat, half), ad::scale(t.l_d, half)),
                      ad::scale(ad::add(t.kl_clamped, t.cond_entropy), lambda));
    return t;
}

namespace {

template <class T>
HeadBreakdown breakdown_of(const HeadTerms<T>& t) {
    HeadBreakdown b;
    b.r_sat = t.r_sat.item();
    b.l_d = t.l_d.item();
    b.kl = t.kl;
    b.kl_clamped = t.kl_clamped.item();
    b.cond_entropy = t.cond_entropy.item();
    b.total = t.total.item();
    return b;
}

template <class T>
NdArray<T> add_rows(const NdArray<T>& m, const NdArray<T>& pert, std::size_t row0) {
    NdArray<T> out(m.shape());
    for (std::size_t i = 0; i < m.size(); ++i) out[i] = m[i] + pert[row0 * m.dim(1) + i];
    return out;
}

} // namespace

HeadBreakdown to_breakdown(const HeadTerms<double>& t) { return breakdown_of(t); }
HeadBreakdown to_breakdown(const HeadTerms<float>& t) { return breakdown_of(t); }

template <class T>
HeadTerms<T> head_loss(const ClusterBank<T>& bank, std::size_t h, const NdArray<T>& m, const NdArray<T>& m_prime,
                       const PerturbSpec& spec, T lambda, std::uint64_t seed) {
    if (m.shape() != m_prime.shape()) throw ShapeError("head_loss: m and m' must be row-aligned");
    const std::size_t b = m.dim(0), d = m.dim(1);
    const auto clean = bank.head(h, bank.trunk(ad::constant(m)));
    const Predictor<T> predict = [&](const ad::Tensor<T>& x) { return bank.head(h, bank.trunk(x, true), true); };
    std::vector<ad::Tensor<T>> adversarial;
    for (std::size_t r = 0; r < spec.replicas; ++r) {
        const auto dir = random_directions<T>(b, d, seed, h * spec.replicas + r);
        const auto pert = vat_perturbation(predict, m, clean.value(), dir, spec);
        adversarial.push_back(bank.head(h, bank.trunk(ad::constant(add_rows(m, pert, 0)))));
    }
    const auto dropout_view = bank.head(h, bank.trunk(ad::constant(m_prime)));
    return head_objective(clean, adversarial, dropout_view, static_cast<T>(bank.config().heads[h].delta), lambda);
}

template <class T>
std::pair<ad::Tensor<T>, LossBreakdown> bank_loss(const ClusterBank<T>& bank, const NdArray<T>& m,
                                                  const NdArray<T>& m_prime, const PerturbSpec& spec, T lambda,
                                                  std::uint64_t seed) {
    if (m.shape() != m_prime.shape()) throw ShapeError("bank_loss: m and m' must be row-aligned");
    const std::size_t b = m.dim(0), d = m.dim(1), c = bank.head_count(), reps = spec.replicas;
    const auto t_clean = bank.trunk(ad::constant(m));
    std::vector<ad::Tensor<T>> clean;
    std::vector<NdArray<T>> targets;
    for (std::size_t h = 0; h < c; ++h) {
        clean.push_back(bank.head(h, t_clean));
        targets.push_back(clean.back().value());
    }
    const NdArray<T> pert = vat_perturbation_bank(bank, m, targets, spec, seed);
    NdArray<T> x_adv({c * reps * b, d});
    for (std::size_t blk = 0; blk < c * reps; ++blk)
        for (std::size_t i = 0; i < b * d; ++i) x_adv[blk * b * d + i] = m[i] + pert[blk * b * d + i];
    const auto t_adv = bank.trunk(ad::constant(std::move(x_adv)));
    const auto t_drop = bank.trunk(ad::constant(m_prime));

    LossBreakdown breakdown;
    ad::Tensor<T> total;
    for (std::size_t h = 0; h < c; ++h) {
        const auto q = bank.head(h, ad::slice_rows(t_adv, h * reps * b, (h + 1) * reps * b));
        std::vector<ad::Tensor<T>> adversarial;
        for (std::size_t r = 0; r < reps; ++r) adversarial.push_back(ad::slice_rows(q, r * b, (r + 1) * b));
        const auto terms = head_objective(clean[h], adversarial, bank.head(h, t_drop),
                                          static_cast<T>(bank.config().heads[h].delta), lambda);
        breakdown.heads.push_back(breakdown_of(terms));
        total = total.defined() ? ad::add(total, terms.total) : terms.total;
    }
    total = ad::scale(total, T{1} / static_cast<T>(c));
    breakdown.bank = total.item();
    return {total, breakdown};
}

double bank_mean(const std::vector<double>& totals) {
    if (totals.empty()) throw ConfigError("bank_mean of no heads");
    return std::accumulate(totals.begin(), totals.end(), 0.0) / static_cast<double>(totals.size());
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("cluster epochs must be >= 1");
    if (batch_size < 2) throw ConfigError("cluster batch size must be >= 2");
    if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
    if (!(lr >= 0)) throw ConfigError("learning rate must be >= 0");
    perturb.validate();
}

namespace {

NdArray<float> gather_rows(const NdArray<float>& src, const std::vector<std::size_t>& order, std::size_t begin,
                           std::size_t end) {
    const std::size_t d = src.dim(1);
    NdArray<float> out({end - begin, d});
    for (std::size_t i = begin; i < end; ++i) std::copy_n(src.data() + order[i] * d, d, out.data() + (i - begin) * d);
    return out;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
    if (acc.heads.empty()) acc.heads.resize(b.heads.size());
    for (std::size_t h = 0; h < b.heads.size(); ++h) {
        auto& a = acc.heads[h];
        const auto& x = b.heads[h];
        a.r_sat += w * x.r_sat;
        a.l_d += w * x.l_d;
        a.kl += w * x.kl;
        a.kl_clamped += w * x.kl_clamped;
        a.cond_entropy += w * x.cond_entropy;
        a.total += w * x.total;
    }
    acc.bank += w * b.bank;
}

std::vector<std::pair<std::size_t, std::size_t>> batch_ranges(std::size_t n, std::size_t batch) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t s = 0; s < n; s += batch) out.emplace_back(s, std::min(n, s + batch));
    // A trailing sliver too small for a marginal estimate joins the previous batch.
    if (out.size() > 1 && out.back().second - out.back().first < 2) {
        out[out.size() - 2].second = n;
        out.pop_back();
    }
    return out;
}

} // namespace

Trainer::Trainer(std::size_t input_dim, BankConfig bank, TrainConfig config)
    : bank_(input_dim, std::move(bank), derive_seed(config.seed, 11)), config_(std::move(config)),
      rng_(derive_seed(config_.seed, 12)) {
    config_.validate();
    adam_.config = {config_.lr, config_.beta1, 0.999, 1e-8};
}

EpochRecord Trainer::train_epoch(const data::FeatureMatrix& m, const data::FeatureMatrix& m_prime) {
    if (m.values.shape() != m_prime.values.shape()) throw ShapeError("train_epoch: m and m' differ in shape");
    const std::size_t n = m.rows();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    const auto ranges = batch_ranges(n, config_.batch_size);
    EpochRecord rec;
    rec.epoch = epoch_;
    for (std::size_t bi = 0; bi < ranges.size(); ++bi) {
        const auto [s, e] = ranges[bi];
        const auto mb = gather_rows(m.values, order, s, e);
        const auto mpb = gather_rows(m_prime.values, order, s, e);
        const std::uint64_t step_seed = derive_seed(config_.seed, (static_cast<std::uint64_t>(epoch_) << 20) + bi);
        ad::Tape<float> tape;
        auto [loss, breakdown] =
            bank_loss(bank_, mb, mpb, config_.perturb, static_cast<float>(config_.lambda), step_seed);
        if (!std::isfinite(breakdown.bank))
            throw NumericError("non-finite clustering loss at epoch " + std::to_string(epoch_));
        const auto grads = ad::backward(loss, tape);
        nn::adam_step<float>(bank_.parameters(), grads, adam_);
        accumulate(rec.mean, breakdown, 1.0 / static_cast<double>(ranges.size()));
    }
    rec.best_head = select_best_head(rec.mean, bank_.config().heads);
    ++epoch_;
    return rec;
}

std::vector<std::uint32_t> argmax_rows(const NdArray<float>& probs) {
    std::vector<std::uint32_t> out(probs.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < probs.dim(1); ++c)
            if (probs(r, c) > probs(r, best)) best = c;
        out[r] = static_cast<std::uint32_t>(best);
    }
    return out;
}

std::vector<std::uint32_t> assign_clusters(const ClusterBank<float>& bank, std::size_t h, const NdArray<float>& m) {
    return argmax_rows(bank.head(h, bank.trunk(ad::constant(m), true), true).value());
}

std::size_t select_best_head(const LossBreakdown& breakdown, const std::vector<HeadSpec>& heads) {
    if (breakdown.heads.size() != heads.size()) throw ConfigError("select_best_head: breakdown/head count mismatch");
    std::optional<std::size_t> best;
    for (std::size_t h = 0; h < heads.size(); ++h) {
        if (heads[h].role != HeadRole::primary) continue;
        if (!best || breakdown.heads[h].total < breakdown.heads[*best].total) best = h;
    }
    if (!best) throw ConfigError("select_best_head: no primary head");
    return *best;
}

LossBreakdown evaluate_bank(const ClusterBank<float>& bank, const NdArray<float>& m, const NdArray<float>& m_prime,
                            const PerturbSpec& spec, double lambda, std::uint64_t seed, std::size_t batch_size) {
    const std::size_t n = m.dim(0);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const auto ranges = batch_ranges(n, batch_size);
    LossBreakdown acc;
    for (std::size_t bi = 0; bi < ranges.size(); ++bi) {
        const auto [s, e] = ranges[bi];
        auto [loss, breakdown] = bank_loss(bank, gather_rows(m, order, s, e), gather_rows(m_prime, order, s, e), spec,
                                           static_cast<float>(lambda), derive_seed(seed, bi));
        accumulate(acc, breakdown, static_cast<double>(e - s) / static_cast<double>(n));
    }
    return acc;
}

data::FeatureMatrix feature_dropout(const data::FeatureMatrix& m, double rate, std::uint64_t seed) {
    data::FeatureMatrix out;
    out.values = ad::dropout(ad::constant(m.values), rate, seed).value();
    out.dropout_rate = static_cast<float>(rate);
    out.seed = seed;
    return out;
}

// ---------------------------------------------------------------------------
// Instantiation

#define DCL_INSTANTIATE(T)                                                                                        \
    template void require_row_stochastic<T>(const NdArray<T>&, double, const char*);                              \
    template ad::Tensor<T> conditional_entropy<T>(const ad::Tensor<T>&);                                           \
    template ad::Tensor<T> marginal_kl<T>(const ad::Tensor<T>&);                                                   \
    template ad::Tensor<T> marginal_kl_tolerant<T>(const ad::Tensor<T>&, T);                                       \
    template ad::Tensor<T> kl_divergence<T>(const ad::Tensor<T>&, const ad::Tensor<T>&);                           \
    template ad::Tensor<T> kl_divergence_sum<T>(const ad::Tensor<T>&, const ad::Tensor<T>&);                       \
    template class ClusterBank<T>;                                                                                 \
    template std::vector<T> perturbation_radius<T>(const NdArray<T>&, double, bool);                               \
    template NdArray<T> random_directions<T>(std::size_t, std::size_t, std::uint64_t, std::uint64_t);              \
    template NdArray<T> vat_perturbation<T>(const Predictor<T>&, const NdArray<T>&, const NdArray<T>&,             \
                                            const NdArray<T>&, const PerturbSpec&);                                \
    template NdArray<T> vat_perturbation_bank<T>(const ClusterBank<T>&, const NdArray<T>&,                         \
                                                 const std::vector<NdArray<T>>&, const PerturbSpec&, std::uint64_t); \
    template HeadTerms<T> head_objective<T>(const ad::Tensor<T>&, const std::vector<ad::Tensor<T>>&,               \
                                            const ad::Tensor<T>&, T, T);                                           \
    template HeadTerms<T> head_loss<T>(const ClusterBank<T>&, std::size_t, const NdArray<T>&, const NdArray<T>&,   \
                                       const PerturbSpec&, T, std::uint64_t);                                      \
    template std::pair<ad::Tensor<T>, LossBreakdown> bank_loss<T>(const ClusterBank<T>&, const NdArray<T>&,        \
                                                                  const NdArray<T>&, const PerturbSpec&, T,        \
                                                                  std::uint64_t);

DCL_INSTANTIATE(float)
DCL_INSTANTIATE(double)
#undef DCL_INSTANTIATE

template ClusterBank<double> ClusterBank<float>::cast<double>() const;
template ClusterBank<float> ClusterBank<double>::cast<float>() const;

} // namespace dcl::cluster

namespace dcl::cluster {

FitResult fit(Trainer& trainer, const data::FeatureMatrix& m, const FitOptions& options) {
    if (!options.m_prime) throw ConfigError("fit: no m' source");
    const TrainConfig& tc = trainer.config();
    FitResult out;
    for (std::size_t e = trainer.epoch(); e < tc.epochs; ++e) {
        const data::FeatureMatrix mp = options.m_prime(e);
        EpochRecord rec = trainer.train_epoch(m, mp);
        if (options.score) rec.acc = options.score(assign_clusters(trainer.bank(), rec.best_head, m.values));
        if (options.on_epoch) options.on_epoch(rec);
        out.history.push_back(std::move(rec));
    }
    const data::FeatureMatrix mp = options.m_prime(tc.epochs);
    out.final_pass = evaluate_bank(trainer.bank(), m.values, mp.values, tc.perturb, tc.lambda,
                                   derive_seed(tc.seed, 13), tc.batch_size);
    out.best_head = select_best_head(out.final_pass, trainer.bank().config().heads);
    out.assignments = assign_clusters(trainer.bank(), out.best_head, m.values);
    if (options.score) out.acc = options.score(out.assignments);
    return out;
}

} // namespace dcl::cluster
