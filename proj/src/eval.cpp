#include "dcl/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "dcl/error.hpp"
#include "json.hpp"

namespace dcl::eval {

Contingency contingency(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> truth) {
    if (pred.size() != truth.size())
        throw ShapeError("clustering_accuracy: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(truth.size()) + " labels");
    if (pred.empty()) throw ShapeError("clustering_accuracy: empty input");
    Contingency c;
    c.pred_alphabet = *std::max_element(pred.begin(), pred.end()) + std::size_t{1};
    c.true_alphabet = *std::max_element(truth.begin(), truth.end()) + std::size_t{1};
    c.k = std::max(c.pred_alphabet, c.true_alphabet);
    c.counts.assign(c.k * c.k, 0);
    for (std::size_t i = 0; i < pred.size(); ++i) ++c.counts[pred[i] * c.k + truth[i]];
    c.total = pred.size();
    return c;
}

std::vector<std::size_t> hungarian_match(std::span<const double> cost, std::size_t rows, std::size_t cols) {
    if (rows != cols) throw ShapeError("hungarian_match: cost matrix is " + std::to_string(rows) + " x " +
                                       std::to_string(cols) + ", expected square");
    if (cost.size() != rows * cols) throw ShapeError("hungarian_match: cost size does not match its extents");
    for (double v : cost)
        if (!std::isfinite(v)) throw NumericError("hungarian_match: non-finite cost");
    const std::size_t n = rows;
    if (n == 0) return {};
    // Shortest augmenting path with potentials; 1-based with column 0 as the sentinel.
    constexpr double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(n + 1, 0);
    std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> assignment(n);
    for (std::size_t j = 1; j <= n; ++j) assignment[p[j] - 1] = j - 1;
    return assignment;
}

EvalReport clustering_accuracy(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> truth) {
    const Contingency c = contingency(pred, truth);
    const std::size_t k = c.k;
    const std::uint64_t top = *std::max_element(c.counts.begin(), c.counts.end());
    std::vector<double> cost(k * k);
    for (std::size_t i = 0; i < k * k; ++i) cost[i] = static_cast<double>(top - c.counts[i]);
    const auto match = hungarian_match(cost, k, k);

    EvalReport r;
    r.k = k;
    r.n = c.total;
    r.mapping.resize(k);
    r.confusion.assign(k * k, 0);
    std::uint64_t hit = 0;
    for (std::size_t p = 0; p < k; ++p) {
        r.mapping[p] = static_cast<std::uint32_t>(match[p]);
        hit += c.at(p, match[p]);
        for (std::size_t t = 0; t < k; ++t) r.confusion[t * k + match[p]] += c.at(p, t);
    }
    r.acc = static_cast<double>(hit) / static_cast<double>(c.total);
    r.per_class.assign(k, -1.0);
    for (std::size_t t = 0; t < k; ++t) {
        std::uint64_t row = 0;
        for (std::size_t q = 0; q < k; ++q) row += r.confusion[t * k + q];
        if (row > 0) r.per_class[t] = static_cast<double>(r.confusion[t * k + t]) / static_cast<double>(row);
    }
    return r;
}

std::string report_json(const EvalReport& r) {
    nlohmann::ordered_json j;
    j["acc"] = r.acc;
    j["n"] = r.n;
    j["k"] = r.k;
    j["mapping"] = r.mapping;
    j["per_class"] = r.per_class;
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (std::size_t t = 0; t < r.k; ++t)
        rows.push_back(std::vector<std::uint64_t>(r.confusion.begin() + t * r.k, r.confusion.begin() + (t + 1) * r.k));
    j["confusion"] = rows;
    return j.dump(2);
}

// ---------------------------------------------------------------------------

const char* schedule_name(DeltaSchedule s) { return s == DeltaSchedule::constant ? "constant" : "variable"; }

HeadDeltas schedule_deltas(DeltaSchedule s, double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("drop fraction must lie in [0,1)");
    const HeadDeltas constant{1e-4, 1e-2};
    if (s == DeltaSchedule::constant || fraction < 0.05) return constant;
    struct Entry {
        double fraction;
        HeadDeltas deltas;
    };
    static constexpr Entry table[] = {
        {0.1, {1e-4, 2e-2}}, {0.2, {1e-3, 2e-2}}, {0.3, {1e-3, 5e-2}}, {0.4, {2e-3, 5e-2}}};
    for (const auto& e : table)
        if (std::abs(e.fraction - fraction) < 1e-9) return e.deltas;
    throw ConfigError("variable tolerance schedule has no entry for drop fraction " + std::to_string(fraction));
}

std::vector<std::size_t> drop_rows(std::span<const std::uint32_t> labels, std::span<const std::uint32_t> classes,
                                   double fraction, std::uint64_t seed) {
    if (!(fraction >= 0.0 && fraction < 1.0))
        throw ConfigError("drop fraction " + std::to_string(fraction) + " would empty a class");
    std::vector<char> keep(labels.size(), 1);
    for (std::size_t ci = 0; ci < classes.size(); ++ci) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == classes[ci]) rows.push_back(i);
        const auto n_drop = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(rows.size())));
        if (rows.empty() || n_drop >= rows.size())
            throw ConfigError("dropping " + std::to_string(fraction) + " of class " + std::to_string(classes[ci]) +
                              " leaves no rows");
        Rng rng(derive_seed(seed, ci));
        std::shuffle(rows.begin(), rows.end(), rng);
        for (std::size_t i = 0; i < n_drop; ++i) keep[rows[i]] = 0;
    }
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (keep[i]) out.push_back(i);
    return out;
}

namespace {

data::FeatureMatrix take_rows(const data::FeatureMatrix& m, const std::vector<std::size_t>& rows) {
    const std::size_t d = m.cols();
    data::FeatureMatrix out;
    out.values = NdArray<float>({rows.size(), d});
    out.dropout_rate = m.dropout_rate;
    out.seed = m.seed;
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(m.values.data() + rows[i] * d, d, out.values.data() + i * d);
    return out;
}

} // namespace

std::vector<ImbalanceRow> imbalance_experiment(const data::FeatureMatrix& features,
                                               std::span<const std::uint32_t> labels, const DropSpec& drop,
                                               const ImbalanceSetup& setup, std::span<const std::uint64_t> seeds) {
    if (features.rows() != labels.size()) throw ShapeError("imbalance_experiment: feature/label count mismatch");
    if (seeds.empty()) throw ConfigError("imbalance_experiment: no seeds");
    std::vector<ImbalanceRow> out;
    for (double fraction : drop.fractions) {
        for (DeltaSchedule schedule : drop.schedules) {
            // Without dropping, both schedules coincide; run it once under "constant".
            if (fraction == 0.0 && schedule == DeltaSchedule::variable) continue;
            const HeadDeltas deltas = schedule_deltas(schedule, fraction);
            ImbalanceRow row;
            row.fraction = fraction;
            row.schedule = schedule;
            row.per_class.assign(setup.k, 0.0);
            for (std::uint64_t seed : seeds) {
                const auto kept = drop_rows(labels, drop.classes, fraction, derive_seed(seed, 31));
                const data::FeatureMatrix m = take_rows(features, kept);
                std::vector<std::uint32_t> truth(kept.size());
                for (std::size_t i = 0; i < kept.size(); ++i) truth[i] = labels[kept[i]];

                cluster::BankConfig bank = cluster::default_bank(setup.k, setup.primary_heads, setup.overcluster_heads,
                                                                 setup.hidden);
                bank.init_std = setup.init_std;
                for (auto& h : bank.heads) h.delta = h.role == cluster::HeadRole::primary ? deltas.primary : deltas.overcluster;
                cluster::TrainConfig tc = setup.train;
                tc.seed = seed;
                cluster::Trainer trainer(m.cols(), bank, tc);
                cluster::FitOptions opt;
                opt.m_prime = [&](std::size_t e) {
                    return cluster::feature_dropout(m, setup.feature_dropout, derive_seed(seed, 1000 + e));
                };
                const auto res = cluster::fit(trainer, m, opt);
                const EvalReport rep = clustering_accuracy(res.assignments, truth);
                row.seed_acc.push_back(rep.acc);
                row.acc += rep.acc / static_cast<double>(seeds.size());
                for (std::size_t c = 0; c < setup.k && c < rep.per_class.size(); ++c)
                    row.per_class[c] += std::max(rep.per_class[c], 0.0) / static_cast<double>(seeds.size());
            }
            out.push_back(std::move(row));
        }
    }
    return out;
}

void write_imbalance_csv(const fs::path& path, const std::vector<ImbalanceRow>& rows) {
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    os << "drop,schedule,class,acc\n";
    char buf[64];
    for (const auto& r : rows) {
        for (std::size_t c = 0; c < r.per_class.size(); ++c) {
            std::snprintf(buf, sizeof buf, "%.2f,%s,%zu,%.6f\n", r.fraction, schedule_name(r.schedule), c, r.per_class[c]);
            os << buf;
        }
        std::snprintf(buf, sizeof buf, "%.2f,%s,all,%.6f\n", r.fraction, schedule_name(r.schedule), r.acc);
        os << buf;
    }
}

// ---------------------------------------------------------------------------

NdArray<double> pca2(const NdArray<float>& m) {
    const std::size_t n = m.dim(0), d = m.dim(1);
    if (n == 0 || d == 0) throw ShapeError("pca2: empty matrix");
    std::vector<double> mean(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += m(i, j);
    for (auto& v : mean) v /= static_cast<double>(n);
    std::vector<double> cov(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t a = 0; a < d; ++a) {
            const double xa = m(i, a) - mean[a];
            for (std::size_t b = 0; b < d; ++b) cov[a * d + b] += xa * (m(i, b) - mean[b]);
        }
    std::vector<std::vector<double>> axes;
    for (int comp = 0; comp < 2 && comp < static_cast<int>(d); ++comp) {
        std::vector<double> v(d);
        for (std::size_t j = 0; j < d; ++j) v[j] = 1.0 + 0.01 * static_cast<double>(j);
        for (int it = 0; it < 200; ++it) {
            for (const auto& prev : axes) {
                const double proj = std::inner_product(v.begin(), v.end(), prev.begin(), 0.0);
                for (std::size_t j = 0; j < d; ++j) v[j] -= proj * prev[j];
            }
            std::vector<double> w(d, 0.0);
            for (std::size_t a = 0; a < d; ++a)
                for (std::size_t b = 0; b < d; ++b) w[a] += cov[a * d + b] * v[b];
            const double norm = std::sqrt(std::inner_product(w.begin(), w.end(), w.begin(), 0.0));
            if (norm < 1e-300) break;
            for (std::size_t j = 0; j < d; ++j) v[j] = w[j] / norm;
        }
        axes.push_back(v);
    }
    NdArray<double> xy({n, 2}, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < axes.size(); ++c) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) s += (m(i, j) - mean[j]) * axes[c][j];
            xy(i, c) = s;
        }
    return xy;
}

void write_embedding_csv(const fs::path& path, const NdArray<double>& xy, std::span<const std::uint32_t> labels,
                         std::span<const std::uint32_t> clusters) {
    if (xy.dim(0) != labels.size() || labels.size() != clusters.size())
        throw ShapeError("write_embedding_csv: row counts differ");
    std::ofstream os(path);
    if (!os) throw Error("cannot write " + path.string());
    os << "x,y,label,cluster\n";
    char buf[96];
    for (std::size_t i = 0; i < labels.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.6g,%.6g,%u,%u\n", xy(i, 0), xy(i, 1), labels[i], clusters[i]);
        os << buf;
    }
}

} // namespace dcl::eval
