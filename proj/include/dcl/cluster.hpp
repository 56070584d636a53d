#pragma once

// Multi-head auxiliary classifier trained on discriminator features with a
// tolerant information-maximization objective plus perturbation consistency.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dcl/data.hpp"
#include "dcl/nn.hpp"
#include "dcl/rng.hpp"

namespace dcl::cluster {

inline constexpr double kProbFloor = 1e-12;

// ---------------------------------------------------------------------------
// Information terms. Inputs are B x k row-stochastic matrices.

/// Mean row entropy.
template <class T>
ad::Tensor<T> conditional_entropy(const ad::Tensor<T>& probs);

/// KL(p_bar || uniform) with p_bar the column mean.
template <class T>
ad::Tensor<T> marginal_kl(const ad::Tensor<T>& probs);

/// max(KL(p_bar || uniform) - delta, 0).
template <class T>
ad::Tensor<T> marginal_kl_tolerant(const ad::Tensor<T>& probs, T delta);

/// Mean over rows of sum p log(p / q). `p` is treated as a constant target.
template <class T>
ad::Tensor<T> kl_divergence(const ad::Tensor<T>& p, const ad::Tensor<T>& q);

/// Per-row KL summed over rows (not averaged); `p` constant.
template <class T>
ad::Tensor<T> kl_divergence_sum(const ad::Tensor<T>& p, const ad::Tensor<T>& q);

/// Throws if any entry is negative or a row does not sum to 1 within `tol`.
template <class T>
void require_row_stochastic(const NdArray<T>& probs, double tol, const char* what);

// ---------------------------------------------------------------------------
// Bank

enum class HeadRole { primary, overcluster };

struct HeadSpec {
    std::size_t k = 2;
    double delta = 0.0;
    HeadRole role = HeadRole::primary;
};

struct BankConfig {
    std::vector<std::size_t> hidden = {64, 64};  // empty: heads read the input directly
    std::vector<HeadSpec> heads;
    double init_std = 1e-2;  // <= 0 selects He initialization

    void validate() const;
};

/// `primary` heads with k outputs (delta = primary_delta_scale * ln k) plus `overcluster`
/// heads with k' = overcluster_factor * k (delta = overcluster_delta_scale * ln k').
BankConfig default_bank(std::size_t k, std::size_t primary = 5, std::size_t overcluster = 1,
                        std::vector<std::size_t> hidden = {64, 64}, double primary_delta_scale = 1e-4,
                        double overcluster_delta_scale = 1e-2, std::size_t overcluster_factor = 5);

template <class T>
class ClusterBank {
public:
    ClusterBank() = default;
    ClusterBank(std::size_t input_dim, BankConfig config, std::uint64_t seed);

    const BankConfig& config() const noexcept { return config_; }
    std::size_t input_dim() const noexcept { return input_dim_; }
    std::size_t head_count() const noexcept { return config_.heads.size(); }

    /// Shared hidden representation; `frozen` evaluates with detached parameters.
    ad::Tensor<T> trunk(const ad::Tensor<T>& x, bool frozen = false) const;
    /// Softmax output of head `h` on trunk activations.
    ad::Tensor<T> head(std::size_t h, const ad::Tensor<T>& trunk_out, bool frozen = false) const;
    /// Every head on the same input.
    std::vector<ad::Tensor<T>> forward(const ad::Tensor<T>& x, bool frozen = false) const;

    std::vector<nn::Parameter<T>>& parameters() noexcept { return params_; }
    const std::vector<nn::Parameter<T>>& parameters() const noexcept { return params_; }
    /// Same architecture with every parameter converted to U.
    template <class U>
    ClusterBank<U> cast() const;

private:
    template <class U>
    friend class ClusterBank;

    ad::Tensor<T> param(std::size_t i, bool frozen) const {
        return frozen ? ad::detach(params_[i].tensor) : params_[i].tensor;
    }

    BankConfig config_;
    std::size_t input_dim_ = 0;
    std::size_t trunk_params_ = 0;  // params_[0 .. trunk_params_) are trunk weight/bias pairs
    std::vector<nn::Parameter<T>> params_;
};

// ---------------------------------------------------------------------------
// Perturbations and losses

struct PerturbSpec {
    double alpha_r = 0.3;
    double alpha_adv = 0.15;
    std::size_t replicas = 5;
    bool squared_norm = false;  // epsilon from ||m||^2 instead of ||m||
    bool select_sign = false;   // keep +r or -r, whichever gives the larger KL

    void validate() const;
};

/// eps_i = alpha * ||m_i|| (or ||m_i||^2).
template <class T>
std::vector<T> perturbation_radius(const NdArray<T>& m, double alpha, bool squared);

/// Maps a batch of inputs to one head's probabilities.
template <class T>
using Predictor = std::function<ad::Tensor<T>(const ad::Tensor<T>&)>;

/// B x d rows drawn uniformly from the unit sphere; stream (seed, key).
template <class T>
NdArray<T> random_directions(std::size_t rows, std::size_t dim, std::uint64_t seed, std::uint64_t key);

/// Two-round adversarial perturbation for one predictor, starting from
/// `directions` (unit rows). `target` holds the clean probabilities.
/// Rows with ||m_i|| = 0 get a zero perturbation.
template <class T>
NdArray<T> vat_perturbation(const Predictor<T>& predict, const NdArray<T>& m, const NdArray<T>& target,
                            const NdArray<T>& directions, const PerturbSpec& spec);

/// Adversarial perturbations for every (head, replicate) of a bank in one pass.
/// Row block (h * R + r) holds the B x d perturbation of head h, replicate r,
/// started from random_directions(B, d, seed, h * R + r).
template <class T>
NdArray<T> vat_perturbation_bank(const ClusterBank<T>& bank, const NdArray<T>& m,
                                 const std::vector<NdArray<T>>& targets, const PerturbSpec& spec, std::uint64_t seed);

struct HeadBreakdown {
    double r_sat = 0;
    double l_d = 0;
    double kl = 0;          // unclamped KL(p_bar || u)
    double kl_clamped = 0;  // max(kl - delta, 0)
    double cond_entropy = 0;
    double total = 0;
};

struct LossBreakdown {
    std::vector<HeadBreakdown> heads;
    double bank = 0;  // mean of head totals
};

/// Differentiable pieces of one head's objective given its probabilities on the
/// clean, adversarial (R stacked blocks), and dropout views.
template <class T>
struct HeadTerms {
    ad::Tensor<T> r_sat, l_d, kl_clamped, cond_entropy, total;
    double kl = 0;
};

template <class T>
HeadTerms<T> head_objective(const ad::Tensor<T>& clean, const std::vector<ad::Tensor<T>>& adversarial,
                            const ad::Tensor<T>& dropout_view, T delta, T lambda);

HeadBreakdown to_breakdown(const HeadTerms<double>& t);
HeadBreakdown to_breakdown(const HeadTerms<float>& t);

/// Full objective for one head on a mini-batch.
template <class T>
HeadTerms<T> head_loss(const ClusterBank<T>& bank, std::size_t h, const NdArray<T>& m, const NdArray<T>& m_prime,
                       const PerturbSpec& spec, T lambda, std::uint64_t seed);

/// Mean over all heads of head_loss; returns the scalar tensor and a breakdown.
template <class T>
std::pair<ad::Tensor<T>, LossBreakdown> bank_loss(const ClusterBank<T>& bank, const NdArray<T>& m,
                                                  const NdArray<T>& m_prime, const PerturbSpec& spec, T lambda,
                                                  std::uint64_t seed);

/// Mean of already computed totals.
double bank_mean(const std::vector<double>& totals);

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 500;
    double lambda = 0.2;
    double lr = 1e-4;
    double beta1 = 0.5;
    PerturbSpec perturb;
    std::uint64_t seed = 0;

    void validate() const;
};

struct EpochRecord {
    std::size_t epoch = 0;
    LossBreakdown mean;   // averaged over the epoch's mini-batches
    std::size_t best_head = 0;
    double acc = -1;      // best-head accuracy when labels are known, else -1
};

class Trainer {
public:
    Trainer(std::size_t input_dim, BankConfig bank, TrainConfig config);

    ClusterBank<float>& bank() noexcept { return bank_; }
    const ClusterBank<float>& bank() const noexcept { return bank_; }
    const TrainConfig& config() const noexcept { return config_; }
    std::size_t epoch() const noexcept { return epoch_; }

    /// One pass over shuffled mini-batches of (m, m_prime), one Adam step each.
    EpochRecord train_epoch(const data::FeatureMatrix& m, const data::FeatureMatrix& m_prime);

private:
    ClusterBank<float> bank_;
    TrainConfig config_;
    nn::AdamState<float> adam_;
    Rng rng_;
    std::size_t epoch_ = 0;
};

/// Per-row argmax of head `h`; ties go to the lowest index.
std::vector<std::uint32_t> assign_clusters(const ClusterBank<float>& bank, std::size_t h, const NdArray<float>& m);
std::vector<std::uint32_t> argmax_rows(const NdArray<float>& probs);

/// Primary head with the lowest total; ties go to the lowest index.
std::size_t select_best_head(const LossBreakdown& breakdown, const std::vector<HeadSpec>& heads);

/// Full-dataset pass (no parameter update) used for head selection.
LossBreakdown evaluate_bank(const ClusterBank<float>& bank, const NdArray<float>& m, const NdArray<float>& m_prime,
                            const PerturbSpec& spec, double lambda, std::uint64_t seed, std::size_t batch_size);

/// Synthetic low-dropout view: inverted dropout at `rate` on the feature matrix.
data::FeatureMatrix feature_dropout(const data::FeatureMatrix& m, double rate, std::uint64_t seed);

struct FitOptions {
    /// m' for a given epoch; required.
    std::function<data::FeatureMatrix(std::size_t epoch)> m_prime;
    /// Accuracy of an assignment when labels are known.
    std::function<double(const std::vector<std::uint32_t>&)> score;
    std::function<void(const EpochRecord&)> on_epoch;
};

struct FitResult {
    std::vector<EpochRecord> history;
    LossBreakdown final_pass;  // full-dataset pass after the last epoch
    std::size_t best_head = 0;
    std::vector<std::uint32_t> assignments;  // best head on m
    double acc = -1;
};

/// Runs every configured epoch, then selects the best primary head on a final
/// full-dataset pass.
FitResult fit(Trainer& trainer, const data::FeatureMatrix& m, const FitOptions& options);

} // namespace dcl::cluster
