#pragma once

// Unsupervised accuracy under the best one-to-one cluster/class matching, and
// the imbalanced-drop experiment driver.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dcl/cluster.hpp"
#include "dcl/data.hpp"

namespace dcl::eval {

namespace fs = std::filesystem;

/// Square k x k counts; rows are predicted clusters, columns true classes.
struct Contingency {
    std::size_t k = 0;
    std::size_t pred_alphabet = 0;
    std::size_t true_alphabet = 0;
    std::uint64_t total = 0;
    std::vector<std::uint64_t> counts;

    std::uint64_t at(std::size_t pred, std::size_t truth) const { return counts[pred * k + truth]; }
};

/// k = max(pred alphabet, true alphabet); missing rows or columns stay zero.
Contingency contingency(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> truth);

/// Row -> column assignment minimizing the summed cost of a square row-major matrix.
std::vector<std::size_t> hungarian_match(std::span<const double> cost, std::size_t rows, std::size_t cols);

struct EvalReport {
    double acc = 0;
    std::size_t k = 0;
    std::uint64_t n = 0;
    std::vector<std::uint32_t> mapping;  // cluster -> class
    std::vector<double> per_class;       // recall of each true class after mapping; -1 if absent
    std::vector<std::uint64_t> confusion;  // k x k, true class x mapped prediction
};

EvalReport clustering_accuracy(std::span<const std::uint32_t> pred, std::span<const std::uint32_t> truth);

std::string report_json(const EvalReport& r);

// ---------------------------------------------------------------------------
// Imbalance experiment

enum class DeltaSchedule { constant, variable };

const char* schedule_name(DeltaSchedule s);

struct HeadDeltas {
    double primary = 0;
    double overcluster = 0;
};

/// Tolerances for a drop fraction. The variable schedule is tabulated for
/// 10/20/30/40 percent; 0 percent uses the constant values.
HeadDeltas schedule_deltas(DeltaSchedule s, double fraction);

/// Row indices kept after dropping floor(fraction * count) random rows of each
/// listed class. Order of the kept rows follows the input.
std::vector<std::size_t> drop_rows(std::span<const std::uint32_t> labels, std::span<const std::uint32_t> classes,
                                   double fraction, std::uint64_t seed);

struct DropSpec {
    std::vector<std::uint32_t> classes = {0};
    std::vector<double> fractions = {0.0, 0.1, 0.2, 0.3, 0.4};
    std::vector<DeltaSchedule> schedules = {DeltaSchedule::constant, DeltaSchedule::variable};
};

struct ImbalanceRow {
    double fraction = 0;
    DeltaSchedule schedule = DeltaSchedule::constant;
    double acc = 0;                 // mean over seeds
    std::vector<double> per_class;  // mean over seeds
    std::vector<double> seed_acc;
};

struct ImbalanceSetup {
    std::size_t k = 3;
    std::size_t primary_heads = 5;
    std::size_t overcluster_heads = 1;
    std::vector<std::size_t> hidden = {64, 64};
    double init_std = 1e-2;
    double feature_dropout = 0.10;
    cluster::TrainConfig train;
};

/// For every (fraction, schedule) pair and seed: drop, retrain a fresh bank,
/// and score the selected head on the kept rows.
std::vector<ImbalanceRow> imbalance_experiment(const data::FeatureMatrix& features,
                                               std::span<const std::uint32_t> labels, const DropSpec& drop,
                                               const ImbalanceSetup& setup, std::span<const std::uint64_t> seeds);

/// One row per (drop, schedule, class): drop,schedule,class,acc
void write_imbalance_csv(const fs::path& path, const std::vector<ImbalanceRow>& rows);

// ---------------------------------------------------------------------------
// Embedding export

/// Projects rows onto their first two principal components (power iteration, deterministic).
NdArray<double> pca2(const NdArray<float>& m);

/// x,y,label,cluster per row.
void write_embedding_csv(const fs::path& path, const NdArray<double>& xy, std::span<const std::uint32_t> labels,
                         std::span<const std::uint32_t> clusters);

} // namespace dcl::eval
