#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "latentforge/corpus.hpp"
#include "latentforge/probes.hpp"

namespace lf {

// Deterministic latents paired with ground-truth factor indices. Rows align;
// both matrices are rectangular. Factors that take a single value across the
// dataset are excluded from every metric with a warning on stderr.
struct CodesFactors {
    std::vector<std::vector<double>> codes;         // [n, D]
    std::vector<std::vector<std::size_t>> factors;  // [n, F]

    void validate() const;  // throws ConfigError
    std::size_t n() const { return codes.size(); }
    std::size_t dims() const { return codes.empty() ? 0 : codes[0].size(); }
    std::size_t n_factors() const { return factors.empty() ? 0 : factors[0].size(); }
};

struct DciScores {
    double disentanglement = 0.0;
    double completeness = 0.0;
    double informativeness = 0.0;
};

// All scores are raw accuracies or normalized gaps in [0, 1]. z_min_var is
// an accuracy (higher = better); tabular output mirrors a lower-is-better
// column label for layout parity only, and the JSON report says so.
struct DisentanglementReport {
    double z_diff = 0.0;
    double z_min_var = 0.0;
    double mig = 0.0;
    DciScores dci;
};

// Corpus-level BLEU: geometric mean of modified n-gram precisions up to
// max_n times the brevity penalty. Orders of n with no candidate n-grams are
// skipped; zero match counts are smoothed with epsilon = 1e-9.
double bleu(const std::vector<std::string>& candidates,
            const std::vector<std::string>& references, std::size_t max_n = 4);

// Higgins-style metric: averaged |z1 - z2| over pairs sharing one factor's
// value, classified back to that factor by a multinomial linear model.
// Score = held-out accuracy over the last 20% of votes.
double z_diff(const CodesFactors& data, std::size_t n_votes, std::uint64_t seed,
              std::size_t pair_batch = 16);

// Kim-style metric: per vote, the argmin-variance dimension of a batch
// sharing one factor's value (codes normalized by global std) casts a vote
// for that factor; majority table classifies held-out votes.
double z_min_var(const CodesFactors& data, std::size_t n_votes, std::uint64_t seed,
                 std::size_t batch = 64);

// Mutual information gap over equal-frequency bins: mean over factors of
// (top MI - second MI) / factor entropy. Requires n >= 10 * n_bins.
double mig(const CodesFactors& data, std::size_t n_bins = 20);

// Eastwood-style scores from L1-regularized linear predictors per factor.
DciScores dci(const CodesFactors& data, std::uint64_t seed);

struct InterpolationScores {
    double quality = 0.0;     // fraction of grammatical intermediate steps
    double smoothness = 0.0;  // 1 - mean normalized token Levenshtein
};

// Scores interpolation paths produced by interpolate(); each report needs
// at least 3 steps. Quality uses the grammar parser as the oracle.
InterpolationScores interpolation_metrics(const FactorSpec& spec,
                                          const std::vector<ProbeReport>& paths);

struct PcaResult {
    std::vector<std::vector<double>> projected;   // [n, k]
    std::vector<std::vector<double>> components;  // [D, k], orthonormal columns
    std::vector<double> explained_variance;      // [k], non-increasing
};

// Top-k principal components of mean-centered codes via cyclic Jacobi on the
// covariance. Throws when n <= k or the covariance rank is below k.
PcaResult pca_project(const std::vector<std::vector<double>>& codes, std::size_t k = 2);

// JSON serialization of a full report, including the z_min_var orientation
// note in the metadata.
void write_report_json(const DisentanglementReport& report, const std::string& path);

// One grid cell of the evaluation table.
struct GridRow {
    std::string encoder_cfg;
    std::string decoder_cfg;
    bool annot = false;
    double bleu = 0.0;
    double z_diff = 0.0;
    double z_min_var = 0.0;
    double informativeness = 0.0;
};

// CSV columns: encoder_cfg,decoder_cfg,annot,bleu,z_diff,z_min_var,informativeness.
void write_grid_csv(const std::vector<GridRow>& rows, const std::string& path);

}  // namespace lf
