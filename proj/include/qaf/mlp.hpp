#pragma once

// Offline success-rate predictor: 48-component features from a requirement
// plus an architecture, labelled samples from execution records, a small
// dense MLP, and expected-time candidate selection.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "qaf/forge.hpp"
#include "qaf/rng.hpp"

namespace qaf {

struct UserRequirement {
    double q = 0.0;  ///< max final Q_loss
    double t = 0.0;  ///< max (modelled) seconds per run

    void validate() const;
};

inline constexpr int kFeatureLength = 48;
inline constexpr int kFeatureLayers = 9;

using FeatureVector = std::vector<double>;

/// [q, t, l] ++ ker[9] ++ chn[9] ++ pool[9] ++ unp[9] ++ res[9].
/// chn holds each layer's output channels, res the distance back to the
/// residual source (0 = none). A truncated-PCG candidate has l = 0 and its
/// iteration count in chn[0].
FeatureVector build_feature_vector(const UserRequirement& req, const SolverCandidate& cand);

/// Fraction of records with qloss <= q and time_s <= t.
double label_success_rate(const std::vector<ExecutionRecord>& records, const UserRequirement& req);

/// Cartesian product of the 10/25/50/75/90th percentiles of the finite
/// qloss and time values (duplicates removed).
std::vector<UserRequirement> requirement_grid(const std::vector<ExecutionRecord>& records);

/// Linear-interpolated percentile (0..100) of a non-empty sample.
double percentile(std::vector<double> v, double pct);

struct LabeledSample {
    std::string candidate_id;
    UserRequirement req;
    FeatureVector features;
    double label = 0.0;
};

/// One sample per (candidate, requirement); records are grouped by id.
std::vector<LabeledSample> generate_samples(const std::vector<ExecutionRecord>& records,
                                            const std::vector<SolverCandidate>& candidates,
                                            const std::vector<UserRequirement>& grid);

/// Layer widths, input (48) to output (1). variant 1..5; 3 is the default.
std::vector<int> mlp_topology(int variant = 3);

struct MlpModel {
    std::vector<int> sizes;
    std::vector<std::vector<double>> w;  ///< layer k: sizes[k+1] x sizes[k], row-major
    std::vector<std::vector<double>> b;
    std::vector<double> scale;           ///< features are divided by these before layer 0

    bool operator==(const MlpModel&) const = default;
};

/// He-initialised weights, zero biases, unit scale.
MlpModel make_mlp(const std::vector<int>& sizes, Rng& rng);

/// Per-component max |x| over the samples (1 where that is 0).
std::vector<double> fit_feature_scale(const std::vector<LabeledSample>& samples);

/// Sigmoid output in (0, 1). Throws std::invalid_argument on a length mismatch.
double predict_success(const MlpModel& mlp, const FeatureVector& features);

struct MlpTrainConfig {
    int epochs = 300;
    int batch_size = 16;
    double learning_rate = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    int topology = 3;

    void validate() const;
};

struct MlpTrainResult {
    MlpModel model;
    std::vector<double> loss_curve;  ///< mean squared error over each epoch
};

/// Mini-batch SGD with momentum on the mean squared error. Fits the feature
/// scale on the samples. Needs at least 10 samples; throws TrainingError
/// on a non-finite loss.
MlpTrainResult train_mlp(const std::vector<LabeledSample>& samples, const MlpTrainConfig& cfg);

double mlp_mse(const MlpModel& mlp, const std::vector<LabeledSample>& samples);

/// r * t_candidate + (1 - r) * t_exact.
double expected_total_time(double r_hat, double time_candidate, double time_exact);

struct SelectedCandidate {
    SolverCandidate cand;
    double r_hat = 0.0;
    double t_total = 0.0;
};

/// Keeps candidates whose expected total time beats req.t, ranked by r_hat
/// (descending; ties by mean_time, then id), at most `cap`.
std::vector<SelectedCandidate> select_candidates(const MlpModel& mlp, const std::vector<SolverCandidate>& frontier,
                                                 const UserRequirement& req, double time_exact, int cap = 5);
/// Same with precomputed success rates (one per frontier entry).
std::vector<SelectedCandidate> select_by_rate(const std::vector<SolverCandidate>& frontier,
                                              const std::vector<double>& r_hat, const UserRequirement& req,
                                              double time_exact, int cap = 5);

inline constexpr int kMlpFormatVersion = 1;

void save_mlp(std::ostream& os, const MlpModel& mlp);
MlpModel load_mlp(std::istream& is);

/// candidate_id, q, t, f0..f47, label
void write_samples_csv(std::ostream& os, const std::vector<LabeledSample>& samples);

}  // namespace qaf
