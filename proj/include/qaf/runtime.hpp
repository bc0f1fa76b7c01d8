#pragma once

// Online quality control: CumDivNorm bookkeeping, per-interval linear
// extrapolation, KNN lookup of final quality loss, and the model-switch
// loop with PCG restart.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "qaf/fluid.hpp"
#include "qaf/forge.hpp"
#include "qaf/mlp.hpp"

namespace qaf {

/// Appends history.back() + value (or value on an empty history).
void accumulate(std::vector<double>& history, double div_norm_value);

struct RegressionModel {
    double a = 0.0;  ///< slope
    double b = 0.0;  ///< intercept

    double operator()(double x) const { return a * x + b; }
};

/// Ordinary least squares. Throws FitError with fewer than two distinct x.
RegressionModel fit_regression(const std::vector<std::pair<double, double>>& points);

/// a*N + b, never below the last observed value.
double predict_cum_final(const RegressionModel& m, int final_step, double last_observed);

/// (CumDivNorm_final, Q_loss) pairs in an ordered tree.
class KnnDatabase {
  public:
    explicit KnnDatabase(int k = 4);

    void insert(double key, double qloss);
    std::size_t size() const { return tree_.size(); }
    int k() const { return k_; }

    /// The min(k, size) pairs closest to `query`, distance ties going to the
    /// smaller key. Sorted by key.
    std::vector<std::pair<double, double>> nearest(double query) const;

    /// Mean Q_loss of nearest(query). `degenerate` is set when the database
    /// holds fewer than k pairs. Throws std::invalid_argument when empty.
    double predict(double query, bool* degenerate = nullptr) const;

    /// In-order contents.
    std::vector<std::pair<double, double>> pairs() const;

  private:
    std::multimap<double, double> tree_;
    int k_;
};

struct KnnSample {
    std::string candidate_id;
    int problem_id = 0;
    double key = 0.0;  ///< CumDivNorm_final (per Fluid cell when normalised)
    double qloss = 0.0;
};

/// Every candidate on every problem; failed or non-finite runs are skipped
/// and counted in `skipped`.
std::vector<KnnSample> collect_knn_samples(const std::vector<SolverCandidate>& candidates,
                                           const std::vector<Problem>& problems,
                                           const std::vector<Baseline>& baselines, const SimConfig& cfg,
                                           int threads, bool per_cell, int* skipped = nullptr);

/// Pooled database, or only one candidate's samples when `only` is given.
KnnDatabase make_knn_database(const std::vector<KnnSample>& samples, int k,
                              const std::optional<std::string>& only = std::nullopt);

void write_knn_csv(std::ostream& os, const std::vector<KnnSample>& samples);
std::vector<KnnSample> read_knn_csv(std::istream& is);

struct RuntimeConfig {
    int check_interval = 5;
    int skip_initial = 5;
    int skip_in_interval = 2;
    double epsilon_rel = 0.05;
    int knn_k = 4;
    bool per_candidate_db = false;
    bool per_cell_key = true;  ///< divide CumDivNorm by the Fluid cell count

    void validate() const;
};

enum class SwitchKind { Continue, SwitchFaster, SwitchAccurate, Restart };
std::string to_string(SwitchKind k);

struct SwitchDecision {
    SwitchKind kind = SwitchKind::Continue;
    int target = -1;  ///< index into the candidate list for switches

    bool operator==(const SwitchDecision&) const = default;
};

/// One entry of the runtime's ranked candidate list.
struct RuntimeCandidate {
    SolverCandidate cand;
    double r_hat = 0.0;
};

/// Model-switch rule for one check. `ranked` is in preference order (r_hat
/// descending); `abandoned` flags candidates left by an earlier switch,
/// which are only revisited when nothing else lies in the required
/// direction.
SwitchDecision decide(double q_pred, const UserRequirement& req, int current,
                      const std::vector<RuntimeCandidate>& ranked, const std::vector<bool>& abandoned,
                      double epsilon_rel);

/// (model id, predicted final key) -> predicted final Q_loss.
using QlossPredictor = std::function<double(const std::string&, double)>;

/// KNN predictor over the samples (pooled, or per model with per_candidate).
QlossPredictor knn_predictor(const std::vector<KnnSample>& samples, const RuntimeConfig& rt);

struct IntervalRow {
    int interval = 0;
    int step = 0;  ///< last completed step
    std::string model_id;
    double cum_divnorm = 0.0;
    double predicted_final = 0.0;
    double predicted_qloss = 0.0;
    SwitchKind decision = SwitchKind::Continue;
    std::string target_id;
};

struct AdaptiveRunReport {
    std::vector<IntervalRow> intervals;
    std::vector<std::string> model_per_step;  ///< solver used for steps 1..N
    std::vector<double> cum_div_norm;         ///< of the returned trajectory
    ScalarField final_density;
    bool restarted = false;
    StepCost total;  ///< includes the abandoned work before a restart
    double qloss = 0.0;  ///< vs the baseline, when one was given
    double predictor_seconds = 0.0;
    double sim_seconds = 0.0;
    int restart_step = -1;

    double modeled_time() const { return total.modeled_time(); }
};

/// Runs one problem under the switch algorithm. Starts from ranked[0]; an
/// empty list runs PCG directly. With `baseline` the report's qloss is set.
AdaptiveRunReport run_adaptive(const SimState& initial, const std::vector<RuntimeCandidate>& ranked,
                               const UserRequirement& req, const QlossPredictor& predictor, const SimConfig& cfg,
                               const RuntimeConfig& rt, const ScalarField* baseline = nullptr);

/// interval_index, step, model_id, cum_divnorm, predicted_final, predicted_qloss, decision, target
void write_interval_csv(std::ostream& os, const AdaptiveRunReport& report);

}  // namespace qaf
