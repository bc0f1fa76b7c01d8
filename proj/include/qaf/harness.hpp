#pragma once

// Experiment driver: corpora, the offline pipeline (profile, Pareto, MLP,
// KNN), adaptive-vs-baseline comparisons, check-interval sweeps and the
// CumDivNorm / quality-loss correlation study. Every stage writes files
// under the output directory and records itself in MANIFEST.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "qaf/forge.hpp"
#include "qaf/mlp.hpp"
#include "qaf/nn.hpp"
#include "qaf/runtime.hpp"
#include "qaf/scenario.hpp"

namespace qaf {

/// A stage failed; what() is "<stage>: <cause>".
class StageError : public std::runtime_error {
  public:
    StageError(std::string stage, const std::string& cause)
        : std::runtime_error(stage + ": " + cause), stage_(std::move(stage)), cause_(cause) {}
    const std::string& stage() const { return stage_; }
    const std::string& cause() const { return cause_; }

  private:
    std::string stage_, cause_;
};

struct ExperimentConfig {
    std::string out_dir = "qaf_out";
    std::uint64_t seed = 1;  ///< master seed
    int train_problems = 64;
    int eval_problems = 64;
    std::uint64_t train_seed_base = 0;
    std::uint64_t eval_seed_base = 1u << 20;
    std::vector<int> grid_sizes{32, 64, 128};  ///< problem k uses grid_sizes[k % size]
    ScenarioSpec scenario;                     ///< dims are taken from grid_sizes
    SimConfig sim;

    std::string family = "iterative";  ///< "iterative" or "network"
    std::vector<int> iterative_iters{1, 2, 4, 8, 16, 32};
    // network family
    int seed_width = 8;
    int network_limit = 0;  ///< 0 keeps all 133, else an evenly strided subset
    int net_train_problems = 8;
    int net_sample_stride = 16;
    TrainConfig net_train;
    ForgePolicy forge;

    MlpTrainConfig mlp;
    RuntimeConfig runtime;
    int select_cap = 5;
    std::optional<double> req_q;  ///< unset: mean Q_loss of the slowest Pareto candidate
    std::optional<double> req_t;  ///< unset: mean exact-PCG time on the training corpus
    std::vector<int> sweep_intervals{5, 10, 20};
    int corr_first_step = 6;
    int frames = 4;  ///< eval problems whose density frames are written as PGM

    void validate() const;
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& cfg);
/// Throws FormatError on unreadable or malformed files.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Scenario seed of corpus entry `id`: (master << 32) + base + id.
std::uint64_t scenario_seed(const ExperimentConfig& cfg, std::uint64_t base, int id);

struct Corpus {
    std::vector<Scenario> scenarios;
    std::vector<Problem> problems;
};

Corpus make_corpus(const ExperimentConfig& cfg, bool eval);

/// (problem, candidate, step) sample of the correlation study.
struct CorrPoint {
    int problem_id = 0;
    std::string candidate_id;
    int step = 0;
    double cum_divnorm = 0.0;
    double qloss_ts = 0.0;  ///< vs the exact-PCG density at the same step
};

/// Steps first_step..n_steps of every candidate on every problem. Exact
/// references are computed per problem and dropped afterwards. Runs that
/// go non-finite are skipped.
std::vector<CorrPoint> correlation_points(const std::vector<SolverCandidate>& candidates,
                                          const std::vector<Problem>& problems, const SimConfig& sim,
                                          int first_step, int threads);

struct CorrelationSummary {
    double pearson = 0.0;
    double spearman = 0.0;
    std::string pearson_band, spearman_band;
    std::size_t n = 0;
};

/// Throws CorrelationError on degenerate data.
CorrelationSummary analyze_correlation(const std::vector<CorrPoint>& points);

/// One problem under one strategy.
struct ProblemOutcome {
    int problem_id = 0;
    double qloss = 0.0;
    double time = 0.0;  ///< modelled seconds
    bool success = false;
    bool restarted = false;
    int switches = 0;
    double predictor_seconds = 0.0;
    double sim_seconds = 0.0;
    std::vector<std::string> model_per_step;
};

struct StrategySummary {
    std::string strategy;
    double success_rate = 0.0;
    double mean_qloss = 0.0;
    double var_qloss = 0.0;
    double mean_time = 0.0;
    double restart_rate = 0.0;
    double overhead = 0.0;  ///< predictor seconds / simulation seconds
};

bool meets(const UserRequirement& req, double qloss, double time);

StrategySummary summarize_outcomes(const std::string& strategy, const std::vector<ProblemOutcome>& outcomes);

/// Outcomes of one candidate run alone, from its execution records.
std::vector<ProblemOutcome> single_outcomes(const std::vector<ExecutionRecord>& records, const std::string& id,
                                            const UserRequirement& req);

/// Candidate list per problem (same list for all, or one per problem).
using RankingFn = std::function<std::vector<RuntimeCandidate>(int problem_id)>;

std::vector<ProblemOutcome> adaptive_outcomes(const std::vector<Problem>& problems,
                                              const std::vector<Baseline>& baselines, const RankingFn& ranking,
                                              const UserRequirement& req, const QlossPredictor& predictor,
                                              const SimConfig& sim, const RuntimeConfig& rt, int threads,
                                              std::vector<AdaptiveRunReport>* reports = nullptr);

/// Frontier members faster than req.t on average, in a random order drawn
/// from `seed`, at most `cap`. r_hat is 0: no success prediction is used.
std::vector<RuntimeCandidate> random_order(const std::vector<SolverCandidate>& frontier, const UserRequirement& req,
                                           std::uint64_t seed, int cap);

std::vector<RuntimeCandidate> to_runtime(const std::vector<SelectedCandidate>& sel);

struct SweepRow {
    int interval = 0;
    double success_rate = 0.0;
    double mean_time = 0.0;
};

std::vector<SweepRow> sweep_check_interval(const std::vector<Problem>& problems, const std::vector<Baseline>& baselines,
                                           const std::vector<RuntimeCandidate>& ranked, const UserRequirement& req,
                                           const QlossPredictor& predictor, const SimConfig& sim,
                                           const RuntimeConfig& rt, const std::vector<int>& intervals, int threads);

/// Seed surrogate trained on pre-projection fields of exact runs.
TrainResult train_seed_network(const ExperimentConfig& cfg, const std::vector<Problem>& train, int threads);

/// Candidate pool of the configured family (trains the seed net for
/// "network").
std::vector<SolverCandidate> build_family(const ExperimentConfig& cfg, const std::vector<Problem>& train,
                                          int threads, TrainResult* seed_training = nullptr);

/// Writes candidates.json and, for networks, models/<id>.json.
void save_candidates(const std::filesystem::path& dir, const std::vector<SolverCandidate>& cands,
                     const std::string& manifest_name);
std::vector<SolverCandidate> load_candidates(const std::filesystem::path& dir, const std::string& manifest_name);

/// Stage names in pipeline order.
const std::vector<std::string>& pipeline_stages();

/// Runs one stage, reading earlier stages' artifacts from cfg.out_dir.
/// Failures surface as StageError after MANIFEST is marked incomplete.
void run_stage(const ExperimentConfig& cfg, const std::string& stage, int threads);

/// All stages in order; stops at the first failure.
void run_pipeline(const ExperimentConfig& cfg, int threads);

}  // namespace qaf
