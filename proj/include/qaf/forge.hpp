#pragma once

// Candidate pool: structural edits of a seed network (shallow, narrow,
// pooling, dropout), the 133-model family schedule, the truncated-PCG
// substitute family, execution records and Pareto selection.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qaf/fluid.hpp"
#include "qaf/nn.hpp"
#include "qaf/rng.hpp"

namespace qaf {

enum class CandidateSource { Seed, Accurate, Shallow, Narrow, Pool, Dropout, Iterative };

std::string to_string(CandidateSource s);
CandidateSource candidate_source_from_string(const std::string& s);

struct SolverCandidate {
    std::string id;
    CandidateSource source = CandidateSource::Seed;
    std::optional<NetworkGraph> net;
    std::optional<int> iters;  ///< truncated-PCG iteration count
    double mean_qloss = 0.0;
    double mean_time = 0.0;  ///< modelled seconds per run
    std::int64_t flops = 0;  ///< mean FLOPs per run
    int deletions = 0;       ///< layers removed by op_shallow along the lineage
    std::string lineage;     ///< e.g. "seed>shallow(3)>narrow(2,r=1)"

    bool is_network() const { return net.has_value(); }
};

/// Solver instance for one run (instances are not shared across runs).
std::unique_ptr<PressureSolver> make_solver(const SolverCandidate& c);

struct ForgePolicy {
    int max_deletions = 1;
    double neuron_budget = 0.10;  ///< fraction of total neurons (32x32 reference)
    int reference_size = 32;
    LayerKind pool_kind = LayerKind::MaxPool;
};

/// Seed surrogate: Conv3(2->8) ReLU Conv3(8->8) ReLU Conv3(8->4) ReLU Conv3(4->1),
/// He-initialised from rng.
NetworkGraph make_seed_network(Rng& rng, int width = 8);

/// Removes layer `layer` (never the first or last). A deleted Conv is folded
/// into the next Conv through its kernel-summed 1x1 projection so channel
/// counts stay consistent; residual indices are remapped.
NetworkGraph op_shallow(const NetworkGraph& net, int layer);

/// Removes r output channels of Conv `layer`, chosen uniformly, and slices
/// the consumer's input channels to match.
NetworkGraph op_narrow(const NetworkGraph& net, int layer, int r, Rng& rng);

/// Inserts Pool(factor) before Conv `layer` and Unpool(factor) after it.
/// The discarded activations (input neurons * (1 - 1/f^2)) must fit the budget.
NetworkGraph op_pooling(const NetworkGraph& net, int layer, int factor, const ForgePolicy& policy = {});

/// Permanently removes max(1, floor(p*C)) output channels of Conv `layer`
/// (uniform draw), rescales the consumer by C/(C - dropped) and records a
/// Dropout(p) layer after it. Requires p * neurons(layer) within budget.
NetworkGraph op_dropout(const NetworkGraph& net, int layer, double p, Rng& rng, const ForgePolicy& policy = {});

/// Conv layers whose output feeds a later Conv (every Conv but the last).
std::vector<int> inner_convs(const NetworkGraph& net);
/// Activations in the output of `layer` at the reference resolution.
std::int64_t layer_neurons(const NetworkGraph& net, int layer, int ref = 32);

/// Applies op_shallow to a candidate, enforcing policy.max_deletions.
SolverCandidate shallow_candidate(const SolverCandidate& c, int layer, const std::string& id,
                                  const ForgePolicy& policy = {});

/// 5 accurate, 5 shallow, 50 narrow, 55 pool and 18 dropout candidates
/// (ids nn000..nn132), a pure function of (seed, rng seed).
std::vector<SolverCandidate> generate_family(const NetworkGraph& seed, std::uint64_t rng_seed,
                                             const ForgePolicy& policy = {});

/// Truncated MIC(0)-PCG candidates "it<m>".
std::vector<SolverCandidate> iterative_family(const std::vector<int>& iters = {1, 2, 4, 8, 16, 32});

struct ExecutionRecord {
    std::string candidate_id;
    int problem_id = 0;
    double qloss = 0.0;
    double time_s = 0.0;  ///< modelled
    std::int64_t flops = 0;
    bool failed = false;  ///< simulation failure; qloss is +inf

    bool operator==(const ExecutionRecord&) const = default;
};

struct Problem {
    int id = 0;
    SimState initial;
};

/// Exact-PCG reference run of one problem.
struct Baseline {
    int problem_id = 0;
    ScalarField final_density;
    std::vector<ScalarField> densities;  ///< every step, including t=0
    std::vector<double> cum_div_norm;
    StepCost total;
};

Baseline run_baseline(const Problem& p, const SimConfig& cfg, bool keep_densities = false);
std::vector<Baseline> run_baselines(const std::vector<Problem>& problems, const SimConfig& cfg, int threads,
                                    bool keep_densities = false);

/// Each candidate as the constant solver on each problem, records sorted by
/// (candidate order, problem id).
std::vector<ExecutionRecord> collect_records(const std::vector<SolverCandidate>& candidates,
                                             const std::vector<Problem>& problems,
                                             const std::vector<Baseline>& baselines, const SimConfig& cfg,
                                             int threads);

/// Fills mean_qloss / mean_time / flops from the records.
void summarize(std::vector<SolverCandidate>& candidates, const std::vector<ExecutionRecord>& records);

struct TimeQuality {
    double time = 0.0;
    double qloss = 0.0;
};

/// Indices (ascending) of the points not dominated in (time, qloss).
/// Exact duplicates do not dominate each other and are all kept.
std::vector<std::size_t> pareto_front(const std::vector<TimeQuality>& pts);
std::vector<SolverCandidate> pareto_select(const std::vector<SolverCandidate>& pool);

void write_records_csv(std::ostream& os, const std::vector<ExecutionRecord>& records);
std::vector<ExecutionRecord> read_records_csv(std::istream& is);

/// JSON manifest (id, source, lineage, metrics, iters).
void write_manifest(std::ostream& os, const std::vector<SolverCandidate>& candidates);

}  // namespace qaf
