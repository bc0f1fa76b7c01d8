#include "qaf/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <utility>

#include "qaf/csv.hpp"
#include "qaf/error.hpp"
#include "qaf/parallel.hpp"
#include "qaf/poisson.hpp"
#include "qaf/stats.hpp"

namespace qaf {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

void ExperimentConfig::validate() const {
    if (out_dir.empty()) throw std::invalid_argument("out_dir must not be empty");
    if (train_problems < 1 || eval_problems < 1) throw std::invalid_argument("corpus sizes must be >= 1");
    const std::uint64_t limit = std::uint64_t{1} << 32;
    if (train_seed_base + train_problems > limit || eval_seed_base + eval_problems > limit)
        throw std::invalid_argument("corpus seed ranges must stay below 2^32");
    const bool disjoint = train_seed_base + static_cast<std::uint64_t>(train_problems) <= eval_seed_base ||
                          eval_seed_base + static_cast<std::uint64_t>(eval_problems) <= train_seed_base;
    if (!disjoint) throw std::invalid_argument("train and eval seed ranges overlap");
    if (grid_sizes.empty()) throw std::invalid_argument("grid_sizes must not be empty");
    for (int g : grid_sizes) {
        ScenarioSpec s = scenario;
        s.dims = GridDims{g, g, 1.0};
        s.validate();
    }
    sim.validate();
    if (family != "iterative" && family != "network")
        throw std::invalid_argument("family must be \"iterative\" or \"network\"");
    if (family == "iterative") {
        if (iterative_iters.empty()) throw std::invalid_argument("iterative_iters must not be empty");
        for (int m : iterative_iters)
            if (m < 1) throw std::invalid_argument("iterative_iters entries must be >= 1");
    } else {
        if (seed_width < 2) throw std::invalid_argument("seed_width must be >= 2");
        if (network_limit < 0) throw std::invalid_argument("network_limit must be >= 0");
        if (net_train_problems < 1 || net_sample_stride < 1)
            throw std::invalid_argument("net_train_problems and net_sample_stride must be >= 1");
        net_train.validate();
    }
    mlp.validate();
    runtime.validate();
    if (select_cap < 1) throw std::invalid_argument("select_cap must be >= 1");
    if (req_q && !(*req_q >= 0.0)) throw std::invalid_argument("requirement q must be >= 0");
    if (req_t && !(*req_t > 0.0)) throw std::invalid_argument("requirement t must be > 0");
    for (int l : sweep_intervals)
        if (l < 3) throw std::invalid_argument("sweep intervals must be >= 3");
    if (corr_first_step < 1 || corr_first_step > sim.n_steps)
        throw std::invalid_argument("corr_first_step must lie in [1, n_steps]");
    if (frames < 0) throw std::invalid_argument("frames must be >= 0");
}

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw FormatError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) throw FormatError(where + ": unknown key \"" + it.key() + "\"");
}

template <typename T>
void get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        check_keys(j,
                   {"out_dir", "seed", "train_problems", "eval_problems", "train_seed_base", "eval_seed_base",
                    "grid_sizes", "scenario", "sim", "family", "iterative_iters", "seed_width", "network_limit",
                    "net_train_problems", "net_sample_stride", "net_train", "forge", "mlp", "runtime", "select_cap",
                    "requirement", "sweep_intervals", "corr_first_step", "frames"},
                   "config");
        get(j, "out_dir", c.out_dir);
        get(j, "seed", c.seed);
        get(j, "train_problems", c.train_problems);
        get(j, "eval_problems", c.eval_problems);
        get(j, "train_seed_base", c.train_seed_base);
        get(j, "eval_seed_base", c.eval_seed_base);
        get(j, "grid_sizes", c.grid_sizes);
        get(j, "family", c.family);
        get(j, "iterative_iters", c.iterative_iters);
        get(j, "seed_width", c.seed_width);
        get(j, "network_limit", c.network_limit);
        get(j, "net_train_problems", c.net_train_problems);
        get(j, "net_sample_stride", c.net_sample_stride);
        get(j, "select_cap", c.select_cap);
        get(j, "sweep_intervals", c.sweep_intervals);
        get(j, "corr_first_step", c.corr_first_step);
        get(j, "frames", c.frames);
        if (j.contains("scenario")) {
            const json& s = j.at("scenario");
            check_keys(s, {"max_obstacles", "modes", "max_wavenumber", "amplitude", "inflow_rate"}, "scenario");
            get(s, "max_obstacles", c.scenario.max_obstacles);
            get(s, "modes", c.scenario.modes);
            get(s, "max_wavenumber", c.scenario.max_wavenumber);
            get(s, "amplitude", c.scenario.amplitude);
            get(s, "inflow_rate", c.scenario.inflow_rate);
        }
        if (j.contains("sim")) {
            const json& s = j.at("sim");
            check_keys(s, {"n_steps", "dt", "rho", "gravity", "buoyancy", "kappa"}, "sim");
            get(s, "n_steps", c.sim.n_steps);
            get(s, "dt", c.sim.dt);
            get(s, "rho", c.sim.rho);
            get(s, "gravity", c.sim.gravity);
            get(s, "buoyancy", c.sim.buoyancy);
            get(s, "kappa", c.sim.kappa);
        }
        if (j.contains("net_train")) {
            const json& s = j.at("net_train");
            check_keys(s, {"epochs", "batch_size", "learning_rate", "momentum", "clip_norm"}, "net_train");
            get(s, "epochs", c.net_train.epochs);
            get(s, "batch_size", c.net_train.batch_size);
            get(s, "learning_rate", c.net_train.learning_rate);
            get(s, "momentum", c.net_train.momentum);
            get(s, "clip_norm", c.net_train.clip_norm);
        }
        if (j.contains("forge")) {
            const json& s = j.at("forge");
            check_keys(s, {"max_deletions", "neuron_budget", "reference_size", "pool_kind"}, "forge");
            get(s, "max_deletions", c.forge.max_deletions);
            get(s, "neuron_budget", c.forge.neuron_budget);
            get(s, "reference_size", c.forge.reference_size);
            if (s.contains("pool_kind")) c.forge.pool_kind = layer_kind_from_string(s.at("pool_kind").get<std::string>());
        }
        if (j.contains("mlp")) {
            const json& s = j.at("mlp");
            check_keys(s, {"epochs", "batch_size", "learning_rate", "momentum", "topology"}, "mlp");
            get(s, "epochs", c.mlp.epochs);
            get(s, "batch_size", c.mlp.batch_size);
            get(s, "learning_rate", c.mlp.learning_rate);
            get(s, "momentum", c.mlp.momentum);
            get(s, "topology", c.mlp.topology);
        }
        if (j.contains("runtime")) {
            const json& s = j.at("runtime");
            check_keys(s,
                       {"check_interval", "skip_initial", "skip_in_interval", "epsilon_rel", "knn_k",
                        "per_candidate_db", "per_cell_key"},
                       "runtime");
            get(s, "check_interval", c.runtime.check_interval);
            get(s, "skip_initial", c.runtime.skip_initial);
            get(s, "skip_in_interval", c.runtime.skip_in_interval);
            get(s, "epsilon_rel", c.runtime.epsilon_rel);
            get(s, "knn_k", c.runtime.knn_k);
            get(s, "per_candidate_db", c.runtime.per_candidate_db);
            get(s, "per_cell_key", c.runtime.per_cell_key);
        }
        if (j.contains("requirement")) {
            const json& s = j.at("requirement");
            check_keys(s, {"q", "t"}, "requirement");
            if (s.contains("q") && !s.at("q").is_null()) c.req_q = s.at("q").get<double>();
            if (s.contains("t") && !s.at("t").is_null()) c.req_t = s.at("t").get<double>();
        }
    } catch (const json::exception& e) {
        throw FormatError(std::string("config: ") + e.what());
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw FormatError(std::string("config: ") + e.what());
    }
    return c;
}

json config_to_json(const ExperimentConfig& c) {
    json j;
    j["out_dir"] = c.out_dir;
    j["seed"] = c.seed;
    j["train_problems"] = c.train_problems;
    j["eval_problems"] = c.eval_problems;
    j["train_seed_base"] = c.train_seed_base;
    j["eval_seed_base"] = c.eval_seed_base;
    j["grid_sizes"] = c.grid_sizes;
    j["scenario"] = {{"max_obstacles", c.scenario.max_obstacles},
                     {"modes", c.scenario.modes},
                     {"max_wavenumber", c.scenario.max_wavenumber},
                     {"amplitude", c.scenario.amplitude},
                     {"inflow_rate", c.scenario.inflow_rate}};
    j["sim"] = {{"n_steps", c.sim.n_steps}, {"dt", c.sim.dt},           {"rho", c.sim.rho},
                {"gravity", c.sim.gravity}, {"buoyancy", c.sim.buoyancy}, {"kappa", c.sim.kappa}};
    j["family"] = c.family;
    j["iterative_iters"] = c.iterative_iters;
    j["seed_width"] = c.seed_width;
    j["network_limit"] = c.network_limit;
    j["net_train_problems"] = c.net_train_problems;
    j["net_sample_stride"] = c.net_sample_stride;
    j["net_train"] = {{"epochs", c.net_train.epochs},
                      {"batch_size", c.net_train.batch_size},
                      {"learning_rate", c.net_train.learning_rate},
                      {"momentum", c.net_train.momentum},
                      {"clip_norm", c.net_train.clip_norm}};
    j["forge"] = {{"max_deletions", c.forge.max_deletions},
                  {"neuron_budget", c.forge.neuron_budget},
                  {"reference_size", c.forge.reference_size},
                  {"pool_kind", to_string(c.forge.pool_kind)}};
    j["mlp"] = {{"epochs", c.mlp.epochs},
                {"batch_size", c.mlp.batch_size},
                {"learning_rate", c.mlp.learning_rate},
                {"momentum", c.mlp.momentum},
                {"topology", c.mlp.topology}};
    j["runtime"] = {{"check_interval", c.runtime.check_interval},
                    {"skip_initial", c.runtime.skip_initial},
                    {"skip_in_interval", c.runtime.skip_in_interval},
                    {"epsilon_rel", c.runtime.epsilon_rel},
                    {"knn_k", c.runtime.knn_k},
                    {"per_candidate_db", c.runtime.per_candidate_db},
                    {"per_cell_key", c.runtime.per_cell_key}};
    j["select_cap"] = c.select_cap;
    j["requirement"] = {{"q", c.req_q ? json(*c.req_q) : json(nullptr)},
                        {"t", c.req_t ? json(*c.req_t) : json(nullptr)}};
    j["sweep_intervals"] = c.sweep_intervals;
    j["corr_first_step"] = c.corr_first_step;
    j["frames"] = c.frames;
    return j;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("config " + path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

std::uint64_t scenario_seed(const ExperimentConfig& cfg, std::uint64_t base, int id) {
    return (cfg.seed << 32) + base + static_cast<std::uint64_t>(id);
}

namespace {

// splitmix64 finaliser over (master seed, tag)
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
    std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + tag + 0x632BE59BD9B4E019ULL;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

enum SeedTag : std::uint64_t { kTagNetInit = 1, kTagNetTrain, kTagFamily, kTagMlp, kTagRandomOrder };

}  // namespace

Corpus make_corpus(const ExperimentConfig& cfg, bool eval) {
    const int count = eval ? cfg.eval_problems : cfg.train_problems;
    const std::uint64_t base = eval ? cfg.eval_seed_base : cfg.train_seed_base;
    Corpus c;
    for (int k = 0; k < count; ++k) {
        ScenarioSpec spec = cfg.scenario;
        const int g = cfg.grid_sizes[static_cast<std::size_t>(k) % cfg.grid_sizes.size()];
        spec.dims = GridDims{g, g, 1.0};
        c.scenarios.push_back(generate_scenario(spec, scenario_seed(cfg, base, k), k));
        c.problems.push_back(Problem{k, build_initial_state(c.scenarios.back())});
    }
    return c;
}

// ----------------------------------------------------------- correlation

std::vector<CorrPoint> correlation_points(const std::vector<SolverCandidate>& candidates,
                                          const std::vector<Problem>& problems, const SimConfig& sim,
                                          int first_step, int threads) {
    sim.validate();
    if (first_step < 1 || first_step > sim.n_steps) throw std::invalid_argument("first_step out of range");
    std::vector<std::vector<CorrPoint>> per(problems.size());
    parallel_for(problems.size(), threads, [&](std::size_t p) {
        const Problem& prob = problems[p];
        SimulateOptions opts;
        opts.keep_states = false;
        PcgPressureSolver exact;
        const Trajectory ref = simulate(prob.initial, sim, [&](int) -> PressureSolver& { return exact; }, opts);
        for (const auto& c : candidates) {
            auto solver = make_solver(c);
            Trajectory tr;
            try {
                tr = simulate(prob.initial, sim, [&](int) -> PressureSolver& { return *solver; }, opts);
            } catch (const NumericError&) {
                continue;
            }
            std::vector<CorrPoint> pts;
            bool finite = true;
            for (int n = first_step; n <= sim.n_steps && finite; ++n) {
                CorrPoint pt;
                pt.problem_id = prob.id;
                pt.candidate_id = c.id;
                pt.step = n;
                pt.cum_divnorm = tr.cum_div_norm[static_cast<std::size_t>(n - 1)];
                pt.qloss_ts = quality_loss(ref.densities[static_cast<std::size_t>(n)],
                                           tr.densities[static_cast<std::size_t>(n)]);
                finite = std::isfinite(pt.cum_divnorm) && std::isfinite(pt.qloss_ts);
                pts.push_back(std::move(pt));
            }
            if (finite) per[p].insert(per[p].end(), pts.begin(), pts.end());
        }
    });
    std::vector<CorrPoint> out;
    for (auto& v : per) out.insert(out.end(), v.begin(), v.end());
    return out;
}

CorrelationSummary analyze_correlation(const std::vector<CorrPoint>& points) {
    std::vector<double> x, y;
    for (const auto& p : points) {
        x.push_back(p.cum_divnorm);
        y.push_back(p.qloss_ts);
    }
    CorrelationSummary s;
    s.n = points.size();
    s.pearson = pearson(x, y);
    s.spearman = spearman(x, y);
    s.pearson_band = association_band(s.pearson);
    s.spearman_band = association_band(s.spearman);
    return s;
}

// ------------------------------------------------------------ strategies

bool meets(const UserRequirement& req, double qloss, double time) { return qloss <= req.q && time <= req.t; }

StrategySummary summarize_outcomes(const std::string& strategy, const std::vector<ProblemOutcome>& outcomes) {
    if (outcomes.empty()) throw std::invalid_argument("no outcomes for " + strategy);
    StrategySummary s;
    s.strategy = strategy;
    std::vector<double> q, t;
    double pred = 0.0, simsec = 0.0;
    int ok = 0, restarts = 0;
    for (const auto& o : outcomes) {
        q.push_back(o.qloss);
        t.push_back(o.time);
        ok += o.success ? 1 : 0;
        restarts += o.restarted ? 1 : 0;
        pred += o.predictor_seconds;
        simsec += o.sim_seconds;
    }
    const double n = static_cast<double>(outcomes.size());
    s.success_rate = ok / n;
    s.restart_rate = restarts / n;
    s.mean_time = mean(t);
    // a failed single run has infinite loss; the spread is then infinite
    if (std::all_of(q.begin(), q.end(), [](double v) { return std::isfinite(v); })) {
        s.mean_qloss = mean(q);
        s.var_qloss = variance(q);
    } else {
        s.mean_qloss = s.var_qloss = std::numeric_limits<double>::infinity();
    }
    s.overhead = simsec > 0.0 ? pred / simsec : 0.0;
    return s;
}

std::vector<ProblemOutcome> single_outcomes(const std::vector<ExecutionRecord>& records, const std::string& id,
                                            const UserRequirement& req) {
    std::vector<ProblemOutcome> out;
    for (const auto& r : records) {
        if (r.candidate_id != id) continue;
        ProblemOutcome o;
        o.problem_id = r.problem_id;
        o.qloss = r.qloss;
        o.time = r.time_s;
        o.success = !r.failed && meets(req, r.qloss, r.time_s);
        out.push_back(std::move(o));
    }
    if (out.empty()) throw std::invalid_argument("no records for candidate " + id);
    return out;
}

std::vector<ProblemOutcome> adaptive_outcomes(const std::vector<Problem>& problems,
                                              const std::vector<Baseline>& baselines, const RankingFn& ranking,
                                              const UserRequirement& req, const QlossPredictor& predictor,
                                              const SimConfig& sim, const RuntimeConfig& rt, int threads,
                                              std::vector<AdaptiveRunReport>* reports) {
    if (baselines.size() != problems.size()) throw std::invalid_argument("one baseline per problem required");
    std::vector<ProblemOutcome> out(problems.size());
    std::vector<AdaptiveRunReport> reps(problems.size());
    parallel_for(problems.size(), threads, [&](std::size_t p) {
        const Problem& prob = problems[p];
        if (baselines[p].problem_id != prob.id) throw std::invalid_argument("baseline order mismatch");
        AdaptiveRunReport r = run_adaptive(prob.initial, ranking(prob.id), req, predictor, sim, rt,
                                           &baselines[p].final_density);
        ProblemOutcome& o = out[p];
        o.problem_id = prob.id;
        o.qloss = r.qloss;
        o.time = r.modeled_time();
        o.success = meets(req, o.qloss, o.time);
        o.restarted = r.restarted;
        for (const auto& row : r.intervals)
            if (row.decision == SwitchKind::SwitchFaster || row.decision == SwitchKind::SwitchAccurate) ++o.switches;
        o.predictor_seconds = r.predictor_seconds;
        o.sim_seconds = r.sim_seconds;
        o.model_per_step = r.model_per_step;
        if (reports) reps[p] = std::move(r);
    });
    if (reports) *reports = std::move(reps);
    return out;
}

std::vector<RuntimeCandidate> random_order(const std::vector<SolverCandidate>& frontier, const UserRequirement& req,
                                           std::uint64_t seed, int cap) {
    std::vector<RuntimeCandidate> pool;
    for (const auto& c : frontier)
        if (c.mean_time < req.t) pool.push_back(RuntimeCandidate{c, 0.0});
    Rng rng(seed);
    const auto order = rng.sample_without_replacement(pool.size(), pool.size());
    std::vector<RuntimeCandidate> out;
    for (std::size_t k = 0; k < order.size() && static_cast<int>(out.size()) < cap; ++k) out.push_back(pool[order[k]]);
    return out;
}

std::vector<RuntimeCandidate> to_runtime(const std::vector<SelectedCandidate>& sel) {
    std::vector<RuntimeCandidate> out;
    for (const auto& s : sel) out.push_back(RuntimeCandidate{s.cand, s.r_hat});
    return out;
}

std::vector<SweepRow> sweep_check_interval(const std::vector<Problem>& problems, const std::vector<Baseline>& baselines,
                                           const std::vector<RuntimeCandidate>& ranked, const UserRequirement& req,
                                           const QlossPredictor& predictor, const SimConfig& sim,
                                           const RuntimeConfig& rt, const std::vector<int>& intervals, int threads) {
    std::vector<SweepRow> rows;
    for (int l : intervals) {
        if (l < 3) throw std::invalid_argument("check interval must be >= 3");
        RuntimeConfig r = rt;
        r.check_interval = l;
        const auto outs = adaptive_outcomes(problems, baselines, [&](int) { return ranked; }, req, predictor, sim, r,
                                            threads);
        const StrategySummary s = summarize_outcomes("L=" + std::to_string(l), outs);
        rows.push_back(SweepRow{l, s.success_rate, s.mean_time});
    }
    return rows;
}

// --------------------------------------------------------------- family

TrainResult train_seed_network(const ExperimentConfig& cfg, const std::vector<Problem>& train, int threads) {
    const std::size_t n = std::min<std::size_t>(train.size(), static_cast<std::size_t>(cfg.net_train_problems));
    std::vector<std::vector<TrainSample>> per(n);
    parallel_for(n, threads, [&](std::size_t p) {
        PcgPressureSolver exact;
        SimulateOptions opts;
        opts.keep_densities = false;
        const Trajectory tr = simulate(train[p].initial, cfg.sim, [&](int) -> PressureSolver& { return exact; }, opts);
        for (int s = 0; s < cfg.sim.n_steps; s += cfg.net_sample_stride) {
            const SimState& st = tr.snapshots[static_cast<std::size_t>(s)];
            per[p].push_back(TrainSample{advance_to_projection(st, cfg.sim).vel, st.geo});
        }
    });
    std::vector<TrainSample> data;
    for (auto& v : per) data.insert(data.end(), v.begin(), v.end());
    Rng rng(derive_seed(cfg.seed, kTagNetInit));
    const NetworkGraph seed = make_seed_network(rng, cfg.seed_width);
    TrainConfig tc = cfg.net_train;
    tc.seed = derive_seed(cfg.seed, kTagNetTrain);
    tc.dt = cfg.sim.dt;
    tc.rho = cfg.sim.rho;
    tc.kappa = cfg.sim.kappa;
    return qaf::train(seed, data, tc);
}

std::vector<SolverCandidate> build_family(const ExperimentConfig& cfg, const std::vector<Problem>& train, int threads,
                                          TrainResult* seed_training) {
    if (cfg.family == "iterative") return iterative_family(cfg.iterative_iters);
    TrainResult tr = train_seed_network(cfg, train, threads);
    std::vector<SolverCandidate> fam = generate_family(tr.net, derive_seed(cfg.seed, kTagFamily), cfg.forge);
    if (cfg.network_limit > 0 && static_cast<std::size_t>(cfg.network_limit) < fam.size()) {
        std::vector<SolverCandidate> sub;
        const std::size_t m = static_cast<std::size_t>(cfg.network_limit);
        for (std::size_t k = 0; k < m; ++k) sub.push_back(fam[k * fam.size() / m]);
        fam = std::move(sub);
    }
    if (seed_training) *seed_training = std::move(tr);
    return fam;
}

namespace {

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("missing artifact " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

void save_candidates(const fs::path& dir, const std::vector<SolverCandidate>& cands, const std::string& manifest_name) {
    std::ostringstream os;
    write_manifest(os, cands);
    write_file(dir / manifest_name, os.str());
    for (const auto& c : cands) {
        if (!c.net) continue;
        std::ostringstream m;
        save_network(m, *c.net);
        write_file(dir / "models" / (c.id + ".json"), m.str());
    }
}

std::vector<SolverCandidate> load_candidates(const fs::path& dir, const std::string& manifest_name) {
    json arr;
    try {
        arr = json::parse(read_file(dir / manifest_name));
    } catch (const json::exception& e) {
        throw FormatError(manifest_name + ": " + e.what());
    }
    if (!arr.is_array()) throw FormatError(manifest_name + ": expected an array");
    std::vector<SolverCandidate> out;
    try {
        for (const auto& j : arr) {
            SolverCandidate c;
            c.id = j.at("id").get<std::string>();
            c.source = candidate_source_from_string(j.at("source").get<std::string>());
            c.lineage = j.at("lineage").get<std::string>();
            c.deletions = j.at("deletions").get<int>();
            c.mean_qloss = j.at("mean_qloss").is_null() ? std::numeric_limits<double>::infinity()
                                                        : j.at("mean_qloss").get<double>();
            c.mean_time = j.at("mean_time").get<double>();
            c.flops = j.at("flops").get<std::int64_t>();
            if (j.contains("iters")) {
                c.iters = j.at("iters").get<int>();
            } else {
                std::istringstream m(read_file(dir / "models" / (c.id + ".json")));
                c.net = load_network(m);
            }
            out.push_back(std::move(c));
        }
    } catch (const json::exception& e) {
        throw FormatError(manifest_name + ": " + e.what());
    }
    return out;
}

// -------------------------------------------------------------- pipeline

const std::vector<std::string>& pipeline_stages() {
    static const std::vector<std::string> s{"generate",     "profile",     "select",        "train-mlp",   "build-knn",
                                            "run-adaptive", "compare",     "sweep-interval", "analyze-corr"};
    return s;
}

namespace {

std::string fmt(double x) { return format_double(x); }

std::string csv_text(const CsvTable& t) {
    std::ostringstream os;
    write_csv(os, t);
    return os.str();
}

CsvTable read_csv_file(const fs::path& path) {
    std::istringstream in(read_file(path));
    return read_csv(in);
}

std::string flag(bool b) { return b ? "1" : "0"; }

// Shared between stages of one process so the exact references are
// computed once per corpus.
class Workspace {
  public:
    Workspace(const ExperimentConfig& cfg, int threads) : cfg_(cfg), threads_(std::max(1, threads)), dir_(cfg.out_dir) {}

    const ExperimentConfig& cfg() const { return cfg_; }
    int threads() const { return threads_; }
    const fs::path& dir() const { return dir_; }

    const Corpus& corpus(bool eval) {
        auto& slot = eval ? eval_ : train_;
        if (!slot) slot = make_corpus(cfg_, eval);
        return *slot;
    }
    const std::vector<Baseline>& baselines(bool eval) {
        auto& slot = eval ? eval_base_ : train_base_;
        if (!slot) slot = run_baselines(corpus(eval).problems, cfg_.sim, threads_);
        return *slot;
    }

    void put(const std::string& rel, const std::string& text) {
        write_file(dir_ / rel, text);
        written_.push_back(rel);
    }
    std::vector<std::string> take_written() { return std::exchange(written_, {}); }

  private:
    ExperimentConfig cfg_;
    int threads_;
    fs::path dir_;
    std::optional<Corpus> train_, eval_;
    std::optional<std::vector<Baseline>> train_base_, eval_base_;
    std::vector<std::string> written_;
};

struct Requirement {
    UserRequirement req;
    double time_exact = 0.0;
};

Requirement load_requirement(const Workspace& ws) {
    json j;
    try {
        j = json::parse(read_file(ws.dir() / "requirement.json"));
        return Requirement{UserRequirement{j.at("q").get<double>(), j.at("t").get<double>()},
                           j.at("time_exact").get<double>()};
    } catch (const json::exception& e) {
        throw FormatError(std::string("requirement.json: ") + e.what());
    }
}

std::vector<ExecutionRecord> load_records(const Workspace& ws, const std::string& name) {
    std::istringstream in(read_file(ws.dir() / name));
    return read_records_csv(in);
}

MlpModel load_mlp_file(const Workspace& ws) {
    std::istringstream in(read_file(ws.dir() / "mlp.json"));
    return load_mlp(in);
}

std::vector<KnnSample> load_knn(const Workspace& ws) {
    std::istringstream in(read_file(ws.dir() / "knn.csv"));
    return read_knn_csv(in);
}

std::string records_text(const std::vector<ExecutionRecord>& r) {
    std::ostringstream os;
    write_records_csv(os, r);
    return os.str();
}

std::string pgm_text(const ScalarField& f) {
    std::ostringstream os;
    write_density_pgm(os, f);
    return os.str();
}

std::vector<RuntimeCandidate> mlp_ranking(Workspace& ws, const std::vector<SolverCandidate>& frontier,
                                          const Requirement& r, std::vector<SelectedCandidate>* sel_out = nullptr) {
    const MlpModel mlp = load_mlp_file(ws);
    auto sel = select_candidates(mlp, frontier, r.req, r.time_exact, ws.cfg().select_cap);
    auto out = to_runtime(sel);
    if (sel_out) *sel_out = std::move(sel);
    return out;
}

// ---- stages

void stage_generate(Workspace& ws) {
    json all = json::object();
    for (bool eval : {false, true}) {
        const std::string tag = eval ? "eval" : "train";
        const Corpus& c = ws.corpus(eval);
        CsvTable t;
        t.header = {"problem_id", "seed", "nx", "ny", "obstacles", "modes", "inflow_i0", "inflow_j0", "inflow_i1",
                    "inflow_j1", "fluid_cells"};
        json arr = json::array();
        for (std::size_t k = 0; k < c.scenarios.size(); ++k) {
            const Scenario& s = c.scenarios[k];
            t.rows.push_back({std::to_string(s.id), std::to_string(s.seed), std::to_string(s.dims.nx),
                              std::to_string(s.dims.ny), std::to_string(s.obstacles.size()),
                              std::to_string(s.modes.size()), std::to_string(s.inflow.i0), std::to_string(s.inflow.j0),
                              std::to_string(s.inflow.i1), std::to_string(s.inflow.j1),
                              std::to_string(c.problems[k].initial.geo.fluid_count())});
            json obs = json::array();
            for (const auto& o : s.obstacles)
                obs.push_back({{"shape", o.shape == Obstacle::Shape::Circle ? "circle" : "rect"},
                               {"center", {o.cx, o.cy}},
                               {"size", {o.sx, o.sy}}});
            json modes = json::array();
            for (const auto& m : s.modes)
                modes.push_back({{"kx", m.kx}, {"ky", m.ky}, {"amp", m.amp}, {"phase", {m.phase_x, m.phase_y}}});
            arr.push_back({{"id", s.id},
                           {"seed", s.seed},
                           {"dims", {s.dims.nx, s.dims.ny}},
                           {"obstacles", obs},
                           {"inflow", {s.inflow.i0, s.inflow.j0, s.inflow.i1, s.inflow.j1, s.inflow.rate}},
                           {"modes", modes},
                           {"amplitude", s.amplitude}});
        }
        all[tag] = std::move(arr);
        ws.put("scenarios_" + tag + ".csv", csv_text(t));

        const auto& base = ws.baselines(eval);
        CsvTable b;
        b.header = {"problem_id", "modeled_time", "flops", "cum_divnorm_final"};
        for (const auto& x : base)
            b.rows.push_back({std::to_string(x.problem_id), fmt(x.total.modeled_time()), std::to_string(x.total.flops),
                              fmt(x.cum_div_norm.empty() ? 0.0 : x.cum_div_norm.back())});
        ws.put("baselines_" + tag + ".csv", csv_text(b));
    }
    ws.put("scenarios.json", all.dump(1) + "\n");
    const Corpus& ev = ws.corpus(true);
    const auto& eb = ws.baselines(true);
    for (int k = 0; k < std::min<int>(ws.cfg().frames, static_cast<int>(ev.problems.size())); ++k) {
        ws.put("frames/eval_" + std::to_string(k) + "_initial.pgm", pgm_text(ev.problems[k].initial.density));
        ws.put("frames/eval_" + std::to_string(k) + "_exact.pgm", pgm_text(eb[k].final_density));
    }
}

void stage_profile(Workspace& ws) {
    const Corpus& train = ws.corpus(false);
    TrainResult seed_training;
    std::vector<SolverCandidate> fam = build_family(ws.cfg(), train.problems, ws.threads(), &seed_training);
    if (ws.cfg().family == "network") {
        CsvTable t;
        t.header = {"epoch", "loss"};
        for (std::size_t e = 0; e < seed_training.loss_curve.size(); ++e)
            t.rows.push_back({std::to_string(e), fmt(seed_training.loss_curve[e])});
        ws.put("seed_train_loss.csv", csv_text(t));
        std::ostringstream m;
        save_network(m, seed_training.net);
        ws.put("models/seed.json", m.str());
    }
    const auto records = collect_records(fam, train.problems, ws.baselines(false), ws.cfg().sim, ws.threads());
    summarize(fam, records);
    ws.put("records.csv", records_text(records));
    std::ostringstream os;
    write_manifest(os, fam);
    ws.put("candidates.json", os.str());
    for (const auto& c : fam) {
        if (!c.net) continue;
        std::ostringstream m;
        save_network(m, *c.net);
        ws.put("models/" + c.id + ".json", m.str());
    }
}

void stage_select(Workspace& ws) {
    std::vector<SolverCandidate> cands = load_candidates(ws.dir(), "candidates.json");
    const auto records = load_records(ws, "records.csv");
    summarize(cands, records);
    const auto frontier = pareto_select(cands);
    if (frontier.empty()) throw std::runtime_error("empty Pareto frontier");

    CsvTable t;
    t.header = {"candidate_id", "source", "mean_time", "mean_qloss", "flops"};
    for (const auto& c : frontier)
        t.rows.push_back({c.id, to_string(c.source), fmt(c.mean_time), fmt(c.mean_qloss), std::to_string(c.flops)});
    ws.put("pareto.csv", csv_text(t));
    std::ostringstream os;
    write_manifest(os, frontier);
    ws.put("pareto.json", os.str());

    // slowest frontier member, ties broken by id
    const SolverCandidate* slowest = &frontier.front();
    for (const auto& c : frontier)
        if (c.mean_time > slowest->mean_time || (c.mean_time == slowest->mean_time && c.id > slowest->id))
            slowest = &c;
    const CsvTable base = read_csv_file(ws.dir() / "baselines_train.csv");
    double t_exact = 0.0;
    for (std::size_t r = 0; r < base.rows.size(); ++r) t_exact += base.number(r, "modeled_time");
    t_exact /= static_cast<double>(std::max<std::size_t>(1, base.rows.size()));
    const ExperimentConfig& cfg = ws.cfg();
    json req{{"q", cfg.req_q.value_or(slowest->mean_qloss)},
             {"t", cfg.req_t.value_or(t_exact)},
             {"q_source", cfg.req_q ? "config" : "mean qloss of " + slowest->id},
             {"t_source", cfg.req_t ? "config" : "mean exact time"},
             {"time_exact", t_exact}};
    ws.put("requirement.json", req.dump(1) + "\n");
}

void stage_train_mlp(Workspace& ws) {
    const auto cands = load_candidates(ws.dir(), "candidates.json");
    const auto records = load_records(ws, "records.csv");
    const auto samples = generate_samples(records, cands, requirement_grid(records));
    std::ostringstream s;
    write_samples_csv(s, samples);
    ws.put("samples.csv", s.str());
    MlpTrainConfig mc = ws.cfg().mlp;
    mc.seed = derive_seed(ws.cfg().seed, kTagMlp);
    const MlpTrainResult res = train_mlp(samples, mc);
    std::ostringstream m;
    save_mlp(m, res.model);
    ws.put("mlp.json", m.str());
    CsvTable t;
    t.header = {"epoch", "mse"};
    for (std::size_t e = 0; e < res.loss_curve.size(); ++e)
        t.rows.push_back({std::to_string(e), fmt(res.loss_curve[e])});
    ws.put("mlp_loss.csv", csv_text(t));
}

void stage_build_knn(Workspace& ws) {
    const auto frontier = load_candidates(ws.dir(), "pareto.json");
    int skipped = 0;
    const auto samples = collect_knn_samples(frontier, ws.corpus(false).problems, ws.baselines(false), ws.cfg().sim,
                                             ws.threads(), ws.cfg().runtime.per_cell_key, &skipped);
    if (samples.empty()) throw std::runtime_error("no usable knn samples");
    std::ostringstream os;
    write_knn_csv(os, samples);
    ws.put("knn.csv", os.str());
}

CsvTable outcome_table(const std::string& strategy, const std::vector<ProblemOutcome>& outs, CsvTable t = {}) {
    if (t.header.empty()) t.header = {"strategy", "problem_id", "qloss", "time", "success", "restarted", "switches"};
    for (const auto& o : outs)
        t.rows.push_back({strategy, std::to_string(o.problem_id), fmt(o.qloss), fmt(o.time), flag(o.success),
                          flag(o.restarted), std::to_string(o.switches)});
    return t;
}

std::vector<ProblemOutcome> outcomes_from_table(const CsvTable& t) {
    std::vector<ProblemOutcome> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        ProblemOutcome o;
        o.problem_id = std::stoi(t.at(r, "problem_id"));
        o.qloss = t.number(r, "qloss");
        o.time = t.number(r, "time");
        o.success = t.at(r, "success") == "1";
        o.restarted = t.at(r, "restarted") == "1";
        o.switches = std::stoi(t.at(r, "switches"));
        out.push_back(std::move(o));
    }
    return out;
}

QlossPredictor make_predictor(Workspace& ws) { return knn_predictor(load_knn(ws), ws.cfg().runtime); }

void stage_run_adaptive(Workspace& ws) {
    const auto frontier = load_candidates(ws.dir(), "pareto.json");
    const Requirement r = load_requirement(ws);
    std::vector<SelectedCandidate> sel;
    const auto ranked = mlp_ranking(ws, frontier, r, &sel);
    CsvTable s;
    s.header = {"rank", "candidate_id", "r_hat", "mean_time", "mean_qloss", "t_total"};
    for (std::size_t k = 0; k < sel.size(); ++k)
        s.rows.push_back({std::to_string(k), sel[k].cand.id, fmt(sel[k].r_hat), fmt(sel[k].cand.mean_time),
                          fmt(sel[k].cand.mean_qloss), fmt(sel[k].t_total)});
    ws.put("selected.csv", csv_text(s));

    std::vector<AdaptiveRunReport> reports;
    const Corpus& ev = ws.corpus(true);
    const auto outs = adaptive_outcomes(ev.problems, ws.baselines(true), [&](int) { return ranked; }, r.req,
                                        make_predictor(ws), ws.cfg().sim, ws.cfg().runtime, ws.threads(), &reports);
    ws.put("adaptive_runs.csv", csv_text(outcome_table("adaptive", outs)));

    CsvTable steps;
    steps.header = {"problem_id", "model_id", "steps"};
    json timing = json::array();
    for (std::size_t p = 0; p < outs.size(); ++p) {
        std::map<std::string, int> count;
        for (const auto& m : outs[p].model_per_step) ++count[m];
        for (const auto& [m, n] : count) steps.rows.push_back({std::to_string(outs[p].problem_id), m, std::to_string(n)});
        timing.push_back({{"problem_id", outs[p].problem_id},
                          {"predictor_seconds", outs[p].predictor_seconds},
                          {"sim_seconds", outs[p].sim_seconds}});
        std::ostringstream iv;
        write_interval_csv(iv, reports[p]);
        ws.put("intervals/problem_" + std::to_string(outs[p].problem_id) + ".csv", iv.str());
        if (static_cast<int>(p) < ws.cfg().frames)
            ws.put("frames/eval_" + std::to_string(p) + "_adaptive.pgm", pgm_text(reports[p].final_density));
    }
    ws.put("adaptive_model_steps.csv", csv_text(steps));
    // wall-clock measurements live outside the CSVs so those stay reproducible
    ws.put("adaptive_timing.json", timing.dump(1) + "\n");
}

void stage_compare(Workspace& ws) {
    const auto frontier = load_candidates(ws.dir(), "pareto.json");
    const Requirement r = load_requirement(ws);
    const Corpus& ev = ws.corpus(true);
    const auto& eb = ws.baselines(true);

    auto adaptive = outcomes_from_table(read_csv_file(ws.dir() / "adaptive_runs.csv"));
    json timing = json::parse(read_file(ws.dir() / "adaptive_timing.json"));
    for (std::size_t p = 0; p < adaptive.size() && p < timing.size(); ++p) {
        adaptive[p].predictor_seconds = timing[p].at("predictor_seconds").get<double>();
        adaptive[p].sim_seconds = timing[p].at("sim_seconds").get<double>();
    }

    const auto eval_records = collect_records(frontier, ev.problems, eb, ws.cfg().sim, ws.threads());
    ws.put("eval_records.csv", records_text(eval_records));

    const std::uint64_t rseed = derive_seed(ws.cfg().seed, kTagRandomOrder);
    std::vector<AdaptiveRunReport> rand_reports;
    const auto random = adaptive_outcomes(
        ev.problems, eb,
        [&](int pid) { return random_order(frontier, r.req, rseed + static_cast<std::uint64_t>(pid), ws.cfg().select_cap); },
        r.req, make_predictor(ws), ws.cfg().sim, ws.cfg().runtime, ws.threads(), &rand_reports);

    const SolverCandidate* fastest = &frontier.front();
    for (const auto& c : frontier)
        if (c.mean_time < fastest->mean_time || (c.mean_time == fastest->mean_time && c.id < fastest->id)) fastest = &c;

    std::vector<StrategySummary> sums;
    sums.push_back(summarize_outcomes("adaptive", adaptive));
    sums.push_back(summarize_outcomes("random_order", random));
    CsvTable per = outcome_table("adaptive", adaptive);
    per = outcome_table("random_order", random, per);
    for (const auto& c : frontier) {
        const auto so = single_outcomes(eval_records, c.id, r.req);
        sums.push_back(summarize_outcomes("single:" + c.id, so));
        per = outcome_table("single:" + c.id, so, per);
    }
    CsvTable t;
    t.header = {"strategy", "success_rate", "mean_qloss", "var_qloss", "mean_time", "restart_rate", "fastest"};
    for (const auto& s : sums)
        t.rows.push_back({s.strategy, fmt(s.success_rate), fmt(s.mean_qloss), fmt(s.var_qloss), fmt(s.mean_time),
                          fmt(s.restart_rate), flag(s.strategy == "single:" + fastest->id)});
    ws.put("comparison.csv", csv_text(t));
    ws.put("qloss_per_problem.csv", csv_text(per));

    // share of time steps each solver ran
    CsvTable td;
    td.header = {"strategy", "model_id", "steps", "fraction"};
    auto add_dist = [&](const std::string& name, const std::map<std::string, long>& count) {
        long total = 0;
        for (const auto& kv : count) total += kv.second;
        for (const auto& [m, n] : count)
            td.rows.push_back({name, m, std::to_string(n), fmt(total ? static_cast<double>(n) / total : 0.0)});
    };
    {
        std::map<std::string, long> count;
        const CsvTable st = read_csv_file(ws.dir() / "adaptive_model_steps.csv");
        for (std::size_t k = 0; k < st.rows.size(); ++k) count[st.at(k, "model_id")] += std::stol(st.at(k, "steps"));
        add_dist("adaptive", count);
        count.clear();
        for (const auto& rep : rand_reports)
            for (const auto& m : rep.model_per_step) ++count[m];
        add_dist("random_order", count);
    }
    ws.put("time_distribution.csv", csv_text(td));

    const StrategySummary& a = sums[0];
    const StrategySummary fs_ = summarize_outcomes("fastest", single_outcomes(eval_records, fastest->id, r.req));
    json summary{{"requirement", {{"q", r.req.q}, {"t", r.req.t}}},
                 {"fastest_candidate", fastest->id},
                 {"adaptive_success_rate", a.success_rate},
                 {"fastest_success_rate", fs_.success_rate},
                 {"random_order_success_rate", sums[1].success_rate},
                 {"adaptive_var_qloss", a.var_qloss},
                 {"fastest_var_qloss", fs_.var_qloss},
                 {"predictor_overhead", a.overhead}};
    ws.put("summary.json", summary.dump(1) + "\n");
}

void stage_sweep(Workspace& ws) {
    const auto frontier = load_candidates(ws.dir(), "pareto.json");
    const Requirement r = load_requirement(ws);
    const auto ranked = mlp_ranking(ws, frontier, r);
    const auto rows = sweep_check_interval(ws.corpus(true).problems, ws.baselines(true), ranked, r.req,
                                           make_predictor(ws), ws.cfg().sim, ws.cfg().runtime,
                                           ws.cfg().sweep_intervals, ws.threads());
    CsvTable t;
    t.header = {"interval", "success_rate", "mean_time"};
    for (const auto& row : rows) t.rows.push_back({std::to_string(row.interval), fmt(row.success_rate), fmt(row.mean_time)});
    ws.put("sweep.csv", csv_text(t));
}

void stage_analyze_corr(Workspace& ws) {
    const auto frontier = load_candidates(ws.dir(), "pareto.json");
    const auto pts =
        correlation_points(frontier, ws.corpus(true).problems, ws.cfg().sim, ws.cfg().corr_first_step, ws.threads());
    CsvTable t;
    t.header = {"problem_id", "candidate_id", "step", "cum_divnorm", "qloss_ts"};
    std::vector<double> x, y;
    for (const auto& p : pts) {
        t.rows.push_back({std::to_string(p.problem_id), p.candidate_id, std::to_string(p.step), fmt(p.cum_divnorm),
                          fmt(p.qloss_ts)});
        x.push_back(p.cum_divnorm);
        y.push_back(p.qloss_ts);
    }
    ws.put("corr_points.csv", csv_text(t));

    CsvTable s;
    s.header = {"metric", "value", "band", "n", "paper_reference"};
    int undefined = 0;
    auto row = [&](const std::string& name, double (*f)(const std::vector<double>&, const std::vector<double>&),
                   const std::string& ref) {
        try {
            const double v = f(x, y);
            s.rows.push_back({name, fmt(v), association_band(v), std::to_string(pts.size()), ref});
        } catch (const std::exception&) {
            ++undefined;
            s.rows.push_back({name, "nan", "undefined", std::to_string(pts.size()), ref});
        }
    };
    row("pearson", &pearson, "0.61");
    row("spearman", &spearman, "0.79");
    ws.put("corr_summary.csv", csv_text(s));
    if (undefined == 2) throw CorrelationError("correlation undefined for both metrics");
}

void update_manifest(const fs::path& dir, const std::string& stage, const std::string& status,
                     const std::string& error, const std::vector<std::string>& artifacts) {
    json m;
    const fs::path path = dir / "MANIFEST";
    if (fs::exists(path)) {
        try {
            m = json::parse(read_file(path));
        } catch (const json::exception&) {
            m = json::object();
        }
    }
    if (!m.is_object()) m = json::object();
    json& st = m["stages"];
    if (!st.is_object()) st = json::object();
    json entry{{"status", status}, {"artifacts", artifacts}};
    if (!error.empty()) entry["error"] = error;
    st[stage] = entry;
    bool complete = true;
    for (const auto& s : pipeline_stages())
        if (!st.contains(s) || st[s].value("status", "") != "ok") complete = false;
    m["status"] = complete ? "complete" : "incomplete";
    write_file(path, m.dump(1) + "\n");
}

void run_stage_in(Workspace& ws, const std::string& stage) {
    static const std::map<std::string, void (*)(Workspace&)> table{
        {"generate", stage_generate},        {"profile", stage_profile},     {"select", stage_select},
        {"train-mlp", stage_train_mlp},      {"build-knn", stage_build_knn}, {"run-adaptive", stage_run_adaptive},
        {"compare", stage_compare},          {"sweep-interval", stage_sweep}, {"analyze-corr", stage_analyze_corr}};
    const auto it = table.find(stage);
    if (it == table.end()) throw StageError(stage, "unknown stage");
    try {
        fs::create_directories(ws.dir());
        write_file(ws.dir() / "config.json", config_to_json(ws.cfg()).dump(1) + "\n");
        ws.take_written();
        it->second(ws);
        update_manifest(ws.dir(), stage, "ok", "", ws.take_written());
    } catch (const std::exception& e) {
        try {
            update_manifest(ws.dir(), stage, "failed", e.what(), ws.take_written());
        } catch (...) {
        }
        throw StageError(stage, e.what());
    }
}

}  // namespace

void run_stage(const ExperimentConfig& cfg, const std::string& stage, int threads) {
    cfg.validate();
    Workspace ws(cfg, threads);
    run_stage_in(ws, stage);
}

void run_pipeline(const ExperimentConfig& cfg, int threads) {
    cfg.validate();
    Workspace ws(cfg, threads);
    for (const auto& s : pipeline_stages()) run_stage_in(ws, s);
}

}  // namespace qaf
