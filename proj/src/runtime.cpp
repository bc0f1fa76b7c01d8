#include "qaf/runtime.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <istream>
#include <memory>
#include <ostream>
#include <set>
#include <stdexcept>

#include "qaf/csv.hpp"
#include "qaf/error.hpp"
#include "qaf/parallel.hpp"
#include "qaf/poisson.hpp"

namespace qaf {

void accumulate(std::vector<double>& history, double div_norm_value) {
    if (!(div_norm_value >= 0.0)) throw std::invalid_argument("accumulate: DivNorm must be >= 0");
    history.push_back((history.empty() ? 0.0 : history.back()) + div_norm_value);
}

RegressionModel fit_regression(const std::vector<std::pair<double, double>>& points) {
    const double n = static_cast<double>(points.size());
    std::set<double> xs;
    double mx = 0.0, my = 0.0;
    for (const auto& [x, y] : points) {
        xs.insert(x);
        mx += x;
        my += y;
    }
    if (xs.size() < 2) throw FitError("regression needs at least two distinct x values");
    mx /= n;
    my /= n;
    // centred sums keep collinear input exact to rounding
    double sxx = 0.0, sxy = 0.0;
    for (const auto& [x, y] : points) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    RegressionModel m;
    m.a = sxy / sxx;
    m.b = my - m.a * mx;
    return m;
}

double predict_cum_final(const RegressionModel& m, int final_step, double last_observed) {
    return std::max(m(static_cast<double>(final_step)), last_observed);
}

KnnDatabase::KnnDatabase(int k) : k_(k) {
    if (k < 1) throw std::invalid_argument("knn k must be >= 1");
}

void KnnDatabase::insert(double key, double qloss) {
    if (!std::isfinite(key)) throw std::invalid_argument("knn key must be finite");
    if (!(qloss >= 0.0)) throw std::invalid_argument("knn value must be >= 0");
    tree_.emplace(key, qloss);
}

std::vector<std::pair<double, double>> KnnDatabase::nearest(double query) const {
    std::vector<std::pair<double, double>> out;
    const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(k_), tree_.size());
    auto right = tree_.lower_bound(query);
    auto left = right;  // one past the next left candidate
    while (out.size() < want) {
        const bool has_left = left != tree_.begin();
        const bool has_right = right != tree_.end();
        bool take_left;
        if (!has_right) {
            take_left = true;
        } else if (!has_left) {
            take_left = false;
        } else {
            const double dl = query - std::prev(left)->first;
            const double dr = right->first - query;
            take_left = dl <= dr;
        }
        if (take_left) {
            --left;
            out.push_back(*left);
        } else {
            out.push_back(*right);
            ++right;
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

double KnnDatabase::predict(double query, bool* degenerate) const {
    if (tree_.empty()) throw std::invalid_argument("knn database is empty");
    if (degenerate) *degenerate = tree_.size() < static_cast<std::size_t>(k_);
    const auto nb = nearest(query);
    double s = 0.0;
    for (const auto& p : nb) s += p.second;
    return s / static_cast<double>(nb.size());
}

std::vector<std::pair<double, double>> KnnDatabase::pairs() const { return {tree_.begin(), tree_.end()}; }

std::vector<KnnSample> collect_knn_samples(const std::vector<SolverCandidate>& candidates,
                                           const std::vector<Problem>& problems,
                                           const std::vector<Baseline>& baselines, const SimConfig& cfg,
                                           int threads, bool per_cell, int* skipped) {
    if (baselines.size() != problems.size())
        throw std::invalid_argument("collect_knn_samples: one baseline per problem");
    const std::size_t np = problems.size();
    std::vector<std::optional<KnnSample>> slots(candidates.size() * np);
    parallel_for(slots.size(), threads, [&](std::size_t idx) {
        const SolverCandidate& c = candidates[idx / np];
        const Problem& p = problems[idx % np];
        try {
            auto solver = make_solver(c);
            SimulateOptions opts;
            opts.keep_states = false;
            opts.keep_densities = false;
            const Trajectory t = simulate(p.initial, cfg, [&](int) -> PressureSolver& { return *solver; }, opts);
            const double cum = t.cum_div_norm.empty() ? 0.0 : t.cum_div_norm.back();
            const double key =
                per_cell ? cum / static_cast<double>(std::max<std::size_t>(1, p.initial.geo.fluid_count())) : cum;
            const double q = quality_loss(baselines[idx % np].final_density, t.final_state.density);
            if (std::isfinite(key) && std::isfinite(q)) slots[idx] = KnnSample{c.id, p.id, key, q};
        } catch (const std::exception&) {
            // left empty: counted below
        }
    });
    std::vector<KnnSample> out;
    int miss = 0;
    for (auto& s : slots) {
        if (s)
            out.push_back(std::move(*s));
        else
            ++miss;
    }
    if (skipped) *skipped = miss;
    return out;
}

KnnDatabase make_knn_database(const std::vector<KnnSample>& samples, int k, const std::optional<std::string>& only) {
    KnnDatabase db(k);
    for (const auto& s : samples)
        if (!only || s.candidate_id == *only) db.insert(s.key, s.qloss);
    return db;
}

void write_knn_csv(std::ostream& os, const std::vector<KnnSample>& samples) {
    CsvTable t;
    t.header = {"candidate_id", "problem_id", "cum_divnorm_final", "qloss"};
    for (const auto& s : samples)
        t.rows.push_back({s.candidate_id, std::to_string(s.problem_id), format_double(s.key), format_double(s.qloss)});
    write_csv(os, t);
}

std::vector<KnnSample> read_knn_csv(std::istream& is) {
    const CsvTable t = read_csv(is);
    std::vector<KnnSample> out;
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        out.push_back({t.at(r, "candidate_id"), std::stoi(t.at(r, "problem_id")), t.number(r, "cum_divnorm_final"),
                       t.number(r, "qloss")});
    return out;
}

void RuntimeConfig::validate() const {
    if (check_interval < 3) throw std::invalid_argument("check interval must be >= 3");
    if (skip_in_interval < 0 || check_interval - skip_in_interval < 2)
        throw std::invalid_argument("check interval must leave at least two regression points after skipping");
    if (skip_initial < 0) throw std::invalid_argument("skip_initial must be >= 0");
    if (!(epsilon_rel > 0.0 && epsilon_rel < 0.5)) throw std::invalid_argument("epsilon_rel must be in (0, 0.5)");
    if (knn_k < 1) throw std::invalid_argument("knn k must be >= 1");
}

std::string to_string(SwitchKind k) {
    switch (k) {
        case SwitchKind::Continue: return "continue";
        case SwitchKind::SwitchFaster: return "switch_faster";
        case SwitchKind::SwitchAccurate: return "switch_accurate";
        case SwitchKind::Restart: return "restart";
    }
    return "?";
}

SwitchDecision decide(double q_pred, const UserRequirement& req, int current,
                      const std::vector<RuntimeCandidate>& ranked, const std::vector<bool>& abandoned,
                      double epsilon_rel) {
    if (current < 0 || static_cast<std::size_t>(current) >= ranked.size())
        throw std::invalid_argument("decide: current model is not in the candidate list");
    if (abandoned.size() != ranked.size()) throw std::invalid_argument("decide: abandoned flags must match");
    if (std::abs(q_pred - req.q) <= epsilon_rel * req.q) return {SwitchKind::Continue, -1};

    const SolverCandidate& cur = ranked[static_cast<std::size_t>(current)].cand;
    const bool want_faster = q_pred < req.q;
    auto in_direction = [&](const SolverCandidate& c) {
        return want_faster ? c.mean_time < cur.mean_time : c.mean_qloss < cur.mean_qloss;
    };
    int fresh = -1, any = -1;
    for (std::size_t k = 0; k < ranked.size(); ++k) {
        if (static_cast<int>(k) == current || !in_direction(ranked[k].cand)) continue;
        if (any < 0) any = static_cast<int>(k);
        if (fresh < 0 && !abandoned[k]) fresh = static_cast<int>(k);
    }
    const int pick = fresh >= 0 ? fresh : any;
    if (want_faster) return pick >= 0 ? SwitchDecision{SwitchKind::SwitchFaster, pick} : SwitchDecision{};
    return pick >= 0 ? SwitchDecision{SwitchKind::SwitchAccurate, pick} : SwitchDecision{SwitchKind::Restart, -1};
}

QlossPredictor knn_predictor(const std::vector<KnnSample>& samples, const RuntimeConfig& rt) {
    if (!rt.per_candidate_db) {
        auto db = std::make_shared<KnnDatabase>(make_knn_database(samples, rt.knn_k));
        return [db](const std::string&, double key) { return db->predict(key); };
    }
    auto dbs = std::make_shared<std::map<std::string, KnnDatabase>>();
    for (const auto& s : samples) {
        auto it = dbs->try_emplace(s.candidate_id, rt.knn_k).first;
        it->second.insert(s.key, s.qloss);
    }
    return [dbs](const std::string& id, double key) {
        const auto it = dbs->find(id);
        if (it == dbs->end()) throw std::invalid_argument("no knn samples for model " + id);
        return it->second.predict(key);
    };
}

AdaptiveRunReport run_adaptive(const SimState& initial, const std::vector<RuntimeCandidate>& ranked,
                               const UserRequirement& req, const QlossPredictor& predictor, const SimConfig& cfg,
                               const RuntimeConfig& rt, const ScalarField* baseline) {
    using clock = std::chrono::steady_clock;
    rt.validate();
    cfg.validate();
    AdaptiveRunReport rep;

    auto run_pcg = [&] {
        PcgPressureSolver exact;
        SimulateOptions opts;
        opts.keep_states = false;
        opts.keep_densities = false;
        const auto t0 = clock::now();
        const Trajectory t = simulate(initial, cfg, [&](int) -> PressureSolver& { return exact; }, opts);
        rep.sim_seconds += std::chrono::duration<double>(clock::now() - t0).count();
        rep.total += t.total;
        rep.cum_div_norm = t.cum_div_norm;
        rep.final_density = t.final_state.density;
        rep.model_per_step.assign(static_cast<std::size_t>(cfg.n_steps), exact.id());
    };

    if (ranked.empty()) {
        run_pcg();
    } else {
        std::vector<std::unique_ptr<PressureSolver>> solvers;
        for (const auto& c : ranked) solvers.push_back(make_solver(c.cand));
        std::vector<bool> abandoned(ranked.size(), false);
        const double cells = static_cast<double>(std::max<std::size_t>(1, initial.geo.fluid_count()));
        const double key_scale = rt.per_cell_key ? 1.0 / cells : 1.0;

        int current = 0;
        SimState state = initial;
        std::vector<double> cum;
        int interval = 0;
        bool restart = false;
        while (state.step < cfg.n_steps) {
            const auto t0 = clock::now();
            StepResult r = step(state, *solvers[static_cast<std::size_t>(current)], cfg);
            rep.sim_seconds += std::chrono::duration<double>(clock::now() - t0).count();
            if (!std::isfinite(r.div_norm)) {
                // A blown-up surrogate cannot be steered; fall back to PCG.
                rep.total += r.cost;
                restart = true;
                rep.restart_step = r.state.step;
                break;
            }
            accumulate(cum, r.div_norm);
            rep.total += r.cost;
            rep.model_per_step.push_back(ranked[static_cast<std::size_t>(current)].cand.id);
            state = std::move(r.state);

            const int n = state.step;
            if (n >= cfg.n_steps || n < rt.skip_initial + rt.check_interval ||
                (n - rt.skip_initial) % rt.check_interval != 0)
                continue;

            const auto p0 = clock::now();
            std::vector<std::pair<double, double>> pts;
            for (int s = n - rt.check_interval + rt.skip_in_interval + 1; s <= n; ++s)
                pts.emplace_back(static_cast<double>(s), cum[static_cast<std::size_t>(s - 1)]);
            const RegressionModel m = fit_regression(pts);
            const double final_cum = predict_cum_final(m, cfg.n_steps, cum.back());
            const std::string& cur_id = ranked[static_cast<std::size_t>(current)].cand.id;
            const double q_pred = predictor(cur_id, final_cum * key_scale);
            const SwitchDecision d = decide(q_pred, req, current, ranked, abandoned, rt.epsilon_rel);
            rep.predictor_seconds += std::chrono::duration<double>(clock::now() - p0).count();

            IntervalRow row;
            row.interval = interval++;
            row.step = n;
            row.model_id = cur_id;
            row.cum_divnorm = cum.back();
            row.predicted_final = final_cum;
            row.predicted_qloss = q_pred;
            row.decision = d.kind;
            if (d.target >= 0) row.target_id = ranked[static_cast<std::size_t>(d.target)].cand.id;
            rep.intervals.push_back(row);

            if (d.kind == SwitchKind::Restart) {
                restart = true;
                rep.restart_step = n;
                break;
            }
            if (d.kind == SwitchKind::SwitchFaster || d.kind == SwitchKind::SwitchAccurate) {
                abandoned[static_cast<std::size_t>(current)] = true;
                current = d.target;
            }
        }
        if (restart) {
            rep.restarted = true;
            run_pcg();
        } else {
            rep.cum_div_norm = std::move(cum);
            rep.final_density = std::move(state.density);
        }
    }
    if (baseline) rep.qloss = quality_loss(*baseline, rep.final_density);
    return rep;
}

void write_interval_csv(std::ostream& os, const AdaptiveRunReport& report) {
    CsvTable t;
    t.header = {"interval_index", "step", "model_id", "cum_divnorm", "predicted_final", "predicted_qloss",
                "decision", "target"};
    for (const auto& r : report.intervals)
        t.rows.push_back({std::to_string(r.interval), std::to_string(r.step), r.model_id, format_double(r.cum_divnorm),
                          format_double(r.predicted_final), format_double(r.predicted_qloss), to_string(r.decision),
                          r.target_id});
    write_csv(os, t);
}

}  // namespace qaf
