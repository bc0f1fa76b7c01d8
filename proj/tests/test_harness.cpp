#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "qaf/csv.hpp"
#include "qaf/error.hpp"
#include "qaf/harness.hpp"

using namespace qaf;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("qaf_test_harness_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ExperimentConfig minimal(const fs::path& dir) {
    ExperimentConfig c;
    c.out_dir = dir.string();
    c.train_problems = 4;
    c.eval_problems = 4;
    c.grid_sizes = {16};
    c.sim.n_steps = 8;
    c.iterative_iters = {1, 4};
    c.sweep_intervals = {5};
    c.mlp.epochs = 10;
    c.frames = 1;
    return c;
}

CorrPoint point(double cum, double q, int step) {
    CorrPoint p;
    p.cum_divnorm = cum;
    p.qloss_ts = q;
    p.step = step;
    return p;
}

}  // namespace

TEST_CASE("config") {
    SUBCASE("json round trip") {
        ExperimentConfig c;
        c.seed = 9;
        c.grid_sizes = {32, 64};
        c.req_q = 0.01;
        c.runtime.check_interval = 7;
        c.forge.pool_kind = LayerKind::AvgPool;
        const ExperimentConfig back = config_from_json(config_to_json(c));
        CHECK(config_to_json(back) == config_to_json(c));
        CHECK(back.req_q == 0.01);
        CHECK_FALSE(back.req_t.has_value());
    }
    SUBCASE("unknown keys and bad values are format errors") {
        CHECK_THROWS_AS(config_from_json(nlohmann::json{{"trian_problems", 3}}), FormatError);
        CHECK_THROWS_AS(config_from_json(nlohmann::json{{"sim", {{"steps", 3}}}}), FormatError);
        CHECK_THROWS_AS(config_from_json(nlohmann::json{{"train_problems", "many"}}), FormatError);
        CHECK_THROWS_AS(config_from_json(nlohmann::json{{"sweep_intervals", {2}}}), FormatError);
        CHECK_THROWS_AS(config_from_json(nlohmann::json{{"family", "magic"}}), FormatError);
    }
    SUBCASE("train and eval seed ranges must be disjoint") {
        nlohmann::json j{{"train_problems", 10}, {"eval_problems", 10}, {"train_seed_base", 0}, {"eval_seed_base", 5}};
        CHECK_THROWS_AS(config_from_json(j), FormatError);
        j["eval_seed_base"] = 10;
        CHECK_NOTHROW(config_from_json(j));
    }
    SUBCASE("missing file") {
        CHECK_THROWS_AS(load_config("/nonexistent/qaf.json"), FormatError);
    }
}

TEST_CASE("corpora") {
    ExperimentConfig c = minimal(scratch("corpora"));
    c.grid_sizes = {16, 24};
    const Corpus a = make_corpus(c, false), b = make_corpus(c, false), e = make_corpus(c, true);
    REQUIRE(a.problems.size() == 4);
    CHECK(a.scenarios == b.scenarios);
    CHECK(a.problems[0].initial.geo.dims().nx == 16);
    CHECK(a.problems[1].initial.geo.dims().nx == 24);
    for (const auto& s : a.scenarios)
        for (const auto& t : e.scenarios) CHECK(s.seed != t.seed);
    c.seed = 2;
    CHECK_FALSE(make_corpus(c, false).scenarios == a.scenarios);
}

TEST_CASE("correlation analysis") {
    std::vector<CorrPoint> pts;
    for (int n = 6; n <= 40; ++n) pts.push_back(point(n * n * 0.5, 0.001 * n * n * 0.5, n));
    const CorrelationSummary s = analyze_correlation(pts);
    CHECK(s.pearson == doctest::Approx(1.0));
    CHECK(s.spearman == doctest::Approx(1.0));
    CHECK(s.pearson_band == "strong");
    CHECK(s.n == pts.size());

    std::vector<CorrPoint> flat;
    for (int n = 6; n <= 20; ++n) flat.push_back(point(3.0 * n, 0.2, n));
    CHECK_THROWS_AS(analyze_correlation(flat), CorrelationError);
}

TEST_CASE("correlation points cover every step of every run") {
    ExperimentConfig c = minimal(scratch("corrpts"));
    const Corpus cor = make_corpus(c, false);
    const auto fam = iterative_family({1, 2});
    const auto pts = correlation_points(fam, cor.problems, c.sim, 6, 2);
    CHECK(pts.size() == fam.size() * cor.problems.size() * 3);
    for (const auto& p : pts) {
        CHECK(p.step >= 6);
        CHECK(p.qloss_ts >= 0.0);
    }
}

TEST_CASE("strategy summaries") {
    std::vector<ProblemOutcome> outs(4);
    const double q[] = {0.1, 0.2, 0.3, 0.4};
    for (int k = 0; k < 4; ++k) {
        outs[k].problem_id = k;
        outs[k].qloss = q[k];
        outs[k].time = 1.0 + k;
        outs[k].success = meets({0.25, 10.0}, q[k], 1.0 + k);
        outs[k].predictor_seconds = 0.01;
        outs[k].sim_seconds = 1.0;
    }
    const StrategySummary s = summarize_outcomes("x", outs);
    CHECK(s.success_rate == doctest::Approx(0.5));
    CHECK(s.mean_qloss == doctest::Approx(0.25));
    CHECK(s.var_qloss == doctest::Approx(0.0125));
    CHECK(s.mean_time == doctest::Approx(2.5));
    CHECK(s.overhead == doctest::Approx(0.01));
    CHECK_THROWS_AS(summarize_outcomes("empty", {}), std::invalid_argument);
}

TEST_CASE("random order without success prediction") {
    auto fam = iterative_family({1, 2, 4, 8, 16, 32, 64});
    for (std::size_t k = 0; k < fam.size(); ++k) fam[k].mean_time = static_cast<double>(k);
    const UserRequirement req{0.1, 5.5};
    const auto a = random_order(fam, req, 3, 4), b = random_order(fam, req, 3, 4);
    REQUIRE(a.size() == 4);
    std::set<std::string> ids;
    for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].cand.id == b[k].cand.id);
        CHECK(a[k].cand.mean_time < req.t);
        CHECK(a[k].r_hat == 0.0);
        ids.insert(a[k].cand.id);
    }
    CHECK(ids.size() == 4);
}

TEST_CASE("minimal pipeline") {
    const fs::path dir = scratch("pipeline");
    const ExperimentConfig c = minimal(dir);
    run_pipeline(c, 2);

    for (const char* f : {"scenarios_train.csv", "scenarios_eval.csv", "baselines_train.csv", "records.csv",
                          "candidates.json", "pareto.csv", "pareto.json", "requirement.json", "samples.csv",
                          "mlp.json", "mlp_loss.csv", "knn.csv", "selected.csv", "adaptive_runs.csv",
                          "comparison.csv", "time_distribution.csv", "qloss_per_problem.csv", "summary.json",
                          "sweep.csv", "corr_points.csv", "corr_summary.csv", "frames/eval_0_initial.pgm"})
        CHECK_MESSAGE(fs::exists(dir / f), f);

    const auto manifest = nlohmann::json::parse(slurp(dir / "MANIFEST"));
    CHECK(manifest.at("status") == "complete");
    CHECK(manifest.at("stages").size() == pipeline_stages().size());

    // every CSV parses with a header and re-serialises to the same bytes
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (e.path().extension() != ".csv") continue;
        const std::string text = slurp(e.path());
        std::istringstream in(text);
        const CsvTable t = read_csv(in);
        CHECK(!t.header.empty());
        std::ostringstream out;
        write_csv(out, t);
        CHECK_MESSAGE(out.str() == text, e.path().string());
    }
    std::istringstream rin(slurp(dir / "records.csv"));
    CHECK(read_records_csv(rin).size() == 2 * 4);

    std::istringstream sw(slurp(dir / "sweep.csv"));
    CHECK(read_csv(sw).rows.size() == 1);

    // rerun of one stage reproduces its CSV
    const std::string before = slurp(dir / "comparison.csv");
    run_stage(c, "compare", 1);
    CHECK(slurp(dir / "comparison.csv") == before);
}

TEST_CASE("stage failures are tagged and recorded") {
    const fs::path dir = scratch("failure");
    const ExperimentConfig c = minimal(dir);
    try {
        run_stage(c, "select", 1);
        FAIL("expected a StageError");
    } catch (const StageError& e) {
        CHECK(e.stage() == "select");
        CHECK(std::string(e.what()).rfind("select: ", 0) == 0);
    }
    const auto manifest = nlohmann::json::parse(slurp(dir / "MANIFEST"));
    CHECK(manifest.at("status") == "incomplete");
    CHECK(manifest.at("stages").at("select").at("status") == "failed");
    CHECK_THROWS_AS(run_stage(c, "bogus", 1), StageError);
}

TEST_CASE("candidate files round trip") {
    const fs::path dir = scratch("cands");
    Rng rng(4);
    auto fam = generate_family(make_seed_network(rng), 5);
    fam.resize(3);
    fam.push_back(iterative_family({3}).front());
    fam[0].mean_qloss = std::numeric_limits<double>::infinity();
    fam[1].mean_time = 0.25;
    save_candidates(dir, fam, "c.json");
    const auto back = load_candidates(dir, "c.json");
    REQUIRE(back.size() == fam.size());
    for (std::size_t k = 0; k < fam.size(); ++k) {
        CHECK(back[k].id == fam[k].id);
        CHECK(back[k].source == fam[k].source);
        CHECK(back[k].mean_time == fam[k].mean_time);
        CHECK(back[k].iters == fam[k].iters);
        CHECK(back[k].net.has_value() == fam[k].net.has_value());
        if (fam[k].net) CHECK(network_to_string(*back[k].net) == network_to_string(*fam[k].net));
    }
    CHECK(std::isinf(back[0].mean_qloss));
}
