#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "qaf/error.hpp"
#include "qaf/forge.hpp"
#include "test_util.hpp"

using namespace qaf;

namespace {

Tensor random_tensor(int c, int h, int w, Rng& rng) {
    Tensor t(c, h, w);
    for (double& x : t.data) x = rng.uniform(-1.0, 1.0);
    return t;
}

double max_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double m = 0.0;
    for (std::size_t k = 0; k < a.data.size(); ++k) m = std::max(m, std::abs(a.data[k] - b.data[k]));
    return m;
}

LayerSpec conv_spec(int k, int cout) {
    LayerSpec s;
    s.kind = LayerKind::Conv;
    s.kernel = k;
    s.channels_out = cout;
    return s;
}

LayerSpec relu_spec() {
    LayerSpec s;
    s.kind = LayerKind::ReLU;
    return s;
}

NetworkGraph seed_net(std::uint64_t s = 7) {
    Rng rng(s);
    return make_seed_network(rng);
}

std::int64_t flops32(const NetworkGraph& n) { return count_flops(n, GridDims{32, 32, 1.0}); }

/// Indices of rows of `before` (Conv output channels) that are absent in `after`.
std::vector<int> removed_rows(const ConvParams& before, const ConvParams& after) {
    std::vector<int> gone;
    const std::size_t row = static_cast<std::size_t>(before.cin) * before.k * before.k;
    for (int o = 0; o < before.cout; ++o) {
        bool found = false;
        for (int m = 0; m < after.cout && !found; ++m)
            found = std::equal(before.w.begin() + static_cast<std::ptrdiff_t>(o * row),
                               before.w.begin() + static_cast<std::ptrdiff_t>((o + 1) * row),
                               after.w.begin() + static_cast<std::ptrdiff_t>(m * row));
        if (!found) gone.push_back(o);
    }
    return gone;
}

Problem plume_problem(int id, int n) {
    Rng rng(100 + static_cast<std::uint64_t>(id));
    GridDims d{n, n, 1.0};
    GeometryField geo = test::random_geometry(d, rng, 0.05);
    SimState s = make_state(geo);
    for (int j = 1; j < n / 3; ++j)
        for (int i = n / 3; i < 2 * n / 3; ++i)
            if (geo.is_fluid(i, j)) s.density(i, j) = rng.uniform();
    s.inflow = Inflow{n / 3, 1, 2 * n / 3, 3, 0.5};
    return Problem{id, std::move(s)};
}

}  // namespace

TEST_CASE("seed network") {
    const NetworkGraph net = seed_net();
    CHECK(net.layers.size() == 7);
    CHECK(net.conv_count() == 4);
    CHECK(net.params[0].cin == 2);
    CHECK(net.params[6].cout == 1);
    CHECK(inner_convs(net) == std::vector<int>{0, 2, 4});
    CHECK(layer_neurons(net, 4) == 4 * 32 * 32);
    CHECK(net == seed_net());
    CHECK_THROWS_AS(make_seed_network(*std::make_unique<Rng>(1), 1), std::invalid_argument);
}

TEST_CASE("op_shallow") {
    SUBCASE("folding a 1x1 conv between 1x1 convs is exact") {
        Rng rng(3);
        NetworkGraph net;
        push_layer(net, conv_spec(3, 4), 2);
        push_layer(net, conv_spec(1, 3), 4);
        push_layer(net, conv_spec(1, 1), 3);
        init_weights(net, rng);
        for (auto& p : net.params)
            for (double& b : p.b) b = rng.uniform(-0.5, 0.5);
        const NetworkGraph cut = op_shallow(net, 1);
        REQUIRE(cut.layers.size() == 2);
        CHECK(cut.params[1].cin == 4);
        const Tensor x = random_tensor(2, 8, 8, rng);
        CHECK(max_diff(forward(net, x), forward(cut, x)) < 1e-12);
    }
    SUBCASE("deleting a ReLU keeps every weight") {
        const NetworkGraph net = seed_net();
        const NetworkGraph cut = op_shallow(net, 3);
        CHECK(cut.layers.size() == 6);
        CHECK(cut.params[2] == net.params[2]);
        CHECK(cut.params[3] == net.params[4]);
        CHECK(flops32(cut) < flops32(net));
    }
    SUBCASE("every deletable position yields a valid, cheaper net") {
        const NetworkGraph net = seed_net();
        for (int l = 1; l <= 5; ++l) {
            const NetworkGraph cut = op_shallow(net, l);
            CHECK_NOTHROW(validate(cut));
            CHECK(cut.layers.size() == net.layers.size() - 1);
            CHECK(flops32(cut) < flops32(net));
        }
    }
    SUBCASE("first, last and pool layers are rejected") {
        const NetworkGraph net = seed_net();
        CHECK_THROWS_AS(op_shallow(net, 0), TransformError);
        CHECK_THROWS_AS(op_shallow(net, 6), TransformError);
        const NetworkGraph pooled = op_pooling(net, 0, 2);
        CHECK_THROWS_AS(op_shallow(pooled, 0), TransformError);
        CHECK_THROWS_AS(op_shallow(pooled, 2), TransformError);
    }
    SUBCASE("residual indices follow the deletion") {
        NetworkGraph net;
        push_layer(net, conv_spec(3, 4), 2);  // 0
        push_layer(net, relu_spec(), 4);     // 1
        push_layer(net, conv_spec(3, 4), 4);  // 2
        push_layer(net, relu_spec(), 4);     // 3
        LayerSpec res = conv_spec(3, 4);
        res.residual_from = 3;
        push_layer(net, res, 4);           // 4, adds layer 3
        push_layer(net, conv_spec(3, 1), 4);  // 5
        Rng rng(5);
        init_weights(net, rng);
        const NetworkGraph a = op_shallow(net, 1);
        CHECK(a.layers[3].residual_from == std::optional<int>(2));
        const NetworkGraph b = op_shallow(net, 3);
        CHECK(b.layers[3].residual_from == std::optional<int>(2));
    }
}

TEST_CASE("op_narrow") {
    const NetworkGraph net = seed_net();
    Rng rng(11);
    const NetworkGraph thin = op_narrow(net, 2, 3, rng);
    CHECK(thin.layers[2].channels_out == 5);
    CHECK(thin.params[2].cout == 5);
    CHECK(thin.params[4].cin == 5);
    CHECK(flops32(thin) < flops32(net));
    CHECK(total_neurons(thin) < total_neurons(net));

    // Oracle: zeroing the consumer weights of the removed channels in the
    // original net gives the same function.
    const std::vector<int> gone = removed_rows(net.params[2], thin.params[2]);
    REQUIRE(gone.size() == 3);
    NetworkGraph masked = net;
    ConvParams& q = masked.params[4];
    for (int o = 0; o < q.cout; ++o)
        for (int c : gone)
            for (int a = 0; a < q.k; ++a)
                for (int b = 0; b < q.k; ++b) q.at(o, c, a, b) = 0.0;
    const Tensor x = random_tensor(2, 16, 16, rng);
    CHECK(max_diff(forward(masked, x), forward(thin, x)) < 1e-12);

    CHECK_THROWS_AS(op_narrow(net, 2, 8, rng), TransformError);
    CHECK_THROWS_AS(op_narrow(net, 2, 0, rng), TransformError);
    CHECK_THROWS_AS(op_narrow(net, 6, 1, rng), TransformError);
    CHECK_THROWS_AS(op_narrow(net, 1, 1, rng), TransformError);
}

TEST_CASE("op_pooling") {
    const NetworkGraph net = seed_net();
    // total = 41 channels * 1024 = 41984, budget 4198.4
    CHECK(total_neurons(net) == 41 * 1024);
    SUBCASE("placements inside the budget") {
        const NetworkGraph p0 = op_pooling(net, 0, 2);  // discards 2*1024*3/4 = 1536
        CHECK(p0.layers.size() == 9);
        CHECK(p0.layers[0].kind == LayerKind::MaxPool);
        CHECK(p0.layers[1].kind == LayerKind::Conv);
        CHECK(p0.layers[2].kind == LayerKind::Unpool);
        CHECK(flops32(p0) < flops32(net));
        const NetworkGraph p6 = op_pooling(net, 6, 2);  // 4*1024*3/4 = 3072
        CHECK(p6.layers.back().kind == LayerKind::Unpool);
        CHECK_NOTHROW(validate(p6));
    }
    SUBCASE("over budget") {
        CHECK_THROWS_AS(op_pooling(net, 2, 2), TransformError);  // 6144
        CHECK_THROWS_AS(op_pooling(net, 4, 2), TransformError);
        ForgePolicy loose;
        loose.neuron_budget = 0.2;
        CHECK_NOTHROW(op_pooling(net, 2, 2, loose));
    }
    SUBCASE("bad arguments") {
        CHECK_THROWS_AS(op_pooling(net, 1, 2), TransformError);
        CHECK_THROWS_AS(op_pooling(net, 0, 1), TransformError);
        CHECK_THROWS_AS(op_pooling(op_pooling(net, 0, 2), 3, 2), TransformError);  // 11 layers
    }
    SUBCASE("average pooling of a constant field is transparent") {
        ForgePolicy avg;
        avg.pool_kind = LayerKind::AvgPool;
        avg.neuron_budget = 2.0;
        NetworkGraph one;
        push_layer(one, conv_spec(1, 1), 2);
        one.params[0].w = {1.0, 0.0};
        const NetworkGraph p = op_pooling(one, 0, 2, avg);
        Tensor x(2, 8, 8, 0.25);
        CHECK(max_diff(forward(one, x), forward(p, x)) == 0.0);
    }
    SUBCASE("residual references are remapped") {
        NetworkGraph r;
        push_layer(r, conv_spec(3, 2), 2);  // 0
        push_layer(r, relu_spec(), 2);     // 1
        LayerSpec s = conv_spec(3, 2);
        s.residual_from = 1;
        push_layer(r, s, 2);                // 2 += out(1)
        LayerSpec t = conv_spec(3, 2);
        t.residual_from = 2;
        push_layer(r, t, 2);                // 3 += out(2)
        push_layer(r, conv_spec(1, 1), 2);  // 4
        Rng rng(2);
        init_weights(r, rng);
        ForgePolicy loose;
        loose.neuron_budget = 1.0;
        const NetworkGraph p = op_pooling(r, 2, 2, loose);
        CHECK(p.layers[3].kind == LayerKind::Conv);
        CHECK_FALSE(p.layers[3].residual_from.has_value());
        CHECK(p.layers[4].kind == LayerKind::Unpool);
        CHECK(p.layers[4].residual_from == std::optional<int>(1));
        CHECK(p.layers[5].residual_from == std::optional<int>(4));
    }
}

TEST_CASE("op_dropout") {
    const NetworkGraph net = seed_net();
    Rng rng(13);
    // layer 0: 8192 neurons, p = 0.5 affects 4096 <= 4198.4
    const NetworkGraph d = op_dropout(net, 0, 0.5, rng);
    CHECK(d.layers.size() == 8);
    CHECK(d.layers[1].kind == LayerKind::Dropout);
    CHECK(d.layers[1].drop_p == 0.5);
    CHECK(d.params[0].cout == 4);
    CHECK(d.params[3].cin == 4);
    CHECK(flops32(d) < flops32(net));

    const std::vector<int> gone = removed_rows(net.params[0], d.params[0]);
    REQUIRE(gone.size() == 4);
    NetworkGraph oracle = net;
    ConvParams& q = oracle.params[2];
    for (int o = 0; o < q.cout; ++o)
        for (int c = 0; c < q.cin; ++c)
            for (int a = 0; a < q.k; ++a)
                for (int b = 0; b < q.k; ++b)
                    q.at(o, c, a, b) *= std::count(gone.begin(), gone.end(), c) ? 0.0 : 2.0;
    const Tensor x = random_tensor(2, 16, 16, rng);
    CHECK(max_diff(forward(oracle, x), forward(d, x)) < 1e-12);

    SUBCASE("small p still removes one channel") {
        const NetworkGraph e = op_dropout(net, 2, 0.05, rng);
        CHECK(e.params[2].cout == 7);
        CHECK(e.params[5].cin == 7);
    }
    SUBCASE("rejections") {
        CHECK_THROWS_AS(op_dropout(net, 0, 0.6, rng), TransformError);  // over budget
        CHECK_THROWS_AS(op_dropout(net, 0, 0.0, rng), TransformError);
        CHECK_THROWS_AS(op_dropout(net, 0, 1.0, rng), TransformError);
        CHECK_THROWS_AS(op_dropout(net, 6, 0.1, rng), TransformError);
        CHECK_THROWS_AS(op_dropout(net, 3, 0.1, rng), TransformError);
    }
}

TEST_CASE("shallow_candidate enforces the deletion cap") {
    SolverCandidate c;
    c.id = "seed";
    c.net = seed_net();
    c.lineage = "seed";
    const SolverCandidate once = shallow_candidate(c, 1, "a");
    CHECK(once.deletions == 1);
    CHECK(once.source == CandidateSource::Shallow);
    CHECK(once.lineage == "seed>shallow(1)");
    CHECK_THROWS_AS(shallow_candidate(once, 1, "b"), TransformError);
    ForgePolicy two;
    two.max_deletions = 2;
    CHECK(shallow_candidate(once, 1, "b", two).deletions == 2);
    SolverCandidate pcg;
    pcg.iters = 4;
    CHECK_THROWS_AS(shallow_candidate(pcg, 1, "c"), TransformError);
}

TEST_CASE("generate_family") {
    const NetworkGraph seed = seed_net();
    const auto fam = generate_family(seed, 42);
    REQUIRE(fam.size() == 133);

    std::map<CandidateSource, int> count;
    std::set<std::string> ids;
    for (std::size_t k = 0; k < fam.size(); ++k) {
        const auto& c = fam[k];
        ++count[c.source];
        ids.insert(c.id);
        char want[8];
        std::snprintf(want, sizeof want, "nn%03zu", k);
        CHECK(c.id == want);
        REQUIRE(c.net.has_value());
        CHECK_FALSE(c.iters.has_value());
        CHECK(c.net->layers.size() <= static_cast<std::size_t>(kMaxLayers));
        CHECK(c.deletions <= 1);
        CHECK_NOTHROW(validate(*c.net));
        CHECK_NOTHROW(infer_shapes(*c.net, 64, 64));
    }
    CHECK(ids.size() == 133);
    CHECK(count[CandidateSource::Accurate] == 5);
    CHECK(count[CandidateSource::Shallow] == 5);
    CHECK(count[CandidateSource::Narrow] == 50);
    CHECK(count[CandidateSource::Pool] == 55);
    CHECK(count[CandidateSource::Dropout] == 18);

    SUBCASE("accurate models compute the seed function") {
        Rng rng(1);
        Tensor x = random_tensor(2, 16, 16, rng);
        const Tensor ref = forward(seed, x);
        for (int k = 0; k < 5; ++k) {
            CHECK(flops32(*fam[static_cast<std::size_t>(k)].net) > flops32(seed));
            CHECK(max_diff(forward(*fam[static_cast<std::size_t>(k)].net, x), ref) < 1e-10);
        }
    }
    SUBCASE("derived models are cheaper than the seed") {
        for (std::size_t k = 5; k < fam.size(); ++k) CHECK(flops32(*fam[k].net) < flops32(seed));
    }
    SUBCASE("narrow children of one parent are distinct") {
        for (int s = 0; s < 5; ++s)
            for (int a = 0; a < 10; ++a)
                for (int b = a + 1; b < 10; ++b)
                    CHECK_FALSE(*fam[10 + 10 * s + a].net == *fam[10 + 10 * s + b].net);
    }
    SUBCASE("dropout models carry one Dropout record") {
        for (std::size_t k = 115; k < 133; ++k) {
            const auto& L = fam[k].net->layers;
            CHECK(std::count_if(L.begin(), L.end(), [](const LayerSpec& s) { return s.kind == LayerKind::Dropout; }) ==
                  1);
        }
    }
    SUBCASE("deterministic in the rng seed") {
        const auto again = generate_family(seed, 42);
        for (std::size_t k = 0; k < fam.size(); ++k) CHECK(*again[k].net == *fam[k].net);
        const auto other = generate_family(seed, 43);
        int differ = 0;
        for (std::size_t k = 0; k < fam.size(); ++k) differ += !(*other[k].net == *fam[k].net);
        CHECK(differ > 0);
    }
    SUBCASE("every model runs as a solver") {
        const Problem p = plume_problem(0, 16);
        const ScalarField div = divergence(p.initial.vel, p.initial.geo);
        for (const auto& c : fam) {
            auto solver = make_solver(c);
            CHECK(solver->id() == c.id);
            CHECK_NOTHROW(solver->solve(div, p.initial.geo, ProjectionParams{0.1, 1.0}));
        }
    }
}

TEST_CASE("iterative_family") {
    const auto it = iterative_family();
    REQUIRE(it.size() == 6);
    CHECK(it[0].id == "it1");
    CHECK(it[5].id == "it32");
    CHECK(*it[3].iters == 8);
    CHECK(it[2].source == CandidateSource::Iterative);
    CHECK_THROWS_AS(iterative_family({0}), std::invalid_argument);
    SolverCandidate both = it[0];
    both.net = seed_net();
    CHECK_THROWS_AS(make_solver(both), std::invalid_argument);
}

TEST_CASE("pareto_front") {
    SUBCASE("examples") {
        const std::vector<TimeQuality> pts = {{1, 5}, {2, 3}, {3, 4}, {4, 1}, {2, 3}, {5, 1}};
        CHECK(pareto_front(pts) == std::vector<std::size_t>{0, 1, 3, 4});
        CHECK(pareto_front({{1, 1}}) == std::vector<std::size_t>{0});
        CHECK(pareto_front({{1, 2}, {1, 1}}) == std::vector<std::size_t>{1});
        CHECK(pareto_front({{1, 1}, {2, 1}}) == std::vector<std::size_t>{0});
        CHECK_THROWS_AS(pareto_front({}), std::invalid_argument);
    }
    SUBCASE("brute-force oracle") {
        Rng rng(9);
        for (int trial = 0; trial < 20; ++trial) {
            std::vector<TimeQuality> pts;
            for (int k = 0; k < 50; ++k)
                pts.push_back({static_cast<double>(rng.uniform_int(0, 9)), static_cast<double>(rng.uniform_int(0, 9))});
            std::vector<std::size_t> want;
            for (std::size_t a = 0; a < pts.size(); ++a) {
                bool dominated = false;
                for (std::size_t b = 0; b < pts.size() && !dominated; ++b)
                    dominated = pts[b].time <= pts[a].time && pts[b].qloss <= pts[a].qloss &&
                                (pts[b].time < pts[a].time || pts[b].qloss < pts[a].qloss);
                if (!dominated) want.push_back(a);
            }
            CHECK(pareto_front(pts) == want);
        }
    }
    SUBCASE("pareto_select keeps candidates") {
        std::vector<SolverCandidate> pool(3);
        pool[0].id = "a", pool[0].mean_time = 1, pool[0].mean_qloss = 2;
        pool[1].id = "b", pool[1].mean_time = 2, pool[1].mean_qloss = 3;
        pool[2].id = "c", pool[2].mean_time = 3, pool[2].mean_qloss = 1;
        const auto sel = pareto_select(pool);
        REQUIRE(sel.size() == 2);
        CHECK(sel[0].id == "a");
        CHECK(sel[1].id == "c");
    }
}

TEST_CASE("collect_records") {
    SimConfig cfg;
    cfg.n_steps = 4;
    const std::vector<Problem> problems = {plume_problem(0, 16), plume_problem(1, 16), plume_problem(2, 16)};
    const auto baselines = run_baselines(problems, cfg, 2, true);
    REQUIRE(baselines.size() == 3);
    CHECK(baselines[1].problem_id == 1);
    CHECK(baselines[0].densities.size() == 5);
    CHECK(baselines[0].cum_div_norm.size() == 4);

    std::vector<SolverCandidate> cands = iterative_family({1, 200});
    SolverCandidate net;
    net.id = "net";
    net.net = seed_net();
    cands.push_back(net);
    SolverCandidate broken = net;
    broken.id = "broken";
    broken.net->params[6].b[0] = std::numeric_limits<double>::quiet_NaN();
    cands.push_back(broken);

    const auto recs = collect_records(cands, problems, baselines, cfg, 1);
    REQUIRE(recs.size() == cands.size() * problems.size());
    CHECK(recs[0].candidate_id == "it1");
    CHECK(recs[2].problem_id == 2);
    CHECK(recs[3].candidate_id == "it200");
    for (int k = 3; k < 6; ++k) CHECK(recs[static_cast<std::size_t>(k)].qloss < 1e-9);
    for (int k = 9; k < 12; ++k) {
        CHECK(recs[static_cast<std::size_t>(k)].failed);
        CHECK(std::isinf(recs[static_cast<std::size_t>(k)].qloss));
    }
    for (int k = 0; k < 9; ++k) {
        CHECK_FALSE(recs[static_cast<std::size_t>(k)].failed);
        CHECK(recs[static_cast<std::size_t>(k)].time_s == doctest::Approx(recs[static_cast<std::size_t>(k)].flops / 1e9));
    }
    CHECK(recs[0].qloss > recs[3].qloss);
    CHECK(recs[0].flops < recs[3].flops);

    SUBCASE("thread count does not change the records") {
        CHECK(collect_records(cands, problems, baselines, cfg, 4) == recs);
    }
    SUBCASE("summarize") {
        summarize(cands, recs);
        CHECK(cands[0].mean_qloss == doctest::Approx((recs[0].qloss + recs[1].qloss + recs[2].qloss) / 3));
        CHECK(cands[0].mean_time == doctest::Approx((recs[0].time_s + recs[1].time_s + recs[2].time_s) / 3));
        CHECK(std::isinf(cands[3].mean_qloss));
        std::vector<SolverCandidate> extra = {net};
        extra[0].id = "missing";
        CHECK_THROWS_AS(summarize(extra, recs), std::invalid_argument);
    }
    SUBCASE("CSV round trip") {
        std::stringstream ss;
        write_records_csv(ss, recs);
        CHECK(ss.str().rfind("candidate_id,problem_id,qloss,time_s,flops\n", 0) == 0);
        const auto back = read_records_csv(ss);
        CHECK(back == recs);
    }
    SUBCASE("manifest") {
        summarize(cands, recs);
        std::stringstream ss;
        write_manifest(ss, cands);
        const auto j = nlohmann::json::parse(ss.str());
        REQUIRE(j.size() == 4);
        CHECK(j[1]["iters"] == 200);
        CHECK(j[2]["source"] == "seed");
        CHECK(j[2]["layers"] == 7);
    }
    CHECK_THROWS_AS(collect_records(cands, problems, {baselines[0]}, cfg, 1), std::invalid_argument);
}
