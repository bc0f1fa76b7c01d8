#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "qaf/scenario.hpp"

using namespace qaf;

namespace {

double max_fluid_div(const SimState& s) {
    const ScalarField div = divergence(s.vel, s.geo);
    const GridDims& d = s.geo.dims();
    double worst = 0.0;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (s.geo.is_fluid(i, j)) worst = std::max(worst, std::abs(div(i, j)));
    return worst;
}

double max_face(const SimState& s) {
    const GridDims& d = s.geo.dims();
    double m = 0.0;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i <= d.nx; ++i) m = std::max(m, std::abs(s.vel.u(i, j)));
    for (int j = 0; j <= d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) m = std::max(m, std::abs(s.vel.v(i, j)));
    return m;
}

}  // namespace

TEST_CASE("scenario is a pure function of the seed") {
    ScenarioSpec spec;
    spec.dims = GridDims{32, 32, 1.0};
    CHECK(generate_scenario(spec, 11, 3) == generate_scenario(spec, 11, 3));
    bool differs = false;
    for (std::uint64_t s = 12; s < 20 && !differs; ++s) differs = !(generate_scenario(spec, s, 3) == generate_scenario(spec, 11, 3));
    CHECK(differs);

    const auto a = make_problems(spec, 100, 3, 5), b = make_problems(spec, 100, 3, 5);
    REQUIRE(a.size() == 3);
    for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].id == 5 + static_cast<int>(k));
        const auto va = a[k].initial.density.values(), vb = b[k].initial.density.values();
        CHECK(std::equal(va.begin(), va.end(), vb.begin(), vb.end()));
    }
}

TEST_CASE("initial velocity is divergence free and hits the amplitude") {
    ScenarioSpec spec;
    spec.dims = GridDims{40, 32, 1.0};
    spec.amplitude = 0.7;
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
        const SimState s = build_initial_state(generate_scenario(spec, seed));
        CHECK(max_fluid_div(s) <= 1e-10);
        CHECK(max_face(s) == doctest::Approx(0.7).epsilon(1e-12));
        // faces touching Solid carry nothing
        const GridDims& d = s.geo.dims();
        for (int j = 0; j < d.ny; ++j)
            for (int i = 1; i < d.nx; ++i)
                if (!s.geo.is_fluid(i - 1, j) || !s.geo.is_fluid(i, j)) CHECK(s.vel.u(i, j) == 0.0);
    }
}

TEST_CASE("zero modes give a resting fluid") {
    ScenarioSpec spec;
    spec.dims = GridDims{16, 16, 1.0};
    spec.modes = 0;
    const SimState s = build_initial_state(generate_scenario(spec, 4));
    CHECK(max_face(s) == 0.0);
}

TEST_CASE("inflow box is fluid and seeded with density") {
    ScenarioSpec spec;
    spec.dims = GridDims{24, 24, 1.0};
    spec.max_obstacles = 6;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Scenario sc = generate_scenario(spec, seed);
        const SimState s = build_initial_state(sc);
        for (int j = sc.inflow.j0; j < sc.inflow.j1; ++j)
            for (int i = sc.inflow.i0; i < sc.inflow.i1; ++i) {
                CHECK(s.geo.is_fluid(i, j));
                CHECK(s.density(i, j) == 1.0);
            }
    }
}

TEST_CASE("bad scenarios are rejected") {
    ScenarioSpec spec;
    spec.dims = GridDims{8, 8, 1.0};
    CHECK_THROWS_AS(spec.validate(), std::invalid_argument);

    spec.dims = GridDims{16, 16, 1.0};
    Scenario sc = generate_scenario(spec, 1);
    sc.obstacles.push_back(Obstacle{Obstacle::Shape::Circle, 15.0, 8.0, 3.0, 3.0});
    CHECK_THROWS_AS(build_initial_state(sc), std::invalid_argument);

    sc = generate_scenario(spec, 1);
    sc.obstacles.push_back(Obstacle{Obstacle::Shape::Rect, 8.0, 2.0, 3.0, 1.5});
    CHECK_THROWS_AS(build_initial_state(sc), std::invalid_argument);
}
