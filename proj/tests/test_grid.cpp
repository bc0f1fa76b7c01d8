#include <cmath>

#include "doctest.h"
#include "qaf/grid.hpp"
#include "test_util.hpp"

using namespace qaf;
using qaf::test::open_box;
using qaf::test::random_geometry;
using qaf::test::random_velocity;

TEST_CASE("grid dims are validated") {
    CHECK_THROWS_AS(ScalarField(GridDims{3, 8, 1.0}), std::invalid_argument);
    CHECK_THROWS_AS(ScalarField(GridDims{8, 8, 0.0}), std::invalid_argument);
    CHECK_NOTHROW(ScalarField(GridDims{4, 4, 1.0}));
}

TEST_CASE("geometry requires a solid border") {
    Occupancy occ(GridDims{6, 6, 1.0});
    CHECK_THROWS_AS(GeometryField{occ}, std::invalid_argument);
    CHECK_NOTHROW(GeometryField(Occupancy::with_border(GridDims{6, 6, 1.0})));
}

TEST_CASE("divergence of a uniform field is zero on fluid cells") {
    const GridDims d{8, 8, 1.0};
    const auto geo = open_box(d);
    const MacVelocityField vel(d, 1.0, 1.0);
    const ScalarField div = divergence(vel, geo);
    for (double x : div.values()) CHECK(x == 0.0);
}

TEST_CASE("divergence of a linear ramp in u is one") {
    const GridDims d{8, 8, 1.0};
    const auto geo = open_box(d);
    MacVelocityField vel(d);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i <= d.nx; ++i) vel.u(i, j) = i * d.h;
    const ScalarField div = divergence(vel, geo);
    for (int j = 1; j < d.ny - 1; ++j)
        for (int i = 1; i < d.nx - 1; ++i) CHECK(div(i, j) == doctest::Approx(1.0));
    CHECK(div(0, 3) == 0.0);
}

TEST_CASE("divergence matches a straight-loop stencil and is linear") {
    Rng rng(7);
    const GridDims d{8, 8, 0.5};
    const auto geo = random_geometry(d, rng, 0.2);
    const auto a = random_velocity(d, rng);
    const auto b = random_velocity(d, rng);
    const ScalarField da = divergence(a, geo);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) {
            double expect = 0.0;
            if (geo.occupancy()(i, j) == CellKind::Fluid) {
                const double du = a.u_values()[j * (d.nx + 1) + i + 1] - a.u_values()[j * (d.nx + 1) + i];
                const double dv = a.v_values()[(j + 1) * d.nx + i] - a.v_values()[j * d.nx + i];
                expect = (du + dv) / d.h;
            }
            CHECK(da(i, j) == doctest::Approx(expect).epsilon(1e-14));
        }

    MacVelocityField combo = a;
    combo *= 2.5;
    MacVelocityField bb = b;
    bb *= -0.75;
    combo += bb;
    const ScalarField dc = divergence(combo, geo);
    const ScalarField db = divergence(b, geo);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) CHECK(std::abs(dc(i, j) - (2.5 * da(i, j) - 0.75 * db(i, j))) < 1e-12);
}

TEST_CASE("divergence rejects mismatched dims") {
    const MacVelocityField vel(GridDims{8, 8, 1.0});
    CHECK_THROWS_AS(divergence(vel, open_box(GridDims{8, 6, 1.0})), std::invalid_argument);
}

TEST_CASE("pressure gradient subtraction") {
    const GridDims d{8, 8, 1.0};
    const auto geo = open_box(d);
    Rng rng(3);

    SUBCASE("constant pressure is the identity on interior fluid faces") {
        MacVelocityField vel = random_velocity(d, rng);
        enforce_solid_faces(vel, geo);
        const auto out = subtract_pressure_gradient(vel, ScalarField(d, 4.2), geo, 0.1, 1.0);
        CHECK(out == vel);
    }
    SUBCASE("unit x-gradient gives -1 on interior u faces") {
        ScalarField p(d);
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) p(i, j) = i;
        const auto out = subtract_pressure_gradient(MacVelocityField(d), p, geo, 1.0, 1.0);
        for (int j = 1; j < d.ny - 1; ++j)
            for (int i = 2; i < d.nx - 1; ++i) CHECK(out.u(i, j) == doctest::Approx(-1.0));
        // faces touching the wall are clamped
        CHECK(out.u(1, 3) == 0.0);
        CHECK(out.u(d.nx - 1, 3) == 0.0);
        for (double x : out.v_values()) CHECK(x == 0.0);
    }
    SUBCASE("invalid parameters") {
        CHECK_THROWS_AS(subtract_pressure_gradient(MacVelocityField(d), ScalarField(d), geo, 0.0, 1.0),
                        std::invalid_argument);
    }
}

TEST_CASE("bilinear sampling") {
    const GridDims d{6, 5, 0.5};
    Rng rng(11);
    ScalarField f = qaf::test::random_scalar(d, rng);

    SUBCASE("exact sample points return the stored value") {
        CHECK(sample_bilinear(f, (2 + 0.5) * d.h, (3 + 0.5) * d.h) == doctest::Approx(f(2, 3)).epsilon(1e-15));
    }
    SUBCASE("midpoint is the average") {
        const double x = 3.0 * d.h, y = 1.5 * d.h;  // between centres (2,1) and (3,1)
        CHECK(sample_bilinear(f, x, y) == doctest::Approx(0.5 * (f(2, 1) + f(3, 1))));
    }
    SUBCASE("affine fields are reproduced on all three lattices") {
        auto g = [](double x, double y) { return 2.0 * x + 3.0 * y; };
        ScalarField s(d);
        MacVelocityField vel(d);
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) s(i, j) = g((i + 0.5) * d.h, (j + 0.5) * d.h);
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i <= d.nx; ++i) vel.u(i, j) = g(i * d.h, (j + 0.5) * d.h);
        for (int j = 0; j <= d.ny; ++j)
            for (int i = 0; i < d.nx; ++i) vel.v(i, j) = g((i + 0.5) * d.h, j * d.h);
        for (int k = 0; k < 20; ++k) {
            // inside the region covered by every lattice's sample points
            const double x = rng.uniform(0.5 * d.h, (d.nx - 0.5) * d.h);
            const double y = rng.uniform(0.5 * d.h, (d.ny - 0.5) * d.h);
            CHECK(std::abs(sample_bilinear(s, x, y) - g(x, y)) < 1e-12);
            CHECK(std::abs(sample_u(vel, x, y) - g(x, y)) < 1e-12);
            CHECK(std::abs(sample_v(vel, x, y) - g(x, y)) < 1e-12);
        }
    }
    SUBCASE("out-of-domain coordinates clamp") {
        CHECK(sample_bilinear(f, -10.0, -10.0) == f(0, 0));
        CHECK(sample_bilinear(f, 100.0, 100.0) == f(d.nx - 1, d.ny - 1));
    }
}

TEST_CASE("distance field") {
    SUBCASE("all solid gives zeros") {
        const Occupancy occ(GridDims{5, 5, 1.0}, CellKind::Solid);
        const ScalarField dist = compute_distance_field(occ);
        for (double x : dist.values()) CHECK(x == 0.0);
    }
    SUBCASE("single solid corner") {
        Occupancy occ(GridDims{4, 4, 1.0});
        occ(0, 0) = CellKind::Solid;
        const ScalarField dist = compute_distance_field(occ);
        CHECK(dist(3, 3) == doctest::Approx(std::sqrt(18.0)));
        CHECK(dist(0, 0) == 0.0);
    }
    SUBCASE("random occupancy matches an all-pairs scan") {
        Rng rng(5);
        for (int trial = 0; trial < 5; ++trial) {
            const int n = 4 + trial * 3;  // up to 16x16
            Occupancy occ(GridDims{n, n, 1.0});
            for (auto& c : occ.cells) c = rng.uniform() < 0.2 ? CellKind::Solid : CellKind::Fluid;
            occ(0, 0) = CellKind::Solid;
            const ScalarField dist = compute_distance_field(occ);
            for (int j = 0; j < n; ++j)
                for (int i = 0; i < n; ++i) {
                    double best = 1e300;
                    for (int sj = 0; sj < n; ++sj)
                        for (int si = 0; si < n; ++si)
                            if (occ(si, sj) == CellKind::Solid)
                                best = std::min(best, std::hypot(double(si - i), double(sj - j)));
                    CHECK(dist(i, j) == doctest::Approx(best).epsilon(1e-15));
                }
        }
    }
    SUBCASE("propagated distance on large grids is within one cell of exact") {
        Rng rng(9);
        const GridDims d{80, 72, 1.0};
        Occupancy occ = Occupancy::with_border(d);
        for (int k = 0; k < 6; ++k) {
            const int ci = rng.uniform_int(10, 70), cj = rng.uniform_int(10, 60), r = rng.uniform_int(2, 6);
            for (int j = 1; j < d.ny - 1; ++j)
                for (int i = 1; i < d.nx - 1; ++i)
                    if ((i - ci) * (i - ci) + (j - cj) * (j - cj) <= r * r) occ(i, j) = CellKind::Solid;
        }
        const ScalarField approx = compute_distance_field(occ);
        const ScalarField exact = compute_distance_field_exact(occ);
        double worst = 0.0;
        for (std::size_t k = 0; k < exact.values().size(); ++k)
            worst = std::max(worst, std::abs(approx.values()[k] - exact.values()[k]));
        CHECK(worst < 1.0);
        for (std::size_t k = 0; k < exact.values().size(); ++k)
            CHECK((approx.values()[k] == 0.0) == (occ.cells[k] == CellKind::Solid));
    }
}
