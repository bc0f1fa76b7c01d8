#include <Eigen/Dense>
#include <chrono>
#include <cmath>

#include "doctest.h"
#include "qaf/error.hpp"
#include "qaf/fluid.hpp"
#include "qaf/poisson.hpp"
#include "test_util.hpp"

using namespace qaf;
using qaf::test::open_box;
using qaf::test::random_geometry;
using qaf::test::random_velocity;

namespace {

// Independent dense assembly straight from the occupancy grid.
Eigen::MatrixXd dense_laplacian(const GeometryField& geo, std::vector<int>& idx) {
    const GridDims& d = geo.dims();
    idx.assign(d.cells(), -1);
    int n = 0;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (geo.occupancy()(i, j) == CellKind::Fluid) idx[j * d.nx + i] = n++;
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    const double s = 1.0 / (d.h * d.h);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) {
            const int r = idx[j * d.nx + i];
            if (r < 0) continue;
            const int nb[4][2] = {{i - 1, j}, {i + 1, j}, {i, j - 1}, {i, j + 1}};
            for (auto& q : nb) {
                const int c = idx[q[1] * d.nx + q[0]];
                if (c < 0) continue;
                a(r, r) += s;
                a(r, c) -= s;
            }
        }
    return a;
}

Eigen::MatrixXd to_dense(const PoissonSystem& sys) {
    const int n = static_cast<int>(sys.size());
    Eigen::MatrixXd m(n, n);
    std::vector<double> e(sys.size()), y(sys.size());
    for (int c = 0; c < n; ++c) {
        std::fill(e.begin(), e.end(), 0.0);
        e[c] = 1.0;
        sys.apply(e, y);
        for (int r = 0; r < n; ++r) m(r, c) = y[r];
    }
    return m;
}

// Mean over each connected component removed (components from the system).
Eigen::VectorXd demean(const PoissonSystem& sys, Eigen::VectorXd v) {
    std::vector<double> tmp(v.data(), v.data() + v.size());
    subtract_component_means(sys, tmp);
    return Eigen::Map<Eigen::VectorXd>(tmp.data(), v.size());
}

}  // namespace

TEST_CASE("isolated fluid cell gives a zero 1x1 system and zero pressure") {
    const GridDims d{5, 5, 1.0};
    Occupancy occ(d, CellKind::Solid);
    occ(2, 2) = CellKind::Fluid;
    const GeometryField geo(occ);
    const PoissonSystem sys = build_system(geo);
    REQUIRE(sys.size() == 1);
    CHECK(sys.diag[0] == 0.0);
    ScalarField rhs(d, 0.0);
    rhs(2, 2) = 3.0;
    const PcgResult r = pcg_solve(sys, rhs, PcgConfig{});
    CHECK(r.iterations == 0);
    CHECK(r.pressure(2, 2) == 0.0);
}

TEST_CASE("no fluid cells is a domain error") {
    const GeometryField geo(Occupancy(GridDims{5, 5, 1.0}, CellKind::Solid));
    CHECK_THROWS_AS(build_system(geo), std::domain_error);
}

TEST_CASE("open 3x3 fluid block has the textbook stencil at its centre") {
    const GeometryField geo = open_box(GridDims{5, 5, 1.0});
    const PoissonSystem sys = build_system(geo);
    REQUIRE(sys.size() == 9);
    const auto centre = static_cast<std::size_t>(sys.unknown(2, 2));
    CHECK(sys.diag[centre] == 4.0);
    const Eigen::MatrixXd a = to_dense(sys);
    int minus_ones = 0;
    for (int c = 0; c < 9; ++c)
        if (a(static_cast<int>(centre), c) == -1.0) ++minus_ones;
    CHECK(minus_ones == 4);
}

TEST_CASE("assembly matches an independent dense stencil and is symmetric PSD") {
    Rng rng(21);
    for (int trial = 0; trial < 4; ++trial) {
        const GeometryField geo = random_geometry(GridDims{6 + trial, 6, 1.0}, rng, 0.25);
        const PoissonSystem sys = build_system(geo);
        std::vector<int> idx;
        const Eigen::MatrixXd expect = dense_laplacian(geo, idx);
        const Eigen::MatrixXd got = to_dense(sys);
        CHECK((expect - got).cwiseAbs().maxCoeff() == 0.0);
        CHECK((got - got.transpose()).cwiseAbs().maxCoeff() == 0.0);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(got);
        CHECK(es.eigenvalues().minCoeff() > -1e-12);
    }
}

TEST_CASE("MIC(0) preconditioner") {
    SUBCASE("diagonal-only system applies r/diag") {
        PoissonSystem sys;
        sys.dims = GridDims{4, 4, 1.0};
        sys.unknown_of_cell.assign(16, -1);
        for (int k = 0; k < 3; ++k) {
            sys.unknown_of_cell[5 + k * 5] = k;
            sys.cell_of_unknown.push_back(5 + k * 5);
        }
        sys.diag = {2.0, 3.0, 5.0};
        sys.off_x = {0, 0, 0};
        sys.off_y = {0, 0, 0};
        sys.component = {0, 1, 2};
        sys.component_count = 3;
        const MicPreconditioner m = mic0_factor(sys);
        std::vector<double> r{1.0, 1.0, 10.0}, z(3);
        m.apply(sys, r, z);
        CHECK(z[0] == doctest::Approx(0.5));
        CHECK(z[1] == doctest::Approx(1.0 / 3.0));
        CHECK(z[2] == doctest::Approx(2.0));
        for (double p : m.precon) CHECK(p > 0.0);
    }

    SUBCASE("apply is symmetric positive definite on a plume-like 16x16 geometry") {
        const GridDims d{16, 16, 1.0};
        Occupancy occ = Occupancy::with_border(d);
        for (int j = 6; j < 9; ++j)
            for (int i = 5; i < 9; ++i) occ(i, j) = CellKind::Solid;
        const GeometryField geo(occ);
        const PoissonSystem sys = build_system(geo);
        const MicPreconditioner m = mic0_factor(sys);
        const int n = static_cast<int>(sys.size());
        Eigen::MatrixXd mi(n, n);
        std::vector<double> e(sys.size()), z(sys.size());
        for (int c = 0; c < n; ++c) {
            std::fill(e.begin(), e.end(), 0.0);
            e[c] = 1.0;
            m.apply(sys, e, z);
            for (int r = 0; r < n; ++r) mi(r, c) = z[r];
        }
        CHECK((mi - mi.transpose()).cwiseAbs().maxCoeff() < 1e-12);
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (mi + mi.transpose()));
        CHECK(es.eigenvalues().minCoeff() > 0.0);
    }

    SUBCASE("3x3 and 4x4 blocks: plain CG wins on the tiny spectra") {
        // Measured: MIC(0) with tau=0.97 needs 6 vs 5 (3x3) and 8 vs 8 (4x4) at tol 1e-5.
        for (int n : {5, 6}) {
            const GeometryField geo = open_box(GridDims{n, n, 1.0});
            const PoissonSystem sys = build_system(geo);
            Rng rng(4);
            const ScalarField rhs = qaf::test::random_scalar(geo.dims(), rng, -1, 1);
            PcgConfig without;
            without.preconditioner = Preconditioner::None;
            const PcgResult a = pcg_solve(sys, rhs, PcgConfig{});
            const PcgResult b = pcg_solve(sys, rhs, without);
            CHECK(a.converged);
            CHECK(b.converged);
            CHECK(a.iterations <= static_cast<int>(sys.size()));
            CHECK(a.iterations >= b.iterations);
        }
    }

    SUBCASE("MIC(0) needs fewer iterations from 8x8 interiors up") {
        Rng rng(4);
        for (int n : {10, 16, 24}) {
            const GeometryField geo = random_geometry(GridDims{n, n, 1.0}, rng, 0.05);
            const PoissonSystem sys = build_system(geo);
            const ScalarField rhs = qaf::test::random_scalar(geo.dims(), rng, -1, 1);
            PcgConfig without;
            without.preconditioner = Preconditioner::None;
            CHECK(pcg_solve(sys, rhs, PcgConfig{}).iterations < pcg_solve(sys, rhs, without).iterations);
        }
    }
}

TEST_CASE("PCG") {
    SUBCASE("zero rhs returns zero in zero iterations") {
        const GeometryField geo = open_box(GridDims{8, 8, 1.0});
        const PcgResult r = pcg_solve(build_system(geo), ScalarField(geo.dims(), 0.0), PcgConfig{});
        CHECK(r.iterations == 0);
        CHECK(r.converged);
        for (double x : r.pressure.values()) CHECK(x == 0.0);
    }

    SUBCASE("matches a dense direct solve with and without MIC(0)") {
        const GridDims d{6, 6, 1.0};  // 4x4 fluid interior
        const GeometryField geo = open_box(d);
        const PoissonSystem sys = build_system(geo);
        Rng rng(17);
        ScalarField rhs = qaf::test::random_scalar(d, rng, -1, 1);
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i)
                if (geo.is_solid(i, j)) rhs(i, j) = 0.0;

        std::vector<int> idx;
        const Eigen::MatrixXd a = dense_laplacian(geo, idx);
        Eigen::VectorXd b(static_cast<int>(sys.size()));
        for (std::size_t k = 0; k < sys.size(); ++k) b[static_cast<int>(k)] = rhs.values()[sys.cell_of_unknown[k]];
        b = demean(sys, b);
        // Pin the null space with a rank-one term, then LU.
        const Eigen::MatrixXd pinned = a + Eigen::MatrixXd::Ones(a.rows(), a.cols()) / a.rows();
        const Eigen::VectorXd exact = demean(sys, pinned.partialPivLu().solve(b));

        PcgConfig tight;
        tight.tol = 1e-12;
        PcgConfig plain = tight;
        plain.preconditioner = Preconditioner::None;
        const PcgResult rm = pcg_solve(sys, rhs, tight);
        const PcgResult rp = pcg_solve(sys, rhs, plain);
        for (const PcgResult* r : {&rm, &rp}) {
            Eigen::VectorXd got(static_cast<int>(sys.size()));
            for (std::size_t k = 0; k < sys.size(); ++k)
                got[static_cast<int>(k)] = r->pressure.values()[sys.cell_of_unknown[k]];
            got = demean(sys, got);
            CHECK((got - exact).norm() / exact.norm() < 1e-6);
        }
    }

    SUBCASE("converged residual bound, monotone history, truncation") {
        Rng rng(99);
        for (int trial = 0; trial < 5; ++trial) {
            const GeometryField geo = random_geometry(GridDims{16, 16, 1.0}, rng, 0.15);
            const PoissonSystem sys = build_system(geo);
            const ScalarField rhs = qaf::test::random_scalar(geo.dims(), rng, -1, 1);
            const PcgResult r = pcg_solve(sys, rhs, PcgConfig{});
            REQUIRE(r.converged);

            std::vector<double> p(sys.size()), ap(sys.size()), b(sys.size());
            for (std::size_t k = 0; k < sys.size(); ++k) {
                p[k] = r.pressure.values()[sys.cell_of_unknown[k]];
                b[k] = rhs.values()[sys.cell_of_unknown[k]];
            }
            subtract_component_means(sys, b);
            sys.apply(p, ap);
            double worst = 0.0, bmax = 0.0;
            for (std::size_t k = 0; k < sys.size(); ++k) {
                worst = std::max(worst, std::abs(ap[k] - b[k]));
                bmax = std::max(bmax, std::abs(b[k]));
            }
            CHECK(worst <= 1e-5 * bmax * (1 + 1e-9));

            for (std::size_t k = 1; k < r.residual_history.size(); ++k)
                CHECK(r.residual_history[k] <= r.residual_history[k - 1] * (1 + 1e-10));

            double prev = std::numeric_limits<double>::infinity();
            for (int m : {1, 2, 3, 5, 8, 13}) {
                PcgConfig c;
                c.tol = 0.0;
                c.max_iters = m;
                const double res = pcg_solve(sys, rhs, c).residual;
                CHECK(res <= prev * (1 + 1e-12));
                prev = res;
            }
        }
    }

    SUBCASE("invalid config") {
        PcgConfig c;
        c.max_iters = 0;
        CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    }
}

TEST_CASE("exact projection leaves divergence within tolerance") {
    Rng rng(1234);
    const GeometryField geo = random_geometry(GridDims{16, 16, 1.0}, rng, 0.1);
    const MacVelocityField vel = random_velocity(geo.dims(), rng);
    PcgPressureSolver solver;
    const auto t0 = std::chrono::steady_clock::now();
    const ProjectionResult out = project(vel, geo, solver, 0.1, 1.0);
    CHECK(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() < 1.0);
    double worst = 0.0;
    const ScalarField div = divergence(out.vel, geo);
    for (double x : div.values()) worst = std::max(worst, std::abs(x));
    CHECK(worst <= 1e-4);
    CHECK(solver.last_result().converged);
}
