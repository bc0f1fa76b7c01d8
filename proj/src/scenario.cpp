#include "qaf/scenario.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "qaf/rng.hpp"

namespace qaf {

void ScenarioSpec::validate() const {
    dims.validate();
    if (dims.nx < 12 || dims.ny < 12) throw std::invalid_argument("scenario grid must be at least 12x12");
    if (max_obstacles < 0 || modes < 0 || max_wavenumber < 1)
        throw std::invalid_argument("scenario counts must be non-negative");
    if (!(amplitude >= 0.0) || !(inflow_rate >= 0.0)) throw std::invalid_argument("scenario amplitudes must be >= 0");
}

namespace {

bool covers(const Obstacle& o, double x, double y) {
    if (o.shape == Obstacle::Shape::Circle) return std::hypot(x - o.cx, y - o.cy) <= o.sx;
    return std::abs(x - o.cx) <= o.sx && std::abs(y - o.cy) <= o.sy;
}

}  // namespace

Scenario generate_scenario(const ScenarioSpec& spec, std::uint64_t seed, int id) {
    spec.validate();
    Rng rng(seed);
    Scenario sc;
    sc.id = id;
    sc.seed = seed;
    sc.dims = spec.dims;
    sc.amplitude = spec.amplitude;
    const int nx = spec.dims.nx, ny = spec.dims.ny;

    const int half = std::max(1, nx / 10);
    sc.inflow = Inflow{nx / 2 - half, 1, nx / 2 + half, 1 + std::max(1, ny / 16), spec.inflow_rate};

    // Obstacles live above the lower third so the source stays clear.
    const int n_obs = rng.uniform_int(0, spec.max_obstacles);
    for (int k = 0; k < n_obs; ++k) {
        Obstacle o;
        o.shape = rng.uniform() < 0.5 ? Obstacle::Shape::Circle : Obstacle::Shape::Rect;
        const double r_max = std::max(1.5, std::min(nx, ny) / 8.0);
        o.sx = rng.uniform(1.0, r_max);
        o.sy = o.shape == Obstacle::Shape::Circle ? o.sx : rng.uniform(1.0, r_max);
        o.cx = rng.uniform(2.0 + o.sx, nx - 2.0 - o.sx);
        o.cy = rng.uniform(std::max(ny / 3.0, 2.0) + o.sy, ny - 2.0 - o.sy);
        sc.obstacles.push_back(o);
    }
    for (int m = 0; m < spec.modes; ++m) {
        TurbulenceMode t;
        t.kx = rng.uniform_int(1, spec.max_wavenumber);
        t.ky = rng.uniform_int(1, spec.max_wavenumber);
        t.amp = rng.normal() / std::hypot(t.kx, t.ky);
        t.phase_x = rng.uniform(0.0, 2.0 * std::numbers::pi);
        t.phase_y = rng.uniform(0.0, 2.0 * std::numbers::pi);
        sc.modes.push_back(t);
    }
    return sc;
}

SimState build_initial_state(const Scenario& sc) {
    const GridDims& d = sc.dims;
    d.validate();
    Occupancy occ = Occupancy::with_border(d);
    for (const Obstacle& o : sc.obstacles) {
        const double ex = o.sx, ey = o.shape == Obstacle::Shape::Circle ? o.sx : o.sy;
        if (!(ex > 0.0 && ey > 0.0) || o.cx - ex < 0.0 || o.cx + ex > d.nx || o.cy - ey < 0.0 || o.cy + ey > d.ny)
            throw std::invalid_argument("obstacle outside the domain");
        for (int j = 0; j < d.ny; ++j)
            for (int i = 0; i < d.nx; ++i)
                if (covers(o, i + 0.5, j + 0.5)) occ(i, j) = CellKind::Solid;
    }
    const Inflow& in = sc.inflow;
    if (in.i0 < 0 || in.j0 < 0 || in.i1 > d.nx || in.j1 > d.ny || in.i0 >= in.i1 || in.j0 >= in.j1)
        throw std::invalid_argument("inflow region outside the domain");
    for (int j = in.j0; j < in.j1; ++j)
        for (int i = in.i0; i < in.i1; ++i)
            if (occ(i, j) == CellKind::Solid) throw std::invalid_argument("inflow region is not Fluid");

    SimState s = make_state(GeometryField(std::move(occ)));
    const GeometryField& geo = s.geo;
    for (int j = in.j0; j < in.j1; ++j)
        for (int i = in.i0; i < in.i1; ++i) s.density(i, j) = 1.0;
    s.inflow = in;

    // Stream function on cell corners, pinned to 0 at any corner of a Solid
    // cell; face velocities are its differences, so each cell's discrete
    // divergence telescopes to zero and Solid faces carry no flow.
    const int px = d.nx + 1, py = d.ny + 1;
    std::vector<double> psi(static_cast<std::size_t>(px) * py, 0.0);
    auto solid_corner = [&](int i, int j) {
        for (int b = j - 1; b <= j; ++b)
            for (int a = i - 1; a <= i; ++a)
                if (a < 0 || b < 0 || a >= d.nx || b >= d.ny || !geo.is_fluid(a, b)) return true;
        return false;
    };
    for (int j = 0; j < py; ++j)
        for (int i = 0; i < px; ++i) {
            if (solid_corner(i, j)) continue;
            double v = 0.0;
            for (const auto& m : sc.modes)
                v += m.amp * std::sin(2.0 * std::numbers::pi * m.kx * i / d.nx + m.phase_x) *
                     std::sin(2.0 * std::numbers::pi * m.ky * j / d.ny + m.phase_y);
            psi[static_cast<std::size_t>(j) * px + i] = v;
        }
    auto P = [&](int i, int j) { return psi[static_cast<std::size_t>(j) * px + i]; };
    double vmax = 0.0;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i <= d.nx; ++i) vmax = std::max(vmax, std::abs(P(i, j + 1) - P(i, j)));
    for (int j = 0; j <= d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) vmax = std::max(vmax, std::abs(P(i + 1, j) - P(i, j)));
    const double scale = vmax > 0.0 ? sc.amplitude / vmax : 0.0;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i <= d.nx; ++i) s.vel.u(i, j) = scale * (P(i, j + 1) - P(i, j));
    for (int j = 0; j <= d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) s.vel.v(i, j) = -scale * (P(i + 1, j) - P(i, j));
    return s;
}

std::vector<Problem> make_problems(const ScenarioSpec& spec, std::uint64_t seed_base, int count, int first_id) {
    if (count < 0) throw std::invalid_argument("problem count must be >= 0");
    std::vector<Problem> out;
    for (int k = 0; k < count; ++k) {
        const int id = first_id + k;
        out.push_back(Problem{id, build_initial_state(generate_scenario(spec, seed_base + static_cast<std::uint64_t>(id), id))});
    }
    return out;
}

}  // namespace qaf
