#include "qaf/grid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace qaf {

void GridDims::validate() const {
    if (nx < 4 || ny < 4) throw std::invalid_argument("grid must be at least 4x4 cells");
    if (!(h > 0.0) || !std::isfinite(h)) throw std::invalid_argument("cell width must be positive");
}

void require_same_dims(const GridDims& a, const GridDims& b, const char* what) {
    if (!(a == b)) throw std::invalid_argument(std::string(what) + ": dimension mismatch");
}

ScalarField::ScalarField(GridDims dims, double fill) : dims_(dims), values_(dims.cells(), fill) {
    dims_.validate();
}

ScalarField::ScalarField(GridDims dims, std::vector<double> values) : dims_(dims), values_(std::move(values)) {
    dims_.validate();
    if (values_.size() != dims_.cells()) throw std::invalid_argument("scalar field: value count != nx*ny");
}

bool ScalarField::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double x) { return std::isfinite(x); });
}

MacVelocityField::MacVelocityField(GridDims dims, double u_fill, double v_fill)
    : dims_(dims),
      u_(static_cast<std::size_t>(dims.nx + 1) * dims.ny, u_fill),
      v_(static_cast<std::size_t>(dims.nx) * (dims.ny + 1), v_fill) {
    dims_.validate();
}

bool MacVelocityField::all_finite() const {
    auto fin = [](double x) { return std::isfinite(x); };
    return std::all_of(u_.begin(), u_.end(), fin) && std::all_of(v_.begin(), v_.end(), fin);
}

MacVelocityField& MacVelocityField::operator+=(const MacVelocityField& o) {
    require_same_dims(dims_, o.dims_, "velocity +=");
    for (std::size_t k = 0; k < u_.size(); ++k) u_[k] += o.u_[k];
    for (std::size_t k = 0; k < v_.size(); ++k) v_[k] += o.v_[k];
    return *this;
}

MacVelocityField& MacVelocityField::operator*=(double s) {
    for (double& x : u_) x *= s;
    for (double& x : v_) x *= s;
    return *this;
}

Occupancy::Occupancy(GridDims d, CellKind fill) : dims(d), cells(d.cells(), fill) {}

Occupancy Occupancy::with_border(GridDims d) {
    d.validate();
    Occupancy occ(d);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (i == 0 || j == 0 || i == d.nx - 1 || j == d.ny - 1) occ(i, j) = CellKind::Solid;
    return occ;
}

ScalarField compute_distance_field_exact(const Occupancy& occ) {
    const GridDims& d = occ.dims;
    std::vector<std::pair<int, int>> solids;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (occ(i, j) == CellKind::Solid) solids.emplace_back(i, j);

    ScalarField dist(d, 0.0);
    for (int j = 0; j < d.ny; ++j) {
        for (int i = 0; i < d.nx; ++i) {
            if (occ(i, j) == CellKind::Solid) continue;
            long best = std::numeric_limits<long>::max();
            for (auto [si, sj] : solids) {
                const long dx = si - i, dy = sj - j;
                best = std::min(best, dx * dx + dy * dy);
            }
            dist(i, j) = solids.empty() ? std::numeric_limits<double>::infinity()
                                        : std::sqrt(static_cast<double>(best));
        }
    }
    return dist;
}

namespace {

// Two raster passes propagating the offset to the nearest known Solid cell
// (8-neighbourhood). Error stays well below one cell width on grid shapes.
ScalarField propagate_distance(const Occupancy& occ) {
    const GridDims& d = occ.dims;
    constexpr int kFar = 1 << 20;
    struct Off {
        int dx, dy;
        long sq() const { return static_cast<long>(dx) * dx + static_cast<long>(dy) * dy; }
    };
    std::vector<Off> off(d.cells(), Off{kFar, kFar});
    auto at = [&](int i, int j) -> Off& { return off[static_cast<std::size_t>(j) * d.nx + i]; };
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (occ(i, j) == CellKind::Solid) at(i, j) = Off{0, 0};

    auto relax = [&](int i, int j, int di, int dj) {
        const int ni = i + di, nj = j + dj;
        if (ni < 0 || nj < 0 || ni >= d.nx || nj >= d.ny) return;
        const Off& o = at(ni, nj);
        if (o.dx == kFar) return;
        Off cand{o.dx + di, o.dy + dj};
        if (cand.sq() < at(i, j).sq()) at(i, j) = cand;
    };

    for (int j = 0; j < d.ny; ++j) {
        for (int i = 0; i < d.nx; ++i) {
            relax(i, j, -1, 0);
            relax(i, j, 0, -1);
            relax(i, j, -1, -1);
            relax(i, j, 1, -1);
        }
        for (int i = d.nx - 1; i >= 0; --i) relax(i, j, 1, 0);
    }
    for (int j = d.ny - 1; j >= 0; --j) {
        for (int i = d.nx - 1; i >= 0; --i) {
            relax(i, j, 1, 0);
            relax(i, j, 0, 1);
            relax(i, j, 1, 1);
            relax(i, j, -1, 1);
        }
        for (int i = 0; i < d.nx; ++i) relax(i, j, -1, 0);
    }

    ScalarField dist(d, 0.0);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) {
            const Off& o = at(i, j);
            dist(i, j) = o.dx == kFar ? std::numeric_limits<double>::infinity()
                                      : std::sqrt(static_cast<double>(o.sq()));
        }
    return dist;
}

}  // namespace

ScalarField compute_distance_field(const Occupancy& occ) {
    if (occ.dims.cells() <= 64u * 64u) return compute_distance_field_exact(occ);
    return propagate_distance(occ);
}

GeometryField::GeometryField(Occupancy occ) : occ_(std::move(occ)) {
    const GridDims& d = occ_.dims;
    d.validate();
    if (occ_.cells.size() != d.cells()) throw std::invalid_argument("occupancy: cell count != nx*ny");
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if ((i == 0 || j == 0 || i == d.nx - 1 || j == d.ny - 1) && occ_(i, j) == CellKind::Fluid)
                throw std::invalid_argument("geometry: border cells must be Solid");
    dist_ = compute_distance_field(occ_);
}

std::size_t GeometryField::fluid_count() const {
    return static_cast<std::size_t>(std::count(occ_.cells.begin(), occ_.cells.end(), CellKind::Fluid));
}

ScalarField divergence(const MacVelocityField& vel, const GeometryField& geo) {
    require_same_dims(vel.dims(), geo.dims(), "divergence");
    const GridDims& d = vel.dims();
    const double inv_h = 1.0 / d.h;
    ScalarField div(d, 0.0);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (geo.is_fluid(i, j))
                div(i, j) = (vel.u(i + 1, j) - vel.u(i, j) + vel.v(i, j + 1) - vel.v(i, j)) * inv_h;
    return div;
}

void enforce_solid_faces(MacVelocityField& vel, const GeometryField& geo) {
    require_same_dims(vel.dims(), geo.dims(), "enforce_solid_faces");
    const GridDims& d = vel.dims();
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i <= d.nx; ++i)
            if (i == 0 || i == d.nx || geo.is_solid(i - 1, j) || geo.is_solid(i, j)) vel.u(i, j) = 0.0;
    for (int j = 0; j <= d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (j == 0 || j == d.ny || geo.is_solid(i, j - 1) || geo.is_solid(i, j)) vel.v(i, j) = 0.0;
}

MacVelocityField subtract_pressure_gradient(const MacVelocityField& vel, const ScalarField& p,
                                            const GeometryField& geo, double dt, double rho) {
    require_same_dims(vel.dims(), geo.dims(), "subtract_pressure_gradient");
    require_same_dims(p.dims(), geo.dims(), "subtract_pressure_gradient");
    if (!(dt > 0.0) || !(rho > 0.0)) throw std::invalid_argument("subtract_pressure_gradient: dt, rho must be > 0");
    const GridDims& d = vel.dims();
    const double scale = dt / (rho * d.h);
    MacVelocityField out = vel;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 1; i < d.nx; ++i)
            if (geo.is_fluid(i - 1, j) && geo.is_fluid(i, j)) out.u(i, j) -= scale * (p(i, j) - p(i - 1, j));
    for (int j = 1; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (geo.is_fluid(i, j - 1) && geo.is_fluid(i, j)) out.v(i, j) -= scale * (p(i, j) - p(i, j - 1));
    enforce_solid_faces(out, geo);
    return out;
}

namespace {

// Samples a width x height lattice whose sample (a, b) sits at world position
// ((a + ox) * h, (b + oy) * h).
template <typename Get>
double bilinear(Get&& get, int width, int height, double ox, double oy, double h, double x, double y) {
    double gx = std::clamp(x / h - ox, 0.0, static_cast<double>(width - 1));
    double gy = std::clamp(y / h - oy, 0.0, static_cast<double>(height - 1));
    const int i0 = std::min(static_cast<int>(gx), width - 2);
    const int j0 = std::min(static_cast<int>(gy), height - 2);
    const double fx = gx - i0, fy = gy - j0;
    const double a = get(i0, j0) * (1.0 - fx) + get(i0 + 1, j0) * fx;
    const double b = get(i0, j0 + 1) * (1.0 - fx) + get(i0 + 1, j0 + 1) * fx;
    return a * (1.0 - fy) + b * fy;
}

}  // namespace

double sample_bilinear(const ScalarField& f, double x, double y) {
    const GridDims& d = f.dims();
    return bilinear([&](int i, int j) { return f(i, j); }, d.nx, d.ny, 0.5, 0.5, d.h, x, y);
}

double sample_u(const MacVelocityField& vel, double x, double y) {
    const GridDims& d = vel.dims();
    return bilinear([&](int i, int j) { return vel.u(i, j); }, d.nx + 1, d.ny, 0.0, 0.5, d.h, x, y);
}

double sample_v(const MacVelocityField& vel, double x, double y) {
    const GridDims& d = vel.dims();
    return bilinear([&](int i, int j) { return vel.v(i, j); }, d.nx, d.ny + 1, 0.5, 0.0, d.h, x, y);
}

}  // namespace qaf
