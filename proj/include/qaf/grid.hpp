#pragma once

// Staggered marker-and-cell storage for 2D fields.
//
// Cell (i, j) covers [i*h, (i+1)*h] x [j*h, (j+1)*h]. Scalars live at cell
// centres, u at the centres of vertical faces (x = i*h), v at the centres of
// horizontal faces (y = j*h). All arrays are row-major in y: index = j*width + i.

#include <cstdint>
#include <span>
#include <vector>

namespace qaf {

struct GridDims {
    int nx = 4;
    int ny = 4;
    double h = 1.0;

    /// Throws std::invalid_argument unless nx, ny >= 4 and h > 0.
    void validate() const;
    std::size_t cells() const { return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny); }
    bool operator==(const GridDims&) const = default;
};

class ScalarField {
  public:
    ScalarField() = default;
    explicit ScalarField(GridDims dims, double fill = 0.0);
    ScalarField(GridDims dims, std::vector<double> values);

    const GridDims& dims() const { return dims_; }
    double& operator()(int i, int j) { return values_[idx(i, j)]; }
    double operator()(int i, int j) const { return values_[idx(i, j)]; }
    std::span<double> values() & { return values_; }
    std::span<const double> values() const& { return values_; }
    void values() && = delete;  // would dangle
    bool all_finite() const;

    bool operator==(const ScalarField&) const = default;

  private:
    std::size_t idx(int i, int j) const {
        return static_cast<std::size_t>(j) * static_cast<std::size_t>(dims_.nx) + static_cast<std::size_t>(i);
    }
    GridDims dims_;
    std::vector<double> values_;
};

class MacVelocityField {
  public:
    MacVelocityField() = default;
    explicit MacVelocityField(GridDims dims, double u_fill = 0.0, double v_fill = 0.0);

    const GridDims& dims() const { return dims_; }

    // u has (nx+1) x ny samples, v has nx x (ny+1).
    double& u(int i, int j) { return u_[static_cast<std::size_t>(j) * (dims_.nx + 1) + i]; }
    double u(int i, int j) const { return u_[static_cast<std::size_t>(j) * (dims_.nx + 1) + i]; }
    double& v(int i, int j) { return v_[static_cast<std::size_t>(j) * dims_.nx + i]; }
    double v(int i, int j) const { return v_[static_cast<std::size_t>(j) * dims_.nx + i]; }

    std::span<double> u_values() & { return u_; }
    std::span<const double> u_values() const& { return u_; }
    void u_values() && = delete;
    std::span<double> v_values() & { return v_; }
    std::span<const double> v_values() const& { return v_; }
    void v_values() && = delete;
    bool all_finite() const;

    MacVelocityField& operator+=(const MacVelocityField& o);
    MacVelocityField& operator*=(double s);

    bool operator==(const MacVelocityField&) const = default;

  private:
    GridDims dims_;
    std::vector<double> u_, v_;
};

enum class CellKind : std::uint8_t { Fluid = 0, Solid = 1 };

struct Occupancy {
    GridDims dims;
    std::vector<CellKind> cells;

    explicit Occupancy(GridDims d = {}, CellKind fill = CellKind::Fluid);
    CellKind operator()(int i, int j) const { return cells[static_cast<std::size_t>(j) * dims.nx + i]; }
    CellKind& operator()(int i, int j) { return cells[static_cast<std::size_t>(j) * dims.nx + i]; }

    /// Fluid interior with a one-cell Solid wall on all four borders.
    static Occupancy with_border(GridDims d);
    bool operator==(const Occupancy&) const = default;
};

/// Exact nearest-Solid Euclidean distance (in cell widths) for grids up to
/// 64x64 cells; two-pass nearest-site propagation above that.
ScalarField compute_distance_field(const Occupancy& occ);

/// Reference O(cells * solids) scan, used below the brute-force threshold.
ScalarField compute_distance_field_exact(const Occupancy& occ);

class GeometryField {
  public:
    GeometryField() = default;
    /// Throws std::invalid_argument if any border cell is Fluid.
    explicit GeometryField(Occupancy occ);

    const GridDims& dims() const { return occ_.dims; }
    const Occupancy& occupancy() const { return occ_; }
    const ScalarField& distance() const { return dist_; }
    bool is_solid(int i, int j) const { return occ_(i, j) == CellKind::Solid; }
    bool is_fluid(int i, int j) const { return occ_(i, j) == CellKind::Fluid; }
    std::size_t fluid_count() const;

    bool operator==(const GeometryField&) const = default;

  private:
    Occupancy occ_;
    ScalarField dist_;
};

// -- operators ---------------------------------------------------------------

/// Cell-centred (u[i+1,j]-u[i,j]+v[i,j+1]-v[i,j])/h; Solid cells are exactly 0.
ScalarField divergence(const MacVelocityField& vel, const GeometryField& geo);

/// Zeroes every face that touches a Solid cell (or the domain edge).
void enforce_solid_faces(MacVelocityField& vel, const GeometryField& geo);

/// u <- u - dt/rho * grad p on faces between two Fluid cells; faces touching
/// Solid are set to 0.
MacVelocityField subtract_pressure_gradient(const MacVelocityField& vel, const ScalarField& p,
                                            const GeometryField& geo, double dt, double rho);

/// Bilinear samples at world position (x, y); coordinates are clamped to the
/// rectangle spanned by the sample points of the respective field.
double sample_bilinear(const ScalarField& f, double x, double y);
double sample_u(const MacVelocityField& vel, double x, double y);
double sample_v(const MacVelocityField& vel, double x, double y);

void require_same_dims(const GridDims& a, const GridDims& b, const char* what);

}  // namespace qaf
