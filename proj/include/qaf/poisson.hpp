#pragma once

// Five-point pressure Poisson system on the Fluid cells of a MAC grid and a
// MIC(0)-preconditioned conjugate gradient solver for it.

#include <cstdint>
#include <span>
#include <vector>

#include "qaf/grid.hpp"
#include "qaf/solver.hpp"

namespace qaf {

/// Negative Laplacian restricted to Fluid cells with Neumann conditions at
/// Solid neighbours. Unknowns are numbered in cell order (j*nx + i).
struct PoissonSystem {
    GridDims dims;
    std::vector<int> unknown_of_cell;  ///< -1 for Solid cells
    std::vector<int> cell_of_unknown;
    std::vector<double> diag;   ///< (#Fluid neighbours) / h^2
    std::vector<double> off_x;  ///< coupling to the +x neighbour (0 if none)
    std::vector<double> off_y;  ///< coupling to the +y neighbour (0 if none)
    std::vector<int> component;  ///< connected Fluid component per unknown
    int component_count = 0;

    std::size_t size() const { return diag.size(); }
    int unknown(int i, int j) const { return unknown_of_cell[static_cast<std::size_t>(j) * dims.nx + i]; }

    /// y = A x over unknowns.
    void apply(std::span<const double> x, std::span<double> y) const;
};

/// Throws std::domain_error when the geometry has no Fluid cell.
PoissonSystem build_system(const GeometryField& geo);

/// Right-hand side -(rho/dt) * div on Fluid cells; A p = rhs makes the
/// gradient-corrected velocity divergence free.
ScalarField pressure_rhs(const ScalarField& div, const GeometryField& geo, double dt, double rho);

/// Removes the mean of `values` over every connected Fluid component.
void subtract_component_means(const PoissonSystem& sys, std::span<double> values);

struct MicPreconditioner {
    std::vector<double> precon;  ///< 1/sqrt(E) per unknown, > 0

    /// z = M^-1 r via the forward and backward triangular sweeps.
    void apply(const PoissonSystem& sys, std::span<const double> r, std::span<double> z) const;
};

struct MicParams {
    double tau = 0.97;
    double sigma = 0.25;
};

/// Modified incomplete Cholesky, level 0. Isolated cells (diag 0) get the
/// identity. Throws NumericError on a non-positive or non-finite pivot.
MicPreconditioner mic0_factor(const PoissonSystem& sys, MicParams params = {});

enum class Preconditioner { Mic0, None };

struct PcgConfig {
    double tol = 1e-5;  ///< relative to max|rhs| (infinity norm)
    int max_iters = 1000;
    Preconditioner preconditioner = Preconditioner::Mic0;
    MicParams mic = {};

    void validate() const;
};

struct PcgResult {
    ScalarField pressure;  ///< Solid cells 0
    int iterations = 0;
    double residual = 0.0;  ///< max |rhs - A p| of the returned iterate
    double rhs_norm = 0.0;  ///< max |rhs| after mean removal
    bool converged = false;
    /// Residual of the best iterate after each iteration (non-increasing).
    std::vector<double> residual_history;
    std::int64_t flops = 0;
};

/// Solves A p = rhs from p = 0. The right-hand side is made compatible by
/// removing per-component means. The iterate with the smallest residual
/// (among iterations >= 1) is returned, so truncation never worsens the
/// result. Throws NumericError if the iterates become non-finite.
PcgResult pcg_solve(const PoissonSystem& sys, const ScalarField& rhs, const PcgConfig& cfg,
                    const MicPreconditioner* precond = nullptr);

/// FLOPs charged for one system build + factorisation and per PCG iteration.
std::int64_t pcg_setup_flops(std::size_t unknowns);
std::int64_t pcg_iteration_flops(std::size_t unknowns, bool preconditioned);

/// Exact reference solver (MIC(0)-PCG to tolerance) or, with `fixed_iters`,
/// the truncated variant that always performs exactly that many iterations.
class PcgPressureSolver final : public PressureSolver {
  public:
    explicit PcgPressureSolver(PcgConfig cfg = {});
    static PcgPressureSolver truncated(int iterations);

    PressureSolveResult solve(const ScalarField& divergence, const GeometryField& geo,
                              const ProjectionParams& params) override;
    std::string id() const override;

    const PcgResult& last_result() const { return last_; }

  private:
    PcgConfig cfg_;
    bool truncated_ = false;
    // Cache keyed on occupancy; geometry is constant within a run.
    Occupancy cached_occ_;
    PoissonSystem sys_;
    MicPreconditioner mic_;
    bool have_cache_ = false;
    PcgResult last_;
};

}  // namespace qaf
