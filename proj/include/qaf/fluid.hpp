#pragma once

// Operator-split Euler time stepping for a 2D smoke plume on a MAC grid,
// plus the two quality metrics used throughout: the final-density error
// (quality loss) and the weighted divergence norm.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "qaf/grid.hpp"
#include "qaf/solver.hpp"

namespace qaf {

struct SimConfig {
    int n_steps = 128;
    double dt = 0.1;
    double rho = 1.0;
    std::array<double, 2> gravity = {0.0, 0.0};
    double buoyancy = 1.0;
    double kappa = 3.0;  ///< w_i = max(1, kappa - d_i)

    void validate() const;
};

/// Smoke inflow: density in the rectangle [i0, i1) x [j0, j1) is raised by
/// rate*dt per step, saturating at 1.
struct Inflow {
    int i0 = 0, j0 = 0, i1 = 0, j1 = 0;
    double rate = 0.0;

    bool operator==(const Inflow&) const = default;
};

struct SimState {
    int step = 0;
    MacVelocityField vel;
    ScalarField pressure;
    ScalarField density;
    GeometryField geo;
    std::optional<Inflow> inflow;

    bool operator==(const SimState&) const = default;
};

/// Creates a resting state (zero velocity, pressure and density).
SimState make_state(const GeometryField& geo);

/// Semi-Lagrangian advection, single backward-Euler trace, bilinear lookup.
/// Solid cells keep their values.
ScalarField advect(const ScalarField& field, const MacVelocityField& vel, double dt, const GeometryField& geo);
/// Self-advection of a face velocity field; faces touching Solid become 0.
MacVelocityField advect(const MacVelocityField& field, const MacVelocityField& vel, double dt,
                        const GeometryField& geo);

/// u += dt * (gravity + buoyancy * density * e_y) on faces between Fluid cells.
MacVelocityField add_body_force(const MacVelocityField& vel, const ScalarField& density, const GeometryField& geo,
                                const SimConfig& cfg);

struct ProjectionResult {
    MacVelocityField vel;
    ScalarField pressure;
    StepCost cost;
};

/// Divergence -> solver -> gradient subtraction.
ProjectionResult project(const MacVelocityField& vel, const GeometryField& geo, PressureSolver& solver, double dt,
                         double rho);

/// Mean absolute per-cell difference between two density fields.
double quality_loss(const ScalarField& rho_star, const ScalarField& rho);

/// Sum over Fluid cells of max(1, kappa - d_i) * div_i^2.
double div_norm(const MacVelocityField& vel, const GeometryField& geo, double kappa);
/// Same with a precomputed divergence.
double div_norm(const ScalarField& div, const GeometryField& geo, double kappa);

/// FLOPs charged per step for everything except the pressure solve.
std::int64_t step_overhead_flops(const GridDims& dims);

struct StepResult {
    SimState state;
    StepCost cost;
    double div_norm = 0.0;  ///< of the projected velocity
};

struct UnprojectedStep {
    ScalarField density;   ///< advected, with inflow
    MacVelocityField vel;  ///< advected, with body force, before projection
};

/// Everything in a step up to the pressure projection.
UnprojectedStep advance_to_projection(const SimState& state, const SimConfig& cfg);

/// Advect density and velocity, inject inflow, add body force, project.
StepResult step(const SimState& state, PressureSolver& solver, const SimConfig& cfg);

/// Per-step solver choice; called once for every step index in [0, n_steps).
using Schedule = std::function<PressureSolver&(int step)>;

struct SimulateOptions {
    bool keep_states = true;     ///< store every SimState (memory heavy)
    bool keep_densities = true;  ///< store every density frame
};

struct Trajectory {
    std::vector<SimState> snapshots;     ///< n_steps + 1 entries when keep_states
    std::vector<ScalarField> densities;  ///< n_steps + 1 entries when keep_densities
    SimState final_state;
    std::vector<double> div_norm;      ///< per step, 1..n_steps
    std::vector<double> cum_div_norm;  ///< prefix sums of div_norm
    std::vector<StepCost> step_costs;
    StepCost total;
};

Trajectory simulate(const SimState& initial, const SimConfig& cfg, const Schedule& schedule,
                    const SimulateOptions& opts = {});

/// step, DivNorm, CumDivNorm, wall_time, flops
void write_trajectory_csv(std::ostream& os, const Trajectory& traj);
/// Plain PGM ("P2"), 8-bit, density clamped to [0,1], top row = highest j.
void write_density_pgm(std::ostream& os, const ScalarField& density);

}  // namespace qaf
