#pragma once

#include <cstdint>
#include <string>

#include "qaf/grid.hpp"

namespace qaf {

/// Nominal throughput used to turn FLOP counts into modelled seconds.
inline constexpr double kNominalFlopRate = 1.0e9;

struct StepCost {
    double wall_time = 0.0;   ///< measured seconds
    std::int64_t flops = 0;   ///< estimated floating-point operations

    double modeled_time() const { return static_cast<double>(flops) / kNominalFlopRate; }
    StepCost& operator+=(const StepCost& o) {
        wall_time += o.wall_time;
        flops += o.flops;
        return *this;
    }
};

struct ProjectionParams {
    double dt = 0.1;
    double rho = 1.0;
};

struct PressureSolveResult {
    ScalarField pressure;  ///< Solid cells hold exactly 0
    StepCost cost;
};

/// p = f(div u*, geometry). Implemented by the exact PCG solver, truncated
/// PCG, and the network surrogates. Instances may cache per-geometry data and
/// are therefore not shared between concurrent runs.
class PressureSolver {
  public:
    virtual ~PressureSolver() = default;
    virtual PressureSolveResult solve(const ScalarField& divergence, const GeometryField& geo,
                                      const ProjectionParams& params) = 0;
    virtual std::string id() const = 0;
};

}  // namespace qaf
