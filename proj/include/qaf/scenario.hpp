#pragma once

// Procedural smoke-plume problems: border wall, up to a few circles and
// rectangles, a bottom inflow, and a divergence-free random initial
// velocity built from a stream function.

#include <cstdint>
#include <vector>

#include "qaf/fluid.hpp"
#include "qaf/forge.hpp"

namespace qaf {

struct Obstacle {
    enum class Shape { Circle, Rect };
    Shape shape = Shape::Circle;
    double cx = 0.0, cy = 0.0;  ///< centre, in cells
    double sx = 0.0, sy = 0.0;  ///< radius (circle: sx) or half extents

    bool operator==(const Obstacle&) const = default;
};

/// One sinusoidal stream-function mode.
struct TurbulenceMode {
    int kx = 1, ky = 1;
    double amp = 0.0;
    double phase_x = 0.0, phase_y = 0.0;

    bool operator==(const TurbulenceMode&) const = default;
};

struct ScenarioSpec {
    GridDims dims{64, 64, 1.0};
    int max_obstacles = 3;
    int modes = 6;
    int max_wavenumber = 4;
    double amplitude = 1.0;  ///< max |face velocity| of the initial field
    double inflow_rate = 0.5;

    void validate() const;
};

struct Scenario {
    int id = 0;
    std::uint64_t seed = 0;
    GridDims dims;
    std::vector<Obstacle> obstacles;
    Inflow inflow;
    std::vector<TurbulenceMode> modes;
    double amplitude = 0.0;

    bool operator==(const Scenario&) const = default;
};

/// Pure function of (spec, seed).
Scenario generate_scenario(const ScenarioSpec& spec, std::uint64_t seed, int id = 0);

/// Geometry, density 1 in the inflow box, stream-function velocity (zero
/// on every face touching Solid). Throws std::invalid_argument when an
/// obstacle leaves the domain or covers the inflow.
SimState build_initial_state(const Scenario& sc);

/// `count` problems with ids first_id.. and seeds seed_base + id.
std::vector<Problem> make_problems(const ScenarioSpec& spec, std::uint64_t seed_base, int count, int first_id = 0);

}  // namespace qaf
