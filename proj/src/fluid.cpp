#include "qaf/fluid.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ostream>
#include <stdexcept>

namespace qaf {

void SimConfig::validate() const {
    if (n_steps < 1) throw std::invalid_argument("sim config: n_steps must be >= 1");
    if (!(dt > 0.0)) throw std::invalid_argument("sim config: dt must be > 0");
    if (!(rho > 0.0)) throw std::invalid_argument("sim config: rho must be > 0");
    if (!(kappa >= 1.0)) throw std::invalid_argument("sim config: kappa must be >= 1");
}

SimState make_state(const GeometryField& geo) {
    SimState s;
    s.vel = MacVelocityField(geo.dims());
    s.pressure = ScalarField(geo.dims(), 0.0);
    s.density = ScalarField(geo.dims(), 0.0);
    s.geo = geo;
    return s;
}

ScalarField advect(const ScalarField& field, const MacVelocityField& vel, double dt, const GeometryField& geo) {
    require_same_dims(field.dims(), geo.dims(), "advect");
    require_same_dims(vel.dims(), geo.dims(), "advect");
    if (!(dt > 0.0)) throw std::invalid_argument("advect: dt must be > 0");
    const GridDims& d = geo.dims();
    ScalarField out = field;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) {
            if (geo.is_solid(i, j)) continue;
            const double x = (i + 0.5) * d.h, y = (j + 0.5) * d.h;
            const double ux = 0.5 * (vel.u(i, j) + vel.u(i + 1, j));
            const double vy = 0.5 * (vel.v(i, j) + vel.v(i, j + 1));
            out(i, j) = sample_bilinear(field, x - dt * ux, y - dt * vy);
        }
    return out;
}

MacVelocityField advect(const MacVelocityField& field, const MacVelocityField& vel, double dt,
                        const GeometryField& geo) {
    require_same_dims(field.dims(), geo.dims(), "advect");
    require_same_dims(vel.dims(), geo.dims(), "advect");
    if (!(dt > 0.0)) throw std::invalid_argument("advect: dt must be > 0");
    const GridDims& d = geo.dims();
    MacVelocityField out(d);
    for (int j = 0; j < d.ny; ++j)
        for (int i = 1; i < d.nx; ++i) {
            if (geo.is_solid(i - 1, j) || geo.is_solid(i, j)) continue;
            const double x = i * d.h, y = (j + 0.5) * d.h;
            const double vx = vel.u(i, j), vy = sample_v(vel, x, y);
            out.u(i, j) = sample_u(field, x - dt * vx, y - dt * vy);
        }
    for (int j = 1; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i) {
            if (geo.is_solid(i, j - 1) || geo.is_solid(i, j)) continue;
            const double x = (i + 0.5) * d.h, y = j * d.h;
            const double vx = sample_u(vel, x, y), vy = vel.v(i, j);
            out.v(i, j) = sample_v(field, x - dt * vx, y - dt * vy);
        }
    return out;
}

MacVelocityField add_body_force(const MacVelocityField& vel, const ScalarField& density, const GeometryField& geo,
                                const SimConfig& cfg) {
    require_same_dims(vel.dims(), geo.dims(), "add_body_force");
    require_same_dims(density.dims(), geo.dims(), "add_body_force");
    const GridDims& d = geo.dims();
    MacVelocityField out = vel;
    const double gx = cfg.dt * cfg.gravity[0];
    const double gy = cfg.dt * cfg.gravity[1];
    if (gx != 0.0)
        for (int j = 0; j < d.ny; ++j)
            for (int i = 1; i < d.nx; ++i)
                if (geo.is_fluid(i - 1, j) && geo.is_fluid(i, j)) out.u(i, j) += gx;
    for (int j = 1; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (geo.is_fluid(i, j - 1) && geo.is_fluid(i, j)) {
                const double rho_face = 0.5 * (density(i, j - 1) + density(i, j));
                out.v(i, j) += gy + cfg.dt * cfg.buoyancy * rho_face;
            }
    return out;
}

ProjectionResult project(const MacVelocityField& vel, const GeometryField& geo, PressureSolver& solver, double dt,
                         double rho) {
    MacVelocityField bounded = vel;
    enforce_solid_faces(bounded, geo);
    const ScalarField div = divergence(bounded, geo);
    PressureSolveResult solved = solver.solve(div, geo, ProjectionParams{dt, rho});
    ProjectionResult out;
    out.vel = subtract_pressure_gradient(bounded, solved.pressure, geo, dt, rho);
    out.pressure = std::move(solved.pressure);
    out.cost = solved.cost;
    return out;
}

double quality_loss(const ScalarField& rho_star, const ScalarField& rho) {
    require_same_dims(rho_star.dims(), rho.dims(), "quality_loss");
    const auto a = rho_star.values();
    const auto b = rho.values();
    double sum = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) sum += std::abs(a[k] - b[k]);
    return sum / static_cast<double>(a.size());
}

double div_norm(const ScalarField& div, const GeometryField& geo, double kappa) {
    require_same_dims(div.dims(), geo.dims(), "div_norm");
    if (!(kappa >= 1.0)) throw std::invalid_argument("div_norm: kappa must be >= 1");
    const GridDims& d = geo.dims();
    double sum = 0.0;
    for (int j = 0; j < d.ny; ++j)
        for (int i = 0; i < d.nx; ++i)
            if (geo.is_fluid(i, j)) {
                const double w = std::max(1.0, kappa - geo.distance()(i, j));
                sum += w * div(i, j) * div(i, j);
            }
    return sum;
}

double div_norm(const MacVelocityField& vel, const GeometryField& geo, double kappa) {
    return div_norm(divergence(vel, geo), geo, kappa);
}

std::int64_t step_overhead_flops(const GridDims& dims) {
    // Three bilinear advections (~30 each), forces, divergence, gradient.
    return static_cast<std::int64_t>(120 * dims.cells());
}

namespace {

void inject(ScalarField& density, const Inflow& src, const GeometryField& geo, double dt) {
    const GridDims& d = geo.dims();
    for (int j = std::max(src.j0, 0); j < std::min(src.j1, d.ny); ++j)
        for (int i = std::max(src.i0, 0); i < std::min(src.i1, d.nx); ++i)
            if (geo.is_fluid(i, j)) density(i, j) = std::min(1.0, density(i, j) + src.rate * dt);
}

}  // namespace

UnprojectedStep advance_to_projection(const SimState& state, const SimConfig& cfg) {
    const GeometryField& geo = state.geo;
    UnprojectedStep out;
    out.density = advect(state.density, state.vel, cfg.dt, geo);
    if (state.inflow) inject(out.density, *state.inflow, geo, cfg.dt);
    out.vel = advect(state.vel, state.vel, cfg.dt, geo);
    out.vel = add_body_force(out.vel, out.density, geo, cfg);
    return out;
}

StepResult step(const SimState& state, PressureSolver& solver, const SimConfig& cfg) {
    cfg.validate();
    if (state.step >= cfg.n_steps) throw std::invalid_argument("step: state already at final step");
    const auto t0 = std::chrono::steady_clock::now();
    const GeometryField& geo = state.geo;

    StepResult out;
    out.state.step = state.step + 1;
    out.state.geo = geo;
    out.state.inflow = state.inflow;
    UnprojectedStep pre = advance_to_projection(state, cfg);
    out.state.density = std::move(pre.density);
    ProjectionResult proj = project(pre.vel, geo, solver, cfg.dt, cfg.rho);
    out.state.vel = std::move(proj.vel);
    out.state.pressure = std::move(proj.pressure);
    out.div_norm = div_norm(out.state.vel, geo, cfg.kappa);

    out.cost.flops = proj.cost.flops + step_overhead_flops(geo.dims());
    out.cost.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

Trajectory simulate(const SimState& initial, const SimConfig& cfg, const Schedule& schedule,
                    const SimulateOptions& opts) {
    Trajectory traj;
    if (opts.keep_states) traj.snapshots.push_back(initial);
    if (opts.keep_densities) traj.densities.push_back(initial.density);
    traj.final_state = initial;
    if (cfg.n_steps == 0) return traj;
    cfg.validate();

    double cum = 0.0;
    while (traj.final_state.step < cfg.n_steps) {
        PressureSolver& solver = schedule(traj.final_state.step);
        StepResult r = step(traj.final_state, solver, cfg);
        cum += r.div_norm;
        traj.div_norm.push_back(r.div_norm);
        traj.cum_div_norm.push_back(cum);
        traj.step_costs.push_back(r.cost);
        traj.total += r.cost;
        traj.final_state = std::move(r.state);
        if (opts.keep_states) traj.snapshots.push_back(traj.final_state);
        if (opts.keep_densities) traj.densities.push_back(traj.final_state.density);
    }
    return traj;
}

void write_trajectory_csv(std::ostream& os, const Trajectory& traj) {
    os << "step,DivNorm,CumDivNorm,wall_time,flops\n";
    const auto prec = os.precision(17);
    for (std::size_t k = 0; k < traj.div_norm.size(); ++k)
        os << (k + 1) << ',' << traj.div_norm[k] << ',' << traj.cum_div_norm[k] << ','
           << traj.step_costs[k].wall_time << ',' << traj.step_costs[k].flops << '\n';
    os.precision(prec);
}

void write_density_pgm(std::ostream& os, const ScalarField& density) {
    const GridDims& d = density.dims();
    os << "P2\n" << d.nx << ' ' << d.ny << "\n255\n";
    for (int j = d.ny - 1; j >= 0; --j) {
        for (int i = 0; i < d.nx; ++i) {
            const double v = std::clamp(density(i, j), 0.0, 1.0);
            os << static_cast<int>(std::lround(v * 255.0)) << (i + 1 < d.nx ? ' ' : '\n');
        }
    }
}

}  // namespace qaf
