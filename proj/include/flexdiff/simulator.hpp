#pragma once

#include "flexdiff/dataio.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace flexdiff {

// Grids are n x n row-major double arrays on [0, 2pi)^2; x varies along rows.
using Grid = std::vector<double>;

struct SimConfig {
    int n = 64;
    double viscosity = 1e-3;  // 0 selects the inviscid equations
    double dt = 0.01;
    int steps = 300;          // number of saved snapshots after the initial one
    int save_every = 10;      // solver steps between saved snapshots
    int spinup_steps = 0;     // solver steps discarded before the first snapshot
    uint64_t seed = 1;
    double k0 = 4.0;          // peak wavenumber of the initial spectrum
    double slope = 4.0;       // low-k slope s of |w_k| ~ k^s exp(-s (k/k0)^2 / 2)
    double omega_rms = 1.0;   // initial vorticity rms

    void validate() const;
};

struct SimState {
    int n = 0;
    Grid omega;
    Grid psi;
    int64_t step = 0;
    double energy = 0.0;     // 0.5 <psi omega> = 0.5 <|u|^2>
    double enstrophy = 0.0;  // 0.5 <omega^2>

    void update_diagnostics();
};

// J(psi, w) = psi_x w_y - psi_y w_x with the 9-point Arakawa average.
Grid arakawa_jacobian(const Grid& psi, const Grid& omega, int n, double h);

// Spectral solve of lap(psi) = -omega with mean(psi) = 0.
Grid poisson_solve(const Grid& omega, int n);

// Second-order 5-point Laplacian.
Grid laplacian_fd(const Grid& f, int n, double h);

// Exact spectral Laplacian.
Grid laplacian_spectral(const Grid& f, int n);

// u = psi_y, v = -psi_x (spectral derivatives).
std::pair<Grid, Grid> velocity_from_psi(const Grid& psi, int n);

double grid_mean(const Grid& f);

SimState make_state(Grid omega, int n);
SimState init_state(const SimConfig& config);

// One SSP-RK3 step of dw/dt = J(psi, w) + nu lap(w).
SimState step(const SimState& state, const SimConfig& config);

// Initial u_rms * 2pi / nu, 0 for inviscid runs.
double reynolds_tag(const SimState& state, double viscosity);

// Runs the configured trajectory; snapshots are stored as float32 vorticity.
// The observer, when set, sees every saved state.
Dataset simulate(const SimConfig& config,
                 const std::function<void(const SimState&)>& observer = {});

void run(const SimConfig& config, const std::string& path);

Tensor to_tensor(const Grid& g, int n);
Grid to_grid(const Tensor& t);

} // namespace flexdiff
