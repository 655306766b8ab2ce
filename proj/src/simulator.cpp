#include "flexdiff/simulator.hpp"

#include "fft.hpp"
#include "flexdiff/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace flexdiff {

void SimConfig::validate() const {
    require(n >= 8 && is_power_of_two(n), ErrorKind::Config, "grid size n must be a power of two >= 8");
    require(viscosity >= 0.0, ErrorKind::Config, "viscosity must be >= 0");
    require(dt > 0.0, ErrorKind::Config, "dt must be > 0");
    require(steps >= 0 && save_every >= 1 && spinup_steps >= 0, ErrorKind::Config,
            "steps, save_every and spinup_steps must be non-negative (save_every >= 1)");
    require(k0 >= 1.0 && k0 < n / 2.0, ErrorKind::Config, "k0 must lie in [1, n/2)");
    require(slope > 0.0, ErrorKind::Config, "spectrum slope must be > 0");
    require(omega_rms > 0.0, ErrorKind::Config, "omega_rms must be > 0");
}

namespace {

double grid_spacing(int n) { return 2.0 * std::numbers::pi / n; }

inline size_t at(int y, int x, int n) {
    return static_cast<size_t>(((y + n) % n) * n + ((x + n) % n));
}

} // namespace

double grid_mean(const Grid& f) {
    double s = 0.0;
    for (double v : f) s += v;
    return s / static_cast<double>(f.size());
}

Grid arakawa_jacobian(const Grid& psi, const Grid& w, int n, double h) {
    const size_t nn = static_cast<size_t>(n) * n;
    require(psi.size() == nn && w.size() == nn, ErrorKind::Shape,
            "arakawa_jacobian: grids must both be n x n");
    Grid out(nn);
    const double c = 1.0 / (12.0 * h * h);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            auto p = [&](int dx, int dy) { return psi[at(y + dy, x + dx, n)]; };
            auto q = [&](int dx, int dy) { return w[at(y + dy, x + dx, n)]; };
            const double j1 = (p(1, 0) - p(-1, 0)) * (q(0, 1) - q(0, -1)) -
                              (p(0, 1) - p(0, -1)) * (q(1, 0) - q(-1, 0));
            const double j2 = p(1, 0) * (q(1, 1) - q(1, -1)) - p(-1, 0) * (q(-1, 1) - q(-1, -1)) -
                              p(0, 1) * (q(1, 1) - q(-1, 1)) + p(0, -1) * (q(1, -1) - q(-1, -1));
            const double j3 = q(0, 1) * (p(1, 1) - p(-1, 1)) - q(0, -1) * (p(1, -1) - p(-1, -1)) -
                              q(1, 0) * (p(1, 1) - p(1, -1)) + q(-1, 0) * (p(-1, 1) - p(-1, -1));
            out[at(y, x, n)] = (j1 + j2 + j3) * c;
        }
    }
    return out;
}

Grid poisson_solve(const Grid& omega, int n) {
    require(omega.size() == static_cast<size_t>(n) * n, ErrorKind::Shape,
            "poisson_solve: grid must be n x n");
    double scale = 0.0;
    for (double v : omega) scale = std::max(scale, std::abs(v));
    const double mean = grid_mean(omega);
    require(std::abs(mean) <= 1e-8 * std::max(1.0, scale), ErrorKind::Consistency,
            "poisson_solve needs zero-mean vorticity, mean = " + std::to_string(mean));
    detail::Spectrum2D s = detail::rfft2(omega, n, n);
    for (int ky = 0; ky < n; ++ky) {
        const double ly = detail::wavenumber(ky, n);
        for (int kx = 0; kx < s.cols(); ++kx) {
            const double k2 = ly * ly + static_cast<double>(kx) * kx;
            s.at(ky, kx) = k2 == 0.0 ? 0.0 : s.at(ky, kx) / k2;
        }
    }
    return detail::irfft2(s);
}

Grid laplacian_fd(const Grid& f, int n, double h) {
    Grid out(f.size());
    const double c = 1.0 / (h * h);
    for (int y = 0; y < n; ++y) {
        for (int x = 0; x < n; ++x) {
            out[at(y, x, n)] = (f[at(y, x + 1, n)] + f[at(y, x - 1, n)] + f[at(y + 1, x, n)] +
                                f[at(y - 1, x, n)] - 4.0 * f[at(y, x, n)]) * c;
        }
    }
    return out;
}

Grid laplacian_spectral(const Grid& f, int n) {
    detail::Spectrum2D s = detail::rfft2(f, n, n);
    for (int ky = 0; ky < n; ++ky) {
        const double ly = detail::wavenumber(ky, n);
        for (int kx = 0; kx < s.cols(); ++kx) s.at(ky, kx) *= -(ly * ly + double(kx) * kx);
    }
    return detail::irfft2(s);
}

std::pair<Grid, Grid> velocity_from_psi(const Grid& psi, int n) {
    const detail::Spectrum2D s = detail::rfft2(psi, n, n);
    detail::Spectrum2D du = s, dv = s;
    const std::complex<double> i(0.0, 1.0);
    for (int ky = 0; ky < n; ++ky) {
        // The Nyquist row/column has no well-defined sign; drop it for derivatives.
        const double ly = (ky == n / 2) ? 0.0 : detail::wavenumber(ky, n);
        for (int kx = 0; kx < s.cols(); ++kx) {
            const double lx = (kx == n / 2) ? 0.0 : kx;
            du.at(ky, kx) = i * ly * s.at(ky, kx);
            dv.at(ky, kx) = -i * lx * s.at(ky, kx);
        }
    }
    return {detail::irfft2(du), detail::irfft2(dv)};
}

void SimState::update_diagnostics() {
    double e = 0.0, z = 0.0;
    for (size_t i = 0; i < omega.size(); ++i) {
        e += psi[i] * omega[i];
        z += omega[i] * omega[i];
    }
    energy = 0.5 * e / static_cast<double>(omega.size());
    enstrophy = 0.5 * z / static_cast<double>(omega.size());
}

SimState make_state(Grid omega, int n) {
    SimState s;
    s.n = n;
    s.omega = std::move(omega);
    s.psi = poisson_solve(s.omega, n);
    s.update_diagnostics();
    return s;
}

SimState init_state(const SimConfig& config) {
    config.validate();
    const int n = config.n;
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    detail::Spectrum2D s;
    s.ny = n;
    s.nx = n;
    s.c.assign(static_cast<size_t>(n) * s.cols(), 0.0);
    for (int ky = 0; ky < n; ++ky) {
        const double ly = detail::wavenumber(ky, n);
        for (int kx = 0; kx < s.cols(); ++kx) {
            const double k = std::sqrt(ly * ly + double(kx) * kx);
            const double ph = phase(rng);
            if (k == 0.0 || kx == n / 2 || ky == n / 2) continue;
            const double q = k / config.k0;
            const double amp = std::pow(q, config.slope) * std::exp(-0.5 * config.slope * q * q);
            s.at(ky, kx) = std::polar(amp, ph);
        }
    }
    for (int ky = n / 2 + 1; ky < n; ++ky) s.at(ky, 0) = std::conj(s.at(n - ky, 0));
    Grid omega = detail::irfft2(s);
    const double mean = grid_mean(omega);
    double ss = 0.0;
    for (double& v : omega) {
        v -= mean;
        ss += v * v;
    }
    const double rms = std::sqrt(ss / static_cast<double>(omega.size()));
    for (double& v : omega) v *= config.omega_rms / rms;
    const double residual_mean = grid_mean(omega);
    for (double& v : omega) v -= residual_mean;

    SimState state = make_state(std::move(omega), n);
    auto [u, v] = velocity_from_psi(state.psi, n);
    double umax = 0.0;
    for (size_t i = 0; i < u.size(); ++i) umax = std::max(umax, std::hypot(u[i], v[i]));
    const double cfl = config.dt * umax / grid_spacing(n);
    require(cfl < 1.0, ErrorKind::Config,
            "CFL number " + std::to_string(cfl) + " >= 1 at initialization; reduce dt");
    return state;
}

namespace {

Grid rhs(const Grid& omega, const Grid& psi, int n, double nu) {
    const double h = grid_spacing(n);
    Grid out = arakawa_jacobian(psi, omega, n, h);
    if (nu > 0.0) {
        const Grid lap = laplacian_fd(omega, n, h);
        for (size_t i = 0; i < out.size(); ++i) out[i] += nu * lap[i];
    }
    return out;
}

} // namespace

SimState step(const SimState& state, const SimConfig& config) {
    const int n = state.n;
    const double dt = config.dt, nu = config.viscosity;
    const Grid& w0 = state.omega;
    const size_t nn = w0.size();

    const Grid k1 = rhs(w0, state.psi, n, nu);
    Grid w1(nn);
    for (size_t i = 0; i < nn; ++i) w1[i] = w0[i] + dt * k1[i];

    const Grid k2 = rhs(w1, poisson_solve(w1, n), n, nu);
    Grid w2(nn);
    for (size_t i = 0; i < nn; ++i) w2[i] = 0.75 * w0[i] + 0.25 * (w1[i] + dt * k2[i]);

    const Grid k3 = rhs(w2, poisson_solve(w2, n), n, nu);
    Grid w3(nn);
    for (size_t i = 0; i < nn; ++i) {
        w3[i] = w0[i] / 3.0 + 2.0 / 3.0 * (w2[i] + dt * k3[i]);
        if (!std::isfinite(w3[i])) {
            fail(ErrorKind::Divergence, "simulation became non-finite at step " +
                                            std::to_string(state.step + 1));
        }
    }
    SimState next = make_state(std::move(w3), n);
    next.step = state.step + 1;
    return next;
}

double reynolds_tag(const SimState& state, double viscosity) {
    if (viscosity <= 0.0) return 0.0;
    auto [u, v] = velocity_from_psi(state.psi, state.n);
    double ss = 0.0;
    for (size_t i = 0; i < u.size(); ++i) ss += u[i] * u[i] + v[i] * v[i];
    const double u_rms = std::sqrt(ss / static_cast<double>(u.size()));
    return u_rms * 2.0 * std::numbers::pi / viscosity;
}

Tensor to_tensor(const Grid& g, int n) {
    Tensor t({n, n});
    for (size_t i = 0; i < g.size(); ++i) t[static_cast<int64_t>(i)] = static_cast<float>(g[i]);
    return t;
}

Grid to_grid(const Tensor& t) { return Grid(t.values().begin(), t.values().end()); }

Dataset simulate(const SimConfig& config, const std::function<void(const SimState&)>& observer) {
    SimState state = init_state(config);
    Dataset ds;
    ds.header.nx = static_cast<uint32_t>(config.n);
    ds.header.ny = static_cast<uint32_t>(config.n);
    ds.header.dt = config.dt * config.save_every;
    ds.header.viscosity = config.viscosity;
    ds.header.re_tag = reynolds_tag(state, config.viscosity);
    ds.header.quantity = Quantity::Vorticity;
    for (int i = 0; i < config.spinup_steps; ++i) state = step(state, config);
    auto save = [&] {
        ds.snapshots.push_back(to_tensor(state.omega, config.n));
        if (observer) observer(state);
    };
    save();
    for (int s = 0; s < config.steps; ++s) {
        for (int k = 0; k < config.save_every; ++k) state = step(state, config);
        save();
    }
    return ds;
}

void run(const SimConfig& config, const std::string& path) {
    write_dataset(path, simulate(config));
}

} // namespace flexdiff
