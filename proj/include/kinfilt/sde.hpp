#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "kinfilt/grid.hpp"
#include "kinfilt/model.hpp"
#include "kinfilt/rng.hpp"

namespace kinfilt::sde {

/// Euler-Maruyama paths of the canonical system plus likelihood bookkeeping.
/// Trajectories have length n_steps+1, increments length n_steps.
struct PathBundle {
    TimeGrid grid;
    int n_brownian = 2;
    std::vector<double> dW;      // [step * n_brownian + channel]
    std::vector<double> X, V, Y;
    std::vector<double> rho;     // likelihood (ae11 / eq3), > 0 by log-space update
    std::vector<double> tildeW;  // accumulated theta^{-1} dY
    std::uint64_t seed = 0;
    std::string scheme = "euler";

    double dtildeW(int k) const { return tildeW[k + 1] - tildeW[k]; }
};

struct Init3 {
    double x = 0.0, v = 0.0, y = 0.0;
};

struct Init4 {
    double x = 0.0, v = 0.0, y = 0.0, eta = 1.0;
};

/// Simulate (X, V, Y) under P together with rho and tildeW:
///   dX = V dt, dV = b dt + sigma^1 dW^1 + sigma_hat^i dW^i, dY = h dt + theta dW^1,
///   d log rho = h~ dW~ - h~^2/2 dt,  dW~ = theta^{-1} dY.
inline PathBundle simulate_system(const model::CoefficientSet& c, const Init3& init,
                                  const TimeGrid& grid, std::uint64_t seed,
                                  std::uint64_t stream = 0) {
    {
        const auto rep = model::check_coercivity(c, model::SampleGrid::default_grid());
        if (!rep.pass)
            throw std::invalid_argument("simulate_system: preset fails coercivity (A1bis)");
    }
    const int n = grid.n_steps;
    const int nb = c.n_brownian;
    const double dt = grid.dt();
    PathBundle p;
    p.grid = grid;
    p.n_brownian = nb;
    p.seed = seed;
    p.dW.resize(static_cast<std::size_t>(n) * nb);
    p.X.resize(n + 1);
    p.V.resize(n + 1);
    p.Y.resize(n + 1);
    p.rho.resize(n + 1);
    p.tildeW.resize(n + 1);
    p.X[0] = init.x;
    p.V[0] = init.v;
    p.Y[0] = init.y;
    p.rho[0] = 1.0;
    p.tildeW[0] = 0.0;

    const double sqdt = std::sqrt(dt);
    double logrho = 0.0;
    double shat[8];
    for (int k = 0; k < n; ++k) {
        const double t = grid.time(k);
        const double x = p.X[k], v = p.V[k], y = p.Y[k];
        for (int ch = 0; ch < nb; ++ch)
            p.dW[static_cast<std::size_t>(k) * nb + ch] =
                sqdt * rng::normal(seed, rng::StreamLayout::primary, stream, k, ch);
        const double dW1 = p.dW[static_cast<std::size_t>(k) * nb];
        const double th = c.theta(t, y);
        const double hv = c.h(t, x, v, y);
        const double htil = hv / th;
        std::span<double> sh(shat, static_cast<std::size_t>(nb - 1));
        c.sigma_hat(t, x, v, y, sh);
        double dv = c.b(t, x, v, y) * dt + c.sigma1(t, x, v, y) * dW1;
        for (int i = 0; i < nb - 1; ++i) dv += sh[i] * p.dW[static_cast<std::size_t>(k) * nb + 1 + i];
        const double dY = hv * dt + th * dW1;
        const double dWt = dY / th;  // = dW1 + h~ dt
        p.X[k + 1] = x + v * dt;
        p.V[k + 1] = v + dv;
        p.Y[k + 1] = y + dY;
        p.tildeW[k + 1] = p.tildeW[k] + dWt;
        logrho += htil * dWt - 0.5 * htil * htil * dt;
        p.rho[k + 1] = std::exp(logrho);
    }
    return p;
}

/// Simulate the reference-measure system (ae3) along a supplied tildeW path:
/// Z is driven by the given increments on the sigma^1 channel and fresh
/// independent increments on the sigma_hat channels, with drift correction
/// b - h~ sigma^1; Y integrates dY = theta dW~ and rho is the stochastic
/// exponential (eq3) started from eta.
inline PathBundle simulate_under_Q(const model::CoefficientSet& c, const Init4& init,
                                   std::span<const double> tildeW_increments, const TimeGrid& grid,
                                   std::uint64_t seed, std::uint64_t stream = 0,
                                   rng::StreamLayout layout = rng::StreamLayout::primary) {
    const int n = grid.n_steps;
    if (static_cast<int>(tildeW_increments.size()) != n)
        throw std::invalid_argument("simulate_under_Q: tildeW/grid length mismatch");
    const int nb = c.n_brownian;
    const double dt = grid.dt();
    PathBundle p;
    p.grid = grid;
    p.n_brownian = nb;
    p.seed = seed;
    p.dW.resize(static_cast<std::size_t>(n) * nb);
    p.X.resize(n + 1);
    p.V.resize(n + 1);
    p.Y.resize(n + 1);
    p.rho.resize(n + 1);
    p.tildeW.resize(n + 1);
    p.X[0] = init.x;
    p.V[0] = init.v;
    p.Y[0] = init.y;
    p.rho[0] = init.eta;
    p.tildeW[0] = 0.0;

    const double sqdt = std::sqrt(dt);
    double logrho = std::log(init.eta);
    double shat[8];
    for (int k = 0; k < n; ++k) {
        const double t = grid.time(k);
        const double x = p.X[k], v = p.V[k], y = p.Y[k];
        const double dWt = tildeW_increments[k];
        p.dW[static_cast<std::size_t>(k) * nb] = dWt;
        for (int ch = 1; ch < nb; ++ch)
            p.dW[static_cast<std::size_t>(k) * nb + ch] =
                sqdt * rng::normal(seed, layout, stream, k, ch);
        const double th = c.theta(t, y);
        const double htil = c.h(t, x, v, y) / th;
        std::span<double> sh(shat, static_cast<std::size_t>(nb - 1));
        c.sigma_hat(t, x, v, y, sh);
        double dv = (c.b(t, x, v, y) - htil * c.sigma1(t, x, v, y)) * dt +
                    c.sigma1(t, x, v, y) * dWt;
        for (int i = 0; i < nb - 1; ++i) dv += sh[i] * p.dW[static_cast<std::size_t>(k) * nb + 1 + i];
        p.X[k + 1] = x + v * dt;
        p.V[k + 1] = v + dv;
        p.Y[k + 1] = y + th * dWt;
        p.tildeW[k + 1] = p.tildeW[k] + dWt;
        logrho += htil * dWt - 0.5 * htil * htil * dt;
        p.rho[k + 1] = std::exp(logrho);
    }
    return p;
}

}  // namespace kinfilt::sde
