#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinfilt/common.hpp"
#include "kinfilt/grid.hpp"
#include "kinfilt/kernels.hpp"
#include "kinfilt/model.hpp"
#include "kinfilt/sde.hpp"

namespace kinfilt::filter {

/// Density values on a rectangular (xi, nu) lattice at a time stamp.
struct GridDensity {
    double time = 0.0;
    Lattice2 lattice;
    std::vector<double> values;
    double total_mass = 0.0;
    double clipped_mass = 0.0;  // cumulative mass removed by positivity clips

    GridDensity() = default;
    explicit GridDensity(const Lattice2& l, double t = 0.0)
        : time(t), lattice(l), values(l.size(), 0.0) {}

    /// Trapezoid quadrature weight of node (i, j) relative to the cell area.
    double quad_weight(int i, int j) const {
        double w = 1.0;
        if (i == 0 || i == lattice.xi.n - 1) w *= 0.5;
        if (j == 0 || j == lattice.nu.n - 1) w *= 0.5;
        return w;
    }

    double integrate() const {
        double acc = 0.0;
        for (int i = 0; i < lattice.xi.n; ++i)
            for (int j = 0; j < lattice.nu.n; ++j)
                acc += quad_weight(i, j) * values[lattice.index(i, j)];
        return acc * lattice.cell_area();
    }

    void refresh_mass() { total_mass = integrate(); }
};

/// Conditional-expectation estimate with method tag and error bar.
struct FilterEstimate {
    double value = 0.0;
    std::string method;  // spde-forward | ks-backward | particle-oracle
    double stderr_ = 0.0;
    bool degenerate_weights = false;  // effective-sample-size warning
    std::string scenario;             // preset/seed/grid fingerprint
};

/// One semi-Lagrangian step of the forward filtering SPDE:
/// exact advection along gamma^B composed with the explicit update
///   A* u = 1/2 d_nn(|sigma|^2 u) - d_n(b u),   G* u = -d_n(sigma^1 u) + h~ u,
/// central second differences in nu, cubic interpolation for the xi shift.
inline GridDensity forward_spde_step(const GridDensity& u, const model::CoefficientSet& c,
                                     double y_s, double dW_tilde, double dt) {
    if (!(dt > 0.0)) throw std::domain_error("forward_spde_step: dt > 0 required");
    if (!std::isfinite(dW_tilde)) throw std::domain_error("forward_spde_step: dW not finite");
    const Lattice2& lat = u.lattice;
    const double dnu = lat.nu.h();
    const double s = u.time;

    // stability: |sigma|^2 dt / dnu^2 <= 0.5 (checked on the lattice sup)
    double sig2_max = 0.0;
    for (int i = 0; i < lat.xi.n; i += std::max(1, lat.xi.n / 8))
        for (int j = 0; j < lat.nu.n; j += std::max(1, lat.nu.n / 8))
            sig2_max = std::max(sig2_max, c.sigma_sq(s, lat.xi.coord(i), lat.nu.coord(j), y_s));
    if (sig2_max * dt / (dnu * dnu) > 0.5)
        throw StabilityError("forward_spde_step: |sigma|^2 dt/dnu^2 > 0.5");

    // stage 1: w = u + A* u dt + G* u dW on the current lattice
    std::vector<double> w(lat.size());
    std::vector<double> f_diff(lat.nu.n), f_bu(lat.nu.n), f_su(lat.nu.n);
    for (int i = 0; i < lat.xi.n; ++i) {
        const double xi = lat.xi.coord(i);
        for (int j = 0; j < lat.nu.n; ++j) {
            const double nu = lat.nu.coord(j);
            const double uv = u.values[lat.index(i, j)];
            f_diff[j] = c.sigma_sq(s, xi, nu, y_s) * uv;
            f_bu[j] = c.b(s, xi, nu, y_s) * uv;
            f_su[j] = c.sigma1(s, xi, nu, y_s) * uv;
        }
        for (int j = 0; j < lat.nu.n; ++j) {
            const double nu = lat.nu.coord(j);
            const double uv = u.values[lat.index(i, j)];
            const double dm = j > 0 ? f_diff[j - 1] : 0.0;  // zero-inflow ghosts
            const double dp = j < lat.nu.n - 1 ? f_diff[j + 1] : 0.0;
            const double lap = (dp - 2.0 * f_diff[j] + dm) / (dnu * dnu);
            const double bm = j > 0 ? f_bu[j - 1] : 0.0;
            const double bp = j < lat.nu.n - 1 ? f_bu[j + 1] : 0.0;
            const double dbu = (bp - bm) / (2.0 * dnu);
            const double sm = j > 0 ? f_su[j - 1] : 0.0;
            const double sp = j < lat.nu.n - 1 ? f_su[j + 1] : 0.0;
            const double dsu = (sp - sm) / (2.0 * dnu);
            const double htil = model::tilde_h(c, s, xi, nu, y_s);
            w[lat.index(i, j)] =
                uv + (0.5 * lap - dbu) * dt + (-dsu + htil * uv) * dW_tilde;
        }
    }

    // stage 2: advect, u+(xi, nu) = w(xi - dt nu, nu), cubic in xi per nu-row
    GridDensity out(lat, s + dt);
    out.clipped_mass = u.clipped_mass;
    const std::ptrdiff_t stride = lat.nu.n;
    for (int j = 0; j < lat.nu.n; ++j) {
        const double shift = dt * lat.nu.coord(j);
        for (int i = 0; i < lat.xi.n; ++i) {
            const double xsrc = lat.xi.coord(i) - shift;
            double v = 0.0;
            if (xsrc >= lat.xi.lo && xsrc <= lat.xi.hi)
                v = interp::cubic_axis(w.data() + j, lat.xi, stride, xsrc);
            out.values[lat.index(i, j)] = v;
        }
    }
    // positivity: clip scheme undershoots, log the removed mass
    double clipped = 0.0;
    for (double& v : out.values)
        if (v < 0.0) {
            clipped -= v;
            v = 0.0;
        }
    out.clipped_mass += clipped * lat.cell_area();
    out.refresh_mass();
    return out;
}

struct FundamentalOptions {
    int n_steps = 512;          // SPDE steps over [t, T]
    double width_cells = 2.0;   // target nu-width of the delta approximation, in cells
    double xi_cells = 1.2;      // minimum conditional xi-width, in cells
};

/// Warm-start time for the Dirac approximation: the anisotropic short-time
/// kernel must be resolvable in both directions on the lattice.
inline double dirac_warm_time(const model::CoefficientSet& c, const Lattice2& lat, double t,
                              const Point2& z, double y0, const FundamentalOptions& opt) {
    const double sig2 = c.sigma_sq(t, z.xi, z.nu, y0);
    const double wn = opt.width_cells * lat.nu.h();
    const double wx = opt.xi_cells * lat.xi.h();
    const double t_nu = wn * wn / sig2;                                  // sigma^2 t = wn^2
    const double t_xi = std::cbrt(12.0 * wx * wx / sig2);                // sigma^2 t^3/12 = wx^2
    return std::max(t_nu, t_xi);
}

/// Fundamental-solution run: initializes u with the short-time anisotropic
/// Gaussian centered at z (the Dirac family of Definition d1-ii) and iterates
/// the forward SPDE along the realized observation-driven increments.
inline GridDensity forward_fundamental(const model::CoefficientSet& c, double t, const Point2& z,
                                       double T, const Lattice2& lat, const sde::PathBundle& obs,
                                       FundamentalOptions opt = {}) {
    if (!(t < T)) throw std::domain_error("forward_fundamental: t < T required");
    const double y0 = obs.Y.front();
    const double tw = dirac_warm_time(c, lat, t, z, y0, opt);
    if (t + tw >= T)
        throw std::invalid_argument("forward_fundamental: lattice too coarse (warm time >= T - t)");
    const double sig_eff = std::sqrt(c.sigma_sq(t, z.xi, z.nu, y0));
    const auto g0 = kernels::exact_langevin_gaussian(sig_eff, tw, z);
    GridDensity u(lat, t + tw);
    for (int i = 0; i < lat.xi.n; ++i)
        for (int j = 0; j < lat.nu.n; ++j)
            u.values[lat.index(i, j)] = g0.density(lat.point(i, j));
    u.refresh_mass();

    const TimeGrid run(t + tw, T, opt.n_steps);
    const double dt = run.dt();
    for (int k = 0; k < run.n_steps; ++k) {
        const double s = run.time(k);
        // realized Y and tildeW increments from the stored bundle
        const double pos = (s - obs.grid.t0) / obs.grid.dt();
        const int k0 = std::min(static_cast<int>(pos), obs.grid.n_steps - 1);
        const double y_s = obs.Y[k0];
        // integrate the fine tildeW over [s, s+dt] (fractional ends)
        const double a = (s - obs.grid.t0) / obs.grid.dt();
        const double b = (s + dt - obs.grid.t0) / obs.grid.dt();
        auto cum = [&](double p) {
            const int ip = std::clamp(static_cast<int>(p), 0, obs.grid.n_steps);
            const double fr = std::clamp(p - ip, 0.0, 1.0);
            double w = obs.tildeW[ip];
            if (ip < obs.grid.n_steps) w += fr * obs.dtildeW(ip);
            return w;
        };
        const double dWt = cum(b) - cum(a);
        u = forward_spde_step(u, c, y_s, dWt, dt);
    }
    return u;
}

/// Normalized copy (ae100): values / total_mass.
inline GridDensity normalize(const GridDensity& u) {
    if (!(u.total_mass > 1e-30))
        throw DegenerateDensityError("normalize: total mass below 1e-30");
    GridDensity out = u;
    for (double& v : out.values) v /= u.total_mass;
    out.total_mass = 1.0;
    return out;
}

/// Trapezoid functional of a normalized density against phi, with a
/// discretization estimate from a caller-supplied half-resolution value.
inline FilterEstimate estimate_forward(const GridDensity& u_hat, const model::ObservableFn& phi,
                                       double half_resolution_value = std::nan("")) {
    double acc = 0.0;
    for (int i = 0; i < u_hat.lattice.xi.n; ++i)
        for (int j = 0; j < u_hat.lattice.nu.n; ++j) {
            const Point2 p = u_hat.lattice.point(i, j);
            const double pv = phi(p.xi, p.nu);
            if (!std::isfinite(pv))
                throw std::domain_error("estimate_forward: phi unbounded on lattice");
            acc += u_hat.quad_weight(i, j) * u_hat.values[u_hat.lattice.index(i, j)] * pv;
        }
    FilterEstimate e;
    e.value = acc * u_hat.lattice.cell_area();
    e.method = "spde-forward";
    e.stderr_ = std::isfinite(half_resolution_value) ? std::abs(e.value - half_resolution_value)
                                                     : 0.0;
    return e;
}

namespace detail {

struct WeightedMc {
    double estimate = 0.0;
    double stderr_ = 0.0;
    double ess = 0.0;
};

/// Self-normalized (Kallianpur-Striebel) ratio with delta-method stderr.
inline WeightedMc ratio_estimator(std::span<const double> phi_vals,
                                  std::span<const double> weights) {
    const std::size_t n = phi_vals.size();
    double sw = 0.0, swf = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sw += weights[i];
        swf += weights[i] * phi_vals[i];
    }
    WeightedMc r;
    r.estimate = swf / sw;
    double var = 0.0, sw2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = weights[i] * (phi_vals[i] - r.estimate);
        var += d * d;
        sw2 += weights[i] * weights[i];
    }
    r.stderr_ = std::sqrt(var) / sw;
    r.ess = sw * sw / std::max(sw2, 1e-300);
    return r;
}

}  // namespace detail

/// Kallianpur-Striebel Monte Carlo: n_particles reference-measure paths share
/// the fixed tildeW realization; returns (sum phi rho)/(sum rho).
inline FilterEstimate ks_backward_estimate(const model::CoefficientSet& c, double t,
                                           const sde::Init3& init, double T,
                                           const model::ObservableFn& phi,
                                           std::span<const double> tildeW_increments, int n_steps,
                                           int n_particles, std::uint64_t seed) {
    if (n_particles < 2)
        throw std::invalid_argument("ks_backward_estimate: n_particles >= 2 required");
    const TimeGrid grid(t, T, n_steps);
    std::vector<double> phis(n_particles), ws(n_particles);
    for (int p = 0; p < n_particles; ++p) {
        const auto path = sde::simulate_under_Q(c, {init.x, init.v, init.y, 1.0},
                                                tildeW_increments, grid, seed, p);
        phis[p] = phi.eval_y(path.X.back(), path.V.back(), path.Y.back());
        ws[p] = path.rho.back();
    }
    const auto r = detail::ratio_estimator(phis, ws);
    FilterEstimate e;
    e.value = r.estimate;
    e.stderr_ = r.stderr_;
    e.method = "ks-backward";
    e.degenerate_weights = r.ess < 10.0;
    return e;
}

/// Independent oracle: same mathematics as ks_backward_estimate, separate
/// code path (oracle RNG layout, its own stepping loop, Kahan-compensated
/// weight accumulation, optional stratified resampling of the terminal cloud).
inline FilterEstimate particle_oracle(const model::CoefficientSet& c, double t,
                                      const sde::Init3& init, double T,
                                      const model::ObservableFn& phi,
                                      std::span<const double> tildeW_increments, int n_steps,
                                      int n_particles, std::uint64_t seed,
                                      bool stratified_resample = false) {
    if (n_particles < 2) throw std::invalid_argument("particle_oracle: n_particles >= 2 required");
    const TimeGrid grid(t, T, n_steps);
    const int nb = c.n_brownian;
    const double dt = grid.dt();
    const double sqdt = std::sqrt(dt);

    // shared Y path (W-tilde measurable, common to all particles)
    std::vector<double> Ypath(n_steps + 1);
    Ypath[0] = init.y;
    for (int k = 0; k < n_steps; ++k)
        Ypath[k + 1] = Ypath[k] + c.theta(grid.time(k), Ypath[k]) * tildeW_increments[k];

    std::vector<double> phis(n_particles), ws(n_particles);
    double shat[8];
    for (int p = 0; p < n_particles; ++p) {
        double x = init.x, v = init.v, logw = 0.0;
        double comp = 0.0;  // Kahan compensation for the log-weight
        for (int k = 0; k < n_steps; ++k) {
            const double tk = grid.time(k);
            const double y = Ypath[k];
            const double dWt = tildeW_increments[k];
            const double th = c.theta(tk, y);
            const double htil = c.h(tk, x, v, y) / th;
            std::span<double> sh(shat, static_cast<std::size_t>(nb - 1));
            c.sigma_hat(tk, x, v, y, sh);
            double dv = (c.b(tk, x, v, y) - htil * c.sigma1(tk, x, v, y)) * dt +
                        c.sigma1(tk, x, v, y) * dWt;
            for (int i = 0; i < nb - 1; ++i)
                dv += sh[i] * sqdt *
                      rng::normal(seed, rng::StreamLayout::oracle, p, k, 1 + i);
            const double term = htil * dWt - 0.5 * htil * htil * dt;
            const double yk = term - comp;
            const double tk2 = logw + yk;
            comp = (tk2 - logw) - yk;
            logw = tk2;
            x += v * dt;
            v += dv;
        }
        phis[p] = phi.eval_y(x, v, Ypath.back());
        ws[p] = std::exp(logw);
    }

    if (stratified_resample) {
        // resample the terminal cloud with stratified uniforms, then average
        double sw = 0.0;
        for (double w : ws) sw += w;
        std::vector<double> cum(n_particles);
        double acc = 0.0;
        for (int i = 0; i < n_particles; ++i) {
            acc += ws[i] / sw;
            cum[i] = acc;
        }
        double mean = 0.0;
        int j = 0;
        for (int i = 0; i < n_particles; ++i) {
            const double u =
                (i + rng::test_uniform(seed ^ 0x9E37u, 1, static_cast<std::uint32_t>(i))) /
                n_particles;
            while (j < n_particles - 1 && cum[j] < u) ++j;
            mean += phis[j];
        }
        FilterEstimate e;
        e.value = mean / n_particles;
        e.method = "particle-oracle";
        const auto r = detail::ratio_estimator(phis, ws);
        e.stderr_ = r.stderr_;
        e.degenerate_weights = r.ess < 10.0;
        return e;
    }
    const auto r = detail::ratio_estimator(phis, ws);
    FilterEstimate e;
    e.value = r.estimate;
    e.stderr_ = r.stderr_;
    e.method = "particle-oracle";
    e.degenerate_weights = r.ess < 10.0;
    return e;
}

/// 3-D (x, v, y) lattice for the backward filtering SPDE.
struct Lattice3 {
    Axis x, v, y;
    std::size_t size() const { return static_cast<std::size_t>(x.n) * v.n * y.n; }
    std::size_t index(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * v.n + j) * y.n + k;
    }
    double cell_volume() const { return x.h() * v.h() * y.h(); }
};

struct GridDensity3 {
    double time = 0.0;
    Lattice3 lattice;
    std::vector<double> values;

    GridDensity3() = default;
    explicit GridDensity3(const Lattice3& l, double t = 0.0)
        : time(t), lattice(l), values(l.size(), 0.0) {}

    double integrate() const {
        double acc = 0.0;
        for (int i = 0; i < lattice.x.n; ++i)
            for (int j = 0; j < lattice.v.n; ++j)
                for (int k = 0; k < lattice.y.n; ++k) {
                    double w = 1.0;
                    if (i == 0 || i == lattice.x.n - 1) w *= 0.5;
                    if (j == 0 || j == lattice.v.n - 1) w *= 0.5;
                    if (k == 0 || k == lattice.y.n - 1) w *= 0.5;
                    acc += w * values[lattice.index(i, j, k)];
                }
        return acc * lattice.cell_volume();
    }
};

/// One backward-in-time semi-Lagrangian step of the backward filtering SPDE
/// (Backward_eq2): u-(gamma^B_dt(z,y)) = u + A~ u dt + G~ u dW (right-endpoint
/// increment), central differences in (v, y).
inline GridDensity3 backward_spde_step(const GridDensity3& u, const model::CoefficientSet& c,
                                       double dW_tilde, double dt) {
    if (!(dt > 0.0)) throw std::domain_error("backward_spde_step: dt > 0 required");
    const Lattice3& lat = u.lattice;
    const double dv = lat.v.h(), dy = lat.y.h();
    const double s = u.time - dt;  // stepping from u.time down to s, coefficients at right endpoint
    const double tr = u.time;

    double coef_max = 0.0;
    for (int j = 0; j < lat.v.n; j += std::max(1, lat.v.n / 6))
        for (int k = 0; k < lat.y.n; k += std::max(1, lat.y.n / 6)) {
            const double sig2 = c.sigma_sq(tr, 0.0, lat.v.coord(j), lat.y.coord(k));
            const double th = c.theta(tr, lat.y.coord(k));
            coef_max = std::max(coef_max, sig2 / (dv * dv) + th * th / (dy * dy));
        }
    if (coef_max * dt > 0.5)
        throw StabilityError("backward_spde_step: diffusion stability bound violated");

    // conditional expectations are bounded, not decaying: replicate-edge
    // ghosts keep constants invariant (zero-inflow is for densities)
    std::vector<double> w(lat.size());
    auto U = [&](int i, int j, int k) -> double {
        j = std::clamp(j, 0, lat.v.n - 1);
        k = std::clamp(k, 0, lat.y.n - 1);
        return u.values[lat.index(i, j, k)];
    };
    for (int i = 0; i < lat.x.n; ++i) {
        const double x = lat.x.coord(i);
        for (int j = 0; j < lat.v.n; ++j) {
            const double vv = lat.v.coord(j);
            for (int k = 0; k < lat.y.n; ++k) {
                const double yy = lat.y.coord(k);
                const double uv = U(i, j, k);
                const double sig2 = c.sigma_sq(tr, x, vv, yy);
                const double s1 = c.sigma1(tr, x, vv, yy);
                const double th = c.theta(tr, yy);
                const double bb = c.b(tr, x, vv, yy);
                const double hh = c.h(tr, x, vv, yy);
                const double htil = hh / th;

                const double uvv = (U(i, j + 1, k) - 2 * uv + U(i, j - 1, k)) / (dv * dv);
                const double uyy = (U(i, j, k + 1) - 2 * uv + U(i, j, k - 1)) / (dy * dy);
                const double uvy = (U(i, j + 1, k + 1) - U(i, j + 1, k - 1) - U(i, j - 1, k + 1) +
                                    U(i, j - 1, k - 1)) /
                                   (4 * dv * dy);
                const double uv1 = (U(i, j + 1, k) - U(i, j - 1, k)) / (2 * dv);
                const double uy1 = (U(i, j, k + 1) - U(i, j, k - 1)) / (2 * dy);

                const double Atil = 0.5 * (sig2 * uvv + 2.0 * th * s1 * uvy + th * th * uyy) +
                                    bb * uv1 + hh * uy1;
                const double Gtil = s1 * uv1 + th * uy1 + htil * uv;
                w[lat.index(i, j, k)] = uv + Atil * dt + Gtil * dW_tilde;
            }
        }
    }

    // advect: u_new at (x + dt v, v, y) equals w(x, v, y), so
    // u_new(x, v, y) = w(x - dt v, v, y); cubic interpolation along x,
    // clamped at the edges (bounded data)
    GridDensity3 out(lat, s);
    std::vector<double> row(lat.x.n);
    for (int j = 0; j < lat.v.n; ++j) {
        const double shift = dt * lat.v.coord(j);
        for (int k = 0; k < lat.y.n; ++k) {
            for (int i = 0; i < lat.x.n; ++i) row[i] = w[lat.index(i, j, k)];
            for (int i = 0; i < lat.x.n; ++i) {
                const double xsrc = std::clamp(lat.x.coord(i) - shift, lat.x.lo, lat.x.hi);
                out.values[lat.index(i, j, k)] = interp::cubic_axis(row.data(), lat.x, 1, xsrc);
            }
        }
    }
    return out;
}

/// Solve the backward filtering SPDE from terminal datum phi at T down to t,
/// along the realized tildeW increments.
inline GridDensity3 solve_backward_spde(const model::CoefficientSet& c, const GridDensity3& terminal,
                                        double t, std::span<const double> tildeW_increments,
                                        const TimeGrid& grid) {
    GridDensity3 u = terminal;
    const int n = grid.n_steps;
    if (static_cast<int>(tildeW_increments.size()) != n)
        throw std::invalid_argument("solve_backward_spde: increment/grid mismatch");
    for (int k = n - 1; k >= 0; --k) {
        u = backward_spde_step(u, c, tildeW_increments[k], grid.dt());
        if (u.time <= t + 0.5 * grid.dt()) break;
    }
    return u;
}

/// Backward filtering density at one starting point (t, z0, y0): solves the
/// backward SPDE once per Dirac-approximated terminal cell on a coarse target
/// grid and normalizes per (ae1).
struct BackwardDensity {
    Lattice3 targets;
    std::vector<double> values;  // unnormalized, then normalized in place
    double raw_mass = 0.0;
};

inline BackwardDensity backward_filtering_density(const model::CoefficientSet& c, double t,
                                                  const sde::Init3& start, double T,
                                                  const Lattice3& run_lattice,
                                                  const Lattice3& targets,
                                                  std::span<const double> tildeW_increments,
                                                  const TimeGrid& grid, double dirac_width = 0.0) {
    BackwardDensity bd;
    bd.targets = targets;
    bd.values.resize(targets.size());
    const double wz = dirac_width > 0.0 ? dirac_width : 1.5 * run_lattice.v.h();
    const double wy = dirac_width > 0.0 ? dirac_width : 1.5 * run_lattice.y.h();
    const double wx = dirac_width > 0.0 ? dirac_width : 1.5 * run_lattice.x.h();
    for (int ti = 0; ti < targets.x.n; ++ti)
        for (int tj = 0; tj < targets.v.n; ++tj)
            for (int tk = 0; tk < targets.y.n; ++tk) {
                GridDensity3 term(run_lattice, T);
                const double cx = targets.x.coord(ti);
                const double cv = targets.v.coord(tj);
                const double cy = targets.y.coord(tk);
                const double norm =
                    1.0 / (std::pow(2.0 * M_PI, 1.5) * wx * wz * wy);
                for (int i = 0; i < run_lattice.x.n; ++i)
                    for (int j = 0; j < run_lattice.v.n; ++j)
                        for (int k = 0; k < run_lattice.y.n; ++k) {
                            const double ddx = (run_lattice.x.coord(i) - cx) / wx;
                            const double ddv = (run_lattice.v.coord(j) - cv) / wz;
                            const double ddy = (run_lattice.y.coord(k) - cy) / wy;
                            term.values[run_lattice.index(i, j, k)] =
                                norm * std::exp(-0.5 * (ddx * ddx + ddv * ddv + ddy * ddy));
                        }
                const auto u = solve_backward_spde(c, term, t, tildeW_increments, grid);
                // read off u_t at the starting point (nearest node)
                auto nearest = [](const Axis& a, double xq) {
                    return std::clamp(static_cast<int>(std::lround((xq - a.lo) / a.h())), 0,
                                      a.n - 1);
                };
                bd.values[targets.index(ti, tj, tk)] =
                    u.values[run_lattice.index(nearest(run_lattice.x, start.x),
                                               nearest(run_lattice.v, start.v),
                                               nearest(run_lattice.y, start.y))];
            }
    // normalize over the target cells (trapezoid)
    double mass = 0.0;
    for (int i = 0; i < targets.x.n; ++i)
        for (int j = 0; j < targets.v.n; ++j)
            for (int k = 0; k < targets.y.n; ++k) {
                double w = 1.0;
                if (i == 0 || i == targets.x.n - 1) w *= 0.5;
                if (j == 0 || j == targets.v.n - 1) w *= 0.5;
                if (k == 0 || k == targets.y.n - 1) w *= 0.5;
                mass += w * bd.values[targets.index(i, j, k)];
            }
    mass *= targets.cell_volume();
    bd.raw_mass = mass;
    if (!(mass > 1e-30))
        throw DegenerateDensityError("backward_filtering_density: degenerate mass");
    for (double& v : bd.values) v /= mass;
    return bd;
}

}  // namespace kinfilt::filter
