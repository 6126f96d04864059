#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <vector>

#include "kinfilt/grid.hpp"
#include "kinfilt/rng.hpp"

namespace kinfilt::bito {

/// Right-endpoint stochastic integral with a dyadic refinement trace.
struct BackwardIntegralResult {
    double value = 0.0;
    double mesh = 0.0;
    std::vector<double> refinement_trace;  // coarse -> fine on the same path
};

/// int u * dW as the right-endpoint Riemann sum sum u_{t_k} (W_{t_k} - W_{t_{k-1}}).
/// The trace coarsens the common path dyadically, coarsest first.
inline BackwardIntegralResult backward_integral(std::span<const double> u,
                                                std::span<const double> W, const TimeGrid& grid) {
    const int n = grid.n_steps;
    if (static_cast<int>(u.size()) != n + 1 || static_cast<int>(W.size()) != n + 1)
        throw std::invalid_argument("backward_integral: path/grid length mismatch");
    BackwardIntegralResult r;
    r.mesh = grid.dt();
    for (int stride = [&] {
             int s = 1;
             while (2 * s <= n && n % (2 * s) == 0) s *= 2;
             return s;
         }();
         stride >= 1; stride /= 2) {
        double acc = 0.0;
        for (int k = stride; k <= n; k += stride) acc += u[k] * (W[k] - W[k - stride]);
        r.refinement_trace.push_back(acc);
    }
    r.value = r.refinement_trace.back();
    return r;
}

/// Brownian path on a grid from the testing stream layout.
inline std::vector<double> brownian_path(const TimeGrid& grid, std::uint64_t seed,
                                         std::uint64_t stream, std::uint32_t channel = 0) {
    std::vector<double> W(grid.n_steps + 1, 0.0);
    const double sq = std::sqrt(grid.dt());
    for (int k = 0; k < grid.n_steps; ++k)
        W[k + 1] = W[k] + sq * rng::normal(seed, rng::StreamLayout::primary, stream, k, channel);
    return W;
}

/// Smooth test function with analytic derivatives for the backward Ito formula.
struct TestFunction {
    std::function<double(double, double)> v;     // (t, x)
    std::function<double(double, double)> v_t;
    std::function<double(double, double)> v_x;
    std::function<double(double, double)> v_xx;
};

/// Assembles both sides of the backward Ito formula for v(t, X_t) where
///   -dX = b dt + sigma * dW
/// is built from the supplied coefficient paths (right-endpoint sums), and
/// returns |LHS - RHS|.
inline double backward_ito_check(const TestFunction& v, std::span<const double> b_path,
                                 std::span<const double> sigma_path, std::span<const double> W,
                                 const TimeGrid& grid, double X_T) {
    const int n = grid.n_steps;
    if (static_cast<int>(b_path.size()) != n + 1 || static_cast<int>(sigma_path.size()) != n + 1 ||
        static_cast<int>(W.size()) != n + 1)
        throw std::invalid_argument("backward_ito_check: path/grid length mismatch");
    const double dt = grid.dt();
    std::vector<double> X(n + 1);
    X[n] = X_T;
    for (int k = n - 1; k >= 0; --k)
        X[k] = X[k + 1] + b_path[k + 1] * dt + sigma_path[k + 1] * (W[k + 1] - W[k]);

    const double lhs = v.v(grid.time(0), X[0]) - v.v(grid.time(n), X[n]);
    // The dt-part carries -d_t v: time reversal maps the backward process onto
    // a forward one and the substitution flips the time derivative (purely
    // time-dependent v must collapse to the fundamental theorem of calculus).
    // Trapezoid on the ds-integral (no adaptedness constraint there); the
    // stochastic sums stay right-endpoint.
    auto drift_part = [&](int k) {
        const double t = grid.time(k);
        const double x = X[k];
        const double s = sigma_path[k];
        return -v.v_t(t, x) + 0.5 * s * s * v.v_xx(t, x) + b_path[k] * v.v_x(t, x);
    };
    double rhs = 0.0;
    for (int k = 1; k <= n; ++k) {
        rhs += 0.5 * (drift_part(k) + drift_part(k - 1)) * dt;
        rhs += sigma_path[k] * v.v_x(grid.time(k), X[k]) * (W[k] - W[k - 1]);
    }
    return std::abs(lhs - rhs);
}

/// Scalar autonomous SDE preset with analytic coefficients.
struct ScalarSde {
    std::function<double(double)> b;
    std::function<double(double)> sigma;
};

inline ScalarSde ou_preset() {
    return {[](double x) { return -x; }, [](double) { return 1.0; }};
}

inline ScalarSde const_sigma_preset(double sigma) {
    return {[](double) { return 0.0; }, [sigma](double) { return sigma; }};
}

namespace detail {
/// Path of X^{t_k0, x}_T with common noise, starting at the fine index k0.
/// RK4 on the drift (the sigma = 0 case is a pure ODE flow), Euler noise.
inline double flow_to_T(const ScalarSde& sde, double x, int k0, std::span<const double> W,
                        double dt, int n) {
    double xv = x;
    for (int k = k0; k < n; ++k) {
        const double k1 = sde.b(xv);
        const double k2 = sde.b(xv + 0.5 * dt * k1);
        const double k3 = sde.b(xv + 0.5 * dt * k2);
        const double k4 = sde.b(xv + dt * k3);
        xv += dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4) + sde.sigma(xv) * (W[k + 1] - W[k]);
    }
    return xv;
}
}  // namespace detail

struct SpdeCheckResult {
    double residual = 0.0;   // |X^{t,x}_T - x - discrete backward sums|
    double terminal = 0.0;   // X^{t,x}_T (start of grid)
};

/// Verifies the backward diffusion SPDE: reconstructs X^{t,x}_T - x through
/// the discrete right-endpoint sums with d_x, d_xx by common-noise lattice
/// finite differences. The flows run on an inner grid `sim_refine` times
/// finer than the reconstruction mesh (with the flows simulated on the
/// reconstruction grid itself the Euler flow property makes the sums
/// telescope exactly for affine dynamics and the residual is pure round-off).
/// A non-null `v` runs the invariance corollary on V = v(X^{t,x}_T); identity
/// gives the plain check.
inline SpdeCheckResult backward_diffusion_spde_check(const ScalarSde& sde, double x0,
                                                     const TimeGrid& grid, std::uint64_t seed,
                                                     std::uint64_t stream, double fd = 1e-3,
                                                     const std::function<double(double)>& v = nullptr,
                                                     int sim_refine = 8) {
    const int n = grid.n_steps;
    const int R = std::max(1, sim_refine);
    const TimeGrid fine(grid.t0, grid.t1, n * R);
    const auto W = brownian_path(fine, seed, stream);
    // X^{t_k, x0 + j fd}_T for j in {-1,0,1}, all on common noise
    std::vector<std::array<double, 3>> XT(n + 1);
    for (int k = 0; k <= n; ++k)
        for (int j = -1; j <= 1; ++j)
            XT[k][j + 1] =
                detail::flow_to_T(sde, x0 + j * fd, k * R, W, fine.dt(), fine.n_steps);

    auto val = [&](double xt) { return v ? v(xt) : xt; };
    const double s0 = sde.sigma(x0);
    auto drift_part = [&](int k) {
        const double Vm = val(XT[k][0]), V0 = val(XT[k][1]), Vp = val(XT[k][2]);
        const double dV = (Vp - Vm) / (2 * fd);
        const double ddV = (Vp - 2 * V0 + Vm) / (fd * fd);
        return 0.5 * s0 * s0 * ddV + sde.b(x0) * dV;
    };
    const double dt = grid.dt();
    double rhs = 0.0;
    for (int k = 1; k <= n; ++k) {
        rhs += 0.5 * (drift_part(k) + drift_part(k - 1)) * dt;
        const double dV = (val(XT[k][2]) - val(XT[k][0])) / (2 * fd);
        rhs += s0 * dV * (W[k * R] - W[(k - 1) * R]);
    }
    SpdeCheckResult r;
    r.terminal = val(XT[0][1]);
    r.residual = std::abs(r.terminal - val(XT[n][1]) - rhs);
    return r;
}

/// Backward flow property surrogate: X^{t_{k-1},x}_T vs X^{t_k, X^{t_{k-1},x}_{t_k}}_T
/// under common noise; returns the worst gap over the interior steps sampled.
inline double flow_property_gap(const ScalarSde& sde, double x0, const TimeGrid& grid,
                                std::uint64_t seed, std::uint64_t stream) {
    const auto W = brownian_path(grid, seed, stream);
    double worst = 0.0;
    const int n = grid.n_steps;
    for (int k = 1; k <= n; k += std::max(1, n / 16)) {
        const double direct = detail::flow_to_T(sde, x0, k - 1, W, grid.dt(), n);
        // one Euler step from t_{k-1} to t_k, then restart
        const double xk = x0 + sde.b(x0) * grid.dt() + sde.sigma(x0) * (W[k] - W[k - 1]);
        const double restart = detail::flow_to_T(sde, xk, k, W, grid.dt(), n);
        worst = std::max(worst, std::abs(direct - restart));
    }
    return worst;
}

/// Least-squares slope of log(err) against log(dt); rates reported by the
/// residual sweeps.
inline double fit_rate(std::span<const double> dts, std::span<const double> errs) {
    if (dts.size() != errs.size() || dts.size() < 2)
        throw std::invalid_argument("fit_rate: need matching sweeps of length >= 2");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    const double n = static_cast<double>(dts.size());
    for (std::size_t i = 0; i < dts.size(); ++i) {
        const double lx = std::log(dts[i]);
        const double ly = std::log(std::max(errs[i], 1e-300));
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    return (n * sxy - sx * sy) / (n * sxx - sx * sx);
}

inline double median(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median: empty");
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

}  // namespace kinfilt::bito
