#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>

#include "kinfilt/common.hpp"
#include "kinfilt/quad.hpp"

namespace kinfilt::kernels {

/// Anisotropic offset (dt, dx, dv) in the kinetic scaling dt ~ dx^{2/3} ~ dv^2.
struct AnisotropicPoint {
    double dt = 0.0;
    double dx = 0.0;
    double dv = 0.0;
};

/// log of the bounding kernel (lambda/dt^2) exp(-(dx^2/dt^3 + dv^2/dt)/(2 lambda)), d = 1.
inline double log_gaussian_bound_kernel(double lambda, const AnisotropicPoint& p) {
    if (!(lambda > 0.0)) throw std::domain_error("gaussian_bound_kernel: lambda > 0 required");
    if (!(p.dt > 0.0)) throw std::domain_error("gaussian_bound_kernel: dt > 0 required");
    const double q = p.dx * p.dx / (p.dt * p.dt * p.dt) + p.dv * p.dv / p.dt;
    return std::log(lambda) - 2.0 * std::log(p.dt) - 0.5 * q / lambda;
}

inline double gaussian_bound_kernel(double lambda, const AnisotropicPoint& p) {
    return std::exp(log_gaussian_bound_kernel(lambda, p));
}

/// Integral curve of the advection field nu d_xi: (xi, nu) -> (xi + dt nu, nu).
inline Point2 characteristic_shift(double dt, const Point2& z) {
    return {z.xi + dt * z.nu, z.nu};
}

/// Bivariate Gaussian with cached precision; exposes the analytic derivatives
/// in the evaluation point that the parametrix remainder kernel needs.
class Gaussian2 {
public:
    Gaussian2(const Point2& mean, const Sym2& cov, double det_tol = 1e-30) : mean_(mean), cov_(cov) {
        const double d = cov.det();
        if (!(d > det_tol))
            throw SingularKernelError("Gaussian2: covariance determinant below tolerance");
        prec_ = cov.inverse();
        log_norm_ = -std::log(2.0 * M_PI) - 0.5 * std::log(d);
    }

    const Point2& mean() const { return mean_; }
    const Sym2& cov() const { return cov_; }

    double log_density(const Point2& zeta) const {
        const Point2 q = zeta - mean_;
        return log_norm_ - 0.5 * dot(q, prec_.apply(q));
    }

    double density(const Point2& zeta) const { return std::exp(log_density(zeta)); }

    struct Derivs {
        double value;   // G
        double d_xi;    // d/d xi
        double d_nu;    // d/d nu
        double d_nunu;  // d^2/d nu^2
        double d_nuxi;  // d^2/d nu d xi
        double d_xixi;  // d^2/d xi^2
    };

    Derivs derivs(const Point2& zeta) const {
        const Point2 q = zeta - mean_;
        const Point2 g = prec_.apply(q);  // gradient of the quadratic form / value
        const double v = std::exp(log_norm_ - 0.5 * dot(q, g));
        return {v,
                -v * g.xi,
                -v * g.nu,
                v * (g.nu * g.nu - prec_.a22),
                v * (g.nu * g.xi - prec_.a12),
                v * (g.xi * g.xi - prec_.a11)};
    }

private:
    Point2 mean_;
    Sym2 cov_;
    Sym2 prec_;
    double log_norm_;
};

/// Covariance of the kinetic prototype dX = V dt, dV = sigma dW over dt.
inline Sym2 langevin_covariance(double sigma, double dt) {
    const double s2 = sigma * sigma;
    return {s2 * dt * dt * dt / 3.0, s2 * dt * dt / 2.0, s2 * dt};
}

/// Exact fundamental solution of the kinetic prototype: Gaussian in zeta with
/// mean (x + dt v, v).
inline Gaussian2 exact_langevin_gaussian(double sigma, double dt, const Point2& z) {
    if (!(sigma > 0.0)) throw std::domain_error("exact_langevin_kernel: sigma > 0 required");
    if (!(dt > 0.0)) throw std::domain_error("exact_langevin_kernel: dt > 0 required");
    return Gaussian2(characteristic_shift(dt, z), langevin_covariance(sigma, dt));
}

inline double exact_langevin_kernel(double sigma, double dt, const Point2& z, const Point2& zeta) {
    return exact_langevin_gaussian(sigma, dt, z).density(zeta);
}

/// Frozen-coefficient data for the linearized equation: the diffusion, the
/// (1,2) entry of the reduced Jacobian DY and the trajectory, all along the
/// frozen integral curve, as functions of time.
struct LinearizedKernelSpec {
    double t0 = 0.0;
    Point2 z0;
    std::function<double(double)> frozen_diffusion;   // s -> a_s(gamma_s)
    std::function<double(double)> drift_k;            // s -> d_nu (Y_s)_1 (gamma_s)
    std::function<Point2(double)> frozen_trajectory;  // s -> gamma_s
};

/// Builds the Gaussian of the linearized kernel on [t, s] by variation of
/// constants. DY is strictly upper triangular, so the resolvent is unipotent:
/// E(s,tau) = [[1, K(tau,s)],[0,1]] with K = int k, and
///   mean  = gamma_s + E(s,t) (z - gamma_t),
///   cov   = int_t^s 2 a(tau) [K^2, K; K, 1](tau,s) dtau.
inline Gaussian2 linearized_gaussian(const LinearizedKernelSpec& spec, double t, const Point2& z,
                                     double s, double quad_tol = 1e-10) {
    if (!(t < s)) throw std::domain_error("linearized_kernel: t < s required");
    const auto kcum = [&](double a, double b) {
        return quad::adaptive_simpson(spec.drift_k, a, b, quad_tol);
    };
    const double K_ts = kcum(t, s);
    Sym2 cov;
    cov.a11 = quad::adaptive_simpson(
        [&](double tau) {
            const double K = kcum(tau, s);
            return 2.0 * spec.frozen_diffusion(tau) * K * K;
        },
        t, s, quad_tol);
    cov.a12 = quad::adaptive_simpson(
        [&](double tau) { return 2.0 * spec.frozen_diffusion(tau) * kcum(tau, s); }, t, s, quad_tol);
    cov.a22 = quad::adaptive_simpson([&](double tau) { return 2.0 * spec.frozen_diffusion(tau); },
                                     t, s, quad_tol);
    const Point2 gt = spec.frozen_trajectory(t);
    const Point2 gs = spec.frozen_trajectory(s);
    const Point2 d = z - gt;
    const Point2 mean = {gs.xi + d.xi + K_ts * d.nu, gs.nu + d.nu};
    return Gaussian2(mean, cov);
}

inline double linearized_kernel(const LinearizedKernelSpec& spec, double t, const Point2& z,
                                double s, const Point2& zeta) {
    return linearized_gaussian(spec, t, z, s).density(zeta);
}

}  // namespace kinfilt::kernels
