#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "kinfilt/kernels.hpp"
#include "kinfilt/quad.hpp"
#include "kinfilt/rng.hpp"

using namespace kinfilt;
using kernels::AnisotropicPoint;
using kernels::gaussian_bound_kernel;

TEST_CASE("gaussian bound kernel: direct evaluations") {
    CHECK(gaussian_bound_kernel(2.0, {1.0, 0.0, 0.0}) == Catch::Approx(2.0).epsilon(1e-14));
    CHECK(gaussian_bound_kernel(1.0, {1.0, 1.0, 1.0}) ==
          Catch::Approx(std::exp(-1.0)).epsilon(1e-14));
    CHECK_THROWS_AS(gaussian_bound_kernel(1.0, {0.0, 0.0, 0.0}), std::domain_error);
    CHECK_THROWS_AS(gaussian_bound_kernel(1.0, {-0.5, 0.0, 0.0}), std::domain_error);
    CHECK_THROWS_AS(gaussian_bound_kernel(0.0, {1.0, 0.0, 0.0}), std::domain_error);
}

TEST_CASE("gaussian bound kernel: maximum at the origin, monotone decay") {
    const double lam = 1.7, dt = 0.4;
    const double peak = gaussian_bound_kernel(lam, {dt, 0.0, 0.0});
    double prev = peak;
    for (int i = 1; i <= 20; ++i) {
        const double v = gaussian_bound_kernel(lam, {dt, 0.05 * i, 0.08 * i});
        CHECK(v < prev);
        prev = v;
    }
    CHECK(peak == Catch::Approx(lam / (dt * dt)));
}

TEST_CASE("gaussian bound kernel: anisotropic dilation identity") {
    // Gamma_lambda(c^2 dt, c^3 dx, c dv) = c^-4 Gamma_lambda(dt, dx, dv)
    for (int trial = 0; trial < 50; ++trial) {
        const double c = 0.2 + 3.0 * rng::test_uniform(11, trial, 0);
        const double lam = 0.5 + 4.0 * rng::test_uniform(11, trial, 1);
        const double dt = 0.1 + rng::test_uniform(11, trial, 2);
        const double dx = 2.0 * rng::test_uniform(11, trial, 3) - 1.0;
        const double dv = 2.0 * rng::test_uniform(11, trial, 4) - 1.0;
        const double lhs = gaussian_bound_kernel(lam, {c * c * dt, c * c * c * dx, c * dv});
        const double rhs = gaussian_bound_kernel(lam, {dt, dx, dv}) / (c * c * c * c);
        CHECK(lhs == Catch::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("characteristic shift") {
    const Point2 p = kernels::characteristic_shift(2.0, {0.0, 1.0});
    CHECK(p.xi == 2.0);
    CHECK(p.nu == 1.0);
    const Point2 q = kernels::characteristic_shift(0.0, {0.3, -0.7});
    CHECK(q.xi == 0.3);
    CHECK(q.nu == -0.7);
    // flow property gamma_a o gamma_b = gamma_{a+b}
    for (int trial = 0; trial < 20; ++trial) {
        const double a = rng::test_uniform(12, trial, 0), b = rng::test_uniform(12, trial, 1);
        const Point2 z{2.0 * rng::test_uniform(12, trial, 2) - 1.0,
                       2.0 * rng::test_uniform(12, trial, 3) - 1.0};
        const Point2 lhs = kernels::characteristic_shift(a, kernels::characteristic_shift(b, z));
        const Point2 rhs = kernels::characteristic_shift(a + b, z);
        CHECK(lhs.xi == Catch::Approx(rhs.xi).margin(1e-14));
        CHECK(lhs.nu == Catch::Approx(rhs.nu).margin(1e-14));
    }
}

TEST_CASE("exact langevin kernel: normalizer and errors") {
    // peak value 1/(2 pi sqrt(det)) with det = sigma^4 dt^4 / 12; at sigma = dt = 1
    // this is sqrt(3)/pi
    const Point2 z{0.3, -0.2};
    const Point2 mean = kernels::characteristic_shift(1.0, z);
    const double peak = kernels::exact_langevin_kernel(1.0, 1.0, z, mean);
    CHECK(peak == Catch::Approx(std::sqrt(3.0) / M_PI).epsilon(1e-13));
    CHECK(peak == Catch::Approx(0.551328895421792).epsilon(1e-12));
    CHECK_THROWS_AS(kernels::exact_langevin_kernel(1.0, 0.0, z, mean), std::domain_error);
    CHECK_THROWS_AS(kernels::exact_langevin_kernel(1.0, -1.0, z, mean), std::domain_error);
    CHECK_THROWS_AS(kernels::exact_langevin_kernel(0.0, 1.0, z, mean), std::domain_error);
}

TEST_CASE("exact langevin kernel: integrates to one") {
    const Point2 z{0.1, 0.4};
    const double dt = 0.7, sigma = 0.9;
    const auto g = kernels::exact_langevin_gaussian(sigma, dt, z);
    // trapezoid on a wide anisotropic box around the mean
    const double sx = std::sqrt(g.cov().a11), sv = std::sqrt(g.cov().a22);
    const int n = 201;
    double mass = 0.0;
    const double hx = 16.0 * sx / (n - 1), hv = 16.0 * sv / (n - 1);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double wx = (i == 0 || i == n - 1) ? 0.5 : 1.0;
            const double wv = (j == 0 || j == n - 1) ? 0.5 : 1.0;
            mass += wx * wv *
                    g.density({g.mean().xi - 8.0 * sx + hx * i, g.mean().nu - 8.0 * sv + hv * j});
        }
    mass *= hx * hv;
    CHECK(mass == Catch::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("exact langevin kernel: Monte Carlo oracle (histogram + moments)") {
    // Euler paths of dX = V dt, dV = sigma dW; 2-D histogram bin at the mean
    const double sigma = 1.0, T = 1.0;
    const Point2 z{0.3, -0.2};
    const int n_paths = 400000, n_steps = 128;
    const double dt = T / n_steps, sq = std::sqrt(dt);
    const double bin = 0.1;
    const Point2 mean_expected = kernels::characteristic_shift(T, z);
    long hits = 0;
    double mx = 0.0, mv = 0.0;
    for (int p = 0; p < n_paths; ++p) {
        double x = z.xi, v = z.nu;
        for (int k = 0; k < n_steps; ++k) {
            x += v * dt;
            v += sigma * sq * rng::normal(77, rng::StreamLayout::primary, p, k, 0);
        }
        mx += x;
        mv += v;
        if (std::abs(x - mean_expected.xi) < 0.5 * bin && std::abs(v - mean_expected.nu) < 0.5 * bin)
            ++hits;
    }
    mx /= n_paths;
    mv /= n_paths;
    // mean of zeta under the kernel = (x + dt v, v), within 3 standard errors
    const double se_x = std::sqrt(sigma * sigma * T * T * T / 3.0 / n_paths);
    const double se_v = std::sqrt(sigma * sigma * T / n_paths);
    CHECK(std::abs(mx - mean_expected.xi) < 3.0 * se_x + 2.0 / n_steps);
    CHECK(std::abs(mv - mean_expected.nu) < 3.0 * se_v);
    // histogram density vs kernel value at the mean
    const double mc_density = static_cast<double>(hits) / (n_paths * bin * bin);
    const double kernel_value = kernels::exact_langevin_kernel(sigma, T, z, mean_expected);
    CHECK(std::abs(mc_density / kernel_value - 1.0) < 0.08);
}

TEST_CASE("exact langevin kernel: delta family limit") {
    const Point2 z{-0.5, 0.8};
    auto phi = [](const Point2& p) { return std::exp(-0.3 * p.xi * p.xi - 0.2 * p.nu * p.nu); };
    const double dt = 1e-3;
    const auto g = kernels::exact_langevin_gaussian(1.0, dt, z);
    const double sx = std::sqrt(g.cov().a11), sv = std::sqrt(g.cov().a22);
    const int n = 101;
    double acc = 0.0;
    const double hx = 16.0 * sx / (n - 1), hv = 16.0 * sv / (n - 1);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double wx = (i == 0 || i == n - 1) ? 0.5 : 1.0;
            const double wv = (j == 0 || j == n - 1) ? 0.5 : 1.0;
            const Point2 p{g.mean().xi - 8.0 * sx + hx * i, g.mean().nu - 8.0 * sv + hv * j};
            acc += wx * wv * g.density(p) * phi(p);
        }
    acc *= hx * hv;
    CHECK(acc == Catch::Approx(phi(z)).epsilon(5e-3));
}

TEST_CASE("exact langevin kernel: Chapman-Kolmogorov on a grid") {
    const double sigma = 0.8;
    const Point2 z{0.0, 0.2};
    const double t = 0.0, r = 0.3, s = 0.7;
    const auto g_tr = kernels::exact_langevin_gaussian(sigma, r - t, z);
    // Gauss-Hermite over w aligned with the first kernel
    const auto gh = quad::gauss_hermite(40);
    const auto L = g_tr.cov().chol();
    const double sq2 = std::sqrt(2.0);
    std::vector<Point2> targets = {{0.1, 0.3}, {0.5, -0.4}, {-0.3, 0.9}, {0.2, 0.0}};
    for (const auto& zeta : targets) {
        double acc = 0.0;
        for (std::size_t i = 0; i < gh.nodes.size(); ++i)
            for (std::size_t j = 0; j < gh.nodes.size(); ++j) {
                const double ux = gh.nodes[i], uv = gh.nodes[j];
                const Point2 w{g_tr.mean().xi + sq2 * L[0] * ux,
                               g_tr.mean().nu + sq2 * (L[1] * ux + L[2] * uv)};
                const double k2 = kernels::exact_langevin_kernel(sigma, s - r, w, zeta);
                acc += gh.weights[i] * gh.weights[j] * std::exp(ux * ux + uv * uv) * k2 *
                       g_tr.density(w);
            }
        acc *= 2.0 * L[0] * L[2];
        const double direct = kernels::exact_langevin_kernel(sigma, s - t, z, zeta);
        CHECK(std::abs(acc - direct) < 1e-4);
    }
}

namespace {

kernels::LinearizedKernelSpec nontrivial_spec() {
    kernels::LinearizedKernelSpec spec;
    spec.t0 = 0.0;
    spec.z0 = {0.0, 1.0};
    spec.frozen_diffusion = [](double s) { return 0.5 + 0.2 * std::sin(2.0 * M_PI * s); };
    spec.drift_k = [](double s) { return 1.0 + 0.3 * std::cos(s); };
    spec.frozen_trajectory = [](double s) { return Point2{std::sin(s), std::cos(s)}; };
    return spec;
}

}  // namespace

TEST_CASE("linearized kernel: constant data reduces to the kinetic prototype") {
    kernels::LinearizedKernelSpec spec;
    spec.t0 = 0.0;
    const double sigma = 0.7;
    spec.z0 = {0.3, -0.2};
    spec.frozen_diffusion = [sigma](double) { return 0.5 * sigma * sigma; };
    spec.drift_k = [](double) { return 1.0; };
    const Point2 z0 = spec.z0;
    spec.frozen_trajectory = [z0](double s) { return kernels::characteristic_shift(s, z0); };
    const double t = 0.0, s = 0.8;
    for (const Point2 zeta : {Point2{0.1, -0.3}, Point2{0.5, 0.2}, Point2{-0.6, -0.1}}) {
        const double lin = kernels::linearized_kernel(spec, t, spec.z0, s, zeta);
        const double exact = kernels::exact_langevin_kernel(sigma, s, spec.z0, zeta);
        CHECK(lin == Catch::Approx(exact).epsilon(1e-8));
    }
}

TEST_CASE("linearized kernel: normalization") {
    const auto spec = nontrivial_spec();
    const double t = 0.1, s = 0.9;
    const Point2 z = spec.frozen_trajectory(t);
    const auto g = kernels::linearized_gaussian(spec, t, z, s);
    const double sx = std::sqrt(g.cov().a11), sv = std::sqrt(g.cov().a22);
    const int n = 161;
    double mass = 0.0;
    const double hx = 17.0 * sx / (n - 1), hv = 17.0 * sv / (n - 1);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double wx = (i == 0 || i == n - 1) ? 0.5 : 1.0;
            const double wv = (j == 0 || j == n - 1) ? 0.5 : 1.0;
            mass += wx * wv *
                    g.density({g.mean().xi - 8.5 * sx + hx * i, g.mean().nu - 8.5 * sv + hv * j});
        }
    mass *= hx * hv;
    CHECK(mass == Catch::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("linearized kernel: Monte Carlo oracle for mean and covariance") {
    // Euler the affine SDE d zeta = (gamma' + DY (zeta - gamma)) ds + sqrt(2a) e2 dW
    const auto spec = nontrivial_spec();
    const double t = 0.0, s = 0.5;
    const Point2 z = spec.frozen_trajectory(t) + Point2{0.3, -0.2};
    const auto g = kernels::linearized_gaussian(spec, t, z, s);

    const int n_paths = 400000, n_steps = 200;
    const double dt = (s - t) / n_steps, sq = std::sqrt(dt);
    auto traj_dot = [&](double tau) {
        const double h = 1e-5;
        const Point2 a = spec.frozen_trajectory(tau + h), b = spec.frozen_trajectory(tau - h);
        return Point2{(a.xi - b.xi) / (2 * h), (a.nu - b.nu) / (2 * h)};
    };
    auto drift = [&](double tau, const Point2& p) {
        const Point2 gam = spec.frozen_trajectory(tau);
        return traj_dot(tau) + Point2{spec.drift_k(tau) * (p.nu - gam.nu), 0.0};
    };
    double m1 = 0, m2 = 0, c11 = 0, c12 = 0, c22 = 0;
    for (int p = 0; p < n_paths; ++p) {
        Point2 zp = z;
        for (int k = 0; k < n_steps; ++k) {
            const double tau = t + k * dt;
            // Heun drift (additive noise): removes the O(dt) weak bias
            const double dw = std::sqrt(2.0 * spec.frozen_diffusion(tau)) * sq *
                              rng::normal(99, rng::StreamLayout::primary, p, k, 0);
            const Point2 f0 = drift(tau, zp);
            const Point2 pred{zp.xi + f0.xi * dt, zp.nu + f0.nu * dt + dw};
            const Point2 f1 = drift(tau + dt, pred);
            zp.xi += 0.5 * (f0.xi + f1.xi) * dt;
            zp.nu += 0.5 * (f0.nu + f1.nu) * dt + dw;
        }
        m1 += zp.xi;
        m2 += zp.nu;
        c11 += zp.xi * zp.xi;
        c12 += zp.xi * zp.nu;
        c22 += zp.nu * zp.nu;
    }
    m1 /= n_paths;
    m2 /= n_paths;
    c11 = c11 / n_paths - m1 * m1;
    c12 = c12 / n_paths - m1 * m2;
    c22 = c22 / n_paths - m2 * m2;

    CHECK(std::abs(m1 - g.mean().xi) < 4.0 * std::sqrt(g.cov().a11 / n_paths) + 5e-4);
    CHECK(std::abs(m2 - g.mean().nu) < 4.0 * std::sqrt(g.cov().a22 / n_paths) + 5e-4);
    CHECK(std::abs(c11 / g.cov().a11 - 1.0) < 0.01);
    CHECK(std::abs(c22 / g.cov().a22 - 1.0) < 0.01);
    CHECK(std::abs(c12 / g.cov().a12 - 1.0) < 0.01);
}

TEST_CASE("linearized kernel: analytic derivatives match central differences") {
    const auto spec = nontrivial_spec();
    const double t = 0.1, s = 0.8;
    const Point2 z = spec.frozen_trajectory(t);
    const auto g = kernels::linearized_gaussian(spec, t, z, s);
    const double h = 1e-4;
    for (const Point2 off : {Point2{0.3, 0.2}, Point2{-0.4, 0.5}, Point2{0.0, -0.6}}) {
        const Point2 p = g.mean() + off;
        const auto d = g.derivs(p);
        const double fd_nu = (g.density({p.xi, p.nu + h}) - g.density({p.xi, p.nu - h})) / (2 * h);
        const double fd_xi = (g.density({p.xi + h, p.nu}) - g.density({p.xi - h, p.nu})) / (2 * h);
        const double fd_nunu =
            (g.density({p.xi, p.nu + h}) - 2 * d.value + g.density({p.xi, p.nu - h})) / (h * h);
        CHECK(d.d_nu == Catch::Approx(fd_nu).epsilon(1e-4));
        CHECK(d.d_xi == Catch::Approx(fd_xi).epsilon(1e-4));
        CHECK(d.d_nunu == Catch::Approx(fd_nunu).epsilon(1e-3));
    }
}

TEST_CASE("linearized kernel: degenerate covariance is an error") {
    kernels::LinearizedKernelSpec spec;
    spec.t0 = 0.0;
    spec.z0 = {0.0, 0.0};
    spec.frozen_diffusion = [](double) { return 0.0; };
    spec.drift_k = [](double) { return 1.0; };
    spec.frozen_trajectory = [](double) { return Point2{0.0, 0.0}; };
    CHECK_THROWS_AS(kernels::linearized_kernel(spec, 0.0, {0.0, 0.0}, 0.5, {0.1, 0.1}),
                    SingularKernelError);
    CHECK_THROWS_AS(kernels::linearized_kernel(nontrivial_spec(), 0.5, {0.0, 0.0}, 0.5, {0.1, 0.1}),
                    std::domain_error);
}
