#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinfilt/common.hpp"

namespace kinfilt::model {

using CoefFn = std::function<double(double, double, double, double)>;  // (t, x, v, y)

/// Named-preset coefficient functions for the canonical system
///   dX = V dt,  dV = b dt + sigma^1 dW^1 + sigma_hat^i dW^i,
///   dY = h dt + theta dW^1,
/// with analytic spatial derivatives of sigma^1, h and b (the flow and the
/// coefficient transform consume them), plus assumption metadata.
struct CoefficientSet {
    std::string preset_id;
    std::vector<double> params;
    int n_brownian = 2;  // n >= 2; sigma_hat has n-1 components

    CoefFn b;
    CoefFn sigma1;
    CoefFn h;
    std::function<double(double, double)> theta;  // (t, y)
    std::function<void(double, double, double, double, std::span<double>)> sigma_hat;

    // analytic partials
    CoefFn sigma1_x, sigma1_v, sigma1_xx, sigma1_xv, sigma1_vv;
    CoefFn h_x, h_v, h_vv;
    CoefFn b_v;

    double m = 0.0;            // coercivity constant (Assumption A1bis)
    double holder_alpha = 0.5; // regularity tag, metadata only
    double flatten_eps = 0.5;  // Assumption A3 epsilon
    double flatten_M = 10.0;   // Assumption A3 bound

    double sigma_hat_sq(double t, double x, double v, double y) const {
        double buf[8];
        std::span<double> s(buf, static_cast<std::size_t>(n_brownian - 1));
        sigma_hat(t, x, v, y, s);
        double acc = 0.0;
        for (double c : s) acc += c * c;
        return acc;
    }

    /// |sigma|^2 = (sigma^1)^2 + |sigma_hat|^2
    double sigma_sq(double t, double x, double v, double y) const {
        const double s1 = sigma1(t, x, v, y);
        return s1 * s1 + sigma_hat_sq(t, x, v, y);
    }
};

/// h / theta; the division guard protects against misconfigured presets.
inline double tilde_h(const CoefficientSet& c, double t, double x, double v, double y) {
    const double th = c.theta(t, y);
    if (std::abs(th) < 1e-12) throw std::domain_error("tilde_h: |theta| below division guard");
    return c.h(t, x, v, y) / th;
}

/// Cartesian sample grid used by the assumption checks.
struct SampleGrid {
    std::vector<double> ts{0.0};
    std::vector<double> xs;
    std::vector<double> vs;
    std::vector<double> ys{0.0};

    static SampleGrid default_grid() {
        SampleGrid g;
        for (int i = 0; i <= 4; ++i) g.ts.push_back(0.25 * i);
        for (int i = -8; i <= 8; ++i) {
            g.xs.push_back(1.5 * i);
            g.vs.push_back(1.5 * i);
        }
        for (int i = -3; i <= 3; ++i) g.ys.push_back(i);
        g.ts.erase(g.ts.begin());  // drop duplicate 0
        g.ts.insert(g.ts.begin(), 0.0);
        return g;
    }
};

struct CoercivityReport {
    bool pass = false;
    double theta_margin = 0.0;      // min over grid of theta^2 - m
    double sigma_hat_margin = 0.0;  // min over grid of |sigma_hat|^2 - m
};

/// Assumption A1bis: theta^2 >= m and |sigma_hat|^2 >= m on the sampled grid.
inline CoercivityReport check_coercivity(const CoefficientSet& c, const SampleGrid& grid) {
    if (grid.ts.empty() || grid.xs.empty() || grid.vs.empty() || grid.ys.empty())
        throw std::invalid_argument("check_coercivity: empty sample grid");
    CoercivityReport r;
    r.theta_margin = 1e300;
    r.sigma_hat_margin = 1e300;
    for (double t : grid.ts)
        for (double y : grid.ys) {
            const double th = c.theta(t, y);
            r.theta_margin = std::min(r.theta_margin, th * th - c.m);
            for (double x : grid.xs)
                for (double v : grid.vs)
                    r.sigma_hat_margin =
                        std::min(r.sigma_hat_margin, c.sigma_hat_sq(t, x, v, y) - c.m);
        }
    r.pass = r.theta_margin >= 0.0 && r.sigma_hat_margin >= 0.0;
    return r;
}

struct FlatteningReport {
    bool pass = false;
    double worst = 0.0;  // sup over grid of the weighted derivative magnitudes
};

/// Assumption A3 surrogate: finite-difference weighted gradients
///   (1+|w|^2)^eps |d sigma1|, (1+|w|^2)^{1/2+eps} |d^2, d^3 sigma1|,
///   (1+|w|^2)^{1/2} |d h|
/// checked against flatten_M over a grid spanning increasing radii. The
/// steps grow with the derivative order to stay above cancellation noise.
inline FlatteningReport check_flattening(const CoefficientSet& c, const SampleGrid& grid) {
    FlatteningReport r;
    const double fd1 = 1e-5, fd2 = 1e-3, fd3 = 1e-2;
    auto d1 = [&](const CoefFn& f, double t, double x, double v, double y, bool in_x) {
        return in_x ? (f(t, x + fd1, v, y) - f(t, x - fd1, v, y)) / (2 * fd1)
                    : (f(t, x, v + fd1, y) - f(t, x, v - fd1, y)) / (2 * fd1);
    };
    auto d2 = [&](const CoefFn& f, double t, double x, double v, double y, bool in_x) {
        return in_x
                   ? (f(t, x + fd2, v, y) - 2 * f(t, x, v, y) + f(t, x - fd2, v, y)) / (fd2 * fd2)
                   : (f(t, x, v + fd2, y) - 2 * f(t, x, v, y) + f(t, x, v - fd2, y)) / (fd2 * fd2);
    };
    auto d3 = [&](const CoefFn& f, double t, double x, double v, double y, bool in_x) {
        const double h2 = 2 * fd3;
        return in_x ? (f(t, x + h2, v, y) - 2 * f(t, x + fd3, v, y) + 2 * f(t, x - fd3, v, y) -
                       f(t, x - h2, v, y)) /
                          (2 * fd3 * fd3 * fd3)
                    : (f(t, x, v + h2, y) - 2 * f(t, x, v + fd3, y) + 2 * f(t, x, v - fd3, y) -
                       f(t, x, v - h2, y)) /
                          (2 * fd3 * fd3 * fd3);
    };
    for (double t : grid.ts)
        for (double y : grid.ys)
            for (double x : grid.xs)
                for (double v : grid.vs) {
                    const double w2 = 1.0 + x * x + v * v;
                    for (bool in_x : {true, false}) {
                        double m1 = std::pow(w2, c.flatten_eps) * std::abs(d1(c.sigma1, t, x, v, y, in_x));
                        double m2 = std::pow(w2, 0.5 + c.flatten_eps) *
                                    std::abs(d2(c.sigma1, t, x, v, y, in_x));
                        double m3 = std::pow(w2, 0.5 + c.flatten_eps) *
                                    std::abs(d3(c.sigma1, t, x, v, y, in_x));
                        double mh = std::pow(w2, 0.5) * std::abs(d1(c.h, t, x, v, y, in_x));
                        r.worst = std::max({r.worst, m1, m2, m3, mh});
                    }
                }
    r.pass = r.worst <= c.flatten_M;
    return r;
}

/// Bounded observable on phase space (optionally depending on y as well).
struct ObservableFn {
    std::string id;
    std::function<double(double, double)> phi;                  // (xi, nu)
    std::function<double(double, double, double)> phi_y;        // (xi, nu, eta), optional
    double bound = 1.0;

    double operator()(double xi, double nu) const { return phi(xi, nu); }
    double eval_y(double xi, double nu, double eta) const {
        return phi_y ? phi_y(xi, nu, eta) : phi(xi, nu);
    }
};

namespace detail {
inline CoefFn constant_fn(double v) {
    return [v](double, double, double, double) { return v; };
}
}  // namespace detail

/// Registry of shipped presets.
///   constant      params {b0, s1, shat, theta0, h0}
///   sinusoidal    params {b0, s0, s1, shat, theta0, h0}
///   langevin-pure params {shat, theta0}
///   vsine         params {b0, s0, s1, shat, theta0, h0}   (v-dependent sigma1/h)
inline CoefficientSet make_preset(const std::string& id, std::vector<double> params = {}) {
    using detail::constant_fn;
    CoefficientSet c;
    c.preset_id = id;
    c.n_brownian = 2;
    auto zero = constant_fn(0.0);
    c.sigma1_x = c.sigma1_v = c.sigma1_xx = c.sigma1_xv = c.sigma1_vv = zero;
    c.h_x = c.h_v = c.h_vv = zero;
    c.b_v = zero;

    if (id == "constant") {
        if (params.empty()) params = {0.1, 0.4, 0.7, 1.0, 0.25};
        const double b0 = params[0], s1 = params[1], sh = params[2], th = params[3], h0 = params[4];
        c.b = constant_fn(b0);
        c.sigma1 = constant_fn(s1);
        c.h = constant_fn(h0);
        c.theta = [th](double, double) { return th; };
        c.sigma_hat = [sh](double, double, double, double, std::span<double> out) { out[0] = sh; };
        c.m = 0.9 * std::min(th * th, sh * sh);
        c.holder_alpha = 0.6;
        c.flatten_M = 1.0;
    } else if (id == "langevin-pure") {
        if (params.empty()) params = {1.0, 1.0};
        const double sh = params[0], th = params[1];
        c.b = zero;
        c.sigma1 = zero;
        c.h = zero;
        c.theta = [th](double, double) { return th; };
        c.sigma_hat = [sh](double, double, double, double, std::span<double> out) { out[0] = sh; };
        c.m = 0.9 * std::min(th * th, sh * sh);
        c.holder_alpha = 0.6;
        c.flatten_M = 1.0;
    } else if (id == "sinusoidal") {
        if (params.empty()) params = {0.4, 0.35, 0.2, 0.6, 1.0, 0.3};
        const double b0 = params[0], s0 = params[1], s1 = params[2], sh = params[3],
                     th = params[4], h0 = params[5];
        c.b = [b0](double, double, double v, double) { return b0 * std::sin(v); };
        c.b_v = [b0](double, double, double v, double) { return b0 * std::cos(v); };
        // sigma1(x) = s0 + s1 sin(x)/(1+x^2): gradients flatten at infinity
        auto g = [](double x) { return std::sin(x) / (1.0 + x * x); };
        auto gp = [](double x) {
            const double d = 1.0 + x * x;
            return std::cos(x) / d - 2.0 * x * std::sin(x) / (d * d);
        };
        auto gpp = [](double x) {
            const double d = 1.0 + x * x;
            return -std::sin(x) / d - 4.0 * x * std::cos(x) / (d * d) +
                   (8.0 * x * x - 2.0 * d) * std::sin(x) / (d * d * d);
        };
        c.sigma1 = [s0, s1, g](double, double x, double, double) { return s0 + s1 * g(x); };
        c.sigma1_x = [s1, gp](double, double x, double, double) { return s1 * gp(x); };
        c.sigma1_xx = [s1, gpp](double, double x, double, double) { return s1 * gpp(x); };
        c.h = [h0](double, double x, double, double) { return h0 * std::tanh(x); };
        c.h_x = [h0](double, double x, double, double) {
            const double t = std::tanh(x);
            return h0 * (1.0 - t * t);
        };
        c.theta = [th](double, double) { return th; };
        c.sigma_hat = [sh](double, double, double, double, std::span<double> out) { out[0] = sh; };
        c.m = 0.8 * std::min(th * th, sh * sh);
        c.holder_alpha = 0.95;
        c.flatten_M = 256.0;
    } else if (id == "vsine") {
        if (params.empty()) params = {0.3, 0.3, 0.15, 0.6, 1.0, 0.25};
        const double b0 = params[0], s0 = params[1], s1 = params[2], sh = params[3],
                     th = params[4], h0 = params[5];
        c.b = [b0](double, double, double v, double) { return b0 * std::sin(v); };
        c.b_v = [b0](double, double, double v, double) { return b0 * std::cos(v); };
        auto g = [](double v) { return std::sin(v) / (1.0 + v * v); };
        auto gp = [](double v) {
            const double d = 1.0 + v * v;
            return std::cos(v) / d - 2.0 * v * std::sin(v) / (d * d);
        };
        auto gpp = [](double v) {
            const double d = 1.0 + v * v;
            return -std::sin(v) / d - 4.0 * v * std::cos(v) / (d * d) +
                   (8.0 * v * v - 2.0 * d) * std::sin(v) / (d * d * d);
        };
        c.sigma1 = [s0, s1, g](double, double, double v, double) { return s0 + s1 * g(v); };
        c.sigma1_v = [s1, gp](double, double, double v, double) { return s1 * gp(v); };
        c.sigma1_vv = [s1, gpp](double, double, double v, double) { return s1 * gpp(v); };
        c.h = [h0](double, double, double v, double) { return h0 * std::tanh(v); };
        c.h_v = [h0](double, double, double v, double) {
            const double t = std::tanh(v);
            return h0 * (1.0 - t * t);
        };
        c.h_vv = [h0](double, double, double v, double) {
            const double t = std::tanh(v);
            return -2.0 * h0 * t * (1.0 - t * t);
        };
        c.theta = [th](double, double) { return th; };
        c.sigma_hat = [sh](double, double, double, double, std::span<double> out) { out[0] = sh; };
        c.m = 0.8 * std::min(th * th, sh * sh);
        c.holder_alpha = 0.9;
        c.flatten_M = 256.0;
    } else {
        throw std::invalid_argument("make_preset: unknown preset id '" + id + "'");
    }
    c.params = std::move(params);
    return c;
}

inline std::vector<std::string> shipped_presets() {
    return {"constant", "sinusoidal", "langevin-pure", "vsine"};
}

/// Observable registry. Bounds are sup-norm estimates over the default
/// phase-space box (|nu| is unbounded on R^2; the lattice restriction bounds it).
inline ObservableFn make_observable(const std::string& id, double box_radius = 8.0) {
    ObservableFn o;
    o.id = id;
    if (id == "one") {
        o.phi = [](double, double) { return 1.0; };
        o.bound = 1.0;
    } else if (id == "v") {
        o.phi = [](double, double nu) { return nu; };
        o.bound = box_radius;
    } else if (id == "tanh_xi") {
        o.phi = [](double xi, double) { return std::tanh(xi); };
        o.bound = 1.0;
    } else if (id == "xi") {
        o.phi = [](double xi, double) { return xi; };
        o.bound = box_radius;
    } else {
        throw std::invalid_argument("make_observable: unknown observable id '" + id + "'");
    }
    return o;
}

}  // namespace kinfilt::model
