#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "kinfilt/common.hpp"

namespace kinfilt {

/// Uniform time grid on [t0, t1].
struct TimeGrid {
    double t0 = 0.0;
    double t1 = 1.0;
    int n_steps = 1;

    TimeGrid() = default;
    TimeGrid(double start, double end, int steps) : t0(start), t1(end), n_steps(steps) {
        if (!(t0 < t1)) throw std::invalid_argument("TimeGrid: t0 < t1 required");
        if (n_steps < 1) throw std::invalid_argument("TimeGrid: n_steps >= 1 required");
    }

    double dt() const { return (t1 - t0) / n_steps; }
    double time(int k) const { return t0 + dt() * k; }
};

struct Axis {
    double lo = -1.0;
    double hi = 1.0;
    int n = 2;  // number of nodes

    Axis() = default;
    Axis(double a, double b, int nodes) : lo(a), hi(b), n(nodes) {
        if (!(lo < hi) || n < 2) throw std::invalid_argument("Axis: lo < hi and n >= 2 required");
    }

    double h() const { return (hi - lo) / (n - 1); }
    double coord(int i) const { return lo + h() * i; }
    bool contains(double x) const { return x >= lo && x <= hi; }
};

/// Rectangular (xi, nu) phase-space lattice.
struct Lattice2 {
    Axis xi;
    Axis nu;

    Lattice2() = default;
    Lattice2(Axis x, Axis v) : xi(x), nu(v) {}

    std::size_t size() const { return static_cast<std::size_t>(xi.n) * nu.n; }
    std::size_t index(int i, int j) const { return static_cast<std::size_t>(i) * nu.n + j; }
    Point2 point(int i, int j) const { return {xi.coord(i), nu.coord(j)}; }
    double cell_area() const { return xi.h() * nu.h(); }
};

/// Scalar field sampled on a Lattice2.
struct Field2 {
    Lattice2 lattice;
    std::vector<double> values;

    Field2() = default;
    explicit Field2(const Lattice2& l, double fill = 0.0) : lattice(l), values(l.size(), fill) {}

    double& at(int i, int j) { return values[lattice.index(i, j)]; }
    double at(int i, int j) const { return values[lattice.index(i, j)]; }
};

namespace interp {

/// Catmull-Rom weights for the fractional offset u in [0,1].
inline void cubic_weights(double u, double w[4]) {
    const double u2 = u * u, u3 = u2 * u;
    w[0] = -0.5 * u3 + u2 - 0.5 * u;
    w[1] = 1.5 * u3 - 2.5 * u2 + 1.0;
    w[2] = -1.5 * u3 + 2.0 * u2 + 0.5 * u;
    w[3] = 0.5 * u3 - 0.5 * u2;
}

/// 1-D cubic interpolation of samples f(axis.coord(i)), clamped stencil at the
/// ends. `stride` walks the flattened array along the axis.
inline double cubic_axis(const double* f, const Axis& ax, std::ptrdiff_t stride, double x) {
    double p = (x - ax.lo) / ax.h();
    if (p <= 0.0) return f[0];
    if (p >= ax.n - 1) return f[stride * (ax.n - 1)];
    int i = static_cast<int>(std::floor(p));
    if (i > ax.n - 2) i = ax.n - 2;
    const double u = p - i;
    int i0 = i - 1, i3 = i + 2;
    if (i0 < 0) i0 = 0;
    if (i3 > ax.n - 1) i3 = ax.n - 1;
    double w[4];
    cubic_weights(u, w);
    return w[0] * f[stride * i0] + w[1] * f[stride * i] + w[2] * f[stride * (i + 1)] +
           w[3] * f[stride * i3];
}

inline double linear_axis(const double* f, const Axis& ax, std::ptrdiff_t stride, double x) {
    double p = (x - ax.lo) / ax.h();
    if (p <= 0.0) return f[0];
    if (p >= ax.n - 1) return f[stride * (ax.n - 1)];
    const int i = static_cast<int>(std::floor(p));
    const double u = p - i;
    return (1.0 - u) * f[stride * i] + u * f[stride * (i + 1)];
}

/// Lattice interpolation on a raw slice: cubic in nu, linear in xi.
inline double cubic_nu_linear_xi(const double* data, const Lattice2& lat, double xi, double nu) {
    const Axis& ax = lat.xi;
    const Axis& av = lat.nu;
    double p = (xi - ax.lo) / ax.h();
    if (p < 0.0) p = 0.0;
    if (p > ax.n - 1) p = ax.n - 1;
    int i = static_cast<int>(std::floor(p));
    if (i > ax.n - 2) i = ax.n - 2;
    const double u = p - i;
    const double* col0 = data + lat.index(i, 0);
    const double* col1 = data + lat.index(i + 1, 0);
    const double g0 = cubic_axis(col0, av, 1, nu);
    const double g1 = cubic_axis(col1, av, 1, nu);
    return (1.0 - u) * g0 + u * g1;
}

inline double cubic_nu_linear_xi(const Field2& f, double xi, double nu) {
    return cubic_nu_linear_xi(f.values.data(), f.lattice, xi, nu);
}

}  // namespace interp

}  // namespace kinfilt
