#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace kinfilt {

struct Point2 {
    double xi = 0.0;
    double nu = 0.0;

    Point2() = default;
    Point2(double x, double v) : xi(x), nu(v) {}

    Point2 operator+(const Point2& o) const { return {xi + o.xi, nu + o.nu}; }
    Point2 operator-(const Point2& o) const { return {xi - o.xi, nu - o.nu}; }
    Point2 operator*(double c) const { return {xi * c, nu * c}; }
};

/// Symmetric 2x2 matrix (covariances, precisions).
struct Sym2 {
    double a11 = 0.0, a12 = 0.0, a22 = 0.0;

    double det() const { return a11 * a22 - a12 * a12; }

    Sym2 inverse() const {
        const double d = det();
        if (std::abs(d) < 1e-300)
            throw std::runtime_error("Sym2: singular matrix");
        return {a22 / d, -a12 / d, a11 / d};
    }

    Point2 apply(const Point2& p) const {
        return {a11 * p.xi + a12 * p.nu, a12 * p.xi + a22 * p.nu};
    }

    Sym2 operator+(const Sym2& o) const { return {a11 + o.a11, a12 + o.a12, a22 + o.a22}; }
    Sym2 operator*(double c) const { return {a11 * c, a12 * c, a22 * c}; }

    // Lower Cholesky factor [[l11,0],[l21,l22]]; requires positive definiteness.
    std::array<double, 3> chol() const {
        if (a11 <= 0.0)
            throw std::runtime_error("Sym2: not positive definite");
        const double l11 = std::sqrt(a11);
        const double l21 = a12 / l11;
        const double s = a22 - l21 * l21;
        if (s <= 0.0)
            throw std::runtime_error("Sym2: not positive definite");
        return {l11, l21, std::sqrt(s)};
    }
};

inline double dot(const Point2& a, const Point2& b) { return a.xi * b.xi + a.nu * b.nu; }

/// Raised when a Gaussian kernel's covariance degenerates (det below tolerance).
class SingularKernelError : public std::runtime_error {
public:
    explicit SingularKernelError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when an explicit step would violate its stability bound.
class StabilityError : public std::runtime_error {
public:
    explicit StabilityError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when a density's total mass degenerates.
class DegenerateDensityError : public std::runtime_error {
public:
    explicit DegenerateDensityError(const std::string& what) : std::runtime_error(what) {}
};

/// Raised when a requested point lies outside a lattice's image or extent.
class OutOfRangeError : public std::runtime_error {
public:
    explicit OutOfRangeError(const std::string& what) : std::runtime_error(what) {}
};

/// Chunked parallel map over [0, n). Runs inline when threads <= 1.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    if (threads <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    const std::size_t nt = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(nt);
    for (std::size_t w = 0; w < nt; ++w) {
        pool.emplace_back([=, &fn] {
            for (std::size_t i = w; i < n; i += nt) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

/// FNV-1a 64-bit content hash for artifact manifests.
inline std::uint64_t content_hash(const std::string& data) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : data) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace kinfilt
