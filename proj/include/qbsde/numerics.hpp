#pragma once

// Small shared numerical utilities: root bracketing, interpolation, the
// tridiagonal (Thomas) solve used by the backward PDE scheme, a stable
// 64-bit mixer for RNG stream derivation, and a stable content hash for
// report traceability.

#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string_view>
#include <vector>

namespace qbsde::num {

// ===== root finding =====

struct RootResult {
    double x = 0.0;
    int iters = 0;
    bool converged = false;
};

// Bracketing bisection to the requested interval width, then a single Newton
// polish clamped back into the bracket. f must be continuous and change sign
// on [lo, hi]; df may be empty, in which case the polish step is skipped.
RootResult bisect_newton(const std::function<double(double)>& f,
                         const std::function<double(double)>& df,
                         double lo, double hi, double width_tol);

// ===== interpolation =====

// Piecewise-linear interpolation on a sorted abscissa table. Clamps to the
// end values outside the table.
double lerp_table(std::span<const double> xs, std::span<const double> ys, double x);

// Cubic Hermite interpolation on a uniform grid with supplied slopes.
// Accuracy O(h^4) when the slopes are exact derivatives.
double hermite_uniform(double x0, double dx, std::span<const double> ys,
                       std::span<const double> slopes, double x);

// Four-point (cubic Lagrange) interpolation on a uniform grid; used where no
// derivative data is available. Falls back to the boundary stencils near the
// table ends.
double cubic4_uniform(double x0, double dx, std::span<const double> ys, double x);

// ===== linear algebra =====

// Thomas algorithm for a tridiagonal system. Overwrites no inputs; returns x.
// diag/lower/upper are the main, sub and super diagonals (lower[0] and
// upper[n-1] are ignored). Throws std::runtime_error on a zero pivot.
std::vector<double> solve_tridiagonal(std::span<const double> lower,
                                      std::span<const double> diag,
                                      std::span<const double> upper,
                                      std::span<const double> rhs);

// ===== hashing / mixing =====

// splitmix64 step: a well-mixed 64-bit permutation, used to derive per-path
// RNG seeds so that stream assignment is independent of scheduling.
constexpr std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// FNV-1a over bytes; stable across platforms (std::hash is not).
std::uint64_t fnv1a(std::string_view bytes);

// ===== misc =====

inline bool approx(double a, double b, double tol) {
    double d = a - b;
    return (d < 0 ? -d : d) <= tol;
}

} // namespace qbsde::num
