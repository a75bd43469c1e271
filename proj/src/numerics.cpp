#include "qbsde/numerics.hpp"

#include <algorithm>
#include <cmath>

namespace qbsde::num {

RootResult bisect_newton(const std::function<double(double)>& f,
                         const std::function<double(double)>& df,
                         double lo, double hi, double width_tol) {
    RootResult r;
    double flo = f(lo), fhi = f(hi);
    if (flo == 0.0) { r.x = lo; r.converged = true; return r; }
    if (fhi == 0.0) { r.x = hi; r.converged = true; return r; }
    if (flo * fhi > 0.0)
        throw std::runtime_error("bisect_newton: no sign change on bracket");
    while (hi - lo > width_tol && r.iters < 200) {
        double mid = 0.5 * (lo + hi);
        double fm = f(mid);
        ++r.iters;
        if (fm == 0.0) { lo = hi = mid; break; }
        if (flo * fm < 0.0) { hi = mid; fhi = fm; } else { lo = mid; flo = fm; }
    }
    double x = 0.5 * (lo + hi);
    if (df) {
        double d = df(x);
        if (std::isfinite(d) && d != 0.0) {
            double step = f(x) / d;
            double cand = x - step;
            if (cand >= lo - width_tol && cand <= hi + width_tol) x = cand;
        }
    }
    r.x = x;
    r.converged = true;
    return r;
}

double lerp_table(std::span<const double> xs, std::span<const double> ys, double x) {
    if (xs.size() != ys.size() || xs.empty())
        throw std::invalid_argument("lerp_table: bad table");
    if (x <= xs.front()) return ys.front();
    if (x >= xs.back()) return ys.back();
    auto it = std::upper_bound(xs.begin(), xs.end(), x);
    std::size_t j = static_cast<std::size_t>(it - xs.begin());
    double w = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
    return (1.0 - w) * ys[j - 1] + w * ys[j];
}

double hermite_uniform(double x0, double dx, std::span<const double> ys,
                       std::span<const double> slopes, double x) {
    if (ys.size() < 2 || slopes.size() != ys.size())
        throw std::invalid_argument("hermite_uniform: bad table");
    std::size_t n = ys.size();
    double s = (x - x0) / dx;
    std::size_t j = 0;
    if (s > 0) j = std::min<std::size_t>(static_cast<std::size_t>(s), n - 2);
    double t = s - static_cast<double>(j);
    t = std::clamp(t, -1.0, 2.0); // mild extrapolation only
    double h00 = (1 + 2 * t) * (1 - t) * (1 - t);
    double h10 = t * (1 - t) * (1 - t);
    double h01 = t * t * (3 - 2 * t);
    double h11 = t * t * (t - 1);
    return h00 * ys[j] + h10 * dx * slopes[j] + h01 * ys[j + 1] + h11 * dx * slopes[j + 1];
}

double cubic4_uniform(double x0, double dx, std::span<const double> ys, double x) {
    std::size_t n = ys.size();
    if (n < 2) throw std::invalid_argument("cubic4_uniform: bad table");
    if (n < 4) {
        // tiny table: fall back to linear
        std::vector<double> xs(n);
        for (std::size_t i = 0; i < n; ++i) xs[i] = x0 + dx * static_cast<double>(i);
        return lerp_table(xs, ys, x);
    }
    double s = (x - x0) / dx;
    long j = static_cast<long>(std::floor(s));
    j = std::clamp<long>(j, 1, static_cast<long>(n) - 3);
    double t = s - static_cast<double>(j);
    const double ym = ys[static_cast<std::size_t>(j - 1)];
    const double y0 = ys[static_cast<std::size_t>(j)];
    const double y1 = ys[static_cast<std::size_t>(j + 1)];
    const double y2 = ys[static_cast<std::size_t>(j + 2)];
    // cubic Lagrange through the four surrounding nodes, local coordinate t in [0,1]
    double a = -t * (t - 1) * (t - 2) / 6.0;
    double b = (t + 1) * (t - 1) * (t - 2) / 2.0;
    double c = -(t + 1) * t * (t - 2) / 2.0;
    double d = (t + 1) * t * (t - 1) / 6.0;
    return a * ym + b * y0 + c * y1 + d * y2;
}

std::vector<double> solve_tridiagonal(std::span<const double> lower,
                                      std::span<const double> diag,
                                      std::span<const double> upper,
                                      std::span<const double> rhs) {
    std::size_t n = diag.size();
    if (lower.size() != n || upper.size() != n || rhs.size() != n || n == 0)
        throw std::invalid_argument("solve_tridiagonal: inconsistent sizes");
    std::vector<double> c(n), d(n), x(n);
    double piv = diag[0];
    if (piv == 0.0) throw std::runtime_error("solve_tridiagonal: zero pivot");
    c[0] = upper[0] / piv;
    d[0] = rhs[0] / piv;
    for (std::size_t i = 1; i < n; ++i) {
        piv = diag[i] - lower[i] * c[i - 1];
        if (piv == 0.0) throw std::runtime_error("solve_tridiagonal: zero pivot");
        c[i] = upper[i] / piv;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / piv;
    }
    x[n - 1] = d[n - 1];
    for (std::size_t i = n - 1; i-- > 0;)
        x[i] = d[i] - c[i] * x[i + 1];
    return x;
}

std::uint64_t fnv1a(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace qbsde::num
