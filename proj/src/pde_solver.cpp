#include "qbsde/pde_solver.hpp"

#include "qbsde/detail/binio.hpp"
#include "qbsde/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace qbsde::pde {

// ===== grids =====

SpatialGrid::SpatialGrid(double x_min_, double x_max_, int n_x_)
    : x_min(x_min_), x_max(x_max_), n_x(n_x_) {
    if (n_x < 3) throw std::invalid_argument("SpatialGrid: n_x must be >= 3");
    if (!(x_min < 0.0 && 0.0 < x_max))
        throw std::invalid_argument("SpatialGrid: domain must straddle the origin");
}

SpatialGrid SpatialGrid::default_for(double T, double x_center, int n_x) {
    double half = 6.0 * std::sqrt(T);
    return SpatialGrid(x_center - half, x_center + half, n_x);
}

// ===== value surface =====

double ValueSurface::sup_norm() const {
    double m = 0.0;
    for (double v : u) m = std::max(m, std::abs(v));
    return m;
}

void ValueSurface::save_csv(const std::filesystem::path& file) const {
    std::ofstream os(file, std::ios::trunc);
    if (!os) throw std::runtime_error("ValueSurface::save_csv: cannot open " + file.string());
    os.precision(17);
    os << "t,x,u,z\n";
    for (int k = 0; k <= time_grid.n_steps; ++k) {
        for (int j = 0; j < space_grid.n_x; ++j) {
            os << time_grid.nodes[static_cast<std::size_t>(k)] << ',' << space_grid.x(j)
               << ',' << at(k, j) << ',' << z_at(k, j) << '\n';
        }
    }
    if (!os) throw std::runtime_error("ValueSurface::save_csv: write failed");
}

void ValueSurface::save(const std::filesystem::path& file) const {
    detail::require_little_endian();
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("ValueSurface::save: cannot open " + file.string());
    os.write("QSRF", 4);
    detail::put_u32(os, 1u);
    detail::put_u32(os, static_cast<std::uint32_t>(space_grid.n_x));
    detail::put_u32(os, static_cast<std::uint32_t>(time_grid.n_steps));
    detail::put_u64(os, static_cast<std::uint64_t>(u.size()));
    detail::put_u64(os, 0u);
    detail::put_f64(os, time_grid.t0);
    detail::put_f64(os, time_grid.T);
    detail::put_f64(os, space_grid.x_min);
    detail::put_f64(os, space_grid.x_max);
    os.write(reinterpret_cast<const char*>(u.data()),
             static_cast<std::streamsize>(u.size() * sizeof(double)));
    os.write(reinterpret_cast<const char*>(z_surface.data()),
             static_cast<std::streamsize>(z_surface.size() * sizeof(double)));
    if (!os) throw std::runtime_error("ValueSurface::save: write failed");
}

ValueSurface ValueSurface::load(const std::filesystem::path& file) {
    detail::require_little_endian();
    std::ifstream is(file, std::ios::binary);
    if (!is) throw std::runtime_error("ValueSurface::load: cannot open " + file.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "QSRF", 4) != 0)
        throw std::runtime_error("ValueSurface::load: bad magic");
    if (detail::get_u32(is) != 1u)
        throw std::runtime_error("ValueSurface::load: unsupported version");
    std::uint32_t n_x = detail::get_u32(is);
    std::uint32_t n_steps = detail::get_u32(is);
    std::uint64_t count = detail::get_u64(is);
    (void)detail::get_u64(is); // reserved
    double t0 = detail::get_f64(is);
    double T = detail::get_f64(is);
    double x_min = detail::get_f64(is);
    double x_max = detail::get_f64(is);
    if (count != static_cast<std::uint64_t>(n_steps + 1) * n_x)
        throw std::runtime_error("ValueSurface::load: inconsistent header");
    ValueSurface vs{stoch::TimeGrid(t0, T, static_cast<int>(n_steps)),
                    SpatialGrid(x_min, x_max, static_cast<int>(n_x)),
                    {}, {}};
    vs.u.resize(count);
    vs.z_surface.resize(count);
    is.read(reinterpret_cast<char*>(vs.u.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    is.read(reinterpret_cast<char*>(vs.z_surface.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is) throw std::runtime_error("ValueSurface::load: truncated payload");
    return vs;
}

// ===== solver =====

namespace {

// Backward flow of the zero-z problem Y' = -g(t, Y, 0) from Y(T) = y_T,
// sampled on the time grid; this is the natural continuation of the payoff
// beyond the truncated domain. One RK4 step per grid step.
std::vector<double> boundary_extension(const GenFn& g, const stoch::TimeGrid& tg,
                                       double y_T) {
    std::vector<double> ext(static_cast<std::size_t>(tg.n_steps) + 1);
    ext[static_cast<std::size_t>(tg.n_steps)] = y_T;
    auto f = [&g](double t, double y) { return -g(t, y, 0.0); };
    double y = y_T;
    const double h = -tg.dt();
    for (int m = tg.n_steps - 1; m >= 0; --m) {
        double t = tg.nodes[static_cast<std::size_t>(m + 1)];
        double k1 = f(t, y);
        double k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
        double k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
        double k4 = f(t + h, y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        ext[static_cast<std::size_t>(m)] = y;
    }
    return ext;
}

bool all_finite(const std::vector<double>& v) {
    return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// One-sided second-order first derivative at the left/right table end.
double dx_left(const std::vector<double>& v, double dx) {
    return (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * dx);
}
double dx_right(const std::vector<double>& v, double dx) {
    std::size_t n = v.size();
    return (3.0 * v[n - 1] - 4.0 * v[n - 2] + v[n - 3]) / (2.0 * dx);
}

} // namespace

ValueSurface solve_markov(const GenFn& g, const PayoffFn& phi,
                          const stoch::TimeGrid& tg, const SpatialGrid& sg,
                          const SchemeParams& sp) {
    if (!(sp.theta >= 0.0 && sp.theta <= 1.0))
        throw std::invalid_argument("solve_markov: theta must lie in [0,1]");
    if (!(sp.nonlinear_tol > 0.0))
        throw std::invalid_argument("solve_markov: nonlinear_tol must be positive");
    if (sp.max_nonlinear_iters < 1)
        throw std::invalid_argument("solve_markov: max_nonlinear_iters must be >= 1");

    const int nx = sg.n_x;
    const int ns = tg.n_steps;
    const double dt = tg.dt();
    const double dx = sg.dx();
    const bool dirichlet = sp.boundary == BoundaryKind::Dirichlet;

    ValueSurface vs{tg, sg, {}, {}};
    vs.u.assign(static_cast<std::size_t>(ns + 1) * nx, 0.0);
    vs.z_surface.assign(vs.u.size(), 0.0);

    // terminal row, with the sampled boundedness check
    std::vector<double> uold(static_cast<std::size_t>(nx));
    for (int j = 0; j < nx; ++j) {
        double p = phi(sg.x(j));
        if (!std::isfinite(p) || std::abs(p) > sp.payoff_cap)
            throw std::invalid_argument("solve_markov: payoff exceeds the configured cap on the grid");
        uold[static_cast<std::size_t>(j)] = p;
        vs.u[static_cast<std::size_t>(ns) * nx + static_cast<std::size_t>(j)] = p;
    }

    std::vector<double> ext_lo = boundary_extension(g, tg, uold.front());
    std::vector<double> ext_hi = boundary_extension(g, tg, uold.back());
    const bool ext_finite = all_finite(ext_lo) && all_finite(ext_hi);
    if (dirichlet && !ext_finite)
        throw Blowup("solve_markov: boundary extension diverged");

    // time-independent implicit rows
    const double lam = sp.theta * dt / (2.0 * dx * dx);
    std::vector<double> lower(static_cast<std::size_t>(nx), -lam);
    std::vector<double> diag(static_cast<std::size_t>(nx), 1.0 + 2.0 * lam);
    std::vector<double> upper(static_cast<std::size_t>(nx), -lam);
    if (dirichlet) {
        diag.front() = diag.back() = 1.0;
        upper.front() = lower.back() = 0.0;
    } else {
        // mirror node: u_{-1} = u_1, so the boundary row couples twice as hard
        upper.front() = -2.0 * lam;
        lower.back() = -2.0 * lam;
    }

    auto apply_L = [&](const std::vector<double>& v, std::vector<double>& Lv) {
        const double c = 1.0 / (2.0 * dx * dx);
        for (int j = 1; j + 1 < nx; ++j) {
            std::size_t i = static_cast<std::size_t>(j);
            Lv[i] = c * (v[i - 1] - 2.0 * v[i] + v[i + 1]);
        }
        if (dirichlet) {
            Lv.front() = Lv.back() = 0.0;
        } else {
            Lv.front() = 2.0 * c * (v[1] - v[0]);
            Lv.back() = 2.0 * c * (v[static_cast<std::size_t>(nx) - 2] - v[static_cast<std::size_t>(nx) - 1]);
        }
    };

    std::vector<double> Luold(static_cast<std::size_t>(nx));
    std::vector<double> v(static_cast<std::size_t>(nx));
    std::vector<double> ubar(static_cast<std::size_t>(nx));
    std::vector<double> rhs(static_cast<std::size_t>(nx));

    for (int m = ns - 1; m >= 0; --m) {
        const double t_new = tg.nodes[static_cast<std::size_t>(m)];
        const double t_old = tg.nodes[static_cast<std::size_t>(m + 1)];
        const double tmid = 0.5 * (t_new + t_old);
        apply_L(uold, Luold);
        v = uold;
        bool converged = false;
        double delta = 0.0;
        for (int it = 0; it < sp.max_nonlinear_iters; ++it) {
            for (int j = 0; j < nx; ++j) {
                std::size_t i = static_cast<std::size_t>(j);
                ubar[i] = 0.5 * (v[i] + uold[i]);
            }
            for (int j = 0; j < nx; ++j) {
                std::size_t i = static_cast<std::size_t>(j);
                if (dirichlet && (j == 0 || j == nx - 1)) {
                    rhs[i] = (j == 0 ? ext_lo : ext_hi)[static_cast<std::size_t>(m)];
                    continue;
                }
                double zb;
                if (j == 0)
                    zb = dirichlet ? dx_left(ubar, dx) : 0.0;
                else if (j == nx - 1)
                    zb = dirichlet ? dx_right(ubar, dx) : 0.0;
                else
                    zb = (ubar[i + 1] - ubar[i - 1]) / (2.0 * dx);
                rhs[i] = uold[i] + dt * (1.0 - sp.theta) * Luold[i]
                         + dt * g(tmid, ubar[i], zb);
            }
            std::vector<double> vnew = num::solve_tridiagonal(lower, diag, upper, rhs);
            if (!all_finite(vnew))
                throw Blowup("solve_markov: non-finite value at step " + std::to_string(m));
            delta = 0.0;
            for (int j = 0; j < nx; ++j)
                delta = std::max(delta, std::abs(vnew[static_cast<std::size_t>(j)] - v[static_cast<std::size_t>(j)]));
            v = std::move(vnew);
            if (delta <= sp.nonlinear_tol) {
                converged = true;
                break;
            }
        }
        if (!converged) {
            std::ostringstream msg;
            msg << "solve_markov: fixed-point sweeps did not converge at step " << m
                << " (last delta " << delta << ")";
            throw NonConvergence(msg.str());
        }
        std::copy(v.begin(), v.end(), vs.u.begin() + static_cast<std::ptrdiff_t>(m) * nx);
        uold = v;
    }

    // z export: central differences inside, one-sided at the two columns
    for (int k = 0; k <= ns; ++k) {
        const double* row = vs.u.data() + static_cast<std::size_t>(k) * nx;
        double* zrow = vs.z_surface.data() + static_cast<std::size_t>(k) * nx;
        for (int j = 1; j + 1 < nx; ++j)
            zrow[j] = (row[j + 1] - row[j - 1]) / (2.0 * dx);
        zrow[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dx);
        zrow[nx - 1] = (3.0 * row[nx - 1] - 4.0 * row[nx - 2] + row[nx - 3]) / (2.0 * dx);
    }

    // boundary-influence detector: if the solved value at a boundary has been
    // pulled visibly away from the free-space continuation of the payoff, the
    // truncation is contaminating the domain. (Vacuous under Dirichlet, where
    // the rows are pinned to the continuation; skipped if the continuation
    // itself is not finite, in which case there is nothing to compare.)
    if (ext_finite) {
        double d_lo = std::abs(vs.u.front() - ext_lo.front());
        double d_hi = std::abs(vs.u[static_cast<std::size_t>(nx) - 1] - ext_hi.front());
        if (std::max(d_lo, d_hi) > sp.domain_threshold) {
            std::ostringstream msg;
            msg << "solve_markov: boundary influence " << std::max(d_lo, d_hi)
                << " exceeds threshold " << sp.domain_threshold << " at t0";
            throw DomainTooSmall(msg.str());
        }
    }
    return vs;
}

double g_expectation(const ValueSurface& vs, double t, double x) {
    if (!vs.time_grid.is_node(t))
        throw OutOfDomain("g_expectation: t is not a time-grid node");
    int k = vs.time_grid.index_of(t);
    const SpatialGrid& sg = vs.space_grid;
    if (!(x >= sg.x_min - 1e-12 && x <= sg.x_max + 1e-12))
        throw OutOfDomain("g_expectation: x outside the spatial domain");
    double s = (x - sg.x_min) / sg.dx();
    int j = static_cast<int>(std::floor(s));
    j = std::clamp(j, 0, sg.n_x - 2);
    double frac = s - j;
    if (frac < 1e-12) return vs.at(k, j);
    if (frac > 1.0 - 1e-12) return vs.at(k, j + 1);
    return (1.0 - frac) * vs.at(k, j) + frac * vs.at(k, j + 1);
}

double two_stage_value(const GenFn& g, const PayoffFn& phi, double t_split,
                       TwoStageMode mode, const stoch::TimeGrid& tg,
                       const SpatialGrid& sg, const SchemeParams& sp) {
    int ksplit = tg.index_of(t_split); // throws if t_split is off-grid
    if (ksplit <= 0 || ksplit >= tg.n_steps)
        throw std::invalid_argument("two_stage_value: t_split must be an interior grid node");

    // The reduction to sub-interval solves requires that constants ride
    // through untouched, i.e. g(t, y, 0) = 0. Sampled audit over grid nodes,
    // step midpoints (where the scheme evaluates g), and a spread of y.
    double b = 1.0;
    for (int j = 0; j < sg.n_x; ++j) b = std::max(b, std::abs(phi(sg.x(j))));
    b = 2.0 * b + 1.0;
    for (int m = 0; m <= 2 * tg.n_steps; ++m) {
        double t = tg.t0 + 0.5 * m * tg.dt();
        for (int i = 0; i <= 40; ++i) {
            double y = -b + 2.0 * b * i / 40.0;
            if (std::abs(g(t, y, 0.0)) > 1e-12 * std::max(1.0, std::abs(y)))
                throw std::invalid_argument("two_stage_value: generator fails the g(t,y,0)=0 audit");
        }
    }

    if (mode == TwoStageMode::EarlyPayoff) {
        stoch::TimeGrid sub(tg.t0, t_split, ksplit);
        ValueSurface vs = solve_markov(g, phi, sub, sg, sp);
        return g_expectation(vs, tg.t0, 0.0);
    }
    // IncrementPayoff: the increment restarts at zero, so solve on the tail
    // interval from state 0; the resulting deterministic value rides back to
    // t0 unchanged.
    stoch::TimeGrid sub(t_split, tg.T, tg.n_steps - ksplit);
    ValueSurface vs = solve_markov(g, phi, sub, sg, sp);
    return g_expectation(vs, t_split, 0.0);
}

} // namespace qbsde::pde
