#include "qbsde/transforms.hpp"

#include "qbsde/numerics.hpp"

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

namespace qbsde::transforms {

namespace {

// Cubic Hermite on one interval of width h, local coordinate s in [0, 1].
double hermite01(double a, double b, double da, double db, double h, double s) {
    double s2 = s * s, s3 = s2 * s;
    return (2.0 * s3 - 3.0 * s2 + 1.0) * a + (s3 - 2.0 * s2 + s) * h * da
         + (-2.0 * s3 + 3.0 * s2) * b + (s3 - s2) * h * db;
}

// Adaptive rule for the one long anchor integral; keep it out of any inner
// loop, nesting adaptive quadratures is ruinously slow.
double signed_integral(const std::function<double(double)>& f, double a, double b) {
    using boost::math::quadrature::gauss_kronrod;
    if (a == b) return 0.0;
    if (a < b) return gauss_kronrod<double, 15>::integrate(f, a, b, 12, 1e-13);
    return -gauss_kronrod<double, 15>::integrate(f, b, a, 12, 1e-13);
}

// Fixed 7-point Gauss rule, exact to machine precision on the short table
// intervals that dominate the psi construction.
template <typename F>
double signed_gauss7(const F& f, double a, double b) {
    using boost::math::quadrature::gauss;
    if (a == b) return 0.0;
    if (a < b) return gauss<double, 7>::integrate(f, a, b);
    return -gauss<double, 7>::integrate(f, b, a);
}

} // namespace

// ===== flow table =====

FlowTable::FlowTable(const DriftFunction& h, const stoch::TimeGrid& tg,
                     double y_min, double y_max, int n_y)
    : tg_(tg), y_min_(y_min), y_max_(y_max), n_y_(n_y), drift_(h) {
    if (!(y_min < y_max) || n_y < 4)
        throw std::invalid_argument("FlowTable: need y_min < y_max and n_y >= 4");
    dy_ = (y_max - y_min) / (n_y - 1);
    y0_min_ = y_min;
    n_cols_ = n_y;
    integrate(h);
    if (!covers()) {
        // One automatic widening: pad each deficient side generously (the
        // deficit grows at most like the Gronwall factor, 3x plus a few
        // cells is enough for every drift that passes the assumption audit).
        double d_lo = 0.0, d_hi = 0.0;
        for (int k = 0; k <= tg_.n_steps; ++k) {
            d_lo = std::max(d_lo, phi_[static_cast<std::size_t>(k) * n_cols_] - y_min_);
            d_hi = std::max(d_hi, y_max_ - phi_[static_cast<std::size_t>(k) * n_cols_ + n_cols_ - 1]);
        }
        int extra_lo = d_lo > 0.0 ? static_cast<int>(std::ceil(3.0 * d_lo / dy_)) + 4 : 0;
        int extra_hi = d_hi > 0.0 ? static_cast<int>(std::ceil(3.0 * d_hi / dy_)) + 4 : 0;
        y0_min_ -= extra_lo * dy_;
        n_cols_ += extra_lo + extra_hi;
        integrate(h);
        if (!covers())
            throw GridEscape("FlowTable: characteristics leave the table even after extension");
    }
    double xi_lo = xi_[0], xi_hi = xi_[0];
    for (double x : xi_) {
        xi_lo = std::min(xi_lo, x);
        xi_hi = std::max(xi_hi, x);
    }
    m1_ = 1.0 / xi_hi;
    M1_ = 1.0 / xi_lo;
}

void FlowTable::integrate(const DriftFunction& h) {
    const int ns = tg_.n_steps;
    const double dt = tg_.dt();
    phi_.assign(static_cast<std::size_t>(ns + 1) * n_cols_, 0.0);
    xi_.assign(phi_.size(), 0.0);
    eta_.assign(phi_.size(), 0.0);
    for (int c = 0; c < n_cols_; ++c) {
        double y = col(c), xi = 1.0, eta = 0.0;
        phi_[static_cast<std::size_t>(c)] = y;
        xi_[static_cast<std::size_t>(c)] = 1.0;
        eta_[static_cast<std::size_t>(c)] = 0.0;
        auto rhs = [&h](double t, double y_, double xi_v, double eta_v,
                        double& ky, double& kxi, double& keta) {
            double hy = h.dy_h(t, y_);
            ky = -h.h(t, y_);
            kxi = -hy * xi_v;
            keta = -h.dyy_h(t, y_) * xi_v * xi_v - hy * eta_v;
        };
        for (int k = 0; k < ns; ++k) {
            double t = tg_.nodes[static_cast<std::size_t>(k)];
            double a1, b1, c1, a2, b2, c2, a3, b3, c3, a4, b4, c4;
            rhs(t, y, xi, eta, a1, b1, c1);
            rhs(t + 0.5 * dt, y + 0.5 * dt * a1, xi + 0.5 * dt * b1, eta + 0.5 * dt * c1, a2, b2, c2);
            rhs(t + 0.5 * dt, y + 0.5 * dt * a2, xi + 0.5 * dt * b2, eta + 0.5 * dt * c2, a3, b3, c3);
            rhs(t + dt, y + dt * a3, xi + dt * b3, eta + dt * c3, a4, b4, c4);
            y += dt / 6.0 * (a1 + 2.0 * a2 + 2.0 * a3 + a4);
            xi += dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
            eta += dt / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
            if (!(std::isfinite(y) && std::isfinite(xi) && std::isfinite(eta)))
                throw GridEscape("FlowTable: characteristic diverged");
            if (xi <= 0.0) {
                std::ostringstream msg;
                msg << "FlowTable: xi = " << xi << " at t = " << t + dt
                    << ", y0 = " << col(c);
                throw MonotoneViolation(msg.str());
            }
            std::size_t idx = static_cast<std::size_t>(k + 1) * n_cols_ + static_cast<std::size_t>(c);
            phi_[idx] = y;
            xi_[idx] = xi;
            eta_[idx] = eta;
        }
    }
}

bool FlowTable::covers() const {
    for (int k = 0; k <= tg_.n_steps; ++k) {
        const double* row = phi_.data() + static_cast<std::size_t>(k) * n_cols_;
        if (row[0] > y_min_ + 1e-12 || row[n_cols_ - 1] < y_max_ - 1e-12) return false;
    }
    return true;
}

int FlowTable::locate_time(double t, double& s) const {
    const double dt = tg_.dt();
    if (t < tg_.t0 - 1e-9 || t > tg_.T + 1e-9)
        throw std::invalid_argument("FlowTable: t outside the time grid");
    double pos = (t - tg_.t0) / dt;
    int k = static_cast<int>(std::floor(pos));
    k = std::clamp(k, 0, tg_.n_steps - 1);
    s = pos - k;
    if (s < 1e-12) s = 0.0;
    if (s > 1.0 - 1e-12) {
        s = 0.0;
        ++k;
        if (k > tg_.n_steps) k = tg_.n_steps;
    }
    return k;
}

double FlowTable::slice_phi(int k, double y0) const {
    std::span<const double> row(phi_.data() + static_cast<std::size_t>(k) * n_cols_,
                                static_cast<std::size_t>(n_cols_));
    std::span<const double> slope(xi_.data() + static_cast<std::size_t>(k) * n_cols_,
                                  static_cast<std::size_t>(n_cols_));
    return num::hermite_uniform(y0_min_, dy_, row, slope, y0);
}

double FlowTable::slice_xi(int k, double y0) const {
    std::span<const double> row(xi_.data() + static_cast<std::size_t>(k) * n_cols_,
                                static_cast<std::size_t>(n_cols_));
    std::span<const double> slope(eta_.data() + static_cast<std::size_t>(k) * n_cols_,
                                  static_cast<std::size_t>(n_cols_));
    return num::hermite_uniform(y0_min_, dy_, row, slope, y0);
}

double FlowTable::slice_eta(int k, double y0) const {
    std::span<const double> row(eta_.data() + static_cast<std::size_t>(k) * n_cols_,
                                static_cast<std::size_t>(n_cols_));
    return num::cubic4_uniform(y0_min_, dy_, row, y0);
}

double FlowTable::phi_at(double t, double y0) const {
    if (y0 < y0_min_ - 1e-12 || y0 > col(n_cols_ - 1) + 1e-12)
        throw GridEscape("FlowTable: y0 query outside the table columns");
    double s;
    int k = locate_time(t, s);
    double a = slice_phi(k, y0);
    if (s == 0.0) return a;
    double b = slice_phi(k + 1, y0);
    double da = -drift_.h(tg_.nodes[static_cast<std::size_t>(k)], a);
    double db = -drift_.h(tg_.nodes[static_cast<std::size_t>(k + 1)], b);
    return hermite01(a, b, da, db, tg_.dt(), s);
}

double FlowTable::xi_at(double t, double y0) const {
    if (y0 < y0_min_ - 1e-12 || y0 > col(n_cols_ - 1) + 1e-12)
        throw GridEscape("FlowTable: y0 query outside the table columns");
    double s;
    int k = locate_time(t, s);
    double a = slice_xi(k, y0);
    if (s == 0.0) return a;
    double b = slice_xi(k + 1, y0);
    double pa = slice_phi(k, y0);
    double pb = slice_phi(k + 1, y0);
    double da = -drift_.dy_h(tg_.nodes[static_cast<std::size_t>(k)], pa) * a;
    double db = -drift_.dy_h(tg_.nodes[static_cast<std::size_t>(k + 1)], pb) * b;
    return hermite01(a, b, da, db, tg_.dt(), s);
}

double FlowTable::eta_at(double t, double y0) const {
    if (y0 < y0_min_ - 1e-12 || y0 > col(n_cols_ - 1) + 1e-12)
        throw GridEscape("FlowTable: y0 query outside the table columns");
    double s;
    int k = locate_time(t, s);
    double a = slice_eta(k, y0);
    if (s == 0.0) return a;
    double b = slice_eta(k + 1, y0);
    double pa = slice_phi(k, y0);
    double pb = slice_phi(k + 1, y0);
    double xa = slice_xi(k, y0);
    double xb = slice_xi(k + 1, y0);
    double ta = tg_.nodes[static_cast<std::size_t>(k)];
    double tb = tg_.nodes[static_cast<std::size_t>(k + 1)];
    double da = -drift_.dyy_h(ta, pa) * xa * xa - drift_.dy_h(ta, pa) * a;
    double db = -drift_.dyy_h(tb, pb) * xb * xb - drift_.dy_h(tb, pb) * b;
    return hermite01(a, b, da, db, tg_.dt(), s);
}

double FlowTable::v(double t, double y) const {
    if (t <= tg_.t0 + 1e-14) return y; // Phi_0 is the identity
    double lo = col(0), hi = col(n_cols_ - 1);
    double img_lo = phi_at(t, lo), img_hi = phi_at(t, hi);
    if (y < img_lo - 1e-12 || y > img_hi + 1e-12)
        throw GridEscape("FlowTable: v query outside the covered range");
    double yc = std::clamp(y, img_lo, img_hi);
    auto fn = [this, t, yc](double u) { return phi_at(t, u) - yc; };
    auto dfn = [this, t](double u) { return xi_at(t, u); };
    return num::bisect_newton(fn, dfn, lo, hi, 1e-12).x;
}

double FlowTable::v_inv(double t, double u) const { return phi_at(t, u); }

double FlowTable::dv(double t, double y) const {
    return 1.0 / xi_at(t, v(t, y));
}

double FlowTable::ddv(double t, double y) const {
    double y0 = v(t, y);
    double xi = xi_at(t, y0);
    return -eta_at(t, y0) / (xi * xi * xi);
}

FlowTable solve_characteristics(const DriftFunction& h, const stoch::TimeGrid& tg,
                                double y_min, double y_max, int n_y) {
    return FlowTable(h, tg, y_min, y_max, n_y);
}

// ===== monotone maps =====

MonotoneMap::MonotoneMap(double u_min, double du, std::vector<double> vals,
                         std::vector<double> derivs, std::vector<double> curvs,
                         std::function<double(double)> inverse_override)
    : u_min_(u_min), du_(du), vals_(std::move(vals)), derivs_(std::move(derivs)),
      curvs_(std::move(curvs)), inverse_override_(std::move(inverse_override)) {
    if (du_ <= 0.0 || vals_.size() < 4 || derivs_.size() != vals_.size()
        || curvs_.size() != vals_.size())
        throw std::invalid_argument("MonotoneMap: bad table");
    for (double d : derivs_)
        if (!(d > 0.0)) throw MonotoneViolation("MonotoneMap: non-positive derivative");
}

double MonotoneMap::map(double u) const {
    if (u < u_min_ - 1e-9 || u > u_max() + 1e-9)
        throw DomainMismatch("MonotoneMap: argument outside the domain");
    return num::hermite_uniform(u_min_, du_, vals_, derivs_, u);
}

double MonotoneMap::deriv(double u) const {
    if (u < u_min_ - 1e-9 || u > u_max() + 1e-9)
        throw DomainMismatch("MonotoneMap: argument outside the domain");
    return num::hermite_uniform(u_min_, du_, derivs_, curvs_, u);
}

double MonotoneMap::curvature(double u) const {
    if (u < u_min_ - 1e-9 || u > u_max() + 1e-9)
        throw DomainMismatch("MonotoneMap: argument outside the domain");
    return num::cubic4_uniform(u_min_, du_, curvs_, u);
}

double MonotoneMap::inverse(double w) const {
    if (inverse_override_) return inverse_override_(w);
    if (w < vals_.front() - 1e-9 || w > vals_.back() + 1e-9)
        throw DomainMismatch("MonotoneMap: inverse argument outside the range");
    double wc = std::clamp(w, vals_.front(), vals_.back());
    auto fn = [this, wc](double u) { return map(u) - wc; };
    auto dfn = [this](double u) { return deriv(u); };
    return num::bisect_newton(fn, dfn, u_min_, u_max(), 1e-12).x;
}

double MonotoneMap::min_deriv() const {
    double m = derivs_.front();
    for (double d : derivs_) m = std::min(m, d);
    return m;
}

MonotoneMap psi_from_k(const std::function<double(double)>& k, double u_min,
                       double u_max, int n_points, double cap) {
    if (!(u_min < 0.0 && 0.0 < u_max))
        throw std::invalid_argument("psi_from_k: domain must straddle 0");
    if (n_points < 8) throw std::invalid_argument("psi_from_k: too few points");
    if (!(cap > 1.0)) throw std::invalid_argument("psi_from_k: cap must exceed 1");
    const double du = (u_max - u_min) / (n_points - 1);
    const double log_cap = std::log(cap);

    // K_j = int_0^{u_j} k, marched interval by interval from the anchored
    // base at u_min; psi' = exp(2K) with a symmetric overflow guard (an
    // underflowed derivative is just as unusable for inversion).
    std::vector<double> K(static_cast<std::size_t>(n_points));
    K[0] = signed_integral(k, 0.0, u_min);
    for (int j = 1; j < n_points; ++j) {
        double a = u_min + du * (j - 1);
        K[static_cast<std::size_t>(j)] =
            K[static_cast<std::size_t>(j - 1)] + signed_gauss7(k, a, a + du);
    }
    std::vector<double> derivs(K.size()), curvs(K.size());
    for (int j = 0; j < n_points; ++j) {
        if (2.0 * std::abs(K[static_cast<std::size_t>(j)]) > log_cap)
            throw OverflowGuard("psi_from_k: psi' exceeds the configured cap");
        derivs[static_cast<std::size_t>(j)] = std::exp(2.0 * K[static_cast<std::size_t>(j)]);
        curvs[static_cast<std::size_t>(j)] =
            2.0 * k(u_min + du * j) * derivs[static_cast<std::size_t>(j)];
    }

    // psi by quadrature of psi' over each interval, then re-anchored so that
    // psi(0) = 0 (exactly zero whenever 0 is a table node).
    std::vector<double> raw(K.size(), 0.0);
    for (int j = 0; j + 1 < n_points; ++j) {
        double a = u_min + du * j;
        auto psi_prime = [&k, &K, j, a](double x) {
            return std::exp(2.0 * (K[static_cast<std::size_t>(j)] + signed_gauss7(k, a, x)));
        };
        raw[static_cast<std::size_t>(j + 1)] =
            raw[static_cast<std::size_t>(j)] + signed_gauss7(psi_prime, a, a + du);
    }
    int jz = static_cast<int>(std::floor((0.0 - u_min) / du));
    jz = std::clamp(jz, 0, n_points - 2);
    double a = u_min + du * jz;
    auto psi_prime_z = [&k, &K, jz, a](double x) {
        return std::exp(2.0 * (K[static_cast<std::size_t>(jz)] + signed_gauss7(k, a, x)));
    };
    double psi0 = raw[static_cast<std::size_t>(jz)] + signed_gauss7(psi_prime_z, a, 0.0);
    std::vector<double> vals(raw.size());
    for (std::size_t j = 0; j < raw.size(); ++j) vals[j] = raw[j] - psi0;
    return MonotoneMap(u_min, du, std::move(vals), std::move(derivs), std::move(curvs));
}

MonotoneMap phi_map(const FlowTable& flow, const MonotoneMap& psi, double s) {
    const int n = flow.n_y();
    const double du = (flow.y_max() - flow.y_min()) / (n - 1);
    std::vector<double> vals(static_cast<std::size_t>(n));
    std::vector<double> derivs(vals.size()), curvs(vals.size());
    for (int j = 0; j < n; ++j) {
        double y = flow.y_min() + du * j;
        double vv = flow.v(s, y);
        if (vv < psi.u_min() - 1e-9 || vv > psi.u_max() + 1e-9)
            throw DomainMismatch("phi_map: v(s, .) leaves psi's domain");
        double dvv = flow.dv(s, y);
        std::size_t i = static_cast<std::size_t>(j);
        vals[i] = psi.map(vv);
        derivs[i] = psi.deriv(vv) * dvv;
        curvs[i] = psi.curvature(vv) * dvv * dvv + psi.deriv(vv) * flow.ddv(s, y);
    }
    auto inv = [flow, psi, s](double w) { return flow.v_inv(s, psi.inverse(w)); };
    return MonotoneMap(flow.y_min(), du, std::move(vals), std::move(derivs),
                       std::move(curvs), inv);
}

// ===== compatibility PDE =====

double GridField::eval(double t, double y) const {
    if (t < t_grid.t0 - 1e-9 || t > t_grid.T + 1e-9)
        throw std::invalid_argument("GridField: t outside the grid");
    double yc = std::clamp(y, y_min, y_min + dy * (n_y - 1));
    double pos = (t - t_grid.t0) / t_grid.dt();
    int k = std::clamp(static_cast<int>(std::floor(pos)), 0, t_grid.n_steps - 1);
    double s = std::clamp(pos - k, 0.0, 1.0);
    std::span<const double> row0(values.data() + static_cast<std::size_t>(k) * n_y,
                                 static_cast<std::size_t>(n_y));
    std::span<const double> row1(values.data() + static_cast<std::size_t>(k + 1) * n_y,
                                 static_cast<std::size_t>(n_y));
    double a = num::cubic4_uniform(y_min, dy, row0, yc);
    double b = num::cubic4_uniform(y_min, dy, row1, yc);
    return (1.0 - s) * a + s * b;
}

ResidualField pde_residual_f(const DriftFunction& h, const ScalarField& f,
                             const stoch::TimeGrid& tg, double y_min,
                             double y_max, int n_y) {
    if (n_y < 2 || !(y_min < y_max))
        throw std::invalid_argument("pde_residual_f: bad y grid");
    ResidualField r{tg, y_min, (y_max - y_min) / (n_y - 1), n_y, {}, 0.0};
    r.values.assign(static_cast<std::size_t>(tg.n_steps + 1) * n_y, 0.0);
    for (int k = 0; k <= tg.n_steps; ++k) {
        double t = tg.nodes[static_cast<std::size_t>(k)];
        for (int j = 0; j < n_y; ++j) {
            double y = y_min + r.dy * j;
            double res = f.dt_f(t, y) - h.h(t, y) * f.dy_f(t, y)
                       - h.dy_h(t, y) * f.f(t, y) - 0.5 * h.dyy_h(t, y);
            r.values[static_cast<std::size_t>(k) * n_y + static_cast<std::size_t>(j)] = res;
            r.max_abs = std::max(r.max_abs, std::abs(res));
        }
    }
    return r;
}

ResidualField pde_residual_f(const DriftFunction& h, const GridField& f) {
    ResidualField r{f.t_grid, f.y_min, f.dy, f.n_y, {}, 0.0};
    r.values.assign(f.values.size(), 0.0);
    const double dt = f.t_grid.dt();
    for (int k = 1; k < f.t_grid.n_steps; ++k) {
        double t = f.t_grid.nodes[static_cast<std::size_t>(k)];
        for (int j = 1; j + 1 < f.n_y; ++j) {
            double y = f.y_min + f.dy * j;
            double dtf = (f.at(k + 1, j) - f.at(k - 1, j)) / (2.0 * dt);
            double dyf = (f.at(k, j + 1) - f.at(k, j - 1)) / (2.0 * f.dy);
            double res = dtf - h.h(t, y) * dyf - h.dy_h(t, y) * f.at(k, j)
                       - 0.5 * h.dyy_h(t, y);
            r.values[static_cast<std::size_t>(k) * f.n_y + static_cast<std::size_t>(j)] = res;
            r.max_abs = std::max(r.max_abs, std::abs(res));
        }
    }
    return r;
}

GridField construct_f(const DriftFunction& h, const std::function<double(double)>& f0,
                      const FlowTable& flow) {
    const stoch::TimeGrid& tg = flow.t_grid();
    const int ns = tg.n_steps;
    const int nc = flow.n_columns();
    const double dt = tg.dt();

    // March F along every characteristic: F' = h_y(t, Phi) F + h_yy(t, Phi)/2.
    std::vector<double> F(static_cast<std::size_t>(ns + 1) * nc);
    for (int c = 0; c < nc; ++c) {
        double y0 = flow.column(c);
        double F_val = f0(y0);
        F[static_cast<std::size_t>(c)] = F_val;
        auto slope = [&](double t, double Fv) {
            double y = flow.phi_at(t, y0);
            return h.dy_h(t, y) * Fv + 0.5 * h.dyy_h(t, y);
        };
        for (int k = 0; k < ns; ++k) {
            double t = tg.nodes[static_cast<std::size_t>(k)];
            double k1 = slope(t, F_val);
            double k2 = slope(t + 0.5 * dt, F_val + 0.5 * dt * k1);
            double k3 = slope(t + 0.5 * dt, F_val + 0.5 * dt * k2);
            double k4 = slope(t + dt, F_val + dt * k3);
            F_val += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if (!std::isfinite(F_val))
                throw GridEscape("construct_f: transport diverged along a characteristic");
            F[static_cast<std::size_t>(k + 1) * nc + static_cast<std::size_t>(c)] = F_val;
        }
    }

    // Resample from characteristic coordinates onto the rectangular grid.
    GridField out{tg, flow.y_min(), (flow.y_max() - flow.y_min()) / (flow.n_y() - 1),
                  flow.n_y(), {}};
    out.values.assign(static_cast<std::size_t>(ns + 1) * out.n_y, 0.0);
    for (int k = 0; k <= ns; ++k) {
        std::span<const double> Frow(F.data() + static_cast<std::size_t>(k) * nc,
                                     static_cast<std::size_t>(nc));
        double t = tg.nodes[static_cast<std::size_t>(k)];
        for (int j = 0; j < out.n_y; ++j) {
            double y = out.y_min + out.dy * j;
            double y0 = flow.v(t, y);
            out.values[static_cast<std::size_t>(k) * out.n_y + static_cast<std::size_t>(j)] =
                num::cubic4_uniform(flow.column(0), flow.column_spacing(), Frow, y0);
        }
    }
    return out;
}

// ===== transfer identity =====

double transfer_identity_gap(const DriftFunction& h,
                             const std::function<double(double, double)>& f,
                             const FlowTable& flow, const pde::PayoffFn& phi,
                             const stoch::TimeGrid& tg, const pde::SpatialGrid& sg,
                             const pde::SchemeParams& sp) {
    if (std::abs(flow.t_grid().t0 - tg.t0) > 1e-12 || std::abs(flow.t_grid().T - tg.T) > 1e-12)
        throw std::invalid_argument("transfer_identity_gap: flow and solver time ranges differ");

    // untransformed side: g = h + f z^2 against the pulled-back payoff
    pde::GenFn g = [&h, &f](double t, double y, double z) {
        return h.h(t, y) + f(t, y) * z * z;
    };
    pde::PayoffFn mapped = [&flow, &phi, T = tg.T](double x) {
        return flow.v_inv(T, phi(x));
    };
    double lhs_base = pde::g_expectation(pde::solve_markov(g, mapped, tg, sg, sp), tg.t0, 0.0);

    // transformed side: pure-quadratic image generator, original payoff
    pde::GenFn gt = [&flow, &f](double t, double u, double zt) {
        double xi = flow.xi_at(t, u);
        double eta = flow.eta_at(t, u);
        double y = flow.phi_at(t, u);
        double dv = 1.0 / xi;
        double ddv = -eta / (xi * xi * xi);
        double f_tilde = (f(t, y) * dv - 0.5 * ddv) / (dv * dv);
        return f_tilde * zt * zt;
    };
    double rhs = pde::g_expectation(pde::solve_markov(gt, phi, tg, sg, sp), tg.t0, 0.0);

    // v(t0, .) is the identity, so the pulled-back solve already carries the
    // outer v; the two numbers should coincide.
    return std::abs(rhs - lhs_base);
}

} // namespace qbsde::transforms
