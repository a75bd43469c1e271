#pragma once

// Deterministic change-of-variables machinery for drift generators.
//
// The central object is the space change v(t, .): the inverse of the
// characteristics flow Phi_t of the ODE y' = -h(t, y). The table carries v,
// its inverse, and its first two y-derivatives, obtained from the variational
// ODEs along the characteristics:
//
//     xi'  = -h_y(t, Phi) xi,                xi(0)  = 1   (so dv = 1/xi)
//     eta' = -h_yy(t, Phi) xi^2 - h_y eta,   eta(0) = 0   (so ddv = -eta/xi^3)
//
// On top of it sit the strictly increasing scalar maps psi (from a state
// profile k via psi'' = 2 k psi') and the composite Phi(s, y) = psi(v(s, y)),
// the transport construction of admissible f profiles, the residual of the
// compatibility PDE f_t - h f_y - h_y f = h_yy / 2, and the two-solver
// transfer-identity cross check.

#include "qbsde/pde_solver.hpp"
#include "qbsde/stochastic.hpp"

#include <functional>
#include <stdexcept>
#include <vector>

namespace qbsde::transforms {

// ===== error conditions =====

struct MonotoneViolation : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct GridEscape : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DomainMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct OverflowGuard : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ===== domain types =====

// Deterministic drift profile h(t, y) with its first two y-derivatives.
// Callers are responsible for the integrability of sup_y |h_y(t, .)| and the
// boundedness of h_yy on the grids they use (the generator audit samples
// both).
struct DriftFunction {
    std::function<double(double, double)> h;
    std::function<double(double, double)> dy_h;
    std::function<double(double, double)> dyy_h;
};

// Tabulated characteristics flow and its inversion machinery. Built by
// solve_characteristics; query range in y is [y_min, y_max], while the
// internal y0 columns may be wider (automatic one-shot extension keeps the
// image of the column range covering the query range at every time node).
class FlowTable {
  public:
    FlowTable(const DriftFunction& h, const stoch::TimeGrid& tg,
              double y_min, double y_max, int n_y);

    const stoch::TimeGrid& t_grid() const { return tg_; }
    double y_min() const { return y_min_; }
    double y_max() const { return y_max_; }
    int n_y() const { return n_y_; }

    // v(t, .) = Phi_t^{-1}; v(t0, y) = y identically.
    double v(double t, double y) const;
    // v_inv(t, u) = Phi_t(u), the forward flow from y0 = u.
    double v_inv(double t, double u) const;
    // dv = d/dy v and ddv = d^2/dy^2 v via the inverse-map identities.
    double dv(double t, double y) const;
    double ddv(double t, double y) const;

    // Variational data addressed by the starting point y0 (no inversion);
    // dv(t, y) equals 1/xi_at(t, v(t, y)).
    double phi_at(double t, double y0) const;
    double xi_at(double t, double y0) const;
    double eta_at(double t, double y0) const;

    // Extremes of dv over the table nodes: 0 < m1 <= dv <= M1.
    double m1() const { return m1_; }
    double M1() const { return M1_; }

    // Internal column layout, exposed for transport along characteristics.
    // Columns may extend past [y_min, y_max] when the table auto-widened.
    int n_columns() const { return n_cols_; }
    double column(int j) const { return col(j); }
    double column_spacing() const { return dy_; }

  private:
    double col(int j) const { return y0_min_ + dy_ * j; }
    int locate_time(double t, double& s) const;
    double slice_phi(int k, double y0) const;
    double slice_xi(int k, double y0) const;
    double slice_eta(int k, double y0) const;
    void integrate(const DriftFunction& h);
    bool covers() const;

    stoch::TimeGrid tg_;
    double y_min_, y_max_;
    int n_y_;
    double y0_min_, dy_;
    int n_cols_;
    std::vector<double> phi_, xi_, eta_; // (n_steps+1) x n_cols, row-major
    double m1_ = 1.0, M1_ = 1.0;
    DriftFunction drift_; // kept for exact slopes when interpolating in t
};

// Strictly increasing scalar map with a tabulated derivative; inversion by
// bracketing bisection plus one Newton polish. Queries outside [u_min, u_max]
// (resp. outside the value range, for inverse) raise DomainMismatch.
class MonotoneMap {
  public:
    MonotoneMap(double u_min, double du, std::vector<double> vals,
                std::vector<double> derivs, std::vector<double> curvs,
                std::function<double(double)> inverse_override = {});

    double u_min() const { return u_min_; }
    double u_max() const { return u_min_ + du_ * (static_cast<int>(vals_.size()) - 1); }
    double map(double u) const;
    double deriv(double u) const;
    double curvature(double u) const;
    double inverse(double w) const;
    double min_deriv() const;

  private:
    double u_min_, du_;
    std::vector<double> vals_, derivs_, curvs_;
    std::function<double(double)> inverse_override_;
};

// Scalar field with exact partial derivatives (closed-form test inputs).
struct ScalarField {
    std::function<double(double, double)> f;
    std::function<double(double, double)> dt_f;
    std::function<double(double, double)> dy_f;
};

// Field tabulated on time nodes x uniform y nodes; eval interpolates
// cubically in y and linearly in t.
struct GridField {
    stoch::TimeGrid t_grid;
    double y_min = -1.0;
    double dy = 0.1;
    int n_y = 21;
    std::vector<double> values; // (n_steps+1) x n_y

    double at(int k, int j) const {
        return values[static_cast<std::size_t>(k) * n_y + static_cast<std::size_t>(j)];
    }
    double eval(double t, double y) const;
};

// Pointwise residual of the compatibility PDE; interior nodes only for the
// tabulated overload (edge entries are zero), max_abs over what was computed.
struct ResidualField {
    stoch::TimeGrid t_grid;
    double y_min = -1.0;
    double dy = 0.1;
    int n_y = 21;
    std::vector<double> values;
    double max_abs = 0.0;
};

// ===== operations =====

// Integrate the characteristics and variational ODEs from every column start
// and assemble the flow table. Throws MonotoneViolation if any xi <= 0 and
// GridEscape if the table cannot cover the query range (after one automatic
// extension) or a characteristic diverges.
FlowTable solve_characteristics(const DriftFunction& h, const stoch::TimeGrid& tg,
                                double y_min, double y_max, int n_y);

// Build psi with psi(0) = 0, psi'(u) = exp(2 int_0^u k), tabulated on
// [u_min, u_max]. Throws OverflowGuard when psi' would exceed cap.
MonotoneMap psi_from_k(const std::function<double(double)>& k, double u_min,
                       double u_max, int n_points = 2001, double cap = 1e15);

// Composite map y -> psi(v(s, y)) on the flow's query range, with the
// composite inverse u -> v_inv(s, psi^{-1}(u)). Throws DomainMismatch when
// the range of v(s, .) leaves psi's domain.
MonotoneMap phi_map(const FlowTable& flow, const MonotoneMap& psi, double s);

// Residual f_t - h f_y - h_y f - h_yy / 2 on the grid.
ResidualField pde_residual_f(const DriftFunction& h, const ScalarField& f,
                             const stoch::TimeGrid& tg, double y_min,
                             double y_max, int n_y);
ResidualField pde_residual_f(const DriftFunction& h, const GridField& f);

// Integrate f along each characteristic from the initial profile f0 (the
// transport form of the compatibility PDE) and resample onto the rectangular
// grid of the flow table.
GridField construct_f(const DriftFunction& h, const std::function<double(double)>& f0,
                      const FlowTable& flow);

// | E^{gt}_{0,T}[phi] - E^{g}_{0,T}[v_inv(T, phi(.))] | at (0, 0), where
// g = h + f |z|^2 and gt is its image under the space change: two independent
// PDE solves whose agreement is the numerical footprint of the transfer
// identity.
double transfer_identity_gap(const DriftFunction& h,
                             const std::function<double(double, double)>& f,
                             const FlowTable& flow, const pde::PayoffFn& phi,
                             const stoch::TimeGrid& tg, const pde::SpatialGrid& sg,
                             const pde::SchemeParams& sp = {});

} // namespace qbsde::transforms
