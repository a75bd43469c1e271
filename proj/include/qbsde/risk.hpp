#pragma once

// Dynamic risk measures over Markov payoffs of Brownian increments. All
// conditional quantities are deterministic functions of the observed state,
// computed by Gauss-Hermite quadrature; nesting (a risk measure applied to
// an intermediate risk profile) stacks quadratures instead of sampling, so
// time-consistency gaps carry no statistical noise.

#include "qbsde/transforms.hpp"

#include <functional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace qbsde::risk {

using transforms::DomainMismatch;
using transforms::OverflowGuard;

struct BracketFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ===== losses =====

// Increasing convex loss with l(0) = 0 and inf l < 0. The three catalog
// shapes are fixed here; bespoke instances are constructible for tests.
struct LossFunction {
    std::string name;
    std::function<double(double)> l;
    std::function<double(double)> dl;

    static LossFunction linear();
    static LossFunction exponential(double beta); // exp(2 beta x) - 1
    static LossFunction piecewise_convex();       // exp(x) - 1 above 0, x below
};

// ===== payoffs =====

struct Terminal {
    std::function<double(double)> phi; // phi(W_T)
};
struct Early {
    std::function<double(double)> phi; // phi(W_{t1})
    double t1 = 0.5;
};
struct Increment {
    std::function<double(double)> phi; // phi(W_{t2} - W_{t1})
    double t1 = 0.25;
    double t2 = 0.75;
};
struct IndicatorOfBranch {
    double c = 1.0; // payoff c on {W_{t_obs} >= 0}, else 0
    double t_obs = 0.25;
};

struct MarkovPayoff {
    std::variant<Terminal, Early, Increment, IndicatorOfBranch> kind;
    double T = 1.0;
};

// Sampled sup-norm over the reachable argument range (finite-box evidence).
double payoff_sup_sample(const MarkovPayoff& X, int n_samples = 4001);

// E[F(X) | W_t = x] by quadrature. Conditioning past the payoff's own
// observation time is rejected (the value would not be a function of the
// current state alone): t must not exceed t1 (Early, Increment) or t_obs.
double expect_cond(const MarkovPayoff& X, double t, double x,
                   const std::function<double(double)>& F, int n_nodes = 40);

// ===== measures =====

struct EntropicRM {
    double gamma = 1.0;
};
struct CertaintyEquivalentRM {
    transforms::FlowTable flow;
    transforms::MonotoneMap psi;
};
struct ShortfallRM {
    LossFunction loss;
};

using RiskMeasure = std::variant<EntropicRM, CertaintyEquivalentRM, ShortfallRM>;

// log E[exp(gamma X) | W_t = x] / gamma, stabilized by a value shift.
// Throws OverflowGuard when gamma times the sampled sup-norm exceeds 700.
double entropic_rho(const MarkovPayoff& X, double gamma, double t, double x,
                    int n_nodes = 40);

// The unique m with E[l(X - m) | W_t = x] = 0, bracketed on
// [min X - 1, max X + 1] and bisected to 1e-10 with one Newton polish.
// Throws BracketFailure when the bracket ends do not change sign.
double shortfall_rho(const MarkovPayoff& X, const LossFunction& loss, double t,
                     double x, int n_nodes = 40);

// Time-dependent certainty equivalent: with Phi(s, y) = psi(v(s, y)), returns
// Phi^{-1}(t, E[Phi(T, X) | W_t = x]).
double ce_rho(const MarkovPayoff& X, const transforms::FlowTable& flow,
              const transforms::MonotoneMap& psi, double t, double x,
              int n_nodes = 40);

// Variant dispatch of the three evaluators above.
double rho_eval(const RiskMeasure& rm, const MarkovPayoff& X, double t, double x,
                int n_nodes = 40);

// | rho_{0,s}( rho_{s,T}(X) ) - rho_{0,T}(X) | with the intermediate profile
// evaluated pointwise on the outer quadrature states. The default node count
// is higher than for single-layer evaluation because the composition stacks
// two quadrature errors.
double tc_gap(const RiskMeasure& rm, const MarkovPayoff& X, double s,
              int n_nodes = 96);

// ===== axiom audit =====

struct AxiomSampleSet {
    double T = 1.0;
    std::vector<std::function<double(double)>> bases; // bounded payoffs
    std::vector<std::function<double(double)>> bumps; // nonnegative additions
    std::vector<double> lambdas;                      // mixture weights in (0,1)
    std::vector<double> cash;                         // constants
    int n_nodes = 40;

    static AxiomSampleSet default_catalog(double T = 1.0);
};

struct AxiomsReport {
    bool monotone_pass = true;
    double monotone_worst = 0.0; // largest observed rho(X) - rho(X + bump)
    std::string monotone_witness;
    bool convex_pass = true;
    double convex_worst = 0.0; // largest observed mixture excess
    std::string convex_witness;
    double cash_additive_gap = 0.0; // sup |rho(X + c) - rho(X) - c|
    bool cash_additive_pass = true;
    std::string cash_witness;
    bool normalized = false;
    double rho_zero = 0.0;
    std::string strict_monotone_witness; // evidence only, never a certificate
    double strict_monotone_rise = 0.0;

    std::string to_json() const;
};

AxiomsReport axioms_audit(const RiskMeasure& rm, const AxiomSampleSet& samples);

// One CSV row "measure,payoff,t,value" with 12 significant digits.
std::string risk_csv_row(const std::string& measure, const std::string& payoff,
                         double t, double value);

} // namespace qbsde::risk
