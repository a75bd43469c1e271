#ifndef QBSDE_LAB_HPP
#define QBSDE_LAB_HPP

// Identity checkers for nonlinear-expectation invariance properties. Each
// checker pits a value computed by one engine (PDE staging, exponential
// transform, Monte Carlo) against an independent target and reports the gap,
// so that a passing run certifies the identity at the configured tolerance
// and a failing run localizes the witness. The payoff pairs produced here are
// equal in law by construction; pair_law_check re-verifies that premise by
// simulation before the pair is used to probe anything deeper.

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "qbsde/generators.hpp"
#include "qbsde/pde_solver.hpp"
#include "qbsde/risk.hpp"
#include "qbsde/stochastic.hpp"

namespace qbsde::lab {

// Raised when a checker has no sound engine for the requested generator, as
// opposed to the generator being malformed (std::invalid_argument) or merely
// the wrong variant for a deterministic entry point (gen::VariantMismatch).
struct ClosedFormUnavailable : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// ===== payoff pairs =====
//
// Two terminal payoffs with the same one-dimensional law. A gap checker
// evaluates both under the same operator; any nonzero gap is then a failure
// of law invariance rather than a difference in distributions.

// X = phi(W_T) against X' = phi(-W_T).
struct Reflection {
    std::function<double(double)> phi;
};

// X = phi(W_{t1}) against X' = phi(W_T - W_{T - t1}); both arguments are
// centered Gaussians with variance t1.
struct IncrementShift {
    std::function<double(double)> phi;
    double t1 = 0.5;
};

// X = c 1_{W_{t_obs} >= 0} against X' = c 1_{W_{t_obs} < 0}; the two
// indicator events have probability one half each.
struct BranchSwap {
    double c = 1.0;
    double t_obs = 0.25;
};

struct PayoffPair {
    std::variant<Reflection, IncrementShift, BranchSwap> kind;
    double T = 1.0;
};

// Simulation smoke test of the equal-in-law premise: n_samples draws of each
// member from independent streams, compared by two-sample KS.
stoch::KsResult pair_law_check(const PayoffPair& pair, long n_samples,
                               std::uint64_t seed);

// ===== engine configuration =====

struct EngineConfig {
    int n_steps = 400;            // PDE time steps per unit of horizon
    pde::SpatialGrid sg{-6.0, 6.0, 801};
    pde::SchemeParams scheme{};
    int n_nodes = 64;             // quadrature nodes for stage collapses
    int n_mc_steps = 100;         // Monte Carlo grid steps per unit of horizon
    long n_paths = 100000;
    std::uint64_t seed = 20260822u;
};

// ===== law-invariance gaps =====

// |E^g_{0,T}[X] - E^g_{0,T}[X']| for a deterministic generator, by PDE
// staging. Random-drift generators must go through mc_pair_gap; ItoWentzell
// is valued through its exponential transform. Throws gen::VariantMismatch
// when no deterministic engine applies.
double li_gap(const gen::Generator& g, const PayoffPair& pair,
              const EngineConfig& cfg = {});

// Same gap evaluated at an intermediate horizon T_prime <= pair.T. Both
// payoffs must be measurable by T_prime: BranchSwap accepts any
// T_prime >= t_obs, the other pair kinds only T_prime == pair.T.
double clli_gap(const gen::Generator& g, const PayoffPair& pair,
                double T_prime, const EngineConfig& cfg = {});

struct McEstimate {
    double value = 0.0;
    double se = 0.0;
};

// Monte Carlo gap for a random-drift quadratic generator, with both pair
// members estimated on the same paths so the difference has a delta-method
// standard error. value_* are the transformed expectations
// (1 / 2 beta) log E[exp(2 beta (X + int_0^{T'} h dt))].
struct McGap {
    double gap = 0.0;
    double se = 0.0;
    McEstimate first;
    McEstimate second;
    long n_paths = 0;
    std::uint64_t seed = 0;
};

McGap mc_pair_gap(const gen::RandomDriftQuadratic& g, const PayoffPair& pair,
                  double T_prime, const EngineConfig& cfg = {});

// ===== maturity invariance =====

struct FixedMaturity {
    double t = 1.0;
};
// Maturity tau = t_low on {W_{t_obs} >= 0} and t_high otherwise.
struct BranchedMaturity {
    stoch::ThresholdBranch branch;
};
using MaturitySpec = std::variant<FixedMaturity, BranchedMaturity>;

// Gap between the values of phi(W_tau - W_{tau - L}) at two maturity
// specifications, L being the increment length. L = 0 selects the shorter
// fixed maturity; branched maturities require an explicit L with
// t_low - L >= t_obs so the increment starts after the branch is revealed.
// Requires g(t, y, 0) = 0 on a sampled box (std::invalid_argument
// otherwise): with a drift the gap would conflate maturity dependence with
// the drift's deterministic time value.
double mli_gap(const gen::Generator& g, const std::function<double(double)>& phi,
               const MaturitySpec& tau, const MaturitySpec& tau_prime,
               double increment_length = 0.0, const EngineConfig& cfg = {});

// ===== identity reports =====

// Shared result record. lhs/rhs carry the per-sample or per-epsilon values a
// checker compared, when storing them is meaningful; statistical checkers
// leave them empty and fill statistic/p_value instead. extrapolated and
// fitted_slope_coeff are populated by the limit-based checkers.
struct IdentityReport {
    std::vector<double> lhs;
    std::vector<double> rhs;
    double sup_gap = 0.0;
    double mean_gap = 0.0;
    double statistic = 0.0;
    double p_value = 0.0;
    double extrapolated = 0.0;
    double fitted_slope_coeff = 0.0;
    double tolerance = 0.0;
    bool pass = false;
    std::string note;
};

// ===== generator recovery from small-time slopes =====

// Slope of epsilon -> (E^g_{t, t+eps}[y + z (W_{t+eps and tau_C} - W_t)] - y)
// / eps, where tau_C clips the Brownian displacement at +-C, against the
// target g(t, y, z). eps_list must be positive and strictly decreasing; the
// report's lhs holds the per-epsilon slopes, rhs the target, and
// extrapolated the Richardson limit from the last two slopes. A
// non-finite C requests the unclipped problem, which is only available in
// closed form for Entropic (ClosedFormUnavailable otherwise).
IdentityReport representation_slope(const gen::Generator& g, double t, double y,
                                    double z, const std::vector<double>& eps_list,
                                    double clip_level, double tolerance = 1e-3,
                                    const EngineConfig& cfg = {});

// ===== Gateaux derivative against the adjoint density =====

// Slope of epsilon -> (E^g_{0,T}[y + eps X] - E^g_{0,T}[y]) / eps against
// Gamma_T E[X], where Gamma solves dGamma = dy_g Gamma dt + dz_g Gamma dW
// along the unperturbed solution (Y^y, Z^y = 0). X must be a Terminal markov
// payoff. fitted_slope_coeff is the least-squares coefficient of the linear
// error model slope(eps) - target ~ coeff * eps.
IdentityReport gateaux_check(const gen::Generator& g, double y,
                             const risk::MarkovPayoff& X,
                             const std::vector<double>& eps_list,
                             double tolerance = 1e-3,
                             const EngineConfig& cfg = {});

// ===== consequence one: the Doleans density ratio =====

// LHS_i = exp(sum_k b_k dW_k - (1/2) sum_k b_k^2 dt) on path i with
// b = dz_g(s, Y^y_s, Z^y_s); RHS_i = exp(-int dy_g ds) normalized by its
// mean across paths, which collapses to 1 whenever the exponent is the same
// on every path. Deterministic generators and the law-invariant drift
// processes have Z^y = 0 and a path-free exponent, so both sides are 1;
// PersistentDrift gets a quadrature-built value surface along each path and
// a genuinely random LHS. ItoWentzell throws ClosedFormUnavailable: its
// solution is not constant in the state, and no closed surface is available.
IdentityReport cons1_check(const gen::Generator& g, double y,
                           const stoch::PathBatch& paths,
                           double tolerance = 1e-6);

// ===== Brownian scaling invariance =====

// Distributional identity lambda O (W_{t+eps and tau^t_C} - W_t) =d
// W_{s + lambda^2 eps and tau^s_{lambda C}} - W_s for lambda in (0, 1],
// O = +-1, with tau^u_L the first time after u the displacement from W_u
// leaves [-L, L]. Sampled on independent streams and compared by KS; pass is
// p_value > 0.01. right_clip_level overrides the clip level lambda * C on
// the right-hand window (a deliberately mismatched level is the negative
// control); 0 keeps the lemma's level.
IdentityReport brownian_invariance_check(double lambda, int o_sign, double clip_level,
                                         double eps, double t, double s,
                                         long n_paths, std::uint64_t seed,
                                         double right_clip_level = 0.0);

// ===== quadratic homogeneity in z =====

struct HomogeneitySamples {
    std::vector<double> ts{0.1, 0.5, 0.9};
    std::vector<double> ys{-1.5, 0.0, 1.2};
    std::vector<double> zs{0.3, 1.0, 2.5};
    std::vector<double> lambdas{0.25, 0.6, 0.9};
};

// sup over the sample box of |g(t, y, lambda O z) - lambda^2 g(t, y, z)|,
// O = +-1. Takes a raw generator function so that deliberately inhomogeneous
// controls can be probed without widening the Generator variant.
IdentityReport quadratic_homogeneity_check(const pde::GenFn& g,
                                           const HomogeneitySamples& samples = {},
                                           double tolerance = 1e-12);

} // namespace qbsde::lab

#endif // QBSDE_LAB_HPP
