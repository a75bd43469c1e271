#include "qbsde/lab.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <span>

#include "qbsde/transforms.hpp"

namespace qbsde::lab {

namespace {

template <class... Ts> struct overloaded : Ts... { using Ts::operator()...; };
template <class... Ts> overloaded(Ts...) -> overloaded<Ts...>;

template <class... Args>
std::string fmt(const char* pattern, Args... args) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), pattern, args...);
    return std::string(buf);
}

int steps_for(const EngineConfig& cfg, double len) {
    return std::max(40, static_cast<int>(std::lround(cfg.n_steps * len)));
}

// Flow a constant terminal value backward through the drift part of the
// generator: y' = -g(t, y, 0) integrated from t_hi down to t_lo by RK4. For
// a comparison-principle generator this is the identity; with a drift it is
// the deterministic value of a constant claim.
double ode_backflow(const pde::GenFn& g, double c, double t_hi, double t_lo,
                    int n_steps) {
    if (t_hi <= t_lo + 1e-14) return c;
    const double dt = (t_hi - t_lo) / n_steps;
    double y = c;
    double t = t_hi;
    for (int i = 0; i < n_steps; ++i) {
        const double h = -dt;
        const double k1 = -g(t, y, 0.0);
        const double k2 = -g(t + h / 2, y + h * k1 / 2, 0.0);
        const double k3 = -g(t + h / 2, y + h * k2 / 2, 0.0);
        const double k4 = -g(t + h, y + h * k3, 0.0);
        y += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6;
        t += h;
    }
    return y;
}

pde::GenFn genfn_of(const gen::Generator& g) {
    return [g](double t, double y, double z) { return gen::eval(g, t, y, z); };
}

// Solve the terminal problem on [a, b] and read the value at (a, 0).
double solve_at_origin(const pde::GenFn& g, const pde::PayoffFn& phi, double a,
                       double b, const EngineConfig& cfg) {
    stoch::TimeGrid tg(a, b, steps_for(cfg, b - a));
    pde::ValueSurface vs = pde::solve_markov(g, phi, tg, cfg.sg, cfg.scheme);
    return pde::g_expectation(vs, a, 0.0);
}

// Indicator terminal for a branch event observed at the spatial origin. The
// half weight on the boundary node keeps the swapped pair exactly symmetric
// on a symmetric grid; a one-sided indicator would leak an O(dx) asymmetry
// through the single node at zero.
pde::PayoffFn branch_terminal(double v_up, double v_down) {
    return [v_up, v_down](double x) {
        if (x > 0.0) return v_up;
        if (x < 0.0) return v_down;
        return 0.5 * (v_up + v_down);
    };
}

void validate_horizon(const PayoffPair& pair, double t_prime) {
    if (!(t_prime > 0.0) || t_prime > pair.T + 1e-12)
        throw std::invalid_argument("lab: evaluation horizon must lie in (0, pair.T]");
    std::visit(overloaded{
                   [&](const Reflection&) {
                       if (std::fabs(t_prime - pair.T) > 1e-9)
                           throw std::invalid_argument(
                               "lab: a reflected terminal payoff is only measurable at pair.T");
                   },
                   [&](const IncrementShift&) {
                       if (std::fabs(t_prime - pair.T) > 1e-9)
                           throw std::invalid_argument(
                               "lab: a shifted increment payoff is only measurable at pair.T");
                   },
                   [&](const BranchSwap& b) {
                       if (t_prime < b.t_obs - 1e-12)
                           throw std::invalid_argument(
                               "lab: horizon precedes the branch observation time");
                   },
               },
               pair.kind);
}

// Deterministic staging engine: value of one pair member under a
// deterministic generator at horizon t_prime, state 0, time 0.
double det_value(const gen::Generator& g, const PayoffPair& pair, bool primed,
                 double t_prime, const EngineConfig& cfg) {
    const pde::GenFn gf = genfn_of(g);
    return std::visit(
        overloaded{
            [&](const Reflection& r) {
                pde::PayoffFn phi = primed
                                        ? pde::PayoffFn([f = r.phi](double x) { return f(-x); })
                                        : pde::PayoffFn(r.phi);
                return solve_at_origin(gf, phi, 0.0, t_prime, cfg);
            },
            [&](const IncrementShift& is) {
                if (!(is.t1 > 0.0) || is.t1 >= pair.T - 1e-12)
                    throw std::invalid_argument("lab: IncrementShift needs 0 < t1 < T");
                if (!primed) {
                    // phi(W_{t1}): past t1 the claim is a frozen constant, so
                    // each terminal state flows back by the drift ODE alone.
                    const int m = steps_for(cfg, t_prime - is.t1);
                    pde::PayoffFn stage =
                        [gf, f = is.phi, t_prime, t1 = is.t1, m](double x) {
                            return ode_backflow(gf, f(x), t_prime, t1, m);
                        };
                    return solve_at_origin(gf, stage, 0.0, is.t1, cfg);
                }
                // phi(W_T - W_{T-t1}): the late stage is translation
                // invariant, so its time-(T-t1) value is state free.
                const double m_inc =
                    solve_at_origin(gf, pde::PayoffFn(is.phi), t_prime - is.t1, t_prime, cfg);
                return ode_backflow(gf, m_inc, t_prime - is.t1, 0.0,
                                    steps_for(cfg, t_prime - is.t1));
            },
            [&](const BranchSwap& b) {
                if (!(b.t_obs > 0.0) || b.t_obs > pair.T + 1e-12)
                    throw std::invalid_argument("lab: BranchSwap needs t_obs in (0, T]");
                const int m = steps_for(cfg, t_prime - b.t_obs);
                const double on_up = primed ? 0.0 : b.c;
                const double on_down = primed ? b.c : 0.0;
                const double v_up = ode_backflow(gf, on_up, t_prime, b.t_obs, m);
                const double v_down = ode_backflow(gf, on_down, t_prime, b.t_obs, m);
                return solve_at_origin(gf, branch_terminal(v_up, v_down), 0.0, b.t_obs, cfg);
            },
        },
        pair.kind);
}

// Transform engine for the Ito-Wentzell family. With A_t = r(t) psi_b(W_t)
// one has dA = a dt + b dW, so Y = log E_t[exp(X + A_{T'})] - A_t solves the
// BSDE; r vanishing at both endpoints makes the time-0 and horizon
// corrections drop out when T' is the terminal time.
double ito_value(const gen::ItoWentzell& iw, const PayoffPair& pair, bool primed,
                 double t_prime, const EngineConfig& cfg) {
    if (std::fabs(iw.r(0.0)) > 1e-12)
        throw std::invalid_argument("lab: the Ito-Wentzell envelope must vanish at t = 0");
    const bool at_terminal = std::fabs(t_prime - pair.T) <= 1e-9;
    const stoch::QuadratureRule rule = stoch::gauss_hermite(cfg.n_nodes);

    return std::visit(
        overloaded{
            [&](const Reflection& r) {
                const double s = std::sqrt(pair.T);
                double acc = 0.0;
                for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
                    const double w = s * rule.nodes[q] * (primed ? -1.0 : 1.0);
                    acc += rule.weights[q] * std::exp(r.phi(w));
                }
                return std::log(acc);
            },
            [&](const IncrementShift& is) {
                // Both members read a centered increment of variance t1; the
                // primed one is materialized as W_T - W_{T-t1} explicitly.
                const double s1 = std::sqrt(is.t1);
                double acc = 0.0;
                if (!primed) {
                    for (std::size_t q = 0; q < rule.nodes.size(); ++q)
                        acc += rule.weights[q] * std::exp(is.phi(s1 * rule.nodes[q]));
                } else {
                    const double s0 = std::sqrt(pair.T - is.t1);
                    for (std::size_t q = 0; q < rule.nodes.size(); ++q) {
                        double inner = 0.0;
                        for (std::size_t p = 0; p < rule.nodes.size(); ++p) {
                            const double w_late = s0 * rule.nodes[q] + s1 * rule.nodes[p];
                            const double w_early = s0 * rule.nodes[q];
                            inner += rule.weights[p] * std::exp(is.phi(w_late - w_early));
                        }
                        acc += rule.weights[q] * inner;
                    }
                }
                return std::log(acc);
            },
            [&](const BranchSwap& b) {
                if (!at_terminal)
                    throw ClosedFormUnavailable(
                        "lab: interior-horizon branch values for the Ito-Wentzell family "
                        "need a joint oracle in the branch state and the horizon state");
                const double hi = primed ? 0.0 : b.c;
                const double lo = primed ? b.c : 0.0;
                return std::log(0.5 * std::exp(hi) + 0.5 * std::exp(lo));
            },
        },
        pair.kind);
}

struct McMoments {
    double mean_a = 0.0, mean_b = 0.0;
    double var_a = 0.0, var_b = 0.0, cov_ab = 0.0;
};

} // namespace

// ===== payoff pair law check =====

stoch::KsResult pair_law_check(const PayoffPair& pair, long n_samples,
                               std::uint64_t seed) {
    if (n_samples < 2)
        throw std::invalid_argument("lab: pair_law_check needs at least two samples");
    std::mt19937_64 rng_a(seed);
    std::mt19937_64 rng_b(seed + 1);
    std::normal_distribution<double> nd(0.0, 1.0);

    std::vector<double> xs(static_cast<std::size_t>(n_samples));
    std::vector<double> ys(static_cast<std::size_t>(n_samples));
    std::visit(overloaded{
                   [&](const Reflection& r) {
                       const double s = std::sqrt(pair.T);
                       for (auto& v : xs) v = r.phi(s * nd(rng_a));
                       for (auto& v : ys) v = r.phi(-s * nd(rng_b));
                   },
                   [&](const IncrementShift& is) {
                       const double s1 = std::sqrt(is.t1);
                       const double s0 = std::sqrt(pair.T - is.t1);
                       for (auto& v : xs) v = is.phi(s1 * nd(rng_a));
                       for (auto& v : ys) {
                           const double w_early = s0 * nd(rng_b);
                           const double w_late = w_early + s1 * nd(rng_b);
                           v = is.phi(w_late - w_early);
                       }
                   },
                   [&](const BranchSwap& b) {
                       for (auto& v : xs) v = nd(rng_a) >= 0.0 ? b.c : 0.0;
                       for (auto& v : ys) v = nd(rng_b) < 0.0 ? b.c : 0.0;
                   },
               },
               pair.kind);
    return stoch::ks_two_sample(xs, ys);
}

// ===== law-invariance gaps =====

double li_gap(const gen::Generator& g, const PayoffPair& pair,
              const EngineConfig& cfg) {
    return clli_gap(g, pair, pair.T, cfg);
}

double clli_gap(const gen::Generator& g, const PayoffPair& pair,
                double t_prime, const EngineConfig& cfg) {
    validate_horizon(pair, t_prime);
    if (const auto* rdq = std::get_if<gen::RandomDriftQuadratic>(&g)) {
        McGap mc = mc_pair_gap(*rdq, pair, t_prime, cfg);
        return std::fabs(mc.gap);
    }
    if (const auto* iw = std::get_if<gen::ItoWentzell>(&g)) {
        return std::fabs(ito_value(*iw, pair, false, t_prime, cfg) -
                         ito_value(*iw, pair, true, t_prime, cfg));
    }
    return std::fabs(det_value(g, pair, false, t_prime, cfg) -
                     det_value(g, pair, true, t_prime, cfg));
}

McGap mc_pair_gap(const gen::RandomDriftQuadratic& g, const PayoffPair& pair,
                  double t_prime, const EngineConfig& cfg) {
    validate_horizon(pair, t_prime);
    if (!(g.beta > 0.0))
        throw std::invalid_argument("lab: the quadratic coefficient must be positive");
    if (cfg.n_paths < 2)
        throw std::invalid_argument("lab: mc_pair_gap needs at least two paths");

    // The grid spans the full pair horizon so drift windows near T stay
    // admissible; only the drift integral up to t_prime enters the values.
    stoch::TimeGrid grid(0.0, pair.T,
                         std::max(1, static_cast<int>(std::lround(cfg.n_mc_steps * pair.T))));
    const double beta2 = 2.0 * g.beta;

    // Per-path payoff evaluation, resolved once outside the path loop.
    // index_of rejects any observation time that misses the grid.
    std::function<void(std::span<const double>, double&, double&)> payoff;
    std::visit(overloaded{
                   [&](const Reflection& r) {
                       const int it = grid.index_of(pair.T);
                       payoff = [f = r.phi, it](std::span<const double> w, double& x,
                                                double& xp) {
                           x = f(w[static_cast<std::size_t>(it)]);
                           xp = f(-w[static_cast<std::size_t>(it)]);
                       };
                   },
                   [&](const IncrementShift& is) {
                       const int i1 = grid.index_of(is.t1);
                       const int i0 = grid.index_of(pair.T - is.t1);
                       const int it = grid.index_of(pair.T);
                       payoff = [f = is.phi, i1, i0, it](std::span<const double> w,
                                                         double& x, double& xp) {
                           x = f(w[static_cast<std::size_t>(i1)]);
                           xp = f(w[static_cast<std::size_t>(it)] -
                                  w[static_cast<std::size_t>(i0)]);
                       };
                   },
                   [&](const BranchSwap& b) {
                       const int io = grid.index_of(b.t_obs);
                       payoff = [c = b.c, io](std::span<const double> w, double& x,
                                              double& xp) {
                           const bool up = w[static_cast<std::size_t>(io)] >= 0.0;
                           x = up ? c : 0.0;
                           xp = up ? 0.0 : c;
                       };
                   },
               },
               pair.kind);

    double s_a = 0.0, s_b = 0.0, s_aa = 0.0, s_bb = 0.0, s_ab = 0.0;
    stoch::for_each_path(
        grid, 1, cfg.n_paths, cfg.seed,
        [&](long, std::span<const double> w) {
            const gen::DriftIntegral di = gen::drift_integral(g.drift, grid, w);
            const double carried = di.partial(t_prime);
            double x = 0.0, xp = 0.0;
            payoff(w, x, xp);
            const double ea = beta2 * (x + carried);
            const double eb = beta2 * (xp + carried);
            if (ea > 700.0 || eb > 700.0)
                throw transforms::OverflowGuard(
                    fmt("lab: exponential moment overflows, exponent %.3g", std::max(ea, eb)));
            const double a = std::exp(ea);
            const double b = std::exp(eb);
            s_a += a;
            s_b += b;
            s_aa += a * a;
            s_bb += b * b;
            s_ab += a * b;
        });

    const double n = static_cast<double>(cfg.n_paths);
    McMoments m;
    m.mean_a = s_a / n;
    m.mean_b = s_b / n;
    m.var_a = std::max(0.0, s_aa / n - m.mean_a * m.mean_a) * n / (n - 1);
    m.var_b = std::max(0.0, s_bb / n - m.mean_b * m.mean_b) * n / (n - 1);
    m.cov_ab = (s_ab / n - m.mean_a * m.mean_b) * n / (n - 1);

    McGap out;
    out.n_paths = cfg.n_paths;
    out.seed = cfg.seed;
    out.first.value = std::log(m.mean_a) / beta2;
    out.second.value = std::log(m.mean_b) / beta2;
    out.first.se = std::sqrt(m.var_a / n) / (m.mean_a * beta2);
    out.second.se = std::sqrt(m.var_b / n) / (m.mean_b * beta2);
    out.gap = out.first.value - out.second.value;
    // Delta method on the common paths: the covariance term credits the gap
    // for the shared drift noise.
    const double rel = m.var_a / (m.mean_a * m.mean_a) + m.var_b / (m.mean_b * m.mean_b) -
                       2.0 * m.cov_ab / (m.mean_a * m.mean_b);
    out.se = std::sqrt(std::max(rel, 0.0) / n) / beta2;
    return out;
}

// ===== maturity invariance =====

namespace {

double require_fixed_length(const MaturitySpec& spec) {
    if (const auto* f = std::get_if<FixedMaturity>(&spec)) return f->t;
    throw std::invalid_argument(
        "lab: an explicit increment length is required with a branched maturity");
}

double maturity_value(const pde::GenFn& gf, const std::function<double(double)>& phi,
                      const MaturitySpec& spec, double inc_len, const EngineConfig& cfg) {
    return std::visit(
        overloaded{
            [&](const FixedMaturity& f) {
                if (!(f.t > 0.0))
                    throw std::invalid_argument("lab: maturities must be positive");
                if (inc_len > f.t + 1e-12)
                    throw std::invalid_argument(
                        "lab: increment length exceeds a fixed maturity");
                if (std::fabs(inc_len - f.t) <= 1e-12)
                    return solve_at_origin(gf, pde::PayoffFn(phi), 0.0, f.t, cfg);
                const double m =
                    solve_at_origin(gf, pde::PayoffFn(phi), f.t - inc_len, f.t, cfg);
                return ode_backflow(gf, m, f.t - inc_len, 0.0,
                                    steps_for(cfg, f.t - inc_len));
            },
            [&](const BranchedMaturity& bm) {
                const stoch::ThresholdBranch& tb = bm.branch;
                if (tb.t_low - inc_len < tb.t_obs - 1e-12)
                    throw std::invalid_argument(
                        "lab: the increment must start after the branch observation");
                auto branch_value = [&](double tau) {
                    const double m =
                        solve_at_origin(gf, pde::PayoffFn(phi), tau - inc_len, tau, cfg);
                    return ode_backflow(gf, m, tau - inc_len, tb.t_obs,
                                        steps_for(cfg, tau - inc_len - tb.t_obs));
                };
                const double v_up = branch_value(tb.t_low);
                const double v_down = branch_value(tb.t_high);
                return solve_at_origin(gf, branch_terminal(v_up, v_down), 0.0, tb.t_obs, cfg);
            },
        },
        spec);
}

} // namespace

double mli_gap(const gen::Generator& g, const std::function<double(double)>& phi,
               const MaturitySpec& tau, const MaturitySpec& tau_prime,
               double increment_length, const EngineConfig& cfg) {
    // The construction only matches increments in law under a drift-free
    // generator; audit that premise on a sample box before valuing anything.
    for (double t : {0.0, 0.2, 0.45, 0.7, 0.95})
        for (double y : {-2.0, -0.8, 0.0, 0.8, 2.0})
            if (std::fabs(gen::eval(g, t, y, 0.0)) > 1e-12)
                throw std::invalid_argument(
                    fmt("lab: mli_gap requires g(t, y, 0) = 0; found %.3g at "
                        "(t, y) = (%.2f, %.2f)",
                        gen::eval(g, t, y, 0.0), t, y));

    double inc_len = increment_length;
    if (inc_len == 0.0)
        inc_len = std::min(require_fixed_length(tau), require_fixed_length(tau_prime));
    if (!(inc_len > 0.0))
        throw std::invalid_argument("lab: the increment length must be positive");

    const pde::GenFn gf = genfn_of(g);
    return std::fabs(maturity_value(gf, phi, tau, inc_len, cfg) -
                     maturity_value(gf, phi, tau_prime, inc_len, cfg));
}

// ===== generator recovery from small-time slopes =====

IdentityReport representation_slope(const gen::Generator& g, double t, double y,
                                    double z, const std::vector<double>& eps_list,
                                    double clip_level, double tolerance,
                                    const EngineConfig& cfg) {
    if (eps_list.empty())
        throw std::invalid_argument("lab: representation_slope needs at least one epsilon");
    for (std::size_t i = 0; i < eps_list.size(); ++i) {
        if (!(eps_list[i] > 0.0))
            throw std::invalid_argument("lab: epsilons must be positive");
        if (i > 0 && eps_list[i] >= eps_list[i - 1])
            throw std::invalid_argument("lab: epsilons must be strictly decreasing");
    }

    IdentityReport rep;
    rep.tolerance = tolerance;
    const double target = gen::eval(g, t, y, z);
    rep.rhs.assign(1, target);

    if (!std::isfinite(clip_level)) {
        // Unclipped linear payoff: only the entropic family has a closed
        // value, via its exponential moment.
        const auto* ent = std::get_if<gen::Entropic>(&g);
        if (ent == nullptr)
            throw ClosedFormUnavailable(
                "lab: the unclipped slope needs a closed form; pass a finite clip level");
        const stoch::QuadratureRule rule = stoch::gauss_hermite(cfg.n_nodes);
        for (double eps : eps_list) {
            const double a = 2.0 * ent->beta * z * std::sqrt(eps);
            double acc = 0.0;
            for (std::size_t q = 0; q < rule.nodes.size(); ++q)
                acc += rule.weights[q] * std::exp(a * rule.nodes[q]);
            rep.lhs.push_back(std::log(acc) / (2.0 * ent->beta) / eps);
        }
    } else {
        if (!(clip_level > 0.0))
            throw std::invalid_argument("lab: the clip level must be positive");
        // Clipped problem on [-C, C]: Dirichlet rows hold the drift-flowed
        // boundary payoff, which for a drift-free generator is exactly the
        // stopped claim y + z * (+-C).
        pde::SchemeParams sp = cfg.scheme;
        sp.boundary = pde::BoundaryKind::Dirichlet;
        const pde::SpatialGrid sg{-clip_level, clip_level, 1201};
        const pde::GenFn gf = genfn_of(g);
        for (double eps : eps_list) {
            stoch::TimeGrid tg(t, t + eps, 300);
            pde::PayoffFn phi = [y, z](double x) { return y + z * x; };
            pde::ValueSurface vs = pde::solve_markov(gf, phi, tg, sg, sp);
            rep.lhs.push_back((pde::g_expectation(vs, t, 0.0) - y) / eps);
        }
    }

    double mean = 0.0;
    for (double s : rep.lhs) mean += std::fabs(s - target);
    rep.mean_gap = mean / static_cast<double>(rep.lhs.size());

    const std::size_t n = rep.lhs.size();
    if (n >= 2) {
        const double e1 = eps_list[n - 2], e2 = eps_list[n - 1];
        const double s1 = rep.lhs[n - 2], s2 = rep.lhs[n - 1];
        rep.extrapolated = s2 + (s2 - s1) * e2 / (e1 - e2);
    } else {
        rep.extrapolated = rep.lhs[0];
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        num += (rep.lhs[i] - target) * eps_list[i];
        den += eps_list[i] * eps_list[i];
    }
    rep.fitted_slope_coeff = den > 0.0 ? num / den : 0.0;
    rep.sup_gap = std::fabs(rep.extrapolated - target);
    rep.pass = rep.sup_gap <= tolerance;
    rep.note = fmt("slope target %.8g, extrapolated %.8g", target, rep.extrapolated);
    return rep;
}

// ===== Gateaux derivative =====

IdentityReport gateaux_check(const gen::Generator& g, double y,
                             const risk::MarkovPayoff& X,
                             const std::vector<double>& eps_list,
                             double tolerance, const EngineConfig& cfg) {
    const auto* term = std::get_if<risk::Terminal>(&X.kind);
    if (term == nullptr)
        throw std::invalid_argument("lab: gateaux_check needs a terminal payoff");
    if (eps_list.empty())
        throw std::invalid_argument("lab: gateaux_check needs at least one epsilon");
    for (std::size_t i = 1; i < eps_list.size(); ++i)
        if (eps_list[i] >= eps_list[i - 1] || !(eps_list[i] > 0.0))
            throw std::invalid_argument("lab: epsilons must be positive and decreasing");

    {
        stoch::TimeGrid audit_tg(0.0, X.T, 8);
        gen::AuditReport audit =
            gen::audit_assumptions(g, gen::AuditGrid::default_for(audit_tg));
        if (!audit.a4_star_pass)
            throw std::invalid_argument(
                "lab: gateaux_check needs the two-sided y-partial bound; the audit failed");
    }

    const double T = X.T;
    const int n = std::max(200, steps_for(cfg, T));
    const double dt = T / n;

    // Backward RK4 on the unperturbed pair (Y, J), J(t) = int_t^T dy_g ds
    // along Y. The solution of the constant problem has Z = 0, so the
    // adjoint is deterministic, Gamma_T = exp(J(0)); a z-linear term at
    // z = 0 would break that and is rejected below.
    double yv = y;
    double jv = 0.0;
    double t = T;
    double max_dz = 0.0;
    for (int i = 0; i < n; ++i) {
        const double h = -dt;
        auto fy = [&](double s, double v) { return -gen::eval(g, s, v, 0.0); };
        auto fj = [&](double s, double v) { return -gen::eval_dy(g, s, v, 0.0); };
        max_dz = std::max(max_dz, std::fabs(gen::eval_dz(g, t, yv, 0.0)));
        const double k1 = fy(t, yv), j1 = fj(t, yv);
        const double k2 = fy(t + h / 2, yv + h * k1 / 2), j2 = fj(t + h / 2, yv + h * k1 / 2);
        const double k3 = fy(t + h / 2, yv + h * k2 / 2), j3 = fj(t + h / 2, yv + h * k2 / 2);
        const double k4 = fy(t + h, yv + h * k3), j4 = fj(t + h, yv + h * k3);
        yv += h * (k1 + 2 * k2 + 2 * k3 + k4) / 6;
        jv += h * (j1 + 2 * j2 + 2 * j3 + j4) / 6;
        t += h;
    }
    if (max_dz > 1e-12)
        throw ClosedFormUnavailable(
            "lab: a z-linear term at z = 0 needs the stochastic adjoint");
    const double gamma_T = std::exp(jv);
    const double mean_X =
        risk::expect_cond(X, 0.0, 0.0, [](double v) { return v; }, cfg.n_nodes);
    const double target = gamma_T * mean_X;

    IdentityReport rep;
    rep.tolerance = tolerance;
    rep.rhs.assign(1, target);

    // The base value goes through the same discrete operator as the bumped
    // ones so the discretization error cancels in the difference quotient.
    const pde::GenFn gf = genfn_of(g);
    const double base =
        solve_at_origin(gf, pde::PayoffFn([y](double) { return y; }), 0.0, T, cfg);
    for (double eps : eps_list) {
        pde::PayoffFn phi = [y, eps, f = term->phi](double x) { return y + eps * f(x); };
        const double bumped = solve_at_origin(gf, phi, 0.0, T, cfg);
        rep.lhs.push_back((bumped - base) / eps);
    }

    double mean = 0.0;
    for (double s : rep.lhs) mean += std::fabs(s - target);
    rep.mean_gap = mean / static_cast<double>(rep.lhs.size());
    const std::size_t m = rep.lhs.size();
    if (m >= 2) {
        const double e1 = eps_list[m - 2], e2 = eps_list[m - 1];
        rep.extrapolated =
            rep.lhs[m - 1] + (rep.lhs[m - 1] - rep.lhs[m - 2]) * e2 / (e1 - e2);
    } else {
        rep.extrapolated = rep.lhs[0];
    }
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        num += (rep.lhs[i] - target) * eps_list[i];
        den += eps_list[i] * eps_list[i];
    }
    rep.fitted_slope_coeff = den > 0.0 ? num / den : 0.0;
    rep.sup_gap = std::fabs(rep.extrapolated - target);
    rep.pass = rep.sup_gap <= tolerance;
    rep.note = fmt("Gamma_T %.8g, E[X] %.8g, base %.8g", gamma_T, mean_X, base);
    return rep;
}

// ===== consequence one =====

namespace {

// Doleans exponential of sum b_k dW_k with left-node coefficients.
double doleans(std::span<const double> b, std::span<const double> w, double dt) {
    double expo = 0.0;
    for (std::size_t k = 0; k + 1 < w.size(); ++k)
        expo += b[k] * (w[k + 1] - w[k]) - 0.5 * b[k] * b[k] * dt;
    return std::exp(expo);
}

IdentityReport finish_cons1(IdentityReport rep, double tolerance) {
    rep.tolerance = tolerance;
    double sup = 0.0, mean = 0.0;
    for (std::size_t i = 0; i < rep.lhs.size(); ++i) {
        const double gap = std::fabs(rep.lhs[i] - rep.rhs[i]);
        sup = std::max(sup, gap);
        mean += gap;
    }
    rep.sup_gap = sup;
    rep.mean_gap = rep.lhs.empty() ? 0.0 : mean / static_cast<double>(rep.lhs.size());
    rep.pass = rep.sup_gap <= tolerance;
    return rep;
}

IdentityReport cons1_deterministic(const gen::Generator& g, double y,
                                   const stoch::PathBatch& paths, double tolerance) {
    const stoch::TimeGrid& grid = paths.grid;
    const int n = grid.n_steps;
    const double dt = grid.dt();

    // The constant-terminal solution is path free: march Y backward once,
    // then read the two coefficient processes along it.
    std::vector<double> yv(static_cast<std::size_t>(n) + 1);
    yv[static_cast<std::size_t>(n)] = y;
    for (int i = n; i > 0; --i) {
        const double h = -dt;
        double t = grid.nodes[static_cast<std::size_t>(i)];
        double v = yv[static_cast<std::size_t>(i)];
        const double k1 = -gen::eval(g, t, v, 0.0);
        const double k2 = -gen::eval(g, t + h / 2, v + h * k1 / 2, 0.0);
        const double k3 = -gen::eval(g, t + h / 2, v + h * k2 / 2, 0.0);
        const double k4 = -gen::eval(g, t + h, v + h * k3, 0.0);
        yv[static_cast<std::size_t>(i) - 1] = v + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6;
    }
    std::vector<double> b(static_cast<std::size_t>(n));
    double dy_integral = 0.0;
    for (int k = 0; k < n; ++k) {
        const double tk = grid.nodes[static_cast<std::size_t>(k)];
        b[static_cast<std::size_t>(k)] = gen::eval_dz(g, tk, yv[static_cast<std::size_t>(k)], 0.0);
        dy_integral += gen::eval_dy(g, tk, yv[static_cast<std::size_t>(k)], 0.0) * dt;
    }

    IdentityReport rep;
    const std::size_t row = static_cast<std::size_t>(n) + 1;
    for (long p = 0; p < paths.n_paths; ++p) {
        std::span<const double> w(paths.values.data() + static_cast<std::size_t>(p) * row, row);
        rep.lhs.push_back(doleans(b, w, dt));
        // exp(-int dy_g) is the same number on every path, so its
        // normalized version is one by construction.
        rep.rhs.push_back(1.0);
    }
    rep.note = fmt("deterministic solution, exp(-int dy_g) = %.8g on every path",
                   std::exp(-dy_integral));
    return finish_cons1(std::move(rep), tolerance);
}

IdentityReport cons1_persistent(const gen::RandomDriftQuadratic& g,
                                const gen::PersistentDrift& pd, double y,
                                const stoch::PathBatch& paths, double tolerance) {
    const stoch::TimeGrid& grid = paths.grid;
    const double dt = grid.dt();
    const int i_obs = grid.index_of(pd.t_obs);
    std::function<double(double)> clamp = pd.clamp;
    if (!clamp) clamp = [](double v) { return std::tanh(v); };
    const double horizon = grid.T - pd.t_obs;
    const double beta2 = 2.0 * g.beta;
    const stoch::QuadratureRule rule = stoch::gauss_hermite(48);

    // Transformed value surface M(t, x) = E[exp(2 beta Ytilde_T) | W_t = x]
    // for t before the observation; the drift-adjusted terminal is
    // y + clamp(W_{t_obs}) * (T - t_obs). Z comes out of the surface as
    // (1 / 2 beta) d_x log M, so the Doleans coefficient is d_x log M.
    auto m_of = [&](double t, double x) {
        const double s = std::sqrt(pd.t_obs - t);
        double acc = 0.0;
        for (std::size_t q = 0; q < rule.nodes.size(); ++q)
            acc += rule.weights[q] *
                   std::exp(beta2 * (y + clamp(x + s * rule.nodes[q]) * horizon));
        return acc;
    };
    const double delta = 1e-5;

    IdentityReport rep;
    const std::size_t row = static_cast<std::size_t>(grid.n_steps) + 1;
    std::vector<double> b(static_cast<std::size_t>(grid.n_steps), 0.0);
    for (long p = 0; p < paths.n_paths; ++p) {
        std::span<const double> w(paths.values.data() + static_cast<std::size_t>(p) * row, row);
        for (int k = 0; k < i_obs; ++k) {
            const double tk = grid.nodes[static_cast<std::size_t>(k)];
            const double x = w[static_cast<std::size_t>(k)];
            const double m0 = m_of(tk, x);
            b[static_cast<std::size_t>(k)] =
                (m_of(tk, x + delta) - m_of(tk, x - delta)) / (2.0 * delta * m0);
        }
        // After the observation the transformed claim is frozen; Z and the
        // density coefficient both vanish there.
        rep.lhs.push_back(doleans(b, w, dt));
        rep.rhs.push_back(1.0);
    }
    rep.note = "persistent drift: LHS from the quadrature-built transform surface";
    return finish_cons1(std::move(rep), tolerance);
}

} // namespace

IdentityReport cons1_check(const gen::Generator& g, double y,
                           const stoch::PathBatch& paths, double tolerance) {
    if (paths.n_paths < 1 || paths.d != 1)
        throw std::invalid_argument("lab: cons1_check needs a nonempty scalar path batch");

    if (const auto* rdq = std::get_if<gen::RandomDriftQuadratic>(&g)) {
        return std::visit(
            overloaded{
                [&](const gen::IndicatorWindow&) -> IdentityReport {
                    // With a path-free drift integral the transformed claim
                    // is constant, hence Z = 0 and both sides are one.
                    double lo = std::numeric_limits<double>::infinity();
                    double hi = -lo;
                    const std::size_t row = static_cast<std::size_t>(paths.grid.n_steps) + 1;
                    for (long p = 0; p < paths.n_paths; ++p) {
                        std::span<const double> w(
                            paths.values.data() + static_cast<std::size_t>(p) * row, row);
                        const double total = gen::drift_integral(rdq->drift, paths.grid, w).total;
                        lo = std::min(lo, total);
                        hi = std::max(hi, total);
                    }
                    if (hi - lo > 1e-10)
                        throw ClosedFormUnavailable(
                            fmt("lab: the realized drift integral varies across paths "
                                "(spread %.3g); no closed solution surface is available",
                                hi - lo));
                    IdentityReport rep;
                    rep.lhs.assign(static_cast<std::size_t>(paths.n_paths), 1.0);
                    rep.rhs.assign(static_cast<std::size_t>(paths.n_paths), 1.0);
                    rep.note = fmt("drift integral constant across paths (spread %.3g), Z = 0",
                                   hi - lo);
                    return finish_cons1(std::move(rep), tolerance);
                },
                [&](const gen::SignedWindow&) -> IdentityReport {
                    double worst = 0.0;
                    const std::size_t row = static_cast<std::size_t>(paths.grid.n_steps) + 1;
                    for (long p = 0; p < paths.n_paths; ++p) {
                        std::span<const double> w(
                            paths.values.data() + static_cast<std::size_t>(p) * row, row);
                        worst = std::max(
                            worst,
                            std::fabs(gen::drift_integral(rdq->drift, paths.grid, w).total));
                    }
                    if (worst > 1e-10)
                        throw ClosedFormUnavailable(
                            fmt("lab: the signed window does not integrate to zero "
                                "on this grid (max |int h| = %.3g)",
                                worst));
                    IdentityReport rep;
                    rep.lhs.assign(static_cast<std::size_t>(paths.n_paths), 1.0);
                    rep.rhs.assign(static_cast<std::size_t>(paths.n_paths), 1.0);
                    rep.note = fmt("max |int h| = %.3g across paths, Z = 0", worst);
                    return finish_cons1(std::move(rep), tolerance);
                },
                [&](const gen::PersistentDrift& pd) {
                    return cons1_persistent(*rdq, pd, y, paths, tolerance);
                },
            },
            rdq->drift);
    }
    if (std::holds_alternative<gen::ItoWentzell>(g))
        throw ClosedFormUnavailable(
            "lab: the Ito-Wentzell family fails the identity's hypotheses; "
            "see the assumption audit");
    return cons1_deterministic(g, y, paths, tolerance);
}

// ===== Brownian scaling invariance =====

IdentityReport brownian_invariance_check(double lambda, int o_sign, double clip_level,
                                         double eps, double t, double s,
                                         long n_paths, std::uint64_t seed,
                                         double right_clip_level) {
    if (!(lambda > 0.0) || lambda > 1.0)
        throw std::invalid_argument("lab: lambda must lie in (0, 1]");
    if (o_sign != 1 && o_sign != -1)
        throw std::invalid_argument("lab: the orthogonal factor must be +1 or -1");
    if (!(clip_level > 0.0) || !(eps > 0.0))
        throw std::invalid_argument("lab: clip level and epsilon must be positive");
    if (s < 0.0 || s > t)
        throw std::invalid_argument("lab: the target window must not start after the source");
    if (n_paths < 2)
        throw std::invalid_argument("lab: at least two paths are required");

    const double t_end = t + eps;
    const int per_unit = 2000;
    const int n = std::max(1, static_cast<int>(std::lround(t_end * per_unit)));
    const double dt = t_end / n;
    auto node = [&](double u, const char* what) {
        const long i = std::lround(u / dt);
        if (std::fabs(static_cast<double>(i) * dt - u) > 1e-9)
            throw std::invalid_argument(
                fmt("lab: %s must sit on the 1/%d time grid", what, per_unit));
        return i;
    };
    const long i_t = node(t, "t");
    const long i_s = node(s, "s");
    node(s + lambda * lambda * eps, "s + lambda^2 eps");
    const double window_b = lambda * lambda * eps;
    const double level_b = right_clip_level > 0.0 ? right_clip_level : lambda * clip_level;

    stoch::TimeGrid grid(0.0, t_end, n);
    std::vector<double> a(static_cast<std::size_t>(n_paths));
    std::vector<double> b(static_cast<std::size_t>(n_paths));

    stoch::for_each_path(grid, 1, n_paths, seed,
                         [&](long p, std::span<const double> w) {
                             const double u = stoch::exit_time_single(
                                 grid, w, t, stoch::LevelExit{0.0, clip_level});
                             const long i_end = std::lround(std::min(u, t_end) / dt);
                             a[static_cast<std::size_t>(p)] =
                                 lambda * o_sign *
                                 (w[static_cast<std::size_t>(i_end)] -
                                  w[static_cast<std::size_t>(i_t)]);
                         });
    stoch::for_each_path(grid, 1, n_paths, seed + 1,
                         [&](long p, std::span<const double> w) {
                             const double u = stoch::exit_time_single(
                                 grid, w, s, stoch::LevelExit{0.0, level_b});
                             const long i_end = std::lround(std::min(u, s + window_b) / dt);
                             b[static_cast<std::size_t>(p)] =
                                 w[static_cast<std::size_t>(i_end)] -
                                 w[static_cast<std::size_t>(i_s)];
                         });

    const stoch::KsResult ks = stoch::ks_two_sample(a, b);
    IdentityReport rep;
    rep.statistic = ks.statistic;
    rep.p_value = ks.p_value;
    rep.tolerance = 0.01;
    rep.pass = ks.p_value > 0.01;
    double clip_a = 0.0, clip_b = 0.0;
    for (double v : a) clip_a += std::fabs(v) >= lambda * clip_level * (1 - 1e-9) ? 1.0 : 0.0;
    for (double v : b) clip_b += std::fabs(v) >= level_b * (1 - 1e-9) ? 1.0 : 0.0;
    rep.note = fmt("KS D = %.5g, p = %.5g, clipped mass %.4f vs %.4f",
                   ks.statistic, ks.p_value, clip_a / static_cast<double>(n_paths),
                   clip_b / static_cast<double>(n_paths));
    return rep;
}

// ===== quadratic homogeneity =====

IdentityReport quadratic_homogeneity_check(const pde::GenFn& g,
                                           const HomogeneitySamples& samples,
                                           double tolerance) {
    if (samples.ts.empty() || samples.ys.empty() || samples.zs.empty() ||
        samples.lambdas.empty())
        throw std::invalid_argument("lab: the homogeneity sample box is empty");

    IdentityReport rep;
    rep.tolerance = tolerance;
    double sup = 0.0, mean = 0.0;
    std::size_t count = 0;
    double worst_t = 0.0, worst_y = 0.0, worst_z = 0.0, worst_l = 0.0;
    for (double t : samples.ts)
        for (double y : samples.ys)
            for (double z : samples.zs)
                for (double l : samples.lambdas)
                    for (int o : {1, -1}) {
                        const double lhs = g(t, y, l * o * z);
                        const double rhs = l * l * g(t, y, z);
                        rep.lhs.push_back(lhs);
                        rep.rhs.push_back(rhs);
                        const double gap = std::fabs(lhs - rhs);
                        if (gap > sup) {
                            sup = gap;
                            worst_t = t;
                            worst_y = y;
                            worst_z = z;
                            worst_l = l * o;
                        }
                        mean += gap;
                        ++count;
                    }
    rep.sup_gap = sup;
    rep.mean_gap = mean / static_cast<double>(count);
    rep.pass = sup <= tolerance;
    rep.note = fmt("worst sample (t, y, z, lambda O) = (%.2f, %.2f, %.2f, %.2f)",
                   worst_t, worst_y, worst_z, worst_l);
    return rep;
}

} // namespace qbsde::lab
