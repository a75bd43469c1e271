#include "qbsde/risk.hpp"

#include "qbsde/numerics.hpp"
#include "qbsde/stochastic.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace qbsde::risk {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string fmt(const char* pattern, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), pattern, args...);
    return std::string(buf);
}

// Discrete conditional law of the payoff given W_t = x: values and weights,
// weights summing to one. Quadrature variants produce one atom per Hermite
// node, the branch indicator exactly two.
struct Atoms {
    std::vector<double> v;
    std::vector<double> w;
};

Atoms gaussian_atoms(const std::function<double(double)>& phi, double center,
                     double variance, int n_nodes) {
    Atoms a;
    if (variance < 1e-14) {
        a.v = {phi(center)};
        a.w = {1.0};
        return a;
    }
    auto rule = stoch::gauss_hermite(n_nodes);
    double sd = std::sqrt(variance);
    a.v.reserve(rule.nodes.size());
    for (double z : rule.nodes) a.v.push_back(phi(center + sd * z));
    a.w = rule.weights;
    return a;
}

Atoms conditional_atoms(const MarkovPayoff& X, double t, double x, int n_nodes) {
    if (n_nodes < 1) throw std::invalid_argument("expect_cond: n_nodes must be positive");
    if (!(X.T > 0.0)) throw std::invalid_argument("expect_cond: payoff horizon must be positive");
    if (t < -1e-12 || t > X.T + 1e-12)
        throw std::invalid_argument("expect_cond: conditioning time outside [0, T]");

    return std::visit(
        overloaded{
            [&](const Terminal& p) {
                return gaussian_atoms(p.phi, x, std::max(X.T - t, 0.0), n_nodes);
            },
            [&](const Early& p) {
                if (p.t1 < -1e-12 || p.t1 > X.T + 1e-12)
                    throw std::invalid_argument("expect_cond: early observation time outside the horizon");
                if (t > p.t1 + 1e-12)
                    throw std::invalid_argument(
                        "expect_cond: conditioning past t1, the value is no longer a function of the state");
                return gaussian_atoms(p.phi, x, std::max(p.t1 - t, 0.0), n_nodes);
            },
            [&](const Increment& p) {
                if (p.t1 < -1e-12 || p.t2 <= p.t1 || p.t2 > X.T + 1e-12)
                    throw std::invalid_argument("expect_cond: increment times must satisfy 0 <= t1 < t2 <= T");
                if (t > p.t1 + 1e-12)
                    throw std::invalid_argument(
                        "expect_cond: conditioning past t1, the value is no longer a function of the state");
                // The increment is independent of the state before t1, so the
                // conditional law does not involve x at all.
                return gaussian_atoms(p.phi, 0.0, p.t2 - p.t1, n_nodes);
            },
            [&](const IndicatorOfBranch& p) {
                if (p.t_obs <= 0.0 || p.t_obs > X.T + 1e-12)
                    throw std::invalid_argument("expect_cond: branch observation time outside (0, T]");
                if (t > p.t_obs + 1e-12)
                    throw std::invalid_argument(
                        "expect_cond: conditioning past t_obs, the value is no longer a function of the state");
                Atoms a;
                double dt = p.t_obs - t;
                if (dt < 1e-14) {
                    a.v = {x >= 0.0 ? p.c : 0.0};
                    a.w = {1.0};
                    return a;
                }
                double p_up = stoch::normal_cdf(x / std::sqrt(dt));
                a.v = {p.c, 0.0};
                a.w = {p_up, 1.0 - p_up};
                return a;
            }},
        X.kind);
}

std::function<double(double)> deterministic_phi(const MarkovPayoff& X) {
    return std::visit(
        overloaded{[](const Terminal& p) { return p.phi; },
                   [](const Early& p) { return p.phi; },
                   [](const Increment& p) { return p.phi; },
                   [](const IndicatorOfBranch& p) {
                       double c = p.c;
                       return std::function<double(double)>(
                           [c](double u) { return u >= 0.0 ? c : 0.0; });
                   }},
        X.kind);
}

} // namespace

// ===== losses =====

LossFunction LossFunction::linear() {
    return {"linear", [](double u) { return u; }, [](double) { return 1.0; }};
}

LossFunction LossFunction::exponential(double beta) {
    if (!(beta > 0.0)) throw std::invalid_argument("exponential loss needs beta > 0");
    return {"exponential",
            [beta](double u) { return std::expm1(2.0 * beta * u); },
            [beta](double u) { return 2.0 * beta * std::exp(2.0 * beta * u); }};
}

LossFunction LossFunction::piecewise_convex() {
    return {"piecewise_convex",
            [](double u) { return u >= 0.0 ? std::expm1(u) : u; },
            [](double u) { return u >= 0.0 ? std::exp(u) : 1.0; }};
}

// ===== payoff helpers =====

double payoff_sup_sample(const MarkovPayoff& X, int n_samples) {
    if (n_samples < 2) throw std::invalid_argument("payoff_sup_sample: need at least two samples");
    if (const auto* b = std::get_if<IndicatorOfBranch>(&X.kind))
        return std::max(std::fabs(b->c), 0.0);
    auto phi = deterministic_phi(X);
    // Widths beyond ten standard deviations of the terminal law contribute
    // weight below 1e-23, so this box covers every quadrature argument used.
    double half = 10.0 + 10.0 * std::sqrt(std::max(X.T, 1e-8));
    double sup = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        double u = -half + 2.0 * half * static_cast<double>(i) / (n_samples - 1);
        sup = std::max(sup, std::fabs(phi(u)));
    }
    return sup;
}

double expect_cond(const MarkovPayoff& X, double t, double x,
                   const std::function<double(double)>& F, int n_nodes) {
    auto a = conditional_atoms(X, t, x, n_nodes);
    double s = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) s += a.w[i] * F(a.v[i]);
    return s;
}

// ===== evaluators =====

double entropic_rho(const MarkovPayoff& X, double gamma, double t, double x,
                    int n_nodes) {
    if (!(gamma > 0.0)) throw std::invalid_argument("entropic_rho: gamma must be positive");
    auto a = conditional_atoms(X, t, x, n_nodes);
    double vmax = a.v[0], amax = 0.0;
    for (double v : a.v) {
        vmax = std::max(vmax, v);
        amax = std::max(amax, std::fabs(v));
    }
    if (gamma * amax > 700.0)
        throw OverflowGuard("entropic_rho: exponent gamma * |X| exceeds the overflow budget");
    // Shifted log-sum-exp: every exponent is nonpositive and the atom at the
    // maximum contributes weight of order one, so the log argument stays away
    // from both overflow and zero.
    double s = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i)
        s += a.w[i] * std::exp(gamma * (a.v[i] - vmax));
    return vmax + std::log(s) / gamma;
}

double shortfall_rho(const MarkovPayoff& X, const LossFunction& loss, double t,
                     double x, int n_nodes) {
    if (!loss.l || !loss.dl) throw std::invalid_argument("shortfall_rho: loss is incomplete");
    auto a = conditional_atoms(X, t, x, n_nodes);
    double vmin = a.v[0], vmax = a.v[0];
    for (double v : a.v) {
        vmin = std::min(vmin, v);
        vmax = std::max(vmax, v);
    }
    double lo = vmin - 1.0, hi = vmax + 1.0;
    auto level = [&](double m) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.v.size(); ++i) s += a.w[i] * loss.l(a.v[i] - m);
        return s;
    };
    auto slope = [&](double m) {
        double s = 0.0;
        for (std::size_t i = 0; i < a.v.size(); ++i) s += a.w[i] * loss.dl(a.v[i] - m);
        return -s;
    };
    double flo = level(lo), fhi = level(hi);
    if (flo == 0.0) return lo;
    if (fhi == 0.0) return hi;
    if (flo * fhi > 0.0)
        throw BracketFailure(
            "shortfall_rho: expectation of the loss keeps one sign across the bracket, "
            "the loss is not strictly increasing through zero");
    return num::bisect_newton(level, slope, lo, hi, 1e-10).x;
}

double ce_rho(const MarkovPayoff& X, const transforms::FlowTable& flow,
              const transforms::MonotoneMap& psi, double t, double x,
              int n_nodes) {
    if (X.T > flow.t_grid().T + 1e-9 || t < flow.t_grid().t0 - 1e-9)
        throw std::invalid_argument("ce_rho: flow table does not span the payoff horizon");
    auto a = conditional_atoms(X, t, x, n_nodes);
    double mean = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i)
        mean += a.w[i] * psi.map(flow.v(X.T, a.v[i]));
    return flow.v_inv(t, psi.inverse(mean));
}

double rho_eval(const RiskMeasure& rm, const MarkovPayoff& X, double t, double x,
                int n_nodes) {
    return std::visit(
        overloaded{[&](const EntropicRM& m) { return entropic_rho(X, m.gamma, t, x, n_nodes); },
                   [&](const CertaintyEquivalentRM& m) {
                       return ce_rho(X, m.flow, m.psi, t, x, n_nodes);
                   },
                   [&](const ShortfallRM& m) {
                       return shortfall_rho(X, m.loss, t, x, n_nodes);
                   }},
        rm);
}

double tc_gap(const RiskMeasure& rm, const MarkovPayoff& X, double s, int n_nodes) {
    if (s < 0.0 || s > X.T + 1e-12)
        throw std::invalid_argument("tc_gap: split time outside [0, T]");
    double whole = rho_eval(rm, X, 0.0, 0.0, n_nodes);
    // The intermediate value is a function of the state at s; feeding it back
    // in as a terminal payoff with horizon s realizes the composition with a
    // second quadrature layer on top of the first.
    auto profile = [&](double y) { return rho_eval(rm, X, s, y, n_nodes); };
    MarkovPayoff stage{Terminal{profile}, s};
    double nested = rho_eval(rm, stage, 0.0, 0.0, n_nodes);
    return std::fabs(nested - whole);
}

// ===== axiom audit =====

AxiomSampleSet AxiomSampleSet::default_catalog(double T) {
    AxiomSampleSet s;
    s.T = T;
    s.bases = {
        [](double u) { return std::tanh(u); },
        [](double u) { return 0.8 * std::sin(u); },
        [](double u) { return u / (1.0 + u * u); },
    };
    s.bumps = {
        [](double) { return 0.3; },
        [](double u) { return 0.2 * (1.0 + std::tanh(u)); },
        [](double u) { return 0.4 * u * u / (1.0 + u * u); },
    };
    s.lambdas = {0.25, 0.5, 0.75};
    s.cash = {-0.75, -0.25, 0.5, 1.0};
    return s;
}

AxiomsReport axioms_audit(const RiskMeasure& rm, const AxiomSampleSet& samples) {
    if (samples.bases.empty())
        throw std::invalid_argument("axioms_audit: sample set needs at least one base payoff");
    auto rho_of = [&](const std::function<double(double)>& f) {
        return rho_eval(rm, MarkovPayoff{Terminal{f}, samples.T}, 0.0, 0.0, samples.n_nodes);
    };

    AxiomsReport rep;
    rep.rho_zero = rho_of([](double) { return 0.0; });
    rep.normalized = std::fabs(rep.rho_zero) <= 1e-8;

    std::vector<double> base_val(samples.bases.size());
    for (std::size_t i = 0; i < samples.bases.size(); ++i) base_val[i] = rho_of(samples.bases[i]);

    double worst_mono = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < samples.bases.size(); ++i) {
        for (std::size_t j = 0; j < samples.bumps.size(); ++j) {
            auto bumped = [&, i, j](double u) { return samples.bases[i](u) + samples.bumps[j](u); };
            double up = rho_of(bumped);
            double viol = base_val[i] - up;
            if (viol > worst_mono) {
                worst_mono = viol;
                rep.monotone_witness =
                    fmt("base %zu + bump %zu: rho %.6g vs %.6g", i, j, base_val[i], up);
            }
            if (up - base_val[i] > rep.strict_monotone_rise) {
                rep.strict_monotone_rise = up - base_val[i];
                rep.strict_monotone_witness =
                    fmt("rho rose by %.6g on base %zu with bump %zu", up - base_val[i], i, j);
            }
        }
    }
    rep.monotone_worst = worst_mono;
    rep.monotone_pass = worst_mono <= 1e-10;
    if (rep.strict_monotone_witness.empty())
        rep.strict_monotone_witness = "no strict increase observed on the sampled pairs";

    double worst_cvx = -std::numeric_limits<double>::infinity();
    if (samples.bases.size() < 2 || samples.lambdas.empty()) {
        worst_cvx = 0.0;
        rep.convex_witness = "fewer than two base payoffs sampled";
    }
    for (std::size_t i = 0; i + 1 < samples.bases.size(); ++i) {
        for (std::size_t k = i + 1; k < samples.bases.size(); ++k) {
            for (double lam : samples.lambdas) {
                auto mix = [&, i, k, lam](double u) {
                    return lam * samples.bases[i](u) + (1.0 - lam) * samples.bases[k](u);
                };
                double excess = rho_of(mix) - (lam * base_val[i] + (1.0 - lam) * base_val[k]);
                if (excess > worst_cvx) {
                    worst_cvx = excess;
                    rep.convex_witness =
                        fmt("bases %zu,%zu at lambda %.2f: excess %.3g", i, k, lam, excess);
                }
            }
        }
    }
    rep.convex_worst = worst_cvx;
    rep.convex_pass = worst_cvx <= 1e-9;

    double worst_cash = -1.0;
    for (std::size_t i = 0; i < samples.bases.size(); ++i) {
        for (double c : samples.cash) {
            auto shifted = [&, i, c](double u) { return samples.bases[i](u) + c; };
            double gap = std::fabs(rho_of(shifted) - base_val[i] - c);
            if (gap > worst_cash) {
                worst_cash = gap;
                rep.cash_witness = fmt("base %zu, c = %.2f: gap %.3g", i, c, gap);
            }
        }
    }
    rep.cash_additive_gap = std::max(worst_cash, 0.0);
    rep.cash_additive_pass = rep.cash_additive_gap <= 1e-8;
    return rep;
}

std::string AxiomsReport::to_json() const {
    nlohmann::json j;
    j["monotone"] = {{"pass", monotone_pass},
                     {"gap", monotone_worst},
                     {"worst_witness", monotone_witness}};
    j["convex"] = {{"pass", convex_pass},
                   {"gap", convex_worst},
                   {"worst_witness", convex_witness}};
    j["cash_additive"] = {{"pass", cash_additive_pass},
                          {"gap", cash_additive_gap},
                          {"worst_witness", cash_witness}};
    j["normalized"] = {{"pass", normalized},
                       {"gap", std::fabs(rho_zero)},
                       {"worst_witness", "rho at the zero payoff"}};
    j["strict_monotone"] = {{"pass", strict_monotone_rise > 0.0},
                            {"gap", strict_monotone_rise},
                            {"worst_witness", strict_monotone_witness}};
    return j.dump(2);
}

std::string risk_csv_row(const std::string& measure, const std::string& payoff,
                         double t, double value) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%s,%s,%.12g,%.12g", measure.c_str(), payoff.c_str(), t,
                  value);
    return std::string(buf);
}

} // namespace qbsde::risk
