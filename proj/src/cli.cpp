#include "qbsde/cli.hpp"

#include "qbsde/generators.hpp"
#include "qbsde/lab.hpp"
#include "qbsde/pde_solver.hpp"
#include "qbsde/risk.hpp"
#include "qbsde/stochastic.hpp"
#include "qbsde/transforms.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace qbsde::cli {

using nlohmann::json;

namespace {

// ===== small utilities =====

std::string fmt12(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

[[noreturn]] void fail(const std::string& where, const std::string& what) {
    if (where.empty()) throw ConfigError(what);
    throw ConfigError(where + ": " + what);
}

std::string join_keys(const std::vector<std::string>& keys) {
    std::string out;
    for (const auto& k : keys) {
        if (!out.empty()) out += ", ";
        out += k;
    }
    return out;
}

// ===== schema primitives =====
//
// Every object is checked against an explicit key list; a field the schema
// does not know is an error, not a warning, so typos cannot silently fall
// back to defaults.

void expect_object(const json& j, const std::string& where) {
    if (!j.is_object()) fail(where, "expected an object");
}

void check_keys(const json& j, const std::string& where,
                const std::vector<std::string>& required,
                const std::vector<std::string>& optional) {
    expect_object(j, where);
    for (const auto& k : required)
        if (!j.contains(k)) fail(where, "missing required field \"" + k + "\"");
    for (const auto& item : j.items()) {
        const std::string& k = item.key();
        const bool known =
            std::find(required.begin(), required.end(), k) != required.end() ||
            std::find(optional.begin(), optional.end(), k) != optional.end();
        if (!known)
            fail(where, "unknown field \"" + k + "\" (known fields: " +
                            join_keys(required) + (required.empty() ? "" : ", ") +
                            join_keys(optional) + ")");
    }
}

double num_at(const json& j, const std::string& where, const std::string& key) {
    if (!j.contains(key)) fail(where, "missing required field \"" + key + "\"");
    const json& v = j.at(key);
    if (!v.is_number()) fail(where + "." + key, "expected a number");
    return v.get<double>();
}

double num_or(const json& j, const std::string& where, const std::string& key,
              double dflt) {
    if (!j.contains(key)) return dflt;
    const json& v = j.at(key);
    if (!v.is_number()) fail(where + "." + key, "expected a number");
    return v.get<double>();
}

long int_at(const json& j, const std::string& where, const std::string& key,
            long dflt) {
    if (!j.contains(key)) return dflt;
    const json& v = j.at(key);
    if (!v.is_number_integer()) fail(where + "." + key, "expected an integer");
    return v.get<long>();
}

std::string str_at(const json& j, const std::string& where, const std::string& key) {
    if (!j.contains(key)) fail(where, "missing required field \"" + key + "\"");
    const json& v = j.at(key);
    if (!v.is_string()) fail(where + "." + key, "expected a string");
    return v.get<std::string>();
}

std::string str_or(const json& j, const std::string& where, const std::string& key,
                   const std::string& dflt) {
    if (!j.contains(key)) return dflt;
    const json& v = j.at(key);
    if (!v.is_string()) fail(where + "." + key, "expected a string");
    return v.get<std::string>();
}

bool bool_or(const json& j, const std::string& where, const std::string& key,
             bool dflt) {
    if (!j.contains(key)) return dflt;
    const json& v = j.at(key);
    if (!v.is_boolean()) fail(where + "." + key, "expected a boolean");
    return v.get<bool>();
}

std::vector<double> num_array_at(const json& j, const std::string& where,
                                 const std::string& key) {
    if (!j.contains(key)) fail(where, "missing required field \"" + key + "\"");
    const json& v = j.at(key);
    if (!v.is_array() || v.empty()) fail(where + "." + key, "expected a nonempty array");
    std::vector<double> out;
    for (const json& e : v) {
        if (!e.is_number()) fail(where + "." + key, "expected numbers only");
        out.push_back(e.get<double>());
    }
    return out;
}

// Experiment names become file stems, so keep them shell and filesystem
// friendly.
void validate_name(const std::string& name) {
    if (name.empty()) fail("name", "must be nonempty");
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
                        (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
        if (!ok) fail("name", "character '" + std::string(1, c) +
                                  "' not allowed (use letters, digits, _ - .)");
    }
}

// ===== function forms =====
//
// Scalar profiles (payoffs, quadratic coefficients, window shapes) come in
// through a small named-form registry; each form carries its exact
// derivative so audits never fall back to finite differences.

struct Fn1 {
    std::function<double(double)> f;
    std::function<double(double)> df;
};

Fn1 fn_from(const json& j, const std::string& where) {
    expect_object(j, where);
    const std::string form = str_at(j, where, "form");
    if (form == "constant") {
        check_keys(j, where, {"form", "value"}, {});
        const double v = num_at(j, where, "value");
        return {[v](double) { return v; }, [](double) { return 0.0; }};
    }
    if (form == "affine") {
        check_keys(j, where, {"form", "slope"}, {"intercept"});
        const double a = num_at(j, where, "slope");
        const double b = num_or(j, where, "intercept", 0.0);
        return {[a, b](double u) { return a * u + b; }, [a](double) { return a; }};
    }
    if (form == "tanh") {
        check_keys(j, where, {"form"}, {});
        return {[](double u) { return std::tanh(u); },
                [](double u) {
                    const double c = std::cosh(u);
                    return 1.0 / (c * c);
                }};
    }
    if (form == "tanh-affine") {
        check_keys(j, where, {"form", "base", "gain"}, {});
        const double b = num_at(j, where, "base");
        const double g = num_at(j, where, "gain");
        return {[b, g](double u) { return b + g * std::tanh(u); },
                [g](double u) {
                    const double c = std::cosh(u);
                    return g / (c * c);
                }};
    }
    if (form == "step") {
        check_keys(j, where, {"form", "before", "after", "at"}, {});
        const double a = num_at(j, where, "before");
        const double b = num_at(j, where, "after");
        const double c = num_at(j, where, "at");
        return {[a, b, c](double u) { return u < c ? a : b; },
                [](double) { return 0.0; }};
    }
    if (form == "sin") {
        check_keys(j, where, {"form", "amplitude", "frequency"}, {});
        const double a = num_at(j, where, "amplitude");
        const double w = num_at(j, where, "frequency");
        return {[a, w](double u) { return a * std::sin(w * u); },
                [a, w](double u) { return a * w * std::cos(w * u); }};
    }
    if (form == "rational") {
        check_keys(j, where, {"form"}, {});
        return {[](double u) { return u / (1.0 + u * u); },
                [](double u) {
                    const double d = 1.0 + u * u;
                    return (1.0 - u * u) / (d * d);
                }};
    }
    fail(where + ".form",
         "unknown form \"" + form +
             "\" (known: constant, affine, tanh, tanh-affine, step, sin, rational)");
}

// ===== engine block =====

struct Engine {
    lab::EngineConfig cfg;
    json resolved;
};

Engine engine_from(const json& config, std::uint64_t seed) {
    lab::EngineConfig cfg;
    cfg.seed = seed;
    json r;
    if (config.contains("engine")) {
        const json& e = config.at("engine");
        check_keys(e, "engine", {},
                   {"n_steps", "x_min", "x_max", "n_x", "n_nodes", "n_mc_steps",
                    "n_paths"});
        cfg.n_steps = static_cast<int>(int_at(e, "engine", "n_steps", cfg.n_steps));
        cfg.sg.x_min = num_or(e, "engine", "x_min", cfg.sg.x_min);
        cfg.sg.x_max = num_or(e, "engine", "x_max", cfg.sg.x_max);
        cfg.sg.n_x = static_cast<int>(int_at(e, "engine", "n_x", cfg.sg.n_x));
        cfg.n_nodes = static_cast<int>(int_at(e, "engine", "n_nodes", cfg.n_nodes));
        cfg.n_mc_steps =
            static_cast<int>(int_at(e, "engine", "n_mc_steps", cfg.n_mc_steps));
        cfg.n_paths = int_at(e, "engine", "n_paths", cfg.n_paths);
    }
    if (cfg.n_steps <= 0 || cfg.sg.n_x < 3 || cfg.sg.x_min >= cfg.sg.x_max)
        fail("engine", "grid parameters out of range");
    r["n_steps"] = cfg.n_steps;
    r["x_min"] = cfg.sg.x_min;
    r["x_max"] = cfg.sg.x_max;
    r["n_x"] = cfg.sg.n_x;
    r["n_nodes"] = cfg.n_nodes;
    r["n_mc_steps"] = cfg.n_mc_steps;
    r["n_paths"] = cfg.n_paths;
    return {cfg, r};
}

// ===== stopping times, generators, pairs, payoffs, measures =====

stoch::StoppingTimeSpec stopping_from(const json& j, const std::string& where) {
    const std::string kind = str_at(j, where, "kind");
    if (kind == "ThresholdBranch") {
        check_keys(j, where, {"kind", "t_obs", "t_low", "t_high"}, {});
        return stoch::ThresholdBranch{num_at(j, where, "t_obs"),
                                      num_at(j, where, "t_low"),
                                      num_at(j, where, "t_high")};
    }
    if (kind == "LevelExit") {
        check_keys(j, where, {"kind", "level"}, {"center"});
        return stoch::LevelExit{num_or(j, where, "center", 0.0),
                                num_at(j, where, "level")};
    }
    fail(where + ".kind",
         "unknown stopping time \"" + kind + "\" (known: ThresholdBranch, LevelExit)");
}

gen::Generator generator_from(const json& j, const std::string& where) {
    const std::string family = str_at(j, where, "family");
    if (family == "Entropic") {
        check_keys(j, where, {"family", "beta"}, {});
        return gen::Entropic{num_at(j, where, "beta")};
    }
    if (family == "PureQuadratic") {
        check_keys(j, where, {"family", "k"}, {});
        Fn1 k = fn_from(j.at("k"), where + ".k");
        return gen::PureQuadratic{k.f, k.df};
    }
    if (family == "TimeVaryingQuadratic") {
        check_keys(j, where, {"family", "k"}, {});
        Fn1 k = fn_from(j.at("k"), where + ".k");
        return gen::TimeVaryingQuadratic{k.f};
    }
    if (family == "DriftQuadratic") {
        // h(t, y) = a y with f = f0 exp(a t) solving the compatibility PDE
        // exactly; f_shift knocks the pair out of the compatible family on
        // purpose (falsification runs).
        check_keys(j, where, {"family", "h_linear", "f0"}, {"f_shift"});
        const double a = num_at(j, where, "h_linear");
        const double c = num_at(j, where, "f0");
        const double d = num_or(j, where, "f_shift", 0.0);
        transforms::DriftFunction h{[a](double, double y) { return a * y; },
                                    [a](double, double) { return a; },
                                    [](double, double) { return 0.0; }};
        transforms::ScalarField f{
            [a, c, d](double t, double) { return c * std::exp(a * t) + d; },
            [a, c](double t, double) { return a * c * std::exp(a * t); },
            [](double, double) { return 0.0; }};
        return gen::DriftQuadratic{h, f};
    }
    if (family == "RandomDriftQuadratic") {
        check_keys(j, where, {"family", "beta", "drift"}, {});
        const double beta = num_at(j, where, "beta");
        const json& dj = j.at("drift");
        const std::string dw = where + ".drift";
        const std::string kind = str_at(dj, dw, "kind");
        gen::DriftProcessSpec drift;
        if (kind == "IndicatorWindow") {
            check_keys(dj, dw, {"kind", "eps_w", "tau"}, {});
            drift = gen::IndicatorWindow{stopping_from(dj.at("tau"), dw + ".tau"),
                                         num_at(dj, dw, "eps_w")};
        } else if (kind == "SignedWindow") {
            // One full sine period over the window keeps the shape mean-free
            // before the engine's exact support correction even kicks in.
            check_keys(dj, dw, {"kind", "t_obs", "window"}, {});
            std::vector<double> w = num_array_at(dj, dw, "window");
            if (w.size() != 2 || w[0] >= w[1])
                fail(dw + ".window", "expected [a, b] with a < b");
            const double lo = w[0], hi = w[1];
            drift = gen::SignedWindow{
                num_at(dj, dw, "t_obs"),
                [lo, hi](double t) {
                    if (t <= lo || t >= hi) return 0.0;
                    return std::sin(2.0 * M_PI * (t - lo) / (hi - lo));
                },
                {}};
        } else if (kind == "PersistentDrift") {
            check_keys(dj, dw, {"kind", "t_obs"}, {});
            drift = gen::PersistentDrift{num_at(dj, dw, "t_obs"), {}};
        } else {
            fail(dw + ".kind",
                 "unknown drift \"" + kind +
                     "\" (known: IndicatorWindow, SignedWindow, PersistentDrift)");
        }
        return gen::RandomDriftQuadratic{drift, beta};
    }
    if (family == "ItoWentzell") {
        check_keys(j, where, {"family", "amplitude"}, {});
        const double a = num_at(j, where, "amplitude");
        return gen::ItoWentzell{
            [a](double t) { return a * std::sin(M_PI * t); },
            [a](double t) { return a * M_PI * std::cos(M_PI * t); },
            [](double u) { return std::tanh(u); },
            [](double u) {
                const double c = std::cosh(u);
                return 1.0 / (c * c);
            },
            [](double u) {
                const double c = std::cosh(u);
                return -2.0 * std::tanh(u) / (c * c);
            }};
    }
    fail(where + ".family",
         "unknown family \"" + family +
             "\" (known: Entropic, PureQuadratic, TimeVaryingQuadratic, "
             "DriftQuadratic, RandomDriftQuadratic, ItoWentzell)");
}

lab::PayoffPair pair_from(const json& j, const std::string& where) {
    const std::string kind = str_at(j, where, "kind");
    lab::PayoffPair pair;
    pair.T = num_or(j, where, "T", 1.0);
    if (kind == "Reflection") {
        check_keys(j, where, {"kind", "phi"}, {"T"});
        pair.kind = lab::Reflection{fn_from(j.at("phi"), where + ".phi").f};
        return pair;
    }
    if (kind == "IncrementShift") {
        check_keys(j, where, {"kind", "phi"}, {"T", "t1"});
        pair.kind = lab::IncrementShift{fn_from(j.at("phi"), where + ".phi").f,
                                        num_or(j, where, "t1", 0.5)};
        return pair;
    }
    if (kind == "BranchSwap") {
        check_keys(j, where, {"kind"}, {"T", "c", "t_obs"});
        pair.kind = lab::BranchSwap{num_or(j, where, "c", 1.0),
                                    num_or(j, where, "t_obs", 0.25)};
        return pair;
    }
    fail(where + ".kind",
         "unknown pair \"" + kind + "\" (known: Reflection, IncrementShift, BranchSwap)");
}

risk::MarkovPayoff payoff_from(const json& j, const std::string& where) {
    const std::string kind = str_at(j, where, "kind");
    risk::MarkovPayoff X;
    X.T = num_or(j, where, "T", 1.0);
    if (kind == "Terminal") {
        check_keys(j, where, {"kind", "phi"}, {"T"});
        X.kind = risk::Terminal{fn_from(j.at("phi"), where + ".phi").f};
        return X;
    }
    if (kind == "Early") {
        check_keys(j, where, {"kind", "phi"}, {"T", "t1"});
        X.kind = risk::Early{fn_from(j.at("phi"), where + ".phi").f,
                             num_or(j, where, "t1", 0.5)};
        return X;
    }
    if (kind == "Increment") {
        check_keys(j, where, {"kind", "phi"}, {"T", "t1", "t2"});
        X.kind = risk::Increment{fn_from(j.at("phi"), where + ".phi").f,
                                 num_or(j, where, "t1", 0.25),
                                 num_or(j, where, "t2", 0.75)};
        return X;
    }
    if (kind == "IndicatorOfBranch") {
        check_keys(j, where, {"kind"}, {"T", "c", "t_obs"});
        X.kind = risk::IndicatorOfBranch{num_or(j, where, "c", 1.0),
                                         num_or(j, where, "t_obs", 0.25)};
        return X;
    }
    fail(where + ".kind",
         "unknown payoff \"" + kind +
             "\" (known: Terminal, Early, Increment, IndicatorOfBranch)");
}

risk::RiskMeasure measure_from(const json& j, const std::string& where) {
    const std::string m = str_at(j, where, "measure");
    if (m == "entropic") {
        check_keys(j, where, {"measure", "gamma"}, {});
        return risk::EntropicRM{num_at(j, where, "gamma")};
    }
    if (m == "shortfall") {
        check_keys(j, where, {"measure", "loss"}, {});
        const json& lj = j.at("loss");
        const std::string lw = where + ".loss";
        const std::string kind = str_at(lj, lw, "kind");
        if (kind == "linear") {
            check_keys(lj, lw, {"kind"}, {});
            return risk::ShortfallRM{risk::LossFunction::linear()};
        }
        if (kind == "exponential") {
            check_keys(lj, lw, {"kind", "beta"}, {});
            return risk::ShortfallRM{
                risk::LossFunction::exponential(num_at(lj, lw, "beta"))};
        }
        if (kind == "piecewise-convex") {
            check_keys(lj, lw, {"kind"}, {});
            return risk::ShortfallRM{risk::LossFunction::piecewise_convex()};
        }
        fail(lw + ".kind", "unknown loss \"" + kind +
                               "\" (known: linear, exponential, piecewise-convex)");
    }
    if (m == "certainty-equivalent") {
        check_keys(j, where, {"measure", "h_linear", "k"},
                   {"T", "y_min", "y_max", "n_y", "n_steps", "u_min", "u_max"});
        const double a = num_at(j, where, "h_linear");
        Fn1 k = fn_from(j.at("k"), where + ".k");
        const double T = num_or(j, where, "T", 1.0);
        const double y_min = num_or(j, where, "y_min", -3.0);
        const double y_max = num_or(j, where, "y_max", 3.0);
        const int n_y = static_cast<int>(int_at(j, where, "n_y", 61));
        const int n_steps = static_cast<int>(int_at(j, where, "n_steps", 200));
        const double u_min = num_or(j, where, "u_min", -6.0);
        const double u_max = num_or(j, where, "u_max", 6.0);
        transforms::DriftFunction h{[a](double, double y) { return a * y; },
                                    [a](double, double) { return a; },
                                    [](double, double) { return 0.0; }};
        auto flow = transforms::solve_characteristics(
            h, stoch::TimeGrid(0.0, T, n_steps), y_min, y_max, n_y);
        auto psi = transforms::psi_from_k(k.f, u_min, u_max);
        return risk::CertaintyEquivalentRM{std::move(flow), std::move(psi)};
    }
    fail(where + ".measure",
         "unknown measure \"" + m +
             "\" (known: entropic, shortfall, certainty-equivalent)");
}

// ===== verdict assembly =====

struct Outcome {
    bool pass = true;
    double gap = 0.0;
    double tolerance = 0.0;
    std::string message;
    json values = json::object();
    std::string csv; // complete table content, empty when nothing tabular
};

struct VerdictRule {
    std::string mode; // "bound" or "floor"
    double tolerance = 1e-3;
};

VerdictRule rule_from(const json& config, double scale, double dflt_tol = 1e-3) {
    VerdictRule r;
    r.mode = str_or(config, "", "mode", "bound");
    if (r.mode != "bound" && r.mode != "floor")
        fail("mode", "expected \"bound\" or \"floor\"");
    r.tolerance = num_or(config, "", "tolerance", dflt_tol) * scale;
    if (r.tolerance < 0.0) fail("tolerance", "must be nonnegative");
    return r;
}

// bound: gap must stay under tolerance (plus 3 SE of statistical slack when
// the estimate is Monte Carlo); floor: gap must clear the tolerance.
bool verdict_of(const VerdictRule& r, double gap, double se = 0.0) {
    if (r.mode == "bound") return gap <= r.tolerance + 3.0 * se;
    return gap >= r.tolerance;
}

// Optional oracle clause: the measured gap must also match a pinned value.
// rule "absolute" |gap - value| <= tolerance, "relative" <= tolerance |value|,
// "3se" <= 3 standard errors of the estimate.
struct OracleClause {
    bool present = false;
    double value = 0.0;
    std::string rule;
    double tolerance = 0.0;
};

OracleClause oracle_from(const json& config, double scale) {
    OracleClause o;
    if (!config.contains("oracle")) return o;
    const json& j = config.at("oracle");
    check_keys(j, "oracle", {"value", "rule"}, {"tolerance"});
    o.present = true;
    o.value = num_at(j, "oracle", "value");
    o.rule = str_at(j, "oracle", "rule");
    if (o.rule == "absolute" || o.rule == "relative") {
        o.tolerance = num_at(j, "oracle", "tolerance") * scale;
    } else if (o.rule == "3se") {
        o.tolerance = 0.0;
    } else {
        fail("oracle.rule", "expected \"absolute\", \"relative\", or \"3se\"");
    }
    return o;
}

bool oracle_ok(const OracleClause& o, double gap, double se) {
    if (!o.present) return true;
    const double err = std::fabs(gap - o.value);
    if (o.rule == "absolute") return err <= o.tolerance;
    if (o.rule == "relative") return err <= o.tolerance * std::fabs(o.value);
    return err <= 3.0 * se;
}

void describe_oracle(const OracleClause& o, double gap, double se, json& values) {
    if (!o.present) return;
    values["oracle_value"] = o.value;
    values["oracle_rule"] = o.rule;
    values["oracle_error"] = std::fabs(gap - o.value);
    if (o.rule == "3se") values["oracle_band"] = 3.0 * se;
}

// ===== experiment runners =====

Outcome run_solve(const json& config, const Engine& eng, double scale) {
    check_keys(config, "",
               {"experiment", "generator", "payoff"},
               {"name", "seed", "engine", "tolerance", "mode", "oracle", "out"});
    gen::Generator g = generator_from(config.at("generator"), "generator");
    risk::MarkovPayoff X = payoff_from(config.at("payoff"), "payoff");
    const auto* term = std::get_if<risk::Terminal>(&X.kind);
    if (!term) fail("payoff.kind", "solve expects a Terminal payoff");

    const int n_steps = std::max(40, static_cast<int>(std::lround(
                                         eng.cfg.n_steps * X.T)));
    stoch::TimeGrid tg(0.0, X.T, n_steps);
    pde::ValueSurface vs = gen::solve_markov(
        g, term->phi, tg, eng.cfg.sg, eng.cfg.scheme);
    const double value = pde::g_expectation(vs, 0.0, 0.0);

    Outcome out;
    out.values["value"] = value;
    double target = std::numeric_limits<double>::quiet_NaN();
    if (config.contains("oracle")) {
        const json& oj = config.at("oracle");
        check_keys(oj, "oracle", {"kind"}, {"n_nodes"});
        const std::string kind = str_at(oj, "oracle", "kind");
        if (kind != "entropic-quadrature")
            fail("oracle.kind", "unknown oracle \"" + kind +
                                    "\" (known: entropic-quadrature)");
        const auto* ent = std::get_if<gen::Entropic>(&g);
        if (!ent) fail("oracle", "entropic-quadrature needs an Entropic generator");
        const int n_nodes =
            static_cast<int>(int_at(oj, "oracle", "n_nodes", eng.cfg.n_nodes));
        const double b = ent->beta;
        target = risk::expect_cond(
                     X, 0.0, 0.0,
                     [b](double v) { return std::exp(2.0 * b * v); }, n_nodes);
        target = std::log(target) / (2.0 * b);
        VerdictRule r = rule_from(config, scale, 5e-4);
        out.gap = std::fabs(value - target);
        out.tolerance = r.tolerance;
        out.pass = verdict_of(r, out.gap);
        out.values["target"] = target;
        out.message = "value " + fmt12(value) + " vs quadrature " + fmt12(target);
    } else {
        out.message = "value " + fmt12(value) + " (no oracle requested)";
    }

    std::ostringstream csv;
    csv << "x,u\n";
    const auto& sg = eng.cfg.sg;
    const double dx = (sg.x_max - sg.x_min) / (sg.n_x - 1);
    for (int i = 0; i < sg.n_x; ++i) {
        const double x = sg.x_min + dx * i;
        csv << fmt12(x) << "," << fmt12(pde::g_expectation(vs, 0.0, x)) << "\n";
    }
    out.csv = csv.str();
    return out;
}

Outcome run_risk(const json& config, const Engine& eng, double scale) {
    check_keys(config, "",
               {"experiment", "measure", "payoff"},
               {"name", "seed", "engine", "tolerance", "mode", "t", "x", "expect",
                "compare", "out"});
    risk::RiskMeasure rm = measure_from(config.at("measure"), "measure");
    risk::MarkovPayoff X = payoff_from(config.at("payoff"), "payoff");
    const double t = num_or(config, "", "t", 0.0);
    const double x = num_or(config, "", "x", 0.0);
    const double value = risk::rho_eval(rm, X, t, x, eng.cfg.n_nodes);

    Outcome out;
    out.values["value"] = value;
    std::ostringstream csv;
    csv << "measure,payoff,t,value\n";
    csv << risk::risk_csv_row(str_at(config.at("measure"), "measure", "measure"),
                              str_at(config.at("payoff"), "payoff", "kind"), t,
                              value)
        << "\n";

    if (config.contains("expect")) {
        const json& ej = config.at("expect");
        check_keys(ej, "expect", {"value", "tolerance"}, {});
        const double want = num_at(ej, "expect", "value");
        const double tol = num_at(ej, "expect", "tolerance") * scale;
        out.gap = std::fabs(value - want);
        out.tolerance = tol;
        out.pass = out.gap <= tol;
        out.values["expected"] = want;
        out.message = "rho " + fmt12(value) + " vs expected " + fmt12(want);
    } else if (config.contains("compare")) {
        const json& cj = config.at("compare");
        check_keys(cj, "compare", {"measure", "tolerance"}, {});
        risk::RiskMeasure other = measure_from(cj.at("measure"), "compare.measure");
        const double tol = num_at(cj, "compare", "tolerance") * scale;
        const double value2 = risk::rho_eval(other, X, t, x, eng.cfg.n_nodes);
        out.gap = std::fabs(value - value2);
        out.tolerance = tol;
        out.pass = out.gap <= tol;
        out.values["compare_value"] = value2;
        out.message = "rho " + fmt12(value) + " vs " + fmt12(value2);
        csv << risk::risk_csv_row(
                   str_at(cj.at("measure"), "compare.measure", "measure"),
                   str_at(config.at("payoff"), "payoff", "kind"), t, value2)
            << "\n";
    } else {
        out.message = "rho " + fmt12(value);
    }
    out.csv = csv.str();
    return out;
}

// Shared core of li-test and clli-test; li evaluates at the pair's horizon.
Outcome run_li(const json& config, const Engine& eng, double scale, bool conditional) {
    std::vector<std::string> req{"experiment", "generator", "pair"};
    if (conditional) req.push_back("t_prime");
    check_keys(config, "", req,
               {"name", "seed", "engine", "tolerance", "mode", "oracle", "out"});
    gen::Generator g = generator_from(config.at("generator"), "generator");
    lab::PayoffPair pair = pair_from(config.at("pair"), "pair");
    const double t_prime =
        conditional ? num_at(config, "", "t_prime") : pair.T;

    VerdictRule r = rule_from(config, scale);
    OracleClause o = oracle_from(config, scale);

    Outcome out;
    double se = 0.0;
    if (const auto* rdq = std::get_if<gen::RandomDriftQuadratic>(&g)) {
        lab::McGap mc = lab::mc_pair_gap(*rdq, pair, t_prime, eng.cfg);
        out.gap = std::fabs(mc.gap);
        se = mc.se;
        out.values["first"] = mc.first.value;
        out.values["second"] = mc.second.value;
        out.values["se"] = mc.se;
        out.values["n_paths"] = mc.n_paths;
    } else {
        out.gap = lab::clli_gap(g, pair, t_prime, eng.cfg);
    }
    out.tolerance = r.tolerance;
    out.pass = verdict_of(r, out.gap, se) && oracle_ok(o, out.gap, se);
    out.values["gap"] = out.gap;
    out.values["t_prime"] = t_prime;
    describe_oracle(o, out.gap, se, out.values);
    out.message = "gap " + fmt12(out.gap) +
                  (se > 0.0 ? " (se " + fmt12(se) + ")" : "") + ", " + r.mode +
                  " " + fmt12(r.tolerance);

    std::ostringstream csv;
    csv << "t_prime,gap,se,tolerance,mode\n";
    csv << fmt12(t_prime) << "," << fmt12(out.gap) << "," << fmt12(se) << ","
        << fmt12(r.tolerance) << "," << r.mode << "\n";
    out.csv = csv.str();
    return out;
}

lab::MaturitySpec maturity_from(const json& j, const std::string& where) {
    expect_object(j, where);
    if (j.contains("t")) {
        check_keys(j, where, {"t"}, {});
        return lab::FixedMaturity{num_at(j, where, "t")};
    }
    if (j.contains("branch")) {
        check_keys(j, where, {"branch"}, {});
        auto spec = stopping_from(j.at("branch"), where + ".branch");
        const auto* tb = std::get_if<stoch::ThresholdBranch>(&spec);
        if (!tb) fail(where + ".branch", "expected a ThresholdBranch");
        return lab::BranchedMaturity{*tb};
    }
    fail(where, "expected {\"t\": ...} or {\"branch\": {...}}");
}

Outcome run_mli(const json& config, const Engine& eng, double scale) {
    check_keys(config, "",
               {"experiment", "generator", "phi", "tau", "tau_prime"},
               {"name", "seed", "engine", "tolerance", "mode", "oracle", "L", "out"});
    gen::Generator g = generator_from(config.at("generator"), "generator");
    Fn1 phi = fn_from(config.at("phi"), "phi");
    lab::MaturitySpec tau = maturity_from(config.at("tau"), "tau");
    lab::MaturitySpec tau_prime = maturity_from(config.at("tau_prime"), "tau_prime");
    const double L = num_or(config, "", "L", 0.0);

    VerdictRule r = rule_from(config, scale);
    OracleClause o = oracle_from(config, scale);

    Outcome out;
    out.gap = lab::mli_gap(g, phi.f, tau, tau_prime, L, eng.cfg);
    out.tolerance = r.tolerance;
    out.pass = verdict_of(r, out.gap) && oracle_ok(o, out.gap, 0.0);
    out.values["gap"] = out.gap;
    out.values["L"] = L;
    describe_oracle(o, out.gap, 0.0, out.values);
    out.message = "gap " + fmt12(out.gap) + ", " + r.mode + " " + fmt12(r.tolerance);

    std::ostringstream csv;
    csv << "L,gap,tolerance,mode\n";
    csv << fmt12(L) << "," << fmt12(out.gap) << "," << fmt12(r.tolerance) << ","
        << r.mode << "\n";
    out.csv = csv.str();
    return out;
}

Outcome run_tc(const json& config, const Engine& eng, double scale) {
    check_keys(config, "",
               {"experiment", "measure", "payoff", "s"},
               {"name", "seed", "engine", "tolerance", "mode", "oracle", "n_nodes",
                "out"});
    risk::RiskMeasure rm = measure_from(config.at("measure"), "measure");
    risk::MarkovPayoff X = payoff_from(config.at("payoff"), "payoff");
    const double s = num_at(config, "", "s");
    const int n_nodes = static_cast<int>(int_at(config, "", "n_nodes", 96));

    VerdictRule r = rule_from(config, scale, 1e-6);
    OracleClause o = oracle_from(config, scale);

    Outcome out;
    out.gap = risk::tc_gap(rm, X, s, n_nodes);
    out.tolerance = r.tolerance;
    out.pass = verdict_of(r, out.gap) && oracle_ok(o, out.gap, 0.0);
    out.values["gap"] = out.gap;
    out.values["s"] = s;
    out.values["n_nodes"] = n_nodes;
    describe_oracle(o, out.gap, 0.0, out.values);
    out.message = "tc gap " + fmt12(out.gap) + ", " + r.mode + " " +
                  fmt12(r.tolerance);
    (void)eng;

    std::ostringstream csv;
    csv << "s,gap,tolerance,mode\n";
    csv << fmt12(s) << "," << fmt12(out.gap) << "," << fmt12(r.tolerance) << ","
        << r.mode << "\n";
    out.csv = csv.str();
    return out;
}

Outcome run_repr(const json& config, const Engine& eng, double scale) {
    check_keys(config, "",
               {"experiment", "generator", "z", "eps"},
               {"name", "seed", "engine", "tolerance", "mode", "t", "y", "clip",
                "out"});
    gen::Generator g = generator_from(config.at("generator"), "generator");
    const double t = num_or(config, "", "t", 0.0);
    const double y = num_or(config, "", "y", 0.0);
    const double z = num_at(config, "", "z");
    std::vector<double> eps = num_array_at(config, "", "eps");
    double clip = std::numeric_limits<double>::infinity();
    if (config.contains("clip")) {
        const json& c = config.at("clip");
        if (c.is_string()) {
            if (c.get<std::string>() != "none")
                fail("clip", "expected a number or \"none\"");
        } else if (c.is_number()) {
            clip = c.get<double>();
        } else {
            fail("clip", "expected a number or \"none\"");
        }
    }
    const double tol = num_or(config, "", "tolerance", 1e-3) * scale;

    lab::IdentityReport rep =
        lab::representation_slope(g, t, y, z, eps, clip, tol, eng.cfg);

    Outcome out;
    out.pass = rep.pass;
    out.gap = std::fabs(rep.extrapolated - rep.rhs.front());
    out.tolerance = tol;
    out.values["slopes"] = rep.lhs;
    out.values["target"] = rep.rhs.front();
    out.values["extrapolated"] = rep.extrapolated;
    out.values["fitted_slope_coeff"] = rep.fitted_slope_coeff;
    out.values["note"] = rep.note;
    out.message = "extrapolated " + fmt12(rep.extrapolated) + " vs target " +
                  fmt12(rep.rhs.front());

    std::ostringstream csv;
    csv << "eps,slope,target\n";
    for (std::size_t i = 0; i < eps.size(); ++i)
        csv << fmt12(eps[i]) << "," << fmt12(rep.lhs[i]) << ","
            << fmt12(rep.rhs.front()) << "\n";
    out.csv = csv.str();
    return out;
}

Outcome run_gateaux(const json& config, const Engine& eng, double scale) {
    check_keys(config, "",
               {"experiment", "generator", "payoff", "eps"},
               {"name", "seed", "engine", "tolerance", "mode", "y", "out"});
    gen::Generator g = generator_from(config.at("generator"), "generator");
    risk::MarkovPayoff X = payoff_from(config.at("payoff"), "payoff");
    const double y = num_or(config, "", "y", 0.0);
    std::vector<double> eps = num_array_at(config, "", "eps");
    const double tol = num_or(config, "", "tolerance", 1e-3) * scale;

    lab::IdentityReport rep = lab::gateaux_check(g, y, X, eps, tol, eng.cfg);

    Outcome out;
    out.pass = rep.pass;
    out.gap = std::fabs(rep.extrapolated - rep.rhs.front());
    out.tolerance = tol;
    out.values["slopes"] = rep.lhs;
    out.values["target"] = rep.rhs.front();
    out.values["extrapolated"] = rep.extrapolated;
    out.values["fitted_slope_coeff"] = rep.fitted_slope_coeff;
    out.values["note"] = rep.note;
    out.message = "extrapolated " + fmt12(rep.extrapolated) + " vs target " +
                  fmt12(rep.rhs.front());

    std::ostringstream csv;
    csv << "eps,slope,target\n";
    for (std::size_t i = 0; i < eps.size(); ++i)
        csv << fmt12(eps[i]) << "," << fmt12(rep.lhs[i]) << ","
            << fmt12(rep.rhs.front()) << "\n";
    out.csv = csv.str();
    return out;
}

Outcome run_cons1(const json& config, const Engine& eng, double scale,
                  std::uint64_t seed) {
    check_keys(config, "",
               {"experiment", "generator", "paths"},
               {"name", "seed", "engine", "tolerance", "mode", "y", "out"});
    gen::Generator g = generator_from(config.at("generator"), "generator");
    const double y = num_or(config, "", "y", 0.0);
    const json& pj = config.at("paths");
    check_keys(pj, "paths", {"n_paths", "n_steps"}, {"T"});
    const long n_paths = int_at(pj, "paths", "n_paths", 0);
    const int n_steps = static_cast<int>(int_at(pj, "paths", "n_steps", 0));
    const double T = num_or(pj, "paths", "T", 1.0);
    VerdictRule r = rule_from(config, scale, 1e-6);

    stoch::PathBatch batch =
        stoch::sample_paths(stoch::TimeGrid(0.0, T, n_steps), 1, n_paths, seed);
    lab::IdentityReport rep = lab::cons1_check(g, y, batch, r.tolerance);

    Outcome out;
    out.gap = rep.sup_gap;
    out.tolerance = r.tolerance;
    out.pass = r.mode == "bound" ? rep.pass : rep.sup_gap >= r.tolerance;
    out.values["sup_gap"] = rep.sup_gap;
    out.values["mean_gap"] = rep.mean_gap;
    out.values["note"] = rep.note;
    out.message = "sup |LHS - 1| = " + fmt12(rep.sup_gap) + ", " + r.mode + " " +
                  fmt12(r.tolerance);
    (void)eng;

    std::ostringstream csv;
    csv << "path,lhs,rhs\n";
    const std::size_t shown = std::min<std::size_t>(rep.lhs.size(), 500);
    for (std::size_t i = 0; i < shown; ++i)
        csv << i << "," << fmt12(rep.lhs[i]) << "," << fmt12(rep.rhs[i]) << "\n";
    out.csv = csv.str();
    return out;
}

Outcome run_transform(const json& config, const Engine& eng, double scale) {
    const std::string check = str_at(config, "", "check");
    Outcome out;
    if (check == "psi") {
        check_keys(config, "",
                   {"experiment", "check", "k", "oracle"},
                   {"name", "seed", "engine", "tolerance", "mode", "u_min", "u_max",
                    "out"});
        Fn1 k = fn_from(config.at("k"), "k");
        const std::string oracle = str_at(config, "", "oracle");
        const double u_min = num_or(config, "", "u_min", -3.0);
        const double u_max = num_or(config, "", "u_max", 3.0);
        const double tol = num_or(config, "", "tolerance", 1e-8) * scale;

        std::function<double(double)> closed;
        if (oracle == "exponential") {
            // constant k == c integrates to (exp(2 c u) - 1) / (2 c)
            const double c = k.f(0.0);
            closed = [c](double u) { return std::expm1(2.0 * c * u) / (2.0 * c); };
        } else if (oracle == "erf") {
            // k(u) == -u integrates to the scaled error function
            closed = [](double u) { return std::sqrt(M_PI) / 2.0 * std::erf(u); };
        } else {
            fail("oracle", "unknown oracle \"" + oracle +
                               "\" (known: exponential, erf)");
        }

        transforms::MonotoneMap psi = transforms::psi_from_k(k.f, u_min, u_max);
        double sup = 0.0;
        std::ostringstream csv;
        csv << "u,psi,oracle\n";
        const int n = 241;
        for (int i = 0; i < n; ++i) {
            const double u = u_min + (u_max - u_min) * i / (n - 1);
            const double p = psi.map(u);
            const double c = closed(u);
            sup = std::max(sup, std::fabs(p - c));
            csv << fmt12(u) << "," << fmt12(p) << "," << fmt12(c) << "\n";
        }
        out.gap = sup;
        out.tolerance = tol;
        out.pass = sup <= tol;
        out.values["sup_gap"] = sup;
        out.message = "sup |psi - oracle| = " + fmt12(sup);
        out.csv = csv.str();
        return out;
    }
    if (check == "construct-f") {
        check_keys(config, "",
                   {"experiment", "check", "h_linear", "f0"},
                   {"name", "seed", "engine", "tolerance", "mode", "T", "y_min",
                    "y_max", "n_y", "n_steps", "out"});
        const double a = num_at(config, "", "h_linear");
        const double c = num_at(config, "", "f0");
        const double T = num_or(config, "", "T", 1.0);
        const double y_min = num_or(config, "", "y_min", -2.0);
        const double y_max = num_or(config, "", "y_max", 2.0);
        const int n_y = static_cast<int>(int_at(config, "", "n_y", 41));
        const int n_steps = static_cast<int>(int_at(config, "", "n_steps", 200));
        const double tol = num_or(config, "", "tolerance", 1e-8) * scale;

        transforms::DriftFunction h{[a](double, double y) { return a * y; },
                                    [a](double, double) { return a; },
                                    [](double, double) { return 0.0; }};
        transforms::ScalarField f_closed{
            [a, c](double t, double) { return c * std::exp(a * t); },
            [a, c](double t, double) { return a * c * std::exp(a * t); },
            [](double, double) { return 0.0; }};
        stoch::TimeGrid tg(0.0, T, n_steps);
        auto flow = transforms::solve_characteristics(h, tg, y_min, y_max, n_y);
        transforms::GridField built =
            transforms::construct_f(h, [c](double) { return c; }, flow);
        transforms::ResidualField res =
            transforms::pde_residual_f(h, f_closed, tg, y_min, y_max, n_y);

        double sup = 0.0;
        std::ostringstream csv;
        csv << "t,y,f,f_closed\n";
        for (int kk = 0; kk <= tg.n_steps; kk += std::max(1, tg.n_steps / 20)) {
            const double t = tg.nodes[kk];
            for (int jj = 0; jj < 9; ++jj) {
                const double yv = y_min + (y_max - y_min) * jj / 8.0;
                const double fb = built.eval(t, yv);
                const double fc = f_closed.f(t, yv);
                sup = std::max(sup, std::fabs(fb - fc));
                csv << fmt12(t) << "," << fmt12(yv) << "," << fmt12(fb) << ","
                    << fmt12(fc) << "\n";
            }
        }
        out.gap = sup;
        out.tolerance = tol;
        out.pass = sup <= tol;
        out.values["construct_gap"] = sup;
        out.values["closed_residual"] = res.max_abs;
        out.message = "construct gap " + fmt12(sup) + ", closed-form residual " +
                      fmt12(res.max_abs);
        out.csv = csv.str();
        return out;
    }
    if (check == "transfer") {
        check_keys(config, "",
                   {"experiment", "check", "h_linear", "f0", "phi"},
                   {"name", "seed", "engine", "tolerance", "mode", "T", "refine",
                    "out"});
        const double a = num_at(config, "", "h_linear");
        const double c = num_at(config, "", "f0");
        Fn1 phi = fn_from(config.at("phi"), "phi");
        const double T = num_or(config, "", "T", 1.0);
        const bool refine = bool_or(config, "", "refine", false);
        const double tol = num_or(config, "", "tolerance", 1e-3) * scale;

        transforms::DriftFunction h{[a](double, double y) { return a * y; },
                                    [a](double, double) { return a; },
                                    [](double, double) { return 0.0; }};
        auto f = [a, c](double t, double) { return c * std::exp(a * t); };

        auto gap_at = [&](int n_steps, int n_x) {
            stoch::TimeGrid tg(0.0, T, n_steps);
            pde::SpatialGrid sg{eng.cfg.sg.x_min, eng.cfg.sg.x_max, n_x};
            auto flow = transforms::solve_characteristics(
                h, tg, eng.cfg.sg.x_min, eng.cfg.sg.x_max, 81);
            return transforms::transfer_identity_gap(h, f, flow, phi.f, tg, sg,
                                                     eng.cfg.scheme);
        };
        const int n0 = std::max(40, static_cast<int>(std::lround(eng.cfg.n_steps * T)));
        const double g1 = gap_at(n0, eng.cfg.sg.n_x);
        out.gap = g1;
        out.tolerance = tol;
        out.pass = g1 <= tol;
        out.values["gap_coarse"] = g1;
        std::ostringstream csv;
        csv << "n_steps,gap\n" << n0 << "," << fmt12(g1) << "\n";
        if (refine) {
            const double g2 = gap_at(2 * n0, 2 * eng.cfg.sg.n_x - 1);
            const double ratio = g2 > 0.0 ? g1 / g2 : std::numeric_limits<double>::infinity();
            out.values["gap_fine"] = g2;
            out.values["ratio"] = ratio;
            out.pass = out.pass && ratio >= 1.8;
            csv << 2 * n0 << "," << fmt12(g2) << "\n";
            out.message = "gap " + fmt12(g1) + ", refined " + fmt12(g2) +
                          " (ratio " + fmt12(ratio) + ")";
        } else {
            out.message = "gap " + fmt12(g1);
        }
        out.csv = csv.str();
        return out;
    }
    fail("check",
         "unknown check \"" + check + "\" (known: psi, construct-f, transfer)");
}

Outcome run_invariance(const json& config, const Engine& eng, double scale,
                       std::uint64_t seed) {
    check_keys(config, "",
               {"experiment", "lambda", "clip", "eps", "t", "s"},
               {"name", "seed", "engine", "tolerance", "mode", "o_sign", "n_paths",
                "right_clip", "expect", "out"});
    const double lambda = num_at(config, "", "lambda");
    const int o_sign = static_cast<int>(int_at(config, "", "o_sign", 1));
    const double clip = num_at(config, "", "clip");
    const double eps = num_at(config, "", "eps");
    const double t = num_at(config, "", "t");
    const double s = num_at(config, "", "s");
    const long n_paths = int_at(config, "", "n_paths", eng.cfg.n_paths);
    const double right_clip = num_or(config, "", "right_clip", 0.0);
    const std::string expect = str_or(config, "", "expect", "pass");
    if (expect != "pass" && expect != "reject")
        fail("expect", "expected \"pass\" or \"reject\"");

    lab::IdentityReport rep = lab::brownian_invariance_check(
        lambda, o_sign, clip, eps, t, s, n_paths, seed, right_clip);

    Outcome out;
    out.values["statistic"] = rep.statistic;
    out.values["p_value"] = rep.p_value;
    out.values["note"] = rep.note;
    if (expect == "pass") {
        out.gap = rep.p_value;
        out.tolerance = 0.01 * scale;
        out.pass = rep.p_value > out.tolerance;
        out.message = "KS p = " + fmt12(rep.p_value) + ", needs > " +
                      fmt12(out.tolerance);
    } else {
        out.gap = rep.p_value;
        out.tolerance = 1e-3 * scale;
        out.pass = rep.p_value < out.tolerance;
        out.message = "KS p = " + fmt12(rep.p_value) + ", needs < " +
                      fmt12(out.tolerance);
    }

    std::ostringstream csv;
    csv << "statistic,p_value\n"
        << fmt12(rep.statistic) << "," << fmt12(rep.p_value) << "\n";
    out.csv = csv.str();
    return out;
}

Outcome run_audit(const json& config, const Engine& eng) {
    check_keys(config, "",
               {"experiment", "generator", "expect"},
               {"name", "seed", "engine", "tolerance", "mode", "T", "out"});
    gen::Generator g = generator_from(config.at("generator"), "generator");
    const double T = num_or(config, "", "T", 1.0);
    const json& ej = config.at("expect");
    check_keys(ej, "expect", {},
               {"a4", "a4_star", "a5", "dyf_sign", "time_dependent_f"});
    if (ej.empty()) fail("expect", "expected at least one flag");

    gen::AuditReport rep = gen::audit_assumptions(
        g, gen::AuditGrid::default_for(stoch::TimeGrid(0.0, T, 8)));

    struct Flag {
        const char* name;
        bool value;
    };
    const Flag flags[] = {{"a4", rep.a4_pass},
                          {"a4_star", rep.a4_star_pass},
                          {"a5", rep.a5_pass},
                          {"dyf_sign", rep.dyf_sign_pass},
                          {"time_dependent_f", rep.time_dependent_f}};

    Outcome out;
    int mismatches = 0;
    std::ostringstream csv;
    csv << "flag,value,expected\n";
    for (const Flag& fl : flags) {
        if (!ej.contains(fl.name)) continue;
        const bool want = bool_or(ej, "expect", fl.name, false);
        if (fl.value != want) ++mismatches;
        csv << fl.name << "," << (fl.value ? "true" : "false") << ","
            << (want ? "true" : "false") << "\n";
        out.values[fl.name] = fl.value;
    }
    out.gap = mismatches;
    out.tolerance = 0.0;
    out.pass = mismatches == 0;
    out.values["note"] = rep.note;
    out.values["kappa_hat"] = rep.kappa_hat;
    out.message = mismatches == 0 ? "all audited flags match"
                                  : fmt12(mismatches) + " flag(s) mismatch";
    out.csv = csv.str();
    (void)eng;
    return out;
}

// ===== report files =====

std::mutex io_mutex;

void atomic_write(const std::filesystem::path& path, const std::string& content) {
    std::lock_guard<std::mutex> lock(io_mutex);
    std::filesystem::create_directories(path.parent_path());
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out)
            throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        out << content;
        if (!out) throw std::runtime_error("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string hash_hex(std::uint64_t h) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%016llx",
                  static_cast<unsigned long long>(h));
    return buf;
}

} // namespace

// ===== public surface =====

std::string version() { return "qbsde 0.1.0"; }

std::uint64_t config_hash(const json& config) {
    const std::string s = config.dump();
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

json load_config_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        // e.byte is 1-based; rewind through the text for line and column.
        std::size_t line = 1, col = 1;
        const std::size_t stop = std::min(text.size(), e.byte > 0 ? e.byte - 1 : 0);
        for (std::size_t i = 0; i < stop; ++i) {
            if (text[i] == '\n') {
                ++line;
                col = 1;
            } else {
                ++col;
            }
        }
        throw ConfigError(path.string() + ": parse error at line " +
                          std::to_string(line) + ", column " + std::to_string(col) +
                          ": " + e.what());
    }
}

RunResult run(const json& config, const RunOptions& opts) {
    const auto start = std::chrono::steady_clock::now();
    RunResult res;
    std::string experiment;
    try {
        if (!config.is_object()) throw ConfigError("config must be a JSON object");
        experiment = str_at(config, "", "experiment");
        res.name = str_or(config, "", "name", experiment);
        validate_name(res.name);

        std::uint64_t seed = 20260822u;
        if (config.contains("seed")) {
            const json& s = config.at("seed");
            if (!s.is_number_unsigned()) fail("seed", "expected an unsigned integer");
            seed = s.get<std::uint64_t>();
        }
        if (opts.seed) seed = *opts.seed;
        if (opts.tolerance_scale <= 0.0)
            fail("", "tolerance scale must be positive");
        Engine eng = engine_from(config, seed);

        Outcome out;
        if (experiment == "solve") {
            out = run_solve(config, eng, opts.tolerance_scale);
        } else if (experiment == "risk") {
            out = run_risk(config, eng, opts.tolerance_scale);
        } else if (experiment == "li-test") {
            out = run_li(config, eng, opts.tolerance_scale, false);
        } else if (experiment == "clli-test") {
            out = run_li(config, eng, opts.tolerance_scale, true);
        } else if (experiment == "mli-test") {
            out = run_mli(config, eng, opts.tolerance_scale);
        } else if (experiment == "tc-test") {
            out = run_tc(config, eng, opts.tolerance_scale);
        } else if (experiment == "repr-check") {
            out = run_repr(config, eng, opts.tolerance_scale);
        } else if (experiment == "gateaux-check") {
            out = run_gateaux(config, eng, opts.tolerance_scale);
        } else if (experiment == "cons1-check") {
            out = run_cons1(config, eng, opts.tolerance_scale, seed);
        } else if (experiment == "transform") {
            out = run_transform(config, eng, opts.tolerance_scale);
        } else if (experiment == "invariance-check") {
            out = run_invariance(config, eng, opts.tolerance_scale, seed);
        } else if (experiment == "audit") {
            out = run_audit(config, eng);
        } else {
            fail("experiment",
                 "unknown experiment \"" + experiment +
                     "\" (known: solve, risk, li-test, clli-test, mli-test, "
                     "tc-test, repr-check, gateaux-check, cons1-check, transform, "
                     "invariance-check, audit)");
        }

        // Resolved config: the input with the effective seed and the fully
        // materialized engine block, so a report alone reproduces the run.
        json resolved = config;
        resolved["seed"] = seed;
        resolved["engine"] = eng.resolved;
        resolved["tolerance_scale"] = opts.tolerance_scale;

        json report;
        report["version"] = version();
        report["config"] = resolved;
        report["config_hash"] = hash_hex(config_hash(resolved));
        report["verdict"] = {{"pass", out.pass},
                             {"gap", out.gap},
                             {"tolerance", out.tolerance},
                             {"message", out.message}};
        report["values"] = out.values;

        const std::filesystem::path out_dir =
            opts.out_dir.empty() ? std::filesystem::path(".") : opts.out_dir;
        std::string report_name = res.name + ".report.json";
        std::string table_name = res.name + ".csv";
        if (config.contains("out")) {
            const json& oj = config.at("out");
            check_keys(oj, "out", {}, {"report", "table"});
            report_name = str_or(oj, "out", "report", report_name);
            table_name = str_or(oj, "out", "table", table_name);
        }
        res.report_path = out_dir / report_name;
        res.table_path = out_dir / table_name;
        atomic_write(res.report_path, report.dump(2) + "\n");
        if (!out.csv.empty()) atomic_write(res.table_path, out.csv);

        res.pass = out.pass;
        res.gap = out.gap;
        res.tolerance = out.tolerance;
        res.message = out.message;
        res.exit_code = out.pass ? 0 : 1;
    } catch (const ConfigError& e) {
        res.exit_code = 2;
        res.message = e.what();
    } catch (const std::invalid_argument& e) {
        res.exit_code = 2;
        res.message = e.what();
    } catch (const gen::VariantMismatch& e) {
        res.exit_code = 2;
        res.message = e.what();
    } catch (const std::exception& e) {
        // Blowup, NonConvergence, overflow guards, bracket failures: the
        // config was well formed but the numerics refused it.
        res.exit_code = 3;
        res.message = e.what();
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                start)
                      .count();
    return res;
}

std::vector<RunResult> suite(const json& manifest,
                             const std::filesystem::path& manifest_dir,
                             const RunOptions& opts) {
    check_keys(manifest, "manifest", {"experiments"}, {});
    const json& list = manifest.at("experiments");
    if (!list.is_array()) fail("manifest.experiments", "expected an array");

    // Load every config up front so a broken entry is a manifest error, and
    // check name uniqueness before anything runs.
    std::vector<json> configs;
    for (std::size_t i = 0; i < list.size(); ++i) {
        const json& entry = list[i];
        const std::string where = "manifest.experiments[" + std::to_string(i) + "]";
        expect_object(entry, where);
        if (entry.contains("file")) {
            check_keys(entry, where, {"file"}, {});
            configs.push_back(
                load_config_file(manifest_dir / entry.at("file").get<std::string>()));
        } else {
            configs.push_back(entry);
        }
    }
    std::vector<std::string> names;
    for (std::size_t i = 0; i < configs.size(); ++i) {
        if (!configs[i].is_object())
            fail("manifest.experiments[" + std::to_string(i) + "]",
                 "expected an object");
        const std::string n =
            str_or(configs[i], "", "name",
                   str_or(configs[i], "", "experiment", "unnamed"));
        if (std::find(names.begin(), names.end(), n) != names.end())
            fail("manifest", "duplicate experiment name \"" + n + "\"");
        names.push_back(n);
    }

    std::vector<RunResult> results(configs.size());
    const int threads =
        std::max(1, std::min<int>(opts.threads, static_cast<int>(configs.size())));
    if (threads <= 1) {
        for (std::size_t i = 0; i < configs.size(); ++i)
            results[i] = run(configs[i], opts);
    } else {
        std::atomic<std::size_t> next{0};
        auto worker = [&]() {
            for (;;) {
                const std::size_t i = next.fetch_add(1);
                if (i >= configs.size()) return;
                results[i] = run(configs[i], opts);
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    std::ostringstream csv;
    csv << "name,verdict,gap,tolerance,seconds\n";
    for (const RunResult& r : results) {
        const char* verdict = r.exit_code == 0   ? "pass"
                              : r.exit_code == 1 ? "fail"
                              : r.exit_code == 2 ? "config-error"
                                                 : "numerical-error";
        csv << r.name << "," << verdict << "," << fmt12(r.gap) << ","
            << fmt12(r.tolerance) << "," << fmt12(r.seconds) << "\n";
    }
    const std::filesystem::path out_dir =
        opts.out_dir.empty() ? std::filesystem::path(".") : opts.out_dir;
    atomic_write(out_dir / "summary.csv", csv.str());
    return results;
}

int suite_exit_code(const std::vector<RunResult>& results) {
    int code = 0;
    for (const RunResult& r : results) code = std::max(code, r.exit_code);
    return code;
}

} // namespace qbsde::cli
