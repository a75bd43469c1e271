#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qbsde/generators.hpp"

#include <cmath>
#include <numbers>
#include <random>

using qbsde::stoch::TimeGrid;
namespace gen = qbsde::gen;
namespace pde = qbsde::pde;
namespace stoch = qbsde::stoch;
namespace tfm = qbsde::transforms;

namespace {

gen::Generator drift_quadratic_catalog() {
    tfm::DriftFunction h{
        [](double, double y) { return 0.1 * y; },
        [](double, double) { return 0.1; },
        [](double, double) { return 0.0; },
    };
    tfm::ScalarField f{
        [](double t, double) { return 0.05 * std::exp(0.1 * t); },
        [](double t, double) { return 0.005 * std::exp(0.1 * t); },
        [](double, double) { return 0.0; },
    };
    return gen::DriftQuadratic{h, f};
}

gen::ItoWentzell iw_catalog() {
    return {
        [](double t) { return std::sin(std::numbers::pi * t); },
        [](double t) { return std::numbers::pi * std::cos(std::numbers::pi * t); },
        [](double w) { return std::tanh(w); },
        [](double w) { double c = std::cosh(w); return 1.0 / (c * c); },
        [](double w) {
            double c = std::cosh(w);
            return -2.0 * std::tanh(w) / (c * c);
        },
    };
}

// One flat path with a prescribed constant level from t_obs onward; nodes
// before stay at zero. Layout matches for_each_path (d = 1).
std::vector<double> step_path(const TimeGrid& grid, int from_idx, double level) {
    std::vector<double> w(static_cast<std::size_t>(grid.n_steps) + 1, 0.0);
    for (int k = from_idx; k <= grid.n_steps; ++k)
        w[static_cast<std::size_t>(k)] = level;
    return w;
}

} // namespace

TEST_CASE("driver formulas evaluate exactly") {
    gen::Generator ent = gen::Entropic{0.5};
    CHECK(gen::eval(ent, 0.3, -4.0, 2.0) == 2.0);

    auto dq = drift_quadratic_catalog();
    CHECK(std::abs(gen::eval(dq, 1.0, 2.0, 1.0) - (0.2 + 0.05 * std::exp(0.1)))
          <= 1e-15);

    gen::Generator tv = gen::TimeVaryingQuadratic{
        [](double t) { return t < 0.5 ? 1.0 : 0.0; }};
    CHECK(gen::eval(tv, 0.3, 7.0, 2.0) == 4.0);
    CHECK(gen::eval(tv, 0.7, 7.0, 2.0) == 0.0);
}

TEST_CASE("entropic and constant-k drivers coincide pointwise") {
    gen::Generator a = gen::Entropic{0.73};
    gen::Generator b = gen::PureQuadratic{[](double) { return 0.73; }};
    std::mt19937_64 rng(818283);
    std::uniform_real_distribution<double> u(-5.0, 5.0);
    for (int i = 0; i < 10000; ++i) {
        double t = 0.1 * std::abs(u(rng)), y = u(rng), z = u(rng);
        CHECK(gen::eval(a, t, y, z) == gen::eval(b, t, y, z));
    }
}

TEST_CASE("partial evaluators match the hand-written derivatives") {
    auto dq = drift_quadratic_catalog();
    CHECK(std::abs(gen::eval_dy(dq, 0.3, 1.2, 2.0) - 0.1) <= 1e-15);
    CHECK(std::abs(gen::eval_dz(dq, 0.3, 1.2, 2.0)
                   - 2.0 * 0.05 * std::exp(0.03) * 2.0) <= 1e-15);

    gen::Generator with_dk = gen::PureQuadratic{
        [](double y) { return 0.4 - 0.1 * std::tanh(y); },
        [](double y) { double c = std::cosh(y); return -0.1 / (c * c); }};
    gen::Generator without_dk = gen::PureQuadratic{
        [](double y) { return 0.4 - 0.1 * std::tanh(y); }};
    for (double y : {-1.3, 0.0, 0.6, 2.1})
        CHECK(std::abs(gen::eval_dy(with_dk, 0.0, y, 1.5)
                       - gen::eval_dy(without_dk, 0.0, y, 1.5)) <= 1e-9);
}

TEST_CASE("variant mismatches are rejected") {
    TimeGrid grid(0.0, 1.0, 100);
    auto w = step_path(grid, 0, 0.0);
    gen::Generator rd = gen::RandomDriftQuadratic{
        gen::IndicatorWindow{stoch::LevelExit{0.0, 0.5}, 0.1}, 1.0};
    gen::Generator ent = gen::Entropic{0.5};
    CHECK_THROWS_AS(gen::eval(rd, 0.1, 0.0, 1.0), gen::VariantMismatch);
    CHECK_THROWS_AS(gen::eval_dy(rd, 0.1, 0.0, 1.0), gen::VariantMismatch);
    CHECK_THROWS_AS(gen::eval_pathwise(ent, grid, w, 0.1, 0.0, 1.0),
                    gen::VariantMismatch);
    CHECK_THROWS_AS(gen::eval_pathwise_dz(ent, grid, w, 0.1, 0.0, 1.0),
                    gen::VariantMismatch);
}

TEST_CASE("indicator window: pathwise drift integral is the window length") {
    TimeGrid grid(0.0, 1.0, 100);
    gen::IndicatorWindow spec{stoch::LevelExit{0.0, 0.3}, 0.1};
    long clipped = 0, checked = 0;
    double worst_fit = 0.0;
    stoch::for_each_path(grid, 1, 100000, 20240818,
                         [&](long, std::span<const double> w) {
                             auto di = gen::drift_integral(spec, grid, w);
                             double tau = stoch::exit_time_single(
                                 grid, w, 0.0, stoch::StoppingTimeSpec{spec.tau});
                             if (tau <= 0.9 + 1e-12) {
                                 worst_fit = std::max(worst_fit,
                                                      std::abs(di.total - 0.1));
                                 ++checked;
                             } else {
                                 ++clipped; // window truncated at T
                                 CHECK(di.total <= 0.1 + 1e-12);
                             }
                         });
    CHECK(worst_fit <= 1e-12);
    CHECK(checked >= 99900);
    CHECK(clipped <= 50);
}

TEST_CASE("indicator window: a non-multiple width quantizes to the grid") {
    TimeGrid grid(0.0, 1.0, 100);
    gen::IndicatorWindow spec{stoch::LevelExit{0.0, 0.3}, 0.105};
    auto w = step_path(grid, 1, 0.4); // exits immediately at t = 0.01
    auto di = gen::drift_integral(spec, grid, w);
    CHECK(std::abs(di.total - 0.105) <= 0.5 * grid.dt() + 1e-12);
    CHECK(std::abs(di.total - 0.105) <= 2.0 * grid.dt());
}

TEST_CASE("signed window: zero integral, support preserved") {
    TimeGrid grid(0.0, 1.0, 100);
    gen::SignedWindow spec{
        0.25,
        [](double t) {
            if (t < 0.25 || t > 0.75) return 0.0;
            return std::sin(2.0 * std::numbers::pi * (t - 0.25) / 0.5);
        },
        {}};
    auto w = step_path(grid, 0, 0.8);
    auto h = gen::realize_drift(spec, grid, w);
    for (int k = 0; k < 25; ++k) CHECK(h[static_cast<std::size_t>(k)] == 0.0);
    for (int k = 75; k < 100; ++k) CHECK(h[static_cast<std::size_t>(k)] == 0.0);
    CHECK(std::abs(gen::drift_integral(spec, grid, w).total) <= 1e-12);

    // full-span shape, random paths
    gen::SignedWindow full{0.25,
                           [](double t) { return std::sin(2.0 * std::numbers::pi * t); },
                           {}};
    stoch::for_each_path(grid, 1, 500, 919293, [&](long, std::span<const double> wp) {
        CHECK(std::abs(gen::drift_integral(full, grid, wp).total) <= 1e-12);
    });
}

TEST_CASE("persistent drift: integral equals clamp times the remaining time") {
    TimeGrid grid(0.0, 1.0, 100);
    gen::PersistentDrift spec{0.25, {}};
    stoch::for_each_path(grid, 1, 100, 101112, [&](long, std::span<const double> w) {
        double expect = std::tanh(w[25]) * 0.75;
        CHECK(std::abs(gen::drift_integral(spec, grid, w).total - expect) <= 1e-12);
    });
}

TEST_CASE("branch-placed window: the partial integral separates the branches") {
    TimeGrid grid(0.0, 1.0, 100);
    gen::IndicatorWindow spec{stoch::ThresholdBranch{0.25, 0.5, 0.75}, 0.1};

    auto up = step_path(grid, 25, 1.0); // W_{0.25} >= 0, window [0.5, 0.6)
    auto di_up = gen::drift_integral(spec, grid, up);
    CHECK(std::abs(di_up.partial(0.65) - 0.1) <= 1e-12);
    CHECK(std::abs(di_up.partial(0.55) - 0.05) <= 1e-12);
    CHECK(std::abs(di_up.total - 0.1) <= 1e-12);

    auto down = step_path(grid, 25, -1.0); // window [0.75, 0.85)
    auto di_down = gen::drift_integral(spec, grid, down);
    CHECK(di_down.partial(0.65) == 0.0);
    CHECK(std::abs(di_down.total - 0.1) <= 1e-12);
}

TEST_CASE("random drift evaluates pathwise and deterministically repeats") {
    TimeGrid grid(0.0, 1.0, 100);
    gen::Generator rd = gen::RandomDriftQuadratic{
        gen::IndicatorWindow{stoch::ThresholdBranch{0.25, 0.5, 0.75}, 0.1}, 0.5};
    auto up = step_path(grid, 25, 1.0);
    double inside = gen::eval_pathwise(rd, grid, up, 0.55, 3.0, 2.0);
    CHECK(inside == 1.0 + 0.5 * 4.0);
    double outside = gen::eval_pathwise(rd, grid, up, 0.7, 3.0, 2.0);
    CHECK(outside == 0.5 * 4.0);
    CHECK(gen::eval_pathwise(rd, grid, up, 0.55, 3.0, 2.0) == inside);
    CHECK(gen::eval_pathwise_dz(rd, grid, up, 0.55, 3.0, 2.0) == 2.0 * 0.5 * 2.0);
}

TEST_CASE("ito-wentzell coefficients") {
    TimeGrid grid(0.0, 1.0, 100);
    SUBCASE("r = 0 collapses the driver to |z|^2 / 2") {
        gen::ItoWentzell iw{
            [](double) { return 0.0; }, [](double) { return 0.0; },
            [](double w) { return std::tanh(w); },
            [](double w) { double c = std::cosh(w); return 1.0 / (c * c); },
            [](double w) {
                double c = std::cosh(w);
                return -2.0 * std::tanh(w) / (c * c);
            }};
        auto w = step_path(grid, 0, 1.3);
        auto c = gen::ito_wentzell_coeffs(iw, grid, w, 0.4);
        CHECK(c.a == 0.0);
        CHECK(c.b == 0.0);
        CHECK(gen::eval_pathwise(gen::Generator{iw}, grid, w, 0.4, 0.0, 2.0) == 2.0);
    }
    SUBCASE("sinusoidal envelope at the midpoint") {
        auto iw = iw_catalog();
        auto w = step_path(grid, 0, 0.0); // W identically 0
        auto c = gen::ito_wentzell_coeffs(iw, grid, w, 0.5);
        CHECK(std::abs(c.a) <= 1e-15);
        CHECK(std::abs(c.b - 1.0) <= 1e-15);
    }
    SUBCASE("endpoint violations are rejected, parabolic envelopes accepted") {
        auto w = step_path(grid, 0, 0.0);
        gen::ItoWentzell bad = iw_catalog();
        bad.r = [](double t) { return t; };
        CHECK_THROWS_AS(gen::ito_wentzell_coeffs(bad, grid, w, 0.5),
                        gen::EndpointViolation);
        gen::ItoWentzell ok = iw_catalog();
        ok.r = [](double t) { return t * (1.0 - t); };
        ok.dr = [](double t) { return 1.0 - 2.0 * t; };
        CHECK_NOTHROW(gen::ito_wentzell_coeffs(ok, grid, w, 0.5));
    }
}

TEST_CASE("assumption audit across the catalog") {
    TimeGrid tg(0.0, 1.0, 100);
    auto ag = gen::AuditGrid::default_for(tg);

    SUBCASE("entropic passes everything with zero drift bound") {
        auto rep = gen::audit_assumptions(gen::Entropic{0.5}, ag);
        CHECK(rep.kappa_hat == 0.0);
        CHECK(rep.a4_pass);
        CHECK(rep.a4_star_pass);
        CHECK(rep.a5_pass);
        CHECK(rep.dyf_sign_pass);
        CHECK(!rep.time_dependent_f);
        CHECK(rep.ell_hat.back() >= 0.5);
        for (std::size_t i = 1; i < rep.ell_hat.size(); ++i)
            CHECK(rep.ell_hat[i] >= rep.ell_hat[i - 1]);
    }
    SUBCASE("a decreasing state coefficient keeps the sign flag") {
        auto rep = gen::audit_assumptions(
            gen::PureQuadratic{
                [](double y) { return 0.4 - 0.1 * std::tanh(y); },
                [](double y) { double c = std::cosh(y); return -0.1 / (c * c); }},
            ag);
        CHECK(rep.dyf_sign_pass);
        CHECK(rep.a4_pass);
        CHECK(rep.a4_star_pass);
        CHECK(!rep.a5_pass); // depends on y
        CHECK(!rep.time_dependent_f);
    }
    SUBCASE("an increasing state coefficient is flagged") {
        auto rep = gen::audit_assumptions(
            gen::PureQuadratic{
                [](double y) { return 0.4 + 0.1 * std::tanh(y); },
                [](double y) { double c = std::cosh(y); return 0.1 / (c * c); }},
            ag);
        CHECK(!rep.dyf_sign_pass);
    }
    SUBCASE("time dependence of the quadratic coefficient is flagged") {
        auto rep = gen::audit_assumptions(
            gen::TimeVaryingQuadratic{[](double t) { return t < 0.5 ? 1.0 : 0.0; }},
            ag);
        CHECK(rep.time_dependent_f);
        CHECK(!rep.a5_pass); // the z-partial vanishes identically on the late half
        CHECK(rep.note.find("varies in t") != std::string::npos);
    }
    SUBCASE("indicator drift reports its bound") {
        auto rep = gen::audit_assumptions(
            gen::RandomDriftQuadratic{
                gen::IndicatorWindow{stoch::LevelExit{0.0, 0.5}, 0.1}, 1.0},
            ag);
        CHECK(rep.kappa_hat == 1.0);
        CHECK(rep.a5_pass);
        CHECK(rep.dyf_sign_pass);
        CHECK(!rep.time_dependent_f);
    }
    SUBCASE("the pathwise counterexample family fails the unique-root test") {
        auto rep = gen::audit_assumptions(gen::Generator{iw_catalog()}, ag);
        CHECK(!rep.a5_pass);
        CHECK(rep.a4_pass);
        CHECK(rep.kappa_hat > 0.0);
        CHECK(rep.dyf_sign_pass);
    }
}

TEST_CASE("solver adapters agree with direct solves") {
    TimeGrid tg(0.0, 0.5, 50);
    pde::SpatialGrid sg(-4.0, 4.0, 161);
    pde::PayoffFn phi = [](double x) { return std::tanh(x); };

    auto via_gen = gen::solve_markov(gen::Generator{gen::Entropic{1.0}}, phi, tg, sg);
    auto direct = pde::solve_markov([](double, double, double z) { return 1.0 * z * z; },
                                    phi, tg, sg);
    double worst = 0.0;
    for (std::size_t i = 0; i < via_gen.u.size(); ++i)
        worst = std::max(worst, std::abs(via_gen.u[i] - direct.u[i]));
    CHECK(worst <= 1e-14);

    gen::Generator tv = gen::TimeVaryingQuadratic{
        [](double t) { return t < 0.25 ? 1.0 : 0.0; }};
    double a = gen::two_stage_value(tv, phi, 0.25, pde::TwoStageMode::EarlyPayoff,
                                    tg, sg);
    double b = pde::two_stage_value([](double t, double, double z) {
                                        return (t < 0.25 ? 1.0 : 0.0) * z * z;
                                    },
                                    phi, 0.25, pde::TwoStageMode::EarlyPayoff, tg, sg);
    CHECK(std::abs(a - b) <= 1e-14);

    gen::Generator rd = gen::RandomDriftQuadratic{
        gen::IndicatorWindow{stoch::LevelExit{0.0, 0.5}, 0.1}, 1.0};
    CHECK_THROWS_AS(gen::solve_markov(rd, phi, tg, sg), gen::VariantMismatch);
}
