#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "qbsde/numerics.hpp"
#include "qbsde/stochastic.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numeric>
#include <random>
#include <vector>

using namespace qbsde;
using namespace qbsde::stoch;

TEST_CASE("time grid nodes are uniform and pinned at both ends") {
    TimeGrid g(0.0, 1.0, 400);
    CHECK(g.nodes.front() == 0.0);
    CHECK(g.nodes.back() == 1.0);
    CHECK(g.nodes.size() == 401);
    for (std::size_t k = 1; k < g.nodes.size(); ++k)
        CHECK(g.nodes[k] > g.nodes[k - 1]);
    CHECK(g.index_of(0.5) == 200);
    CHECK_THROWS_AS(g.index_of(0.50001), std::invalid_argument);
    CHECK_THROWS_AS(TimeGrid(0.0, 1.0, 0), std::invalid_argument);
    CHECK_THROWS_AS(TimeGrid(1.0, 1.0, 10), std::invalid_argument);
}

TEST_CASE("single-step batch starts at zero and draws one increment") {
    TimeGrid g(0.0, 1.0, 1);
    PathBatch b = sample_paths(g, 1, 1, 42);
    CHECK(b.w(0, 0) == 0.0);
    // one standard-normal increment scaled by sqrt(dt); just sanity-bound it
    CHECK(std::abs(b.w(0, 1)) < 6.0);
}

TEST_CASE("path sampling is bit-identical per seed and differs across seeds") {
    TimeGrid g(0.0, 1.0, 16);
    PathBatch a = sample_paths(g, 2, 100, 7);
    PathBatch b = sample_paths(g, 2, 100, 7);
    PathBatch c = sample_paths(g, 2, 100, 8);
    CHECK(a.values == b.values);
    CHECK(a.values != c.values);
}

TEST_CASE("streaming generation reproduces the materialized batch exactly") {
    TimeGrid g(0.0, 0.5, 8);
    PathBatch b = sample_paths(g, 1, 50, 123);
    const std::size_t stride = static_cast<std::size_t>(g.n_steps + 1);
    long seen = 0;
    for_each_path(g, 1, 50, 123, [&](long p, std::span<const double> w) {
        ++seen;
        for (std::size_t k = 0; k < stride; ++k)
            CHECK(w[k] == b.values[static_cast<std::size_t>(p) * stride + k]);
    });
    CHECK(seen == 50);
}

TEST_CASE("terminal mean over a large batch obeys the CLT envelope") {
    // |mean W_T| <= 4 sqrt(T/n) with overwhelming probability; run twice with
    // independent seeds so a single unlucky draw cannot hide a bias.
    TimeGrid g(0.0, 1.0, 1);
    const long n = 1000000;
    const double bound = 4.0 * std::sqrt(1.0 / static_cast<double>(n));
    for (std::uint64_t seed : {11u, 5003u}) {
        double sum = 0.0;
        for_each_path(g, 1, n, seed, [&](long, std::span<const double> w) { sum += w[1]; });
        CHECK(std::abs(sum / static_cast<double>(n)) <= bound);
    }
}

TEST_CASE("disjoint increments are uncorrelated with variance dt") {
    TimeGrid g(0.0, 1.0, 4);
    const long n = 200000;
    double s1 = 0, s2 = 0, s11 = 0, s22 = 0, s12 = 0;
    for_each_path(g, 1, n, 99, [&](long, std::span<const double> w) {
        double d1 = w[1] - w[0], d2 = w[2] - w[1];
        s1 += d1; s2 += d2; s11 += d1 * d1; s22 += d2 * d2; s12 += d1 * d2;
    });
    double nn = static_cast<double>(n);
    double m1 = s1 / nn, m2 = s2 / nn;
    double v1 = s11 / nn - m1 * m1, v2 = s22 / nn - m2 * m2;
    double cov = s12 / nn - m1 * m2;
    double corr = cov / std::sqrt(v1 * v2);
    CHECK(std::abs(v1 - 0.25) < 0.01);
    CHECK(std::abs(v2 - 0.25) < 0.01);
    CHECK(std::abs(corr) < 4.0 / std::sqrt(nn));
}

TEST_CASE("batch export round-trips bit for bit") {
    TimeGrid g(0.25, 1.25, 12);
    PathBatch b = sample_paths(g, 2, 37, 2024);
    auto file = std::filesystem::temp_directory_path() / "qbsde_test_batch.qbsd";
    b.save(file);
    PathBatch r = PathBatch::load(file);
    CHECK(r.d == b.d);
    CHECK(r.n_paths == b.n_paths);
    CHECK(r.seed == b.seed);
    CHECK(r.grid.t0 == b.grid.t0);
    CHECK(r.grid.T == b.grid.T);
    CHECK(r.grid.n_steps == b.grid.n_steps);
    CHECK(r.values == b.values);
    std::filesystem::remove(file);
}

TEST_CASE("quadrature degenerate and small rules match closed forms") {
    QuadratureRule r1 = gauss_hermite(1);
    CHECK(r1.nodes.size() == 1);
    CHECK(r1.nodes[0] == doctest::Approx(0.0).epsilon(1e-15));
    CHECK(r1.weights[0] == doctest::Approx(1.0).epsilon(1e-15));

    QuadratureRule r2 = gauss_hermite(2);
    double ez2 = r2.expect([](double z) { return z * z; });
    CHECK(std::abs(ez2 - 1.0) <= 1e-14);

    CHECK_THROWS_AS(gauss_hermite(0), std::invalid_argument);
    CHECK_THROWS_AS(gauss_hermite(201), std::invalid_argument);
}

TEST_CASE("40-node rule integrates exp(Z) to the closed form") {
    QuadratureRule r = gauss_hermite(40);
    double v = r.expect([](double z) { return std::exp(z); });
    CHECK(std::abs(v - std::exp(0.5)) <= 1e-12);
}

TEST_CASE("weights sum to one and moments are exact up to degree 2n-1") {
    for (int n : {2, 5, 10, 17, 40}) {
        QuadratureRule r = gauss_hermite(n);
        double wsum = std::accumulate(r.weights.begin(), r.weights.end(), 0.0);
        CHECK(std::abs(wsum - 1.0) <= 1e-12);
        // the rule must be exactly mirror-symmetric, not just numerically so
        std::size_t sz = r.nodes.size();
        for (std::size_t i = 0; i < sz / 2; ++i) {
            CHECK(r.nodes[i] == -r.nodes[sz - 1 - i]);
            CHECK(r.weights[i] == r.weights[sz - 1 - i]);
        }
        if (sz % 2 == 1) CHECK(r.nodes[sz / 2] == 0.0);
        // standard normal moments: E[Z^k] = 0 (k odd), (k-1)!! (k even)
        double dfact = 1.0; // (k-1)!! for the current even k
        for (int k = 0; k <= 2 * n - 1; ++k) {
            double quad = r.expect([k](double z) { return std::pow(z, k); });
            if (k % 2 == 1) {
                // judge the cancellation against the mass that had to cancel
                double absum = r.expect([k](double z) { return std::abs(std::pow(z, k)); });
                CHECK(std::abs(quad) <= 1e-12 * std::max(1.0, absum));
            } else {
                if (k >= 2) dfact *= (k - 1);
                CHECK(std::abs(quad - dfact) <= 1e-10 * std::max(1.0, dfact));
            }
        }
    }
}

namespace {

PathBatch constant_path_batch(const TimeGrid& g) {
    PathBatch b{g, 1, 1, 0, {}};
    b.values.assign(static_cast<std::size_t>(g.n_steps) + 1, 0.0);
    return b;
}

} // namespace

TEST_CASE("level exit on a flat path caps at the horizon") {
    TimeGrid g(0.0, 1.0, 10);
    PathBatch b = constant_path_batch(g);
    CHECK(exit_time(b, 0, 0.0, LevelExit{0.0, 0.5}) == 1.0);
}

TEST_CASE("tiny level exits at the first node past the start") {
    TimeGrid g(0.0, 1.0, 10);
    PathBatch b = constant_path_batch(g);
    for (int k = 1; k <= 10; ++k) b.values[static_cast<std::size_t>(k)] = 0.3 * k;
    CHECK(exit_time(b, 0, 0.0, LevelExit{0.0, 0.2}) == doctest::Approx(0.1));
    // starting later re-references the level at the new start
    CHECK(exit_time(b, 0, 0.5, LevelExit{0.0, 0.2}) == doctest::Approx(0.6));
}

TEST_CASE("threshold branch picks the maturity from the observed sign") {
    TimeGrid g(0.0, 1.0, 16);
    PathBatch b = constant_path_batch(g);
    b.values[4] = 0.3; // W at t = 0.25
    CHECK(exit_time(b, 0, 0.0, ThresholdBranch{0.25, 0.5, 0.75}) == 0.5);
    b.values[4] = -0.3;
    CHECK(exit_time(b, 0, 0.0, ThresholdBranch{0.25, 0.5, 0.75}) == 0.75);
    CHECK_THROWS_AS(exit_time(b, 0, 0.0, ThresholdBranch{0.5, 0.25, 0.75}),
                    std::invalid_argument);
}

TEST_CASE("ks statistic is zero with p one on identical samples") {
    std::vector<double> a{0.1, -0.4, 2.0, 0.7};
    KsResult r = ks_two_sample(a, a);
    CHECK(r.statistic == 0.0);
    CHECK(r.p_value == doctest::Approx(1.0));
    CHECK_THROWS_AS(ks_two_sample({}, a), std::invalid_argument);
}

TEST_CASE("ks rejects a three-sigma location shift decisively") {
    const long n = 10000;
    std::vector<double> a(n), b(n);
    std::mt19937_64 eng(321);
    for (long i = 0; i < n; ++i) {
        a[static_cast<std::size_t>(i)] =
            normal_quantile((static_cast<double>(eng() >> 11) + 0.5) * 0x1.0p-53);
        b[static_cast<std::size_t>(i)] =
            3.0 + normal_quantile((static_cast<double>(eng() >> 11) + 0.5) * 0x1.0p-53);
    }
    KsResult r = ks_two_sample(a, b);
    CHECK(r.p_value < 1e-6);
}

TEST_CASE("ks calibration: same-law samples rarely fall below p = 0.01") {
    // 100 seeded repetitions of two independent N(0,1) samples; at the 1%
    // level we expect about one rejection, and demand at least 95 passes.
    const long n = 100000;
    int passes = 0;
    std::vector<double> a(n), b(n);
    for (int rep = 0; rep < 100; ++rep) {
        std::mt19937_64 eng(num::splitmix64(9000 + static_cast<std::uint64_t>(rep)));
        for (long i = 0; i < n; ++i)
            a[static_cast<std::size_t>(i)] =
                normal_quantile((static_cast<double>(eng() >> 11) + 0.5) * 0x1.0p-53);
        for (long i = 0; i < n; ++i)
            b[static_cast<std::size_t>(i)] =
                normal_quantile((static_cast<double>(eng() >> 11) + 0.5) * 0x1.0p-53);
        if (ks_two_sample(a, b).p_value > 0.01) ++passes;
    }
    CHECK(passes >= 95);
}

TEST_CASE("stopped increments scale like the rescaled clipped window") {
    // lambda * (W_{t + eps ^ tau_C} - W_t) should match in law the increment
    // of a Brownian motion over the lambda^2-shortened window with the level
    // shrunk to lambda * C; both sides use the same discrete monitoring.
    const double lambda = 0.5, C = 1.0, eps = 0.2, t = 0.4, s = 0.1;
    const int n_steps = 50;
    const long n = 100000;
    TimeGrid ga(t, t + eps, n_steps);
    TimeGrid gb(s, s + lambda * lambda * eps, n_steps);
    std::vector<double> sample_a, sample_b;
    sample_a.reserve(n);
    sample_b.reserve(n);
    for_each_path(ga, 1, n, 71001, [&](long, std::span<const double> w) {
        double tau = exit_time_single(ga, w, t, LevelExit{0.0, C});
        int k = ga.index_of(tau);
        sample_a.push_back(lambda * (w[static_cast<std::size_t>(k)] - w[0]));
    });
    for_each_path(gb, 1, n, 71002, [&](long, std::span<const double> w) {
        double tau = exit_time_single(gb, w, s, LevelExit{0.0, lambda * C});
        int k = gb.index_of(tau);
        sample_b.push_back(w[static_cast<std::size_t>(k)] - w[0]);
    });
    KsResult r = ks_two_sample(sample_a, sample_b);
    CHECK(r.p_value > 0.01);
}

TEST_CASE("normal quantile inverts the cdf") {
    for (double p : {0.001, 0.1, 0.5, 0.9, 0.999}) {
        double x = normal_quantile(p);
        CHECK(normal_cdf(x) == doctest::Approx(p).epsilon(1e-12));
    }
}
