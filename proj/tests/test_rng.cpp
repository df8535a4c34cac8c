#include <doctest.h>

#include <cmath>

#include "fqt/rng.hpp"

using namespace fqt;

TEST_CASE("identical keys reproduce identical draws") {
    const RngStream a(42, 7);
    const RngStream b(42, 7);
    for (uint64_t c = 0; c < 64; ++c) {
        CHECK(a.uniform(c) == b.uniform(c));
        CHECK(a.gaussian(c) == b.gaussian(c));
    }
}

TEST_CASE("different seeds, streams and counters give different values") {
    const RngStream base(1, 1);
    CHECK(base.uniform(0) != RngStream(2, 1).uniform(0));
    CHECK(base.uniform(0) != RngStream(1, 2).uniform(0));
    CHECK(base.uniform(0) != base.uniform(1));
}

TEST_CASE("uniform stays in [0, 1)") {
    const RngStream s(9, 3);
    for (uint64_t c = 0; c < 10000; ++c) {
        const double u = s.uniform(c);
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
    }
}

TEST_CASE("uniform and gaussian moments look right") {
    const RngStream s(2024, 0);
    const int n = 200000;
    double u_sum = 0.0, g_sum = 0.0, g_sq = 0.0;
    for (int c = 0; c < n; ++c) {
        u_sum += s.uniform(c);
        const double g = s.gaussian(static_cast<uint64_t>(c) + n);
        g_sum += g;
        g_sq += g * g;
    }
    const double u_mean = u_sum / n;
    const double g_mean = g_sum / n;
    const double g_var = g_sq / n - g_mean * g_mean;
    // 3-sigma Monte Carlo bands.
    CHECK(std::abs(u_mean - 0.5) < 3.0 * std::sqrt(1.0 / 12.0 / n));
    CHECK(std::abs(g_mean) < 3.0 / std::sqrt(double(n)));
    CHECK(std::abs(g_var - 1.0) < 3.0 * std::sqrt(2.0 / n));
}

TEST_CASE("for_tensor separates tensor ids and steps") {
    const auto a = RngStream::for_tensor(5, 1, 10);
    const auto b = RngStream::for_tensor(5, 2, 10);
    const auto c = RngStream::for_tensor(5, 1, 11);
    CHECK(a.uniform(0) != b.uniform(0));
    CHECK(a.uniform(0) != c.uniform(0));
    CHECK(a.stream() != b.stream());
}
