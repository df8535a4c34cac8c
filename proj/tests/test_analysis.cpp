#include <doctest.h>

#include <stdexcept>

#include <cmath>
#include <numeric>
#include <vector>

#include "fqt/analysis.hpp"

using namespace fqt;

namespace {

std::vector<double> gaussian_vector(std::size_t n, uint64_t seed, double sigma = 1.0) {
    std::vector<double> v(n);
    const RngStream rng(seed, 0x9e3);
    for (std::size_t i = 0; i < n; ++i) v[i] = sigma * rng.gaussian(i);
    return v;
}

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

// g = (1, 1) with H = [[0.5, 1], [1, 0.5]] gives g^T H g = 3, tr H = 1,
// ||g||^2 = 2 — the worked symbolic instance.
struct SymbolicInstance {
    std::vector<double> grad = {1.0, 1.0};
    CurvatureModel h = CurvatureModel::dense(Matrix::from_rows({{0.5, 1.0}, {1.0, 0.5}}));
};

}  // namespace

TEST_CASE("curvature model accessors") {
    const auto iso = CurvatureModel::isotropic(2.0, 10);
    CHECK(iso.trace() == 20.0);
    CHECK(iso.lambda_max() == 2.0);
    const std::vector<double> g(10, 1.0);
    CHECK(iso.quadratic_form(g) == 20.0);

    const auto diag = CurvatureModel::diagonal({1.0, 5.0, 2.0});
    CHECK(diag.trace() == 8.0);
    CHECK(diag.lambda_max() == 5.0);
    CHECK(diag.quadratic_form(std::vector<double>{1.0, 2.0, 3.0}) == 1.0 + 20.0 + 18.0);

    const auto dense = CurvatureModel::dense(Matrix::from_rows({{2.0, 1.0}, {1.0, 2.0}}));
    CHECK(dense.trace() == 4.0);
    CHECK(dense.quadratic_form(std::vector<double>{1.0, 1.0}) == 6.0);
    CHECK(dense.lambda_max() == doctest::Approx(3.0).epsilon(1e-9));

    CHECK_THROWS_AS(CurvatureModel::dense(Matrix(600, 600)), std::invalid_argument);
    CHECK_THROWS_AS(CurvatureModel::isotropic(0.0, 4), std::invalid_argument);
    CHECK_THROWS_AS(iso.quadratic_form(std::vector<double>{1.0}), std::invalid_argument);
}

TEST_CASE("expected loss delta closed form") {
    SUBCASE("noise-free Newton step gives the exact decrement") {
        const std::vector<double> g = gaussian_vector(6, 1);
        const double lambda = 2.5;
        const auto h = CurvatureModel::isotropic(lambda, 6);
        const double gn2 = norm(g) * norm(g);
        CHECK(expected_loss_delta(g, h, 1.0 / lambda, 0.0) ==
              doctest::Approx(-gn2 / (2.0 * lambda)).epsilon(1e-14));
    }
    SUBCASE("zero gradient leaves the pure noise penalty") {
        const std::vector<double> g(4, 0.0);
        const auto h = CurvatureModel::isotropic(3.0, 4);
        const double eta = 0.2;
        const double sigma = 0.5;
        CHECK(expected_loss_delta(g, h, eta, sigma) ==
              doctest::Approx(0.5 * eta * eta * sigma * sigma * 12.0));
        CHECK(expected_loss_delta(g, h, eta, sigma) >= 0.0);
    }
    SUBCASE("negative eta is rejected") {
        const std::vector<double> g = {1.0};
        CHECK_THROWS_AS(expected_loss_delta(g, CurvatureModel::isotropic(1.0, 1), -0.1, 0.0),
                        std::invalid_argument);
    }
}

TEST_CASE("expected loss delta matches a Monte Carlo oracle on a quadratic") {
    // d = 10, lambda = 2, ||grad|| = 1, sigma_q = 0.1, eta = 0.1.
    const std::size_t d = 10;
    const double lambda = 2.0;
    const double sigma = 0.1;
    const double eta = 0.1;
    std::vector<double> theta(d, 0.0);
    theta[0] = 0.5;  // ||grad|| = lambda * ||theta|| = 1 with theta* = 0
    std::vector<double> grad(d, 0.0);
    grad[0] = lambda * theta[0];
    const auto h = CurvatureModel::isotropic(lambda, d);

    auto loss = [&](const std::vector<double>& t) {
        double s = 0.0;
        for (double x : t) s += x * x;
        return 0.5 * lambda * s;
    };

    const int n = 100000;
    const RngStream rng(77, 0);
    double sum = 0.0, sum_sq = 0.0;
    const double base = loss(theta);
    std::vector<double> moved(d);
    for (int i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            const double eps = sigma * rng.gaussian(static_cast<uint64_t>(i) * d + j);
            moved[j] = theta[j] - eta * (grad[j] + eps);
        }
        const double delta = loss(moved) - base;
        sum += delta;
        sum_sq += delta * delta;
    }
    const double mc_mean = sum / n;
    const double mc_se = std::sqrt((sum_sq / n - mc_mean * mc_mean) / n);
    const double formula = expected_loss_delta(grad, h, eta, sigma);
    CHECK(std::abs(mc_mean - formula) <= 3.0 * mc_se);
}

TEST_CASE("optimal step size") {
    SUBCASE("reduces to 1/lambda without noise") {
        const std::vector<double> g = gaussian_vector(8, 3);
        CHECK(optimal_eta(g, CurvatureModel::isotropic(4.0, 8), 0.0) ==
              doctest::Approx(0.25).epsilon(1e-14));
    }
    SUBCASE("decreases monotonically in the noise level") {
        const std::vector<double> g = gaussian_vector(8, 4);
        const auto h = CurvatureModel::isotropic(1.5, 8);
        double prev = optimal_eta(g, h, 0.0);
        for (double sigma : {0.1, 0.3, 1.0, 3.0, 10.0, 100.0}) {
            const double eta = optimal_eta(g, h, sigma);
            CHECK(eta < prev);
            prev = eta;
        }
        CHECK(prev < 1e-4);  // eta* -> 0 as sigma -> inf
    }
    SUBCASE("symbolic instance X=3 Y=1 ||g||^2=2 sigma=1 gives 1/2") {
        SymbolicInstance inst;
        CHECK(inst.h.quadratic_form(inst.grad) == 3.0);
        CHECK(inst.h.trace() == 1.0);
        CHECK(optimal_eta(inst.grad, inst.h, 1.0) == doctest::Approx(0.5).epsilon(1e-14));
        // Cross-check numerically: eta* minimizes the expected loss delta.
        double best_eta = 0.0, best = 1e300;
        for (int i = 0; i <= 2000; ++i) {
            const double eta = 1.5 * i / 2000.0;
            const double u = expected_loss_delta(inst.grad, inst.h, eta, 1.0);
            if (u < best) {
                best = u;
                best_eta = eta;
            }
        }
        CHECK(best_eta == doctest::Approx(0.5).epsilon(1e-2));
    }
    SUBCASE("non-positive denominator is an error") {
        const std::vector<double> g = {1.0, 1.0};
        const auto h = CurvatureModel::diagonal({-1.0, -1.0});
        CHECK_THROWS_AS(optimal_eta(g, h, 0.0), std::domain_error);
    }
}

TEST_CASE("loss delta at the optimum") {
    SUBCASE("agrees with expected_loss_delta at eta* on random instances") {
        for (int trial = 0; trial < 200; ++trial) {
            const std::size_t d = 2 + trial % 7;
            const std::vector<double> g = gaussian_vector(d, 500 + trial);
            const RngStream rng(600 + trial, 0);
            CurvatureModel h = CurvatureModel::isotropic(0.1 + rng.uniform(0), d);
            if (trial % 3 == 1) {
                std::vector<double> diag(d);
                for (std::size_t i = 0; i < d; ++i) diag[i] = 0.1 + rng.uniform(i + 1);
                h = CurvatureModel::diagonal(std::move(diag));
            } else if (trial % 3 == 2) {
                Matrix m(d, d);
                for (std::size_t i = 0; i < d; ++i) {
                    m(i, i) = 1.0 + rng.uniform(i + 1);
                    for (std::size_t j = 0; j < i; ++j)
                        m(i, j) = m(j, i) = 0.1 * (rng.uniform(d + i * d + j) - 0.5);
                }
                h = CurvatureModel::dense(std::move(m));
            }
            const double sigma = rng.uniform(50);
            const double eta = optimal_eta(g, h, sigma);
            const double direct = loss_delta_at_optimum(g, h, sigma);
            const double via_eta = expected_loss_delta(g, h, eta, sigma);
            CHECK(std::abs(direct - via_eta) <= 1e-12 * std::abs(direct));
        }
    }
    SUBCASE("known values") {
        const std::vector<double> g = gaussian_vector(5, 9);
        const double lambda = 3.0;
        const double gn2 = norm(g) * norm(g);
        CHECK(loss_delta_at_optimum(g, CurvatureModel::isotropic(lambda, 5), 0.0) ==
              doctest::Approx(-gn2 / (2.0 * lambda)).epsilon(1e-14));
        SymbolicInstance inst;  // Z = 4, X = 3, Y = 1, sigma = 1 -> -0.5
        CHECK(loss_delta_at_optimum(inst.grad, inst.h, 1.0) ==
              doctest::Approx(-0.5).epsilon(1e-14));
    }
    SUBCASE("eta* is a local minimum of the expected loss delta") {
        const std::vector<double> g = gaussian_vector(6, 10);
        const auto h = CurvatureModel::isotropic(2.0, 6);
        for (double sigma : {0.0, 0.2, 1.0}) {
            const double eta = optimal_eta(g, h, sigma);
            const double at = expected_loss_delta(g, h, eta, sigma);
            for (double delta : {1e-4, 1e-3, 1e-2}) {
                CHECK(expected_loss_delta(g, h, eta + delta, sigma) >= at);
                CHECK(expected_loss_delta(g, h, eta - delta, sigma) >= at);
            }
        }
    }
}

TEST_CASE("descent holds below twice the optimal step size") {
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t d = 2 + trial % 5;
        const std::vector<double> g = gaussian_vector(d, 700 + trial);
        const auto h = CurvatureModel::isotropic(0.5 + 0.01 * trial, d);
        const double sigma = 0.3;
        const double bound = 2.0 * optimal_eta(g, h, sigma);
        CHECK(expected_loss_delta(g, h, 0.99 * bound, sigma) < 0.0);
        CHECK(expected_loss_delta(g, h, 0.5 * bound, sigma) < 0.0);
    }
}

TEST_CASE("noise sensitivity") {
    SymbolicInstance inst;
    SUBCASE("vanishes at zero noise") { CHECK(noise_sensitivity(inst.grad, inst.h, 0.0) == 0.0); }
    SUBCASE("argmax over a dense grid sits at sqrt(X / 3Y)") {
        const double target = sigma_critical_general(3.0, 1.0);  // = 1.0
        CHECK(target == doctest::Approx(1.0).epsilon(1e-14));
        double best_sigma = 0.0, best = -1.0;
        const int cells = 10000;
        for (int i = 0; i <= cells; ++i) {
            const double sigma = 10.0 * i / cells;
            const double f = noise_sensitivity(inst.grad, inst.h, sigma);
            if (f > best) {
                best = f;
                best_sigma = sigma;
            }
        }
        CHECK(std::abs(best_sigma - target) <= 10.0 / cells + 1e-12);
    }
    SUBCASE("increases below the peak and decreases above it") {
        const double peak = sigma_critical_general(3.0, 1.0);
        double prev = noise_sensitivity(inst.grad, inst.h, 0.0);
        for (int i = 1; i <= 20; ++i) {
            const double sigma = peak * i / 20.0;
            const double f = noise_sensitivity(inst.grad, inst.h, sigma);
            CHECK(f > prev);
            prev = f;
        }
        prev = noise_sensitivity(inst.grad, inst.h, peak);
        for (int i = 1; i <= 20; ++i) {
            const double sigma = peak * (1.0 + i / 10.0);
            const double f = noise_sensitivity(inst.grad, inst.h, sigma);
            CHECK(f < prev);
            prev = f;
        }
    }
}

TEST_CASE("sigma_critical") {
    CHECK(sigma_critical(0.0, 17) == 0.0);
    const double sigma = 0.37;
    const std::size_t d = 12;
    const double grad_norm = std::sqrt(3.0 * d) * sigma;
    CHECK(sigma_critical(grad_norm, d) == doctest::Approx(sigma).epsilon(1e-15));
    CHECK_THROWS_AS(sigma_critical(1.0, 0), std::invalid_argument);

    // Isotropic case: the exact Step-8 peak equals the bulk approximation.
    const std::vector<double> g = gaussian_vector(20, 123);
    const double lambda = 2.7;
    const auto h = CurvatureModel::isotropic(lambda, 20);
    CHECK(sigma_critical_general(h.quadratic_form(g), h.trace()) ==
          doctest::Approx(sigma_critical(norm(g), 20)).epsilon(1e-14));
}

TEST_CASE("threshold consistency: ratio below sqrt(3) iff sigma above critical") {
    const double grad_norm = 1.7;
    const std::size_t d = 9;
    const double crit = sigma_critical(grad_norm, d);
    for (double factor : {0.5, 0.999999, 1.000001, 2.0}) {
        const double sigma = crit * factor;
        const double ratio = grad_norm / (sigma * std::sqrt(double(d)));
        CHECK((ratio < ThresholdMonitor::kThreshold) == (sigma > crit));
    }
}

TEST_CASE("biased fixed point closed forms") {
    CHECK(biased_fixed_point(2.0, 0.1, 0.0, 1.0, 50).e_inf == 0.0);
    CHECK(biased_fixed_point(2.0, 0.1, 0.0, 1.0, 50).loss_inf == 0.0);

    const auto fp = biased_fixed_point(1.0, 0.1, 0.1, 1.0, 100000);
    CHECK(fp.e_inf == doctest::Approx(-0.1).epsilon(1e-14));
    CHECK(fp.loss_inf == doctest::Approx(0.005).epsilon(1e-14));
    CHECK(fp.e_n == doctest::Approx(fp.e_inf).epsilon(1e-10));

    const auto at_zero = biased_fixed_point(1.0, 0.1, 0.25, 0.7, 0);
    CHECK(at_zero.e_n == 0.7);

    CHECK_THROWS_AS(biased_fixed_point(1.0, 2.0, 0.1, 1.0, 5), std::domain_error);
    CHECK_THROWS_AS(biased_fixed_point(1.0, 0.0, 0.1, 1.0, 5), std::domain_error);
    CHECK_THROWS_AS(biased_fixed_point(-1.0, 0.1, 0.1, 1.0, 5), std::invalid_argument);
}

TEST_CASE("threshold monitor pair form recovers injected noise") {
    ThresholdMonitor monitor;
    const std::vector<double> clean = gaussian_vector(100000, 31);
    const double injected = 0.01;
    std::vector<double> noisy = clean;
    const RngStream noise(32, 0);
    for (std::size_t i = 0; i < noisy.size(); ++i) noisy[i] += injected * noise.gaussian(i);
    const auto report = monitor.monitor_pair(clean, noisy, 0);
    CHECK(report.sigma_q == doctest::Approx(injected).epsilon(0.05));
    CHECK(report.grad_norm == doctest::Approx(norm(clean)).epsilon(1e-12));
    CHECK(report.d == clean.size());
}

TEST_CASE("threshold monitor crossing dynamics") {
    ThresholdMonitor monitor;
    const std::size_t d = 64;

    // Zero gradient, zero noise: sentinel report, no crossing.
    const std::vector<double> zeros(d, 0.0);
    const auto first = monitor.monitor_pair(zeros, zeros, 0);
    CHECK(first.grad_norm == 0.0);
    CHECK(first.sigma_q == 0.0);
    CHECK(std::isinf(first.ratio));
    CHECK_FALSE(first.crossed);

    // A later step whose noise dwarfs the gradient crosses immediately.
    std::vector<double> tiny(d, 1e-6);
    std::vector<double> noisy(d);
    const RngStream noise(5, 5);
    for (std::size_t i = 0; i < d; ++i) noisy[i] = tiny[i] + 0.01 * noise.gaussian(i);
    const auto second = monitor.monitor_pair(tiny, noisy, 1);
    CHECK(second.ratio < 0.1);
    CHECK(second.crossed);
}

TEST_CASE("threshold monitor single-gradient form with a known SR noise level") {
    // Blocks of one exact 6 (scale 1) and fifteen values at 0.25, the midpoint
    // of the first E2M1 bin: each noisy element contributes variance 1/16, so
    // sigma_q = sqrt(15/16 * 0.0625) analytically.
    const std::size_t blocks = 400;
    std::vector<double> grad(blocks * 16);
    for (std::size_t b = 0; b < blocks; ++b) {
        grad[b * 16] = 6.0;
        for (std::size_t i = 1; i < 16; ++i) grad[b * 16 + i] = 0.25;
    }
    ThresholdMonitor monitor;
    const auto report = monitor.monitor_step(grad, BlockQuantConfig::nvfp4(), 0, RngStream(9, 9));
    const double expected = std::sqrt(15.0 / 16.0 * 0.0625);
    CHECK(report.sigma_q == doctest::Approx(expected).epsilon(0.05));

    // Identical inputs with identical keys produce identical reports.
    ThresholdMonitor fresh;
    const auto again = fresh.monitor_step(grad, BlockQuantConfig::nvfp4(), 0, RngStream(9, 9));
    CHECK(again.sigma_q == report.sigma_q);
    CHECK(again.ratio == report.ratio);
    CHECK(again.crossed == report.crossed);
    // Feeding the same ratio twice leaves the EMA unchanged as well.
    const auto third = fresh.monitor_step(grad, BlockQuantConfig::nvfp4(), 1, RngStream(9, 9));
    CHECK(third.ema_ratio == doctest::Approx(again.ema_ratio).epsilon(1e-12));
}
