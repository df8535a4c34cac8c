#include <doctest.h>

#include <array>
#include <stdexcept>

#include <cmath>
#include <vector>

#include "fqt/trainer.hpp"

using namespace fqt;

namespace {

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, uint64_t seed, double sigma = 1.0) {
    Matrix m(rows, cols);
    const RngStream rng(seed, 0xda7a);
    for (std::size_t i = 0; i < m.size(); ++i) m.at_flat(i) = sigma * rng.gaussian(i);
    return m;
}

}  // namespace

TEST_CASE("noise-free quadratic with the optimal step converges in one step") {
    // Dyadic coordinates keep every intermediate exact, so the Newton step
    // lands on theta* with literally zero loss.
    QuadraticProblem problem;
    problem.d = 8;
    problem.lambda = 2.0;
    problem.theta_star.assign(8, 0.25);
    problem.theta0.assign(8, 0.25);
    for (std::size_t i = 0; i < 8; ++i) problem.theta0[i] += std::ldexp(1.0, -int(i) - 1);
    QuadraticSchedule sched;
    sched.steps = 10;
    const auto trace = run_quadratic_sr(problem, sched, NoiseRule::FixedSigma, 0.0, 1);
    CHECK(trace.loss[0] > 0.0);
    for (std::size_t t = 1; t < trace.loss.size(); ++t) CHECK(trace.loss[t] == 0.0);

    // From an arbitrary start the step is exact up to last-ulp residue.
    const auto generic = QuadraticProblem::make(20, 3.0, 5.0, 1);
    const auto gtrace = run_quadratic_sr(generic, sched, NoiseRule::FixedSigma, 0.0, 1);
    CHECK(gtrace.loss[1] <= 1e-28 * gtrace.loss[0]);
}

TEST_CASE("one quadratic SR step is unbiased over seeds") {
    // With fixed eta and fixed sigma, E[L(theta_1)] has the closed form
    // lambda/2 * ((1 - eta lambda)^2 ||e0||^2 + eta^2 sigma^2 d); the Monte
    // Carlo mean over seeds must match it, which pins E[theta_1 | theta_0]
    // to the noise-free update.
    const std::size_t d = 16;
    QuadraticProblem problem;
    problem.d = d;
    problem.lambda = 2.0;
    problem.theta_star.assign(d, 0.0);
    problem.theta0.assign(d, 1.0);
    QuadraticSchedule sched;
    sched.steps = 1;
    sched.use_optimal_eta = false;
    sched.eta = 0.2;
    const double sigma = 0.5;

    const int n = 4000;
    double sum = 0.0, sum_sq = 0.0;
    for (int s = 0; s < n; ++s) {
        const auto trace =
            run_quadratic_sr(problem, sched, NoiseRule::FixedSigma, sigma, 1000 + s);
        sum += trace.loss[1];
        sum_sq += trace.loss[1] * trace.loss[1];
    }
    const double mc_mean = sum / n;
    const double mc_se = std::sqrt((sum_sq / n - mc_mean * mc_mean) / n);
    const double contraction = 1.0 - sched.eta * problem.lambda;  // 0.6
    const double expected =
        0.5 * problem.lambda *
        (contraction * contraction * double(d) + sched.eta * sched.eta * sigma * sigma * d);
    CHECK(std::abs(mc_mean - expected) <= 3.0 * mc_se);
}

TEST_CASE("adaptive noise levels order the quadratic losses as in the paper") {
    // Ratios of consecutive losses differ so strongly between k = 2 and
    // k = 0.5 that 40 steps already separate them by many orders of magnitude.
    const auto problem = QuadraticProblem::make(100, 1.0, 10.0, 3);
    QuadraticSchedule sched;
    sched.steps = 40;
    const auto k2 = run_quadratic_sr(problem, sched, NoiseRule::AdaptiveCritical, 2.0, 3);
    const auto k05 = run_quadratic_sr(problem, sched, NoiseRule::AdaptiveCritical, 0.5, 3);
    CHECK(!k2.diverged);
    CHECK(!k05.diverged);
    CHECK(k2.final_loss() > 0.0);
    CHECK(k2.final_loss() >= 10.0 * k05.final_loss());
}

TEST_CASE("adaptive rule requires a positive k") {
    const auto problem = QuadraticProblem::make(4, 1.0, 1.0, 1);
    QuadraticSchedule sched;
    CHECK_THROWS_AS(run_quadratic_sr(problem, sched, NoiseRule::AdaptiveCritical, 0.0, 1),
                    std::invalid_argument);
}

TEST_CASE("noise-free biased recursion contracts geometrically") {
    QuadraticProblem problem;
    problem.d = 1;
    problem.lambda = 1.0;
    problem.theta_star = {0.0};
    problem.theta0 = {1.0};
    const double eta = 0.25;  // a = 0.75, loss ratio a^2 per step
    const auto run = run_quadratic_biased(problem, 30, eta, 0.0, 0.0, 1);
    CHECK_FALSE(run.divergence_warning);
    for (std::size_t t = 1; t < run.trace.loss.size(); ++t)
        CHECK(run.trace.loss[t] ==
              doctest::Approx(0.5625 * run.trace.loss[t - 1]).epsilon(1e-12));
}

TEST_CASE("biased recursion matches the closed form at machine tolerance") {
    for (const auto& [lambda, eta, mu] : std::vector<std::array<double, 3>>{
             {1.0, 0.1, 0.1}, {2.0, 0.3, -0.05}, {0.5, 1.5, 0.2}}) {
        QuadraticProblem problem;
        problem.d = 1;
        problem.lambda = lambda;
        problem.theta_star = {0.0};
        problem.theta0 = {1.0};
        const std::size_t steps = 500;
        const auto run = run_quadratic_biased(problem, steps, eta, mu, 0.0, 1);
        const auto fp = biased_fixed_point(lambda, eta, mu, 1.0, steps);
        CHECK(std::abs(run.error_coord0.back() - fp.e_n) <=
              1e-10 * std::max(1.0, std::abs(fp.e_n)));
        CHECK(run.trace.loss.back() ==
              doctest::Approx(fp.loss_n).epsilon(1e-9));
    }
}

TEST_CASE("biased recursion stationary loss approaches mu^2 / (2 lambda)") {
    QuadraticProblem problem;
    problem.d = 1;
    problem.lambda = 1.0;
    problem.theta_star = {0.0};
    problem.theta0 = {1.0};
    const auto run = run_quadratic_biased(problem, 4000, 0.1, 0.1, 0.0, 1);
    CHECK(run.stationary_loss == doctest::Approx(0.005).epsilon(1e-6));
}

TEST_CASE("divergence warning is raised for eta lambda >= 2") {
    QuadraticProblem problem;
    problem.d = 1;
    problem.lambda = 1.0;
    problem.theta_star = {0.0};
    problem.theta0 = {1.0};
    CHECK(run_quadratic_biased(problem, 5, 2.5, 0.0, 0.0, 1).divergence_warning);
    CHECK_FALSE(run_quadratic_biased(problem, 5, 0.5, 0.0, 0.0, 1).divergence_warning);
}

TEST_CASE("gradcheck passes for every activation and loss pairing") {
    const Matrix x = gaussian_matrix(4, 12, 21);

    SUBCASE("relu + mse") {
        ToyNetConfig cfg{{4, 8, 3}, Activation::ReLU, LossKind::Mse};
        ToyNet net(cfg, 5);
        const Matrix y = gaussian_matrix(3, 12, 22);
        CHECK(gradcheck(net, x, y, 1e-3) < 1e-4);
    }
    SUBCASE("identity (linear net) + mse is tighter") {
        ToyNetConfig cfg{{4, 8, 3}, Activation::Identity, LossKind::Mse};
        ToyNet net(cfg, 6);
        const Matrix y = gaussian_matrix(3, 12, 23);
        CHECK(gradcheck(net, x, y, 1e-3) < 1e-6);
    }
    SUBCASE("relu + cross entropy") {
        ToyNetConfig cfg{{4, 8, 3}, Activation::ReLU, LossKind::SoftmaxCrossEntropy};
        ToyNet net(cfg, 7);
        Matrix y(3, 12, 0.0);
        for (std::size_t c = 0; c < 12; ++c) y(c % 3, c) = 1.0;
        CHECK(gradcheck(net, x, y, 1e-3) < 1e-4);
    }
    SUBCASE("identity + cross entropy") {
        ToyNetConfig cfg{{4, 8, 3}, Activation::Identity, LossKind::SoftmaxCrossEntropy};
        ToyNet net(cfg, 8);
        Matrix y(3, 12, 0.0);
        for (std::size_t c = 0; c < 12; ++c) y((c + 1) % 3, c) = 1.0;
        CHECK(gradcheck(net, x, y, 1e-3) < 1e-4);
    }
    SUBCASE("zero inputs, zero targets, zero weights give an exactly zero gradient") {
        ToyNetConfig cfg{{4, 8, 3}, Activation::ReLU, LossKind::Mse};
        ToyNet net(cfg, 9);
        for (auto& w : net.weights())
            for (std::size_t i = 0; i < w.size(); ++i) w.at_flat(i) = 0.0;
        const Matrix zx(4, 6, 0.0);
        const Matrix zy(3, 6, 0.0);
        const auto grads = net.compute_grads(zx, zy, RoundingPolicy::all_none(), 0, 0);
        CHECK(grads.grad_norm == 0.0);
        CHECK(gradcheck(net, zx, zy, 1e-3) == 0.0);
    }
}

TEST_CASE("all-None training matches a hand-rolled high-precision trainer bit for bit") {
    ToyNetConfig cfg{{5, 8, 2}, Activation::ReLU, LossKind::Mse};
    const Matrix x = gaussian_matrix(5, 16, 31);
    const Matrix y = gaussian_matrix(2, 16, 32);
    const std::size_t steps = 25;
    const double eta = 0.05;

    ToyNet net(cfg, 77);
    NetTrainSchedule sched;
    sched.steps = steps;
    sched.eta = eta;
    const auto run = train_toynet(net, x, y, RoundingPolicy::all_none(), sched, 1);

    // Reference trainer: plain matmuls, same update order and accumulation.
    ToyNet ref_net(cfg, 77);
    std::vector<double> ref_losses;
    const double batch = static_cast<double>(x.cols());
    for (std::size_t t = 0; t < steps; ++t) {
        auto& w = ref_net.weights();
        const Matrix z0 = matmul(w[0], x);
        Matrix a1 = z0;
        for (std::size_t i = 0; i < a1.size(); ++i)
            if (a1.at_flat(i) < 0.0) a1.at_flat(i) = 0.0;
        const Matrix z1 = matmul(w[1], a1);

        double loss = 0.0;
        Matrix delta1(z1.rows(), z1.cols());
        for (std::size_t i = 0; i < z1.size(); ++i) {
            const double diff = z1.at_flat(i) - y.at_flat(i);
            loss += diff * diff;
            delta1.at_flat(i) = diff / batch;
        }
        ref_losses.push_back(0.5 * loss / batch);

        const Matrix dw1 = matmul(delta1, a1.transposed());
        Matrix delta0 = matmul(w[1].transposed(), delta1);
        for (std::size_t i = 0; i < delta0.size(); ++i)
            if (z0.at_flat(i) <= 0.0) delta0.at_flat(i) = 0.0;
        const Matrix dw0 = matmul(delta0, x.transposed());

        for (std::size_t i = 0; i < w[1].size(); ++i) w[1].at_flat(i) -= eta * dw1.at_flat(i);
        for (std::size_t i = 0; i < w[0].size(); ++i) w[0].at_flat(i) -= eta * dw0.at_flat(i);
    }

    REQUIRE(run.loss.loss.size() == ref_losses.size());
    for (std::size_t t = 0; t < steps; ++t) CHECK(run.loss.loss[t] == ref_losses[t]);
    for (std::size_t l = 0; l < 2; ++l) CHECK(net.weights()[l] == ref_net.weights()[l]);
}

TEST_CASE("training runs are reproducible from seed and config") {
    ToyNetConfig cfg{{6, 16, 4}, Activation::ReLU, LossKind::Mse};
    const Dataset data = make_teacher_student_dataset(cfg, 32, 9);
    const auto policy = RoundingPolicy::split_rounding(BlockQuantConfig::nvfp4());
    NetTrainSchedule sched;
    sched.steps = 40;
    sched.eta = 0.05;

    ToyNet net_a(cfg, 9);
    ToyNet net_b(cfg, 9);
    const auto a = train_toynet(net_a, data.inputs, data.targets, policy, sched, 9);
    const auto b = train_toynet(net_b, data.inputs, data.targets, policy, sched, 9);
    CHECK(a.loss.loss == b.loss.loss);
    for (std::size_t l = 0; l < net_a.layer_count(); ++l)
        CHECK(net_a.weights()[l] == net_b.weights()[l]);

    ToyNet net_c(cfg, 10);
    const auto c = train_toynet(net_c, data.inputs, data.targets, policy, sched, 10);
    CHECK(a.loss.loss != c.loss.loss);
}

TEST_CASE("the precision switch changes only the three SR points") {
    auto policy = RoundingPolicy::split_rounding(BlockQuantConfig::nvfp4());
    RoundingPolicy switched = policy;
    switched.at(QuantPointId::BwdGrad).reset();
    switched.at(QuantPointId::UpdGrad).reset();
    switched.at(QuantPointId::UpdActT).reset();

    ToyNetConfig cfg{{6, 16, 4}, Activation::ReLU, LossKind::Mse};
    ToyNet net(cfg, 4);
    const Matrix x = gaussian_matrix(6, 10, 41);

    // Forward outputs are identical across the switch boundary for the same
    // parameters: the forward points are untouched.
    CHECK(net.predict(x, policy, 3, 7) == net.predict(x, switched, 3, 7));
}

TEST_CASE("train_toynet applies the switch at the requested step") {
    ToyNetConfig cfg{{6, 16, 4}, Activation::ReLU, LossKind::Mse};
    const Dataset data = make_teacher_student_dataset(cfg, 32, 11);
    const auto policy = RoundingPolicy::split_rounding(BlockQuantConfig::nvfp4());
    NetTrainSchedule sched;
    sched.steps = 30;
    sched.eta = 0.02;
    sched.switch_step = 12;
    ToyNet net(cfg, 11);
    const auto run = train_toynet(net, data.inputs, data.targets, policy, sched, 11);
    REQUIRE(run.switch_step.has_value());
    CHECK(*run.switch_step == 12);
    // Before the switch the monitor sees SR noise; after it there is none.
    CHECK(run.threshold[5].sigma_q > 0.0);
    CHECK(run.threshold[20].sigma_q == 0.0);
    CHECK(std::isinf(run.threshold[20].ratio));
    CHECK_FALSE(run.threshold[20].crossed);
}

TEST_CASE("single-point SR ablation runs produce finite losses at every point") {
    ToyNetConfig cfg{{6, 16, 4}, Activation::ReLU, LossKind::Mse};
    const Dataset data = make_teacher_student_dataset(cfg, 32, 12);
    NetTrainSchedule sched;
    sched.steps = 60;
    sched.eta = 0.02;
    for (QuantPointId point : kAllQuantPoints) {
        std::array<RoundingMode, kQuantPointCount> modes;
        modes.fill(RoundingMode::RtN);
        modes[static_cast<std::size_t>(point)] = RoundingMode::SR;
        const auto policy = RoundingPolicy::from_modes(BlockQuantConfig::nvfp4(), modes);
        ToyNet net(cfg, 13);
        const auto run = train_toynet(net, data.inputs, data.targets, policy, sched, 13);
        CAPTURE(quant_point_name(point));
        CHECK_FALSE(run.diverged);
        CHECK(std::isfinite(run.loss.final_loss()));
    }
}

TEST_CASE("teacher-student datasets are deterministic in the seed") {
    ToyNetConfig cfg{{6, 16, 4}, Activation::ReLU, LossKind::Mse};
    const Dataset a = make_teacher_student_dataset(cfg, 24, 5, 1.0, 0.1);
    const Dataset b = make_teacher_student_dataset(cfg, 24, 5, 1.0, 0.1);
    CHECK(a.inputs == b.inputs);
    CHECK(a.targets == b.targets);

    const Dataset c = make_classification_dataset(cfg, 24, 5, 0.25);
    const Dataset d_ = make_classification_dataset(cfg, 24, 5, 0.25);
    CHECK(c.targets == d_.targets);
    // One-hot columns.
    for (std::size_t col = 0; col < 24; ++col) {
        double sum = 0.0;
        for (std::size_t r = 0; r < 4; ++r) sum += c.targets(r, col);
        CHECK(sum == 1.0);
    }
}
