#pragma once

#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "fqt/blockquant.hpp"
#include "fqt/matrix.hpp"
#include "fqt/rng.hpp"

namespace fqt {

// Curvature (Hessian) model for the noisy-descent analysis: a scalar multiple
// of the identity, a diagonal, or an explicit symmetric matrix (small
// dimensions only).
class CurvatureModel {
public:
    static CurvatureModel isotropic(double lambda, std::size_t d);
    static CurvatureModel diagonal(std::vector<double> h);
    static CurvatureModel dense(Matrix h);  // d <= 512

    std::size_t dim() const;
    double trace() const;
    double quadratic_form(std::span<const double> grad) const;  // grad^T H grad
    double lambda_max() const;

private:
    struct Isotropic {
        double lambda;
        std::size_t d;
    };
    std::variant<Isotropic, std::vector<double>, Matrix> model_;
};

// Expected one-step loss change under a noisy gradient update:
//   -eta ||g||^2 + eta^2/2 (g^T H g + sigma_q^2 tr H).
double expected_loss_delta(std::span<const double> grad, const CurvatureModel& h, double eta,
                           double sigma_q);

// Step size minimizing the expected loss change:
//   ||g||^2 / (g^T H g + sigma_q^2 tr H).
double optimal_eta(std::span<const double> grad, const CurvatureModel& h, double sigma_q);

// Expected loss change at the optimal step size: -||g||^4 / (2 (g^T H g + sigma_q^2 tr H)).
double loss_delta_at_optimum(std::span<const double> grad, const CurvatureModel& h, double sigma_q);

// Sensitivity of the optimal expected loss change to the noise level,
//   f(sigma) = Z Y sigma / (X + Y sigma^2)^2
// with X = g^T H g, Y = tr H, Z = ||g||^4. f peaks at sigma^2 = X / (3 Y).
double noise_sensitivity(std::span<const double> grad, const CurvatureModel& h, double sigma_q);

// Exact peak of the sensitivity, sqrt(X / (3 Y)).
double sigma_critical_general(double grad_h_grad, double trace_h);

// Bulk approximation of the critical noise level, ||grad|| / sqrt(3 d); exact
// for isotropic curvature.
double sigma_critical(double grad_norm, std::size_t d);

// Closed forms for descent with noise of nonzero mean mu_eps on a quadratic
// with curvature lambda, a = 1 - eta * lambda:
//   e_n = a^n e_0 - (mu/lambda)(1 - a^n),  L_n = lambda e_n^2 / 2,
//   e_inf = -mu/lambda,                    L_inf = mu^2 / (2 lambda).
struct BiasedFixedPoint {
    double e_n = 0.0;
    double loss_n = 0.0;
    double e_inf = 0.0;
    double loss_inf = 0.0;
};
BiasedFixedPoint biased_fixed_point(double lambda, double eta, double mu_eps, double e0, uint64_t n);

// One row of the gradient-to-noise trace. ratio = ||grad|| / (sigma_q sqrt(d));
// training is past the useful-descent threshold once the smoothed ratio drops
// below sqrt(3), equivalently sigma_q exceeds sigma_critical.
struct ThresholdReport {
    uint64_t step = 0;
    double grad_norm = 0.0;
    double sigma_q = 0.0;
    std::size_t d = 0;
    double ratio = 0.0;  // +inf when no quantization noise was measured
    double ema_ratio = 0.0;
    bool crossed = false;
    double sigma_crit = 0.0;
};

// Owns the EMA state of one training run's ratio trace (decay 0.9).
class ThresholdMonitor {
public:
    static constexpr double kThreshold = 1.7320508075688772;  // sqrt(3)
    static constexpr std::size_t kMaxSampleElements = 1u << 16;

    // sigma_q from the residuals between a reference gradient and its noisy
    // (quantized-pipeline) counterpart, measured on a strided subsample. The
    // reported grad_norm is the reference norm, so the ratio compares the
    // clean gradient signal against the noise actually added to it.
    ThresholdReport monitor_pair(std::span<const double> reference,
                                 std::span<const double> quantized, uint64_t step);

    // Single-gradient form: SR-quantizes the gradient under cfg and treats
    // the rounding residuals as the noise sample.
    ThresholdReport monitor_step(std::span<const double> grad, const BlockQuantConfig& cfg,
                                 uint64_t step, const RngStream& rng);

    bool has_ema() const { return has_ema_; }
    double ema() const { return ema_; }

private:
    ThresholdReport update(uint64_t step, double grad_norm, std::size_t d, double sigma_q);

    double ema_ = 0.0;
    bool has_ema_ = false;
};

}  // namespace fqt
