#include "fqt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fqt {

CurvatureModel CurvatureModel::isotropic(double lambda, std::size_t d) {
    if (lambda <= 0.0) throw std::invalid_argument("curvature: lambda must be positive");
    if (d == 0) throw std::invalid_argument("curvature: dimension must be positive");
    CurvatureModel m;
    m.model_ = Isotropic{lambda, d};
    return m;
}

CurvatureModel CurvatureModel::diagonal(std::vector<double> h) {
    if (h.empty()) throw std::invalid_argument("curvature: empty diagonal");
    CurvatureModel m;
    m.model_ = std::move(h);
    return m;
}

CurvatureModel CurvatureModel::dense(Matrix h) {
    if (h.rows() != h.cols()) throw std::invalid_argument("curvature: matrix must be square");
    if (h.rows() > 512) throw std::invalid_argument("curvature: dense model limited to d <= 512");
    CurvatureModel m;
    m.model_ = std::move(h);
    return m;
}

std::size_t CurvatureModel::dim() const {
    if (const auto* iso = std::get_if<Isotropic>(&model_)) return iso->d;
    if (const auto* diag = std::get_if<std::vector<double>>(&model_)) return diag->size();
    return std::get<Matrix>(model_).rows();
}

double CurvatureModel::trace() const {
    if (const auto* iso = std::get_if<Isotropic>(&model_))
        return iso->lambda * static_cast<double>(iso->d);
    if (const auto* diag = std::get_if<std::vector<double>>(&model_)) {
        double t = 0.0;
        for (double v : *diag) t += v;
        return t;
    }
    const Matrix& h = std::get<Matrix>(model_);
    double t = 0.0;
    for (std::size_t i = 0; i < h.rows(); ++i) t += h(i, i);
    return t;
}

double CurvatureModel::quadratic_form(std::span<const double> grad) const {
    if (grad.size() != dim()) throw std::invalid_argument("curvature: gradient dimension mismatch");
    if (const auto* iso = std::get_if<Isotropic>(&model_)) {
        double s = 0.0;
        for (double g : grad) s += g * g;
        return iso->lambda * s;
    }
    if (const auto* diag = std::get_if<std::vector<double>>(&model_)) {
        double s = 0.0;
        for (std::size_t i = 0; i < grad.size(); ++i) s += (*diag)[i] * grad[i] * grad[i];
        return s;
    }
    const Matrix& h = std::get<Matrix>(model_);
    double s = 0.0;
    for (std::size_t i = 0; i < h.rows(); ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < h.cols(); ++j) row += h(i, j) * grad[j];
        s += grad[i] * row;
    }
    return s;
}

double CurvatureModel::lambda_max() const {
    if (const auto* iso = std::get_if<Isotropic>(&model_)) return iso->lambda;
    if (const auto* diag = std::get_if<std::vector<double>>(&model_))
        return *std::max_element(diag->begin(), diag->end());
    // Power iteration; the models we analyze are symmetric PSD.
    const Matrix& h = std::get<Matrix>(model_);
    const std::size_t d = h.rows();
    std::vector<double> v(d);
    for (std::size_t i = 0; i < d; ++i) v[i] = 1.0 + 1e-3 * static_cast<double>(i);
    double eig = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
        std::vector<double> w(d, 0.0);
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) w[i] += h(i, j) * v[j];
        double norm = 0.0;
        for (double x : w) norm += x * x;
        norm = std::sqrt(norm);
        if (norm == 0.0) return 0.0;
        for (std::size_t i = 0; i < d; ++i) v[i] = w[i] / norm;
        eig = norm;
    }
    return eig;
}

namespace {

double squared_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

}  // namespace

double expected_loss_delta(std::span<const double> grad, const CurvatureModel& h, double eta,
                           double sigma_q) {
    if (eta < 0.0) throw std::invalid_argument("expected_loss_delta: eta must be >= 0");
    const double a = squared_norm(grad);
    const double b = h.quadratic_form(grad) + sigma_q * sigma_q * h.trace();
    return -eta * a + 0.5 * eta * eta * b;
}

double optimal_eta(std::span<const double> grad, const CurvatureModel& h, double sigma_q) {
    const double denom = h.quadratic_form(grad) + sigma_q * sigma_q * h.trace();
    if (denom <= 0.0) throw std::domain_error("optimal_eta: curvature model not positive");
    return squared_norm(grad) / denom;
}

double loss_delta_at_optimum(std::span<const double> grad, const CurvatureModel& h, double sigma_q) {
    const double denom = h.quadratic_form(grad) + sigma_q * sigma_q * h.trace();
    if (denom <= 0.0) throw std::domain_error("loss_delta_at_optimum: curvature model not positive");
    const double a = squared_norm(grad);
    return -(a * a) / (2.0 * denom);
}

double noise_sensitivity(std::span<const double> grad, const CurvatureModel& h, double sigma_q) {
    const double x = h.quadratic_form(grad);
    const double y = h.trace();
    if (x + sigma_q * sigma_q * y <= 0.0)
        throw std::domain_error("noise_sensitivity: curvature model not positive");
    const double a = squared_norm(grad);
    const double z = a * a;
    const double denom = x + y * sigma_q * sigma_q;
    return z * y * sigma_q / (denom * denom);
}

double sigma_critical_general(double grad_h_grad, double trace_h) {
    if (trace_h <= 0.0) throw std::domain_error("sigma_critical_general: trace must be positive");
    return std::sqrt(grad_h_grad / (3.0 * trace_h));
}

double sigma_critical(double grad_norm, std::size_t d) {
    if (d == 0) throw std::invalid_argument("sigma_critical: d must be >= 1");
    return grad_norm / std::sqrt(3.0 * static_cast<double>(d));
}

BiasedFixedPoint biased_fixed_point(double lambda, double eta, double mu_eps, double e0,
                                    uint64_t n) {
    if (lambda <= 0.0) throw std::invalid_argument("biased_fixed_point: lambda must be positive");
    const double a = 1.0 - eta * lambda;
    if (std::abs(a) >= 1.0)
        throw std::domain_error("biased_fixed_point: |1 - eta*lambda| >= 1, no fixed point");
    const double a_n = std::pow(a, static_cast<double>(n));
    BiasedFixedPoint fp;
    fp.e_n = a_n * e0 - (mu_eps / lambda) * (1.0 - a_n);
    fp.loss_n = 0.5 * lambda * fp.e_n * fp.e_n;
    fp.e_inf = -mu_eps / lambda;
    fp.loss_inf = mu_eps * mu_eps / (2.0 * lambda);
    return fp;
}

ThresholdReport ThresholdMonitor::update(uint64_t step, double grad_norm, std::size_t d,
                                         double sigma_q) {
    ThresholdReport report;
    report.step = step;
    report.d = d;
    report.grad_norm = grad_norm;
    report.sigma_q = sigma_q;
    report.sigma_crit = sigma_critical(grad_norm, d);

    if (sigma_q == 0.0) {
        // No measurable noise this step; the threshold cannot be crossed.
        report.ratio = std::numeric_limits<double>::infinity();
        report.ema_ratio = ema_;
        report.crossed = false;
        return report;
    }

    report.ratio = grad_norm / (sigma_q * std::sqrt(static_cast<double>(d)));
    ema_ = has_ema_ ? 0.9 * ema_ + 0.1 * report.ratio : report.ratio;
    has_ema_ = true;
    report.ema_ratio = ema_;
    report.crossed = ema_ < kThreshold;
    return report;
}

ThresholdReport ThresholdMonitor::monitor_pair(std::span<const double> reference,
                                               std::span<const double> quantized, uint64_t step) {
    if (reference.empty() || reference.size() != quantized.size())
        throw std::invalid_argument("monitor_pair: gradient sizes must match and be nonempty");

    const std::size_t n = reference.size();
    const std::size_t stride = (n + kMaxSampleElements - 1) / kMaxSampleElements;
    double sum = 0.0, sum_sq = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; i += stride) {
        const double err = quantized[i] - reference[i];
        sum += err;
        sum_sq += err * err;
        ++count;
    }
    const double mean = sum / static_cast<double>(count);
    const double var = std::max(0.0, sum_sq / static_cast<double>(count) - mean * mean);
    return update(step, std::sqrt(squared_norm(reference)), n, std::sqrt(var));
}

ThresholdReport ThresholdMonitor::monitor_step(std::span<const double> grad,
                                               const BlockQuantConfig& cfg, uint64_t step,
                                               const RngStream& rng) {
    if (grad.empty()) throw std::invalid_argument("monitor_step: empty gradient");

    // SR rounding residuals on a bounded subsample stand in for the noise.
    const std::size_t stride = (grad.size() + kMaxSampleElements - 1) / kMaxSampleElements;
    std::vector<double> sample;
    sample.reserve(std::min<std::size_t>(grad.size(), kMaxSampleElements));
    for (std::size_t i = 0; i < grad.size(); i += stride) sample.push_back(grad[i]);

    BlockQuantConfig sr_cfg = cfg;
    sr_cfg.element_rounding = RoundingMode::SR;
    const double sigma_q = block_noise_stats(sample, sr_cfg, rng).stddev;
    return update(step, std::sqrt(squared_norm(grad)), grad.size(), sigma_q);
}

}  // namespace fqt
