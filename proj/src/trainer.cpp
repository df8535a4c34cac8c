#include "fqt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

namespace fqt {

namespace {

// Stream ids above any (layer, quant point) id used by the GEMMs.
constexpr uint32_t kQuadNoiseStream = 0x10000;
constexpr uint32_t kInitStreamBase = 0x20000;
constexpr uint32_t kDataStreamBase = 0x30000;

double squared_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

}  // namespace

QuadraticProblem QuadraticProblem::make(std::size_t d, double lambda, double start_radius,
                                        uint64_t seed) {
    if (d == 0 || lambda <= 0.0) throw std::invalid_argument("quadratic: need d >= 1, lambda > 0");
    QuadraticProblem p;
    p.d = d;
    p.lambda = lambda;
    p.theta_star.resize(d);
    p.theta0.resize(d);
    const RngStream star(seed, kDataStreamBase);
    const RngStream offset(seed, kDataStreamBase + 1);
    const double coord_std = start_radius / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < d; ++i) {
        p.theta_star[i] = star.gaussian(i);
        p.theta0[i] = p.theta_star[i] + coord_std * offset.gaussian(i);
    }
    return p;
}

double QuadraticProblem::loss(std::span<const double> theta) const {
    double s = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
        const double e = theta[i] - theta_star[i];
        s += e * e;
    }
    return 0.5 * lambda * s;
}

void QuadraticProblem::gradient(std::span<const double> theta, std::span<double> out) const {
    for (std::size_t i = 0; i < d; ++i) out[i] = lambda * (theta[i] - theta_star[i]);
}

double LossTrace::stationary_loss() const {
    if (loss.empty()) return 0.0;
    const std::size_t window = std::max<std::size_t>(1, loss.size() / 10);
    double s = 0.0;
    for (std::size_t i = loss.size() - window; i < loss.size(); ++i) s += loss[i];
    return s / static_cast<double>(window);
}

LossTrace run_quadratic_sr(const QuadraticProblem& problem, const QuadraticSchedule& schedule,
                           NoiseRule rule, double noise_param, uint64_t seed) {
    if (rule == NoiseRule::AdaptiveCritical && noise_param <= 0.0)
        throw std::invalid_argument("run_quadratic_sr: adaptive rule needs k > 0");

    std::vector<double> theta = problem.theta0;
    std::vector<double> grad(problem.d);
    LossTrace trace;
    trace.loss.reserve(schedule.steps + 1);
    trace.loss.push_back(problem.loss(theta));

    for (std::size_t t = 0; t < schedule.steps; ++t) {
        problem.gradient(theta, grad);
        const double gn2 = squared_norm(grad);
        const double sigma_q = rule == NoiseRule::AdaptiveCritical
                                   ? noise_param * std::sqrt(gn2) /
                                         std::sqrt(3.0 * static_cast<double>(problem.d))
                                   : noise_param;

        double eta = schedule.eta;
        if (schedule.use_optimal_eta) {
            // eta* = ||g||^2 / (g^T H g + sigma^2 tr H) with H = lambda I.
            const double denom =
                problem.lambda * (gn2 + sigma_q * sigma_q * static_cast<double>(problem.d));
            eta = denom > 0.0 ? gn2 / denom : 0.0;
        }

        const RngStream noise = RngStream::for_tensor(seed, kQuadNoiseStream, t);
        for (std::size_t i = 0; i < problem.d; ++i) {
            const double eps = sigma_q > 0.0 ? sigma_q * noise.gaussian(i) : 0.0;
            theta[i] -= eta * (grad[i] + eps);
        }

        const double loss = problem.loss(theta);
        trace.loss.push_back(loss);
        if (!std::isfinite(loss)) {
            trace.diverged = true;
            break;
        }
    }
    return trace;
}

BiasedRunResult run_quadratic_biased(const QuadraticProblem& problem, std::size_t steps, double eta,
                                     double mu_eps, double sigma_eps, uint64_t seed) {
    BiasedRunResult result;
    result.divergence_warning = std::abs(1.0 - eta * problem.lambda) >= 1.0;

    std::vector<double> theta = problem.theta0;
    std::vector<double> grad(problem.d);
    result.trace.loss.reserve(steps + 1);
    result.trace.loss.push_back(problem.loss(theta));
    result.error_coord0.push_back(theta[0] - problem.theta_star[0]);

    for (std::size_t t = 0; t < steps; ++t) {
        problem.gradient(theta, grad);
        const RngStream noise = RngStream::for_tensor(seed, kQuadNoiseStream, t);
        for (std::size_t i = 0; i < problem.d; ++i) {
            const double eps = mu_eps + (sigma_eps > 0.0 ? sigma_eps * noise.gaussian(i) : 0.0);
            theta[i] -= eta * (grad[i] + eps);
        }
        const double loss = problem.loss(theta);
        result.trace.loss.push_back(loss);
        result.error_coord0.push_back(theta[0] - problem.theta_star[0]);
        if (!std::isfinite(loss)) {
            result.trace.diverged = true;
            break;
        }
    }
    result.stationary_loss = result.trace.stationary_loss();
    return result;
}

ToyNet::ToyNet(ToyNetConfig config, uint64_t seed) : config_(std::move(config)) {
    if (config_.dims.size() < 2) throw std::invalid_argument("toynet: need at least one layer");
    weights_.reserve(config_.dims.size() - 1);
    for (std::size_t l = 0; l + 1 < config_.dims.size(); ++l) {
        Matrix w(config_.dims[l + 1], config_.dims[l]);
        const RngStream init(seed, kInitStreamBase + static_cast<uint32_t>(l));
        const double std_dev = std::sqrt(2.0 / static_cast<double>(config_.dims[l]));
        for (std::size_t i = 0; i < w.size(); ++i) w.at_flat(i) = std_dev * init.gaussian(i);
        weights_.push_back(std::move(w));
    }
}

std::size_t ToyNet::param_count() const {
    std::size_t n = 0;
    for (const auto& w : weights_) n += w.size();
    return n;
}

Matrix ToyNet::forward(const Matrix& inputs, const RoundingPolicy& policy, uint64_t seed,
                       uint64_t step, std::vector<Matrix>* activations,
                       std::vector<Matrix>* preacts) const {
    if (inputs.rows() != config_.dims.front())
        throw std::invalid_argument("toynet: input rows do not match the input width");
    Matrix a = inputs;
    if (activations) activations->push_back(a);
    for (std::size_t l = 0; l < weights_.size(); ++l) {
        Matrix z = fqt_linear_forward(weights_[l], a, policy, seed, static_cast<uint32_t>(l), step);
        if (preacts) preacts->push_back(z);
        const bool last = l + 1 == weights_.size();
        if (!last && config_.hidden_activation == Activation::ReLU) {
            a = z;
            for (std::size_t i = 0; i < a.size(); ++i)
                if (a.at_flat(i) < 0.0) a.at_flat(i) = 0.0;
        } else {
            a = std::move(z);
        }
        if (activations) activations->push_back(a);
    }
    return a;
}

namespace {

// Loss and d(loss)/d(output pre-activation), both averaged over the batch.
double loss_and_output_delta(LossKind kind, const Matrix& out, const Matrix& targets,
                             Matrix& delta) {
    const double batch = static_cast<double>(out.cols());
    delta = Matrix(out.rows(), out.cols());
    if (kind == LossKind::Mse) {
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double diff = out.at_flat(i) - targets.at_flat(i);
            delta.at_flat(i) = diff / batch;
            s += diff * diff;
        }
        return 0.5 * s / batch;
    }
    // Softmax cross entropy over each column.
    double total = 0.0;
    for (std::size_t c = 0; c < out.cols(); ++c) {
        double max_z = -std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < out.rows(); ++r) max_z = std::max(max_z, out(r, c));
        double sum_exp = 0.0;
        for (std::size_t r = 0; r < out.rows(); ++r) sum_exp += std::exp(out(r, c) - max_z);
        const double log_sum = max_z + std::log(sum_exp);
        for (std::size_t r = 0; r < out.rows(); ++r) {
            const double log_p = out(r, c) - log_sum;
            total -= targets(r, c) * log_p;
            delta(r, c) = (std::exp(log_p) - targets(r, c)) / batch;
        }
    }
    return total / batch;
}

}  // namespace

ToyNet::StepGrads ToyNet::compute_grads(const Matrix& inputs, const Matrix& targets,
                                        const RoundingPolicy& policy, uint64_t seed,
                                        uint64_t step) const {
    std::vector<Matrix> as;
    std::vector<Matrix> zs;
    as.reserve(weights_.size() + 1);
    zs.reserve(weights_.size());
    const Matrix out = forward(inputs, policy, seed, step, &as, &zs);

    StepGrads grads;
    Matrix delta;
    grads.loss = loss_and_output_delta(config_.loss, out, targets, delta);
    grads.dw.resize(weights_.size());

    for (std::size_t li = weights_.size(); li-- > 0;) {
        const uint32_t layer = static_cast<uint32_t>(li);
        grads.dw[li] = fqt_linear_update(delta, as[li], policy, seed, layer, step);
        if (li == 0) break;
        Matrix g_prev = fqt_linear_backward(weights_[li], delta, policy, seed, layer, step);
        if (config_.hidden_activation == Activation::ReLU) {
            const Matrix& z = zs[li - 1];
            for (std::size_t i = 0; i < g_prev.size(); ++i)
                if (z.at_flat(i) <= 0.0) g_prev.at_flat(i) = 0.0;
        }
        delta = std::move(g_prev);
    }

    double gn2 = 0.0;
    for (const auto& dw : grads.dw) gn2 += squared_norm(dw.flat());
    grads.grad_norm = std::sqrt(gn2);
    return grads;
}

double ToyNet::evaluate_loss(const Matrix& inputs, const Matrix& targets,
                             const RoundingPolicy& policy, uint64_t seed, uint64_t step) const {
    const Matrix out = forward(inputs, policy, seed, step, nullptr, nullptr);
    Matrix delta;
    return loss_and_output_delta(config_.loss, out, targets, delta);
}

Matrix ToyNet::predict(const Matrix& inputs, const RoundingPolicy& policy, uint64_t seed,
                       uint64_t step) const {
    return forward(inputs, policy, seed, step, nullptr, nullptr);
}

namespace {

void apply_precision_switch(RoundingPolicy& policy) {
    policy.at(QuantPointId::BwdGrad).reset();
    policy.at(QuantPointId::UpdGrad).reset();
    policy.at(QuantPointId::UpdActT).reset();
}

ThresholdReport sentinel_report(uint64_t step, double grad_norm, std::size_t d, double ema) {
    ThresholdReport r;
    r.step = step;
    r.grad_norm = grad_norm;
    r.d = d;
    r.sigma_q = 0.0;
    r.ratio = std::numeric_limits<double>::infinity();
    r.ema_ratio = ema;
    r.crossed = false;
    r.sigma_crit = sigma_critical(grad_norm, d);
    return r;
}

}  // namespace

ToyNetTrainResult train_toynet(ToyNet& net, const Matrix& inputs, const Matrix& targets,
                               const RoundingPolicy& policy, const NetTrainSchedule& schedule,
                               uint64_t seed) {
    ToyNetTrainResult result;
    result.loss.loss.reserve(schedule.steps);
    result.threshold.reserve(schedule.steps);

    RoundingPolicy active = policy;
    ThresholdMonitor monitor;
    bool switched = false;
    bool pending_switch = false;
    std::vector<double> flat_grads(net.param_count());

    for (std::size_t t = 0; t < schedule.steps; ++t) {
        if (!switched &&
            (pending_switch || (schedule.switch_step && t == *schedule.switch_step))) {
            apply_precision_switch(active);
            switched = true;
            result.switch_step = t;
        }

        const ToyNet::StepGrads grads = net.compute_grads(inputs, targets, active, seed, t);
        result.loss.loss.push_back(grads.loss);
        if (!std::isfinite(grads.loss)) {
            result.diverged = true;
            result.loss.diverged = true;
            break;
        }

        std::size_t offset = 0;
        for (const auto& dw : grads.dw) {
            std::copy(dw.flat().begin(), dw.flat().end(), flat_grads.begin() + offset);
            offset += dw.size();
        }

        // The noise the switch would remove: residual between this step's
        // gradient and the same pipeline with the three switchable points at
        // high precision. Once they already are, there is nothing to measure.
        RoundingPolicy reference = active;
        apply_precision_switch(reference);
        ThresholdReport report;
        if (reference == active) {
            report = sentinel_report(t, grads.grad_norm, flat_grads.size(), monitor.ema());
        } else {
            const ToyNet::StepGrads ref = net.compute_grads(inputs, targets, reference, seed, t);
            std::vector<double> flat_ref(flat_grads.size());
            offset = 0;
            for (const auto& dw : ref.dw) {
                std::copy(dw.flat().begin(), dw.flat().end(), flat_ref.begin() + offset);
                offset += dw.size();
            }
            report = monitor.monitor_pair(flat_ref, flat_grads, t);
        }
        result.threshold.push_back(report);

        if (!switched && schedule.switch_on_threshold && report.crossed) pending_switch = true;

        double lr = schedule.eta;
        if (switched && schedule.lr_reset) {
            const double peak = schedule.peak_eta > 0.0 ? schedule.peak_eta : schedule.eta;
            const std::size_t since = t - *result.switch_step;
            if (since < schedule.warmup_steps) {
                lr = peak * static_cast<double>(since + 1) /
                     static_cast<double>(schedule.warmup_steps);
            } else {
                const std::size_t span =
                    schedule.steps > *result.switch_step + schedule.warmup_steps
                        ? schedule.steps - *result.switch_step - schedule.warmup_steps
                        : 1;
                const double phase = std::min(
                    1.0, static_cast<double>(since - schedule.warmup_steps) /
                             static_cast<double>(span));
                lr = peak * 0.5 * (1.0 + std::cos(std::numbers::pi * phase));
            }
        }

        for (std::size_t l = 0; l < net.layer_count(); ++l) {
            Matrix& w = net.weights()[l];
            const Matrix& dw = grads.dw[l];
            for (std::size_t i = 0; i < w.size(); ++i) w.at_flat(i) -= lr * dw.at_flat(i);
        }
    }
    return result;
}

double gradcheck(ToyNet& net, const Matrix& inputs, const Matrix& targets, double epsilon) {
    const RoundingPolicy none = RoundingPolicy::all_none();
    const ToyNet::StepGrads analytic = net.compute_grads(inputs, targets, none, 0, 0);

    double worst = 0.0;
    for (std::size_t l = 0; l < net.layer_count(); ++l) {
        Matrix& w = net.weights()[l];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w.at_flat(i);
            w.at_flat(i) = saved + epsilon;
            const double up = net.evaluate_loss(inputs, targets, none, 0, 0);
            w.at_flat(i) = saved - epsilon;
            const double down = net.evaluate_loss(inputs, targets, none, 0, 0);
            w.at_flat(i) = saved;
            const double fd = (up - down) / (2.0 * epsilon);
            const double a = analytic.dw[l].at_flat(i);
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-2});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

Dataset make_teacher_student_dataset(const ToyNetConfig& config, std::size_t n_samples,
                                     uint64_t seed, double input_spread, double label_noise) {
    const ToyNet teacher(config, seed ^ 0x7ec4e11a11afull);
    Dataset data;
    data.inputs = Matrix(config.dims.front(), n_samples);

    const RngStream in_stream(seed, kDataStreamBase + 2);
    const RngStream spread_stream(seed, kDataStreamBase + 3);
    for (std::size_t c = 0; c < n_samples; ++c) {
        const double scale =
            input_spread > 0.0
                ? std::exp2(input_spread * (2.0 * spread_stream.uniform(c) - 1.0))
                : 1.0;
        for (std::size_t r = 0; r < data.inputs.rows(); ++r) {
            const std::size_t flat = r * n_samples + c;
            data.inputs(r, c) = scale * in_stream.gaussian(flat);
        }
    }

    // Teacher labels at high precision, optionally with additive noise.
    data.targets = teacher.predict(data.inputs, RoundingPolicy::all_none(), 0, 0);
    if (label_noise > 0.0) {
        const RngStream noise(seed, kDataStreamBase + 4);
        for (std::size_t i = 0; i < data.targets.size(); ++i)
            data.targets.at_flat(i) += label_noise * noise.gaussian(i);
    }
    return data;
}

Dataset make_classification_dataset(const ToyNetConfig& config, std::size_t n_samples,
                                    uint64_t seed, double flip_fraction) {
    Dataset data = make_teacher_student_dataset(config, n_samples, seed);
    const std::size_t classes = config.dims.back();
    const Matrix logits = data.targets;
    data.targets = Matrix(classes, n_samples, 0.0);
    const RngStream flip(seed, kDataStreamBase + 5);
    for (std::size_t c = 0; c < n_samples; ++c) {
        std::size_t label = 0;
        for (std::size_t r = 1; r < classes; ++r)
            if (logits(r, c) > logits(label, c)) label = r;
        if (flip_fraction > 0.0 && flip.uniform(2 * c) < flip_fraction)
            label = static_cast<std::size_t>(flip.uniform(2 * c + 1) *
                                             static_cast<double>(classes)) %
                    classes;
        data.targets(label, c) = 1.0;
    }
    return data;
}

}  // namespace fqt
