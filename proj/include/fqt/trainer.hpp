#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "fqt/analysis.hpp"
#include "fqt/matrix.hpp"
#include "fqt/qgemm.hpp"

namespace fqt {

// L(theta) = lambda/2 ||theta - theta_star||^2, gradient lambda (theta - theta_star).
struct QuadraticProblem {
    std::size_t d = 1;
    double lambda = 1.0;
    std::vector<double> theta_star;
    std::vector<double> theta0;

    static QuadraticProblem make(std::size_t d, double lambda, double start_radius, uint64_t seed);

    double loss(std::span<const double> theta) const;
    void gradient(std::span<const double> theta, std::span<double> out) const;
};

struct LossTrace {
    std::vector<double> loss;  // loss[0] is the initial point, one entry per step after
    bool diverged = false;

    double final_loss() const { return loss.back(); }
    // Mean over the final 10% of recorded entries.
    double stationary_loss() const;
};

struct QuadraticSchedule {
    std::size_t steps = 1000;
    // When true the step size is re-derived each step from the noise-aware
    // optimum; otherwise `eta` is used as a fixed step size.
    bool use_optimal_eta = true;
    double eta = 0.0;
};

enum class NoiseRule : uint8_t { FixedSigma, AdaptiveCritical };

// Gradient descent with injected Gaussian gradient noise. Under
// AdaptiveCritical the noise level is re-set each step to
// noise_param * ||grad|| / sqrt(3 d); under FixedSigma noise_param is the
// per-coordinate std itself.
LossTrace run_quadratic_sr(const QuadraticProblem& problem, const QuadraticSchedule& schedule,
                           NoiseRule rule, double noise_param, uint64_t seed);

struct BiasedRunResult {
    LossTrace trace;
    std::vector<double> error_coord0;  // theta[0] - theta_star[0] per recorded entry
    double stationary_loss = 0.0;
    bool divergence_warning = false;  // |1 - eta*lambda| >= 1
};

// Same iteration with noise of nonzero mean mu_eps (the deterministic-rounding
// model); matches the closed forms in analysis::biased_fixed_point when
// sigma_eps = 0.
BiasedRunResult run_quadratic_biased(const QuadraticProblem& problem, std::size_t steps, double eta,
                                     double mu_eps, double sigma_eps, uint64_t seed);

enum class Activation : uint8_t { ReLU, Identity };
enum class LossKind : uint8_t { Mse, SoftmaxCrossEntropy };

struct ToyNetConfig {
    std::vector<std::size_t> dims;  // input, hidden..., output widths
    Activation hidden_activation = Activation::ReLU;
    LossKind loss = LossKind::Mse;
};

// Fully-connected net whose every GEMM runs through the quantized-GEMM
// simulation. Activations are column-major: one sample per column. Parameters
// and optimizer state stay at high precision; only GEMM operands quantize.
class ToyNet {
public:
    ToyNet(ToyNetConfig config, uint64_t seed);

    const ToyNetConfig& config() const { return config_; }
    std::size_t layer_count() const { return weights_.size(); }
    std::size_t param_count() const;
    std::vector<Matrix>& weights() { return weights_; }
    const std::vector<Matrix>& weights() const { return weights_; }

    struct StepGrads {
        double loss = 0.0;
        std::vector<Matrix> dw;
        double grad_norm = 0.0;
    };

    // Forward, backward and update GEMMs under `policy` for one batch.
    StepGrads compute_grads(const Matrix& inputs, const Matrix& targets,
                            const RoundingPolicy& policy, uint64_t seed, uint64_t step) const;

    // Forward-only loss under `policy`.
    double evaluate_loss(const Matrix& inputs, const Matrix& targets, const RoundingPolicy& policy,
                         uint64_t seed, uint64_t step) const;

    // Network output (pre-loss) under `policy`.
    Matrix predict(const Matrix& inputs, const RoundingPolicy& policy, uint64_t seed,
                   uint64_t step) const;

private:
    Matrix forward(const Matrix& inputs, const RoundingPolicy& policy, uint64_t seed, uint64_t step,
                   std::vector<Matrix>* activations, std::vector<Matrix>* preacts) const;

    ToyNetConfig config_;
    std::vector<Matrix> weights_;
};

struct NetTrainSchedule {
    std::size_t steps = 1000;
    double eta = 0.05;
    std::optional<std::size_t> switch_step;  // drop the SR points to high precision here
    bool switch_on_threshold = false;        // or when the monitored ratio crosses sqrt(3)
    // Learning-rate reset at the switch: linear warmup then cosine decay.
    bool lr_reset = true;
    std::size_t warmup_steps = 40;
    double peak_eta = 0.0;  // 0 -> reuse eta
};

struct ToyNetTrainResult {
    LossTrace loss;
    std::vector<ThresholdReport> threshold;
    std::optional<std::size_t> switch_step;  // step the switch actually happened
    bool diverged = false;
};

// SGD through the quantized GEMMs. At the precision switch the BwdGrad,
// UpdGrad and UpdActT points become high precision while both forward points
// keep their quantization, and the learning rate restarts with warmup plus
// cosine decay when lr_reset is set.
ToyNetTrainResult train_toynet(ToyNet& net, const Matrix& inputs, const Matrix& targets,
                               const RoundingPolicy& policy, const NetTrainSchedule& schedule,
                               uint64_t seed);

// Max relative error between analytic gradients (quantization disabled) and
// central finite differences with the given epsilon.
double gradcheck(ToyNet& net, const Matrix& inputs, const Matrix& targets, double epsilon);

struct Dataset {
    Matrix inputs;   // d_in x n
    Matrix targets;  // d_out x n
};

// Standard-normal inputs labeled by a randomly initialized teacher net of the
// same architecture. `input_spread` > 0 scales each sample by a random power
// of two in [2^-spread, 2^spread] and `label_noise` adds Gaussian noise to the
// targets, both of which make the task harder for low-precision training.
Dataset make_teacher_student_dataset(const ToyNetConfig& config, std::size_t n_samples,
                                     uint64_t seed, double input_spread = 0.0,
                                     double label_noise = 0.0);

// Classification variant: one-hot targets from the argmax of a teacher net's
// logits, with `flip_fraction` of the labels reassigned uniformly at random
// so the task keeps an irreducible entropy floor.
Dataset make_classification_dataset(const ToyNetConfig& config, std::size_t n_samples,
                                    uint64_t seed, double flip_fraction = 0.0);

}  // namespace fqt
