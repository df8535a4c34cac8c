#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "fqt/trainer.hpp"

namespace fqt {

// A fully resolved experiment description. `params` carries the per-protocol
// knobs; everything that influences the run is part of the hashable config so
// outputs can be traced back to it.
struct ExperimentSpec {
    std::string experiment;
    nlohmann::json params = nlohmann::json::object();
    std::string output_dir = ".";
    uint64_t seed = 1;
    std::vector<uint64_t> seeds;  // empty -> {seed}
    int jobs = 1;
    bool allow_divergence = false;

    static ExperimentSpec from_json(const nlohmann::json& j);
    static ExperimentSpec from_file(const std::string& path);

    // Canonical JSON of the whole spec (defaults filled in).
    nlohmann::json resolved() const;
    std::vector<uint64_t> seed_list() const;
};

struct ExperimentOutcome {
    bool any_diverged = false;
    std::vector<std::string> files_written;
    nlohmann::json summary;
};

// Executes the named protocol over its parameter grid x seeds, writing one
// CSV per run plus a summary JSON into spec.output_dir.
ExperimentOutcome run_experiment(const ExperimentSpec& spec);

// 64-bit FNV-1a, used to stamp every CSV with the hash of its config.
uint64_t fnv1a_hash(std::string_view bytes);

// "gaussian:sigma=32,n=1000000" -> seeded 1 x n tensor.
Matrix make_tensor(std::string_view data_spec, uint64_t seed);

// The mid-training precision-switch protocol on the toy MLP, shared between
// the CLI experiment and the acceptance suite.
struct SwitchRunParams {
    std::vector<std::size_t> dims = {16, 64, 64, 16};
    std::size_t n_samples = 256;
    std::size_t steps = 3500;
    std::optional<std::size_t> switch_step = 2000;
    bool switch_on_threshold = false;
    double eta = 0.05;
    std::string task = "classification";  // or "regression"
    double flip_fraction = 0.1;           // classification label randomization
    double input_spread = 0.0;            // regression input scale diversity
    double label_noise = 0.0;             // regression target noise
    std::string policy = "paper";
    std::string quant = "nvfp4";
    uint64_t seed = 1;
};

struct SwitchRunResult {
    ToyNetTrainResult quantized;
    LossTrace baseline;  // all-None run from the same init, data and seed
    std::optional<std::size_t> first_crossing;
    double gap_at_switch = 0.0;       // mean gap over the 25 steps before the switch
    double min_gap_after_switch = 0.0;  // min trailing-25-mean gap within 500 steps after
    double shrink_fraction = 0.0;     // 1 - min_gap_after_switch / gap_at_switch
};

SwitchRunResult run_switch_experiment(const SwitchRunParams& params);

// Lightweight property suites behind the CLI `verify` subcommand.
struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};
std::vector<CheckResult> verify_suite(std::string_view which);  // codec|rounding|blockquant|analysis|all

}  // namespace fqt
