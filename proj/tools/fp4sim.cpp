#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "fqt/experiment.hpp"

namespace {

std::string default_out_dir() {
    const char* env = std::getenv("FP4SIM_OUT_DIR");
    return env ? env : ".";
}

void print_outcome(const fqt::ExperimentOutcome& outcome) {
    for (const auto& file : outcome.files_written) std::cout << "wrote " << file << "\n";
    if (outcome.summary.contains("results"))
        std::cout << outcome.summary["results"].dump(2) << "\n";
}

int run_spec(fqt::ExperimentSpec spec, bool allow_divergence) {
    spec.allow_divergence = spec.allow_divergence || allow_divergence;
    const fqt::ExperimentOutcome outcome = fqt::run_experiment(spec);
    print_outcome(outcome);
    if (outcome.any_diverged && !spec.allow_divergence) {
        std::cerr << "error: at least one run diverged (pass --allow-divergence to accept)\n";
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"fp4sim: block-scaled FP4 training simulation experiments"};
    app.require_subcommand(1);

    // --- run ---
    auto* run = app.add_subcommand("run", "execute an experiment spec (JSON file)");
    std::string spec_path;
    std::string out_dir = default_out_dir();
    uint64_t seed = 0;
    bool seed_set = false;
    std::vector<uint64_t> seeds;
    int jobs = 0;
    bool allow_divergence = false;
    std::string policy_override, rounding_override;
    int64_t switch_step = -1;
    bool switch_on_threshold = false;
    run->add_option("spec", spec_path, "experiment spec JSON")->required();
    run->add_option("--out", out_dir, "output directory (default $FP4SIM_OUT_DIR or .)");
    run->add_option("--seed", seed, "override the spec seed")->each([&](const std::string&) {
        seed_set = true;
    });
    run->add_option("--seeds", seeds, "override the spec seed list");
    run->add_option("--jobs", jobs, "max concurrent grid cells");
    run->add_flag("--allow-divergence", allow_divergence, "exit 0 even if a run diverged");
    run->add_option("--policy", policy_override, "override the rounding policy");
    run->add_option("--rounding", rounding_override, "override the element rounding mode");
    run->add_option("--switch-step", switch_step, "override the precision-switch step");
    run->add_flag("--switch-on-threshold", switch_on_threshold,
                  "switch precision when the monitored ratio crosses sqrt(3)");

    // --- verify ---
    auto* verify = app.add_subcommand("verify", "run a module property suite");
    std::string suite = "all";
    verify->add_option("suite", suite, "codec|rounding|blockquant|analysis|all");

    // --- formats ---
    auto* formats = app.add_subcommand("formats", "minifloat format utilities");
    auto* formats_list = formats->add_subcommand("list", "list the built-in formats");

    // --- quant-error ---
    auto* qerr = app.add_subcommand("quant-error", "one-off static quantization error measurement");
    std::string data_spec = "gaussian:sigma=1,n=1000000";
    std::string config = "nvfp4";
    std::string rounding = "rtn";
    int axis = 1;
    uint64_t qerr_seed = 1;
    std::string qerr_out = default_out_dir();
    qerr->add_option("--data", data_spec, "tensor spec, e.g. gaussian:sigma=32,n=1000000");
    qerr->add_option("--config", config, "quant config (nvfp4|mxfp4|data=...,scale=...,block=...)");
    qerr->add_option("--rounding", rounding, "element rounding: rtn|sr");
    qerr->add_option("--axis", axis, "block axis (0 or 1)");
    qerr->add_option("--seed", qerr_seed, "tensor seed");
    qerr->add_option("--out", qerr_out, "output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            fqt::ExperimentSpec spec = fqt::ExperimentSpec::from_file(spec_path);
            spec.output_dir = out_dir;
            if (seed_set) spec.seed = seed;
            if (!seeds.empty()) spec.seeds = seeds;
            if (jobs > 0) spec.jobs = jobs;
            if (!policy_override.empty()) spec.params["policy"] = policy_override;
            if (!rounding_override.empty()) spec.params["rounding"] = rounding_override;
            if (switch_step >= 0) spec.params["switch_step"] = switch_step;
            if (switch_on_threshold) spec.params["switch_on_threshold"] = true;
            return run_spec(std::move(spec), allow_divergence);
        }

        if (*verify) {
            const auto results = fqt::verify_suite(suite);
            bool all_ok = true;
            for (const auto& r : results) {
                std::cout << (r.passed ? "[PASS] " : "[FAIL] ") << r.name;
                if (!r.passed && !r.detail.empty()) std::cout << "  (" << r.detail << ")";
                std::cout << "\n";
                all_ok = all_ok && r.passed;
            }
            return all_ok ? 0 : 1;
        }

        if (*formats_list || *formats) {
            const char* names[] = {"E2M1", "E1M6", "E2M5", "E3M4", "E4M3",
                                   "E4M3fn", "E5M2", "E6M1", "E8M0u"};
            for (const char* name : names) {
                const auto fmt = fqt::MiniFloatFormat::parse(name);
                const auto grid = fqt::enumerate_grid(fmt);
                std::printf("%-7s width=%d bias=%d values=%zu max=%.17g min_pos=%.17g\n",
                            name, fmt.width(), fmt.bias, grid.size(), grid.max_normal,
                            grid.min_subnormal_positive);
                if (grid.size() <= 16) {
                    std::printf("        grid:");
                    for (double v : grid.values) std::printf(" %g", v);
                    std::printf("\n");
                }
            }
            return 0;
        }

        if (*qerr) {
            fqt::ExperimentSpec spec;
            spec.experiment = "quant-error";
            spec.output_dir = qerr_out;
            spec.seed = qerr_seed;
            spec.params = nlohmann::json{{"data", data_spec},
                                         {"config", config},
                                         {"rounding", rounding},
                                         {"axis", axis}};
            return run_spec(std::move(spec), true);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
