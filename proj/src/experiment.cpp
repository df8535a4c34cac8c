#include "fqt/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <thread>

namespace fqt {

namespace {

constexpr uint32_t kTensorStream = 0x50000;

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// One CSV per run: a comment line carrying the config hash, a header row,
// then data rows. Numbers are printed with %.17g so reruns are byte-identical.
class CsvWriter {
public:
    CsvWriter(const std::string& path, uint64_t config_hash, const std::string& header)
        : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("cannot open for writing: " + path);
        char hash[32];
        std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(config_hash));
        out_ << "# config_hash=" << hash << "\n" << header << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) out_ << ",";
            out_ << cells[i];
        }
        out_ << "\n";
    }

private:
    std::ofstream out_;
};

void run_cells(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
    if (workers == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> threads;
    threads.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            for (std::size_t i = static_cast<std::size_t>(w); i < n; i += workers) fn(i);
        });
    }
    for (auto& t : threads) t.join();
}

nlohmann::json default_params(std::string_view experiment) {
    using json = nlohmann::json;
    if (experiment == "format-sweep")
        return json{{"scales", {"E1M6", "E2M5", "E3M4", "E4M3", "E5M2", "E6M1", "E8M0u"}},
                    {"block", 16},
                    {"data", "gaussian:sigma=32,n=1000000"},
                    {"data_format", "E2M1"},
                    {"rounding", "rtn"},
                    {"mode", "static"},
                    {"dims", {16, 64, 16}},
                    {"n_samples", 128},
                    {"steps", 400},
                    {"eta", 0.05},
                    {"input_spread", 3.0}};
    if (experiment == "block-sweep")
        return json{{"scales", {"E8M0u", "E4M3"}},
                    {"blocks", {8, 16, 32, 64, 128}},
                    {"data", "gaussian:sigma=32,n=1000000"},
                    {"data_format", "E2M1"},
                    {"rounding", "rtn"}};
    if (experiment == "sr-ablation")
        return json{{"dims", {16, 64, 16}}, {"n_samples", 256},   {"steps", 800},
                    {"eta", 0.05},          {"quant", "nvfp4"},   {"task", "classification"},
                    {"flip_fraction", 0.1}, {"input_spread", 0.0}, {"label_noise", 0.0},
                    {"include_all_rtn", true}};
    if (experiment == "quadratic-sr")
        return json{{"d", 100},          {"lambda", 1.0},           {"steps", 2000},
                    {"k", {2.0, 1.0, 0.5}}, {"start_radius", 10.0}, {"include_baseline", true},
                    {"step_rule", "optimal"}, {"eta", 0.0}};
    if (experiment == "quadratic-biased")
        return json{{"d", 1},        {"lambda", 1.0},    {"eta", 0.1},
                    {"mu_eps", 0.1}, {"sigma_eps", 0.0}, {"steps", 2000},
                    {"start_radius", 1.0}};
    if (experiment == "switch-run") {
        const SwitchRunParams d;
        return json{{"dims", d.dims},
                    {"n_samples", d.n_samples},
                    {"steps", d.steps},
                    {"switch_step", *d.switch_step},
                    {"switch_on_threshold", d.switch_on_threshold},
                    {"eta", d.eta},
                    {"task", d.task},
                    {"flip_fraction", d.flip_fraction},
                    {"input_spread", d.input_spread},
                    {"label_noise", d.label_noise},
                    {"policy", d.policy},
                    {"quant", d.quant}};
    }
    if (experiment == "quant-error")
        return json{{"data", "gaussian:sigma=1,n=1000000"},
                    {"config", "nvfp4"},
                    {"rounding", "rtn"},
                    {"axis", 1},
                    {"metrics", {"rmse", "max_abs", "clip_fraction"}}};
    throw std::invalid_argument("unknown experiment: " + std::string(experiment));
}

std::string out_path(const ExperimentSpec& spec, const std::string& file) {
    std::filesystem::create_directories(spec.output_dir);
    return (std::filesystem::path(spec.output_dir) / file).string();
}

}  // namespace

uint64_t fnv1a_hash(std::string_view bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

Matrix make_tensor(std::string_view data_spec, uint64_t seed) {
    double sigma = 1.0;
    std::size_t n = 0;
    std::string_view rest = data_spec;
    const std::size_t colon = rest.find(':');
    const std::string_view kind = rest.substr(0, colon);
    if (kind != "gaussian") throw std::invalid_argument("unknown tensor kind: " + std::string(kind));
    rest = colon == std::string_view::npos ? std::string_view{} : rest.substr(colon + 1);
    while (!rest.empty()) {
        const std::size_t comma = rest.find(',');
        const std::string_view item = rest.substr(0, comma);
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        const std::size_t eq = item.find('=');
        if (eq == std::string_view::npos)
            throw std::invalid_argument("bad tensor spec item: " + std::string(item));
        const std::string_view key = item.substr(0, eq);
        const std::string val(item.substr(eq + 1));
        if (key == "sigma") sigma = std::stod(val);
        else if (key == "n") n = static_cast<std::size_t>(std::stod(val));
        else throw std::invalid_argument("bad tensor spec key: " + std::string(key));
    }
    if (n == 0) throw std::invalid_argument("tensor spec needs n > 0");
    Matrix m(1, n);
    const RngStream stream(seed, kTensorStream);
    for (std::size_t i = 0; i < n; ++i) m(0, i) = sigma * stream.gaussian(i);
    return m;
}

ExperimentSpec ExperimentSpec::from_json(const nlohmann::json& j) {
    ExperimentSpec spec;
    spec.experiment = j.at("experiment").get<std::string>();
    if (j.contains("params")) spec.params = j.at("params");
    if (j.contains("output_dir")) spec.output_dir = j.at("output_dir").get<std::string>();
    if (j.contains("seed")) spec.seed = j.at("seed").get<uint64_t>();
    if (j.contains("seeds")) spec.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("jobs")) spec.jobs = j.at("jobs").get<int>();
    if (j.contains("allow_divergence")) spec.allow_divergence = j.at("allow_divergence").get<bool>();
    return spec;
}

ExperimentSpec ExperimentSpec::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read spec file: " + path);
    nlohmann::json j;
    in >> j;
    return from_json(j);
}

nlohmann::json ExperimentSpec::resolved() const {
    nlohmann::json merged = default_params(experiment);
    for (const auto& [key, value] : params.items()) merged[key] = value;
    return nlohmann::json{{"experiment", experiment}, {"params", merged},
                          {"output_dir", output_dir}, {"seed", seed},
                          {"seeds", seed_list()},     {"jobs", jobs},
                          {"allow_divergence", allow_divergence}};
}

std::vector<uint64_t> ExperimentSpec::seed_list() const {
    if (!seeds.empty()) return seeds;
    return {seed};
}

namespace {

using json = nlohmann::json;

struct RunContext {
    const ExperimentSpec& spec;
    json params;  // defaults merged with overrides
    uint64_t config_hash;
    ExperimentOutcome& outcome;
};

std::string csv_name(const std::string& stem) { return stem + ".csv"; }

void write_static_sweep_rows(RunContext& ctx, CsvWriter& csv, const MiniFloatFormat& data_fmt,
                             const std::string& scale_name, int block, const Matrix& tensor,
                             RoundingMode rounding, uint64_t seed, json& results) {
    BlockQuantConfig cfg;
    cfg.data_format = data_fmt;
    cfg.scale_format = MiniFloatFormat::parse(scale_name);
    cfg.block_size = block;
    cfg.element_rounding = rounding;
    const RngStream rng = RngStream::for_tensor(seed, 0, 0);
    const double rmse = block_quant_error(tensor, cfg, 1, ErrorMetric::Rmse, rng);
    const double max_abs = block_quant_error(tensor, cfg, 1, ErrorMetric::MaxAbs, rng);
    const double clip = block_quant_error(tensor, cfg, 1, ErrorMetric::ClipFraction, rng);
    csv.row({scale_name, std::to_string(block), fmt_double(rmse), fmt_double(max_abs),
             fmt_double(clip)});
    results.push_back(json{{"scale", scale_name},
                           {"block", block},
                           {"rmse", rmse},
                           {"max_abs", max_abs},
                           {"clip_fraction", clip}});
    (void)ctx;
}

void write_net_trace_csv(const std::string& path, uint64_t hash, const ToyNetTrainResult& run) {
    CsvWriter csv(path, hash, "step,loss,grad_norm,sigma_q,ratio,ema_ratio,crossed");
    for (std::size_t t = 0; t < run.loss.loss.size(); ++t) {
        const ThresholdReport& rep =
            t < run.threshold.size() ? run.threshold[t] : ThresholdReport{};
        csv.row({std::to_string(t), fmt_double(run.loss.loss[t]), fmt_double(rep.grad_norm),
                 fmt_double(rep.sigma_q), fmt_double(rep.ratio), fmt_double(rep.ema_ratio),
                 rep.crossed ? "1" : "0"});
    }
}

Dataset dataset_for_task(const ToyNetConfig& cfg, const std::string& task, std::size_t n_samples,
                         uint64_t seed, double flip_fraction, double input_spread,
                         double label_noise) {
    if (task == "classification")
        return make_classification_dataset(cfg, n_samples, seed, flip_fraction);
    if (task == "regression")
        return make_teacher_student_dataset(cfg, n_samples, seed, input_spread, label_noise);
    throw std::invalid_argument("unknown task: " + task);
}

ToyNetTrainResult train_for_experiment(const json& params, const RoundingPolicy& policy,
                                       const NetTrainSchedule& schedule, uint64_t seed) {
    ToyNetConfig cfg;
    cfg.dims = params.at("dims").get<std::vector<std::size_t>>();
    const std::string task = params.value("task", "regression");
    if (task == "classification") cfg.loss = LossKind::SoftmaxCrossEntropy;
    ToyNet net(cfg, seed);
    const Dataset data = dataset_for_task(cfg, task, params.at("n_samples").get<std::size_t>(),
                                          seed, params.value("flip_fraction", 0.0),
                                          params.value("input_spread", 0.0),
                                          params.value("label_noise", 0.0));
    return train_toynet(net, data.inputs, data.targets, policy, schedule, seed);
}

void run_format_sweep(RunContext& ctx) {
    const auto scales = ctx.params.at("scales").get<std::vector<std::string>>();
    const int block = ctx.params.at("block").get<int>();
    const auto data_fmt = MiniFloatFormat::parse(ctx.params.at("data_format").get<std::string>());
    const RoundingMode rounding =
        parse_rounding_mode(ctx.params.at("rounding").get<std::string>());
    const std::string mode = ctx.params.at("mode").get<std::string>();
    const uint64_t seed = ctx.spec.seed_list().front();

    json results = json::array();
    if (mode == "static") {
        const Matrix tensor = make_tensor(ctx.params.at("data").get<std::string>(), seed);
        const std::string path = out_path(ctx.spec, csv_name("format_sweep"));
        CsvWriter csv(path, ctx.config_hash, "scale_format,block,rmse,max_abs,clip_fraction");
        for (const auto& scale : scales)
            write_static_sweep_rows(ctx, csv, data_fmt, scale, block, tensor, rounding, seed,
                                    results);
        ctx.outcome.files_written.push_back(path);
    } else if (mode == "train") {
        std::vector<json> rows(scales.size());
        std::vector<std::string> files(scales.size());
        run_cells(scales.size(), ctx.spec.jobs, [&](std::size_t i) {
            BlockQuantConfig base;
            base.data_format = data_fmt;
            base.scale_format = MiniFloatFormat::parse(scales[i]);
            base.block_size = block;
            const RoundingPolicy policy = RoundingPolicy::split_rounding(base);
            NetTrainSchedule sched;
            sched.steps = ctx.params.at("steps").get<std::size_t>();
            sched.eta = ctx.params.at("eta").get<double>();
            const ToyNetTrainResult run = train_for_experiment(ctx.params, policy, sched, seed);
            files[i] = out_path(ctx.spec, csv_name("format_sweep_train_" + scales[i]));
            write_net_trace_csv(files[i], ctx.config_hash, run);
            rows[i] = json{{"scale", scales[i]},
                           {"final_loss", run.loss.final_loss()},
                           {"stationary_loss", run.loss.stationary_loss()},
                           {"diverged", run.diverged}};
        });
        for (std::size_t i = 0; i < scales.size(); ++i) {
            results.push_back(rows[i]);
            ctx.outcome.files_written.push_back(files[i]);
            if (rows[i].at("diverged").get<bool>()) ctx.outcome.any_diverged = true;
        }
    } else {
        throw std::invalid_argument("format-sweep mode must be static or train");
    }
    ctx.outcome.summary["results"] = results;
}

void run_block_sweep(RunContext& ctx) {
    const auto scales = ctx.params.at("scales").get<std::vector<std::string>>();
    const auto blocks = ctx.params.at("blocks").get<std::vector<int>>();
    const auto data_fmt = MiniFloatFormat::parse(ctx.params.at("data_format").get<std::string>());
    const RoundingMode rounding =
        parse_rounding_mode(ctx.params.at("rounding").get<std::string>());
    const uint64_t seed = ctx.spec.seed_list().front();
    const Matrix tensor = make_tensor(ctx.params.at("data").get<std::string>(), seed);

    const std::string path = out_path(ctx.spec, csv_name("block_sweep"));
    CsvWriter csv(path, ctx.config_hash, "scale_format,block,rmse,max_abs,clip_fraction");
    json results = json::array();
    for (const auto& scale : scales)
        for (int block : blocks)
            write_static_sweep_rows(ctx, csv, data_fmt, scale, block, tensor, rounding, seed,
                                    results);
    ctx.outcome.files_written.push_back(path);
    ctx.outcome.summary["results"] = results;
}

void run_quant_error(RunContext& ctx) {
    const uint64_t seed = ctx.spec.seed_list().front();
    const Matrix tensor = make_tensor(ctx.params.at("data").get<std::string>(), seed);
    const RoundingMode rounding =
        parse_rounding_mode(ctx.params.at("rounding").get<std::string>());
    const BlockQuantConfig cfg =
        BlockQuantConfig::parse(ctx.params.at("config").get<std::string>(), rounding);
    const int axis = ctx.params.at("axis").get<int>();
    const RngStream rng = RngStream::for_tensor(seed, 0, 0);

    const std::string path = out_path(ctx.spec, csv_name("quant_error"));
    CsvWriter csv(path, ctx.config_hash, "config,metric,value");
    json results = json::object();
    for (const auto& metric_name : ctx.params.at("metrics").get<std::vector<std::string>>()) {
        const double value =
            block_quant_error(tensor, cfg, axis, parse_error_metric(metric_name), rng);
        csv.row({cfg.name(), metric_name, fmt_double(value)});
        results[metric_name] = value;
    }
    ctx.outcome.files_written.push_back(path);
    ctx.outcome.summary["results"] = results;
}

void run_quadratic_sr_experiment(RunContext& ctx) {
    const std::size_t d = ctx.params.at("d").get<std::size_t>();
    const double lambda = ctx.params.at("lambda").get<double>();
    const std::size_t steps = ctx.params.at("steps").get<std::size_t>();
    const double radius = ctx.params.at("start_radius").get<double>();
    std::vector<double> ks = ctx.params.at("k").get<std::vector<double>>();
    const bool with_baseline = ctx.params.at("include_baseline").get<bool>();
    QuadraticSchedule schedule;
    schedule.steps = steps;
    schedule.use_optimal_eta = ctx.params.at("step_rule").get<std::string>() == "optimal";
    schedule.eta = ctx.params.at("eta").get<double>();

    struct Cell {
        double k;
        bool baseline;
        uint64_t seed;
    };
    std::vector<Cell> cells;
    for (uint64_t seed : ctx.spec.seed_list()) {
        for (double k : ks) cells.push_back({k, false, seed});
        if (with_baseline) cells.push_back({0.0, true, seed});
    }

    std::vector<json> rows(cells.size());
    std::vector<std::string> files(cells.size());
    run_cells(cells.size(), ctx.spec.jobs, [&](std::size_t i) {
        const Cell& cell = cells[i];
        const QuadraticProblem problem = QuadraticProblem::make(d, lambda, radius, cell.seed);
        const LossTrace trace =
            cell.baseline
                ? run_quadratic_sr(problem, schedule, NoiseRule::FixedSigma, 0.0, cell.seed)
                : run_quadratic_sr(problem, schedule, NoiseRule::AdaptiveCritical, cell.k,
                                   cell.seed);

        char stem[96];
        if (cell.baseline) {
            std::snprintf(stem, sizeof stem, "quadratic_sr_baseline_seed%llu",
                          static_cast<unsigned long long>(cell.seed));
        } else {
            std::snprintf(stem, sizeof stem, "quadratic_sr_k%.3g_seed%llu", cell.k,
                          static_cast<unsigned long long>(cell.seed));
        }
        files[i] = out_path(ctx.spec, csv_name(stem));
        CsvWriter csv(files[i], ctx.config_hash, "step,loss,grad_norm,sigma_q,ratio");
        for (std::size_t t = 0; t < trace.loss.size(); ++t) {
            // For the quadratic the per-step norms follow from the loss.
            const double grad_norm = std::sqrt(2.0 * lambda * trace.loss[t]);
            const double sigma_q =
                cell.baseline ? 0.0
                              : cell.k * grad_norm / std::sqrt(3.0 * static_cast<double>(d));
            const double ratio = sigma_q > 0.0
                                     ? grad_norm / (sigma_q * std::sqrt(static_cast<double>(d)))
                                     : std::numeric_limits<double>::infinity();
            csv.row({std::to_string(t), fmt_double(trace.loss[t]), fmt_double(grad_norm),
                     fmt_double(sigma_q), fmt_double(ratio)});
        }
        rows[i] = json{{"k", cell.baseline ? json(nullptr) : json(cell.k)},
                       {"baseline", cell.baseline},
                       {"seed", cell.seed},
                       {"final_loss", trace.final_loss()},
                       {"stationary_loss", trace.stationary_loss()},
                       {"diverged", trace.diverged}};
    });

    json results = json::array();
    for (std::size_t i = 0; i < cells.size(); ++i) {
        results.push_back(rows[i]);
        ctx.outcome.files_written.push_back(files[i]);
        if (rows[i].at("diverged").get<bool>()) ctx.outcome.any_diverged = true;
    }
    ctx.outcome.summary["results"] = results;
}

void run_quadratic_biased_experiment(RunContext& ctx) {
    const std::size_t d = ctx.params.at("d").get<std::size_t>();
    const double lambda = ctx.params.at("lambda").get<double>();
    const double eta = ctx.params.at("eta").get<double>();
    const double mu = ctx.params.at("mu_eps").get<double>();
    const double sigma = ctx.params.at("sigma_eps").get<double>();
    const std::size_t steps = ctx.params.at("steps").get<std::size_t>();
    const double radius = ctx.params.at("start_radius").get<double>();
    const uint64_t seed = ctx.spec.seed_list().front();

    const QuadraticProblem problem = QuadraticProblem::make(d, lambda, radius, seed);
    const BiasedRunResult run = run_quadratic_biased(problem, steps, eta, mu, sigma, seed);

    const std::string path = out_path(ctx.spec, csv_name("quadratic_biased"));
    CsvWriter csv(path, ctx.config_hash, "step,loss,error_coord0");
    for (std::size_t t = 0; t < run.trace.loss.size(); ++t)
        csv.row({std::to_string(t), fmt_double(run.trace.loss[t]),
                 fmt_double(run.error_coord0[t])});
    ctx.outcome.files_written.push_back(path);
    if (run.trace.diverged) ctx.outcome.any_diverged = true;

    json closed = json::object();
    if (std::abs(1.0 - eta * lambda) < 1.0) {
        const BiasedFixedPoint fp =
            biased_fixed_point(lambda, eta, mu, problem.theta0[0] - problem.theta_star[0], steps);
        closed = json{{"e_n", fp.e_n},
                      {"loss_n", fp.loss_n},
                      {"e_inf", fp.e_inf},
                      {"loss_inf", fp.loss_inf}};
    }
    ctx.outcome.summary["results"] =
        json{{"stationary_loss", run.stationary_loss},
             {"final_loss", run.trace.final_loss()},
             {"divergence_warning", run.divergence_warning},
             {"closed_form", closed}};
}

void run_sr_ablation(RunContext& ctx) {
    const BlockQuantConfig base =
        BlockQuantConfig::parse(ctx.params.at("quant").get<std::string>());
    const uint64_t seed = ctx.spec.seed_list().front();
    NetTrainSchedule sched;
    sched.steps = ctx.params.at("steps").get<std::size_t>();
    sched.eta = ctx.params.at("eta").get<double>();

    struct Cell {
        std::string label;
        std::optional<QuantPointId> sr_point;  // nullopt -> all RtN
    };
    std::vector<Cell> cells;
    for (QuantPointId p : kAllQuantPoints)
        cells.push_back({std::string(quant_point_name(p)), p});
    if (ctx.params.at("include_all_rtn").get<bool>()) cells.push_back({"all_rtn", std::nullopt});

    std::vector<json> rows(cells.size());
    std::vector<std::string> files(cells.size());
    run_cells(cells.size(), ctx.spec.jobs, [&](std::size_t i) {
        std::array<RoundingMode, kQuantPointCount> modes;
        modes.fill(RoundingMode::RtN);
        if (cells[i].sr_point)
            modes[static_cast<std::size_t>(*cells[i].sr_point)] = RoundingMode::SR;
        const RoundingPolicy policy = RoundingPolicy::from_modes(base, modes);
        const ToyNetTrainResult run = train_for_experiment(ctx.params, policy, sched, seed);
        files[i] = out_path(ctx.spec, csv_name("sr_ablation_" + cells[i].label));
        write_net_trace_csv(files[i], ctx.config_hash, run);
        rows[i] = json{{"sr_point", cells[i].label},
                       {"final_loss", run.loss.final_loss()},
                       {"stationary_loss", run.loss.stationary_loss()},
                       {"diverged", run.diverged}};
    });

    json results = json::array();
    for (std::size_t i = 0; i < cells.size(); ++i) {
        results.push_back(rows[i]);
        ctx.outcome.files_written.push_back(files[i]);
        if (rows[i].at("diverged").get<bool>()) ctx.outcome.any_diverged = true;
    }
    ctx.outcome.summary["results"] = results;
}

void run_switch_run(RunContext& ctx) {
    SwitchRunParams params;
    params.dims = ctx.params.at("dims").get<std::vector<std::size_t>>();
    params.n_samples = ctx.params.at("n_samples").get<std::size_t>();
    params.steps = ctx.params.at("steps").get<std::size_t>();
    params.switch_on_threshold = ctx.params.at("switch_on_threshold").get<bool>();
    if (ctx.params.contains("switch_step") && !ctx.params.at("switch_step").is_null())
        params.switch_step = ctx.params.at("switch_step").get<std::size_t>();
    else
        params.switch_step.reset();
    params.eta = ctx.params.at("eta").get<double>();
    params.task = ctx.params.value("task", params.task);
    params.flip_fraction = ctx.params.value("flip_fraction", params.flip_fraction);
    params.input_spread = ctx.params.at("input_spread").get<double>();
    params.label_noise = ctx.params.at("label_noise").get<double>();
    params.policy = ctx.params.at("policy").get<std::string>();
    params.quant = ctx.params.at("quant").get<std::string>();
    params.seed = ctx.spec.seed_list().front();

    const SwitchRunResult result = run_switch_experiment(params);

    const std::string path = out_path(ctx.spec, csv_name("switch_run"));
    CsvWriter csv(path, ctx.config_hash,
                  "step,loss,baseline_loss,gap,grad_norm,sigma_q,ratio,ema_ratio,crossed");
    const std::size_t n = result.quantized.loss.loss.size();
    for (std::size_t t = 0; t < n; ++t) {
        const double lq = result.quantized.loss.loss[t];
        const double lb = t < result.baseline.loss.size() ? result.baseline.loss[t] : 0.0;
        const ThresholdReport& rep = result.quantized.threshold[t];
        csv.row({std::to_string(t), fmt_double(lq), fmt_double(lb), fmt_double(lq - lb),
                 fmt_double(rep.grad_norm), fmt_double(rep.sigma_q), fmt_double(rep.ratio),
                 fmt_double(rep.ema_ratio), rep.crossed ? "1" : "0"});
    }
    ctx.outcome.files_written.push_back(path);
    if (result.quantized.diverged) ctx.outcome.any_diverged = true;

    ctx.outcome.summary["results"] =
        json{{"switch_step", result.quantized.switch_step ? json(*result.quantized.switch_step)
                                                          : json(nullptr)},
             {"first_crossing", result.first_crossing ? json(*result.first_crossing)
                                                      : json(nullptr)},
             {"gap_at_switch", result.gap_at_switch},
             {"min_gap_after_switch", result.min_gap_after_switch},
             {"shrink_fraction", result.shrink_fraction},
             {"final_loss", result.quantized.loss.final_loss()},
             {"baseline_final_loss", result.baseline.final_loss()},
             {"diverged", result.quantized.diverged}};
}

}  // namespace

SwitchRunResult run_switch_experiment(const SwitchRunParams& params) {
    ToyNetConfig cfg;
    cfg.dims = params.dims;
    if (params.task == "classification") cfg.loss = LossKind::SoftmaxCrossEntropy;
    const Dataset data =
        dataset_for_task(cfg, params.task, params.n_samples, params.seed, params.flip_fraction,
                         params.input_spread, params.label_noise);
    const BlockQuantConfig base = BlockQuantConfig::parse(params.quant);
    const RoundingPolicy policy = RoundingPolicy::parse(params.policy, base);

    NetTrainSchedule sched;
    sched.steps = params.steps;
    sched.eta = params.eta;
    sched.switch_step = params.switch_step;
    sched.switch_on_threshold = params.switch_on_threshold;

    SwitchRunResult result;
    {
        ToyNet net(cfg, params.seed);
        result.quantized = train_toynet(net, data.inputs, data.targets, policy, sched, params.seed);
    }
    {
        ToyNet net(cfg, params.seed);
        NetTrainSchedule base_sched;
        base_sched.steps = params.steps;
        base_sched.eta = params.eta;
        const ToyNetTrainResult run = train_toynet(net, data.inputs, data.targets,
                                                   RoundingPolicy::all_none(), base_sched,
                                                   params.seed);
        result.baseline = run.loss;
    }

    for (const auto& rep : result.quantized.threshold) {
        if (rep.crossed) {
            result.first_crossing = rep.step;
            break;
        }
    }

    if (result.quantized.switch_step) {
        const std::size_t sw = *result.quantized.switch_step;
        const auto& lq = result.quantized.loss.loss;
        const auto& lb = result.baseline.loss;
        const std::size_t n = std::min(lq.size(), lb.size());
        auto window_mean_gap = [&](std::size_t end, std::size_t window) {
            const std::size_t begin = end > window ? end - window : 0;
            double s = 0.0;
            for (std::size_t t = begin; t < end; ++t) s += lq[t] - lb[t];
            return s / static_cast<double>(end - begin);
        };
        if (sw > 0 && sw < n) {
            result.gap_at_switch = window_mean_gap(sw, 25);
            double best = std::numeric_limits<double>::infinity();
            const std::size_t horizon = std::min(n, sw + 501);
            for (std::size_t t = sw + 25; t <= horizon; ++t)
                best = std::min(best, window_mean_gap(t, 25));
            result.min_gap_after_switch = best;
            result.shrink_fraction =
                result.gap_at_switch > 0.0 ? 1.0 - best / result.gap_at_switch : 0.0;
        }
    }
    return result;
}

ExperimentOutcome run_experiment(const ExperimentSpec& spec) {
    ExperimentOutcome outcome;
    const nlohmann::json resolved = spec.resolved();
    // The hash covers what determines the results; where they are written and
    // how many workers ran is execution detail.
    nlohmann::json hashed = resolved;
    hashed.erase("output_dir");
    hashed.erase("jobs");
    const uint64_t hash = fnv1a_hash(hashed.dump());

    outcome.summary = nlohmann::json::object();
    outcome.summary["experiment"] = spec.experiment;
    outcome.summary["config"] = resolved;
    char hash_hex[32];
    std::snprintf(hash_hex, sizeof hash_hex, "%016llx", static_cast<unsigned long long>(hash));
    outcome.summary["config_hash"] = hash_hex;

    RunContext ctx{spec, resolved.at("params"), hash, outcome};
    if (spec.experiment == "format-sweep") run_format_sweep(ctx);
    else if (spec.experiment == "block-sweep") run_block_sweep(ctx);
    else if (spec.experiment == "quant-error") run_quant_error(ctx);
    else if (spec.experiment == "quadratic-sr") run_quadratic_sr_experiment(ctx);
    else if (spec.experiment == "quadratic-biased") run_quadratic_biased_experiment(ctx);
    else if (spec.experiment == "sr-ablation") run_sr_ablation(ctx);
    else if (spec.experiment == "switch-run") run_switch_run(ctx);
    else throw std::invalid_argument("unknown experiment: " + spec.experiment);

    outcome.summary["any_diverged"] = outcome.any_diverged;
    const std::string summary_path = out_path(spec, "summary.json");
    std::ofstream out(summary_path, std::ios::binary);
    out << outcome.summary.dump(2) << "\n";
    outcome.files_written.push_back(summary_path);
    return outcome;
}

namespace {

void check(std::vector<CheckResult>& out, const std::string& name, bool ok,
           const std::string& detail = "") {
    out.push_back({name, ok, ok ? "" : detail});
}

void verify_codec(std::vector<CheckResult>& out) {
    std::vector<MiniFloatFormat> fmts = {
        MiniFloatFormat::parse("E2M1"), MiniFloatFormat::parse("E4M3"),
        MiniFloatFormat::parse("E4M3fn"), MiniFloatFormat::parse("E8M0u")};
    for (int e = 1; e <= 6; ++e) fmts.push_back(MiniFloatFormat::make(e, 7 - e, true));

    for (const auto& fmt : fmts) {
        bool ok = true;
        std::string detail;
        for (uint32_t code = 0; code < fmt.code_count(); ++code) {
            const double v = decode(fmt, static_cast<uint16_t>(code));
            if (std::isnan(v)) continue;
            const double back = decode(fmt, encode(fmt, v));
            if (back != v) {
                ok = false;
                detail = fmt.name() + " code " + std::to_string(code);
                break;
            }
        }
        check(out, "codec round-trip " + fmt.name(), ok, detail);
    }

    const RepresentableGrid g = enumerate_grid(MiniFloatFormat::parse("E2M1"));
    std::vector<double> positive;
    for (double v : g.values)
        if (v >= 0.0) positive.push_back(v);
    const std::vector<double> expected = {0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0};
    check(out, "E2M1 positive grid", positive == expected && g.size() == 15,
          "grid cardinality " + std::to_string(g.size()));
}

void verify_rounding(std::vector<CheckResult>& out) {
    const RepresentableGrid grid = enumerate_grid(MiniFloatFormat::parse("E2M1"));
    const RngStream points(7, 1);

    bool rtn_ok = true;
    std::string rtn_detail;
    for (std::size_t i = 0; i < 2000 && rtn_ok; ++i) {
        const double x = -6.0 + 12.0 * points.uniform(i);
        const double r = round_rtn(grid, x);
        for (double v : grid.values) {
            if (std::abs(v - x) < std::abs(r - x) - 1e-18) {
                rtn_ok = false;
                rtn_detail = "x=" + fmt_double(x);
                break;
            }
        }
    }
    check(out, "RtN optimality", rtn_ok, rtn_detail);

    bool sr_ok = true;
    std::string sr_detail;
    const std::size_t draws = 20000;
    for (std::size_t i = 0; i < 50 && sr_ok; ++i) {
        const double x = -5.9 + 11.8 * points.uniform(1000 + i);
        const RngStream rng(11, i);
        double mean = 0.0;
        for (std::size_t k = 0; k < draws; ++k) mean += round_sr(grid, x, rng, k);
        mean /= static_cast<double>(draws);
        const std::size_t up = static_cast<std::size_t>(
            std::lower_bound(grid.values.begin(), grid.values.end(), x) - grid.values.begin());
        const double l = grid.values[up - 1], u = grid.values[up];
        const double p = (x - l) / (u - l);
        const double se = (u - l) * std::sqrt(p * (1 - p) / static_cast<double>(draws));
        if (std::abs(mean - x) > 4.0 * se + 1e-12) {
            sr_ok = false;
            sr_detail = "x=" + fmt_double(x) + " mean=" + fmt_double(mean);
        }
    }
    check(out, "SR unbiasedness (Monte Carlo)", sr_ok, sr_detail);

    const RngStream rng(3, 9);
    bool det_ok = true;
    for (std::size_t i = 0; i < 100; ++i) {
        const double x = -6.0 + 12.0 * points.uniform(2000 + i);
        if (round_sr(grid, x, rng, i) != round_sr(grid, x, rng, i)) det_ok = false;
    }
    check(out, "SR determinism", det_ok);
}

void verify_blockquant(std::vector<CheckResult>& out) {
    const BlockQuantConfig cfg = BlockQuantConfig::nvfp4();
    const RngStream rng(5, 0);

    Matrix fixed(1, 16);
    const RepresentableGrid g = enumerate_grid(cfg.data_format);
    for (std::size_t i = 0; i < 16; ++i) fixed(0, i) = 0.25 * g.values[i % g.size()];
    const Matrix back = dequantize(quantize_block_tensor(fixed, cfg, 1, rng));
    check(out, "fixed-point exactness", back == fixed);

    Matrix zeros(1, 16, 0.0);
    const QuantizedBlockTensor qz = quantize_block_tensor(zeros, cfg, 1, rng);
    const RepresentableGrid sg = enumerate_grid(cfg.scale_format);
    check(out, "zero block scale",
          decode(cfg.scale_format, qz.scales[0]) == sg.min_subnormal_positive &&
              dequantize(qz) == zeros);

    Matrix block(1, 16, 1.0);
    block(0, 3) = 12.0;
    block(0, 7) = 5.0;
    const Matrix dq = dequantize(quantize_block_tensor(block, cfg, 1, rng));
    check(out, "amax-12 block quantizes 5 to 4", dq(0, 7) == 4.0,
          "got " + fmt_double(dq(0, 7)));
}

void verify_analysis(std::vector<CheckResult>& out) {
    const RngStream rng(17, 0);
    bool identity_ok = true;
    for (std::size_t i = 0; i < 100 && identity_ok; ++i) {
        const std::size_t d = 2 + (i % 6);
        std::vector<double> grad(d);
        for (std::size_t j = 0; j < d; ++j) grad[j] = rng.gaussian(i * 16 + j) + 0.1;
        const CurvatureModel h = CurvatureModel::isotropic(0.5 + rng.uniform(i * 16 + 15), d);
        const double sigma = rng.uniform(i * 16 + 14);
        const double eta = optimal_eta(grad, h, sigma);
        const double lhs = expected_loss_delta(grad, h, eta, sigma);
        const double rhs = loss_delta_at_optimum(grad, h, sigma);
        if (std::abs(lhs - rhs) > 1e-12 * std::abs(rhs)) identity_ok = false;
    }
    check(out, "loss delta identity at eta*", identity_ok);

    const std::vector<double> grad = {1.0, 1.0};
    const CurvatureModel h = CurvatureModel::diagonal({1.5, 1.5});
    const double x = h.quadratic_form(grad);
    const double y = h.trace();
    const double target = sigma_critical_general(x, y);
    double best_sigma = 0.0, best_f = -1.0;
    for (int i = 0; i <= 4000; ++i) {
        const double s = 10.0 * i / 4000.0;
        const double f = noise_sensitivity(grad, h, s);
        if (f > best_f) {
            best_f = f;
            best_sigma = s;
        }
    }
    check(out, "noise sensitivity argmax", std::abs(best_sigma - target) <= 10.0 / 4000.0 + 1e-12,
          "argmax " + fmt_double(best_sigma) + " target " + fmt_double(target));

    const QuadraticProblem problem{1, 2.0, {0.0}, {1.0}};
    const BiasedRunResult sim = run_quadratic_biased(problem, 200, 0.2, 0.05, 0.0, 1);
    const BiasedFixedPoint fp = biased_fixed_point(2.0, 0.2, 0.05, 1.0, 200);
    check(out, "biased recursion matches closed form",
          std::abs(sim.error_coord0.back() - fp.e_n) <= 1e-10 * std::max(1.0, std::abs(fp.e_n)),
          "sim " + fmt_double(sim.error_coord0.back()) + " closed " + fmt_double(fp.e_n));
}

}  // namespace

std::vector<CheckResult> verify_suite(std::string_view which) {
    std::vector<CheckResult> out;
    const bool all = which == "all";
    if (all || which == "codec") verify_codec(out);
    if (all || which == "rounding") verify_rounding(out);
    if (all || which == "blockquant") verify_blockquant(out);
    if (all || which == "analysis") verify_analysis(out);
    if (out.empty()) throw std::invalid_argument("unknown suite: " + std::string(which));
    return out;
}

}  // namespace fqt
