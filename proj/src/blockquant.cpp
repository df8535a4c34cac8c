#include "fqt/blockquant.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fqt {

BlockQuantConfig BlockQuantConfig::nvfp4(RoundingMode mode) {
    BlockQuantConfig cfg;
    cfg.data_format = MiniFloatFormat::make(2, 1, true);
    cfg.scale_format = MiniFloatFormat::make(4, 3, true);
    cfg.block_size = 16;
    cfg.element_rounding = mode;
    return cfg;
}

BlockQuantConfig BlockQuantConfig::mxfp4(RoundingMode mode) {
    BlockQuantConfig cfg;
    cfg.data_format = MiniFloatFormat::make(2, 1, true);
    cfg.scale_format = MiniFloatFormat::make(8, 0, false);
    cfg.block_size = 32;
    cfg.element_rounding = mode;
    return cfg;
}

BlockQuantConfig BlockQuantConfig::parse(std::string_view spec, RoundingMode mode) {
    if (spec == "nvfp4") return nvfp4(mode);
    if (spec == "mxfp4") return mxfp4(mode);
    BlockQuantConfig cfg = nvfp4(mode);
    std::string_view rest = spec;
    while (!rest.empty()) {
        const std::size_t comma = rest.find(',');
        const std::string_view item = rest.substr(0, comma);
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        const std::size_t eq = item.find('=');
        if (eq == std::string_view::npos)
            throw std::invalid_argument("bad quant config item: " + std::string(item));
        const std::string_view key = item.substr(0, eq);
        const std::string_view val = item.substr(eq + 1);
        if (key == "data") {
            cfg.data_format = MiniFloatFormat::parse(val);
        } else if (key == "scale") {
            cfg.scale_format = MiniFloatFormat::parse(val);
        } else if (key == "block") {
            cfg.block_size = std::stoi(std::string(val));
        } else {
            throw std::invalid_argument("bad quant config key: " + std::string(key));
        }
    }
    return cfg;
}

std::string BlockQuantConfig::name() const {
    if (*this == nvfp4(element_rounding)) return "nvfp4";
    if (*this == mxfp4(element_rounding)) return "mxfp4";
    return "data=" + data_format.name() + ",scale=" + scale_format.name() +
           ",block=" + std::to_string(block_size);
}

std::size_t QuantizedBlockTensor::blocks_per_line() const {
    const std::size_t axis_len = block_axis == 1 ? cols : rows;
    const std::size_t bs = static_cast<std::size_t>(config.block_size);
    return (axis_len + bs - 1) / bs;
}

std::size_t QuantizedBlockTensor::block_index(std::size_t r, std::size_t c) const {
    const std::size_t bs = static_cast<std::size_t>(config.block_size);
    if (block_axis == 1) return r * blocks_per_line() + c / bs;
    return (r / bs) * cols + c;
}

namespace {

// Positive part of the scale grid: scales never use the sign bit.
RepresentableGrid positive_scale_grid(const MiniFloatFormat& fmt) {
    const RepresentableGrid full = enumerate_grid(fmt);
    RepresentableGrid pos;
    pos.format = full.format;
    for (std::size_t i = 0; i < full.values.size(); ++i) {
        if (full.values[i] > 0.0) {
            pos.values.push_back(full.values[i]);
            pos.codes.push_back(full.codes[i]);
        }
    }
    if (pos.values.empty()) throw std::invalid_argument("scale format has no positive values");
    pos.max_normal = pos.values.back();
    pos.min_subnormal_positive = pos.values.front();
    return pos;
}

std::vector<double> decode_table(const MiniFloatFormat& fmt) {
    std::vector<double> lut(fmt.code_count());
    for (uint16_t code = 0; code < fmt.code_count(); ++code) lut[code] = decode(fmt, code);
    return lut;
}

}  // namespace

QuantizedBlockTensor quantize_block_tensor(const Matrix& x, const BlockQuantConfig& cfg, int axis,
                                           const RngStream& rng) {
    if (cfg.block_size <= 0) throw std::invalid_argument("quantize: block_size must be positive");
    if (axis != 0 && axis != 1) throw std::invalid_argument("quantize: axis must be 0 or 1");

    QuantizedBlockTensor q;
    q.config = cfg;
    q.rows = x.rows();
    q.cols = x.cols();
    q.block_axis = axis;
    q.codes.resize(x.size());
    if (x.empty()) return q;

    const RepresentableGrid data_grid = enumerate_grid(cfg.data_format);
    const RepresentableGrid scale_grid = positive_scale_grid(cfg.scale_format);

    const std::size_t lines = axis == 1 ? x.rows() : x.cols();
    const std::size_t n_blocks = q.blocks_per_line() * lines;

    // Pass 1: per-block amax.
    std::vector<double> amax(n_blocks, 0.0);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const double v = x(r, c);
            if (!std::isfinite(v)) throw std::invalid_argument("quantize: non-finite input element");
            double& a = amax[q.block_index(r, c)];
            a = std::max(a, std::abs(v));
        }
    }

    // Scales: amax / max_normal, round-to-nearest on the positive scale grid.
    q.scales.resize(n_blocks);
    std::vector<double> scale_value(n_blocks);
    for (std::size_t b = 0; b < n_blocks; ++b) {
        std::size_t idx = 0;
        if (amax[b] > 0.0) idx = round_rtn_index(scale_grid, amax[b] / data_grid.max_normal);
        q.scales[b] = scale_grid.codes[idx];
        scale_value[b] = scale_grid.values[idx];
    }

    // Pass 2: elements, SR draws keyed by flat element index.
    for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < x.cols(); ++c) {
            const std::size_t flat = r * x.cols() + c;
            const double scaled = x(r, c) / scale_value[q.block_index(r, c)];
            std::size_t idx;
            switch (cfg.element_rounding) {
                case RoundingMode::SR: idx = round_sr_index(data_grid, scaled, rng, flat); break;
                default: idx = round_rtn_index(data_grid, scaled); break;
            }
            q.codes[flat] = data_grid.codes[idx];
        }
    }
    return q;
}

Matrix dequantize(const QuantizedBlockTensor& q) {
    Matrix out(q.rows, q.cols);
    if (out.empty()) return out;
    const std::vector<double> data_lut = decode_table(q.config.data_format);
    const std::vector<double> scale_lut = decode_table(q.config.scale_format);
    for (std::size_t r = 0; r < q.rows; ++r) {
        for (std::size_t c = 0; c < q.cols; ++c) {
            const std::size_t flat = r * q.cols + c;
            out(r, c) = data_lut[q.codes[flat]] * scale_lut[q.scales[q.block_index(r, c)]];
        }
    }
    return out;
}

ErrorMetric parse_error_metric(std::string_view s) {
    if (s == "rmse") return ErrorMetric::Rmse;
    if (s == "max_abs") return ErrorMetric::MaxAbs;
    if (s == "clip_fraction") return ErrorMetric::ClipFraction;
    throw std::invalid_argument("bad error metric: " + std::string(s));
}

std::string_view error_metric_name(ErrorMetric m) {
    switch (m) {
        case ErrorMetric::Rmse: return "rmse";
        case ErrorMetric::MaxAbs: return "max_abs";
        case ErrorMetric::ClipFraction: return "clip_fraction";
    }
    return "?";
}

double block_quant_error(const Matrix& x, const BlockQuantConfig& cfg, int axis, ErrorMetric metric,
                         const RngStream& rng) {
    if (x.empty()) throw std::invalid_argument("block_quant_error: empty tensor");
    const QuantizedBlockTensor q = quantize_block_tensor(x, cfg, axis, rng);

    if (metric == ErrorMetric::ClipFraction) {
        const RepresentableGrid data_grid = enumerate_grid(cfg.data_format);
        const std::vector<double> scale_lut = decode_table(cfg.scale_format);
        std::size_t clipped = 0;
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) {
                const double limit = scale_lut[q.scales[q.block_index(r, c)]] * data_grid.max_normal;
                if (std::abs(x(r, c)) > limit) ++clipped;
            }
        return static_cast<double>(clipped) / static_cast<double>(x.size());
    }

    const Matrix d = dequantize(q);
    if (metric == ErrorMetric::MaxAbs) {
        double worst = 0.0;
        for (std::size_t i = 0; i < x.size(); ++i)
            worst = std::max(worst, std::abs(x.at_flat(i) - d.at_flat(i)));
        return worst;
    }
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double e = x.at_flat(i) - d.at_flat(i);
        sum_sq += e * e;
    }
    return std::sqrt(sum_sq / static_cast<double>(x.size()));
}

NoiseStats block_noise_stats(std::span<const double> x, const BlockQuantConfig& cfg,
                             const RngStream& rng) {
    if (x.empty()) throw std::invalid_argument("block_noise_stats: no samples");
    Matrix m(1, x.size());
    for (std::size_t i = 0; i < x.size(); ++i) m(0, i) = x[i];
    const Matrix d = dequantize(quantize_block_tensor(m, cfg, 1, rng));
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double err = d(0, i) - x[i];
        sum += err;
        sum_sq += err * err;
    }
    const double n = static_cast<double>(x.size());
    NoiseStats stats;
    stats.mean = sum / n;
    stats.stddev = std::sqrt(std::max(0.0, sum_sq / n - stats.mean * stats.mean));
    return stats;
}

}  // namespace fqt
