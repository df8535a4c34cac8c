#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fqt/matrix.hpp"
#include "fqt/minifloat.hpp"
#include "fqt/rounding.hpp"

namespace fqt {

// One block-scaled quantization scheme: elements in data_format, one shared
// scale per block stored in scale_format. Scales are always rounded to
// nearest onto the positive range of the scale grid; only elements honor
// element_rounding.
struct BlockQuantConfig {
    MiniFloatFormat data_format;
    MiniFloatFormat scale_format;
    int block_size = 16;
    RoundingMode element_rounding = RoundingMode::RtN;

    static BlockQuantConfig nvfp4(RoundingMode mode = RoundingMode::RtN);
    static BlockQuantConfig mxfp4(RoundingMode mode = RoundingMode::RtN);

    // Accepts the preset names "nvfp4" and "mxfp4" or a custom spec of the
    // form "data=E2M1,scale=E4M3,block=16".
    static BlockQuantConfig parse(std::string_view spec, RoundingMode mode = RoundingMode::RtN);

    std::string name() const;

    bool operator==(const BlockQuantConfig&) const = default;
};

// Codes plus per-block scale codes for a 2-D tensor. Blocks run along
// block_axis: axis 1 tiles each row into ceil(cols / block) blocks, axis 0
// tiles each column. A trailing partial block carries its own scale.
struct QuantizedBlockTensor {
    BlockQuantConfig config;
    std::size_t rows = 0;
    std::size_t cols = 0;
    int block_axis = 1;
    std::vector<uint16_t> codes;   // rows * cols element codes
    std::vector<uint16_t> scales;  // one code per block

    std::size_t blocks_per_line() const;
    std::size_t block_index(std::size_t r, std::size_t c) const;
};

// amax scaling: each block's raw scale is amax / max_normal(data format),
// rounded to nearest on the scale grid, elements divided by the stored scale
// and rounded per element_rounding (saturating at the grid ends). An all-zero
// block stores the smallest positive representable scale.
QuantizedBlockTensor quantize_block_tensor(const Matrix& x, const BlockQuantConfig& cfg, int axis,
                                           const RngStream& rng);

Matrix dequantize(const QuantizedBlockTensor& q);

enum class ErrorMetric : uint8_t { Rmse, MaxAbs, ClipFraction };

ErrorMetric parse_error_metric(std::string_view s);
std::string_view error_metric_name(ErrorMetric m);

// Metric between x and dequantize(quantize(x)). ClipFraction counts elements
// whose magnitude exceeds the block's representable range.
double block_quant_error(const Matrix& x, const BlockQuantConfig& cfg, int axis, ErrorMetric metric,
                         const RngStream& rng);

// Noise moments of one quantize-dequantize pass over a flat vector, used by
// the gradient-to-noise monitor.
NoiseStats block_noise_stats(std::span<const double> x, const BlockQuantConfig& cfg,
                             const RngStream& rng);

}  // namespace fqt
