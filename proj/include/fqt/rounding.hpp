#pragma once

#include <cstdint>
#include <span>
#include <string_view>

#include "fqt/minifloat.hpp"
#include "fqt/rng.hpp"

namespace fqt {

// None means the operand passes through at high precision.
enum class RoundingMode : uint8_t { RtN, SR, None };

RoundingMode parse_rounding_mode(std::string_view s);
std::string_view rounding_mode_name(RoundingMode m);

// Nearest grid value; out-of-range inputs saturate to the end values, exact
// halfway cases go to the neighbor with the even mantissa code.
double round_rtn(const RepresentableGrid& grid, double x);
std::size_t round_rtn_index(const RepresentableGrid& grid, double x);

// Stochastic rounding: picks the upper bracket value u with probability
// (x - l) / (u - l), the lower one otherwise. Grid values map to themselves
// and out-of-range inputs saturate deterministically.
double round_sr(const RepresentableGrid& grid, double x, const RngStream& rng, uint64_t counter);
std::size_t round_sr_index(const RepresentableGrid& grid, double x, const RngStream& rng,
                           uint64_t counter);

struct NoiseStats {
    double mean = 0.0;
    double stddev = 0.0;
};

// Empirical mean and standard deviation of (rounded - original), the
// estimator for the quantization-noise moments. Sample i uses counter i of
// the stream.
NoiseStats quantization_noise_stats(const RepresentableGrid& grid, std::span<const double> samples,
                                    RoundingMode mode, const RngStream& rng);

}  // namespace fqt
