#include "fqt/rounding.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fqt {

RoundingMode parse_rounding_mode(std::string_view s) {
    if (s == "rtn") return RoundingMode::RtN;
    if (s == "sr") return RoundingMode::SR;
    if (s == "none") return RoundingMode::None;
    throw std::invalid_argument("bad rounding mode: " + std::string(s));
}

std::string_view rounding_mode_name(RoundingMode m) {
    switch (m) {
        case RoundingMode::RtN: return "rtn";
        case RoundingMode::SR: return "sr";
        case RoundingMode::None: return "none";
    }
    return "?";
}

namespace {

// Index of the first grid value >= x, clamped to [0, n-1]; together with its
// predecessor this brackets x.
std::size_t upper_index(const RepresentableGrid& grid, double x) {
    const auto it = std::lower_bound(grid.values.begin(), grid.values.end(), x);
    return static_cast<std::size_t>(it - grid.values.begin());
}

bool prefer_upper_on_tie(const RepresentableGrid& grid, std::size_t lo, std::size_t hi) {
    const auto& fmt = grid.format;
    const bool lo_even = (mantissa_of(fmt, grid.codes[lo]) & 1u) == 0;
    const bool hi_even = (mantissa_of(fmt, grid.codes[hi]) & 1u) == 0;
    if (lo_even != hi_even) return hi_even;
    // Exponent-only formats have no mantissa field; fall back to the full code.
    return (grid.codes[hi] & 1u) == 0;
}

}  // namespace

std::size_t round_rtn_index(const RepresentableGrid& grid, double x) {
    if (grid.values.empty()) throw std::invalid_argument("round_rtn: empty grid");
    const std::size_t n = grid.values.size();
    const std::size_t up = upper_index(grid, x);
    if (up == 0) return 0;        // saturate low
    if (up == n) return n - 1;    // saturate high
    if (grid.values[up] == x) return up;
    const std::size_t lo = up - 1;
    const double dl = x - grid.values[lo];
    const double du = grid.values[up] - x;
    if (dl < du) return lo;
    if (du < dl) return up;
    return prefer_upper_on_tie(grid, lo, up) ? up : lo;
}

double round_rtn(const RepresentableGrid& grid, double x) {
    return grid.values[round_rtn_index(grid, x)];
}

std::size_t round_sr_index(const RepresentableGrid& grid, double x, const RngStream& rng,
                           uint64_t counter) {
    if (grid.values.empty()) throw std::invalid_argument("round_sr: empty grid");
    const std::size_t n = grid.values.size();
    const std::size_t up = upper_index(grid, x);
    if (up == 0) return 0;
    if (up == n) return n - 1;
    if (grid.values[up] == x) return up;
    const std::size_t lo = up - 1;
    const double l = grid.values[lo];
    const double u = grid.values[up];
    const double p = (x - l) / (u - l);
    return rng.uniform(counter) < p ? up : lo;
}

double round_sr(const RepresentableGrid& grid, double x, const RngStream& rng, uint64_t counter) {
    return grid.values[round_sr_index(grid, x, rng, counter)];
}

NoiseStats quantization_noise_stats(const RepresentableGrid& grid, std::span<const double> samples,
                                    RoundingMode mode, const RngStream& rng) {
    if (samples.empty()) throw std::invalid_argument("quantization_noise_stats: no samples");
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        double rounded;
        switch (mode) {
            case RoundingMode::RtN: rounded = round_rtn(grid, samples[i]); break;
            case RoundingMode::SR: rounded = round_sr(grid, samples[i], rng, i); break;
            case RoundingMode::None: rounded = samples[i]; break;
            default: rounded = samples[i];
        }
        const double err = rounded - samples[i];
        sum += err;
        sum_sq += err * err;
    }
    const double n = static_cast<double>(samples.size());
    NoiseStats stats;
    stats.mean = sum / n;
    const double var = std::max(0.0, sum_sq / n - stats.mean * stats.mean);
    stats.stddev = std::sqrt(var);
    return stats;
}

}  // namespace fqt
