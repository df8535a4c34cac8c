#include "fqt/rng.hpp"

#include <cmath>
#include <numbers>

namespace fqt {

namespace {

// Philox-4x32 round constants (Salmon et al., SC 2011).
constexpr uint32_t kPhiloxW32A = 0x9E3779B9u;
constexpr uint32_t kPhiloxW32B = 0xBB67AE85u;
constexpr uint32_t kPhiloxM4x32A = 0xD2511F53u;
constexpr uint32_t kPhiloxM4x32B = 0xCD9E8D57u;

inline void mul_hilo(uint32_t a, uint32_t b, uint32_t& lo, uint32_t& hi) {
    const uint64_t p = static_cast<uint64_t>(a) * b;
    lo = static_cast<uint32_t>(p);
    hi = static_cast<uint32_t>(p >> 32);
}

inline void philox_round(std::array<uint32_t, 4>& ctr, const std::array<uint32_t, 2>& key) {
    uint32_t lo0, hi0, lo1, hi1;
    mul_hilo(kPhiloxM4x32A, ctr[0], lo0, hi0);
    mul_hilo(kPhiloxM4x32B, ctr[2], lo1, hi1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
}

}  // namespace

std::array<uint32_t, 4> RngStream::block(uint64_t counter) const {
    std::array<uint32_t, 4> ctr = {
        static_cast<uint32_t>(counter),
        static_cast<uint32_t>(counter >> 32),
        static_cast<uint32_t>(stream_),
        static_cast<uint32_t>(stream_ >> 32),
    };
    std::array<uint32_t, 2> key = {static_cast<uint32_t>(seed_), static_cast<uint32_t>(seed_ >> 32)};
    for (int round = 0; round < 10; ++round) {
        philox_round(ctr, key);
        key[0] += kPhiloxW32A;
        key[1] += kPhiloxW32B;
    }
    return ctr;
}

double RngStream::uniform(uint64_t counter) const {
    const auto out = block(counter);
    const uint64_t hi = static_cast<uint64_t>(out[0] >> 5);   // 27 bits
    const uint64_t lo = static_cast<uint64_t>(out[1] >> 6);   // 26 bits
    return static_cast<double>(hi * 67108864ull + lo) * 0x1.0p-53;
}

double RngStream::gaussian(uint64_t counter) const {
    const auto out = block(counter);
    const uint64_t hi = static_cast<uint64_t>(out[0] >> 5);
    const uint64_t lo = static_cast<uint64_t>(out[1] >> 6);
    const double u1 = static_cast<double>(hi * 67108864ull + lo) * 0x1.0p-53;
    const double u2 = (static_cast<double>(out[2]) + 0.5) * 0x1.0p-32;
    const double r = std::sqrt(-2.0 * std::log1p(-u1));  // u1 < 1 exactly
    return r * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace fqt
