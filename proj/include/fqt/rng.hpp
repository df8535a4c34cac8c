#pragma once

#include <array>
#include <cstdint>

namespace fqt {

// Counter-based random stream (Philox-4x32-10). A draw is a pure function of
// (seed, stream, counter), so identical keys reproduce identical values and
// elements can be generated in any order or in parallel.
//
// Streams are keyed by a 64-bit stream id; for training code the id packs a
// small tensor/operand id with the step index so every quantization point of
// every step draws from its own independent stream.
class RngStream {
public:
    RngStream(uint64_t seed, uint64_t stream) : seed_(seed), stream_(stream) {}

    static RngStream for_tensor(uint64_t seed, uint32_t tensor_id, uint64_t step) {
        return RngStream(seed, (static_cast<uint64_t>(tensor_id) << 48) | (step & ((1ull << 48) - 1)));
    }

    uint64_t seed() const { return seed_; }
    uint64_t stream() const { return stream_; }

    // 128 bits of output for one counter value.
    std::array<uint32_t, 4> block(uint64_t counter) const;

    // Uniform double in [0, 1) with 53 random bits.
    double uniform(uint64_t counter) const;

    // Standard normal draw (Box-Muller over one 128-bit block).
    double gaussian(uint64_t counter) const;

private:
    uint64_t seed_;
    uint64_t stream_;
};

}  // namespace fqt
