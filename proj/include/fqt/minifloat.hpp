#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace fqt {

// Whether the top exponent code carries finite values or reserves the
// all-ones-mantissa pattern for NaN (the standard FP8 E4M3 convention).
enum class SpecialValues : uint8_t { AllFinite, FiniteWithNaN };

// Bit-level description of a small floating-point format: optional sign bit,
// `exponent_bits` exponent, `mantissa_bits` mantissa, in that order from the
// top of the code. Formats with mantissa_bits == 0 are exponent-only: every
// code maps to a power of two and there is no zero or subnormal range.
struct MiniFloatFormat {
    int exponent_bits = 0;
    int mantissa_bits = 0;
    bool has_sign = true;
    int bias = 0;
    SpecialValues specials = SpecialValues::AllFinite;

    // Validates and fills in the conventional bias 2^(e-1) - 1.
    static MiniFloatFormat make(int exponent_bits, int mantissa_bits, bool has_sign,
                                SpecialValues specials = SpecialValues::AllFinite);

    // Parses "E{e}M{m}" literals; suffix "u" drops the sign bit, suffix "fn"
    // selects the FiniteWithNaN variant. Examples: "E2M1", "E8M0u", "E4M3fn".
    static MiniFloatFormat parse(std::string_view literal);

    int width() const { return (has_sign ? 1 : 0) + exponent_bits + mantissa_bits; }
    bool exponent_only() const { return mantissa_bits == 0; }
    uint16_t code_count() const { return static_cast<uint16_t>(1u << width()); }

    std::string name() const;

    bool operator==(const MiniFloatFormat&) const = default;
};

// Every finite value a format can represent, sorted ascending, with the code
// that produces each value (the positive-zero code for 0).
struct RepresentableGrid {
    MiniFloatFormat format;
    std::vector<double> values;
    std::vector<uint16_t> codes;
    double max_normal = 0.0;              // largest positive value
    double min_subnormal_positive = 0.0;  // smallest positive value

    std::size_t size() const { return values.size(); }
};

RepresentableGrid enumerate_grid(const MiniFloatFormat& fmt);

// Exact value of a code. Reserved NaN codes under FiniteWithNaN decode to a
// quiet NaN.
double decode(const MiniFloatFormat& fmt, uint16_t code);

// Code for a value that is exactly representable; throws std::domain_error
// otherwise. Rounding onto the grid is the rounding module's job.
uint16_t encode(const MiniFloatFormat& fmt, double x);

// Mantissa field of a code, used for ties-to-even decisions.
inline uint16_t mantissa_of(const MiniFloatFormat& fmt, uint16_t code) {
    return static_cast<uint16_t>(code & ((1u << fmt.mantissa_bits) - 1u));
}

}  // namespace fqt
