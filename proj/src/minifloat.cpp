#include "fqt/minifloat.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace fqt {

namespace {

bool is_reserved_nan(const MiniFloatFormat& fmt, uint16_t code) {
    if (fmt.specials != SpecialValues::FiniteWithNaN) return false;
    const uint16_t exp_mask = static_cast<uint16_t>((1u << fmt.exponent_bits) - 1u);
    const uint16_t man_mask = static_cast<uint16_t>((1u << fmt.mantissa_bits) - 1u);
    const uint16_t exp = static_cast<uint16_t>((code >> fmt.mantissa_bits) & exp_mask);
    const uint16_t man = static_cast<uint16_t>(code & man_mask);
    return exp == exp_mask && man == man_mask;
}

}  // namespace

MiniFloatFormat MiniFloatFormat::make(int exponent_bits, int mantissa_bits, bool has_sign,
                                      SpecialValues specials) {
    if (exponent_bits < 1) throw std::invalid_argument("minifloat: exponent_bits must be >= 1");
    if (mantissa_bits < 0) throw std::invalid_argument("minifloat: mantissa_bits must be >= 0");
    MiniFloatFormat fmt;
    fmt.exponent_bits = exponent_bits;
    fmt.mantissa_bits = mantissa_bits;
    fmt.has_sign = has_sign;
    fmt.specials = specials;
    fmt.bias = (1 << (exponent_bits - 1)) - 1;
    if (fmt.width() > 16) throw std::invalid_argument("minifloat: total width exceeds 16 bits");
    if (exponent_bits > 10)
        throw std::invalid_argument("minifloat: exponent_bits > 10 leaves the exact-double range");
    return fmt;
}

MiniFloatFormat MiniFloatFormat::parse(std::string_view s) {
    auto fail = [&] { throw std::invalid_argument("bad format literal: " + std::string(s)); };
    std::size_t i = 0;
    auto read_int = [&]() -> int {
        std::size_t start = i;
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) ++i;
        if (i == start) fail();
        return std::stoi(std::string(s.substr(start, i - start)));
    };
    if (i >= s.size() || (s[i] != 'E' && s[i] != 'e')) fail();
    ++i;
    int e = read_int();
    if (i >= s.size() || (s[i] != 'M' && s[i] != 'm')) fail();
    ++i;
    int m = read_int();
    bool has_sign = true;
    SpecialValues sp = SpecialValues::AllFinite;
    if (i < s.size() && s[i] == 'u') {
        has_sign = false;
        ++i;
    }
    if (s.substr(i) == "fn") {
        sp = SpecialValues::FiniteWithNaN;
        i = s.size();
    }
    if (i != s.size()) fail();
    return make(e, m, has_sign, sp);
}

std::string MiniFloatFormat::name() const {
    std::string n = "E" + std::to_string(exponent_bits) + "M" + std::to_string(mantissa_bits);
    if (!has_sign) n += "u";
    if (specials == SpecialValues::FiniteWithNaN) n += "fn";
    return n;
}

double decode(const MiniFloatFormat& fmt, uint16_t code) {
    if (code >= fmt.code_count()) throw std::domain_error("decode: code out of range");
    if (is_reserved_nan(fmt, code)) return std::numeric_limits<double>::quiet_NaN();

    const uint16_t man_mask = static_cast<uint16_t>((1u << fmt.mantissa_bits) - 1u);
    const uint16_t exp_mask = static_cast<uint16_t>((1u << fmt.exponent_bits) - 1u);
    const int man = code & man_mask;
    const int exp = (code >> fmt.mantissa_bits) & exp_mask;
    const bool neg = fmt.has_sign && ((code >> (fmt.exponent_bits + fmt.mantissa_bits)) & 1u);

    double mag;
    if (fmt.exponent_only()) {
        // Pure power-of-two code: no zero, no subnormal range.
        mag = std::ldexp(1.0, exp - fmt.bias);
    } else if (exp == 0) {
        mag = std::ldexp(static_cast<double>(man), 1 - fmt.bias - fmt.mantissa_bits);
    } else {
        const double frac = 1.0 + static_cast<double>(man) / static_cast<double>(1 << fmt.mantissa_bits);
        mag = std::ldexp(frac, exp - fmt.bias);
    }
    return neg ? -mag : mag;
}

RepresentableGrid enumerate_grid(const MiniFloatFormat& fmt) {
    RepresentableGrid grid;
    grid.format = fmt;

    const uint16_t n = fmt.code_count();
    std::vector<std::pair<double, uint16_t>> entries;
    entries.reserve(n);
    for (uint16_t code = 0; code < n; ++code) {
        const double v = decode(fmt, code);
        if (std::isnan(v)) continue;
        entries.emplace_back(v, code);
    }
    std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;  // +0 code before -0 code
    });

    for (const auto& [v, code] : entries) {
        if (!grid.values.empty() && grid.values.back() == v) continue;  // collapse +-0
        grid.values.push_back(v);
        grid.codes.push_back(code);
    }

    grid.max_normal = grid.values.back();
    for (double v : grid.values) {
        if (v > 0.0) {
            grid.min_subnormal_positive = v;
            break;
        }
    }
    return grid;
}

uint16_t encode(const MiniFloatFormat& fmt, double x) {
    const RepresentableGrid grid = enumerate_grid(fmt);
    const auto it = std::lower_bound(grid.values.begin(), grid.values.end(), x);
    if (it == grid.values.end() || *it != x)
        throw std::domain_error(fmt.name() + ": value not representable");
    return grid.codes[static_cast<std::size_t>(it - grid.values.begin())];
}

}  // namespace fqt
