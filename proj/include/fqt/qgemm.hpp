#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "fqt/blockquant.hpp"
#include "fqt/matrix.hpp"

namespace fqt {

// The six operand positions of the forward, backward and update GEMMs.
enum class QuantPointId : uint8_t {
    FwdWeight = 0,   // forward:  W
    FwdAct = 1,      // forward:  a_{l-1}
    BwdWeightT = 2,  // backward: W^T
    BwdGrad = 3,     // backward: delta_l
    UpdGrad = 4,     // update:   delta_l
    UpdActT = 5,     // update:   a_{l-1}^T
};

inline constexpr std::size_t kQuantPointCount = 6;
inline constexpr std::array<QuantPointId, kQuantPointCount> kAllQuantPoints = {
    QuantPointId::FwdWeight, QuantPointId::FwdAct,  QuantPointId::BwdWeightT,
    QuantPointId::BwdGrad,   QuantPointId::UpdGrad, QuantPointId::UpdActT,
};

std::string_view quant_point_name(QuantPointId p);

// Per-point quantization choice; an empty entry means the operand passes
// through at high precision.
struct RoundingPolicy {
    std::array<std::optional<BlockQuantConfig>, kQuantPointCount> points;

    static RoundingPolicy all_none();

    // The adopted scheme: RtN on weights and forward activations, SR on the
    // gradients of both backward-direction GEMMs and on the update-GEMM
    // activations, all in the same block format.
    static RoundingPolicy split_rounding(const BlockQuantConfig& base);

    // Base config with one rounding mode per point; None drops the point.
    static RoundingPolicy from_modes(const BlockQuantConfig& base,
                                     const std::array<RoundingMode, kQuantPointCount>& modes);

    // "paper" and "none" presets, or six entries like
    // "fwdW=rtn,fwdA=rtn,bwdW=rtn,bwdG=sr,updG=sr,updA=sr".
    static RoundingPolicy parse(std::string_view spec, const BlockQuantConfig& base);

    const std::optional<BlockQuantConfig>& at(QuantPointId p) const {
        return points[static_cast<std::size_t>(p)];
    }
    std::optional<BlockQuantConfig>& at(QuantPointId p) {
        return points[static_cast<std::size_t>(p)];
    }

    std::string name() const;

    bool operator==(const RoundingPolicy&) const = default;
};

// Simulated quantized GEMM: each operand is quantized along its contraction
// axis (a along columns, b along rows), dequantized, and the product is
// accumulated at high precision. A missing config passes the operand through.
Matrix qmatmul(const Matrix& a, const Matrix& b, const std::optional<BlockQuantConfig>& cfg_a,
               const std::optional<BlockQuantConfig>& cfg_b, const RngStream& rng_a,
               const RngStream& rng_b);

// Stream id for one (layer, quantization point) operand at one step.
RngStream quant_point_stream(uint64_t seed, uint32_t layer, QuantPointId p, uint64_t step);

// z = Q(W) Q(a_prev); the caller keeps the unquantized a_prev for the update.
Matrix fqt_linear_forward(const Matrix& weight, const Matrix& a_prev, const RoundingPolicy& policy,
                          uint64_t seed, uint32_t layer, uint64_t step);

// g_prev = Q(W^T) Q(delta); W^T is quantized fresh along its own contraction
// axis rather than reusing the forward codes.
Matrix fqt_linear_backward(const Matrix& weight, const Matrix& delta, const RoundingPolicy& policy,
                           uint64_t seed, uint32_t layer, uint64_t step);

// dW = Q(delta) Q(a_prev^T).
Matrix fqt_linear_update(const Matrix& delta, const Matrix& a_prev, const RoundingPolicy& policy,
                         uint64_t seed, uint32_t layer, uint64_t step);

}  // namespace fqt
