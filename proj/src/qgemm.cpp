#include "fqt/qgemm.hpp"

#include <stdexcept>

namespace fqt {

std::string_view quant_point_name(QuantPointId p) {
    switch (p) {
        case QuantPointId::FwdWeight: return "fwdW";
        case QuantPointId::FwdAct: return "fwdA";
        case QuantPointId::BwdWeightT: return "bwdW";
        case QuantPointId::BwdGrad: return "bwdG";
        case QuantPointId::UpdGrad: return "updG";
        case QuantPointId::UpdActT: return "updA";
    }
    return "?";
}

RoundingPolicy RoundingPolicy::all_none() { return RoundingPolicy{}; }

RoundingPolicy RoundingPolicy::split_rounding(const BlockQuantConfig& base) {
    return from_modes(base, {RoundingMode::RtN, RoundingMode::RtN, RoundingMode::RtN,
                             RoundingMode::SR, RoundingMode::SR, RoundingMode::SR});
}

RoundingPolicy RoundingPolicy::from_modes(const BlockQuantConfig& base,
                                          const std::array<RoundingMode, kQuantPointCount>& modes) {
    RoundingPolicy policy;
    for (std::size_t i = 0; i < kQuantPointCount; ++i) {
        if (modes[i] == RoundingMode::None) continue;
        BlockQuantConfig cfg = base;
        cfg.element_rounding = modes[i];
        policy.points[i] = cfg;
    }
    return policy;
}

RoundingPolicy RoundingPolicy::parse(std::string_view spec, const BlockQuantConfig& base) {
    if (spec == "paper") return split_rounding(base);
    if (spec == "none") return all_none();
    std::array<RoundingMode, kQuantPointCount> modes;
    std::array<bool, kQuantPointCount> seen{};
    std::string_view rest = spec;
    while (!rest.empty()) {
        const std::size_t comma = rest.find(',');
        const std::string_view item = rest.substr(0, comma);
        rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
        const std::size_t eq = item.find('=');
        if (eq == std::string_view::npos)
            throw std::invalid_argument("bad policy item: " + std::string(item));
        const std::string_view key = item.substr(0, eq);
        const RoundingMode mode = parse_rounding_mode(item.substr(eq + 1));
        bool matched = false;
        for (std::size_t i = 0; i < kQuantPointCount; ++i) {
            if (key == quant_point_name(static_cast<QuantPointId>(i))) {
                modes[i] = mode;
                seen[i] = true;
                matched = true;
                break;
            }
        }
        if (!matched) throw std::invalid_argument("unknown quant point: " + std::string(key));
    }
    for (std::size_t i = 0; i < kQuantPointCount; ++i)
        if (!seen[i])
            throw std::invalid_argument(
                "policy must name all six points (missing " +
                std::string(quant_point_name(static_cast<QuantPointId>(i))) + ")");
    return from_modes(base, modes);
}

std::string RoundingPolicy::name() const {
    std::string out;
    for (std::size_t i = 0; i < kQuantPointCount; ++i) {
        if (i) out += ",";
        out += quant_point_name(static_cast<QuantPointId>(i));
        out += "=";
        out += points[i] ? rounding_mode_name(points[i]->element_rounding) : "none";
    }
    return out;
}

Matrix qmatmul(const Matrix& a, const Matrix& b, const std::optional<BlockQuantConfig>& cfg_a,
               const std::optional<BlockQuantConfig>& cfg_b, const RngStream& rng_a,
               const RngStream& rng_b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("qmatmul: inner dimensions differ");
    // Contraction runs along a's columns and b's rows, so those are the block axes.
    const Matrix qa = cfg_a ? dequantize(quantize_block_tensor(a, *cfg_a, 1, rng_a)) : a;
    const Matrix qb = cfg_b ? dequantize(quantize_block_tensor(b, *cfg_b, 0, rng_b)) : b;
    return matmul(qa, qb);
}

RngStream quant_point_stream(uint64_t seed, uint32_t layer, QuantPointId p, uint64_t step) {
    const uint32_t tensor_id = layer * static_cast<uint32_t>(kQuantPointCount) +
                               static_cast<uint32_t>(p);
    return RngStream::for_tensor(seed, tensor_id, step);
}

Matrix fqt_linear_forward(const Matrix& weight, const Matrix& a_prev, const RoundingPolicy& policy,
                          uint64_t seed, uint32_t layer, uint64_t step) {
    return qmatmul(weight, a_prev, policy.at(QuantPointId::FwdWeight),
                   policy.at(QuantPointId::FwdAct),
                   quant_point_stream(seed, layer, QuantPointId::FwdWeight, step),
                   quant_point_stream(seed, layer, QuantPointId::FwdAct, step));
}

Matrix fqt_linear_backward(const Matrix& weight, const Matrix& delta, const RoundingPolicy& policy,
                           uint64_t seed, uint32_t layer, uint64_t step) {
    return qmatmul(weight.transposed(), delta, policy.at(QuantPointId::BwdWeightT),
                   policy.at(QuantPointId::BwdGrad),
                   quant_point_stream(seed, layer, QuantPointId::BwdWeightT, step),
                   quant_point_stream(seed, layer, QuantPointId::BwdGrad, step));
}

Matrix fqt_linear_update(const Matrix& delta, const Matrix& a_prev, const RoundingPolicy& policy,
                         uint64_t seed, uint32_t layer, uint64_t step) {
    return qmatmul(delta, a_prev.transposed(), policy.at(QuantPointId::UpdGrad),
                   policy.at(QuantPointId::UpdActT),
                   quant_point_stream(seed, layer, QuantPointId::UpdGrad, step),
                   quant_point_stream(seed, layer, QuantPointId::UpdActT, step));
}

}  // namespace fqt
