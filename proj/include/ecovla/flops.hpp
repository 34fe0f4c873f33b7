#pragma once

#include <cstdint>

#include "ecovla/errors.hpp"
#include "ecovla/model.hpp"

namespace ecovla {

// GEMM multiply-add FLOPs, 2mnk convention.
inline std::uint64_t gemm_flops(std::uint64_t m, std::uint64_t n, std::uint64_t k) {
    return 2 * m * n * k;
}

// Arithmetic intensity of an m x n x k GEMM with 2-byte elements:
// 2mnk / (2 (nk + mk + mn)).
inline double arithmetic_intensity(std::uint64_t m, std::uint64_t n, std::uint64_t k) {
    if (m == 0 || n == 0 || k == 0) throw ConfigError("arithmetic_intensity: counts must be > 0");
    const double flops = 2.0 * static_cast<double>(m) * static_cast<double>(n) *
                         static_cast<double>(k);
    const double bytes = 2.0 * (static_cast<double>(n) * static_cast<double>(k) +
                                static_cast<double>(m) * static_cast<double>(k) +
                                static_cast<double>(m) * static_cast<double>(n));
    return flops / bytes;
}

// Analytic per-frame GEMM FLOPs for the model, broken down by component.
// Only matrix products are counted; norms, softmax and elementwise ops are
// excluded from the convention.
struct FlopsBreakdown {
    std::uint64_t attn_qkv = 0;
    std::uint64_t attn_scores_values = 0;
    std::uint64_t attn_out_proj = 0;
    std::uint64_t mlp_gate_up = 0;
    std::uint64_t mlp_down = 0;
    std::uint64_t expert = 0;
    std::uint64_t encoder = 0;

    std::uint64_t mlp() const { return mlp_gate_up + mlp_down; }
    std::uint64_t attention() const { return attn_qkv + attn_scores_values + attn_out_proj; }
    std::uint64_t backbone() const { return attention() + mlp(); }
    std::uint64_t total() const { return backbone() + expert + encoder; }
};

// pattern == nullptr counts the dense model. A pattern replaces d_ff by the
// retained channel count and the head count by the retained head count in
// the affected GEMMs.
inline FlopsBreakdown flops_count(const ModelConfig& cfg, const SparsityPattern* pattern) {
    cfg.validate();
    if (pattern != nullptr) pattern->validate(cfg);
    const std::uint64_t S = cfg.seq_len;
    const std::uint64_t D = cfg.dim;
    FlopsBreakdown f;
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        const std::uint64_t kh = pattern ? pattern->head_keep[l].count() : cfg.heads;
        const std::uint64_t km = pattern ? pattern->mlp_keep[l].count() : cfg.ff_dim;
        const std::uint64_t attn_width = kh * cfg.head_dim;
        f.attn_qkv += 3 * gemm_flops(S, attn_width, D);
        f.attn_scores_values += kh * (gemm_flops(S, S, cfg.head_dim) +   // q k^T
                                      gemm_flops(S, cfg.head_dim, S));   // softmax(..) v
        f.attn_out_proj += gemm_flops(S, D, attn_width);
        f.mlp_gate_up += 2 * gemm_flops(S, km, D);
        f.mlp_down += gemm_flops(S, D, km);
    }
    f.expert = gemm_flops(1, cfg.expert_width, D) +
               gemm_flops(1, cfg.expert_width, cfg.expert_width);
    f.encoder = gemm_flops(cfg.vis_tokens, D, cfg.vis_dim);
    return f;
}

}  // namespace ecovla
