#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "ecovla/errors.hpp"
#include "ecovla/index_set.hpp"
#include "ecovla/kernels.hpp"
#include "ecovla/matrix.hpp"

namespace ecovla {

struct ModelConfig {
    std::size_t blocks = 6;         // L
    std::size_t dim = 256;          // D, hidden width
    std::size_t heads = 8;          // H
    std::size_t head_dim = 32;      // d_head, H * d_head == dim
    std::size_t ff_dim = 1024;      // d_ff
    std::size_t seq_len = 64;       // S
    std::size_t vis_tokens = 32;    // N, N <= S
    std::size_t vis_dim = 64;       // D_v
    std::size_t expert_width = 64;
    std::uint64_t seed = 1;
    float ln_eps = 1e-5f;

    void validate() const {
        if (blocks == 0 || dim == 0 || heads == 0 || head_dim == 0 || ff_dim == 0 ||
            seq_len == 0 || vis_tokens == 0 || vis_dim == 0 || expert_width == 0)
            throw ConfigError("model dimensions must be positive");
        if (heads * head_dim != dim) throw ConfigError("heads * head_dim must equal dim");
        if (vis_tokens > seq_len) throw ConfigError("vis_tokens must not exceed seq_len");
        if (!(ln_eps > 0.0f)) throw ConfigError("ln_eps must be > 0");
    }
};

// Per-block weights. The final projections (w_out, w_down) are stored
// column-major so retained input channels are contiguous reads.
struct BlockWeights {
    Matrix w_q, w_k, w_v;  // dim x dim, RowMajor
    Matrix w_out;          // dim x dim, ColMajor
    Matrix w_gate, w_up;   // ff_dim x dim, RowMajor
    Matrix w_down;         // dim x ff_dim, ColMajor
};

// Retained MLP channels and attention heads per block; the structured form
// of the pruning mask. version counts sparsity update steps.
struct SparsityPattern {
    std::vector<ChannelIndexSet> mlp_keep;
    std::vector<ChannelIndexSet> head_keep;
    std::uint64_t version = 0;

    void validate(const ModelConfig& cfg) const {
        if (mlp_keep.size() != cfg.blocks || head_keep.size() != cfg.blocks)
            throw MaskError("pattern block count mismatch");
        for (std::size_t l = 0; l < cfg.blocks; ++l) {
            if (mlp_keep[l].full_dim != cfg.ff_dim || head_keep[l].full_dim != cfg.heads)
                throw MaskError("pattern dimension mismatch");
            mlp_keep[l].validate();
            head_keep[l].validate();
            if (mlp_keep[l].count() != mlp_keep[0].count() ||
                head_keep[l].count() != head_keep[0].count())
                throw MaskError("pattern must retain a uniform count per block");
            if (mlp_keep[l].count() == 0 || head_keep[l].count() == 0)
                throw MaskError("pattern must retain at least one channel and head");
        }
    }

    static SparsityPattern full(const ModelConfig& cfg) {
        SparsityPattern p;
        for (std::size_t l = 0; l < cfg.blocks; ++l) {
            p.mlp_keep.push_back(ChannelIndexSet::all(cfg.ff_dim));
            p.head_keep.push_back(ChannelIndexSet::all(cfg.heads));
        }
        return p;
    }
};

// Expands retained heads to the retained rows/columns they own in the
// dim-wide attention projections (d_head coupled channels per head).
inline ChannelIndexSet expand_heads(const ChannelIndexSet& heads, std::size_t head_dim) {
    std::vector<std::size_t> idx;
    idx.reserve(heads.count() * head_dim);
    for (std::size_t h : heads.retained)
        for (std::size_t d = 0; d < head_dim; ++d) idx.push_back(h * head_dim + d);
    return ChannelIndexSet(std::move(idx), heads.full_dim * head_dim);
}

struct HiddenState {
    Matrix x;  // seq_len x dim
};

using VisualFeatures = Matrix;  // vis_tokens x dim

// Receives each block's post-activation MLP intermediate (the tensor feeding
// w_down) plus per-head squared-L2 features of the attention intermediate.
// Widths match the pattern in effect; dense passes deliver full width.
// head_feats has one slot per head; pruned heads read 0.
using TapSink = std::function<void(std::size_t block, const Matrix& mlp_intermediate,
                                   const std::vector<float>& head_feats)>;

class Model {
  public:
    explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
        cfg_.validate();
        std::mt19937 rng(static_cast<std::uint32_t>(cfg_.seed));
        encoder_ = random_matrix(rng, cfg_.dim, cfg_.vis_dim, Layout::RowMajor, cfg_.vis_dim);
        context_ = Matrix(cfg_.seq_len - cfg_.vis_tokens, cfg_.dim, Layout::RowMajor);
        {
            std::normal_distribution<float> unit(0.0f, 1.0f);
            for (std::size_t i = 0; i < context_.size(); ++i) context_.data()[i] = unit(rng);
        }
        blocks_.reserve(cfg_.blocks);
        for (std::size_t l = 0; l < cfg_.blocks; ++l) {
            BlockWeights b;
            b.w_q = random_matrix(rng, cfg_.dim, cfg_.dim, Layout::RowMajor, cfg_.dim);
            b.w_k = random_matrix(rng, cfg_.dim, cfg_.dim, Layout::RowMajor, cfg_.dim);
            b.w_v = random_matrix(rng, cfg_.dim, cfg_.dim, Layout::RowMajor, cfg_.dim);
            b.w_out = random_matrix(rng, cfg_.dim, cfg_.dim, Layout::ColMajor, cfg_.dim);
            b.w_gate = random_matrix(rng, cfg_.ff_dim, cfg_.dim, Layout::RowMajor, cfg_.dim);
            b.w_up = random_matrix(rng, cfg_.ff_dim, cfg_.dim, Layout::RowMajor, cfg_.dim);
            b.w_down = random_matrix(rng, cfg_.dim, cfg_.ff_dim, Layout::ColMajor, cfg_.ff_dim);
            blocks_.push_back(std::move(b));
        }
        expert_in_ = random_matrix(rng, cfg_.expert_width, cfg_.dim, Layout::RowMajor, cfg_.dim);
        expert_out_ = random_matrix(rng, cfg_.expert_width, cfg_.expert_width, Layout::RowMajor,
                                    cfg_.expert_width);
    }

    const ModelConfig& config() const { return cfg_; }
    const std::vector<BlockWeights>& blocks() const { return blocks_; }
    std::vector<BlockWeights>& mutable_blocks() { return blocks_; }

    // Stub visual encoder: fixed seeded linear map per token, then layernorm.
    VisualFeatures encode_observation(const Matrix& obs) const {
        if (obs.rows() != cfg_.vis_tokens || obs.cols() != cfg_.vis_dim)
            throw ShapeError("encode_observation: expected vis_tokens x vis_dim frame");
        if (!obs.all_finite()) throw InputError("encode_observation: non-finite observation");
        return layernorm(sparse_linear(obs, encoder_, ChannelIndexSet::all(cfg_.dim)), cfg_.ln_eps);
    }

    // Visual tokens occupy the first rows; the remainder is a fixed seeded
    // context bank standing in for non-visual tokens.
    HiddenState make_hidden(const VisualFeatures& feats) const {
        if (feats.rows() != cfg_.vis_tokens || feats.cols() != cfg_.dim)
            throw ShapeError("make_hidden: features must be vis_tokens x dim");
        Matrix x(cfg_.seq_len, cfg_.dim, Layout::RowMajor);
        for (std::size_t i = 0; i < cfg_.vis_tokens; ++i)
            for (std::size_t j = 0; j < cfg_.dim; ++j) x.at(i, j) = feats.at(i, j);
        for (std::size_t i = cfg_.vis_tokens; i < cfg_.seq_len; ++i)
            for (std::size_t j = 0; j < cfg_.dim; ++j)
                x.at(i, j) = context_.at(i - cfg_.vis_tokens, j);
        return HiddenState{std::move(x)};
    }

    // Residual backbone. pattern == nullptr runs the dense path; otherwise
    // mlp_keep prunes gate/up output channels and down input channels, and
    // head_keep prunes q/k/v output heads and w_out input heads.
    HiddenState backbone_forward(HiddenState h, const SparsityPattern* pattern,
                                 const TapSink& tap = nullptr) const {
        if (h.x.rows() != cfg_.seq_len || h.x.cols() != cfg_.dim)
            throw ShapeError("backbone_forward: hidden state must be seq_len x dim");
        if (pattern != nullptr) pattern->validate(cfg_);
        const ChannelIndexSet full_heads = ChannelIndexSet::all(cfg_.heads);
        const ChannelIndexSet full_mlp = ChannelIndexSet::all(cfg_.ff_dim);
        std::vector<float> head_feats;

        for (std::size_t l = 0; l < cfg_.blocks; ++l) {
            const BlockWeights& b = blocks_[l];
            const ChannelIndexSet& heads = pattern ? pattern->head_keep[l] : full_heads;
            const ChannelIndexSet& mlp = pattern ? pattern->mlp_keep[l] : full_mlp;
            const ChannelIndexSet head_channels = expand_heads(heads, cfg_.head_dim);

            // Attention sublayer.
            {
                const Matrix x_ln = layernorm(h.x, cfg_.ln_eps);
                const Matrix q = sparse_linear(x_ln, b.w_q, head_channels);
                const Matrix k = sparse_linear(x_ln, b.w_k, head_channels);
                const Matrix v = sparse_linear(x_ln, b.w_v, head_channels);
                const Matrix attn = attention(q, k, v, heads.count());
                if (tap) head_feats = head_features(attn, heads);
                const Matrix proj = sparse_linear_colmajor(attn, b.w_out, head_channels);
                add_inplace(h.x, proj);
            }
            ensure_finite(h.x, l);

            // Gated MLP sublayer; the fused intermediate is this sublayer's
            // tap point (the tensor feeding w_down).
            {
                const Matrix x_ln = layernorm(h.x, cfg_.ln_eps);
                const Matrix inter = fused_gated_mlp(x_ln, b.w_gate, b.w_up, mlp);
                if (tap) tap(l, inter, head_feats);
                const Matrix proj = sparse_linear_colmajor(inter, b.w_down, mlp);
                add_inplace(h.x, proj);
            }
            ensure_finite(h.x, l);
        }
        return h;
    }

    // Lightweight action expert: two bias-free linear layers with a silu
    // bottleneck over the mean-pooled hidden state.
    std::vector<float> action_expert_forward(const HiddenState& h) const {
        if (h.x.cols() != cfg_.dim) throw ShapeError("action_expert_forward: width mismatch");
        Matrix pooled(1, cfg_.dim, Layout::RowMajor);
        const float inv = 1.0f / static_cast<float>(h.x.rows());
        for (std::size_t j = 0; j < cfg_.dim; ++j) {
            float acc = 0.0f;
            for (std::size_t i = 0; i < h.x.rows(); ++i) acc += h.x.at(i, j);
            pooled.at(0, j) = acc * inv;
        }
        const Matrix hidden =
            sparse_linear(pooled, expert_in_, ChannelIndexSet::all(cfg_.expert_width));
        Matrix act(1, cfg_.expert_width, Layout::RowMajor);
        for (std::size_t j = 0; j < cfg_.expert_width; ++j) act.at(0, j) = silu(hidden.at(0, j));
        const Matrix out =
            sparse_linear(act, expert_out_, ChannelIndexSet::all(cfg_.expert_width));
        std::vector<float> action(cfg_.expert_width);
        for (std::size_t j = 0; j < cfg_.expert_width; ++j) action[j] = out.at(0, j);
        return action;
    }

    // Iterates every weight tensor in a stable order; used by the cache
    // builder and the weight dump/load round trip.
    template <typename Fn>
    void for_each_tensor(Fn&& fn) const {
        fn("encoder", encoder_);
        fn("context", context_);
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            fn(p + "w_q", blocks_[l].w_q);
            fn(p + "w_k", blocks_[l].w_k);
            fn(p + "w_v", blocks_[l].w_v);
            fn(p + "w_out", blocks_[l].w_out);
            fn(p + "w_gate", blocks_[l].w_gate);
            fn(p + "w_up", blocks_[l].w_up);
            fn(p + "w_down", blocks_[l].w_down);
        }
        fn("expert_in", expert_in_);
        fn("expert_out", expert_out_);
    }

    template <typename Fn>
    void for_each_tensor_mut(Fn&& fn) {
        fn("encoder", encoder_);
        fn("context", context_);
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const std::string p = "block" + std::to_string(l) + ".";
            fn(p + "w_q", blocks_[l].w_q);
            fn(p + "w_k", blocks_[l].w_k);
            fn(p + "w_v", blocks_[l].w_v);
            fn(p + "w_out", blocks_[l].w_out);
            fn(p + "w_gate", blocks_[l].w_gate);
            fn(p + "w_up", blocks_[l].w_up);
            fn(p + "w_down", blocks_[l].w_down);
        }
        fn("expert_in", expert_in_);
        fn("expert_out", expert_out_);
    }

  private:
    static Matrix random_matrix(std::mt19937& rng, std::size_t rows, std::size_t cols,
                                Layout layout, std::size_t fan_in) {
        Matrix m(rows, cols, layout);
        std::normal_distribution<float> dist(0.0f, 1.0f / std::sqrt(static_cast<float>(fan_in)));
        // Fill in logical (i,j) order so the draw sequence is layout-independent.
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) m.at(i, j) = dist(rng);
        return m;
    }

    static void add_inplace(Matrix& x, const Matrix& delta) {
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) x.at(i, j) += delta.at(i, j);
    }

    static void ensure_finite(const Matrix& x, std::size_t block) {
        if (!x.all_finite())
            throw StateError("non-finite hidden state after block " + std::to_string(block));
    }

    // Packed multi-head attention over the retained heads. q/k/v are
    // S x (n_heads * head_dim) with heads laid out contiguously.
    Matrix attention(const Matrix& q, const Matrix& k, const Matrix& v,
                     std::size_t n_heads) const {
        const std::size_t S = q.rows();
        const std::size_t hd = cfg_.head_dim;
        const float scale = 1.0f / std::sqrt(static_cast<float>(hd));
        Matrix out(S, n_heads * hd, Layout::RowMajor);
        std::vector<float> scores(S);
        for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < S; ++i) {
                const float* qi = q.row_ptr(i) + off;
                float maxv = -std::numeric_limits<float>::infinity();
                for (std::size_t j = 0; j < S; ++j) {
                    scores[j] = detail::dot_seq(qi, k.row_ptr(j) + off, hd) * scale;
                    maxv = std::max(maxv, scores[j]);
                }
                float denom = 0.0f;
                for (std::size_t j = 0; j < S; ++j) {
                    scores[j] = std::exp(scores[j] - maxv);
                    denom += scores[j];
                }
                const float inv = 1.0f / denom;
                float* orow = out.row_ptr(i) + off;
                for (std::size_t d = 0; d < hd; ++d) orow[d] = 0.0f;
                for (std::size_t j = 0; j < S; ++j) {
                    const float p = scores[j] * inv;
                    const float* vr = v.row_ptr(j) + off;
                    for (std::size_t d = 0; d < hd; ++d) orow[d] = std::fmaf(p, vr[d], orow[d]);
                }
            }
        }
        return out;
    }

    // Squared L2 of each retained head's attention intermediate over the
    // sequence and intra-head dims; one feature slot per head.
    std::vector<float> head_features(const Matrix& attn, const ChannelIndexSet& heads) const {
        std::vector<float> feats(cfg_.heads, 0.0f);
        for (std::size_t hi = 0; hi < heads.count(); ++hi) {
            const std::size_t off = hi * cfg_.head_dim;
            double acc = 0.0;
            for (std::size_t i = 0; i < attn.rows(); ++i) {
                const float* row = attn.row_ptr(i) + off;
                for (std::size_t d = 0; d < cfg_.head_dim; ++d)
                    acc += static_cast<double>(row[d]) * static_cast<double>(row[d]);
            }
            feats[heads.retained[hi]] = static_cast<float>(acc);
        }
        return feats;
    }

    ModelConfig cfg_;
    Matrix encoder_;  // dim x vis_dim
    Matrix context_;  // (seq_len - vis_tokens) x dim
    std::vector<BlockWeights> blocks_;
    Matrix expert_in_;   // expert_width x dim
    Matrix expert_out_;  // expert_width x expert_width
};

}  // namespace ecovla
