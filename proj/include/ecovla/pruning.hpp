#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <span>
#include <vector>

#include "ecovla/errors.hpp"
#include "ecovla/instrumentation.hpp"
#include "ecovla/matrix.hpp"
#include "ecovla/model.hpp"

namespace ecovla {

struct EapConfig {
    std::size_t window = 10;            // T, trigger context length
    double p = 80.0;                    // quantile percent, (0,100); higher = more triggers
    double alpha = 0.7;                 // temporal inertia of the fused feature, [0,1)
    double lambda = 0.9;                // EMA momentum of the history update, [0,1)
    double ratio = 0.25;                // pruning ratio, [0,1)
    std::size_t calib_frames = 32;
    bool head_pruning = false;
    std::size_t refractory_frames = 0;  // suppress triggers for this many frames after one; 0 = off

    void validate() const {
        if (window < 2) throw ConfigError("window must be >= 2");
        if (!(p > 0.0 && p < 100.0)) throw ConfigError("p must lie in (0, 100)");
        if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");
        if (!(lambda >= 0.0 && lambda < 1.0)) throw ConfigError("lambda must lie in [0, 1)");
        if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("ratio must lie in [0, 1)");
        if (calib_frames < 1) throw ConfigError("calib_frames must be >= 1");
    }
};

// Fixed-capacity FIFO of the last T similarity scores.
class SimilarityWindow {
  public:
    explicit SimilarityWindow(std::size_t capacity) : capacity_(capacity) {
        if (capacity < 2) throw ConfigError("window capacity must be >= 2");
    }

    void push(float s) {
        if (!(s >= -1.0f && s <= 1.0f)) throw InputError("similarity outside [-1, 1]");
        if (buf_.size() == capacity_) buf_.pop_front();
        buf_.push_back(s);
    }

    bool full() const { return buf_.size() == capacity_; }
    std::size_t size() const { return buf_.size(); }
    std::size_t capacity() const { return capacity_; }
    const std::deque<float>& scores() const { return buf_; }

  private:
    std::size_t capacity_;
    std::deque<float> buf_;
};

inline void push_similarity(SimilarityWindow& win, float s) { win.push(s); }

// Average token-wise cosine similarity between consecutive feature matrices.
// Zero-norm rows contribute similarity 0.
inline float visual_similarity(const Matrix& f_t, const Matrix& f_prev) {
    if (!f_t.same_shape(f_prev)) throw ShapeError("visual_similarity: shape mismatch");
    const std::size_t n = f_t.rows(), d = f_t.cols();
    if (n == 0) throw ShapeError("visual_similarity: empty features");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double a = f_t.at(i, j);
            const double b = f_prev.at(i, j);
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if (na > 0.0 && nb > 0.0) acc += dot / (std::sqrt(na) * std::sqrt(nb));
    }
    counters().flop_ops += static_cast<std::uint64_t>(6 * n * d + 5 * n + 1);
    const double mean = acc / static_cast<double>(n);
    return static_cast<float>(std::clamp(mean, -1.0, 1.0));
}

// Streaming variant that reuses the previous frame's cached row norms and
// emits this frame's, keeping the per-frame cost within the 5ND budget.
inline float visual_similarity_cached(const Matrix& f_t, const Matrix& f_prev,
                                      const std::vector<double>& prev_norms,
                                      std::vector<double>& out_norms) {
    if (!f_t.same_shape(f_prev)) throw ShapeError("visual_similarity: shape mismatch");
    const std::size_t n = f_t.rows(), d = f_t.cols();
    if (prev_norms.size() != n) throw StateError("visual_similarity: stale norm cache");
    out_norms.resize(n);
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double dot = 0.0, na = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double a = f_t.at(i, j);
            dot += a * f_prev.at(i, j);
            na += a * a;
        }
        const double norm_t = std::sqrt(na);
        out_norms[i] = norm_t;
        if (norm_t > 0.0 && prev_norms[i] > 0.0) acc += dot / (norm_t * prev_norms[i]);
    }
    counters().flop_ops += static_cast<std::uint64_t>(4 * n * d + 4 * n + 1);
    return static_cast<float>(std::clamp(acc / static_cast<double>(n), -1.0, 1.0));
}

inline std::vector<double> feature_row_norms(const Matrix& f) {
    std::vector<double> norms(f.rows());
    for (std::size_t i = 0; i < f.rows(); ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < f.cols(); ++j) {
            const double a = f.at(i, j);
            acc += a * a;
        }
        norms[i] = std::sqrt(acc);
    }
    counters().flop_ops += static_cast<std::uint64_t>(2 * f.rows() * f.cols() + f.rows());
    return norms;
}

// Nearest-rank quantile of the window: sorted ascending, element at index
// ceil(p/100 * T) - 1.
inline float window_quantile(const SimilarityWindow& win, double p) {
    if (!(p > 0.0 && p < 100.0)) throw ConfigError("p must lie in (0, 100)");
    std::vector<float> sorted(win.scores().begin(), win.scores().end());
    std::sort(sorted.begin(), sorted.end());
    const double rank_real = p * static_cast<double>(sorted.size()) / 100.0;
    std::size_t rank = static_cast<std::size_t>(std::ceil(rank_real));
    rank = std::clamp<std::size_t>(rank, 1, sorted.size());
    return sorted[rank - 1];
}

// Trigger rule: update when the current similarity drops strictly below the
// p-th quantile of the window. The window must be full; warmup frames must
// not call this.
inline bool should_update(const SimilarityWindow& win, float s_t, double p) {
    if (!win.full()) throw StateError("should_update: window not yet full");
    return s_t < window_quantile(win, p);
}

// Instantaneous per-channel feature: squared L2 of each activation column
// over the sequence dimension.
inline std::vector<float> instantaneous_features(const Matrix& x_int) {
    const std::size_t S = x_int.rows(), C = x_int.cols();
    std::vector<float> eps(C, 0.0f);
    for (std::size_t i = 0; i < S; ++i)
        for (std::size_t k = 0; k < C; ++k) {
            const float v = x_int.at(i, k);
            eps[k] = std::fmaf(v, v, eps[k]);
        }
    counters().flop_ops += static_cast<std::uint64_t>(2 * S * C);
    return eps;
}

// Fused feature: alpha * history + (1 - alpha) * instantaneous.
inline std::vector<float> fuse_features(std::span<const float> hist, std::span<const float> eps,
                                        double alpha) {
    if (hist.size() != eps.size()) throw ShapeError("fuse_features: length mismatch");
    const float a = static_cast<float>(alpha);
    const float b = 1.0f - a;
    std::vector<float> fused(hist.size());
    for (std::size_t k = 0; k < hist.size(); ++k) fused[k] = a * hist[k] + b * eps[k];
    counters().flop_ops += static_cast<std::uint64_t>(3 * hist.size());
    return fused;
}

// EMA history update over full channels: lambda * history + (1 - lambda) * eps.
inline std::vector<float> update_history(std::span<const float> hist, std::span<const float> eps,
                                         double lambda) {
    if (hist.size() != eps.size()) throw ShapeError("update_history: length mismatch");
    const float a = static_cast<float>(lambda);
    const float b = 1.0f - a;
    std::vector<float> next(hist.size());
    for (std::size_t k = 0; k < hist.size(); ++k) next[k] = a * hist[k] + b * eps[k];
    counters().flop_ops += static_cast<std::uint64_t>(3 * hist.size());
    return next;
}

// Pre-computed weight-norm vectors: entry k holds the L2 norm of the
// elementwise-squared k-th input column of the block's final projection.
// Blocks are stacked into one contiguous buffer so the score pass can run
// fused across layers. Built once; weights never change after init.
struct WeightNormCache {
    std::size_t blocks = 0;
    std::size_t width = 0;  // d_ff
    std::size_t heads = 0;
    std::vector<float> mlp;   // blocks * width
    std::vector<float> head;  // blocks * heads

    std::span<const float> mlp_block(std::size_t l) const {
        return {mlp.data() + l * width, width};
    }
    std::span<const float> head_block(std::size_t l) const {
        return {head.data() + l * heads, heads};
    }

    static WeightNormCache build(const Model& model) {
        const ModelConfig& cfg = model.config();
        WeightNormCache c;
        c.blocks = cfg.blocks;
        c.width = cfg.ff_dim;
        c.heads = cfg.heads;
        c.mlp.resize(c.blocks * c.width);
        c.head.resize(c.blocks * c.heads);
        for (std::size_t l = 0; l < cfg.blocks; ++l) {
            const Matrix& w_down = model.blocks()[l].w_down;  // dim x ff_dim, ColMajor
            for (std::size_t k = 0; k < cfg.ff_dim; ++k) {
                const float* col = w_down.col_ptr(k);
                double acc = 0.0;
                for (std::size_t i = 0; i < cfg.dim; ++i) {
                    const double sq = static_cast<double>(col[i]) * col[i];
                    acc += sq * sq;
                }
                c.mlp[l * c.width + k] = static_cast<float>(std::sqrt(acc));
            }
            const Matrix& w_out = model.blocks()[l].w_out;  // dim x dim, ColMajor
            for (std::size_t h = 0; h < cfg.heads; ++h) {
                double acc = 0.0;
                for (std::size_t d = 0; d < cfg.head_dim; ++d) {
                    const float* col = w_out.col_ptr(h * cfg.head_dim + d);
                    for (std::size_t i = 0; i < cfg.dim; ++i) {
                        const double sq = static_cast<double>(col[i]) * col[i];
                        acc += sq * sq;
                    }
                }
                c.head[l * c.heads + h] = static_cast<float>(std::sqrt(acc));
            }
        }
        return c;
    }
};

// Importance score per channel: the L2 norm of { |W[i,k]|^2 * fused[k] }
// over output rows i, computed in factored form fused[k] * cache[k]
// (fused >= 0 lets the factor leave the norm).
inline std::vector<float> importance_scores(std::span<const float> cache,
                                            std::span<const float> fused) {
    if (cache.size() != fused.size()) throw ShapeError("importance_scores: length mismatch");
    std::vector<float> scores(cache.size());
    for (std::size_t k = 0; k < cache.size(); ++k) {
        if (fused[k] < 0.0f) throw StateError("importance_scores: negative fused feature");
        scores[k] = fused[k] * cache[k];
    }
    counters().flop_ops += cache.size();
    counters().kernel_invocations += 1;
    return scores;
}

// Cross-layer batched scores over the stacked L x d_ff buffers: a single
// fused elementwise pass, one kernel invocation instead of L.
inline std::vector<float> batched_scores(std::span<const float> cache_stack,
                                         std::span<const float> fused_stack) {
    if (cache_stack.size() != fused_stack.size())
        throw ShapeError("batched_scores: length mismatch");
    std::vector<float> scores(cache_stack.size());
    for (std::size_t k = 0; k < cache_stack.size(); ++k) {
        if (fused_stack[k] < 0.0f) throw StateError("batched_scores: negative fused feature");
        scores[k] = fused_stack[k] * cache_stack[k];
    }
    counters().flop_ops += cache_stack.size();
    counters().kernel_invocations += 1;
    return scores;
}

// Retained channel count at a pruning ratio.
inline std::size_t retained_count(std::size_t full, double ratio) {
    const auto k = static_cast<long long>(std::llround((1.0 - ratio) * static_cast<double>(full)));
    if (k < 1) throw ConfigError("pruning ratio retains no channels");
    return std::min<std::size_t>(static_cast<std::size_t>(k), full);
}

// Top-k retention, ties broken toward the lower index; result ascending.
inline ChannelIndexSet top_k_retained(std::span<const float> scores, std::size_t k) {
    if (k < 1) throw ConfigError("top_k_retained: k must be >= 1");
    if (k > scores.size()) throw ConfigError("top_k_retained: k exceeds channel count");
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(),
                     [&](std::size_t a, std::size_t b) {
                         if (scores[a] != scores[b]) return scores[a] > scores[b];
                         return a < b;
                     });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return ChannelIndexSet(std::move(idx), scores.size());
}

// Per-block top-k mask selection from score vectors. head_scores may be
// empty when head pruning is off; those blocks retain all heads.
inline SparsityPattern select_mask(const std::vector<std::vector<float>>& mlp_scores,
                                   const std::vector<std::vector<float>>& head_scores,
                                   std::size_t heads, double ratio, bool head_pruning,
                                   std::uint64_t version) {
    if (mlp_scores.empty()) throw ConfigError("select_mask: no score vectors");
    SparsityPattern pattern;
    pattern.version = version;
    const std::size_t k_mlp = retained_count(mlp_scores[0].size(), ratio);
    const std::size_t k_head = head_pruning ? retained_count(heads, ratio) : heads;
    for (std::size_t l = 0; l < mlp_scores.size(); ++l) {
        pattern.mlp_keep.push_back(top_k_retained(mlp_scores[l], k_mlp));
        if (head_pruning) {
            pattern.head_keep.push_back(top_k_retained(head_scores.at(l), k_head));
        } else {
            pattern.head_keep.push_back(ChannelIndexSet::all(heads));
        }
    }
    return pattern;
}

// Worst-case FLOPs of one sparsity update for a single block plus the
// similarity metric: 5ND + 2 S C_in + 3 C_in C_out + 4 C_in.
inline std::uint64_t eap_flops_estimate(std::uint64_t n_tokens, std::uint64_t feat_dim,
                                        std::uint64_t seq_len, std::uint64_t c_in,
                                        std::uint64_t c_out) {
    if (n_tokens == 0 || feat_dim == 0 || seq_len == 0 || c_in == 0 || c_out == 0)
        throw ConfigError("eap_flops_estimate: counts must be > 0");
    return 5 * n_tokens * feat_dim + 2 * seq_len * c_in + 3 * c_in * c_out + 4 * c_in;
}

// Historical features per block plus the update-step counter.
struct ChannelFeatureState {
    std::vector<std::vector<float>> mlp_history;   // per block, length d_ff, non-negative
    std::vector<std::vector<float>> head_history;  // per block, length H
    std::uint64_t step = 0;                        // tau

    void validate() const {
        for (const auto& h : mlp_history)
            for (float v : h)
                if (!(v >= 0.0f) || !std::isfinite(v))
                    throw StateError("history must be finite and non-negative");
    }
};

// Activations captured from a dense (tapped) forward pass, the payload the
// pruning side consumes.
struct FrameActivations {
    std::uint64_t frame = 0;
    VisualFeatures features;                            // N x D
    std::vector<Matrix> mlp_intermediates;              // per block, S x d_ff
    std::vector<std::vector<float>> head_features;      // per block, length H
};

// Mean instantaneous features over a calibration set; initializes the
// history at step 0.
inline ChannelFeatureState calibrate(const Model& model, const std::vector<Matrix>& calib_obs) {
    if (calib_obs.empty()) throw ConfigError("calibrate: empty calibration set");
    const ModelConfig& cfg = model.config();
    std::vector<std::vector<double>> mlp_acc(cfg.blocks, std::vector<double>(cfg.ff_dim, 0.0));
    std::vector<std::vector<double>> head_acc(cfg.blocks, std::vector<double>(cfg.heads, 0.0));
    for (const Matrix& obs : calib_obs) {
        const VisualFeatures feats = model.encode_observation(obs);
        HiddenState h = model.make_hidden(feats);
        model.backbone_forward(std::move(h), nullptr,
                               [&](std::size_t block, const Matrix& inter,
                                   const std::vector<float>& head_feats) {
                                   const std::vector<float> eps = instantaneous_features(inter);
                                   for (std::size_t k = 0; k < eps.size(); ++k)
                                       mlp_acc[block][k] += eps[k];
                                   for (std::size_t hh = 0; hh < head_feats.size(); ++hh)
                                       head_acc[block][hh] += head_feats[hh];
                               });
    }
    ChannelFeatureState state;
    const double inv = 1.0 / static_cast<double>(calib_obs.size());
    for (std::size_t l = 0; l < cfg.blocks; ++l) {
        std::vector<float> m(cfg.ff_dim), hd(cfg.heads);
        for (std::size_t k = 0; k < cfg.ff_dim; ++k)
            m[k] = static_cast<float>(mlp_acc[l][k] * inv);
        for (std::size_t hh = 0; hh < cfg.heads; ++hh)
            hd[hh] = static_cast<float>(head_acc[l][hh] * inv);
        state.mlp_history.push_back(std::move(m));
        state.head_history.push_back(std::move(hd));
    }
    state.step = 0;
    return state;
}

// The full adaptive pruning pipeline: similarity trigger on the observation
// side, feature fusion + scoring + mask selection on the update side.
// Single-writer: observe() belongs to the inference side, compute_update()
// to whichever lane runs pruning.
class AdaptivePruner {
  public:
    AdaptivePruner(const Model& model, const EapConfig& cfg)
        : model_(model), cfg_(cfg), window_(cfg.window), cache_(WeightNormCache::build(model)) {
        cfg_.validate();
    }

    // Initializes history from calibration observations and derives the
    // warmup mask from it (fused feature = initial history). Resets all
    // streaming state, so a pruner can be reused across episodes.
    SparsityPattern calibrate_from(const std::vector<Matrix>& calib_obs) {
        state_ = calibrate(model_, calib_obs);
        calibrated_ = true;
        window_ = SimilarityWindow(cfg_.window);
        has_prev_ = false;
        frames_since_trigger_ = -1;
        return pattern_from_fused(state_.mlp_history, state_.head_history, 0);
    }

    struct Observation {
        float similarity = 1.0f;
        bool trigger = false;
    };

    // Per-frame similarity + trigger decision. The first frame compares the
    // features against themselves. The trigger is evaluated only once the
    // window is full (warmup rule) and respects the refractory hook.
    Observation observe(const VisualFeatures& feats) {
        if (!has_prev_) {
            prev_ = feats;
            prev_norms_ = feature_row_norms(feats);
        }
        Observation obs;
        std::vector<double> norms;
        obs.similarity = visual_similarity_cached(feats, prev_, prev_norms_, norms);
        if (window_.full()) {
            const bool refractory = cfg_.refractory_frames > 0 && frames_since_trigger_ >= 0 &&
                                    static_cast<std::size_t>(frames_since_trigger_) <
                                        cfg_.refractory_frames;
            obs.trigger = !refractory && should_update(window_, obs.similarity, cfg_.p);
        }
        window_.push(obs.similarity);
        prev_ = feats;
        prev_norms_ = std::move(norms);
        has_prev_ = true;
        if (frames_since_trigger_ >= 0) ++frames_since_trigger_;
        if (obs.trigger) frames_since_trigger_ = 0;
        return obs;
    }

    // One sparsity update step from a dense frame's activations. Fuses the
    // instantaneous features with history, advances the EMA, scores through
    // the stacked cache in one batched pass, and selects the new mask.
    SparsityPattern compute_update(const FrameActivations& acts) {
        if (!calibrated_) throw StateError("compute_update: calibrate_from() must run first");
        const ModelConfig& mcfg = model_.config();
        if (acts.mlp_intermediates.size() != mcfg.blocks)
            throw StateError("compute_update: block count mismatch");
        std::vector<std::vector<float>> fused_mlp(mcfg.blocks);
        std::vector<std::vector<float>> fused_head(mcfg.blocks);
        for (std::size_t l = 0; l < mcfg.blocks; ++l) {
            const Matrix& inter = acts.mlp_intermediates[l];
            if (inter.cols() != mcfg.ff_dim)
                throw StateError("compute_update: expected full-width dense activations");
            const std::vector<float> eps = instantaneous_features(inter);
            fused_mlp[l] = fuse_features(state_.mlp_history[l], eps, cfg_.alpha);
            state_.mlp_history[l] = update_history(state_.mlp_history[l], eps, cfg_.lambda);
            if (cfg_.head_pruning) {
                const std::vector<float>& head_eps = acts.head_features.at(l);
                fused_head[l] = fuse_features(state_.head_history[l], head_eps, cfg_.alpha);
                state_.head_history[l] =
                    update_history(state_.head_history[l], head_eps, cfg_.lambda);
            }
        }
        state_.step += 1;
        return pattern_from_fused(fused_mlp, fused_head, state_.step);
    }

    const ChannelFeatureState& state() const { return state_; }
    const WeightNormCache& cache() const { return cache_; }
    const EapConfig& config() const { return cfg_; }
    const SimilarityWindow& window() const { return window_; }

  private:
    SparsityPattern pattern_from_fused(const std::vector<std::vector<float>>& fused_mlp,
                                       const std::vector<std::vector<float>>& fused_head,
                                       std::uint64_t version) const {
        const ModelConfig& mcfg = model_.config();
        // Stack fused features to match the contiguous cache, then score all
        // layers in a single fused pass.
        std::vector<float> fused_stack(mcfg.blocks * mcfg.ff_dim);
        for (std::size_t l = 0; l < mcfg.blocks; ++l)
            std::copy(fused_mlp[l].begin(), fused_mlp[l].end(),
                      fused_stack.begin() + static_cast<std::ptrdiff_t>(l * mcfg.ff_dim));
        const std::vector<float> scores = batched_scores(cache_.mlp, fused_stack);
        std::vector<std::vector<float>> mlp_scores(mcfg.blocks);
        for (std::size_t l = 0; l < mcfg.blocks; ++l)
            mlp_scores[l].assign(scores.begin() + static_cast<std::ptrdiff_t>(l * mcfg.ff_dim),
                                 scores.begin() +
                                     static_cast<std::ptrdiff_t>((l + 1) * mcfg.ff_dim));
        std::vector<std::vector<float>> head_scores(mcfg.blocks);
        if (cfg_.head_pruning) {
            for (std::size_t l = 0; l < mcfg.blocks; ++l)
                head_scores[l] = importance_scores(cache_.head_block(l), fused_head[l]);
        }
        SparsityPattern pattern = select_mask(mlp_scores, head_scores, mcfg.heads, cfg_.ratio,
                                              cfg_.head_pruning, version);
        pattern.validate(mcfg);
        return pattern;
    }

    const Model& model_;
    EapConfig cfg_;
    SimilarityWindow window_;
    WeightNormCache cache_;
    ChannelFeatureState state_;
    bool calibrated_ = false;
    bool has_prev_ = false;
    Matrix prev_;
    std::vector<double> prev_norms_;
    long long frames_since_trigger_ = -1;
};

}  // namespace ecovla
