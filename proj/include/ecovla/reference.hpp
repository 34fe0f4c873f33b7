#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "ecovla/index_set.hpp"
#include "ecovla/kernels.hpp"
#include "ecovla/matrix.hpp"

// Independent reference routes for the claims the optimized kernels make.
// Everything here deliberately takes the straightforward path (materialize,
// full product, select) so a match is evidence, not circularity.

namespace ecovla::reference {

inline Matrix transposed(const Matrix& w) {
    Matrix t(w.cols(), w.rows(), Layout::RowMajor);
    for (std::size_t i = 0; i < w.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) t.at(j, i) = w.at(i, j);
    return t;
}

// Dense product x * w^T followed by output-column selection.
inline Matrix dense_then_select(const Matrix& x, const Matrix& w, const ChannelIndexSet& keep) {
    const Matrix full = matmul(x, transposed(w));
    Matrix out(x.rows(), keep.count(), Layout::RowMajor);
    for (std::size_t s = 0; s < x.rows(); ++s)
        for (std::size_t j = 0; j < keep.count(); ++j)
            out.at(s, j) = full.at(s, keep.retained[j]);
    return out;
}

// Scatters the compact activation back to full input width (zeros elsewhere)
// and runs the dense product against the full weight.
inline Matrix scatter_then_dense(const Matrix& x_compact, const Matrix& w_colmajor,
                                 const ChannelIndexSet& keep) {
    Matrix xf(x_compact.rows(), keep.full_dim, Layout::RowMajor);
    for (std::size_t s = 0; s < x_compact.rows(); ++s)
        for (std::size_t pos = 0; pos < keep.count(); ++pos)
            xf.at(s, keep.retained[pos]) = x_compact.at(s, pos);
    return matmul(xf, transposed(w_colmajor));
}

// Four-step unfused gated MLP: gate projection, up projection, activation,
// elementwise product, with both intermediates materialized.
inline Matrix gated_mlp_unfused(const Matrix& x, const Matrix& w_gate, const Matrix& w_up,
                                const ChannelIndexSet& keep) {
    const Matrix g = sparse_linear(x, w_gate, keep);
    const Matrix u = sparse_linear(x, w_up, keep);
    Matrix out(g.rows(), g.cols(), Layout::RowMajor);
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) out.at(i, j) = silu(g.at(i, j)) * u.at(i, j);
    return out;
}

// Literal elementwise importance score: for channel k, build the set
// { |W[i,k]|^2 * fused[k] } over all output rows i and take its L2 norm.
inline std::vector<float> importance_scores_literal(const Matrix& w_final,
                                                    std::span<const float> fused) {
    std::vector<float> scores(w_final.cols());
    for (std::size_t k = 0; k < w_final.cols(); ++k) {
        double acc = 0.0;
        for (std::size_t i = 0; i < w_final.rows(); ++i) {
            const double wik = w_final.at(i, k);
            const double term = wik * wik * static_cast<double>(fused[k]);
            acc += term * term;
        }
        scores[k] = static_cast<float>(std::sqrt(acc));
    }
    return scores;
}

// Nearest-rank quantile found by scanning sorted order statistics: the
// smallest rank r with r*100 >= p*T. Integer-free of ceil() so it cross
// checks the production formula.
inline float quantile_by_scan(std::vector<float> window, double p) {
    std::sort(window.begin(), window.end());
    const double target = p * static_cast<double>(window.size());
    std::size_t r = 1;
    while (static_cast<double>(r) * 100.0 < target && r < window.size()) ++r;
    return window[r - 1];
}

// Top-k retention by full stable sort on (score desc, index asc).
inline std::vector<std::size_t> top_k_by_sort(std::span<const float> scores, std::size_t k) {
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return a < b;
    });
    idx.resize(std::min(k, idx.size()));
    std::sort(idx.begin(), idx.end());
    return idx;
}

}  // namespace ecovla::reference
