#pragma once

#include <cmath>
#include <cstddef>

#include "ecovla/index_set.hpp"
#include "ecovla/instrumentation.hpp"
#include "ecovla/matrix.hpp"

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#define ECOVLA_HAVE_AVX2 1
#endif

namespace ecovla {

// One silu definition shared by the fused kernel and the unfused reference so
// the two routes perform identical float operations.
inline float silu(float z) { return z / (1.0f + std::exp(-z)); }

namespace detail {

#ifdef ECOVLA_HAVE_AVX2
inline void transpose8x8(__m256 r[8]) {
    __m256 t0 = _mm256_unpacklo_ps(r[0], r[1]);
    __m256 t1 = _mm256_unpackhi_ps(r[0], r[1]);
    __m256 t2 = _mm256_unpacklo_ps(r[2], r[3]);
    __m256 t3 = _mm256_unpackhi_ps(r[2], r[3]);
    __m256 t4 = _mm256_unpacklo_ps(r[4], r[5]);
    __m256 t5 = _mm256_unpackhi_ps(r[4], r[5]);
    __m256 t6 = _mm256_unpacklo_ps(r[6], r[7]);
    __m256 t7 = _mm256_unpackhi_ps(r[6], r[7]);
    __m256 s0 = _mm256_shuffle_ps(t0, t2, _MM_SHUFFLE(1, 0, 1, 0));
    __m256 s1 = _mm256_shuffle_ps(t0, t2, _MM_SHUFFLE(3, 2, 3, 2));
    __m256 s2 = _mm256_shuffle_ps(t1, t3, _MM_SHUFFLE(1, 0, 1, 0));
    __m256 s3 = _mm256_shuffle_ps(t1, t3, _MM_SHUFFLE(3, 2, 3, 2));
    __m256 s4 = _mm256_shuffle_ps(t4, t6, _MM_SHUFFLE(1, 0, 1, 0));
    __m256 s5 = _mm256_shuffle_ps(t4, t6, _MM_SHUFFLE(3, 2, 3, 2));
    __m256 s6 = _mm256_shuffle_ps(t5, t7, _MM_SHUFFLE(1, 0, 1, 0));
    __m256 s7 = _mm256_shuffle_ps(t5, t7, _MM_SHUFFLE(3, 2, 3, 2));
    r[0] = _mm256_permute2f128_ps(s0, s4, 0x20);
    r[1] = _mm256_permute2f128_ps(s1, s5, 0x20);
    r[2] = _mm256_permute2f128_ps(s2, s6, 0x20);
    r[3] = _mm256_permute2f128_ps(s3, s7, 0x20);
    r[4] = _mm256_permute2f128_ps(s0, s4, 0x31);
    r[5] = _mm256_permute2f128_ps(s1, s5, 0x31);
    r[6] = _mm256_permute2f128_ps(s2, s6, 0x31);
    r[7] = _mm256_permute2f128_ps(s3, s7, 0x31);
}
#endif

// Sequential k-ascending dot product; every kernel and oracle in this library
// accumulates output elements with exactly this operation sequence.
inline float dot_seq(const float* a, const float* b, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t k = 0; k < n; ++k) acc = std::fmaf(a[k], b[k], acc);
    return acc;
}

}  // namespace detail

// Gather-free sparse linear transform: out = x * w^T restricted to the
// retained output channels. The kernel indexes rows of w in place; no
// gathered copy of the weights is materialized. Bitwise-identical to the
// dense product followed by column selection (same per-element summation
// order, k ascending).
//   x: S x C_in (RowMajor), w: C_out x C_in (RowMajor), keep over C_out.
inline Matrix sparse_linear(const Matrix& x, const Matrix& w, const ChannelIndexSet& keep) {
    if (w.layout() != Layout::RowMajor)
        throw LayoutError("sparse_linear: w must store output-channel-major rows");
    if (x.layout() != Layout::RowMajor) throw LayoutError("sparse_linear: x must be RowMajor");
    if (x.cols() != w.cols()) throw ShapeError("sparse_linear: x.cols != w.cols");
    if (keep.full_dim != w.rows()) throw MaskError("sparse_linear: keep.full_dim != C_out");
    keep.validate();

    const std::size_t S = x.rows();
    const std::size_t C = x.cols();
    const std::size_t nk = keep.count();
    Matrix out(S, nk, Layout::RowMajor);
    counters().x_traversals += 1;
    if (nk == 0 || S == 0) return out;

    std::size_t j0 = 0;
#ifdef ECOVLA_HAVE_AVX2
    for (; j0 + 8 <= nk; j0 += 8) {
        const float* wr[8];
        for (int l = 0; l < 8; ++l) wr[l] = w.row_ptr(keep.retained[j0 + l]);

        std::size_t s = 0;
        for (; s + 4 <= S; s += 4) {
            const float* x0 = x.row_ptr(s);
            const float* x1 = x.row_ptr(s + 1);
            const float* x2 = x.row_ptr(s + 2);
            const float* x3 = x.row_ptr(s + 3);
            __m256 a0 = _mm256_setzero_ps(), a1 = _mm256_setzero_ps();
            __m256 a2 = _mm256_setzero_ps(), a3 = _mm256_setzero_ps();
            std::size_t k = 0;
            for (; k + 8 <= C; k += 8) {
                __m256 col[8];
                for (int l = 0; l < 8; ++l) col[l] = _mm256_loadu_ps(wr[l] + k);
                detail::transpose8x8(col);
                for (int t = 0; t < 8; ++t) {
                    a0 = _mm256_fmadd_ps(_mm256_set1_ps(x0[k + t]), col[t], a0);
                    a1 = _mm256_fmadd_ps(_mm256_set1_ps(x1[k + t]), col[t], a1);
                    a2 = _mm256_fmadd_ps(_mm256_set1_ps(x2[k + t]), col[t], a2);
                    a3 = _mm256_fmadd_ps(_mm256_set1_ps(x3[k + t]), col[t], a3);
                }
            }
            for (; k < C; ++k) {
                const __m256 wv = _mm256_set_ps(wr[7][k], wr[6][k], wr[5][k], wr[4][k],
                                                wr[3][k], wr[2][k], wr[1][k], wr[0][k]);
                a0 = _mm256_fmadd_ps(_mm256_set1_ps(x0[k]), wv, a0);
                a1 = _mm256_fmadd_ps(_mm256_set1_ps(x1[k]), wv, a1);
                a2 = _mm256_fmadd_ps(_mm256_set1_ps(x2[k]), wv, a2);
                a3 = _mm256_fmadd_ps(_mm256_set1_ps(x3[k]), wv, a3);
            }
            _mm256_storeu_ps(out.row_ptr(s) + j0, a0);
            _mm256_storeu_ps(out.row_ptr(s + 1) + j0, a1);
            _mm256_storeu_ps(out.row_ptr(s + 2) + j0, a2);
            _mm256_storeu_ps(out.row_ptr(s + 3) + j0, a3);
        }
        for (; s < S; ++s) {
            const float* xr = x.row_ptr(s);
            __m256 acc = _mm256_setzero_ps();
            std::size_t k = 0;
            for (; k + 8 <= C; k += 8) {
                __m256 col[8];
                for (int l = 0; l < 8; ++l) col[l] = _mm256_loadu_ps(wr[l] + k);
                detail::transpose8x8(col);
                for (int t = 0; t < 8; ++t)
                    acc = _mm256_fmadd_ps(_mm256_set1_ps(xr[k + t]), col[t], acc);
            }
            for (; k < C; ++k) {
                const __m256 wv = _mm256_set_ps(wr[7][k], wr[6][k], wr[5][k], wr[4][k],
                                                wr[3][k], wr[2][k], wr[1][k], wr[0][k]);
                acc = _mm256_fmadd_ps(_mm256_set1_ps(xr[k]), wv, acc);
            }
            _mm256_storeu_ps(out.row_ptr(s) + j0, acc);
        }
    }
#endif
    for (; j0 < nk; ++j0) {
        const float* wrow = w.row_ptr(keep.retained[j0]);
        for (std::size_t s = 0; s < S; ++s)
            out.at(s, j0) = detail::dot_seq(x.row_ptr(s), wrow, C);
    }
    return out;
}

// Sparse linear transform over retained *input* channels of a column-major
// weight: out = x_compact * w[:, keep]^T. Column-major storage makes each
// retained input channel's weights a contiguous read.
//   x: S x |keep| (RowMajor), w: C_out x C_in (ColMajor), keep over C_in.
inline Matrix sparse_linear_colmajor(const Matrix& x, const Matrix& w,
                                     const ChannelIndexSet& keep) {
    if (w.layout() != Layout::ColMajor)
        throw LayoutError("sparse_linear_colmajor: w must be ColMajor");
    if (x.layout() != Layout::RowMajor)
        throw LayoutError("sparse_linear_colmajor: x must be RowMajor");
    if (keep.full_dim != w.cols()) throw MaskError("sparse_linear_colmajor: keep.full_dim != C_in");
    if (x.cols() != keep.count())
        throw ShapeError("sparse_linear_colmajor: x.cols != |keep|");
    keep.validate();

    const std::size_t S = x.rows();
    const std::size_t C_out = w.rows();
    Matrix out(S, C_out, Layout::RowMajor);
    counters().x_traversals += 1;
    if (S == 0 || C_out == 0) return out;

    for (std::size_t s = 0; s < S; ++s) {
        float* acc = out.row_ptr(s);
        for (std::size_t pos = 0; pos < keep.count(); ++pos) {
            const float xv = x.at(s, pos);
            const float* col = w.col_ptr(keep.retained[pos]);
            for (std::size_t o = 0; o < C_out; ++o) acc[o] = std::fmaf(xv, col[o], acc[o]);
        }
    }
    return out;
}

// Fused gated MLP: silu(x w_gate^T) ⊙ (x w_up^T) over the retained channels,
// computed in a single pass over x. Each x row is read once per output tile
// and feeds both projections; the gate/up intermediates live in registers and
// are never written to a full S x d_ff buffer.
inline Matrix fused_gated_mlp(const Matrix& x, const Matrix& w_gate, const Matrix& w_up,
                              const ChannelIndexSet& keep) {
    if (!w_gate.same_shape(w_up)) throw ShapeError("fused_gated_mlp: gate/up shape mismatch");
    if (w_gate.layout() != Layout::RowMajor || w_up.layout() != Layout::RowMajor)
        throw LayoutError("fused_gated_mlp: weights must be RowMajor");
    if (x.layout() != Layout::RowMajor) throw LayoutError("fused_gated_mlp: x must be RowMajor");
    if (x.cols() != w_gate.cols()) throw ShapeError("fused_gated_mlp: x.cols != w.cols");
    if (keep.full_dim != w_gate.rows()) throw MaskError("fused_gated_mlp: keep.full_dim != d_ff");
    keep.validate();

    const std::size_t S = x.rows();
    const std::size_t C = x.cols();
    const std::size_t nk = keep.count();
    Matrix out(S, nk, Layout::RowMajor);
    counters().x_traversals += 1;
    if (nk == 0 || S == 0) return out;

    std::size_t j0 = 0;
#ifdef ECOVLA_HAVE_AVX2
    for (; j0 + 8 <= nk; j0 += 8) {
        const float* wg[8];
        const float* wu[8];
        for (int l = 0; l < 8; ++l) {
            wg[l] = w_gate.row_ptr(keep.retained[j0 + l]);
            wu[l] = w_up.row_ptr(keep.retained[j0 + l]);
        }
        std::size_t s = 0;
        // Four activation rows per pass; each k tile feeds the gate and up
        // accumulators in two phases so the transposed tiles stay in
        // registers. Per-element sums remain strictly k-ascending.
        for (; s + 4 <= S; s += 4) {
            const float* x0 = x.row_ptr(s);
            const float* x1 = x.row_ptr(s + 1);
            const float* x2 = x.row_ptr(s + 2);
            const float* x3 = x.row_ptr(s + 3);
            __m256 ag0 = _mm256_setzero_ps(), ag1 = _mm256_setzero_ps();
            __m256 ag2 = _mm256_setzero_ps(), ag3 = _mm256_setzero_ps();
            __m256 au0 = _mm256_setzero_ps(), au1 = _mm256_setzero_ps();
            __m256 au2 = _mm256_setzero_ps(), au3 = _mm256_setzero_ps();
            std::size_t k = 0;
            for (; k + 8 <= C; k += 8) {
                __m256 col[8];
                for (int l = 0; l < 8; ++l) col[l] = _mm256_loadu_ps(wg[l] + k);
                detail::transpose8x8(col);
                for (int t = 0; t < 8; ++t) {
                    ag0 = _mm256_fmadd_ps(_mm256_set1_ps(x0[k + t]), col[t], ag0);
                    ag1 = _mm256_fmadd_ps(_mm256_set1_ps(x1[k + t]), col[t], ag1);
                    ag2 = _mm256_fmadd_ps(_mm256_set1_ps(x2[k + t]), col[t], ag2);
                    ag3 = _mm256_fmadd_ps(_mm256_set1_ps(x3[k + t]), col[t], ag3);
                }
                for (int l = 0; l < 8; ++l) col[l] = _mm256_loadu_ps(wu[l] + k);
                detail::transpose8x8(col);
                for (int t = 0; t < 8; ++t) {
                    au0 = _mm256_fmadd_ps(_mm256_set1_ps(x0[k + t]), col[t], au0);
                    au1 = _mm256_fmadd_ps(_mm256_set1_ps(x1[k + t]), col[t], au1);
                    au2 = _mm256_fmadd_ps(_mm256_set1_ps(x2[k + t]), col[t], au2);
                    au3 = _mm256_fmadd_ps(_mm256_set1_ps(x3[k + t]), col[t], au3);
                }
            }
            for (; k < C; ++k) {
                const __m256 gv = _mm256_set_ps(wg[7][k], wg[6][k], wg[5][k], wg[4][k],
                                                wg[3][k], wg[2][k], wg[1][k], wg[0][k]);
                const __m256 uv = _mm256_set_ps(wu[7][k], wu[6][k], wu[5][k], wu[4][k],
                                                wu[3][k], wu[2][k], wu[1][k], wu[0][k]);
                ag0 = _mm256_fmadd_ps(_mm256_set1_ps(x0[k]), gv, ag0);
                ag1 = _mm256_fmadd_ps(_mm256_set1_ps(x1[k]), gv, ag1);
                ag2 = _mm256_fmadd_ps(_mm256_set1_ps(x2[k]), gv, ag2);
                ag3 = _mm256_fmadd_ps(_mm256_set1_ps(x3[k]), gv, ag3);
                au0 = _mm256_fmadd_ps(_mm256_set1_ps(x0[k]), uv, au0);
                au1 = _mm256_fmadd_ps(_mm256_set1_ps(x1[k]), uv, au1);
                au2 = _mm256_fmadd_ps(_mm256_set1_ps(x2[k]), uv, au2);
                au3 = _mm256_fmadd_ps(_mm256_set1_ps(x3[k]), uv, au3);
            }
            const __m256 gate_acc[4] = {ag0, ag1, ag2, ag3};
            const __m256 up_acc[4] = {au0, au1, au2, au3};
            for (int m = 0; m < 4; ++m) {
                alignas(32) float g[8], u[8];
                _mm256_store_ps(g, gate_acc[m]);
                _mm256_store_ps(u, up_acc[m]);
                float* orow = out.row_ptr(s + m) + j0;
                for (int l = 0; l < 8; ++l) orow[l] = silu(g[l]) * u[l];
            }
        }
        for (; s < S; ++s) {
            const float* xr = x.row_ptr(s);
            __m256 ag = _mm256_setzero_ps(), au = _mm256_setzero_ps();
            std::size_t k = 0;
            for (; k + 8 <= C; k += 8) {
                __m256 gcol[8], ucol[8];
                for (int l = 0; l < 8; ++l) {
                    gcol[l] = _mm256_loadu_ps(wg[l] + k);
                    ucol[l] = _mm256_loadu_ps(wu[l] + k);
                }
                detail::transpose8x8(gcol);
                detail::transpose8x8(ucol);
                for (int t = 0; t < 8; ++t) {
                    const __m256 xb = _mm256_set1_ps(xr[k + t]);
                    ag = _mm256_fmadd_ps(xb, gcol[t], ag);
                    au = _mm256_fmadd_ps(xb, ucol[t], au);
                }
            }
            for (; k < C; ++k) {
                const __m256 xb = _mm256_set1_ps(xr[k]);
                const __m256 gv = _mm256_set_ps(wg[7][k], wg[6][k], wg[5][k], wg[4][k],
                                                wg[3][k], wg[2][k], wg[1][k], wg[0][k]);
                const __m256 uv = _mm256_set_ps(wu[7][k], wu[6][k], wu[5][k], wu[4][k],
                                                wu[3][k], wu[2][k], wu[1][k], wu[0][k]);
                ag = _mm256_fmadd_ps(xb, gv, ag);
                au = _mm256_fmadd_ps(xb, uv, au);
            }
            alignas(32) float g[8], u[8];
            _mm256_store_ps(g, ag);
            _mm256_store_ps(u, au);
            float* orow = out.row_ptr(s) + j0;
            for (int l = 0; l < 8; ++l) orow[l] = silu(g[l]) * u[l];
        }
    }
#endif
    for (; j0 < nk; ++j0) {
        const float* grow = w_gate.row_ptr(keep.retained[j0]);
        const float* urow = w_up.row_ptr(keep.retained[j0]);
        for (std::size_t s = 0; s < S; ++s) {
            const float* xr = x.row_ptr(s);
            float g = 0.0f, u = 0.0f;
            for (std::size_t k = 0; k < C; ++k) {
                g = std::fmaf(xr[k], grow[k], g);
                u = std::fmaf(xr[k], urow[k], u);
            }
            out.at(s, j0) = silu(g) * u;
        }
    }
    return out;
}

}  // namespace ecovla
