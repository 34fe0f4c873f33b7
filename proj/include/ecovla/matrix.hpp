#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "ecovla/errors.hpp"
#include "ecovla/instrumentation.hpp"

namespace ecovla {

enum class Layout { RowMajor, ColMajor };

// Dense 32-bit float matrix with explicit storage layout. Element (i,j) is
// addressable under either layout; conversions reorder the buffer and
// preserve values exactly.
class Matrix {
  public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols, Layout layout = Layout::RowMajor)
        : rows_(rows), cols_(cols), layout_(layout), data_(rows * cols, 0.0f) {
        AllocationProbe::note(rows, cols);
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<float>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Matrix m(r, c);
        std::size_t i = 0;
        for (const auto& row : rows) {
            if (row.size() != c) throw ShapeError("ragged initializer rows");
            std::size_t j = 0;
            for (float v : row) m.at(i, j++) = v;
            ++i;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    Layout layout() const { return layout_; }

    float& at(std::size_t i, std::size_t j) { return data_[index(i, j)]; }
    float at(std::size_t i, std::size_t j) const { return data_[index(i, j)]; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    std::span<const float> values() const { return {data_.data(), data_.size()}; }

    // Contiguous row i; only meaningful under RowMajor.
    float* row_ptr(std::size_t i) {
        if (layout_ != Layout::RowMajor) throw LayoutError("row_ptr requires RowMajor");
        return data_.data() + i * cols_;
    }
    const float* row_ptr(std::size_t i) const {
        if (layout_ != Layout::RowMajor) throw LayoutError("row_ptr requires RowMajor");
        return data_.data() + i * cols_;
    }

    // Contiguous column j; only meaningful under ColMajor.
    const float* col_ptr(std::size_t j) const {
        if (layout_ != Layout::ColMajor) throw LayoutError("col_ptr requires ColMajor");
        return data_.data() + j * rows_;
    }

    Matrix to_layout(Layout target) const {
        if (target == layout_) return *this;
        Matrix out(rows_, cols_, target);
        for (std::size_t i = 0; i < rows_; ++i)
            for (std::size_t j = 0; j < cols_; ++j) out.at(i, j) = at(i, j);
        return out;
    }

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

    bool all_finite() const {
        for (float v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

  private:
    std::size_t index(std::size_t i, std::size_t j) const {
        return layout_ == Layout::RowMajor ? i * cols_ + j : j * rows_ + i;
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Layout layout_ = Layout::RowMajor;
    std::vector<float> data_;
};

// a x b with a fixed summation order: every output element accumulates over
// the contraction axis sequentially (k ascending, fused multiply-add), so
// results are bitwise reproducible and other kernels can match them exactly.
// Output is RowMajor.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: a.cols != b.rows");
    const std::size_t m = a.rows(), k_dim = a.cols(), n = b.cols();
    Matrix out(m, n, Layout::RowMajor);
    if (n == 0 || m == 0) return out;

    if (b.layout() == Layout::RowMajor) {
        // i-k-j: the inner loop runs over independent output accumulators, so
        // vectorizing it never reorders a single element's sum.
        for (std::size_t i = 0; i < m; ++i) {
            float* acc = out.row_ptr(i);
            for (std::size_t k = 0; k < k_dim; ++k) {
                const float aik = a.at(i, k);
                const float* brow = b.row_ptr(k);
                for (std::size_t j = 0; j < n; ++j) acc[j] = std::fmaf(aik, brow[j], acc[j]);
            }
        }
    } else {
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                const float* bcol = b.col_ptr(j);
                float acc = 0.0f;
                for (std::size_t k = 0; k < k_dim; ++k) acc = std::fmaf(a.at(i, k), bcol[k], acc);
                out.at(i, j) = acc;
            }
    }
    return out;
}

// Per-row standardization: zero mean, unit variance up to eps; no learned
// affine terms. A constant row maps to the zero row.
inline Matrix layernorm(const Matrix& x, float eps) {
    if (!(eps > 0.0f)) throw ConfigError("layernorm: eps must be > 0");
    Matrix out(x.rows(), x.cols(), Layout::RowMajor);
    const std::size_t n = x.cols();
    if (n == 0) return out;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        float sum = 0.0f;
        for (std::size_t j = 0; j < n; ++j) sum += x.at(i, j);
        const float mean = sum / static_cast<float>(n);
        float var = 0.0f;
        for (std::size_t j = 0; j < n; ++j) {
            const float d = x.at(i, j) - mean;
            var = std::fmaf(d, d, var);
        }
        var /= static_cast<float>(n);
        const float inv = 1.0f / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) = (x.at(i, j) - mean) * inv;
    }
    return out;
}

}  // namespace ecovla
