// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace mustdrop {

/// Dense row-major matrix of 64-bit floats. All kernels in this header are
/// pure and reentrant; there is no shared mutable state.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double& operator()(std::size_t r, std::size_t c) { return at(r, c); }
    double operator()(std::size_t r, std::size_t c) const { return at(r, c); }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<double> row_copy(std::size_t r) const;

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    static Matrix identity(std::size_t n);

    /// Rows of `this` listed in `indices`, in the given order.
    Matrix gather_rows(std::span<const std::size_t> indices) const;

    Matrix transposed() const;

    bool same_shape(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Standard product. Throws ShapeError on a.cols != b.rows.
Matrix matmul(const Matrix& a, const Matrix& b);

/// Row-wise softmax with optional per-entry mask. A mask entry of 0 excludes
/// the position (output exactly 0); any nonzero entry keeps it. Stabilised by
/// subtracting the per-row max over kept entries. Throws DegenerateRowError
/// if a row has no kept entry.
Matrix row_softmax(const Matrix& m, const Matrix* mask = nullptr);

struct AttentionResult {
    Matrix output;  // attn * v
    Matrix attn;    // row_softmax(q k^T / sqrt(d_k))
};

/// Scaled dot-product attention. q, k share the feature dimension d_k and
/// v.rows must equal k.rows. The attention map is returned so callers can
/// extract token scores from it.
AttentionResult scaled_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const Matrix* mask = nullptr);

/// Cosine similarity in [-1, 1]. Throws SimilarityError on a zero vector or
/// length mismatch.
double cosine_sim(std::span<const double> a, std::span<const double> b);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);

}  // namespace mustdrop
