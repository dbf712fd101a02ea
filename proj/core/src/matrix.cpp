// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/matrix.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "mustdrop/errors.hpp"

namespace mustdrop {

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
        throw ShapeError("matrix data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
    }
}

std::vector<double> Matrix::row_copy(std::size_t r) const {
    auto s = row(r);
    return {s.begin(), s.end()};
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
    Matrix out(indices.size(), cols_);
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = row(indices[i]);
        auto dst = out.row(i);
        std::copy(src.begin(), src.end(), dst.begin());
    }
    return out;
}

Matrix Matrix::transposed() const {
    Matrix out(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) out.at(c, r) = at(r, c);
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul shape mismatch: " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " * " + std::to_string(b.rows()) +
                         "x" + std::to_string(b.cols()));
    }
    Matrix out(a.rows(), b.cols());
    // i-k-j loop order; accumulation order over k is part of the defined
    // behaviour (bit-exact reproducibility).
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) continue;
            const auto brow = b.row(k);
            auto orow = out.row(i);
            for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix row_softmax(const Matrix& m, const Matrix* mask) {
    if (mask != nullptr && !mask->same_shape(m)) {
        throw ShapeError("softmax mask shape mismatch");
    }
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        double maxv = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < m.cols(); ++c) {
            if (mask != nullptr && mask->at(r, c) == 0.0) continue;
            maxv = std::max(maxv, m.at(r, c));
        }
        if (maxv == -std::numeric_limits<double>::infinity()) {
            throw DegenerateRowError("softmax row " + std::to_string(r) +
                                     " is fully masked");
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < m.cols(); ++c) {
            if (mask != nullptr && mask->at(r, c) == 0.0) {
                out.at(r, c) = 0.0;
                continue;
            }
            const double e = std::exp(m.at(r, c) - maxv);
            out.at(r, c) = e;
            sum += e;
        }
        for (std::size_t c = 0; c < m.cols(); ++c) {
            if (mask != nullptr && mask->at(r, c) == 0.0) continue;
            out.at(r, c) /= sum;
        }
    }
    return out;
}

AttentionResult scaled_attention(const Matrix& q, const Matrix& k, const Matrix& v,
                                 const Matrix* mask) {
    if (q.cols() != k.cols()) throw ShapeError("attention: q/k feature dims differ");
    if (v.rows() != k.rows()) throw ShapeError("attention: k/v row counts differ");
    const double scale = 1.0 / std::sqrt(static_cast<double>(k.cols()));
    Matrix logits = matmul(q, k.transposed());
    for (double& x : logits.data()) x *= scale;
    Matrix attn = row_softmax(logits, mask);
    Matrix output = matmul(attn, v);
    return {std::move(output), std::move(attn)};
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw SimilarityError("cosine: vector lengths differ");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw SimilarityError("cosine similarity undefined for a zero vector");
    }
    return dot(a, b) / (na * nb);
}

}  // namespace mustdrop
