// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0
//
// Brute-force reference implementations used as independent oracles. These
// deliberately avoid the library's kernels and loop structures so that a bug
// cannot cancel out of both sides of a comparison.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <vector>

#include "mustdrop/matrix.hpp"
#include "mustdrop/multimodal_sequence.hpp"
#include "mustdrop/rng.hpp"
#include "mustdrop/token_grid.hpp"

namespace oracles {

using mustdrop::Matrix;

inline Matrix random_matrix(mustdrop::SeededSource& src, std::size_t rows,
                            std::size_t cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (double& x : m.data()) x = src.next_uniform() * scale;
    return m;
}

/// Triple loop in j-outer order (the library uses k-outer).
inline Matrix matmul_reference(const Matrix& a, const Matrix& b) {
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) acc += a.at(i, k) * b.at(k, j);
            out.at(i, j) = acc;
        }
    }
    return out;
}

/// Direct single-pass evaluation of softmax(q k^T / sqrt(d)) v, no max
/// subtraction, no shared helpers.
struct AttentionReference {
    Matrix output;
    Matrix attn;
};

inline AttentionReference attention_reference(const Matrix& q, const Matrix& k,
                                              const Matrix& v) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
    AttentionReference ref{Matrix(q.rows(), v.cols()), Matrix(q.rows(), k.rows())};
    for (std::size_t i = 0; i < q.rows(); ++i) {
        double denom = 0.0;
        std::vector<double> numer(k.rows());
        for (std::size_t j = 0; j < k.rows(); ++j) {
            double logit = 0.0;
            for (std::size_t c = 0; c < q.cols(); ++c) logit += q.at(i, c) * k.at(j, c);
            numer[j] = std::exp(logit * scale);
            denom += numer[j];
        }
        for (std::size_t j = 0; j < k.rows(); ++j) {
            ref.attn.at(i, j) = numer[j] / denom;
            for (std::size_t c = 0; c < v.cols(); ++c) {
                ref.output.at(i, c) += ref.attn.at(i, j) * v.at(j, c);
            }
        }
    }
    return ref;
}

/// Pairwise cosine loop for one window.
inline double window_similarity_reference(const std::vector<std::vector<double>>& embs) {
    auto cosine = [](const std::vector<double>& a, const std::vector<double>& b) {
        double ab = 0.0, aa = 0.0, bb = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        return ab / (std::sqrt(aa) * std::sqrt(bb));
    };
    double sum = 0.0;
    for (std::size_t m = 0; m < embs.size(); ++m)
        for (std::size_t n = 0; n < embs.size(); ++n)
            if (m != n) sum += cosine(embs[m], embs[n]);
    return sum;
}

/// Independent set-algebra evaluation of the dual-attention filter: D from
/// the column sums, confirmation from per-column maxima, key members spared.
inline std::set<int> dual_filter_reference(const Matrix& attn,
                                           const mustdrop::MultimodalSequence& seq,
                                           const std::set<int>& key_members,
                                           double gamma, double alpha,
                                           bool spare_keys) {
    std::vector<std::size_t> text_rows, vision_cols;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq.entries[i].modality == mustdrop::Modality::text) text_rows.push_back(i);
        else vision_cols.push_back(i);
    }
    std::map<int, double> v_scores;
    double total = 0.0;
    for (std::size_t j : vision_cols) {
        double s = 0.0;
        for (std::size_t i : text_rows) s += attn.at(i, j);
        v_scores[seq.entries[j].id] = s;
        total += s;
    }
    std::set<int> pruned;
    for (std::size_t j : vision_cols) {
        const int id = seq.entries[j].id;
        if (v_scores[id] > gamma * total) continue;  // not in D
        double best = 0.0;
        for (std::size_t i : text_rows) best = std::max(best, attn.at(i, j));
        if (best >= alpha) continue;  // rescued by individual attention
        if (spare_keys && key_members.count(id) > 0) continue;
        pruned.insert(id);
    }
    return pruned;
}

/// Re-runs Local Spatial Merging decisions from scratch on raw embeddings:
/// row-major k x k tiles, pair-sum similarity, mean threshold. Returns the
/// surviving token count.
inline std::size_t lsm_survivors_reference(const mustdrop::TokenGrid& grid,
                                           std::size_t k, double tau_mean) {
    const std::size_t rows = grid.grid_rows, cols = grid.grid_cols;
    std::size_t survivors = 0;
    for (std::size_t tr = 0; tr < rows; tr += k) {
        for (std::size_t tc = 0; tc < cols; tc += k) {
            std::vector<std::vector<double>> embs;
            for (std::size_t r = tr; r < std::min(tr + k, rows); ++r)
                for (std::size_t c = tc; c < std::min(tc + k, cols); ++c)
                    embs.push_back(grid.tokens[r * cols + c].embedding);
            if (embs.size() < 2) {
                survivors += embs.size();
                continue;
            }
            const double s = window_similarity_reference(embs);
            const double tau = tau_mean * static_cast<double>(embs.size()) *
                               static_cast<double>(embs.size() - 1);
            survivors += (s > tau) ? 1 : embs.size();
        }
    }
    return survivors;
}

}  // namespace oracles
