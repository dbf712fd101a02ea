// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/model.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mustdrop/errors.hpp"
#include "mustdrop/rng.hpp"

namespace mustdrop {

namespace {

constexpr double kLayerNormEps = 1e-5;

void fill_matrix(Matrix& m, SeededSource& src, double scale) {
    for (double& x : m.data()) x = src.next_uniform() * scale;
}

void fill_vector(std::vector<double>& v, SeededSource& src, double scale) {
    for (double& x : v) x = src.next_uniform() * scale;
}

}  // namespace

void ToyConfig::validate() const {
    if (encoder_layers == 0 || lm_layers == 0 || hidden_dim == 0 || num_heads == 0 ||
        ffn_dim == 0 || grid_side == 0 || text_len == 0 || patch_dim == 0) {
        throw ConfigError("toy config: all counts must be >= 1");
    }
    if (hidden_dim % num_heads != 0) {
        throw ConfigError("toy config: hidden_dim not divisible by num_heads");
    }
    if (vocab_size < 16) throw ConfigError("toy config: vocab_size must be >= 16");
}

std::vector<double> ToyWeights::embed_token(int token_id) const {
    if (token_id < 0 || static_cast<std::size_t>(token_id) >= config.vocab_size) {
        throw ConfigError("text token id " + std::to_string(token_id) +
                          " outside vocabulary of " + std::to_string(config.vocab_size));
    }
    return vocab_head.row_copy(static_cast<std::size_t>(token_id));
}

ToyWeights synthesize_weights(const ToyConfig& config, std::uint64_t seed) {
    config.validate();
    ToyWeights w;
    w.config = config;
    w.seed = seed;

    SeededSource src(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(config.hidden_dim));
    const std::size_t d = config.hidden_dim;

    // Global parameters, alphabetical by name.
    w.cls_embedding.resize(d);
    fill_vector(w.cls_embedding, src, scale);
    w.patch_bias.resize(d);
    fill_vector(w.patch_bias, src, scale);
    w.patch_projection = Matrix(config.patch_dim, d);
    fill_matrix(w.patch_projection, src, scale);
    w.vocab_head = Matrix(config.vocab_size, d);
    fill_matrix(w.vocab_head, src, scale);

    auto fill_layer = [&](LayerWeights& lw) {
        lw.w_ffn_in = Matrix(d, config.ffn_dim);
        fill_matrix(lw.w_ffn_in, src, scale);
        lw.w_ffn_out = Matrix(config.ffn_dim, d);
        fill_matrix(lw.w_ffn_out, src, scale);
        lw.w_k = Matrix(d, d);
        fill_matrix(lw.w_k, src, scale);
        lw.w_o = Matrix(d, d);
        fill_matrix(lw.w_o, src, scale);
        lw.w_q = Matrix(d, d);
        fill_matrix(lw.w_q, src, scale);
        lw.w_v = Matrix(d, d);
        fill_matrix(lw.w_v, src, scale);
    };

    w.encoder.resize(config.encoder_layers);
    for (auto& lw : w.encoder) fill_layer(lw);
    w.lm.resize(config.lm_layers);
    for (auto& lw : w.lm) fill_layer(lw);
    return w;
}

TokenGrid encode_patches(const Matrix& image_patches, const ToyWeights& weights) {
    const std::size_t n = image_patches.rows();
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
    if (side * side != n) {
        throw ShapeError("patch count " + std::to_string(n) + " is not a perfect square");
    }
    if (image_patches.cols() != weights.config.patch_dim) {
        throw ShapeError("patch dim " + std::to_string(image_patches.cols()) +
                         " does not match configured " +
                         std::to_string(weights.config.patch_dim));
    }

    Matrix projected = matmul(image_patches, weights.patch_projection);
    TokenGrid grid;
    grid.grid_rows = side;
    grid.grid_cols = side;
    grid.cls = weights.cls_embedding;
    grid.tokens.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        VisionToken tok;
        tok.id = static_cast<int>(i) + 1;  // id 0 is CLS
        tok.embedding = projected.row_copy(i);
        for (std::size_t c = 0; c < tok.embedding.size(); ++c) {
            tok.embedding[c] += weights.patch_bias[c];
        }
        tok.row = static_cast<double>(i / side);
        tok.col = static_cast<double>(i % side);
        tok.mass = 1;
        tok.provenance = {tok.id};
        grid.tokens.push_back(std::move(tok));
    }
    return grid;
}

std::vector<double> layer_norm_row(std::span<const double> row) {
    double mean = 0.0;
    for (double x : row) mean += x;
    mean /= static_cast<double>(row.size());
    double var = 0.0;
    for (double x : row) var += (x - mean) * (x - mean);
    var /= static_cast<double>(row.size());
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    std::vector<double> out(row.size());
    for (std::size_t i = 0; i < row.size(); ++i) out[i] = (row[i] - mean) * inv;
    return out;
}

Matrix layer_norm_rows(const Matrix& m) {
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto n = layer_norm_row(m.row(r));
        std::copy(n.begin(), n.end(), out.row(r).begin());
    }
    return out;
}

namespace detail {

Matrix multi_head_attention(const Matrix& q_rows, const Matrix& k_rows,
                            const Matrix& v_rows, std::size_t num_heads,
                            const Matrix* mask, Matrix* head_avg_attn) {
    const std::size_t d = q_rows.cols();
    const std::size_t dh = d / num_heads;
    Matrix concat(q_rows.rows(), d);
    Matrix avg;
    if (head_avg_attn != nullptr) avg = Matrix(q_rows.rows(), k_rows.rows());

    for (std::size_t h = 0; h < num_heads; ++h) {
        Matrix qh(q_rows.rows(), dh), kh(k_rows.rows(), dh), vh(v_rows.rows(), dh);
        for (std::size_t r = 0; r < q_rows.rows(); ++r)
            for (std::size_t c = 0; c < dh; ++c) qh.at(r, c) = q_rows.at(r, h * dh + c);
        for (std::size_t r = 0; r < k_rows.rows(); ++r)
            for (std::size_t c = 0; c < dh; ++c) {
                kh.at(r, c) = k_rows.at(r, h * dh + c);
                vh.at(r, c) = v_rows.at(r, h * dh + c);
            }
        AttentionResult res = scaled_attention(qh, kh, vh, mask);
        for (std::size_t r = 0; r < q_rows.rows(); ++r)
            for (std::size_t c = 0; c < dh; ++c) concat.at(r, h * dh + c) = res.output.at(r, c);
        if (head_avg_attn != nullptr) {
            for (std::size_t i = 0; i < avg.rows(); ++i)
                for (std::size_t j = 0; j < avg.cols(); ++j) avg.at(i, j) += res.attn.at(i, j);
        }
    }
    if (head_avg_attn != nullptr) {
        for (double& x : avg.data()) x /= static_cast<double>(num_heads);
        *head_avg_attn = std::move(avg);
    }
    return concat;
}

}  // namespace detail

namespace {

/// Shared pre-norm residual block. `mask` is the attention mask (or null for
/// bidirectional); fills `attn_out` with the head-averaged map and, if a
/// cache is given, appends each position's full K/V rows.
Matrix transformer_block(const Matrix& x, const LayerWeights& lw, std::size_t num_heads,
                         const Matrix* mask, Matrix* attn_out, KVCache* cache,
                         std::size_t cache_layer,
                         const std::vector<KVCache::Entry>* entry_protos) {
    Matrix normed = layer_norm_rows(x);
    Matrix q = matmul(normed, lw.w_q);
    Matrix k = matmul(normed, lw.w_k);
    Matrix v = matmul(normed, lw.w_v);

    if (cache != nullptr) {
        for (std::size_t i = 0; i < x.rows(); ++i) {
            KVCache::Entry e = (*entry_protos)[i];
            e.key = k.row_copy(i);
            e.value = v.row_copy(i);
            cache->append(cache_layer, std::move(e));
        }
    }

    Matrix heads = detail::multi_head_attention(q, k, v, num_heads, mask, attn_out);
    Matrix attn_proj = matmul(heads, lw.w_o);

    Matrix h(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r)
        for (std::size_t c = 0; c < x.cols(); ++c) h.at(r, c) = x.at(r, c) + attn_proj.at(r, c);

    Matrix normed2 = layer_norm_rows(h);
    Matrix ffn_mid = matmul(normed2, lw.w_ffn_in);
    for (double& val : ffn_mid.data()) val = std::max(0.0, val);
    Matrix ffn_out = matmul(ffn_mid, lw.w_ffn_out);
    for (std::size_t r = 0; r < h.rows(); ++r)
        for (std::size_t c = 0; c < h.cols(); ++c) h.at(r, c) += ffn_out.at(r, c);
    return h;
}

}  // namespace

EncoderLayerResult encoder_layer_forward(const Matrix& tokens, const ToyWeights& weights,
                                         std::size_t layer_index) {
    if (layer_index >= weights.encoder.size()) {
        throw ConfigError("encoder layer index " + std::to_string(layer_index) +
                          " out of range");
    }
    EncoderLayerResult result;
    result.hidden = transformer_block(tokens, weights.encoder[layer_index],
                                      weights.config.num_heads, nullptr, &result.attn,
                                      nullptr, 0, nullptr);
    return result;
}

Matrix lm_layer_forward(MultimodalSequence& sequence, const ToyWeights& weights,
                        std::size_t layer_index, KVCache* cache,
                        const std::vector<bool>* attend_only) {
    if (layer_index >= weights.lm.size()) {
        throw CacheError("lm layer index " + std::to_string(layer_index) + " out of range");
    }
    if (cache != nullptr && cache->num_layers() != weights.lm.size()) {
        throw CacheError("cache has " + std::to_string(cache->num_layers()) +
                         " layers, model has " + std::to_string(weights.lm.size()));
    }
    const std::size_t n = sequence.size();
    if (attend_only != nullptr && attend_only->size() != n) {
        throw ShapeError("attend_only mask length mismatch");
    }
    Matrix mask(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            if (attend_only != nullptr && !(*attend_only)[j] && i != j) continue;
            mask.at(i, j) = 1.0;  // self stays visible so masked rows keep a live softmax
        }
    }

    std::vector<KVCache::Entry> protos;
    if (cache != nullptr) {
        protos.reserve(n);
        for (const auto& e : sequence.entries) protos.push_back({e.id, e.modality, {}, {}});
    }

    Matrix attn;
    sequence.hidden = transformer_block(sequence.hidden, weights.lm[layer_index],
                                        weights.config.num_heads, &mask, &attn, cache,
                                        layer_index, cache != nullptr ? &protos : nullptr);
    return attn;
}

std::vector<double> project_logits(std::span<const double> hidden,
                                   const ToyWeights& weights) {
    auto normed = layer_norm_row(hidden);
    std::vector<double> logits(weights.config.vocab_size);
    for (std::size_t t = 0; t < weights.config.vocab_size; ++t) {
        logits[t] = dot(normed, weights.vocab_head.row(t));
    }
    return logits;
}

int argmax_token(std::span<const double> logits) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < logits.size(); ++i) {
        if (logits[i] > logits[best]) best = i;  // strict: ties keep the smaller id
    }
    return static_cast<int>(best);
}

void MultimodalSequence::remove_indices(const std::vector<std::size_t>& sorted_indices) {
    if (sorted_indices.empty()) return;
    std::vector<Entry> kept_entries;
    std::vector<std::size_t> kept_rows;
    kept_entries.reserve(entries.size());
    std::size_t next_removal = 0;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (next_removal < sorted_indices.size() && sorted_indices[next_removal] == i) {
            ++next_removal;
            continue;
        }
        kept_entries.push_back(entries[i]);
        kept_rows.push_back(i);
    }
    entries = std::move(kept_entries);
    hidden = hidden.gather_rows(kept_rows);
}

}  // namespace mustdrop
