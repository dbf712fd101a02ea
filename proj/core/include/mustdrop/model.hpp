// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

#include "mustdrop/kv_cache.hpp"
#include "mustdrop/matrix.hpp"
#include "mustdrop/multimodal_sequence.hpp"
#include "mustdrop/token_grid.hpp"

namespace mustdrop {

/// Desk-scale stand-in for the vision encoder + language stack. Small enough
/// that exact double-precision pipelines run in milliseconds.
struct ToyConfig {
    std::size_t encoder_layers = 4;
    std::size_t lm_layers = 4;
    std::size_t hidden_dim = 32;
    std::size_t num_heads = 4;
    std::size_t ffn_dim = 64;
    std::size_t grid_side = 8;   // grid_side^2 initial vision tokens
    std::size_t text_len = 8;
    std::size_t patch_dim = 16;
    std::size_t vocab_size = 32;

    void validate() const;
};

/// Per-layer projection weights.
struct LayerWeights {
    Matrix w_q, w_k, w_v, w_o;     // hidden x hidden
    Matrix w_ffn_in;               // hidden x ffn
    Matrix w_ffn_out;              // ffn x hidden
};

/// Weights are a pure function of (config, seed): the SeededSource stream is
/// consumed in a fixed documented order (see synthesize_weights).
struct ToyWeights {
    ToyConfig config;
    std::uint64_t seed = 0;
    std::vector<double> cls_embedding;   // hidden
    std::vector<double> patch_bias;      // hidden
    Matrix patch_projection;             // patch_dim x hidden
    Matrix vocab_head;                   // vocab x hidden; tied in/out embedding
    std::vector<LayerWeights> encoder;
    std::vector<LayerWeights> lm;

    std::vector<double> embed_token(int token_id) const;
};

/// Fill every parameter from SeededSource(seed), scaled by 1/sqrt(hidden_dim).
/// Consumption order: global matrices in alphabetical name order
/// (cls_embedding, patch_bias, patch_projection, vocab_head), then encoder
/// layers 0..E-1, then LM layers 0..L-1; within a layer the matrices go in
/// alphabetical name order (w_ffn_in, w_ffn_out, w_k, w_o, w_q, w_v); each
/// matrix fills row-major.
ToyWeights synthesize_weights(const ToyConfig& config, std::uint64_t seed);

/// Project image patches onto the grid. Patch i becomes token id i+1 at
/// (i / side, i % side) with mass 1; the CLS embedding is token id 0 and sits
/// outside the grid. Throws ShapeError unless the patch count is a perfect
/// square matching patch_dim columns.
TokenGrid encode_patches(const Matrix& image_patches, const ToyWeights& weights);

struct EncoderLayerResult {
    Matrix hidden;  // same shape as input
    Matrix attn;    // head-averaged attention map over [CLS; tokens]
};

/// One pre-norm MHSA + FFN block over [CLS; grid tokens], bidirectional.
EncoderLayerResult encoder_layer_forward(const Matrix& tokens, const ToyWeights& weights,
                                         std::size_t layer_index);

/// One pre-norm causal block over a multimodal sequence. Updates the hidden
/// matrix in place and returns the head-averaged attention map. When a cache
/// is given, every token's K/V rows are appended to cache layer `layer_index`.
/// `attend_only`, when set, additionally masks the listed positions out of
/// every softmax (their own rows keep running but are meaningless) — the
/// masked-forward side of the pruning-equivalence bridge.
Matrix lm_layer_forward(MultimodalSequence& sequence, const ToyWeights& weights,
                        std::size_t layer_index, KVCache* cache = nullptr,
                        const std::vector<bool>* attend_only = nullptr);

/// Final layer norm + tied vocabulary head for one hidden state.
std::vector<double> project_logits(std::span<const double> hidden,
                                   const ToyWeights& weights);

/// Greedy pick; ties break toward the smallest token id.
int argmax_token(std::span<const double> logits);

/// Parameter-free layer norm over a row (mean 0, variance 1, eps 1e-5).
std::vector<double> layer_norm_row(std::span<const double> row);
Matrix layer_norm_rows(const Matrix& m);

namespace detail {
/// Core attention block shared by encoder and LM paths. Exposed for the
/// decode step, which feeds cached K/V directly.
Matrix multi_head_attention(const Matrix& q_rows, const Matrix& k_rows,
                            const Matrix& v_rows, std::size_t num_heads,
                            const Matrix* mask, Matrix* head_avg_attn);
}  // namespace detail

}  // namespace mustdrop
