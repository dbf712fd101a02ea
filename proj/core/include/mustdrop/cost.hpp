// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "mustdrop/geometry.hpp"

namespace mustdrop {

/// Bytes of KV cache for `tokens` entries: tokens * 2 (K and V) * layers *
/// hidden * bytes_per_element. Exactly linear in the token count.
std::uint64_t kv_bytes(std::uint64_t tokens, const ModelGeometry& geometry);

/// Decimal megabytes (1 MB = 10^6 bytes), matching the published tables.
double kv_megabytes(std::uint64_t tokens, const ModelGeometry& geometry);

/// Analytic per-layer FLOPs for a full pass over n tokens:
///   4*n*d^2 + 2*n^2*d + 2*n*d*m
/// (projections, attention, FFN; multiply-adds count as 2 FLOPs and
/// normalisation/softmax are ignored).
double flops_prefill_layer(std::uint64_t n_tokens, const ModelGeometry& geometry);

/// One decode step against a cache of length c: the n-linear analog with
/// n = 1, 4*d^2 + 2*c*d + 2*d*m.
double flops_decode_step_layer(std::uint64_t cache_len, const ModelGeometry& geometry);

/// Total prefill FLOPs for per-layer live token counts. When the schedule is
/// shorter than geometry.num_layers (a toy-depth run accounted at full
/// scale), each schedule slot covers an equal contiguous span of layers.
double flops_prefill_total(const std::vector<std::uint64_t>& per_layer_tokens,
                           const ModelGeometry& geometry);

/// 1 - final_avg / original.
double compression_ratio(double original, double final_avg);

/// Full accounting of one pipeline run (all byte counts analytic, never
/// measured).
struct CostReport {
    std::string geometry_name;
    std::uint64_t original_vision_tokens = 0;
    std::uint64_t post_encode_vision_tokens = 0;
    std::vector<std::uint64_t> prefill_layer_vision_tokens;
    std::uint64_t s_few_size = 0;
    std::uint64_t key_set_size = 0;
    std::vector<std::uint64_t> post_eviction_layer_vision_tokens;
    std::uint64_t final_cached_vision_tokens = 0;  // deepest layer, post-eviction

    std::uint64_t kv_bytes_original = 0;
    std::uint64_t kv_bytes_post_encode = 0;
    std::uint64_t kv_bytes_final = 0;

    double flops_vanilla = 0.0;
    double flops_actual = 0.0;

    double compression = 0.0;       // 1 - final/original
    double flops_reduction = 0.0;   // 1 - actual/vanilla
};

}  // namespace mustdrop
