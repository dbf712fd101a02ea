// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <set>
#include <vector>

#include "mustdrop/encode_stage.hpp"
#include "mustdrop/kv_cache.hpp"
#include "mustdrop/model.hpp"

namespace mustdrop {

struct DecodeConfig {
    std::size_t keep_from_layer = 2;  // eviction applies to layers >= this index
    std::size_t max_new_tokens = 8;
    bool greedy = true;               // only mode in v1

    void validate(const ToyConfig& toy) const;
};

struct EvictEvent {
    std::size_t layer = 0;
    int token_id = 0;
};

/// Output-aware cache policy: for every layer index >= keep_from_layer, drop
/// cached vision entries outside S_few (union) the key set. Shallower layers
/// are untouched. Applied once, before the first decode step.
std::vector<EvictEvent> evict_output_aware(KVCache& cache, const std::set<int>& s_few,
                                           const KeyTokenSet& key_set,
                                           const DecodeConfig& config);

struct DecodeStepResult {
    int next_id = 0;
    std::vector<double> logits;
    std::vector<double> final_hidden;
    // Head-averaged attention of this step's query over each layer's cache,
    // (token id, weight) in cache order; feeds the sparsity audits.
    std::vector<std::vector<std::pair<int, double>>> per_layer_attention;
};

/// One autoregressive step: append the token's K/V per layer, attend over the
/// cached entries, project the final hidden state through the vocabulary
/// head, greedy argmax (ties toward the smallest id). Throws CacheError when
/// a layer is empty before the step.
DecodeStepResult decode_step(KVCache& cache, const std::vector<double>& token_embedding,
                             int token_id, const ToyWeights& weights);

struct DecodeResult {
    std::vector<int> generated_ids;
    std::vector<EvictEvent> evict_events;
    // Vision occupancy per layer, recorded after eviction and after each step.
    std::vector<std::vector<std::size_t>> per_step_layer_vision;
    std::vector<std::size_t> per_step_total_entries;
};

/// Eviction once, then max_new_tokens greedy steps. The first generated token
/// comes from the prompt-final logits produced by prefill; each step then
/// feeds the embedding of the token it just emitted.
DecodeResult run_decode(KVCache& cache, const std::vector<double>& prompt_final_logits,
                        const std::set<int>& s_few, const KeyTokenSet& key_set,
                        const ToyWeights& weights, const DecodeConfig& config);

}  // namespace mustdrop
