// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/decode_stage.hpp"

#include <algorithm>
#include <string>

#include "mustdrop/errors.hpp"

namespace mustdrop {

void DecodeConfig::validate(const ToyConfig& toy) const {
    if (keep_from_layer > toy.lm_layers) {
        throw ConfigError("keep_from_layer beyond LM depth");
    }
    if (!greedy) throw ConfigError("only greedy decoding is supported");
}

std::vector<EvictEvent> evict_output_aware(KVCache& cache, const std::set<int>& s_few,
                                           const KeyTokenSet& key_set,
                                           const DecodeConfig& config) {
    std::set<int> keep = s_few;
    keep.insert(key_set.member_ids.begin(), key_set.member_ids.end());

    std::vector<EvictEvent> events;
    for (std::size_t layer = config.keep_from_layer; layer < cache.num_layers(); ++layer) {
        for (int id : cache.evict_vision_except(layer, keep)) {
            events.push_back({layer, id});
        }
    }
    return events;
}

DecodeStepResult decode_step(KVCache& cache, const std::vector<double>& token_embedding,
                             int token_id, const ToyWeights& weights) {
    const std::size_t d = weights.config.hidden_dim;
    if (token_embedding.size() != d) {
        throw ShapeError("decode step embedding has wrong width");
    }
    if (cache.num_layers() != weights.config.lm_layers) {
        throw CacheError("cache depth does not match the model");
    }

    Matrix h(1, d, token_embedding);
    DecodeStepResult result;
    for (std::size_t layer = 0; layer < weights.config.lm_layers; ++layer) {
        if (cache.entry_count(layer) == 0) {
            throw CacheError("decode step over empty cache layer " + std::to_string(layer));
        }
        const LayerWeights& lw = weights.lm[layer];
        Matrix normed = layer_norm_rows(h);
        Matrix q = matmul(normed, lw.w_q);
        Matrix k = matmul(normed, lw.w_k);
        Matrix v = matmul(normed, lw.w_v);

        cache.append(layer, {token_id, Modality::text, k.row_copy(0), v.row_copy(0)});

        const auto& entries = cache.layer(layer);
        Matrix k_rows(entries.size(), d);
        Matrix v_rows(entries.size(), d);
        for (std::size_t i = 0; i < entries.size(); ++i) {
            std::copy(entries[i].key.begin(), entries[i].key.end(), k_rows.row(i).begin());
            std::copy(entries[i].value.begin(), entries[i].value.end(),
                      v_rows.row(i).begin());
        }

        Matrix avg_attn;
        Matrix heads = detail::multi_head_attention(q, k_rows, v_rows,
                                                    weights.config.num_heads, nullptr,
                                                    &avg_attn);
        std::vector<std::pair<int, double>> row;
        row.reserve(entries.size());
        for (std::size_t i = 0; i < entries.size(); ++i) {
            row.push_back({entries[i].id, avg_attn.at(0, i)});
        }
        result.per_layer_attention.push_back(std::move(row));
        Matrix attn_proj = matmul(heads, lw.w_o);
        for (std::size_t c = 0; c < d; ++c) h.at(0, c) += attn_proj.at(0, c);

        Matrix normed2 = layer_norm_rows(h);
        Matrix ffn_mid = matmul(normed2, lw.w_ffn_in);
        for (double& x : ffn_mid.data()) x = std::max(0.0, x);
        Matrix ffn_out = matmul(ffn_mid, lw.w_ffn_out);
        for (std::size_t c = 0; c < d; ++c) h.at(0, c) += ffn_out.at(0, c);
    }

    result.final_hidden = h.row_copy(0);
    result.logits = project_logits(result.final_hidden, weights);
    result.next_id = argmax_token(result.logits);
    return result;
}

DecodeResult run_decode(KVCache& cache, const std::vector<double>& prompt_final_logits,
                        const std::set<int>& s_few, const KeyTokenSet& key_set,
                        const ToyWeights& weights, const DecodeConfig& config) {
    config.validate(weights.config);

    DecodeResult result;
    result.evict_events = evict_output_aware(cache, s_few, key_set, config);

    auto snapshot = [&]() {
        std::vector<std::size_t> vision;
        for (std::size_t l = 0; l < cache.num_layers(); ++l) {
            vision.push_back(cache.vision_count(l));
        }
        result.per_step_layer_vision.push_back(std::move(vision));
        result.per_step_total_entries.push_back(cache.total_entries());
    };
    snapshot();  // post-eviction, before any step

    // Fresh sequence ids for generated tokens, past everything in the cache.
    int next_seq_id = 0;
    if (cache.num_layers() > 0) {
        for (const auto& e : cache.layer(0)) next_seq_id = std::max(next_seq_id, e.id);
    }
    ++next_seq_id;

    int next_vocab_id = argmax_token(prompt_final_logits);
    for (std::size_t step = 0; step < config.max_new_tokens; ++step) {
        result.generated_ids.push_back(next_vocab_id);
        DecodeStepResult stepped = decode_step(
            cache, weights.embed_token(next_vocab_id), next_seq_id++, weights);
        next_vocab_id = stepped.next_id;
        snapshot();
    }
    return result;
}

}  // namespace mustdrop
