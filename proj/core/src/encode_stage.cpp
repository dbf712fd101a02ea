// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/encode_stage.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mustdrop/errors.hpp"

namespace mustdrop {

namespace {

/// Stack [CLS; tokens] into one matrix for an encoder forward.
Matrix stack_with_cls(const TokenGrid& grid) {
    const std::size_t d = grid.cls.size();
    Matrix m(grid.tokens.size() + 1, d);
    std::copy(grid.cls.begin(), grid.cls.end(), m.row(0).begin());
    for (std::size_t i = 0; i < grid.tokens.size(); ++i) {
        const auto& e = grid.tokens[i].embedding;
        std::copy(e.begin(), e.end(), m.row(i + 1).begin());
    }
    return m;
}

}  // namespace

void EncodeConfig::validate(const ToyConfig& toy) const {
    if (window_k < 2) throw ConfigError("encode config: window_k must be >= 2");
    if (tau_mean <= 0.0 || tau_mean >= 1.0) {
        throw ConfigError("encode config: tau_mean must lie in (0, 1)");
    }
    if (key_layer >= toy.encoder_layers) {
        throw ConfigError("encode config: key_layer beyond encoder depth");
    }
    if (key_layer < 1) {
        // Layer 0 is consumed by merging; the earliest scoreable layer is 1.
        throw ConfigError("encode config: key_layer must be >= 1");
    }
    if (iqr_factor < 0.0) throw ConfigError("encode config: iqr_factor must be >= 0");
}

std::vector<std::vector<std::size_t>> partition_windows(const TokenGrid& grid,
                                                        std::size_t k) {
    if (k < 2) throw ConfigError("window size k must be >= 2");
    const std::size_t rows = grid.grid_rows;
    const std::size_t cols = grid.grid_cols;
    if (k > rows && k > cols) {
        throw ConfigError("window size " + std::to_string(k) +
                          " larger than both grid dimensions " + std::to_string(rows) +
                          "x" + std::to_string(cols));
    }
    if (grid.tokens.size() != rows * cols) {
        throw ConfigError("windows require an unmerged grid");
    }
    std::vector<std::vector<std::size_t>> windows;
    for (std::size_t tr = 0; tr < rows; tr += k) {
        for (std::size_t tc = 0; tc < cols; tc += k) {
            std::vector<std::size_t> w;
            const std::size_t r_end = std::min(tr + k, rows);
            const std::size_t c_end = std::min(tc + k, cols);
            for (std::size_t r = tr; r < r_end; ++r)
                for (std::size_t c = tc; c < c_end; ++c) w.push_back(r * cols + c);
            windows.push_back(std::move(w));
        }
    }
    return windows;
}

double window_similarity(std::span<const VisionToken* const> window) {
    if (window.size() < 2) {
        throw ConfigError("window similarity needs at least 2 tokens");
    }
    double sum = 0.0;
    for (std::size_t m = 0; m < window.size(); ++m) {
        for (std::size_t n = 0; n < window.size(); ++n) {
            if (m == n) continue;
            sum += cosine_sim(window[m]->embedding, window[n]->embedding);
        }
    }
    return sum;
}

bool merge_decision(double similarity_sum, std::size_t window_size, double tau_mean) {
    const double pairs = static_cast<double>(window_size) *
                         static_cast<double>(window_size - 1);
    return similarity_sum > tau_mean * pairs;  // strict
}

VisionToken merge_window(std::span<const VisionToken* const> window,
                         std::span<const double> cls_attention) {
    bool all_tiny = true;
    for (double a : cls_attention) {
        if (a > 1e-12) {
            all_tiny = false;
            break;
        }
    }

    double weight_sum = 0.0;
    std::vector<double> weights(window.size());
    for (std::size_t j = 0; j < window.size(); ++j) {
        const double mass = static_cast<double>(window[j]->mass);
        weights[j] = all_tiny ? mass : mass * cls_attention[j];
        weight_sum += weights[j];
    }

    VisionToken merged;
    merged.id = window[0]->id;
    merged.embedding.assign(window[0]->embedding.size(), 0.0);
    double mass_sum = 0.0;
    double row_acc = 0.0;
    double col_acc = 0.0;
    for (std::size_t j = 0; j < window.size(); ++j) {
        const VisionToken& t = *window[j];
        merged.id = std::min(merged.id, t.id);
        const double w = weights[j] / weight_sum;
        for (std::size_t c = 0; c < merged.embedding.size(); ++c) {
            merged.embedding[c] += w * t.embedding[c];
        }
        const double mass = static_cast<double>(t.mass);
        mass_sum += mass;
        row_acc += mass * t.row;
        col_acc += mass * t.col;
        merged.provenance.insert(merged.provenance.end(), t.provenance.begin(),
                                 t.provenance.end());
    }
    merged.mass = static_cast<std::size_t>(std::llround(mass_sum));
    merged.row = row_acc / mass_sum;
    merged.col = col_acc / mass_sum;
    std::sort(merged.provenance.begin(), merged.provenance.end());
    return merged;
}

MergeOutcome local_spatial_merge(const TokenGrid& grid, const ToyWeights& weights,
                                 const EncodeConfig& config) {
    config.validate(weights.config);
    const auto windows = partition_windows(grid, config.window_k);

    // One layer-0 forward over [CLS; tokens]: attention for merge weights,
    // outputs as the layer-1 input states.
    EncoderLayerResult layer0 = encoder_layer_forward(stack_with_cls(grid), weights, 0);
    const auto cls_row = layer0.attn.row(0);  // column j+1 scores token j

    // Merge decisions read the pre-layer-0 embeddings; representatives are
    // averages of the layer-0 outputs spliced into the layer-1 input.
    MergeOutcome outcome;
    outcome.grid.grid_rows = grid.grid_rows;
    outcome.grid.grid_cols = grid.grid_cols;
    outcome.grid.cls = layer0.hidden.row_copy(0);

    std::vector<VisionToken> advanced = grid.tokens;
    for (std::size_t i = 0; i < advanced.size(); ++i) {
        advanced[i].embedding = layer0.hidden.row_copy(i + 1);
    }

    std::vector<bool> consumed(grid.tokens.size(), false);
    for (std::size_t wi = 0; wi < windows.size(); ++wi) {
        const auto& window = windows[wi];
        if (window.size() < 2) continue;  // singleton: similarity undefined

        std::vector<const VisionToken*> pre;
        pre.reserve(window.size());
        for (std::size_t idx : window) pre.push_back(&grid.tokens[idx]);
        const double sim = window_similarity(pre);
        const double threshold = config.tau_mean * static_cast<double>(window.size()) *
                                 static_cast<double>(window.size() - 1);
        if (!merge_decision(sim, window.size(), config.tau_mean)) continue;

        std::vector<const VisionToken*> members;
        std::vector<double> cls_scores;
        members.reserve(window.size());
        for (std::size_t idx : window) {
            members.push_back(&advanced[idx]);
            cls_scores.push_back(cls_row[idx + 1]);
        }
        VisionToken merged = merge_window(members, cls_scores);

        MergeEvent event;
        event.window_index = wi;
        for (std::size_t idx : window) event.member_ids.push_back(grid.tokens[idx].id);
        event.similarity_sum = sim;
        event.threshold = threshold;
        event.result_id = merged.id;
        outcome.events.push_back(std::move(event));

        for (std::size_t idx : window) consumed[idx] = true;
        advanced[window[0]] = std::move(merged);
        consumed[window[0]] = false;  // representative stays, at the window anchor
    }

    for (std::size_t i = 0; i < advanced.size(); ++i) {
        if (!consumed[i]) outcome.grid.tokens.push_back(std::move(advanced[i]));
    }
    return outcome;
}

double key_score_threshold(std::vector<double> scores, double iqr_factor) {
    if (scores.empty()) throw ConfigError("cannot threshold an empty score set");
    if (scores.size() < 4) {
        double mean = 0.0;
        for (double s : scores) mean += s;
        mean /= static_cast<double>(scores.size());
        double var = 0.0;
        for (double s : scores) var += (s - mean) * (s - mean);
        var /= static_cast<double>(scores.size());
        return mean + iqr_factor * std::sqrt(var);
    }
    std::sort(scores.begin(), scores.end());
    auto quantile = [&](double p) {
        const double pos = p * static_cast<double>(scores.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, scores.size() - 1);
        const double frac = pos - static_cast<double>(lo);
        return scores[lo] + frac * (scores[hi] - scores[lo]);
    };
    const double q1 = quantile(0.25);
    const double q3 = quantile(0.75);
    return q3 + iqr_factor * (q3 - q1);
}

KeyTokenSet build_key_set(const TokenGrid& merged_grid, const ToyWeights& weights,
                          const EncodeConfig& config) {
    config.validate(weights.config);

    // The merged grid holds layer-1 inputs, so continue from layer 1 up to and
    // including key_layer; the CLS attention of that layer scores the tokens.
    Matrix hidden = stack_with_cls(merged_grid);
    Matrix attn;
    for (std::size_t layer = 1; layer <= config.key_layer; ++layer) {
        EncoderLayerResult res = encoder_layer_forward(hidden, weights, layer);
        hidden = std::move(res.hidden);
        attn = std::move(res.attn);
    }

    KeyTokenSet key_set;
    std::vector<double> values;
    values.reserve(merged_grid.tokens.size());
    for (std::size_t i = 0; i < merged_grid.tokens.size(); ++i) {
        const double score = attn.at(0, i + 1);
        key_set.scores[merged_grid.tokens[i].id] = score;
        values.push_back(score);
    }
    key_set.threshold_used = key_score_threshold(values, config.iqr_factor);
    for (const auto& [id, score] : key_set.scores) {
        if (score > key_set.threshold_used) key_set.member_ids.insert(id);
    }
    return key_set;
}

Matrix encode_features(const TokenGrid& merged_grid, const ToyWeights& weights) {
    Matrix hidden = stack_with_cls(merged_grid);
    for (std::size_t layer = 1; layer < weights.config.encoder_layers; ++layer) {
        hidden = encoder_layer_forward(hidden, weights, layer).hidden;
    }
    Matrix features(merged_grid.tokens.size(), hidden.cols());
    for (std::size_t i = 0; i < merged_grid.tokens.size(); ++i) {
        auto src = hidden.row(i + 1);
        std::copy(src.begin(), src.end(), features.row(i).begin());
    }
    return features;
}

}  // namespace mustdrop
