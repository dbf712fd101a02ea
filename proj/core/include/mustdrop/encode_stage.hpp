// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "mustdrop/model.hpp"
#include "mustdrop/token_grid.hpp"

namespace mustdrop {

/// Vision-encoding-stage settings: window merging (k, tau_mean) and key-token
/// retention (key_layer, iqr_factor).
struct EncodeConfig {
    std::size_t window_k = 2;
    double tau_mean = 0.8;        // mean ordered-pair similarity needed to merge
    std::size_t key_layer = 2;    // encoder layer whose CLS attention scores Eq. 6
    double iqr_factor = 1.5;

    void validate(const ToyConfig& toy) const;
};

/// Protected set O of vision-critical token ids. `scores` holds the CLS
/// attention of every surviving token at key_layer; members are the subset
/// strictly above threshold_used.
struct KeyTokenSet {
    std::set<int> member_ids;
    std::map<int, double> scores;
    double threshold_used = 0.0;

    bool contains(int id) const { return member_ids.count(id) > 0; }
};

struct MergeEvent {
    std::size_t window_index = 0;
    std::vector<int> member_ids;
    double similarity_sum = 0.0;
    double threshold = 0.0;
    int result_id = 0;
};

struct MergeOutcome {
    TokenGrid grid;                 // embeddings advanced to the layer-1 input
    std::vector<MergeEvent> events;
};

/// Non-overlapping k x k tiles in row-major order; boundary tiles may be
/// smaller when the grid does not divide evenly. Returns index sets into
/// grid.tokens; requires an unmerged grid. Throws ConfigError when k exceeds
/// both grid dimensions.
std::vector<std::vector<std::size_t>> partition_windows(const TokenGrid& grid,
                                                        std::size_t k);

/// Sum of cosine similarity over ordered pairs m != n. Window must hold at
/// least 2 tokens (singletons are skipped by the caller).
double window_similarity(std::span<const VisionToken* const> window);

/// Eq.-5 style decision: merge iff S_i > tau_mean * ws * (ws - 1), i.e. the
/// mean ordered-pair similarity strictly exceeds tau_mean.
bool merge_decision(double similarity_sum, std::size_t window_size, double tau_mean);

/// Weighted average of the window, weights proportional to mass * CLS
/// attention (mass-proportional when every CLS score is <= 1e-12). Mass adds
/// up, provenance unions, the centroid is the mass-weighted position mean and
/// the id is the smallest member id.
VisionToken merge_window(std::span<const VisionToken* const> window,
                         std::span<const double> cls_attention);

/// Local Spatial Merging: runs encoder layer 0 once on [CLS; tokens], tests
/// every window on the pre-layer-0 embeddings, and splices merged
/// representatives (averages of layer-0 outputs) into the layer-1 input.
/// The CLS token never joins a window.
MergeOutcome local_spatial_merge(const TokenGrid& grid, const ToyWeights& weights,
                                 const EncodeConfig& config);

/// Upper-fence threshold over scores: Q3 + iqr_factor * IQR (quartiles by
/// linear interpolation over the sorted values). With fewer than 4 scores,
/// falls back to mean + iqr_factor * population stddev.
double key_score_threshold(std::vector<double> scores, double iqr_factor);

/// Key Retaining: forward the merged grid to key_layer, score surviving
/// tokens by the CLS attention row, keep those strictly above the adaptive
/// threshold. The set may be empty.
KeyTokenSet build_key_set(const TokenGrid& merged_grid, const ToyWeights& weights,
                          const EncodeConfig& config);

/// Forward the merged grid through the remaining encoder layers (from layer 1
/// to the end) and return per-token features for the language stack, in grid
/// token order (CLS excluded).
Matrix encode_features(const TokenGrid& merged_grid, const ToyWeights& weights);

}  // namespace mustdrop
