// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <vector>

#include "mustdrop/encode_stage.hpp"
#include "mustdrop/kv_cache.hpp"
#include "mustdrop/model.hpp"
#include "mustdrop/multimodal_sequence.hpp"

namespace mustdrop {

/// Prefill-stage pruning settings. Exactly one of gamma (direct threshold)
/// and budget (target mean surviving count, resolved by calibrate_gamma) is
/// set.
struct PrefillConfig {
    std::vector<std::size_t> prune_layers = {1, 2};
    std::optional<double> gamma;
    std::optional<double> budget;
    double alpha = 0.05;
    bool spare_key_set = true;

    void validate(const ToyConfig& toy) const;
};

/// Audit record of one scheduled pruning pass.
struct PruneDecision {
    std::size_t layer = 0;
    std::map<int, double> global_scores;   // V_j per surviving vision id
    std::set<int> candidates;              // D
    std::map<int, double> individual_max;  // max single-text attention per id
    std::set<int> pruned;
    std::set<int> spared_by_key;
    double gamma_threshold = 0.0;          // gamma * sum_j V_j
};

/// V_j = sum over text rows of attention on vision token j. `attn` is the
/// full map over the current sequence. Throws ConfigError without text rows.
std::map<int, double> global_scores(const Matrix& attn, const MultimodalSequence& seq);

/// D = { j : V_j <= gamma * sum V }.
std::set<int> candidate_set(const std::map<int, double>& scores, double gamma);

/// Keep only candidates whose best single-text attention is strictly below
/// alpha; the rest are rescued.
std::set<int> individual_filter(const Matrix& attn, const MultimodalSequence& seq,
                                const std::set<int>& candidates, double alpha);

/// One scheduled pass: dual filter minus key-set members, physically removed
/// from the sequence. Never touches text tokens.
PruneDecision prune_at_layer(MultimodalSequence& seq, const Matrix& attn,
                             const KeyTokenSet& key_set, const PrefillConfig& config,
                             std::size_t layer);

struct PrefillResult {
    std::set<int> survivors;                    // S_few: vision ids after the last layer
    KVCache cache;
    std::vector<PruneDecision> decisions;
    std::vector<std::size_t> layer_vision_counts;  // alive vision tokens when each layer ran
    std::vector<double> last_logits;            // prompt-final logits, seeds decoding
    std::vector<double> last_hidden;
};

/// Forward every LM layer, pruning at the scheduled ones. Cache layers keep
/// the K/V of every token alive when that layer ran; later pruning removes
/// tokens from computation, not from already-written cache layers (the
/// decode-stage policy is what cleans those up).
PrefillResult run_prefill(MultimodalSequence sequence, const ToyWeights& weights,
                          const KeyTokenSet& key_set, const PrefillConfig& config);

/// Baseline hook: given (layer, attention map, sequence), return vision ids to
/// prune at this layer.
using PrunePolicy =
    std::function<std::set<int>(std::size_t, const Matrix&, const MultimodalSequence&)>;

/// Shared runner behind run_prefill and the comparison baselines.
PrefillResult run_prefill_with_policy(MultimodalSequence sequence,
                                      const ToyWeights& weights,
                                      const std::vector<std::size_t>& prune_layers,
                                      const PrunePolicy& policy);

/// Inputs prepared once per fixture so calibration can re-run prefill cheaply.
struct PreparedPrefillInput {
    MultimodalSequence sequence;
    const ToyWeights* weights = nullptr;
    KeyTokenSet key_set;
};

struct CalibrationResult {
    double gamma = 0.0;
    double achieved_mean = 0.0;
    std::size_t iterations = 0;
};

/// Bisection on gamma (alpha fixed) until the mean |S_few| over the inputs is
/// within +-5% of config.budget, capped at 40 iterations; returns the best
/// gamma seen. Throws CalibrationError when the budget lies below the
/// key-set floor.
CalibrationResult calibrate_gamma(const std::vector<PreparedPrefillInput>& inputs,
                                  const PrefillConfig& config);

}  // namespace mustdrop
