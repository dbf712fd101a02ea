// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/prefill_stage.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "mustdrop/errors.hpp"

namespace mustdrop {

void PrefillConfig::validate(const ToyConfig& toy) const {
    for (std::size_t layer : prune_layers) {
        if (layer >= toy.lm_layers) {
            throw ConfigError("prune layer " + std::to_string(layer) +
                              " beyond LM depth " + std::to_string(toy.lm_layers));
        }
    }
    if (!std::is_sorted(prune_layers.begin(), prune_layers.end())) {
        throw ConfigError("prune_layers must be sorted");
    }
    if (gamma.has_value() == budget.has_value()) {
        throw ConfigError("exactly one of gamma and budget must be set");
    }
    if (gamma.has_value() && *gamma < 0.0) throw ConfigError("gamma must be >= 0");
    if (budget.has_value() && *budget <= 0.0) throw ConfigError("budget must be > 0");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
}

std::map<int, double> global_scores(const Matrix& attn, const MultimodalSequence& seq) {
    if (seq.text_count() == 0) throw ConfigError("global scores need text rows");
    std::map<int, double> scores;
    for (std::size_t j = 0; j < seq.size(); ++j) {
        if (seq.entries[j].modality != Modality::vision) continue;
        double v = 0.0;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (seq.entries[i].modality != Modality::text) continue;
            v += attn.at(i, j);
        }
        scores[seq.entries[j].id] = v;
    }
    return scores;
}

std::set<int> candidate_set(const std::map<int, double>& scores, double gamma) {
    double total = 0.0;
    for (const auto& [id, v] : scores) total += v;
    std::set<int> d;
    for (const auto& [id, v] : scores) {
        if (v <= gamma * total) d.insert(id);
    }
    return d;
}

std::set<int> individual_filter(const Matrix& attn, const MultimodalSequence& seq,
                                const std::set<int>& candidates, double alpha) {
    std::set<int> confirmed;
    for (std::size_t j = 0; j < seq.size(); ++j) {
        if (seq.entries[j].modality != Modality::vision) continue;
        if (candidates.find(seq.entries[j].id) == candidates.end()) continue;
        double best = 0.0;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (seq.entries[i].modality != Modality::text) continue;
            best = std::max(best, attn.at(i, j));
        }
        if (best < alpha) confirmed.insert(seq.entries[j].id);
    }
    return confirmed;
}

namespace {

std::map<int, double> individual_max_scores(const Matrix& attn,
                                            const MultimodalSequence& seq) {
    std::map<int, double> maxima;
    for (std::size_t j = 0; j < seq.size(); ++j) {
        if (seq.entries[j].modality != Modality::vision) continue;
        double best = 0.0;
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (seq.entries[i].modality != Modality::text) continue;
            best = std::max(best, attn.at(i, j));
        }
        maxima[seq.entries[j].id] = best;
    }
    return maxima;
}

void remove_vision_ids(MultimodalSequence& seq, const std::set<int>& ids) {
    if (ids.empty()) return;
    std::vector<std::size_t> indices;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        if (seq.entries[i].modality == Modality::vision &&
            ids.count(seq.entries[i].id) > 0) {
            indices.push_back(i);
        }
    }
    seq.remove_indices(indices);
}

/// Dual-attention decision at one layer; pure (no sequence mutation).
PruneDecision compute_decision(const Matrix& attn, const MultimodalSequence& seq,
                               const KeyTokenSet& key_set, const PrefillConfig& config,
                               std::size_t layer) {
    const double gamma = config.gamma.value_or(0.0);

    PruneDecision decision;
    decision.layer = layer;
    decision.global_scores = global_scores(attn, seq);
    double total = 0.0;
    for (const auto& [id, v] : decision.global_scores) total += v;
    decision.gamma_threshold = gamma * total;
    decision.candidates = candidate_set(decision.global_scores, gamma);
    decision.individual_max = individual_max_scores(attn, seq);

    const std::set<int> confirmed =
        individual_filter(attn, seq, decision.candidates, config.alpha);
    for (int id : confirmed) {
        if (config.spare_key_set && key_set.contains(id)) {
            decision.spared_by_key.insert(id);
        } else {
            decision.pruned.insert(id);
        }
    }
    return decision;
}

}  // namespace

PruneDecision prune_at_layer(MultimodalSequence& seq, const Matrix& attn,
                             const KeyTokenSet& key_set, const PrefillConfig& config,
                             std::size_t layer) {
    PruneDecision decision = compute_decision(attn, seq, key_set, config, layer);
    remove_vision_ids(seq, decision.pruned);
    return decision;
}

PrefillResult run_prefill_with_policy(MultimodalSequence sequence,
                                      const ToyWeights& weights,
                                      const std::vector<std::size_t>& prune_layers,
                                      const PrunePolicy& policy) {
    sequence.validate();
    PrefillResult result;
    result.cache = KVCache(weights.config.lm_layers);

    for (std::size_t layer = 0; layer < weights.config.lm_layers; ++layer) {
        result.layer_vision_counts.push_back(sequence.vision_count());
        Matrix attn = lm_layer_forward(sequence, weights, layer, &result.cache);
        if (std::find(prune_layers.begin(), prune_layers.end(), layer) !=
            prune_layers.end()) {
            std::set<int> to_prune = policy(layer, attn, sequence);
            remove_vision_ids(sequence, to_prune);
        }
    }

    for (int id : sequence.vision_ids()) result.survivors.insert(id);
    result.last_hidden = sequence.hidden.row_copy(sequence.size() - 1);
    result.last_logits = project_logits(result.last_hidden, weights);
    return result;
}

PrefillResult run_prefill(MultimodalSequence sequence, const ToyWeights& weights,
                          const KeyTokenSet& key_set, const PrefillConfig& config) {
    config.validate(weights.config);
    if (!config.gamma.has_value()) {
        throw ConfigError("run_prefill needs a resolved gamma; calibrate the budget first");
    }
    std::vector<PruneDecision> decisions;
    PrunePolicy policy = [&](std::size_t layer, const Matrix& attn,
                             const MultimodalSequence& seq) {
        decisions.push_back(compute_decision(attn, seq, key_set, config, layer));
        return decisions.back().pruned;
    };

    PrefillResult result = run_prefill_with_policy(std::move(sequence), weights,
                                                   config.prune_layers, policy);
    result.decisions = std::move(decisions);
    return result;
}

CalibrationResult calibrate_gamma(const std::vector<PreparedPrefillInput>& inputs,
                                  const PrefillConfig& config) {
    if (!config.budget.has_value()) {
        throw ConfigError("calibrate_gamma requires budget mode");
    }
    if (inputs.empty()) throw ConfigError("calibration needs at least one fixture");
    const double budget = *config.budget;

    if (config.spare_key_set) {
        double floor = 0.0;
        for (const auto& in : inputs) {
            floor += static_cast<double>(in.key_set.member_ids.size());
        }
        floor /= static_cast<double>(inputs.size());
        if (budget < floor) {
            throw CalibrationError(
                "budget " + std::to_string(budget) +
                " below the key-set floor of " + std::to_string(floor) +
                " protected tokens on average");
        }
    }

    auto mean_survivors = [&](double gamma) {
        PrefillConfig probe = config;
        probe.budget.reset();
        probe.gamma = gamma;
        double total = 0.0;
        for (const auto& in : inputs) {
            PrefillResult r = run_prefill(in.sequence, *in.weights, in.key_set, probe);
            total += static_cast<double>(r.survivors.size());
        }
        return total / static_cast<double>(inputs.size());
    };

    // Survivor count decreases as gamma grows, so bisect on [0, 1].
    double lo = 0.0;
    double hi = 1.0;
    CalibrationResult best;
    best.gamma = lo;
    best.achieved_mean = mean_survivors(lo);
    double best_err = std::abs(best.achieved_mean - budget);

    for (std::size_t iter = 0; iter < 40; ++iter) {
        const double mid = 0.5 * (lo + hi);
        const double mean = mean_survivors(mid);
        const double err = std::abs(mean - budget);
        if (err < best_err) {
            best_err = err;
            best.gamma = mid;
            best.achieved_mean = mean;
        }
        best.iterations = iter + 1;
        if (err <= 0.05 * budget) break;
        if (mean > budget) {
            lo = mid;  // too many survivors: prune harder
        } else {
            hi = mid;
        }
    }
    return best;
}

}  // namespace mustdrop
