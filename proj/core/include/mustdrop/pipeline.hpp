// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mustdrop/cost.hpp"
#include "mustdrop/decode_stage.hpp"
#include "mustdrop/encode_stage.hpp"
#include "mustdrop/fixtures.hpp"
#include "mustdrop/prefill_stage.hpp"
#include "mustdrop/trace.hpp"

namespace mustdrop {

/// Which drop policy the run applies. `mustdrop` is the full three-stage
/// lifecycle; the others are comparison baselines that swap stages out.
enum class Baseline { mustdrop, none, random_drop, fastv_like, encoder_only };

std::string to_string(Baseline baseline);
Baseline baseline_from(const std::string& name);

struct PipelineConfig {
    ToyConfig toy;
    EncodeConfig encode;
    PrefillConfig prefill;
    DecodeConfig decode;
    FixtureSpec fixture;
    std::string geometry_preset = "llava-1.5-7b";
    std::uint64_t seed = 0;
    Baseline baseline = Baseline::mustdrop;

    void validate() const;
};

/// Strict JSON config: unknown keys are rejected, not ignored. The schema
/// ships in schemas/config.schema.json.
PipelineConfig parse_config(const std::string& json_text);
PipelineConfig load_config(const std::string& path);
std::string serialize_config(const PipelineConfig& config);

/// Everything run_pipeline produces, kept around for audits and tests.
struct RunArtifacts {
    Fixture fixture;
    TokenGrid post_encode_grid;
    KeyTokenSet key_set;
    std::set<int> s_few;
    std::vector<PruneDecision> decisions;
    std::vector<std::size_t> prefill_layer_vision_counts;
    DecodeResult decode;
    std::vector<int> generated_ids;
    std::vector<DropEvent> trace;
    CostReport report;
    double gamma_used = 0.0;
};

/// Encode -> key set -> prefill -> decode -> accounting, per the configured
/// baseline. `matched_survivor_target` overrides the budget for the
/// budget-matched baselines (random_drop, fastv_like, encoder_only) so they
/// can mirror a specific reference run.
RunArtifacts run_pipeline(const PipelineConfig& config,
                          std::optional<double> matched_survivor_target = std::nullopt);

/// Stable JSON document with the CostReport fields plus run metadata.
std::string serialize_report(const RunArtifacts& artifacts, const PipelineConfig& config);

/// Encode-stage products for one seed, shared by calibration and runs.
struct EncodedFixture {
    std::unique_ptr<ToyWeights> weights;
    Fixture fixture;
    TokenGrid grid;        // post-merge pool entering the LM
    KeyTokenSet key_set;
    std::vector<MergeEvent> merge_events;
    MultimodalSequence sequence;
};

EncodedFixture prepare_encoded_fixture(const PipelineConfig& config, std::uint64_t seed,
                                       std::optional<double> matched_survivor_target =
                                           std::nullopt);

/// The canonical evaluation suite: seeds 0..count-1 under one config.
std::vector<EncodedFixture> prepare_suite(const PipelineConfig& config, std::size_t count);

/// Calibrate gamma over a prepared suite (budget taken from config.prefill).
CalibrationResult calibrate_suite(const std::vector<EncodedFixture>& suite,
                                  const PipelineConfig& config);

}  // namespace mustdrop
