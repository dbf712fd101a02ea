// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mustdrop/errors.hpp"
#include "mustdrop/rng.hpp"

namespace mustdrop {

using nlohmann::json;

std::string to_string(Baseline baseline) {
    switch (baseline) {
        case Baseline::mustdrop: return "mustdrop";
        case Baseline::none: return "none";
        case Baseline::random_drop: return "random_drop";
        case Baseline::fastv_like: return "fastv_like";
        case Baseline::encoder_only: return "encoder_only";
    }
    return "?";
}

Baseline baseline_from(const std::string& name) {
    if (name == "mustdrop") return Baseline::mustdrop;
    if (name == "none") return Baseline::none;
    if (name == "random_drop") return Baseline::random_drop;
    if (name == "fastv_like") return Baseline::fastv_like;
    if (name == "encoder_only") return Baseline::encoder_only;
    throw ConfigError("unknown baseline '" + name + "'");
}

void PipelineConfig::validate() const {
    toy.validate();
    encode.validate(toy);
    prefill.validate(toy);
    decode.validate(toy);
    fixture.validate();
    mustdrop::geometry_preset(geometry_preset);  // unknown preset throws
    if (baseline == Baseline::random_drop || baseline == Baseline::fastv_like ||
        baseline == Baseline::encoder_only) {
        if (!prefill.budget.has_value()) {
            throw ConfigError("baseline '" + to_string(baseline) +
                              "' needs a budget to match");
        }
    }
}

// --- config (de)serialisation -------------------------------------------

namespace {

void reject_unknown_keys(const json& obj, const std::vector<std::string>& known,
                         const std::string& section) {
    for (const auto& [key, value] : obj.items()) {
        if (std::find(known.begin(), known.end(), key) == known.end()) {
            throw ConfigError("unknown config key '" + section + key + "'");
        }
    }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

ToyConfig parse_toy(const json& obj) {
    reject_unknown_keys(obj,
                        {"encoder_layers", "lm_layers", "hidden_dim", "num_heads",
                         "ffn_dim", "grid_side", "text_len", "patch_dim", "vocab_size"},
                        "toy.");
    ToyConfig toy;
    read_field(obj, "encoder_layers", toy.encoder_layers);
    read_field(obj, "lm_layers", toy.lm_layers);
    read_field(obj, "hidden_dim", toy.hidden_dim);
    read_field(obj, "num_heads", toy.num_heads);
    read_field(obj, "ffn_dim", toy.ffn_dim);
    read_field(obj, "grid_side", toy.grid_side);
    read_field(obj, "text_len", toy.text_len);
    read_field(obj, "patch_dim", toy.patch_dim);
    read_field(obj, "vocab_size", toy.vocab_size);
    return toy;
}

EncodeConfig parse_encode(const json& obj) {
    reject_unknown_keys(obj, {"window_k", "tau_mean", "key_layer", "iqr_factor"},
                        "encode.");
    EncodeConfig cfg;
    read_field(obj, "window_k", cfg.window_k);
    read_field(obj, "tau_mean", cfg.tau_mean);
    read_field(obj, "key_layer", cfg.key_layer);
    read_field(obj, "iqr_factor", cfg.iqr_factor);
    return cfg;
}

PrefillConfig parse_prefill(const json& obj) {
    reject_unknown_keys(obj, {"prune_layers", "gamma", "budget", "alpha", "spare_key_set"},
                        "prefill.");
    PrefillConfig cfg;
    read_field(obj, "prune_layers", cfg.prune_layers);
    if (obj.contains("gamma")) cfg.gamma = obj.at("gamma").get<double>();
    if (obj.contains("budget")) cfg.budget = obj.at("budget").get<double>();
    read_field(obj, "alpha", cfg.alpha);
    read_field(obj, "spare_key_set", cfg.spare_key_set);
    if (!cfg.gamma.has_value() && !cfg.budget.has_value()) {
        cfg.gamma = 0.02;  // serialized configs always carry one of the two
    }
    return cfg;
}

DecodeConfig parse_decode(const json& obj) {
    reject_unknown_keys(obj, {"keep_from_layer", "max_new_tokens", "greedy"}, "decode.");
    DecodeConfig cfg;
    read_field(obj, "keep_from_layer", cfg.keep_from_layer);
    read_field(obj, "max_new_tokens", cfg.max_new_tokens);
    read_field(obj, "greedy", cfg.greedy);
    return cfg;
}

FixtureSpec parse_fixture(const json& obj) {
    reject_unknown_keys(obj, {"kind", "image_path", "block_noise", "needle_gain"},
                        "fixture.");
    FixtureSpec spec;
    if (obj.contains("kind")) spec.kind = fixture_kind_from(obj.at("kind").get<std::string>());
    read_field(obj, "image_path", spec.image_path);
    read_field(obj, "block_noise", spec.block_noise);
    read_field(obj, "needle_gain", spec.needle_gain);
    return spec;
}

}  // namespace

PipelineConfig parse_config(const std::string& json_text) {
    json root;
    try {
        root = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    reject_unknown_keys(root,
                        {"seed", "baseline", "geometry_preset", "toy", "encode",
                         "prefill", "decode", "fixture"},
                        "");
    PipelineConfig config;
    read_field(root, "seed", config.seed);
    if (root.contains("baseline")) {
        config.baseline = baseline_from(root.at("baseline").get<std::string>());
    }
    read_field(root, "geometry_preset", config.geometry_preset);
    if (root.contains("toy")) config.toy = parse_toy(root.at("toy"));
    if (root.contains("encode")) config.encode = parse_encode(root.at("encode"));
    if (root.contains("prefill")) config.prefill = parse_prefill(root.at("prefill"));
    if (root.contains("decode")) config.decode = parse_decode(root.at("decode"));
    if (root.contains("fixture")) config.fixture = parse_fixture(root.at("fixture"));
    config.validate();
    return config;
}

PipelineConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string serialize_config(const PipelineConfig& config) {
    json root;
    root["seed"] = config.seed;
    root["baseline"] = to_string(config.baseline);
    root["geometry_preset"] = config.geometry_preset;
    root["toy"] = {{"encoder_layers", config.toy.encoder_layers},
                   {"lm_layers", config.toy.lm_layers},
                   {"hidden_dim", config.toy.hidden_dim},
                   {"num_heads", config.toy.num_heads},
                   {"ffn_dim", config.toy.ffn_dim},
                   {"grid_side", config.toy.grid_side},
                   {"text_len", config.toy.text_len},
                   {"patch_dim", config.toy.patch_dim},
                   {"vocab_size", config.toy.vocab_size}};
    root["encode"] = {{"window_k", config.encode.window_k},
                      {"tau_mean", config.encode.tau_mean},
                      {"key_layer", config.encode.key_layer},
                      {"iqr_factor", config.encode.iqr_factor}};
    json prefill = {{"prune_layers", config.prefill.prune_layers},
                    {"alpha", config.prefill.alpha},
                    {"spare_key_set", config.prefill.spare_key_set}};
    if (config.prefill.gamma.has_value()) prefill["gamma"] = *config.prefill.gamma;
    if (config.prefill.budget.has_value()) prefill["budget"] = *config.prefill.budget;
    root["prefill"] = prefill;
    root["decode"] = {{"keep_from_layer", config.decode.keep_from_layer},
                      {"max_new_tokens", config.decode.max_new_tokens},
                      {"greedy", config.decode.greedy}};
    json fixture = {{"kind", to_string(config.fixture.kind)},
                    {"block_noise", config.fixture.block_noise},
                    {"needle_gain", config.fixture.needle_gain}};
    if (!config.fixture.image_path.empty()) fixture["image_path"] = config.fixture.image_path;
    root["fixture"] = fixture;
    return root.dump(2) + "\n";
}

// --- encode stage per baseline -------------------------------------------

namespace {

struct PlainEncode {
    Matrix features;
    std::vector<double> cls_scores;  // CLS attention at key_layer, per token
};

PlainEncode plain_encode(const TokenGrid& grid, const ToyWeights& weights,
                         std::size_t key_layer) {
    Matrix hidden(grid.tokens.size() + 1, grid.cls.size());
    std::copy(grid.cls.begin(), grid.cls.end(), hidden.row(0).begin());
    for (std::size_t i = 0; i < grid.tokens.size(); ++i) {
        const auto& e = grid.tokens[i].embedding;
        std::copy(e.begin(), e.end(), hidden.row(i + 1).begin());
    }
    PlainEncode out;
    for (std::size_t layer = 0; layer < weights.config.encoder_layers; ++layer) {
        EncoderLayerResult res = encoder_layer_forward(hidden, weights, layer);
        hidden = std::move(res.hidden);
        if (layer == key_layer) {
            for (std::size_t i = 0; i < grid.tokens.size(); ++i) {
                out.cls_scores.push_back(res.attn.at(0, i + 1));
            }
        }
    }
    out.features = Matrix(grid.tokens.size(), hidden.cols());
    for (std::size_t i = 0; i < grid.tokens.size(); ++i) {
        auto src = hidden.row(i + 1);
        std::copy(src.begin(), src.end(), out.features.row(i).begin());
    }
    return out;
}

}  // namespace

EncodedFixture prepare_encoded_fixture(const PipelineConfig& config, std::uint64_t seed,
                                       std::optional<double> matched_survivor_target) {
    config.validate();
    EncodedFixture out;
    out.weights = std::make_unique<ToyWeights>(synthesize_weights(config.toy, seed));
    out.fixture = generate_fixture(config.fixture, config.toy, seed, out.weights.get());

    TokenGrid raw = encode_patches(out.fixture.patches, *out.weights);

    const bool merge_enabled =
        config.baseline == Baseline::mustdrop || config.baseline == Baseline::random_drop;
    const bool key_set_enabled = config.baseline == Baseline::mustdrop;

    Matrix features;
    if (merge_enabled) {
        MergeOutcome merged = local_spatial_merge(raw, *out.weights, config.encode);
        out.grid = std::move(merged.grid);
        out.merge_events = std::move(merged.events);
        if (key_set_enabled) {
            out.key_set = build_key_set(out.grid, *out.weights, config.encode);
        }
        features = encode_features(out.grid, *out.weights);
    } else {
        PlainEncode plain = plain_encode(raw, *out.weights, config.encode.key_layer);
        out.grid = std::move(raw);
        features = std::move(plain.features);
        if (config.baseline == Baseline::encoder_only) {
            // Selection baseline: keep the top-budget tokens by CLS score.
            const auto target = static_cast<std::size_t>(
                std::llround(matched_survivor_target.value_or(config.prefill.budget.value_or(
                    static_cast<double>(out.grid.tokens.size())))));
            std::vector<std::size_t> order(out.grid.tokens.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                if (plain.cls_scores[a] != plain.cls_scores[b]) {
                    return plain.cls_scores[a] > plain.cls_scores[b];
                }
                return out.grid.tokens[a].id < out.grid.tokens[b].id;
            });
            order.resize(std::min(target, order.size()));
            std::sort(order.begin(), order.end());  // keep grid order
            TokenGrid kept;
            kept.grid_rows = out.grid.grid_rows;
            kept.grid_cols = out.grid.grid_cols;
            kept.cls = out.grid.cls;
            for (std::size_t i : order) kept.tokens.push_back(out.grid.tokens[i]);
            features = features.gather_rows(order);
            out.grid = std::move(kept);
        }
    }

    out.sequence = assemble_sequence(out.fixture, out.grid, features, *out.weights);
    return out;
}

std::vector<EncodedFixture> prepare_suite(const PipelineConfig& config, std::size_t count) {
    std::vector<EncodedFixture> suite;
    suite.reserve(count);
    for (std::size_t seed = 0; seed < count; ++seed) {
        suite.push_back(prepare_encoded_fixture(config, seed));
    }
    return suite;
}

CalibrationResult calibrate_suite(const std::vector<EncodedFixture>& suite,
                                  const PipelineConfig& config) {
    std::vector<PreparedPrefillInput> inputs;
    inputs.reserve(suite.size());
    for (const auto& enc : suite) {
        inputs.push_back({enc.sequence, enc.weights.get(), enc.key_set});
    }
    return calibrate_gamma(inputs, config.prefill);
}

// --- full pipeline ---------------------------------------------------------

namespace {

std::set<int> pick_random_survivors(const std::vector<int>& alive, std::size_t target,
                                    std::uint64_t seed) {
    // Order ids by a seeded random key; the first `target` survive.
    SeededSource src(derive_seed(seed, 0x7D));
    std::vector<std::pair<std::uint64_t, int>> keyed;
    keyed.reserve(alive.size());
    for (int id : alive) keyed.push_back({src.next_u64(), id});
    std::sort(keyed.begin(), keyed.end());
    std::set<int> pruned;
    for (std::size_t i = target; i < keyed.size(); ++i) pruned.insert(keyed[i].second);
    return pruned;
}

CostReport build_report(const PipelineConfig& config, const RunArtifacts& artifacts,
                        std::size_t original_tokens) {
    const ModelGeometry geom = geometry_preset(config.geometry_preset);
    CostReport report;
    report.geometry_name = geom.name;
    report.original_vision_tokens = original_tokens;
    report.post_encode_vision_tokens = artifacts.post_encode_grid.tokens.size();
    for (std::size_t c : artifacts.prefill_layer_vision_counts) {
        report.prefill_layer_vision_tokens.push_back(c);
    }
    report.s_few_size = artifacts.s_few.size();
    report.key_set_size = artifacts.key_set.member_ids.size();
    if (!artifacts.decode.per_step_layer_vision.empty()) {
        const auto& post = artifacts.decode.per_step_layer_vision.front();
        for (std::size_t c : post) report.post_eviction_layer_vision_tokens.push_back(c);
        report.final_cached_vision_tokens = post.back();
    }

    report.kv_bytes_original = kv_bytes(report.original_vision_tokens, geom);
    report.kv_bytes_post_encode = kv_bytes(report.post_encode_vision_tokens, geom);
    report.kv_bytes_final = kv_bytes(report.final_cached_vision_tokens, geom);

    std::vector<std::uint64_t> vanilla(config.toy.lm_layers, original_tokens);
    report.flops_vanilla = flops_prefill_total(vanilla, geom);
    report.flops_actual =
        flops_prefill_total(report.prefill_layer_vision_tokens, geom);
    report.compression =
        compression_ratio(static_cast<double>(report.original_vision_tokens),
                          static_cast<double>(report.final_cached_vision_tokens));
    report.flops_reduction = 1.0 - report.flops_actual / report.flops_vanilla;
    return report;
}

}  // namespace

RunArtifacts run_pipeline(const PipelineConfig& config,
                          std::optional<double> matched_survivor_target) {
    config.validate();
    EncodedFixture enc =
        prepare_encoded_fixture(config, config.seed, matched_survivor_target);

    RunArtifacts artifacts;
    artifacts.fixture = enc.fixture;
    artifacts.post_encode_grid = enc.grid;
    artifacts.key_set = enc.key_set;

    const std::size_t original_tokens = enc.fixture.patches.rows();

    // Prefill, per baseline policy.
    PrefillResult prefill;
    if (config.baseline == Baseline::mustdrop) {
        PrefillConfig pc = config.prefill;
        if (pc.budget.has_value()) {
            std::vector<PreparedPrefillInput> self = {
                {enc.sequence, enc.weights.get(), enc.key_set}};
            CalibrationResult cal = calibrate_gamma(self, pc);
            pc.budget.reset();
            pc.gamma = cal.gamma;
        }
        artifacts.gamma_used = *pc.gamma;
        prefill = run_prefill(enc.sequence, *enc.weights, enc.key_set, pc);
        artifacts.decisions = prefill.decisions;
    } else if (config.baseline == Baseline::none ||
               config.baseline == Baseline::encoder_only) {
        prefill = run_prefill_with_policy(
            enc.sequence, *enc.weights, {},
            [](std::size_t, const Matrix&, const MultimodalSequence&) {
                return std::set<int>{};
            });
    } else {
        const double budget = matched_survivor_target.value_or(
            config.prefill.budget.value_or(0.0));
        const auto target = static_cast<std::size_t>(std::llround(budget));
        const std::size_t first_layer =
            config.prefill.prune_layers.empty() ? 0 : config.prefill.prune_layers.front();
        const bool random_mode = config.baseline == Baseline::random_drop;
        const std::uint64_t seed = config.seed;
        PrunePolicy policy = [target, random_mode, seed](std::size_t, const Matrix& attn,
                                                         const MultimodalSequence& seq) {
            const std::vector<int> alive = seq.vision_ids();
            if (alive.size() <= target) return std::set<int>{};
            if (random_mode) return pick_random_survivors(alive, target, seed);
            // fastv_like: global text attention only, keep the top scores.
            std::map<int, double> scores = global_scores(attn, seq);
            std::vector<std::pair<double, int>> order;
            order.reserve(scores.size());
            for (const auto& [id, v] : scores) order.push_back({v, id});
            std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            std::set<int> pruned;
            for (std::size_t i = target; i < order.size(); ++i) {
                pruned.insert(order[i].second);
            }
            return pruned;
        };
        prefill = run_prefill_with_policy(enc.sequence, *enc.weights, {first_layer}, policy);
    }

    artifacts.s_few = prefill.survivors;
    artifacts.prefill_layer_vision_counts = prefill.layer_vision_counts;

    // Decode; the output-aware cache policy only runs under mustdrop.
    DecodeConfig dc = config.decode;
    if (config.baseline != Baseline::mustdrop) {
        dc.keep_from_layer = config.toy.lm_layers;  // empty eviction range
    }
    KeyTokenSet decode_keys = config.baseline == Baseline::mustdrop ? enc.key_set
                                                                    : KeyTokenSet{};
    artifacts.decode = run_decode(prefill.cache, prefill.last_logits, artifacts.s_few,
                                  decode_keys, *enc.weights, dc);
    artifacts.generated_ids = artifacts.decode.generated_ids;

    // Unified audit stream, in lifecycle order.
    std::uint64_t seq_no = 1;
    for (const auto& m : enc.merge_events) {
        DropEvent e;
        e.seq = seq_no++;
        e.stage = Stage::encode;
        e.kind = DropKind::merge;
        e.layer = 0;
        e.ids = m.member_ids;
        e.score = m.similarity_sum;
        e.threshold = m.threshold;
        artifacts.trace.push_back(std::move(e));
    }
    for (const auto& d : artifacts.decisions) {
        if (d.pruned.empty()) continue;
        DropEvent e;
        e.seq = seq_no++;
        e.stage = Stage::prefill;
        e.kind = DropKind::prune;
        e.layer = d.layer;
        e.ids.assign(d.pruned.begin(), d.pruned.end());
        e.threshold = d.gamma_threshold;
        artifacts.trace.push_back(std::move(e));
    }
    for (const auto& ev : artifacts.decode.evict_events) {
        DropEvent e;
        e.seq = seq_no++;
        e.stage = Stage::decode;
        e.kind = DropKind::evict;
        e.layer = ev.layer;
        e.ids = {ev.token_id};
        artifacts.trace.push_back(std::move(e));
    }

    artifacts.report = build_report(config, artifacts, original_tokens);
    return artifacts;
}

std::string serialize_report(const RunArtifacts& artifacts, const PipelineConfig& config) {
    const CostReport& r = artifacts.report;
    json j;
    j["geometry"] = r.geometry_name;
    j["seed"] = config.seed;
    j["baseline"] = to_string(config.baseline);
    j["gamma_used"] = artifacts.gamma_used;
    j["original_vision_tokens"] = r.original_vision_tokens;
    j["post_encode_vision_tokens"] = r.post_encode_vision_tokens;
    j["prefill_layer_vision_tokens"] = r.prefill_layer_vision_tokens;
    j["s_few_size"] = r.s_few_size;
    j["key_set_size"] = r.key_set_size;
    j["post_eviction_layer_vision_tokens"] = r.post_eviction_layer_vision_tokens;
    j["final_cached_vision_tokens"] = r.final_cached_vision_tokens;
    j["kv_bytes"] = {{"original", r.kv_bytes_original},
                     {"post_encode", r.kv_bytes_post_encode},
                     {"final", r.kv_bytes_final}};
    j["flops"] = {{"vanilla", r.flops_vanilla}, {"actual", r.flops_actual}};
    j["compression_ratio"] = r.compression;
    j["flops_reduction"] = r.flops_reduction;
    j["generated_ids"] = artifacts.generated_ids;
    return j.dump(2) + "\n";
}

}  // namespace mustdrop
