#include <algorithm>
#include <set>

#include <doctest.h>

#include "mustdrop/errors.hpp"
#include "mustdrop/pipeline.hpp"
#include "mustdrop/prefill_stage.hpp"
#include "mustdrop/rng.hpp"
#include "oracles.hpp"

using namespace mustdrop;

namespace {

/// Sequence with 3 vision + 2 text entries and a hand-set attention map.
struct TinyCase {
    MultimodalSequence seq;
    Matrix attn;
};

TinyCase tiny_case() {
    TinyCase t;
    t.seq.hidden = Matrix(5, 4, 0.0);
    t.seq.entries = {{1, Modality::vision},
                     {2, Modality::vision},
                     {3, Modality::vision},
                     {100, Modality::text},
                     {101, Modality::text}};
    // rows: queries; the two text rows carry the scores that matter
    t.attn = Matrix(5, 5, 0.0);
    // text row 3: mostly on vision 1
    t.attn.at(3, 0) = 0.6;
    t.attn.at(3, 1) = 0.05;
    t.attn.at(3, 2) = 0.05;
    t.attn.at(3, 3) = 0.3;
    // text row 4: spread
    t.attn.at(4, 0) = 0.1;
    t.attn.at(4, 1) = 0.15;
    t.attn.at(4, 2) = 0.05;
    t.attn.at(4, 3) = 0.3;
    t.attn.at(4, 4) = 0.4;
    return t;
}

PipelineConfig blocks_config(std::uint64_t seed, double gamma) {
    PipelineConfig cfg;
    cfg.seed = seed;
    cfg.fixture.kind = FixtureKind::blocks;
    cfg.prefill.gamma = gamma;
    return cfg;
}

}  // namespace

TEST_CASE("global scores are per-vision column sums over text rows") {
    TinyCase t = tiny_case();
    auto scores = global_scores(t.attn, t.seq);
    CHECK(scores.size() == 3);
    CHECK(scores.at(1) == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(scores.at(2) == doctest::Approx(0.2).epsilon(1e-12));
    CHECK(scores.at(3) == doctest::Approx(0.1).epsilon(1e-12));

    // single text row: scores equal that row's entries
    MultimodalSequence one;
    one.hidden = Matrix(3, 4, 0.0);
    one.entries = {{1, Modality::vision}, {2, Modality::vision}, {50, Modality::text}};
    Matrix attn(3, 3, 0.0);
    attn.at(2, 0) = 0.25;
    attn.at(2, 1) = 0.35;
    auto single = global_scores(attn, one);
    CHECK(single.at(1) == 0.25);
    CHECK(single.at(2) == 0.35);
}

TEST_CASE("global scores match a brute-force column sum on random maps") {
    SeededSource src(3);
    MultimodalSequence seq;
    seq.hidden = Matrix(12, 4, 0.0);
    for (int i = 0; i < 8; ++i) seq.entries.push_back({i + 1, Modality::vision});
    for (int i = 0; i < 4; ++i) seq.entries.push_back({100 + i, Modality::text});
    for (int round = 0; round < 5; ++round) {
        Matrix attn = oracles::random_matrix(src, 12, 12);
        for (double& x : attn.data()) x = std::abs(x);
        auto scores = global_scores(attn, seq);
        for (int j = 0; j < 8; ++j) {
            double want = 0.0;
            for (int i = 8; i < 12; ++i) want += attn.at(i, j);
            CHECK(scores.at(j + 1) == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("candidate set thresholds") {
    std::map<int, double> uniform;
    for (int j = 1; j <= 10; ++j) uniform[j] = 0.1;

    CHECK(candidate_set(uniform, 0.0).empty());            // all V_j > 0
    CHECK(candidate_set(uniform, 0.8 / 10).empty());       // uniform beats 0.8/M
    CHECK(candidate_set(uniform, 1.0).size() == 10);       // threshold dominates
    CHECK(candidate_set(uniform, 0.1).size() == 10);       // V_j == gamma*sum included
}

TEST_CASE("individual filter boundaries and rescue") {
    TinyCase t = tiny_case();
    std::set<int> all{1, 2, 3};

    CHECK(individual_filter(t.attn, t.seq, all, 0.0).empty());   // strict <
    CHECK(individual_filter(t.attn, t.seq, all, 1.1) == all);    // entries <= 1

    // token 1 has tiny global mass in row 4 but 0.6 from row 3: in D by a
    // generous gamma yet rescued at alpha 0.1
    auto scores = global_scores(t.attn, t.seq);
    auto d = candidate_set(scores, 1.0);
    CHECK(d.count(1) == 1);
    auto confirmed = individual_filter(t.attn, t.seq, d, 0.1);
    CHECK(confirmed.count(1) == 0);   // rescued
    CHECK(confirmed.count(3) == 1);   // max 0.05 < 0.1
}

TEST_CASE("prune_at_layer spares key members and handles gamma zero") {
    TinyCase t = tiny_case();
    PrefillConfig cfg;
    cfg.gamma = 1.0;  // everything is a candidate
    cfg.alpha = 0.2;

    KeyTokenSet keys;
    keys.member_ids = {3};  // the lowest-scoring token is protected

    MultimodalSequence seq = t.seq;
    PruneDecision d = prune_at_layer(seq, t.attn, keys, cfg, 1);
    CHECK(d.spared_by_key.count(3) == 1);
    CHECK(d.pruned.count(3) == 0);
    CHECK(d.pruned.count(2) == 1);       // max 0.15 < 0.2, not protected
    CHECK(d.pruned.count(1) == 0);       // rescued by 0.6
    CHECK(seq.vision_count() == 2);

    // gamma 0: nothing qualifies, sequence unchanged
    MultimodalSequence seq2 = t.seq;
    PrefillConfig zero;
    zero.gamma = 0.0;
    PruneDecision d0 = prune_at_layer(seq2, t.attn, keys, zero, 1);
    CHECK(d0.pruned.empty());
    CHECK(d0.candidates.empty());
    CHECK(seq2.vision_count() == 3);
}

TEST_CASE("prune_at_layer agrees with the set-algebra oracle on 50 fixtures") {
    ToyConfig toy;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        PipelineConfig cfg = blocks_config(seed, 0.04);
        EncodedFixture enc = prepare_encoded_fixture(cfg, seed);
        MultimodalSequence seq = enc.sequence;
        Matrix attn;
        for (std::size_t layer = 0; layer <= 1; ++layer) {
            attn = lm_layer_forward(seq, *enc.weights, layer, nullptr);
        }
        PrefillConfig pc = cfg.prefill;
        MultimodalSequence probe = seq;
        PruneDecision d = prune_at_layer(probe, attn, enc.key_set, pc, 1);
        std::set<int> want = oracles::dual_filter_reference(
            attn, seq, enc.key_set.member_ids, *pc.gamma, pc.alpha, pc.spare_key_set);
        CHECK(d.pruned == want);
        CHECK(std::includes(d.candidates.begin(), d.candidates.end(), d.pruned.begin(),
                            d.pruned.end()));
    }
}

TEST_CASE("run_prefill without prune layers keeps every vision token") {
    PipelineConfig cfg = blocks_config(4, 0.05);
    cfg.prefill.prune_layers = {};
    EncodedFixture enc = prepare_encoded_fixture(cfg, 4);
    PrefillResult r = run_prefill(enc.sequence, *enc.weights, enc.key_set, cfg.prefill);
    CHECK(r.survivors.size() == enc.grid.tokens.size());
    CHECK(r.decisions.empty());
    // cache layer n holds what was alive at layer n
    for (std::size_t l = 0; l < enc.weights->config.lm_layers; ++l) {
        CHECK(r.cache.vision_count(l) == enc.grid.tokens.size());
    }
}

TEST_CASE("adding a second prune layer never increases survivors") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        PipelineConfig cfg = blocks_config(seed, 0.05);
        EncodedFixture enc = prepare_encoded_fixture(cfg, seed);

        PrefillConfig single = cfg.prefill;
        single.prune_layers = {1};
        PrefillResult a = run_prefill(enc.sequence, *enc.weights, enc.key_set, single);

        PrefillConfig both = cfg.prefill;
        both.prune_layers = {1, 2};
        PrefillResult b = run_prefill(enc.sequence, *enc.weights, enc.key_set, both);

        CHECK(b.survivors.size() <= a.survivors.size());
    }
}

TEST_CASE("run_prefill invariants: monotone counts, pruned within candidates") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        PipelineConfig cfg = blocks_config(seed, 0.05);
        EncodedFixture enc = prepare_encoded_fixture(cfg, seed);
        PrefillResult r = run_prefill(enc.sequence, *enc.weights, enc.key_set, cfg.prefill);

        for (std::size_t l = 1; l < r.layer_vision_counts.size(); ++l) {
            CHECK(r.layer_vision_counts[l] <= r.layer_vision_counts[l - 1]);
        }
        for (const auto& d : r.decisions) {
            CHECK(std::includes(d.candidates.begin(), d.candidates.end(),
                                d.pruned.begin(), d.pruned.end()));
            for (int id : d.pruned) CHECK(enc.key_set.contains(id) == false);
            // dual filter only shrinks the global-only set
            for (int id : d.pruned) CHECK(d.candidates.count(id) == 1);
        }
        // cache keeps what was alive per layer, pruning does not rewrite it
        for (std::size_t l = 0; l < r.layer_vision_counts.size(); ++l) {
            CHECK(r.cache.vision_count(l) == r.layer_vision_counts[l]);
        }
    }
}

TEST_CASE("calibrate_gamma: full budget needs no pruning") {
    PipelineConfig cfg = blocks_config(0, 0.05);
    cfg.prefill.gamma.reset();
    auto suite = prepare_suite(cfg, 10);

    double mean_pool = 0.0;
    for (const auto& enc : suite) mean_pool += static_cast<double>(enc.grid.tokens.size());
    mean_pool /= 10.0;

    PipelineConfig budget_cfg = cfg;
    budget_cfg.prefill.budget = mean_pool;
    CalibrationResult cal = calibrate_suite(suite, budget_cfg);
    CHECK(cal.achieved_mean == doctest::Approx(mean_pool).epsilon(0.05));
    CHECK(cal.gamma < 0.05);
}

TEST_CASE("calibrate_gamma rejects budgets below the key-set floor") {
    PipelineConfig cfg = blocks_config(0, 0.05);
    cfg.prefill.gamma.reset();
    auto suite = prepare_suite(cfg, 20);

    double floor = 0.0;
    for (const auto& enc : suite)
        floor += static_cast<double>(enc.key_set.member_ids.size());
    floor /= 20.0;
    if (floor > 0.0) {
        PipelineConfig bad = cfg;
        bad.prefill.budget = floor * 0.5;
        CHECK_THROWS_AS(calibrate_suite(suite, bad), CalibrationError);
    }

    PipelineConfig zero = cfg;
    zero.prefill.budget = 0.0;
    CHECK_THROWS_AS(calibrate_suite(suite, zero), ConfigError);  // budget must be > 0
}

TEST_CASE("calibrate_gamma reaches a mid-range budget on a small suite") {
    PipelineConfig cfg = blocks_config(0, 0.05);
    cfg.prefill.gamma.reset();
    cfg.prefill.budget = 14.0;
    auto suite = prepare_suite(cfg, 30);
    CalibrationResult cal = calibrate_suite(suite, cfg);
    CHECK(cal.achieved_mean == doctest::Approx(14.0).epsilon(0.05));
}
