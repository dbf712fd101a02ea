// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mustdrop/matrix.hpp"
#include "mustdrop/model.hpp"

namespace mustdrop {

enum class FixtureKind { noise, blocks, needle, image_file };

std::string to_string(FixtureKind kind);
FixtureKind fixture_kind_from(const std::string& name);

struct FixtureSpec {
    FixtureKind kind = FixtureKind::blocks;
    std::string image_path;       // image_file only
    double block_noise = 0.2;     // blocks: per-entry jitter amplitude
    double needle_gain = 8.0;     // needle: norm of the planted text embedding

    void validate() const;
};

/// One synthetic prompt: image patches plus text token ids. Needle fixtures
/// carry the planted patch's token id and a constructed embedding that
/// replaces the last text token's embedding so the query references the
/// needle.
struct Fixture {
    FixtureKind kind = FixtureKind::noise;
    Matrix patches;                       // num_patches x patch_dim
    std::vector<int> text_token_ids;      // vocabulary ids
    std::optional<int> needle_token_id;   // grid token id (patch index + 1)
    std::optional<std::vector<double>> needle_text_embedding;
};

/// Deterministic fixture synthesis; same (spec, seed, toy) twice gives the
/// same fixture. Needle construction needs the model weights to aim the text
/// query (see build_needle_text_embedding).
Fixture generate_fixture(const FixtureSpec& spec, const ToyConfig& toy,
                         std::uint64_t seed, const ToyWeights* weights = nullptr);

/// Text embedding aimed at the needle token: the sum over the scheduled prune
/// layers of the needle's key row pulled back through that layer's query
/// projection, standardised and scaled by `gain` so it dominates the residual
/// stream. Keys come from a vision-only forward (text never influences
/// vision states under the causal mask).
std::vector<double> build_needle_text_embedding(const Matrix& vision_features,
                                                std::size_t needle_index,
                                                const ToyWeights& weights,
                                                const std::vector<std::size_t>& prune_layers,
                                                double gain);

/// Build the LM input sequence: vision entries in grid order carrying the
/// encoder features, then text entries embedded through the tied vocabulary
/// table. A needle fixture's constructed embedding replaces the last text
/// row. Text sequence ids start at grid_side^2 + 1.
MultimodalSequence assemble_sequence(const Fixture& fixture, const TokenGrid& merged_grid,
                                     const Matrix& features, const ToyWeights& weights);

/// Binary PGM (P5) reader: returns the pixel grid scaled to [0, 1]. Throws
/// ParseError with the byte offset of the first malformed byte.
Matrix read_pgm(const std::string& path);
Matrix parse_pgm(const std::string& bytes);

/// Tile a [0,1] pixel grid into grid_side^2 patches of patch_dim pixels each.
/// Requires the image to split evenly and the tile area to equal patch_dim.
Matrix tile_image_to_patches(const Matrix& pixels, std::size_t grid_side,
                             std::size_t patch_dim);

}  // namespace mustdrop
