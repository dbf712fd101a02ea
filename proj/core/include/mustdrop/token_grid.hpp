// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

namespace mustdrop {

/// One vision token on the 2D grid. After merging, a token may stand for
/// several original patches: `mass` counts them, `provenance` lists their
/// patch-grid token ids, and `position` is the mass-weighted centroid.
struct VisionToken {
    int id = 0;                      // stable; survives merging as min of members
    std::vector<double> embedding;
    double row = 0.0;                // centroid, grid coordinates
    double col = 0.0;
    std::size_t mass = 1;
    std::vector<int> provenance;     // sorted original token ids, size == mass
};

/// 2D-arranged vision tokens plus the [CLS] summary embedding (token id 0,
/// kept outside the grid and never merged).
struct TokenGrid {
    std::vector<VisionToken> tokens;
    std::size_t grid_rows = 0;
    std::size_t grid_cols = 0;
    std::vector<double> cls;

    std::size_t total_token_count() const { return tokens.size() + 1; }

    std::size_t total_mass() const {
        std::size_t m = 0;
        for (const auto& t : tokens) m += t.mass;
        return m;
    }
};

}  // namespace mustdrop
