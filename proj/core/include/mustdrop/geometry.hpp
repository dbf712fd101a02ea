// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mustdrop {

/// Transformer geometry used by the analytic cost model. Presets mirror the
/// deployed models whose published memory/FLOPs figures the accounting
/// reproduces; the toy stack that actually runs is configured separately.
struct ModelGeometry {
    std::string name;
    std::size_t num_layers = 0;
    std::size_t hidden_dim = 0;
    std::size_t ffn_dim = 0;
    std::size_t num_heads = 0;
    std::size_t bytes_per_element = 2;

    void validate() const;
};

/// Look up a named preset ("llava-1.5-7b", "llava-next-7b"). Throws
/// ConfigError for unknown names.
ModelGeometry geometry_preset(const std::string& name);

std::vector<std::string> geometry_preset_names();

}  // namespace mustdrop
