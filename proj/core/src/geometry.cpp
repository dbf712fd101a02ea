// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/geometry.hpp"

#include "mustdrop/errors.hpp"

namespace mustdrop {

void ModelGeometry::validate() const {
    if (num_layers == 0 || hidden_dim == 0 || ffn_dim == 0 || num_heads == 0) {
        throw ConfigError("geometry '" + name + "': all dimensions must be >= 1");
    }
    if (hidden_dim % num_heads != 0) {
        throw ConfigError("geometry '" + name + "': hidden_dim not divisible by num_heads");
    }
    if (bytes_per_element != 1 && bytes_per_element != 2 && bytes_per_element != 4 &&
        bytes_per_element != 8) {
        throw ConfigError("geometry '" + name + "': bytes_per_element must be 1, 2, 4 or 8");
    }
}

ModelGeometry geometry_preset(const std::string& name) {
    // Both presets use the 7B LLaMA stack in fp16.
    if (name == "llava-1.5-7b" || name == "llava-next-7b") {
        return ModelGeometry{name, 32, 4096, 11008, 32, 2};
    }
    throw ConfigError("unknown geometry preset '" + name + "'");
}

std::vector<std::string> geometry_preset_names() {
    return {"llava-1.5-7b", "llava-next-7b"};
}

}  // namespace mustdrop
