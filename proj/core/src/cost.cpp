// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/cost.hpp"

#include "mustdrop/errors.hpp"

namespace mustdrop {

std::uint64_t kv_bytes(std::uint64_t tokens, const ModelGeometry& geometry) {
    geometry.validate();
    return tokens * 2ULL * geometry.num_layers * geometry.hidden_dim *
           geometry.bytes_per_element;
}

double kv_megabytes(std::uint64_t tokens, const ModelGeometry& geometry) {
    return static_cast<double>(kv_bytes(tokens, geometry)) / 1e6;
}

double flops_prefill_layer(std::uint64_t n_tokens, const ModelGeometry& geometry) {
    geometry.validate();
    const double n = static_cast<double>(n_tokens);
    const double d = static_cast<double>(geometry.hidden_dim);
    const double m = static_cast<double>(geometry.ffn_dim);
    return 4.0 * n * d * d + 2.0 * n * n * d + 2.0 * n * d * m;
}

double flops_decode_step_layer(std::uint64_t cache_len, const ModelGeometry& geometry) {
    geometry.validate();
    const double c = static_cast<double>(cache_len);
    const double d = static_cast<double>(geometry.hidden_dim);
    const double m = static_cast<double>(geometry.ffn_dim);
    return 4.0 * d * d + 2.0 * c * d + 2.0 * d * m;
}

double flops_prefill_total(const std::vector<std::uint64_t>& per_layer_tokens,
                           const ModelGeometry& geometry) {
    if (per_layer_tokens.empty()) throw ConfigError("flops need at least one layer count");
    double total = 0.0;
    const std::size_t slots = per_layer_tokens.size();
    for (std::size_t layer = 0; layer < geometry.num_layers; ++layer) {
        // Stretch a short schedule across the accounting depth.
        const std::size_t slot = layer * slots / geometry.num_layers;
        total += flops_prefill_layer(per_layer_tokens[slot], geometry);
    }
    return total;
}

double compression_ratio(double original, double final_avg) {
    if (original <= 0.0) throw ConfigError("compression ratio needs original > 0");
    return 1.0 - final_avg / original;
}

}  // namespace mustdrop
