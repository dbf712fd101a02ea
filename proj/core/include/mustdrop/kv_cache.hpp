// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <set>
#include <vector>

namespace mustdrop {

enum class Modality { vision, text };

/// Per-layer key/value store labeled by token id and modality.
///
/// Entries keep the order in which they were appended (sequence order during
/// prefill, generation order afterwards), which fixes the accumulation order
/// of every attention sum over the cache. Text entries are never evicted.
class KVCache {
public:
    struct Entry {
        int id = 0;
        Modality modality = Modality::text;
        std::vector<double> key;
        std::vector<double> value;
    };

    KVCache() = default;
    explicit KVCache(std::size_t num_layers) : layers_(num_layers) {}

    std::size_t num_layers() const { return layers_.size(); }

    /// Eq.-style append of one token's K/V at one layer. Throws CacheError on
    /// a layer index outside the cache or a duplicate id within the layer.
    void append(std::size_t layer, Entry entry);

    const std::vector<Entry>& layer(std::size_t index) const;

    /// Remove vision entries of `layer` whose id is not in `keep`. Returns the
    /// removed ids in cache order. Text entries are untouched.
    std::vector<int> evict_vision_except(std::size_t layer, const std::set<int>& keep);

    std::size_t vision_count(std::size_t layer) const;
    std::size_t entry_count(std::size_t layer) const;
    std::size_t total_entries() const;

private:
    void check_layer(std::size_t index) const;

    std::vector<std::vector<Entry>> layers_;
};

}  // namespace mustdrop
