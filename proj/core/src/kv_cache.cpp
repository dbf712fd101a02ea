// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/kv_cache.hpp"

#include <algorithm>
#include <string>

#include "mustdrop/errors.hpp"

namespace mustdrop {

void KVCache::check_layer(std::size_t index) const {
    if (index >= layers_.size()) {
        throw CacheError("cache layer " + std::to_string(index) + " out of range (" +
                         std::to_string(layers_.size()) + " layers)");
    }
}

void KVCache::append(std::size_t layer, Entry entry) {
    check_layer(layer);
    auto& entries = layers_[layer];
    for (const auto& e : entries) {
        if (e.id == entry.id) {
            throw CacheError("duplicate token id " + std::to_string(entry.id) +
                             " in cache layer " + std::to_string(layer));
        }
    }
    entries.push_back(std::move(entry));
}

const std::vector<KVCache::Entry>& KVCache::layer(std::size_t index) const {
    check_layer(index);
    return layers_[index];
}

std::vector<int> KVCache::evict_vision_except(std::size_t layer,
                                              const std::set<int>& keep) {
    check_layer(layer);
    std::vector<int> removed;
    auto& entries = layers_[layer];
    std::vector<Entry> kept;
    kept.reserve(entries.size());
    for (auto& e : entries) {
        if (e.modality == Modality::vision && keep.find(e.id) == keep.end()) {
            removed.push_back(e.id);
        } else {
            kept.push_back(std::move(e));
        }
    }
    entries = std::move(kept);
    return removed;
}

std::size_t KVCache::vision_count(std::size_t layer) const {
    check_layer(layer);
    return static_cast<std::size_t>(
        std::count_if(layers_[layer].begin(), layers_[layer].end(),
                      [](const Entry& e) { return e.modality == Modality::vision; }));
}

std::size_t KVCache::entry_count(std::size_t layer) const {
    check_layer(layer);
    return layers_[layer].size();
}

std::size_t KVCache::total_entries() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += l.size();
    return n;
}

}  // namespace mustdrop
