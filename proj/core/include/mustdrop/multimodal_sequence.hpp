// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "mustdrop/errors.hpp"
#include "mustdrop/kv_cache.hpp"
#include "mustdrop/matrix.hpp"

namespace mustdrop {

/// Ordered vision+text tokens entering the language stack. Vision entries
/// always precede text entries; embeddings live in a parallel matrix so the
/// forward pass can update them in place.
struct MultimodalSequence {
    struct Entry {
        int id = 0;
        Modality modality = Modality::text;
    };

    std::vector<Entry> entries;
    Matrix hidden;  // entries.size() x hidden_dim, row i belongs to entries[i]

    std::size_t size() const { return entries.size(); }

    std::size_t vision_count() const {
        std::size_t n = 0;
        for (const auto& e : entries)
            if (e.modality == Modality::vision) ++n;
        return n;
    }

    std::size_t text_count() const { return entries.size() - vision_count(); }

    std::vector<int> vision_ids() const {
        std::vector<int> ids;
        for (const auto& e : entries)
            if (e.modality == Modality::vision) ids.push_back(e.id);
        return ids;
    }

    void validate() const {
        if (entries.size() != hidden.rows()) {
            throw ShapeError("sequence entry/embedding row count mismatch");
        }
        bool seen_text = false;
        for (const auto& e : entries) {
            if (e.modality == Modality::text) {
                seen_text = true;
            } else if (seen_text) {
                throw ConfigError("vision entries must precede all text entries");
            }
        }
        if (text_count() == 0) throw ConfigError("sequence needs at least one text token");
    }

    /// Drop the listed entries (by index), keeping order.
    void remove_indices(const std::vector<std::size_t>& sorted_indices);
};

}  // namespace mustdrop
