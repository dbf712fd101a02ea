// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace mustdrop {

enum class Stage { encode, prefill, decode };
enum class DropKind { merge, prune, evict };

std::string to_string(Stage stage);
std::string to_string(DropKind kind);

/// One line of the audit stream. For merges, `ids` lists every window member
/// (the smallest id survives as the representative); for prunes, the ids
/// removed at that layer; for evictions, the single cache entry removed.
struct DropEvent {
    std::uint64_t seq = 0;  // strictly increasing per run
    Stage stage = Stage::encode;
    DropKind kind = DropKind::merge;
    std::size_t layer = 0;
    std::vector<int> ids;
    std::optional<double> score;      // merge: window similarity sum
    std::optional<double> threshold;  // merge: tau; prune: gamma * sum V_j

    std::string to_json_line() const;
};

/// Line-delimited JSON, one event per line, in seq order. Throws IoError when
/// the stream is not writable.
void emit_trace(const std::vector<DropEvent>& events, std::ostream& out);
void emit_trace(const std::vector<DropEvent>& events, const std::string& path);

std::vector<DropEvent> parse_trace(std::istream& in);
std::vector<DropEvent> parse_trace_file(const std::string& path);

/// Surviving-token sets reconstructed by replaying a trace against the
/// initial vision-token id set.
struct TraceReplay {
    std::set<int> post_encode;       // after all merges
    std::set<int> post_prefill;      // after all prunes (S_few)
    std::set<int> removed_by_merge;  // members folded into a representative
    std::set<int> removed_by_prune;
    std::set<int> evicted_ids;       // union over layers
};

TraceReplay replay_trace(const std::vector<DropEvent>& events,
                         const std::set<int>& initial_ids);

/// Checks the structural invariants: strictly increasing seq numbers and a
/// single terminal (merge/prune) event per removed id. Throws Error on
/// violation.
void validate_trace(const std::vector<DropEvent>& events);

}  // namespace mustdrop
