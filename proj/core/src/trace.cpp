// Copyright (c) 2026 mustdrop contributors
// SPDX-License-Identifier: Apache-2.0

#include "mustdrop/trace.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mustdrop/errors.hpp"

namespace mustdrop {

using nlohmann::json;

std::string to_string(Stage stage) {
    switch (stage) {
        case Stage::encode: return "encode";
        case Stage::prefill: return "prefill";
        case Stage::decode: return "decode";
    }
    return "?";
}

std::string to_string(DropKind kind) {
    switch (kind) {
        case DropKind::merge: return "merge";
        case DropKind::prune: return "prune";
        case DropKind::evict: return "evict";
    }
    return "?";
}

namespace {

Stage stage_from(const std::string& s, std::size_t offset) {
    if (s == "encode") return Stage::encode;
    if (s == "prefill") return Stage::prefill;
    if (s == "decode") return Stage::decode;
    throw ParseError("unknown trace stage '" + s + "'", offset);
}

DropKind kind_from(const std::string& s, std::size_t offset) {
    if (s == "merge") return DropKind::merge;
    if (s == "prune") return DropKind::prune;
    if (s == "evict") return DropKind::evict;
    throw ParseError("unknown trace kind '" + s + "'", offset);
}

}  // namespace

std::string DropEvent::to_json_line() const {
    json j;
    j["seq"] = seq;
    j["stage"] = to_string(stage);
    j["kind"] = to_string(kind);
    j["layer"] = layer;
    j["ids"] = ids;
    if (score.has_value()) j["score"] = *score; else j["score"] = nullptr;
    if (threshold.has_value()) j["threshold"] = *threshold; else j["threshold"] = nullptr;
    return j.dump();  // object keys serialise sorted, so output is stable
}

void emit_trace(const std::vector<DropEvent>& events, std::ostream& out) {
    for (const auto& e : events) {
        out << e.to_json_line() << '\n';
        if (!out) throw IoError("trace destination not writable");
    }
}

void emit_trace(const std::vector<DropEvent>& events, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open trace file '" + path + "'");
    emit_trace(events, out);
}

std::vector<DropEvent> parse_trace(std::istream& in) {
    std::vector<DropEvent> events;
    std::string line;
    std::size_t offset = 0;
    while (std::getline(in, line)) {
        if (!line.empty()) {
            json j;
            try {
                j = json::parse(line);
            } catch (const json::parse_error& e) {
                throw ParseError(std::string("bad trace line: ") + e.what(),
                                 offset + e.byte);
            }
            DropEvent ev;
            ev.seq = j.at("seq").get<std::uint64_t>();
            ev.stage = stage_from(j.at("stage").get<std::string>(), offset);
            ev.kind = kind_from(j.at("kind").get<std::string>(), offset);
            ev.layer = j.at("layer").get<std::size_t>();
            ev.ids = j.at("ids").get<std::vector<int>>();
            if (!j.at("score").is_null()) ev.score = j.at("score").get<double>();
            if (!j.at("threshold").is_null()) ev.threshold = j.at("threshold").get<double>();
            events.push_back(std::move(ev));
        }
        offset += line.size() + 1;
    }
    return events;
}

std::vector<DropEvent> parse_trace_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open trace file '" + path + "'");
    return parse_trace(in);
}

TraceReplay replay_trace(const std::vector<DropEvent>& events,
                         const std::set<int>& initial_ids) {
    TraceReplay replay;
    std::set<int> alive = initial_ids;
    bool encode_closed = false;
    for (const auto& e : events) {
        switch (e.kind) {
            case DropKind::merge: {
                // min id survives as the representative
                int keep = e.ids.front();
                for (int id : e.ids) keep = std::min(keep, id);
                for (int id : e.ids) {
                    if (id == keep) continue;
                    alive.erase(id);
                    replay.removed_by_merge.insert(id);
                }
                break;
            }
            case DropKind::prune:
                if (!encode_closed) {
                    replay.post_encode = alive;
                    encode_closed = true;
                }
                for (int id : e.ids) {
                    alive.erase(id);
                    replay.removed_by_prune.insert(id);
                }
                break;
            case DropKind::evict:
                if (!encode_closed) {
                    replay.post_encode = alive;
                    encode_closed = true;
                }
                for (int id : e.ids) replay.evicted_ids.insert(id);
                break;
        }
    }
    if (!encode_closed) replay.post_encode = alive;
    replay.post_prefill = alive;
    return replay;
}

void validate_trace(const std::vector<DropEvent>& events) {
    std::uint64_t last_seq = 0;
    bool first = true;
    std::set<int> removed;
    for (const auto& e : events) {
        if (!first && e.seq <= last_seq) {
            throw Error("trace sequence numbers not strictly increasing at seq " +
                        std::to_string(e.seq));
        }
        first = false;
        last_seq = e.seq;

        if (e.kind == DropKind::merge) {
            int keep = e.ids.front();
            for (int id : e.ids) keep = std::min(keep, id);
            for (int id : e.ids) {
                if (id == keep) continue;
                if (!removed.insert(id).second) {
                    throw Error("token " + std::to_string(id) +
                                " removed by more than one terminal event");
                }
            }
        } else if (e.kind == DropKind::prune) {
            for (int id : e.ids) {
                if (!removed.insert(id).second) {
                    throw Error("token " + std::to_string(id) +
                                " removed by more than one terminal event");
                }
            }
        }
    }
}

}  // namespace mustdrop
