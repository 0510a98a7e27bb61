// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "doq/errors.hpp"
#include "doq/ledger.hpp"

namespace doq {

// Per-direction packet and frame accounting extracted from a qlog trace.
// Directions are relative to the trace's emitter: packet_sent events land in
// `sent`, packet_received in `received`.
struct QlogDirectionTotals {
    std::uint64_t packets = 0;
    std::uint64_t octets = 0;
    std::array<FrameTally, kFrameTypeCount> frames{};

    const FrameTally& frame(FrameType t) const { return frames[static_cast<int>(t)]; }
    bool operator==(const QlogDirectionTotals&) const = default;
};

struct QlogSummary {
    QlogDirectionTotals sent;
    QlogDirectionTotals received;

    bool operator==(const QlogSummary&) const = default;
};

inline FrameType frame_type_from_name(std::string_view name) {
    if (name == "stream") return FrameType::Stream;
    if (name == "datagram") return FrameType::Datagram;
    if (name == "max_streams") return FrameType::MaxStreams;
    if (name == "ack") return FrameType::Ack;
    if (name == "padding") return FrameType::Padding;
    if (name == "ping") return FrameType::Ping;
    return FrameType::Other;
}

namespace detail {

inline void tally_event(QlogSummary& out, const nlohmann::json& event) {
    if (!event.is_object()) throw MalformedTrace("qlog event is not an object");
    auto name_it = event.find("name");
    if (name_it == event.end() || !name_it->is_string())
        throw MalformedTrace("qlog event lacks a name");
    const std::string& name = name_it->get_ref<const std::string&>();

    QlogDirectionTotals* dir = nullptr;
    if (name == "transport:packet_sent" || name == "packet_sent")
        dir = &out.sent;
    else if (name == "transport:packet_received" || name == "packet_received")
        dir = &out.received;
    else
        return; // other event kinds are none of our business

    auto data_it = event.find("data");
    if (data_it == event.end() || !data_it->is_object())
        throw MalformedTrace("packet event lacks a data object");

    std::uint64_t packet_size = 0;
    if (auto hdr = data_it->find("header"); hdr != data_it->end() && hdr->is_object()) {
        if (auto sz = hdr->find("packet_size"); sz != hdr->end() && sz->is_number())
            packet_size = sz->get<std::uint64_t>();
    }
    dir->packets += 1;
    dir->octets += packet_size;

    auto frames_it = data_it->find("frames");
    if (frames_it == data_it->end()) return; // frameless packet: bytes stay packet-level
    if (!frames_it->is_array()) throw MalformedTrace("packet frames is not an array");

    // Frames with an explicit length own those bytes; whatever the packet
    // has left is split evenly across the rest, remainder to the first.
    std::uint64_t explicit_octets = 0;
    std::uint64_t implicit_frames = 0;
    for (const auto& f : *frames_it) {
        if (!f.is_object()) throw MalformedTrace("frame entry is not an object");
        if (auto len = f.find("length"); len != f.end() && len->is_number())
            explicit_octets += len->get<std::uint64_t>();
        else
            ++implicit_frames;
    }
    std::uint64_t remainder = packet_size > explicit_octets ? packet_size - explicit_octets : 0;
    std::uint64_t share = implicit_frames ? remainder / implicit_frames : 0;
    std::uint64_t extra = implicit_frames ? remainder % implicit_frames : 0;

    for (const auto& f : *frames_it) {
        std::string type = "other";
        if (auto t = f.find("frame_type"); t != f.end() && t->is_string())
            type = t->get<std::string>();
        std::uint64_t octets;
        if (auto len = f.find("length"); len != f.end() && len->is_number()) {
            octets = len->get<std::uint64_t>();
        } else {
            octets = share + extra;
            extra = 0;
        }
        auto& tally = dir->frames[static_cast<int>(frame_type_from_name(type))];
        tally.count += 1;
        tally.octets += octets;
    }
}

} // namespace detail

// Accepts either one JSON event per line (the streaming form) or a single
// JSON document that is an array of events or wraps them under
// traces[i].events. Unknown frame types count under "other".
inline QlogSummary parse_qlog_frames(const std::string& text) {
    QlogSummary out;

    auto first = text.find_first_not_of(" \t\r\n");
    if (first == std::string::npos) return out; // empty trace, empty histogram

    if (text[first] == '[') {
        nlohmann::json events = nlohmann::json::parse(text, nullptr, false);
        if (events.is_discarded() || !events.is_array())
            throw MalformedTrace("qlog document is not an event array");
        for (const auto& e : events) detail::tally_event(out, e);
        return out;
    }

    // Try a whole-document object first (qlog main schema), else line-wise.
    nlohmann::json doc = nlohmann::json::parse(text, nullptr, false);
    if (!doc.is_discarded() && doc.is_object() && doc.contains("traces")) {
        if (!doc["traces"].is_array()) throw MalformedTrace("traces is not an array");
        for (const auto& trace : doc["traces"]) {
            if (!trace.is_object() || !trace.contains("events") ||
                !trace["events"].is_array())
                throw MalformedTrace("trace lacks an events array");
            for (const auto& e : trace["events"]) detail::tally_event(out, e);
        }
        return out;
    }

    std::istringstream lines(text);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json event = nlohmann::json::parse(line, nullptr, false);
        if (event.is_discarded())
            throw MalformedTrace("qlog line does not parse as JSON");
        detail::tally_event(out, event);
    }
    return out;
}

inline QlogSummary parse_qlog_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoFailure("cannot open qlog trace: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_qlog_frames(buf.str());
}

} // namespace doq
