// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <mutex>
#include <string>

#include <nlohmann/json.hpp>

namespace doq {

enum class Direction : int { ClientToServer = 0, ServerToClient = 1 };

inline Direction opposite(Direction d) {
    return d == Direction::ClientToServer ? Direction::ServerToClient
                                          : Direction::ClientToServer;
}

inline const char* to_string(Direction d) {
    return d == Direction::ClientToServer ? "client_to_server" : "server_to_client";
}

enum class FrameType : int {
    Stream = 0,
    Datagram,
    MaxStreams,
    Ack,
    Padding,
    Ping,
    Other,
};

inline constexpr int kFrameTypeCount = 7;

inline const char* to_string(FrameType t) {
    switch (t) {
    case FrameType::Stream: return "stream";
    case FrameType::Datagram: return "datagram";
    case FrameType::MaxStreams: return "max_streams";
    case FrameType::Ack: return "ack";
    case FrameType::Padding: return "padding";
    case FrameType::Ping: return "ping";
    default: return "other";
    }
}

struct FrameTally {
    std::uint64_t count = 0;
    std::uint64_t octets = 0;

    bool operator==(const FrameTally&) const = default;
};

// Octet attribution used by the fake session when tallying frames. STREAM and
// DATAGRAM frames cost their payload plus a fixed per-frame overhead; credit
// replenishment and its acknowledgment travel as standalone packets with
// fixed whole-packet costs.
struct FrameCostModel {
    std::uint64_t stream_frame_overhead = 12;
    std::uint64_t datagram_frame_overhead = 4;
    std::uint64_t max_streams_packet = 66;
    std::uint64_t ack_packet = 48;
};

// Per-direction frame histogram with byte totals. Safe under concurrent use.
class FrameLedger {
public:
    void record(Direction dir, FrameType type, std::uint64_t octets) {
        std::lock_guard<std::mutex> lk(mu_);
        auto& t = tallies_[static_cast<int>(dir)][static_cast<int>(type)];
        t.count += 1;
        t.octets += octets;
    }

    FrameTally get(Direction dir, FrameType type) const {
        std::lock_guard<std::mutex> lk(mu_);
        return tallies_[static_cast<int>(dir)][static_cast<int>(type)];
    }

    std::uint64_t total_octets(Direction dir) const {
        std::lock_guard<std::mutex> lk(mu_);
        std::uint64_t sum = 0;
        for (const auto& t : tallies_[static_cast<int>(dir)]) sum += t.octets;
        return sum;
    }

    std::uint64_t total_octets() const {
        return total_octets(Direction::ClientToServer) +
               total_octets(Direction::ServerToClient);
    }

    nlohmann::json to_json() const {
        std::lock_guard<std::mutex> lk(mu_);
        nlohmann::json out;
        for (int d = 0; d < 2; ++d) {
            nlohmann::json dir;
            for (int f = 0; f < kFrameTypeCount; ++f) {
                const auto& t = tallies_[d][f];
                if (t.count == 0) continue;
                dir[to_string(static_cast<FrameType>(f))] = {{"count", t.count},
                                                             {"octets", t.octets}};
            }
            out[to_string(static_cast<Direction>(d))] = std::move(dir);
        }
        return out;
    }

private:
    mutable std::mutex mu_;
    std::array<std::array<FrameTally, kFrameTypeCount>, 2> tallies_{};
};

} // namespace doq
