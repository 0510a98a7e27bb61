// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>

#include "doq/dns.hpp"
#include "doq/exchange.hpp"
#include "doq/fake_session.hpp"
#include "doq/ledger.hpp"

namespace doq {

// Connection-setup bytes (handshake, version negotiation, path MTU probing)
// common to both delivery modes. Reported alongside per-query totals but
// never folded into them, so mode comparisons stay setup-free.
inline constexpr std::uint64_t kOneTimeCostEstimateOctets = 11600;

// Closed-form byte accounting for one delivery mode over a loss-free run.
// Mirrors exactly what the in-memory session pair's ledger records: framed
// query and response payloads plus the mode's per-exchange signaling.
struct SignalingReport {
    DeliveryMode mode = DeliveryMode::Stream;
    std::uint64_t queries = 0;
    std::uint64_t application_octets = 0; // length-framed query + response wires
    std::uint64_t signaling_octets = 0;   // per-query transport overhead
    std::uint64_t one_time_octets = kOneTimeCostEstimateOctets;
    std::array<std::array<FrameTally, kFrameTypeCount>, 2> frames{};

    std::uint64_t total_octets() const { return application_octets + signaling_octets; }

    const FrameTally& frame(Direction d, FrameType t) const {
        return frames[static_cast<int>(d)][static_cast<int>(t)];
    }

    bool operator==(const SignalingReport&) const = default;
};

namespace detail {

// One exchange of the canonical workload: an A query for one domain answered
// with four address records. Identical bytes in both modes, so it cancels
// out of any mode-to-mode gap.
struct CanonicalExchange {
    std::uint64_t query_octets;
    std::uint64_t response_octets;
};

inline CanonicalExchange canonical_exchange(DeliveryMode mode) {
    // Stream transactions pin the id to zero; datagram ones need nonzero.
    std::uint16_t txid = mode == DeliveryMode::Datagram ? 0x0001 : 0;
    DnsMessage query = make_query("example.org", RTYPE_A, txid, true);
    std::vector<ResourceRecord> answers;
    for (const char* ip : {"192.0.2.1", "192.0.2.2", "192.0.2.3", "192.0.2.4"})
        answers.push_back(make_a_record(query.questions[0].qname, ip, 300));
    DnsMessage response = make_response(query, std::move(answers));
    return {frame_message(encode_message(query)).size(),
            frame_message(encode_message(response)).size()};
}

} // namespace detail

inline SignalingReport simulate_signaling(std::uint64_t queries, DeliveryMode mode,
                                          const FakeNetworkConfig& model = {}) {
    const FrameCostModel& cost = model.cost_model;
    auto [query_octets, response_octets] = detail::canonical_exchange(mode);

    SignalingReport report;
    report.mode = mode;
    report.queries = queries;
    report.application_octets = queries * (query_octets + response_octets);

    auto tally = [&report](Direction d, FrameType t, std::uint64_t count,
                           std::uint64_t octets_each) {
        auto& entry = report.frames[static_cast<int>(d)][static_cast<int>(t)];
        entry.count += count;
        entry.octets += count * octets_each;
    };

    if (mode == DeliveryMode::Stream) {
        // Query and response each ride a stream frame; every retired stream
        // costs a credit replenishment packet and its acknowledgment.
        tally(Direction::ClientToServer, FrameType::Stream, queries,
              query_octets + cost.stream_frame_overhead);
        tally(Direction::ServerToClient, FrameType::Stream, queries,
              response_octets + cost.stream_frame_overhead);
        tally(Direction::ServerToClient, FrameType::MaxStreams, queries,
              cost.max_streams_packet);
        tally(Direction::ClientToServer, FrameType::Ack, queries, cost.ack_packet);
        report.signaling_octets =
            queries * (2 * cost.stream_frame_overhead + cost.max_streams_packet +
                       cost.ack_packet);
    } else {
        tally(Direction::ClientToServer, FrameType::Datagram, queries,
              query_octets + cost.datagram_frame_overhead);
        tally(Direction::ServerToClient, FrameType::Datagram, queries,
              response_octets + cost.datagram_frame_overhead);
        report.signaling_octets = queries * 2 * cost.datagram_frame_overhead;
    }
    return report;
}

// Stream-mode total minus datagram-mode total for the same query count:
// application bytes cancel, leaving queries x the per-exchange overhead gap.
inline std::uint64_t signaling_gap(std::uint64_t queries,
                                   const FakeNetworkConfig& model = {}) {
    return simulate_signaling(queries, DeliveryMode::Stream, model).total_octets() -
           simulate_signaling(queries, DeliveryMode::Datagram, model).total_octets();
}

} // namespace doq
