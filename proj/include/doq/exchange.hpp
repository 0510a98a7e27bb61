// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "doq/bytes.hpp"
#include "doq/clock.hpp"
#include "doq/dns.hpp"
#include "doq/errors.hpp"
#include "doq/session.hpp"

namespace doq {

enum class DeliveryMode { Stream, Datagram };
enum class ModePreference { Auto, ForceStream };

inline const char* to_string(DeliveryMode m) {
    return m == DeliveryMode::Stream ? "stream" : "datagram";
}

// Application error codes carried in connection closes and stream resets.
enum class DoqErrorCode : std::uint64_t {
    NoError = 0x0,
    InternalError = 0x1,
    ProtocolError = 0x2,
    RequestCancelled = 0x3,
    ExcessiveLoad = 0x4,
    UnspecifiedError = 0x5,
};

constexpr std::uint64_t code(DoqErrorCode c) { return static_cast<std::uint64_t>(c); }

// Exponential backoff for datagram retransmission: attempt k (1-based) waits
// base_delay × factor^(k−1) for a response before the next send. No jitter.
struct RetryPolicy {
    ClockDuration base_delay = std::chrono::milliseconds(200);
    std::uint32_t factor = 2;
    std::uint32_t max_retries = 5;

    std::uint32_t max_attempts() const { return max_retries + 1; }

    ClockDuration attempt_window(std::uint32_t attempt) const {
        ClockDuration w = base_delay;
        for (std::uint32_t i = 1; i < attempt; ++i) w *= factor;
        return w;
    }

    // Stream-mode per-exchange deadline: the widest backoff window, keeping
    // both modes' worst case comparable.
    ClockDuration stream_deadline() const { return attempt_window(max_attempts()); }
};

enum class ExchangeOutcome { Pending, Responded, Failed, Cancelled };

inline const char* to_string(ExchangeOutcome o) {
    switch (o) {
    case ExchangeOutcome::Pending: return "pending";
    case ExchangeOutcome::Responded: return "responded";
    case ExchangeOutcome::Failed: return "failed";
    default: return "cancelled";
    }
}

struct ExchangeRecord {
    std::uint64_t sequence = 0;
    std::uint16_t txid = 0;
    DeliveryMode mode = DeliveryMode::Stream;
    bool tc_fallback = false; // datagram response was truncated; answered via stream
    Bytes query_wire;
    std::uint32_t attempts = 0;
    std::vector<ClockTime> send_timestamps;
    ClockTime completed_at{};
    ExchangeOutcome outcome = ExchangeOutcome::Pending;
    std::optional<DnsMessage> response;
    std::string failure_reason;
    std::uint64_t bytes_sent = 0;
    std::uint64_t bytes_received = 0;
};

// Datagram delivery only when both endpoints advertised support and the
// local side did not opt out; otherwise fall back to streams.
inline DeliveryMode negotiate_mode(const SessionCapabilities& caps, ModePreference pref) {
    if (pref == ModePreference::Auto && caps.datagrams_usable())
        return DeliveryMode::Datagram;
    return DeliveryMode::Stream;
}

// Stream mode pins the id to zero; datagram mode draws a uniformly random
// nonzero id outside the in-flight set.
template <class Set, class Rng>
std::uint16_t assign_transaction_id(DeliveryMode mode, const Set& inflight, Rng& rng) {
    if (mode == DeliveryMode::Stream) return 0;
    if (inflight.size() >= 65535) throw IdSpaceExhausted("all nonzero ids in flight");
    std::uniform_int_distribution<std::uint32_t> draw(1, 65535);
    for (;;) {
        auto id = static_cast<std::uint16_t>(draw(rng));
        if (inflight.find(id) == inflight.end()) return id;
    }
}

struct StreamExchangeResult {
    DnsMessage response;
    std::uint64_t bytes_sent = 0;
    std::uint64_t bytes_received = 0;
};

// One complete stream-mode transaction: open, write framed query with FIN,
// read framed response to FIN, validate the zero-id and question echo.
// on_open (optional) observes the stream handle, e.g. to allow cancellation.
inline StreamExchangeResult exchange_stream(
    Session& session, const DnsMessage& query, const RetryPolicy& policy = {},
    const std::function<void(Stream&)>& on_open = {}) {
    if (query.header.id != 0) throw ProtocolError("stream-mode query id must be zero");
    Clock& clock = session.clock();
    ClockTime deadline = clock.now() + policy.stream_deadline();

    StreamPtr stream;
    for (;;) {
        try {
            stream = session.open_bidirectional_stream();
            break;
        } catch (const StreamsExhausted&) {
            if (!session.wait_stream_credit(deadline))
                throw TimeoutError("waiting for stream credit");
        }
    }
    if (on_open) on_open(*stream);

    StreamExchangeResult result;
    Bytes wire = frame_message(encode_message(query));
    stream->write(wire, true);
    result.bytes_sent = wire.size();

    Bytes resp_wire;
    try {
        resp_wire = stream->read_to_end(deadline);
    } catch (const TimeoutError&) {
        stream->cancel(code(DoqErrorCode::RequestCancelled));
        throw;
    }
    result.bytes_received = resp_wire.size();

    auto frames = unframe_messages(resp_wire);
    if (frames.messages.size() != 1 || !frames.remainder.empty())
        throw ProtocolError("stream response framing");
    try {
        result.response = decode_message(frames.messages[0]);
    } catch (const CodecError& e) {
        throw ProtocolError(std::string("undecodable stream response: ") + e.what());
    }
    if (result.response.header.id != 0)
        throw ProtocolError("nonzero id on stream response");
    if (!result.response.header.qr) throw ProtocolError("response flag missing");
    if (result.response.questions != query.questions)
        throw ProtocolError("response question mismatch");
    return result;
}

} // namespace doq
