// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <memory>
#include <string>

#include "doq/bytes.hpp"
#include "doq/clock.hpp"
#include "doq/errors.hpp"

namespace doq {

inline constexpr const char* kAlpn = "doq";
inline constexpr std::uint16_t kDefaultPort = 853;
inline constexpr std::uint64_t kRecommendedDatagramFrameSize = 65535;

struct SessionCapabilities {
    // 0 means datagrams disabled on that side.
    std::uint64_t local_max_datagram_frame_size = 0;
    std::uint64_t peer_max_datagram_frame_size = 0;
    std::string negotiated_alpn = kAlpn;
    ClockDuration idle_timeout = std::chrono::seconds(30);

    bool datagrams_usable() const {
        return local_max_datagram_frame_size > 0 && peer_max_datagram_frame_size > 0;
    }

    std::uint64_t datagram_budget() const {
        return std::min(local_max_datagram_frame_size, peer_max_datagram_frame_size);
    }
};

// One bidirectional stream. A handle is owned by a single exchange at a time.
class Stream {
public:
    virtual ~Stream() = default;

    virtual std::uint64_t id() const = 0;

    // Appends data; fin closes the send direction.
    virtual void write(BytesView data, bool fin) = 0;
    void finish() { write({}, true); }

    // Blocks until the peer's FIN, then returns everything it sent.
    // Throws TimeoutError past deadline, PeerStreamError on reset,
    // ConnectionClosed if the connection dies.
    virtual Bytes read_to_end(ClockTime deadline) = 0;

    // Abandons the exchange with an application error code (stop sending +
    // reset in one shot).
    virtual void cancel(std::uint64_t error_code) = 0;
};

using StreamPtr = std::unique_ptr<Stream>;

// One connection. Shareable across concurrent exchanges; receive_datagram has
// a single consumer (the dispatcher).
class Session {
public:
    virtual ~Session() = default;

    virtual const SessionCapabilities& capabilities() const = 0;

    // Throws StreamsExhausted when no stream credit remains.
    virtual StreamPtr open_bidirectional_stream() = 0;

    // Returns true once stream credit is available (or immediately if it is).
    virtual bool wait_stream_credit(ClockTime deadline) = 0;

    virtual StreamPtr accept_bidirectional_stream(ClockTime deadline) = 0;

    virtual void send_datagram(BytesView payload) = 0;
    virtual Bytes receive_datagram(ClockTime deadline) = 0;

    virtual void close(std::uint64_t application_error_code) = 0;
    virtual bool is_closed() const = 0;

    // Transport-level octet counters from this endpoint's perspective.
    virtual std::uint64_t bytes_sent() const = 0;
    virtual std::uint64_t bytes_received() const = 0;

    virtual Clock& clock() = 0;
};

using SessionPtr = std::shared_ptr<Session>;

class Listener {
public:
    virtual ~Listener() = default;

    // Throws TimeoutError past deadline, ConnectionClosed once closed.
    virtual SessionPtr accept(ClockTime deadline) = 0;
    virtual void close() = 0;
    virtual std::string local_address() const = 0;
};

using ListenerPtr = std::shared_ptr<Listener>;

} // namespace doq
