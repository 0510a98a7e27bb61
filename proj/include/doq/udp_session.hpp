// SPDX-License-Identifier: Apache-2.0
#pragma once

// Session/Listener over plain UDP with a minimal reliability and handshake
// layer. The wire protocol provides exactly what the upper layers consume:
// an authenticated handshake that negotiates ALPN, datagram size, and stream
// credit; a reliable in-order channel carrying stream data, resets, and
// credit grants; and fire-and-forget datagrams. Drive it with a SystemClock:
// packet arrival follows real time, which a VirtualClock cannot see.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

#include "doq/bytes.hpp"
#include "doq/clock.hpp"
#include "doq/errors.hpp"
#include "doq/ledger.hpp"
#include "doq/session.hpp"
#include "doq/tls.hpp"
#include "doq/udp.hpp"

namespace doq {

struct UdpSessionConfig {
    std::uint64_t local_max_datagram_frame_size = kRecommendedDatagramFrameSize;
    ClockDuration idle_timeout = std::chrono::seconds(30);
    // Expected certificate name; empty means the connect target's host part.
    std::string hostname;
    bool insecure_skip_verify = false;
    // Server side: credit granted to each client at the handshake.
    std::uint32_t initial_stream_credit = 100;
    ClockDuration rto_initial = std::chrono::milliseconds(200);
    int max_retransmits = 5;
    // Observation hook for application payloads this endpoint sends.
    std::function<void(Direction, FrameType, BytesView)> payload_tap;
    // When set, one JSON object per packet event is appended to this file.
    std::string qlog_path;
};

namespace detail::udpwire {

inline constexpr std::uint16_t kMagic = 0x4451;
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 8;

enum PacketType : std::uint8_t {
    kHello = 0x01,
    kHelloReply = 0x02,
    kHelloDone = 0x03,
    kReliable = 0x04,
    kAck = 0x05,
    kDatagram = 0x06,
    kClose = 0x07,
};

enum ReliableKind : std::uint8_t {
    kStreamData = 0x01,
    kStreamReset = 0x02,
    kMaxStreams = 0x03,
};

// Per-packet payload read off the wire behind the fixed header.
struct Header {
    std::uint8_t type = 0;
    std::uint32_t conn_id = 0;
};

inline Bytes packet_start(std::uint8_t type, std::uint32_t conn_id) {
    Bytes out;
    put_u16(out, kMagic);
    put_u8(out, kVersion);
    put_u8(out, type);
    put_u32(out, conn_id);
    return out;
}

inline std::optional<Header> parse_header(BytesView pkt) {
    if (pkt.size() < kHeaderSize) return std::nullopt;
    if (get_u16(pkt, 0) != kMagic || pkt[2] != kVersion) return std::nullopt;
    return Header{pkt[3], get_u32(pkt, 4)};
}

inline BytesView body_of(BytesView pkt) {
    return pkt.subspan(kHeaderSize);
}

struct HelloFields {
    std::uint32_t client_nonce = 0;
    std::uint32_t client_max_datagram = 0;
    std::string alpn;
};

inline Bytes build_hello(std::uint32_t conn_id, const HelloFields& h) {
    Bytes out = packet_start(kHello, conn_id);
    put_u32(out, h.client_nonce);
    put_u32(out, h.client_max_datagram);
    put_u8(out, static_cast<std::uint8_t>(h.alpn.size()));
    out.insert(out.end(), h.alpn.begin(), h.alpn.end());
    return out;
}

inline std::optional<HelloFields> parse_hello(BytesView body) {
    if (body.size() < 9) return std::nullopt;
    HelloFields h;
    h.client_nonce = get_u32(body, 0);
    h.client_max_datagram = get_u32(body, 4);
    std::size_t alpn_len = body[8];
    if (body.size() < 9 + alpn_len) return std::nullopt;
    h.alpn.assign(body.begin() + 9, body.begin() + 9 + alpn_len);
    return h;
}

struct HelloReplyFields {
    std::uint32_t server_nonce = 0;
    std::uint32_t server_max_datagram = 0;
    std::uint32_t initial_stream_credit = 0;
    std::string alpn;
    Bytes cert_der;
    Bytes signature;
};

inline Bytes build_hello_reply(std::uint32_t conn_id, const HelloReplyFields& r) {
    Bytes out = packet_start(kHelloReply, conn_id);
    put_u32(out, r.server_nonce);
    put_u32(out, r.server_max_datagram);
    put_u32(out, r.initial_stream_credit);
    put_u8(out, static_cast<std::uint8_t>(r.alpn.size()));
    out.insert(out.end(), r.alpn.begin(), r.alpn.end());
    put_u16(out, static_cast<std::uint16_t>(r.cert_der.size()));
    out.insert(out.end(), r.cert_der.begin(), r.cert_der.end());
    put_u16(out, static_cast<std::uint16_t>(r.signature.size()));
    out.insert(out.end(), r.signature.begin(), r.signature.end());
    return out;
}

inline std::optional<HelloReplyFields> parse_hello_reply(BytesView body) {
    if (body.size() < 13) return std::nullopt;
    HelloReplyFields r;
    r.server_nonce = get_u32(body, 0);
    r.server_max_datagram = get_u32(body, 4);
    r.initial_stream_credit = get_u32(body, 8);
    std::size_t at = 12;
    std::size_t alpn_len = body[at++];
    if (body.size() < at + alpn_len + 2) return std::nullopt;
    r.alpn.assign(body.begin() + at, body.begin() + at + alpn_len);
    at += alpn_len;
    std::size_t cert_len = get_u16(body, at);
    at += 2;
    if (body.size() < at + cert_len + 2) return std::nullopt;
    r.cert_der.assign(body.begin() + at, body.begin() + at + cert_len);
    at += cert_len;
    std::size_t sig_len = get_u16(body, at);
    at += 2;
    if (body.size() < at + sig_len) return std::nullopt;
    r.signature.assign(body.begin() + at, body.begin() + at + sig_len);
    return r;
}

inline Bytes build_hello_done(std::uint32_t conn_id, std::uint32_t client_nonce) {
    Bytes out = packet_start(kHelloDone, conn_id);
    put_u32(out, client_nonce);
    return out;
}

inline Bytes build_close(std::uint32_t conn_id, std::uint64_t code, const std::string& reason) {
    Bytes out = packet_start(kClose, conn_id);
    put_u64(out, code);
    std::size_t n = std::min<std::size_t>(reason.size(), 255);
    put_u8(out, static_cast<std::uint8_t>(n));
    out.insert(out.end(), reason.begin(), reason.begin() + n);
    return out;
}

// Everything both sides must agree on, bound to the connection and nonces.
inline Bytes transcript(std::uint32_t client_nonce, std::uint32_t server_nonce,
                        std::uint32_t conn_id, std::uint32_t client_max,
                        std::uint32_t server_max, std::uint32_t credit,
                        const std::string& alpn, BytesView cert_der) {
    Bytes t;
    const char* label = "doq-hs1";
    t.insert(t.end(), label, label + 7);
    put_u32(t, client_nonce);
    put_u32(t, server_nonce);
    put_u32(t, conn_id);
    put_u32(t, client_max);
    put_u32(t, server_max);
    put_u32(t, credit);
    put_u8(t, static_cast<std::uint8_t>(alpn.size()));
    t.insert(t.end(), alpn.begin(), alpn.end());
    t.insert(t.end(), cert_der.begin(), cert_der.end());
    return t;
}

inline std::uint32_t clamp_u32(std::uint64_t v) {
    return static_cast<std::uint32_t>(std::min<std::uint64_t>(v, 0xffffffffull));
}

inline const char* qlog_frame_name(std::uint8_t packet_type, std::uint8_t reliable_kind) {
    switch (packet_type) {
    case kHello:
    case kHelloReply:
    case kHelloDone: return "crypto";
    case kAck: return "ack";
    case kDatagram: return "datagram";
    case kClose: return "connection_close";
    case kReliable:
        switch (reliable_kind) {
        case kStreamData: return "stream";
        case kStreamReset: return "reset_stream";
        case kMaxStreams: return "max_streams";
        default: return "other";
        }
    default: return "other";
    }
}

} // namespace detail::udpwire

// One endpoint of a connection. Server instances are fed packets by the
// listener's receive thread; the client subclass owns its own socket and
// thread. All public methods are thread safe.
class UdpSession : public Session, public std::enable_shared_from_this<UdpSession> {
public:
    enum class Role { Client, Server };

    UdpSession(Clock& clock, Role role, UdpSessionConfig cfg, std::uint32_t conn_id,
               std::function<void(BytesView)> send_fn)
        : clock_(clock),
          role_(role),
          cfg_(std::move(cfg)),
          conn_id_(conn_id),
          send_fn_(std::move(send_fn)),
          cond_(clock) {
        caps_.local_max_datagram_frame_size = cfg_.local_max_datagram_frame_size;
        caps_.negotiated_alpn = kAlpn;
        caps_.idle_timeout = cfg_.idle_timeout;
        last_rx_ = clock_.now();
        if (!cfg_.qlog_path.empty()) qlog_ = std::fopen(cfg_.qlog_path.c_str(), "w");
    }

    ~UdpSession() override {
        if (qlog_) std::fclose(qlog_);
    }

    UdpSession(const UdpSession&) = delete;
    UdpSession& operator=(const UdpSession&) = delete;

    // --- Session interface ---

    const SessionCapabilities& capabilities() const override { return caps_; }

    StreamPtr open_bidirectional_stream() override {
        std::unique_lock<std::mutex> lk(mu_);
        if (closed_) throw ConnectionClosed(close_what_locked(), close_code_.value_or(0));
        if (stream_credit_ == 0) throw StreamsExhausted();
        --stream_credit_;
        std::uint64_t id = next_stream_id_;
        next_stream_id_ += 4;
        streams_.emplace(id, StreamState{});
        return make_stream(id);
    }

    bool wait_stream_credit(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(mu_);
        cond_.wait_until(lk, deadline, [&] { return closed_ || stream_credit_ > 0; });
        return !closed_ && stream_credit_ > 0;
    }

    StreamPtr accept_bidirectional_stream(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(mu_);
        for (;;) {
            cond_.wait_until(lk, deadline, [&] { return closed_ || !accept_queue_.empty(); });
            if (!accept_queue_.empty()) {
                std::uint64_t id = accept_queue_.front();
                accept_queue_.pop_front();
                // A reset may have removed the stream before it was accepted.
                if (streams_.count(id) == 0) continue;
                return make_stream(id);
            }
            if (closed_) throw ConnectionClosed(close_what_locked(), close_code_.value_or(0));
            throw TimeoutError("stream accept");
        }
    }

    void send_datagram(BytesView payload) override {
        std::unique_lock<std::mutex> lk(mu_);
        if (closed_) throw ConnectionClosed(close_what_locked(), close_code_.value_or(0));
        if (!caps_.datagrams_usable()) throw DatagramsUnsupported();
        if (payload.size() > caps_.datagram_budget())
            throw DatagramTooLarge(payload.size(), caps_.datagram_budget());
        Bytes pkt = detail::udpwire::packet_start(detail::udpwire::kDatagram, conn_id_);
        pkt.insert(pkt.end(), payload.begin(), payload.end());
        raw_send_locked(pkt, detail::udpwire::kDatagram, 0);
        tap_locked(FrameType::Datagram, payload);
    }

    Bytes receive_datagram(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(mu_);
        cond_.wait_until(lk, deadline, [&] { return closed_ || !dgram_inbox_.empty(); });
        if (!dgram_inbox_.empty()) {
            Bytes out = std::move(dgram_inbox_.front());
            dgram_inbox_.pop_front();
            return out;
        }
        if (closed_) throw ConnectionClosed(close_what_locked(), close_code_.value_or(0));
        throw TimeoutError("datagram receive");
    }

    void close(std::uint64_t application_error_code) override {
        std::unique_lock<std::mutex> lk(mu_);
        if (closed_) return;
        Bytes pkt = detail::udpwire::build_close(conn_id_, application_error_code, "");
        raw_send_locked(pkt, detail::udpwire::kClose, 0);
        mark_closed_locked(application_error_code, "closed locally");
    }

    bool is_closed() const override {
        std::lock_guard<std::mutex> lk(mu_);
        return closed_;
    }

    std::uint64_t bytes_sent() const override {
        std::lock_guard<std::mutex> lk(mu_);
        return bytes_sent_;
    }

    std::uint64_t bytes_received() const override {
        std::lock_guard<std::mutex> lk(mu_);
        return bytes_received_;
    }

    Clock& clock() override { return clock_; }

    // --- observability ---

    std::optional<std::uint64_t> close_code() const {
        std::lock_guard<std::mutex> lk(mu_);
        return close_code_;
    }

    std::uint64_t retransmits() const {
        std::lock_guard<std::mutex> lk(mu_);
        return retransmit_total_;
    }

    std::uint32_t conn_id() const { return conn_id_; }

    bool established() const {
        std::lock_guard<std::mutex> lk(mu_);
        return established_;
    }

    // --- substrate entry points (listener / client receive thread) ---

    // Feeds one UDP payload already known to carry this connection's id.
    void handle_packet(BytesView pkt) {
        namespace w = detail::udpwire;
        auto hdr = w::parse_header(pkt);
        if (!hdr) return;
        std::unique_lock<std::mutex> lk(mu_);
        bytes_received_ += pkt.size();
        last_rx_ = clock_.now();
        qlog_locked("packet_received", pkt.size(),
                    w::qlog_frame_name(hdr->type, reliable_kind_of(pkt)));
        if (closed_) return;
        BytesView body = w::body_of(pkt);
        bool was_established = established_;
        switch (hdr->type) {
        case w::kHello:
            // Retransmitted opener; the stored reply answers it.
            if (role_ == Role::Server && !handshake_reply_.empty())
                raw_send_locked(handshake_reply_, w::kHelloReply, 0);
            break;
        case w::kHelloReply:
            break; // duplicate of a handshake we already completed
        case w::kHelloDone:
            if (role_ == Role::Server) established_ = true;
            break;
        case w::kReliable:
            if (role_ == Role::Server) established_ = true;
            on_reliable_locked(body);
            break;
        case w::kAck:
            if (role_ == Role::Server) established_ = true;
            if (body.size() >= 4) on_ack_locked(get_u32(body, 0));
            break;
        case w::kDatagram:
            if (role_ == Role::Server) established_ = true;
            if (dgram_inbox_.size() < kInboxCap) {
                dgram_inbox_.emplace_back(body.begin(), body.end());
                cond_.notify_all();
            }
            break;
        case w::kClose: {
            std::uint64_t code = body.size() >= 8 ? get_u64(body, 0) : 0;
            std::string reason = "closed by peer";
            if (body.size() >= 9) {
                std::size_t n = std::min<std::size_t>(body[8], body.size() - 9);
                if (n > 0) reason.assign(body.begin() + 9, body.begin() + 9 + n);
            }
            mark_closed_locked(code, reason);
            break;
        }
        default:
            break;
        }
        if (!was_established && established_) cond_.notify_all();
    }

    // Periodic maintenance: retransmission and idle timeout. Called from the
    // owning receive thread between polls.
    void tick() {
        std::unique_lock<std::mutex> lk(mu_);
        if (closed_) return;
        ClockTime now = clock_.now();
        if (now - last_rx_ > caps_.idle_timeout) {
            mark_closed_locked(std::nullopt, "idle timeout");
            return;
        }
        if (unacked_.empty()) return;
        Unacked& u = unacked_.front();
        ClockDuration rto = cfg_.rto_initial * (1 << u.retransmit_count);
        if (now - u.last_sent < rto) return;
        if (u.retransmit_count >= cfg_.max_retransmits) {
            mark_closed_locked(std::nullopt, "peer unreachable");
            return;
        }
        ++u.retransmit_count;
        ++retransmit_total_;
        u.last_sent = now;
        raw_send_locked(u.wire, detail::udpwire::kReliable, u.kind);
    }

    // Server handshake wiring, invoked by the listener before any routing.
    void server_install_handshake(std::uint64_t peer_max_datagram, Bytes reply_wire,
                                  std::size_t hello_packet_size) {
        std::lock_guard<std::mutex> lk(mu_);
        caps_.peer_max_datagram_frame_size = peer_max_datagram;
        handshake_reply_ = std::move(reply_wire);
        bytes_received_ += hello_packet_size;
        qlog_locked("packet_received", hello_packet_size, "crypto");
        raw_send_locked(handshake_reply_, detail::udpwire::kHelloReply, 0);
    }

    // Pre-established state injected by the client connector.
    void client_install_handshake(std::uint64_t peer_max_datagram, std::uint64_t credit,
                                  std::uint64_t handshake_sent, std::uint64_t handshake_received) {
        std::lock_guard<std::mutex> lk(mu_);
        caps_.peer_max_datagram_frame_size = peer_max_datagram;
        stream_credit_ = credit;
        established_ = true;
        bytes_sent_ += handshake_sent;
        bytes_received_ += handshake_received;
    }

    // Marks the connection dead without emitting a CLOSE (listener shutdown,
    // unrecoverable loss).
    void abort(const std::string& reason) {
        std::lock_guard<std::mutex> lk(mu_);
        if (!closed_) mark_closed_locked(std::nullopt, reason);
    }

protected:
    // --- stream operations (via UdpStream) ---

    struct StreamState {
        Bytes recv_buf;
        Bytes sent_buf;
        bool fin_received = false;
        bool fin_sent = false;
        bool reset_by_peer = false;
        std::uint64_t peer_reset_code = 0;
        bool cancelled = false;
    };

    void stream_write(std::uint64_t id, BytesView data, bool fin) {
        namespace w = detail::udpwire;
        std::unique_lock<std::mutex> lk(mu_);
        if (closed_) throw ConnectionClosed(close_what_locked(), close_code_.value_or(0));
        auto it = streams_.find(id);
        if (it == streams_.end()) throw StreamCancelled();
        StreamState& st = it->second;
        if (st.cancelled) throw StreamCancelled();
        if (st.reset_by_peer) throw PeerStreamError(st.peer_reset_code);
        std::size_t at = 0;
        do {
            std::size_t n = std::min<std::size_t>(data.size() - at, kStreamChunk);
            bool last = at + n == data.size();
            Bytes body;
            put_u8(body, w::kStreamData);
            put_u64(body, id);
            put_u8(body, last && fin ? 1 : 0);
            put_u16(body, static_cast<std::uint16_t>(n));
            body.insert(body.end(), data.begin() + at, data.begin() + at + n);
            send_reliable_locked(std::move(body), w::kStreamData);
            at += n;
        } while (at < data.size());
        st.sent_buf.insert(st.sent_buf.end(), data.begin(), data.end());
        if (fin) {
            st.fin_sent = true;
            tap_locked(FrameType::Stream, st.sent_buf);
            maybe_retire_locked(id, st);
        }
    }

    Bytes stream_read_to_end(std::uint64_t id, ClockTime deadline) {
        std::unique_lock<std::mutex> lk(mu_);
        cond_.wait_until(lk, deadline, [&] {
            auto it = streams_.find(id);
            return closed_ || it == streams_.end() || it->second.fin_received ||
                   it->second.reset_by_peer || it->second.cancelled;
        });
        auto it = streams_.find(id);
        if (it == streams_.end()) {
            if (closed_) throw ConnectionClosed(close_what_locked(), close_code_.value_or(0));
            throw StreamCancelled();
        }
        StreamState& st = it->second;
        if (st.cancelled) throw StreamCancelled();
        if (st.reset_by_peer) {
            std::uint64_t code = st.peer_reset_code;
            streams_.erase(it);
            throw PeerStreamError(code);
        }
        if (st.fin_received) {
            Bytes out = std::move(st.recv_buf);
            st.recv_buf.clear();
            // A reader that already sent its fin is done with the stream; a
            // reader that has not (the server side) still needs the state to
            // write its answer.
            if (st.fin_sent) streams_.erase(it);
            return out;
        }
        if (closed_) throw ConnectionClosed(close_what_locked(), close_code_.value_or(0));
        throw TimeoutError("stream read");
    }

    void stream_cancel(std::uint64_t id, std::uint64_t error_code) {
        namespace w = detail::udpwire;
        std::unique_lock<std::mutex> lk(mu_);
        auto it = streams_.find(id);
        if (it == streams_.end() || closed_) return;
        it->second.cancelled = true;
        Bytes body;
        put_u8(body, w::kStreamReset);
        put_u64(body, id);
        put_u64(body, error_code);
        send_reliable_locked(std::move(body), w::kStreamReset);
        finish_stream_locked(id);
        cond_.notify_all();
    }

private:
    class UdpStream final : public Stream {
    public:
        UdpStream(std::shared_ptr<UdpSession> session, std::uint64_t id)
            : session_(std::move(session)), id_(id) {}
        std::uint64_t id() const override { return id_; }
        void write(BytesView data, bool fin) override { session_->stream_write(id_, data, fin); }
        Bytes read_to_end(ClockTime deadline) override {
            return session_->stream_read_to_end(id_, deadline);
        }
        void cancel(std::uint64_t error_code) override { session_->stream_cancel(id_, error_code); }

    private:
        std::shared_ptr<UdpSession> session_;
        std::uint64_t id_;
    };

    static constexpr std::size_t kStreamChunk = 1200;
    static constexpr std::size_t kInboxCap = 4096;
    static constexpr std::size_t kOooCap = 1024;

    struct Unacked {
        std::uint32_t seq;
        std::uint8_t kind;
        Bytes wire;
        ClockTime last_sent;
        int retransmit_count = 0;
    };

    StreamPtr make_stream(std::uint64_t id) {
        return std::make_unique<UdpStream>(shared_from_this(), id);
    }

    static std::uint8_t reliable_kind_of(BytesView pkt) {
        namespace w = detail::udpwire;
        if (pkt.size() < w::kHeaderSize + 5 || pkt[3] != w::kReliable) return 0;
        return pkt[w::kHeaderSize + 4];
    }

    std::string close_what_locked() const {
        return close_reason_.empty() ? "connection closed" : close_reason_;
    }

    void raw_send_locked(BytesView pkt, std::uint8_t type, std::uint8_t kind) {
        send_fn_(pkt);
        bytes_sent_ += pkt.size();
        qlog_locked("packet_sent", pkt.size(), detail::udpwire::qlog_frame_name(type, kind));
    }

    void send_reliable_locked(Bytes kind_body, std::uint8_t kind) {
        namespace w = detail::udpwire;
        Bytes pkt = w::packet_start(w::kReliable, conn_id_);
        put_u32(pkt, next_send_seq_);
        pkt.insert(pkt.end(), kind_body.begin(), kind_body.end());
        unacked_.push_back({next_send_seq_, kind, pkt, clock_.now(), 0});
        ++next_send_seq_;
        raw_send_locked(unacked_.back().wire, w::kReliable, kind);
    }

    void send_ack_locked() {
        namespace w = detail::udpwire;
        Bytes pkt = w::packet_start(w::kAck, conn_id_);
        put_u32(pkt, recv_cumulative_);
        raw_send_locked(pkt, w::kAck, 0);
    }

    void on_ack_locked(std::uint32_t cumulative) {
        while (!unacked_.empty() && unacked_.front().seq <= cumulative) unacked_.pop_front();
    }

    void on_reliable_locked(BytesView body) {
        if (body.size() < 5) return;
        std::uint32_t seq = get_u32(body, 0);
        BytesView kind_body = body.subspan(4);
        if (seq == recv_cumulative_ + 1) {
            deliver_reliable_locked(kind_body);
            ++recv_cumulative_;
            for (;;) {
                // Entries at or below the cumulative point are stale copies.
                ooo_.erase(ooo_.begin(), ooo_.lower_bound(recv_cumulative_ + 1));
                auto it = ooo_.find(recv_cumulative_ + 1);
                if (it == ooo_.end()) break;
                Bytes next = std::move(it->second);
                ooo_.erase(it);
                ++recv_cumulative_;
                deliver_reliable_locked(next);
            }
        } else if (seq > recv_cumulative_ + 1 && ooo_.size() < kOooCap) {
            ooo_.emplace(seq, Bytes(kind_body.begin(), kind_body.end()));
        }
        send_ack_locked();
        cond_.notify_all();
    }

    void deliver_reliable_locked(BytesView kb) {
        namespace w = detail::udpwire;
        if (kb.empty()) return;
        switch (kb[0]) {
        case w::kStreamData: {
            if (kb.size() < 12) return;
            std::uint64_t id = get_u64(kb, 1);
            bool fin = kb[9] != 0;
            std::size_t len = get_u16(kb, 10);
            if (kb.size() < 12 + len) return;
            auto it = streams_.find(id);
            if (it == streams_.end()) {
                // Only the client opens streams, and the reliable layer
                // delivers exactly once, so an unseen client id is a new
                // stream (workers may open them out of id order).
                if (role_ != Role::Server || id % 4 != 0) return;
                it = streams_.emplace(id, StreamState{}).first;
                next_peer_stream_id_ = std::max(next_peer_stream_id_, id + 4);
                accept_queue_.push_back(id);
            }
            StreamState& st = it->second;
            if (st.cancelled) return;
            st.recv_buf.insert(st.recv_buf.end(), kb.begin() + 12, kb.begin() + 12 + len);
            if (fin) {
                st.fin_received = true;
                maybe_retire_locked(id, st);
            }
            break;
        }
        case w::kStreamReset: {
            if (kb.size() < 17) return;
            std::uint64_t id = get_u64(kb, 1);
            std::uint64_t code = get_u64(kb, 9);
            auto it = streams_.find(id);
            if (it == streams_.end()) {
                // Reset raced ahead of any data; account for the credit the
                // peer spent on the stream.
                if (role_ == Role::Server && id % 4 == 0 && id >= next_peer_stream_id_) {
                    next_peer_stream_id_ = id + 4;
                    grant_credit_locked();
                }
                return;
            }
            it->second.reset_by_peer = true;
            it->second.peer_reset_code = code;
            if (role_ == Role::Server) grant_credit_locked();
            break;
        }
        case w::kMaxStreams: {
            if (kb.size() < 9 || role_ != Role::Client) return;
            stream_credit_ += get_u64(kb, 1);
            break;
        }
        default:
            break;
        }
    }

    void maybe_retire_locked(std::uint64_t id, StreamState& st) {
        if (!st.fin_sent || !st.fin_received) return;
        if (role_ == Role::Server) {
            grant_credit_locked();
            finish_stream_locked(id);
        }
    }

    void grant_credit_locked() {
        namespace w = detail::udpwire;
        Bytes body;
        put_u8(body, w::kMaxStreams);
        put_u64(body, 1);
        send_reliable_locked(std::move(body), w::kMaxStreams);
    }

    void finish_stream_locked(std::uint64_t id) { streams_.erase(id); }

    void mark_closed_locked(std::optional<std::uint64_t> code, std::string reason) {
        closed_ = true;
        close_code_ = code;
        close_reason_ = std::move(reason);
        unacked_.clear();
        cond_.notify_all();
    }

    void tap_locked(FrameType type, BytesView payload) {
        if (!cfg_.payload_tap) return;
        Direction dir = role_ == Role::Client ? Direction::ClientToServer
                                              : Direction::ServerToClient;
        cfg_.payload_tap(dir, type, payload);
    }

    void qlog_locked(const char* event, std::size_t size, const char* frame) {
        if (!qlog_) return;
        double ms = std::chrono::duration<double, std::milli>(clock_.now()).count();
        std::fprintf(qlog_,
                     "{\"time\":%.3f,\"name\":\"transport:%s\",\"data\":"
                     "{\"header\":{\"packet_size\":%zu},\"frames\":[{\"frame_type\":\"%s\"}]}}\n",
                     ms, event, size, frame);
    }

    Clock& clock_;
    Role role_;
    UdpSessionConfig cfg_;
    std::uint32_t conn_id_;
    std::function<void(BytesView)> send_fn_;
    SessionCapabilities caps_;

    mutable std::mutex mu_;
    ClockCondition cond_;
    bool established_ = false;
    bool closed_ = false;
    std::optional<std::uint64_t> close_code_;
    std::string close_reason_;

    std::uint32_t next_send_seq_ = 1;
    std::deque<Unacked> unacked_;
    std::uint64_t retransmit_total_ = 0;
    std::uint32_t recv_cumulative_ = 0;
    std::map<std::uint32_t, Bytes> ooo_;

    std::map<std::uint64_t, StreamState> streams_;
    std::deque<std::uint64_t> accept_queue_;
    std::uint64_t next_stream_id_ = 0;
    std::uint64_t next_peer_stream_id_ = 0;
    std::uint64_t stream_credit_ = 0;

    std::deque<Bytes> dgram_inbox_;

    std::uint64_t bytes_sent_ = 0;
    std::uint64_t bytes_received_ = 0;
    ClockTime last_rx_{};
    Bytes handshake_reply_;
    std::FILE* qlog_ = nullptr;
};

// Client connection owning the socket and its receive thread.
class UdpClientSession final : public UdpSession {
public:
    UdpClientSession(Clock& clock, UdpSessionConfig cfg, std::uint32_t conn_id, UdpSocket socket)
        : UdpSession(clock, Role::Client, std::move(cfg), conn_id,
                     [this](BytesView pkt) {
                         if (socket_.valid()) socket_.send(pkt);
                     }),
          socket_(std::move(socket)) {}

    ~UdpClientSession() override {
        try {
            if (!is_closed()) close(0);
        } catch (const Error&) {
        }
        stop_.store(true);
        if (rx_.joinable()) rx_.join();
        socket_.close();
    }

    // Separate from the constructor so the shared_ptr exists (and the vtable
    // is complete) before packets can arrive.
    void start() {
        rx_ = std::thread([this] { rx_loop(); });
    }

private:
    void rx_loop() {
        while (!stop_.load()) {
            auto pkt = socket_.receive(std::chrono::milliseconds(20));
            if (stop_.load()) break;
            if (pkt) handle_packet(pkt->payload);
            tick();
        }
    }

    UdpSocket socket_;
    std::thread rx_;
    std::atomic<bool> stop_{false};
};

// Dials `target` ("host:port" or "host"), runs the handshake, and returns an
// established session. Throws ConnectFailed when the server does not answer,
// refuses the connection, or fails verification.
inline SessionPtr udp_connect(Clock& clock, const std::string& target,
                              UdpSessionConfig cfg = {}) {
    namespace w = detail::udpwire;
    SocketAddress addr = SocketAddress::resolve(target, kDefaultPort);
    UdpSocket sock;
    sock.connect(addr);

    std::random_device rd;
    std::uint32_t conn_id = rd();
    w::HelloFields hello;
    hello.client_nonce = rd();
    hello.client_max_datagram = w::clamp_u32(cfg.local_max_datagram_frame_size);
    hello.alpn = kAlpn;
    Bytes hello_wire = w::build_hello(conn_id, hello);

    std::string expect_host = cfg.hostname;
    if (expect_host.empty()) {
        expect_host = target;
        if (auto open = expect_host.find('['); open != std::string::npos) {
            expect_host = expect_host.substr(open + 1, expect_host.find(']') - open - 1);
        } else if (auto colon = expect_host.rfind(':');
                   colon != std::string::npos && expect_host.find(':') == colon) {
            expect_host = expect_host.substr(0, colon);
        }
    }

    std::uint64_t sent = 0, received = 0;
    for (int attempt = 0; attempt <= cfg.max_retransmits; ++attempt) {
        sock.send(hello_wire);
        sent += hello_wire.size();
        auto window = std::chrono::duration_cast<std::chrono::milliseconds>(
            cfg.rto_initial * (1 << attempt));
        auto until = std::chrono::steady_clock::now() + window;
        for (;;) {
            auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                until - std::chrono::steady_clock::now());
            if (left.count() <= 0) break;
            auto pkt = sock.receive(left);
            if (!pkt) break;
            auto hdr = w::parse_header(pkt->payload);
            if (!hdr || hdr->conn_id != conn_id) continue;
            if (hdr->type == w::kClose) {
                BytesView body = w::body_of(pkt->payload);
                std::string reason = "refused by server";
                if (body.size() >= 9 && body[8] > 0 && body.size() >= 9u + body[8])
                    reason.assign(body.begin() + 9, body.begin() + 9 + body[8]);
                throw ConnectFailed("connect " + target + ": " + reason);
            }
            if (hdr->type != w::kHelloReply) continue;
            auto reply = w::parse_hello_reply(w::body_of(pkt->payload));
            if (!reply) continue;
            received += pkt->payload.size();
            if (reply->alpn != hello.alpn)
                throw ConnectFailed("connect " + target + ": ALPN mismatch, server offered \"" +
                                    reply->alpn + "\"");
            X509Ptr cert = cert_from_der(reply->cert_der);
            Bytes t = w::transcript(hello.client_nonce, reply->server_nonce, conn_id,
                                    hello.client_max_datagram, reply->server_max_datagram,
                                    reply->initial_stream_credit, reply->alpn, reply->cert_der);
            EvpKeyPtr pub = cert_public_key(*cert);
            if (!verify_message(*pub, t, reply->signature))
                throw ConnectFailed("connect " + target + ": handshake signature invalid");
            if (!cfg.insecure_skip_verify && !cert_matches_host(*cert, expect_host))
                throw ConnectFailed("connect " + target + ": certificate does not match \"" +
                                    expect_host + "\"");
            Bytes done = w::build_hello_done(conn_id, hello.client_nonce);
            sock.send(done);
            sent += done.size();

            auto session = std::make_shared<UdpClientSession>(clock, std::move(cfg), conn_id,
                                                              std::move(sock));
            session->client_install_handshake(reply->server_max_datagram,
                                              reply->initial_stream_credit, sent,
                                              received);
            session->start();
            return session;
        }
    }
    throw ConnectFailed("connect " + target + ": no response");
}

// Accepts connections on a bound UDP socket; all sessions share the socket
// and are demultiplexed by peer address on a single receive thread.
class UdpListener final : public Listener {
public:
    UdpListener(Clock& clock, const std::string& bind_spec, ServerIdentity identity,
                UdpSessionConfig session_cfg = {})
        : clock_(clock),
          identity_(std::move(identity)),
          cfg_(std::move(session_cfg)),
          cond_(clock),
          socket_(std::make_shared<UdpSocket>()) {
        socket_->bind(SocketAddress::resolve(bind_spec, kDefaultPort));
        local_address_ = socket_->local_address().to_string();
        rx_ = std::thread([this] { rx_loop(); });
    }

    ~UdpListener() override { close(); }

    SessionPtr accept(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(mu_);
        cond_.wait_until(lk, deadline, [&] { return closed_ || !accept_queue_.empty(); });
        if (!accept_queue_.empty()) {
            SessionPtr s = std::move(accept_queue_.front());
            accept_queue_.pop_front();
            return s;
        }
        if (closed_) throw ConnectionClosed("listener closed");
        throw TimeoutError("accept");
    }

    void close() override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (closed_) return;
            closed_ = true;
        }
        cond_.notify_all();
        stop_.store(true);
        if (rx_.joinable()) rx_.join();
        socket_->close();
        std::unordered_map<std::string, std::shared_ptr<UdpSession>> sessions;
        {
            std::lock_guard<std::mutex> lk(mu_);
            sessions.swap(sessions_);
        }
        for (auto& [_, s] : sessions) s->abort("listener closed");
    }

    std::string local_address() const override { return local_address_; }

private:
    void rx_loop() {
        namespace w = detail::udpwire;
        while (!stop_.load()) {
            auto pkt = socket_->receive(std::chrono::milliseconds(20));
            sweep();
            if (!pkt || stop_.load()) continue;
            auto hdr = w::parse_header(pkt->payload);
            if (!hdr) continue;
            std::string key = pkt->from.to_string();

            std::shared_ptr<UdpSession> session;
            {
                std::lock_guard<std::mutex> lk(mu_);
                auto it = sessions_.find(key);
                if (it != sessions_.end()) session = it->second;
            }

            if (hdr->type == w::kHello) {
                if (session && session->conn_id() == hdr->conn_id) {
                    session->handle_packet(pkt->payload); // dup opener: reply again
                    continue;
                }
                on_hello(*hdr, *pkt, key);
                continue;
            }
            if (!session || session->conn_id() != hdr->conn_id) continue;
            bool was_established = session->established();
            session->handle_packet(pkt->payload);
            if (!was_established && session->established()) enqueue(session);
        }
    }

    void on_hello(const detail::udpwire::Header& hdr, const UdpPacket& pkt,
                  const std::string& key) {
        namespace w = detail::udpwire;
        auto hello = w::parse_hello(w::body_of(pkt.payload));
        if (!hello) return;
        if (hello->alpn != kAlpn) {
            Bytes refuse = w::build_close(hdr.conn_id, 0x2, "ALPN mismatch");
            socket_->send_to(refuse, pkt.from);
            return;
        }

        std::random_device rd;
        w::HelloReplyFields reply;
        reply.server_nonce = rd();
        reply.server_max_datagram = w::clamp_u32(cfg_.local_max_datagram_frame_size);
        reply.initial_stream_credit = cfg_.initial_stream_credit;
        reply.alpn = hello->alpn;
        reply.cert_der = identity_.cert_der;
        Bytes t = w::transcript(hello->client_nonce, reply.server_nonce, hdr.conn_id,
                                hello->client_max_datagram, reply.server_max_datagram,
                                reply.initial_stream_credit, reply.alpn, reply.cert_der);
        reply.signature = sign_message(*identity_.key, t);
        Bytes reply_wire = w::build_hello_reply(hdr.conn_id, reply);

        auto socket = socket_;
        SocketAddress peer = pkt.from;
        auto session = std::make_shared<UdpSession>(
            clock_, UdpSession::Role::Server, cfg_, hdr.conn_id,
            [socket, peer](BytesView p) {
                if (socket->valid()) socket->send_to(p, peer);
            });
        session->server_install_handshake(hello->client_max_datagram, std::move(reply_wire),
                                          pkt.payload.size());
        std::lock_guard<std::mutex> lk(mu_);
        auto it = sessions_.find(key);
        if (it != sessions_.end()) it->second->abort("superseded by new connection");
        sessions_[key] = std::move(session);
    }

    void enqueue(std::shared_ptr<UdpSession> session) {
        {
            std::lock_guard<std::mutex> lk(mu_);
            accept_queue_.push_back(std::move(session));
        }
        cond_.notify_all();
    }

    void sweep() {
        std::vector<std::shared_ptr<UdpSession>> live;
        {
            std::lock_guard<std::mutex> lk(mu_);
            live.reserve(sessions_.size());
            for (auto it = sessions_.begin(); it != sessions_.end();) {
                if (it->second->is_closed()) {
                    it = sessions_.erase(it);
                } else {
                    live.push_back(it->second);
                    ++it;
                }
            }
        }
        for (auto& s : live) s->tick();
    }

    Clock& clock_;
    ServerIdentity identity_;
    UdpSessionConfig cfg_;
    mutable std::mutex mu_;
    ClockCondition cond_;
    std::shared_ptr<UdpSocket> socket_;
    std::string local_address_;
    std::unordered_map<std::string, std::shared_ptr<UdpSession>> sessions_;
    std::deque<SessionPtr> accept_queue_;
    bool closed_ = false;
    std::atomic<bool> stop_{false};
    std::thread rx_;
};

} // namespace doq
