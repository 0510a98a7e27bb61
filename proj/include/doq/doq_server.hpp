// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>

#include "doq/clock.hpp"
#include "doq/dns.hpp"
#include "doq/errors.hpp"
#include "doq/exchange.hpp"
#include "doq/session.hpp"

namespace doq {

using ResolveFn = std::function<DnsMessage(const DnsMessage&)>;

struct ServeOptions {
    std::uint64_t pending_cap = 1000;    // in-flight queries per connection
    std::size_t response_padding_block = 468;
    // Invoked once the serving loops hold clock registrations; a spawner that
    // pinned the clock across the handoff releases it here.
    std::function<void()> on_ready;
};

struct ServeStats {
    std::uint64_t stream_queries = 0;
    std::uint64_t datagram_queries = 0;
    std::uint64_t malformed_datagrams = 0;
    std::uint64_t truncated_responses = 0;
    std::uint64_t load_shed = 0; // connections closed for exceeding the cap
};

namespace detail {

// Join-free completion tracking for detached handler threads.
class WaitGroup {
public:
    void add() {
        std::lock_guard<std::mutex> lk(mu_);
        ++n_;
    }
    void done() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            --n_;
        }
        cv_.notify_all();
    }
    void wait() {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return n_ == 0; });
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    int n_ = 0;
};

// Blocks the spawner until the spawned handler owns a clock registration, so
// virtual time cannot advance between dispatch and handling.
class StartLatch {
public:
    void open() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            open_ = true;
        }
        cv_.notify_all();
    }
    void wait() {
        std::unique_lock<std::mutex> lk(mu_);
        cv_.wait(lk, [&] { return open_; });
    }

private:
    std::mutex mu_;
    std::condition_variable cv_;
    bool open_ = false;
};

} // namespace detail

// Serves one accepted connection until it closes: a stream loop answering
// each incoming bidirectional stream and, when negotiated, a datagram loop
// answering each incoming datagram. Every query is resolved through
// `resolve`; resolver failures map to SERVFAIL so clients always see a
// bounded outcome. Call from an unregistered thread; the loops manage their
// own clock registration.
class SessionServer {
public:
    SessionServer(SessionPtr session, ResolveFn resolve, ServeOptions opts = {})
        : session_(std::move(session)), resolve_(std::move(resolve)), opts_(opts) {}

    ServeStats run() {
        detail::StartLatch streams_up, datagrams_up;
        std::thread stream_loop([this, &streams_up] { serve_streams(streams_up); });
        std::thread datagram_loop;
        const bool datagrams = session_->capabilities().datagrams_usable();
        if (datagrams)
            datagram_loop = std::thread([this, &datagrams_up] { serve_datagrams(datagrams_up); });
        streams_up.wait();
        if (datagrams) datagrams_up.wait();
        if (opts_.on_ready) opts_.on_ready();
        stream_loop.join();
        if (datagram_loop.joinable()) datagram_loop.join();
        wg_.wait();
        std::lock_guard<std::mutex> lk(mu_);
        return stats_;
    }

private:
    bool admit_query() {
        std::lock_guard<std::mutex> lk(mu_);
        if (pending_ >= opts_.pending_cap) {
            ++stats_.load_shed;
            return false;
        }
        ++pending_;
        return true;
    }

    void retire_query() {
        std::lock_guard<std::mutex> lk(mu_);
        --pending_;
    }

    DnsMessage resolve_or_servfail(const DnsMessage& query) {
        try {
            return resolve_(query);
        } catch (const std::exception&) {
            return make_response(query, {}, RCODE_SERVFAIL);
        }
    }

    void serve_streams(detail::StartLatch& up) {
        ActorGuard actor(session_->clock());
        up.open();
        for (;;) {
            StreamPtr stream;
            try {
                stream = session_->accept_bidirectional_stream(kNever);
            } catch (const ConnectionClosed&) {
                return;
            }
            if (!admit_query()) {
                session_->close(code(DoqErrorCode::ExcessiveLoad));
                return;
            }
            dispatch([this, s = std::shared_ptr<Stream>(std::move(stream))] {
                handle_stream(*s);
            });
        }
    }

    void serve_datagrams(detail::StartLatch& up) {
        ActorGuard actor(session_->clock());
        up.open();
        for (;;) {
            Bytes wire;
            try {
                wire = session_->receive_datagram(kNever);
            } catch (const ConnectionClosed&) {
                return;
            }
            if (!admit_query()) {
                session_->close(code(DoqErrorCode::ExcessiveLoad));
                return;
            }
            dispatch([this, wire = std::move(wire)] { handle_datagram(wire); });
        }
    }

    // Runs fn in a detached handler thread; returns once the handler is
    // registered with the clock.
    template <class Fn>
    void dispatch(Fn fn) {
        wg_.add();
        auto latch = std::make_shared<detail::StartLatch>();
        std::thread([this, latch, fn = std::move(fn)] {
            ActorGuard actor(session_->clock());
            latch->open();
            try {
                fn();
            } catch (...) {
                // a single query must never take the server down
            }
            retire_query();
            wg_.done();
        }).detach();
        latch->wait();
    }

    void handle_stream(Stream& stream) {
        Bytes wire;
        try {
            wire = stream.read_to_end(kNever);
        } catch (const TransportError&) {
            return; // peer cancelled or connection died
        }
        auto frames = unframe_messages(wire);
        if (frames.messages.size() != 1 || !frames.remainder.empty()) {
            session_->close(code(DoqErrorCode::ProtocolError));
            return;
        }
        DnsMessage query;
        try {
            query = decode_message(frames.messages[0]);
        } catch (const CodecError&) {
            session_->close(code(DoqErrorCode::ProtocolError));
            return;
        }
        if (query.header.id != 0 || query.header.qr) {
            // stream-mode messages must carry a zero id and be queries
            session_->close(code(DoqErrorCode::ProtocolError));
            return;
        }
        {
            std::lock_guard<std::mutex> lk(mu_);
            ++stats_.stream_queries;
        }
        DnsMessage resp = resolve_or_servfail(query);
        resp.header.id = 0;
        try {
            stream.write(frame_message(encode_message(pad(resp))), true);
        } catch (const TransportError&) {
            // connection raced shut; nothing to deliver to
        }
    }

    void handle_datagram(const Bytes& wire) {
        auto reject = [this] {
            std::lock_guard<std::mutex> lk(mu_);
            ++stats_.malformed_datagrams;
        };
        auto frames = unframe_messages(wire);
        if (frames.messages.size() != 1 || !frames.remainder.empty()) return reject();
        DnsMessage query;
        try {
            query = decode_message(frames.messages[0]);
        } catch (const CodecError&) {
            return reject();
        }
        // datagram transactions require a nonzero correlation id
        if (query.header.id == 0 || query.header.qr) return reject();
        {
            std::lock_guard<std::mutex> lk(mu_);
            ++stats_.datagram_queries;
        }
        DnsMessage resp = resolve_or_servfail(query);
        resp.header.id = query.header.id;

        std::uint64_t budget = session_->capabilities().datagram_budget();
        Bytes out = frame_message(encode_message(pad(resp)));
        if (out.size() > budget) {
            // oversize response: truncate and trim until it fits
            resp.header.tc = true;
            while (out.size() > budget && !resp.answers.empty()) {
                resp.answers.pop_back();
                resp.header.ancount = static_cast<std::uint16_t>(resp.answers.size());
                out = frame_message(encode_message(pad(resp)));
            }
            if (out.size() > budget) out = frame_message(encode_message(resp));
            if (out.size() > budget) return; // nothing sendable at this budget
            std::lock_guard<std::mutex> lk(mu_);
            ++stats_.truncated_responses;
        }
        try {
            session_->send_datagram(out);
        } catch (const TransportError&) {
            // connection raced shut
        }
    }

    DnsMessage pad(const DnsMessage& resp) {
        if (opts_.response_padding_block <= 1) return resp;
        return apply_padding(resp, opts_.response_padding_block);
    }

    SessionPtr session_;
    ResolveFn resolve_;
    ServeOptions opts_;
    std::mutex mu_;
    detail::WaitGroup wg_;
    ServeStats stats_;
    std::uint64_t pending_ = 0;
};

inline ServeStats serve_session(SessionPtr session, ResolveFn resolve,
                                ServeOptions opts = {}) {
    return SessionServer(std::move(session), std::move(resolve), opts).run();
}

} // namespace doq
