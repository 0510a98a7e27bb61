// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <mutex>
#include <random>
#include <thread>
#include <unordered_map>
#include <vector>

#include "doq/clock.hpp"
#include "doq/dns.hpp"
#include "doq/errors.hpp"
#include "doq/exchange.hpp"
#include "doq/session.hpp"

namespace doq {

struct DoqClientOptions {
    ModePreference preference = ModePreference::Auto;
    RetryPolicy retry{};
    std::uint32_t id_seed = 0x5eed;
    bool tc_stream_fallback = true;
};

// Client-side exchange engine over one session. Exchanges run in worker
// threads so callers can pace sends without blocking on completions; datagram
// responses are demultiplexed by a single dispatcher routing on the
// transaction id.
class DoqClient {
public:
    using Options = DoqClientOptions;

    struct Pending {
        ExchangeRecord record;
        DnsMessage query;
        bool started = false;
        bool done = false;
        Stream* stream = nullptr; // live only while a worker owns it
    };
    using Handle = std::shared_ptr<Pending>;

    DoqClient(SessionPtr session, Options opts = {})
        : session_(std::move(session)), opts_(opts), rng_(opts.id_seed),
          cond_(session_->clock()),
          mode_(negotiate_mode(session_->capabilities(), opts.preference)) {
        if (mode_ == DeliveryMode::Datagram) {
            session_->clock().pin(); // route() unpins once registered
            dispatcher_ = std::thread([this] { route(); });
        }
    }

    ~DoqClient() { shutdown(); }
    DoqClient(const DoqClient&) = delete;
    DoqClient& operator=(const DoqClient&) = delete;

    DeliveryMode mode() const { return mode_; }
    Session& session() { return *session_; }

    // Assigns the transaction id, launches the exchange, and returns once the
    // first send is on the wire (datagram) or the worker owns the clock
    // (stream), so paced callers observe send-ordering.
    Handle begin(DnsMessage query) {
        auto h = std::make_shared<Pending>();
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (shutdown_) throw ConnectionClosed("client shut down", 0);
            h->record.sequence = next_sequence_++;
            h->record.mode = mode_;
            h->record.txid = assign_transaction_id(mode_, table_, rng_);
            query.header.id = h->record.txid;
            h->query = std::move(query);
            h->record.query_wire = frame_message(encode_message(h->query));
            if (mode_ == DeliveryMode::Datagram) table_[h->record.txid] = h;
            session_->clock().pin(); // worker unpins once registered
            workers_.emplace_back([this, h] { run_worker(h); });
        }
        std::unique_lock<std::mutex> lk(mu_);
        cond_.wait(lk, [&] { return h->started; });
        return h;
    }

    ExchangeRecord await(const Handle& h) {
        std::unique_lock<std::mutex> lk(mu_);
        cond_.wait(lk, [&] { return h->done; });
        table_.erase(h->record.txid);
        return h->record;
    }

    // Stream exchanges only; datagram transactions have no cancellation
    // signal on the wire.
    void cancel(const Handle& h) {
        std::lock_guard<std::mutex> lk(mu_);
        if (h->record.mode == DeliveryMode::Datagram)
            throw CancellationUnsupported("datagram transactions cannot be cancelled");
        if (h->done) throw AlreadyCompleted("exchange already completed");
        h->record.outcome = ExchangeOutcome::Cancelled;
        h->record.completed_at = session_->clock().now();
        h->done = true;
        if (h->stream) h->stream->cancel(code(DoqErrorCode::RequestCancelled));
        cond_.notify_all();
    }

    ExchangeRecord exchange(DnsMessage query) { return await(begin(std::move(query))); }

    std::uint64_t orphan_count() const {
        std::lock_guard<std::mutex> lk(mu_);
        return orphans_;
    }
    std::uint64_t malformed_count() const {
        std::lock_guard<std::mutex> lk(mu_);
        return malformed_;
    }

    // Closes the session and reaps all exchange workers.
    void shutdown() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (shutdown_) return;
            shutdown_ = true;
            cond_.notify_all();
        }
        session_->close(code(DoqErrorCode::NoError));
        std::vector<std::thread> workers;
        {
            std::lock_guard<std::mutex> lk(mu_);
            workers.swap(workers_);
        }
        for (auto& w : workers) w.join();
        if (dispatcher_.joinable()) dispatcher_.join();
    }

private:
    void run_worker(const Handle& h) {
        ActorGuard actor(session_->clock());
        session_->clock().unpin();
        try {
            if (h->record.mode == DeliveryMode::Datagram)
                run_datagram(h);
            else
                run_stream(h);
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lk(mu_);
            finish_locked(h, ExchangeOutcome::Failed, e.what());
        }
    }

    void mark_started_locked(const Handle& h) {
        if (!h->started) {
            h->started = true;
            cond_.notify_all();
        }
    }

    void finish_locked(const Handle& h, ExchangeOutcome outcome, std::string reason = {}) {
        mark_started_locked(h);
        if (h->done) return; // cancellation already finalized the record
        h->record.outcome = outcome;
        h->record.failure_reason = std::move(reason);
        h->record.completed_at = session_->clock().now();
        h->done = true;
        cond_.notify_all();
    }

    void run_stream(const Handle& h) {
        {
            std::lock_guard<std::mutex> lk(mu_);
            mark_started_locked(h);
        }
        try {
            auto result = exchange_stream(*session_, h->query, opts_.retry, [&](Stream& s) {
                std::lock_guard<std::mutex> lk(mu_);
                h->stream = &s;
                h->record.attempts = 1;
                h->record.send_timestamps.push_back(session_->clock().now());
            });
            std::lock_guard<std::mutex> lk(mu_);
            h->stream = nullptr;
            h->record.bytes_sent += result.bytes_sent;
            h->record.bytes_received += result.bytes_received;
            h->record.response = std::move(result.response);
            finish_locked(h, ExchangeOutcome::Responded);
        } catch (const StreamCancelled&) {
            std::lock_guard<std::mutex> lk(mu_);
            h->stream = nullptr; // cancel() finalized the record
        } catch (...) {
            {
                std::lock_guard<std::mutex> lk(mu_);
                h->stream = nullptr;
            }
            throw;
        }
    }

    void run_datagram(const Handle& h) {
        Clock& clock = session_->clock();
        std::unique_lock<std::mutex> lk(mu_);
        for (std::uint32_t attempt = 1; attempt <= opts_.retry.max_attempts(); ++attempt) {
            lk.unlock();
            session_->send_datagram(h->record.query_wire); // throws end the exchange
            ClockTime sent_at = clock.now();
            lk.lock();
            h->record.attempts = attempt;
            h->record.send_timestamps.push_back(sent_at);
            h->record.bytes_sent += h->record.query_wire.size();
            mark_started_locked(h);

            ClockTime window_end = sent_at + opts_.retry.attempt_window(attempt);
            bool got = cond_.wait_until(lk, window_end,
                                        [&] { return h->record.response || shutdown_; });
            if (shutdown_ && !h->record.response) {
                finish_locked(h, ExchangeOutcome::Failed, "client shut down");
                return;
            }
            if (!got) continue; // window expired; retransmit the same bytes

            const DnsMessage& resp = *h->record.response;
            if (!resp.header.qr || resp.questions != h->query.questions) {
                finish_locked(h, ExchangeOutcome::Failed, "response question mismatch");
                return;
            }
            if (resp.header.tc && opts_.tc_stream_fallback) {
                lk.unlock();
                stream_fallback(h);
                lk.lock();
                return;
            }
            finish_locked(h, ExchangeOutcome::Responded);
            return;
        }
        finish_locked(h, ExchangeOutcome::Failed, "retries exhausted");
    }

    // Truncated datagram response: replay this one transaction over a stream
    // to fetch the full answer.
    void stream_fallback(const Handle& h) {
        DnsMessage q = h->query;
        q.header.id = 0;
        try {
            auto result = exchange_stream(*session_, q, opts_.retry);
            std::lock_guard<std::mutex> lk(mu_);
            h->record.tc_fallback = true;
            h->record.bytes_sent += result.bytes_sent;
            h->record.bytes_received += result.bytes_received;
            h->record.response = std::move(result.response);
            finish_locked(h, ExchangeOutcome::Responded);
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lk(mu_);
            h->record.tc_fallback = true;
            finish_locked(h, ExchangeOutcome::Failed,
                          std::string("stream fallback failed: ") + e.what());
        }
    }

    // Single consumer of the session's datagram receive path; correlates
    // responses to pending exchanges by transaction id.
    void route() {
        ActorGuard actor(session_->clock());
        session_->clock().unpin();
        for (;;) {
            Bytes wire;
            try {
                wire = session_->receive_datagram(kNever);
            } catch (const ConnectionClosed& e) {
                fail_all_pending(e.what());
                return;
            }
            auto frames = unframe_messages(wire);
            if (frames.messages.size() != 1 || !frames.remainder.empty()) {
                std::lock_guard<std::mutex> lk(mu_);
                ++malformed_;
                continue;
            }
            DnsMessage msg;
            try {
                msg = decode_message(frames.messages[0]);
            } catch (const CodecError&) {
                std::lock_guard<std::mutex> lk(mu_);
                ++malformed_;
                continue;
            }
            std::lock_guard<std::mutex> lk(mu_);
            auto it = table_.find(msg.header.id);
            if (it == table_.end()) {
                ++orphans_;
                continue;
            }
            Handle& h = it->second;
            if (h->done || h->record.response) continue; // duplicate; drop silently
            h->record.bytes_received += wire.size();
            h->record.response = std::move(msg);
            cond_.notify_all();
        }
    }

    void fail_all_pending(const std::string& reason) {
        std::lock_guard<std::mutex> lk(mu_);
        for (auto& [txid, h] : table_)
            if (!h->done && !h->record.response)
                finish_locked(h, ExchangeOutcome::Failed, reason);
        cond_.notify_all();
    }

    SessionPtr session_;
    Options opts_;
    mutable std::mutex mu_;
    std::mt19937 rng_;
    ClockCondition cond_;
    DeliveryMode mode_;
    std::unordered_map<std::uint16_t, Handle> table_;
    std::vector<std::thread> workers_;
    std::thread dispatcher_;
    std::uint64_t next_sequence_ = 0;
    std::uint64_t orphans_ = 0;
    std::uint64_t malformed_ = 0;
    bool shutdown_ = false;
};

} // namespace doq
