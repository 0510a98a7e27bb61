// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

#include "doq/bytes.hpp"
#include "doq/clock.hpp"
#include "doq/errors.hpp"
#include "doq/ledger.hpp"
#include "doq/session.hpp"

namespace doq {

enum class StreamCreditPolicy {
    PerRetiredStream, // one MAX_STREAMS per fully closed stream
    HighWatermark,    // one bulk MAX_STREAMS per watermark crossing
};

// Deterministic in-memory link model. Streams are reliable and ordered;
// datagrams are droppable and reorderable; nothing is corrupted or
// duplicated. Identical seed + config + operation sequence gives identical
// ledgers and delivery traces.
struct FakeNetworkConfig {
    double datagram_loss_rate = 0.0;
    // Per-direction overrides; unset means datagram_loss_rate applies.
    std::optional<double> loss_rate_client_to_server;
    std::optional<double> loss_rate_server_to_client;

    ClockDuration delay_min = ClockDuration::zero();
    ClockDuration delay_max = ClockDuration::zero();

    StreamCreditPolicy credit_policy = StreamCreditPolicy::PerRetiredStream;
    double watermark_fraction = 0.5; // HighWatermark only, in (0, 1]
    std::uint64_t initial_stream_credit = 100;

    FrameCostModel cost_model{};
    std::uint32_t seed = 1;
    ClockDuration idle_timeout = std::chrono::seconds(30);

    // Observation hook for wire payloads; not part of the determinism surface.
    std::function<void(Direction, FrameType, BytesView)> payload_tap;

    void validate() const {
        auto in_unit = [](double p) { return p >= 0.0 && p <= 1.0; };
        if (!in_unit(datagram_loss_rate) ||
            (loss_rate_client_to_server && !in_unit(*loss_rate_client_to_server)) ||
            (loss_rate_server_to_client && !in_unit(*loss_rate_server_to_client)))
            throw std::invalid_argument("loss rate outside [0,1]");
        if (delay_min > delay_max) throw std::invalid_argument("delay min > max");
        if (watermark_fraction <= 0.0 || watermark_fraction > 1.0)
            throw std::invalid_argument("watermark fraction outside (0,1]");
        if (initial_stream_credit == 0)
            throw std::invalid_argument("initial stream credit must be positive");
    }
};

namespace detail {

// Shared state of one fake connection. Side 0 is the client (opener of
// streams); side 1 is the server (issuer of stream credit).
struct FakePairState : std::enable_shared_from_this<FakePairState> {
    FakePairState(Clock& clk, FakeNetworkConfig config, std::uint64_t client_adv,
                  std::uint64_t server_adv)
        : clock(clk), cfg(std::move(config)), rng(cfg.seed), cond{ClockCondition(clk),
                                                                  ClockCondition(clk)} {
        cfg.validate();
        caps[0] = {client_adv, server_adv, kAlpn, cfg.idle_timeout};
        caps[1] = {server_adv, client_adv, kAlpn, cfg.idle_timeout};
        last_activity = clock.now();
    }

    struct StreamRelay {
        std::uint64_t id = 0;
        Bytes pending[2];          // written by side, not yet flushed
        bool fin_sent[2]{};        // side closed its send direction
        Bytes delivered[2];        // data that arrived at side
        bool delivered_fin[2]{};   // FIN arrived at side
        bool reset_seen[2]{};      // peer cancelled; seen by side
        std::uint64_t reset_code[2]{};
        bool cancelled[2]{};       // side called cancel
        bool announced = false;    // queued for accept on the server side
        bool retired = false;      // both directions delivered to FIN
    };

    Clock& clock;
    FakeNetworkConfig cfg;
    SessionCapabilities caps[2];
    std::mutex mu;
    std::mt19937 rng;
    ClockCondition cond[2];

    bool closed = false;
    std::uint64_t close_code = 0;
    ClockTime last_activity{};

    std::uint64_t next_stream_id = 0; // client-initiated bidi: 0, 4, 8, ...
    std::map<std::uint64_t, StreamRelay> streams;
    std::deque<std::uint64_t> accept_queue; // announced to the server
    std::deque<Bytes> datagrams[2];         // inbound, arrival order, per side

    std::uint64_t stream_credit = 0; // remaining client opens
    std::uint64_t retired_since_grant = 0;
    FrameLedger ledger;

    // --- helpers, all called with mu held unless noted ---

    void touch(ClockTime t) { last_activity = std::max(last_activity, t); }

    ClockTime idle_deadline() const { return last_activity + cfg.idle_timeout; }

    void require_open() const {
        if (closed) throw ConnectionClosed(close_code);
    }

    double loss_rate(Direction dir) const {
        if (dir == Direction::ClientToServer && cfg.loss_rate_client_to_server)
            return *cfg.loss_rate_client_to_server;
        if (dir == Direction::ServerToClient && cfg.loss_rate_server_to_client)
            return *cfg.loss_rate_server_to_client;
        return cfg.datagram_loss_rate;
    }

    ClockDuration draw_delay() {
        if (cfg.delay_max == ClockDuration::zero()) return ClockDuration::zero();
        std::uniform_int_distribution<std::int64_t> d(cfg.delay_min.count(),
                                                      cfg.delay_max.count());
        return ClockDuration(d(rng));
    }

    bool draw_loss(Direction dir) {
        double p = loss_rate(dir);
        if (p <= 0.0) return false;
        if (p >= 1.0) return true;
        return std::bernoulli_distribution(p)(rng);
    }

    void close_locked(std::uint64_t code) {
        if (closed) return;
        closed = true;
        close_code = code;
        cond[0].notify_all();
        cond[1].notify_all();
    }

    // Waits on side's condition handling close and idle expiry uniformly.
    // Returns true if pred became true, false on caller deadline.
    template <class Pred>
    bool wait_side(std::unique_lock<std::mutex>& lk, int side, ClockTime deadline,
                   Pred pred) {
        for (;;) {
            if (pred()) return true;
            require_open();
            ClockTime idle = idle_deadline();
            ClockTime until = std::min(deadline, idle);
            bool ok = cond[side].wait_until(lk, until, [&] {
                return pred() || closed || idle_deadline() != idle;
            });
            if (pred()) return true;
            require_open();
            if (!ok && clock.now() >= idle && idle_deadline() == idle) {
                // genuinely idle for the whole window
                close_locked(0);
                throw ConnectionClosed(0);
            }
            if (!ok && clock.now() >= deadline) return false;
        }
    }

    void tap(Direction dir, FrameType type, BytesView payload) {
        if (cfg.payload_tap) cfg.payload_tap(dir, type, payload);
    }

    // --- wire actions ---

    void flush_stream(int side, std::uint64_t id) {
        auto& relay = streams.at(id);
        Bytes data = std::move(relay.pending[side]);
        relay.pending[side].clear();
        Direction dir = side == 0 ? Direction::ClientToServer : Direction::ServerToClient;
        ledger.record(dir, FrameType::Stream,
                      data.size() + cfg.cost_model.stream_frame_overhead);
        tap(dir, FrameType::Stream, data);
        touch(clock.now());
        ClockDuration delay = draw_delay();
        auto self = shared_from_this();
        clock.schedule(delay, [self, side, id, data = std::move(data)]() mutable {
            std::lock_guard<std::mutex> lk(self->mu);
            if (self->closed) return;
            int other = 1 - side;
            auto it = self->streams.find(id);
            if (it == self->streams.end()) return;
            auto& r = it->second;
            self->touch(self->clock.now());
            if (r.cancelled[other]) return; // receiver abandoned the stream
            r.delivered[other].insert(r.delivered[other].end(), data.begin(), data.end());
            r.delivered_fin[other] = true;
            if (other == 1 && !r.announced) {
                r.announced = true;
                self->accept_queue.push_back(id);
            }
            self->maybe_retire(r);
            self->cond[other].notify_all();
        });
    }

    // A stream is retired once each side has received the other's FIN.
    void maybe_retire(StreamRelay& r) {
        if (r.retired || !r.delivered_fin[0] || !r.delivered_fin[1]) return;
        r.retired = true;
        switch (cfg.credit_policy) {
        case StreamCreditPolicy::PerRetiredStream:
            grant_credit(1);
            break;
        case StreamCreditPolicy::HighWatermark: {
            ++retired_since_grant;
            auto threshold = static_cast<std::uint64_t>(
                std::max(1.0, cfg.watermark_fraction *
                                  static_cast<double>(cfg.initial_stream_credit)));
            if (retired_since_grant >= threshold) {
                grant_credit(retired_since_grant);
                retired_since_grant = 0;
            }
            break;
        }
        }
    }

    // Server raises the client's stream allowance; the client acknowledges
    // the standalone packet.
    void grant_credit(std::uint64_t n) {
        stream_credit += n;
        ledger.record(Direction::ServerToClient, FrameType::MaxStreams,
                      cfg.cost_model.max_streams_packet);
        ledger.record(Direction::ClientToServer, FrameType::Ack, cfg.cost_model.ack_packet);
        cond[0].notify_all();
    }

    void send_datagram_from(int side, BytesView payload) {
        require_open();
        const auto& c = caps[side];
        if (!c.datagrams_usable()) throw DatagramsUnsupported();
        if (payload.size() > c.datagram_budget())
            throw DatagramTooLarge(payload.size(), c.datagram_budget());
        Direction dir = side == 0 ? Direction::ClientToServer : Direction::ServerToClient;
        ledger.record(dir, FrameType::Datagram,
                      payload.size() + cfg.cost_model.datagram_frame_overhead);
        tap(dir, FrameType::Datagram, payload);
        touch(clock.now());
        if (draw_loss(dir)) return; // sender never learns
        ClockDuration delay = draw_delay();
        Bytes copy(payload.begin(), payload.end());
        auto self = shared_from_this();
        clock.schedule(delay, [self, side, copy = std::move(copy)]() mutable {
            std::lock_guard<std::mutex> lk(self->mu);
            if (self->closed) return;
            int other = 1 - side;
            self->touch(self->clock.now());
            self->datagrams[other].push_back(std::move(copy));
            self->cond[other].notify_all();
        });
    }

    void cancel_stream(int side, std::uint64_t id, std::uint64_t code) {
        auto it = streams.find(id);
        if (it == streams.end()) return;
        auto& r = it->second;
        if (r.cancelled[side]) return;
        r.cancelled[side] = true;
        cond[side].notify_all(); // wake a reader blocked on this side
        touch(clock.now());
        ClockDuration delay = draw_delay();
        auto self = shared_from_this();
        clock.schedule(delay, [self, side, id, code] {
            std::lock_guard<std::mutex> lk(self->mu);
            if (self->closed) return;
            int other = 1 - side;
            auto jt = self->streams.find(id);
            if (jt == self->streams.end()) return;
            self->touch(self->clock.now());
            jt->second.reset_seen[other] = true;
            jt->second.reset_code[other] = code;
            self->cond[other].notify_all();
        });
    }
};

} // namespace detail

class FakeStream final : public Stream {
public:
    FakeStream(std::shared_ptr<detail::FakePairState> st, int side, std::uint64_t id)
        : st_(std::move(st)), side_(side), id_(id) {}

    std::uint64_t id() const override { return id_; }

    void write(BytesView data, bool fin) override {
        std::lock_guard<std::mutex> lk(st_->mu);
        st_->require_open();
        auto& r = st_->streams.at(id_);
        if (r.cancelled[side_] || r.reset_seen[side_]) return; // abandoned stream
        if (r.fin_sent[side_]) throw ProtocolError("write after FIN");
        r.pending[side_].insert(r.pending[side_].end(), data.begin(), data.end());
        if (fin) {
            r.fin_sent[side_] = true;
            st_->flush_stream(side_, id_);
        }
    }

    Bytes read_to_end(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(st_->mu);
        bool done = st_->wait_side(lk, side_, deadline, [&] {
            auto& r = st_->streams.at(id_);
            return r.delivered_fin[side_] || r.reset_seen[side_] || r.cancelled[side_];
        });
        if (!done) throw TimeoutError("stream read");
        auto& r = st_->streams.at(id_);
        if (r.delivered_fin[side_]) return r.delivered[side_];
        if (r.cancelled[side_]) throw StreamCancelled();
        throw PeerStreamError(r.reset_code[side_]);
    }

    void cancel(std::uint64_t error_code) override {
        std::lock_guard<std::mutex> lk(st_->mu);
        if (st_->closed) return;
        st_->cancel_stream(side_, id_, error_code);
    }

private:
    std::shared_ptr<detail::FakePairState> st_;
    int side_;
    std::uint64_t id_;
};

class FakeSession final : public Session {
public:
    FakeSession(std::shared_ptr<detail::FakePairState> st, int side)
        : st_(std::move(st)), side_(side) {}

    const SessionCapabilities& capabilities() const override { return st_->caps[side_]; }

    StreamPtr open_bidirectional_stream() override {
        std::lock_guard<std::mutex> lk(st_->mu);
        st_->require_open();
        if (side_ != 0) throw ProtocolError("server does not open streams here");
        if (st_->stream_credit == 0) throw StreamsExhausted();
        --st_->stream_credit;
        std::uint64_t id = st_->next_stream_id;
        st_->next_stream_id += 4;
        st_->streams[id].id = id;
        return std::make_unique<FakeStream>(st_, side_, id);
    }

    bool wait_stream_credit(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(st_->mu);
        return st_->wait_side(lk, side_, deadline, [&] { return st_->stream_credit > 0; });
    }

    StreamPtr accept_bidirectional_stream(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(st_->mu);
        bool got = st_->wait_side(lk, side_, deadline,
                                  [&] { return !st_->accept_queue.empty(); });
        if (!got) throw TimeoutError("stream accept");
        std::uint64_t id = st_->accept_queue.front();
        st_->accept_queue.pop_front();
        return std::make_unique<FakeStream>(st_, side_, id);
    }

    void send_datagram(BytesView payload) override {
        std::lock_guard<std::mutex> lk(st_->mu);
        st_->send_datagram_from(side_, payload);
    }

    Bytes receive_datagram(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(st_->mu);
        bool got = st_->wait_side(lk, side_, deadline,
                                  [&] { return !st_->datagrams[side_].empty(); });
        if (!got) throw TimeoutError("datagram receive");
        Bytes out = std::move(st_->datagrams[side_].front());
        st_->datagrams[side_].pop_front();
        return out;
    }

    void close(std::uint64_t application_error_code) override {
        std::lock_guard<std::mutex> lk(st_->mu);
        st_->close_locked(application_error_code);
    }

    bool is_closed() const override {
        std::lock_guard<std::mutex> lk(st_->mu);
        return st_->closed;
    }

    std::uint64_t bytes_sent() const override {
        return st_->ledger.total_octets(send_direction());
    }

    std::uint64_t bytes_received() const override {
        return st_->ledger.total_octets(opposite(send_direction()));
    }

    Clock& clock() override { return st_->clock; }

    const FrameLedger& frame_ledger() const { return st_->ledger; }
    std::uint64_t close_code() const {
        std::lock_guard<std::mutex> lk(st_->mu);
        return st_->close_code;
    }

private:
    Direction send_direction() const {
        return side_ == 0 ? Direction::ClientToServer : Direction::ServerToClient;
    }

    std::shared_ptr<detail::FakePairState> st_;
    int side_;
};

struct FakePair {
    std::shared_ptr<FakeSession> client;
    std::shared_ptr<FakeSession> server;
};

inline FakePair make_fake_pair(Clock& clock, FakeNetworkConfig cfg,
                               std::uint64_t client_max_datagram = kRecommendedDatagramFrameSize,
                               std::uint64_t server_max_datagram = kRecommendedDatagramFrameSize) {
    auto st = std::make_shared<detail::FakePairState>(clock, std::move(cfg),
                                                      client_max_datagram,
                                                      server_max_datagram);
    st->stream_credit = st->cfg.initial_stream_credit;
    return {std::make_shared<FakeSession>(st, 0), std::make_shared<FakeSession>(st, 1)};
}

// In-process connection rendezvous standing in for a network listener.
class FakeListener final : public Listener {
public:
    FakeListener(Clock& clock, FakeNetworkConfig cfg,
                 std::uint64_t server_max_datagram = kRecommendedDatagramFrameSize)
        : clock_(clock), cfg_(std::move(cfg)), server_adv_(server_max_datagram),
          cond_(clock) {}

    // Client-side entry: creates a connection and hands back the client end.
    std::shared_ptr<FakeSession> connect(
        std::uint64_t client_max_datagram = kRecommendedDatagramFrameSize) {
        auto pair = make_fake_pair(clock_, cfg_, client_max_datagram, server_adv_);
        {
            std::lock_guard<std::mutex> lk(mu_);
            if (closed_) throw ConnectFailed("listener closed");
            pending_.push_back(pair.server);
            ++connections_;
        }
        cond_.notify_all();
        return pair.client;
    }

    SessionPtr accept(ClockTime deadline) override {
        std::unique_lock<std::mutex> lk(mu_);
        bool got = cond_.wait_until(lk, deadline,
                                    [&] { return closed_ || !pending_.empty(); });
        if (!pending_.empty()) {
            auto s = pending_.front();
            pending_.pop_front();
            return s;
        }
        if (closed_) throw ConnectionClosed(0);
        if (!got) throw TimeoutError("accept");
        return nullptr; // unreachable
    }

    void close() override {
        {
            std::lock_guard<std::mutex> lk(mu_);
            closed_ = true;
        }
        cond_.notify_all();
    }

    std::string local_address() const override { return "fake:0"; }

    std::uint64_t connections_created() const {
        std::lock_guard<std::mutex> lk(mu_);
        return connections_;
    }

private:
    Clock& clock_;
    FakeNetworkConfig cfg_;
    std::uint64_t server_adv_;
    mutable std::mutex mu_;
    ClockCondition cond_;
    std::deque<std::shared_ptr<FakeSession>> pending_;
    bool closed_ = false;
    std::uint64_t connections_ = 0;
};

} // namespace doq
