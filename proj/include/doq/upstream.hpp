// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>

#include "doq/bytes.hpp"
#include "doq/clock.hpp"
#include "doq/dns.hpp"
#include "doq/errors.hpp"
#include "doq/udp.hpp"

namespace doq {

struct UpstreamConfig {
    std::string address; // "host:port"; port 53 when omitted
    ClockDuration timeout = std::chrono::seconds(2);
    int retries = 2;
};

// Resolves queries against a classic UDP resolver. Each in-flight query gets
// a fresh nonzero id, unique among pending ones, and the caller's id is
// restored on the way back. Safe for concurrent forward() calls.
class UpstreamForwarder {
public:
    UpstreamForwarder(Clock& clock, UpstreamConfig cfg)
        : clock_(clock), cfg_(std::move(cfg)), rng_(std::random_device{}()) {
        if (cfg_.timeout <= ClockDuration::zero())
            throw std::invalid_argument("upstream timeout must be positive");
        socket_.connect(SocketAddress::resolve(cfg_.address, 53));
        rx_ = std::thread([this] { loop(); });
    }

    ~UpstreamForwarder() { stop(); }
    UpstreamForwarder(const UpstreamForwarder&) = delete;
    UpstreamForwarder& operator=(const UpstreamForwarder&) = delete;

    void stop() {
        stopped_.store(true);
        {
            std::lock_guard<std::mutex> lk(mu_);
            for (auto& [id, slot] : pending_) slot->cond.notify_all();
        }
        if (rx_.joinable()) rx_.join();
        socket_.close();
    }

    // Blocks until the upstream answers or the retry budget runs out.
    DnsMessage forward(const DnsMessage& query) {
        auto slot = std::make_shared<Slot>(clock_);
        std::uint16_t upstream_id;
        {
            std::lock_guard<std::mutex> lk(mu_);
            upstream_id = fresh_id_locked();
            pending_.emplace(upstream_id, slot);
        }

        DnsMessage outbound = query;
        outbound.header.id = upstream_id;
        Bytes wire = encode_message(outbound); // classic UDP: no length prefix

        int attempts = 1 + std::max(cfg_.retries, 0);
        for (int a = 0; a < attempts; ++a) {
            socket_.send(wire);
            ++sends_;
            std::unique_lock<std::mutex> lk(mu_);
            slot->cond.wait_until(lk, clock_.now() + cfg_.timeout,
                                  [&] { return slot->raw.has_value() || stopped_.load(); });
            if (slot->raw) {
                Bytes raw = std::move(*slot->raw);
                pending_.erase(upstream_id);
                lk.unlock();
                DnsMessage response;
                try {
                    response = decode_message(raw);
                } catch (const CodecError& e) {
                    throw UpstreamMalformed(std::string("upstream response: ") + e.what());
                }
                response.header.id = query.header.id;
                ++resolved_;
                return response;
            }
            if (stopped_.load()) {
                pending_.erase(upstream_id);
                throw UpstreamTimeout("forwarder stopped");
            }
        }
        {
            std::lock_guard<std::mutex> lk(mu_);
            pending_.erase(upstream_id);
        }
        throw UpstreamTimeout("no response from " + cfg_.address + " after " +
                              std::to_string(attempts) + " attempts");
    }

    std::uint64_t forwards_resolved() const { return resolved_.load(); }
    std::uint64_t packets_sent() const { return sends_.load(); }

private:
    // One condition per slot: a reply wakes its own caller, not the herd.
    struct Slot {
        explicit Slot(Clock& clock) : cond(clock) {}
        std::optional<Bytes> raw;
        ClockCondition cond;
    };

    std::uint16_t fresh_id_locked() {
        std::uniform_int_distribution<std::uint32_t> dist(1, 0xffff);
        for (;;) {
            auto id = static_cast<std::uint16_t>(dist(rng_));
            if (pending_.count(id) == 0) return id;
        }
    }

    void loop() {
        while (!stopped_.load()) {
            auto pkt = socket_.receive(std::chrono::milliseconds(20));
            if (!pkt || pkt->payload.size() < 2) continue;
            std::uint16_t id = get_u16(pkt->payload, 0);
            std::lock_guard<std::mutex> lk(mu_);
            auto it = pending_.find(id);
            if (it == pending_.end() || it->second->raw) continue;
            it->second->raw = std::move(pkt->payload);
            it->second->cond.notify_all();
        }
    }

    Clock& clock_;
    UpstreamConfig cfg_;
    UdpSocket socket_;
    std::mutex mu_;
    std::unordered_map<std::uint16_t, std::shared_ptr<Slot>> pending_;
    std::mt19937 rng_;
    std::atomic<std::uint64_t> resolved_{0};
    std::atomic<std::uint64_t> sends_{0};
    std::atomic<bool> stopped_{false};
    std::thread rx_;
};

} // namespace doq
