// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <random>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>

#include "doq/bytes.hpp"
#include "doq/clock.hpp"
#include "doq/errors.hpp"
#include "doq/udp.hpp"

namespace doq {

struct RelayConfig {
    std::string listen_address = "127.0.0.1:0";
    std::string target_address; // "host:port"
    ClockDuration delay_min = ClockDuration::zero(); // per packet, each direction
    ClockDuration delay_max = ClockDuration::zero();
    double loss_rate = 0.0; // per packet, each direction, independent draws
    std::uint32_t seed = 1;

    void validate() const {
        if (target_address.empty()) throw std::invalid_argument("relay needs a target");
        if (delay_min > delay_max) throw std::invalid_argument("delay min > max");
        if (loss_rate < 0.0 || loss_rate > 1.0)
            throw std::invalid_argument("loss rate outside [0,1]");
    }
};

// Bidirectional UDP impairment relay: every packet, in each direction
// independently, is dropped with `loss_rate` and otherwise delayed by a
// uniform draw from [delay_min, delay_max] before being forwarded verbatim.
// Each client address gets its own upstream socket so return traffic finds
// its way back. Equal delay bounds preserve arrival order (timer events at
// one due time fire in schedule order). Built for real-time clocks.
class ImpairmentRelay {
public:
    ImpairmentRelay(Clock& clock, RelayConfig cfg)
        : st_(std::make_shared<State>(clock, std::move(cfg))) {
        st_->cfg.validate();
        st_->listen.bind(SocketAddress::resolve(st_->cfg.listen_address, 0));
        st_->local_address = st_->listen.local_address().to_string();
        st_->target = SocketAddress::resolve(st_->cfg.target_address, 0);
        rx_ = std::thread([this] { client_side_loop(); });
    }

    ~ImpairmentRelay() { stop(); }
    ImpairmentRelay(const ImpairmentRelay&) = delete;
    ImpairmentRelay& operator=(const ImpairmentRelay&) = delete;

    void stop() {
        if (st_->stopped.exchange(true)) return;
        if (rx_.joinable()) rx_.join();
        for (auto& [key, flow] : flows_)
            if (flow->rx.joinable()) flow->rx.join();
        // Sockets stay open until the last delayed send lets go of the state;
        // stopped_ keeps those sends from actually transmitting.
    }

    const std::string& local_address() const { return st_->local_address; }
    std::uint64_t delivered_to_target() const { return st_->delivered_to_target.load(); }
    std::uint64_t delivered_to_client() const { return st_->delivered_to_client.load(); }
    std::uint64_t dropped() const { return st_->dropped.load(); }

private:
    struct State {
        State(Clock& c, RelayConfig config)
            : clock(c), cfg(std::move(config)), rng(cfg.seed) {}

        Clock& clock;
        RelayConfig cfg;
        UdpSocket listen;
        std::string local_address;
        SocketAddress target;
        std::mutex rng_mu;
        std::mt19937 rng;
        std::atomic<bool> stopped{false};
        std::atomic<std::uint64_t> delivered_to_target{0};
        std::atomic<std::uint64_t> delivered_to_client{0};
        std::atomic<std::uint64_t> dropped{0};

        // Loss then delay, both draws always consumed, so packet timing
        // never shifts which random numbers later packets see.
        bool impair(ClockDuration& delay_out) {
            std::lock_guard<std::mutex> lk(rng_mu);
            bool lost = std::bernoulli_distribution(cfg.loss_rate)(rng);
            using ms = std::chrono::duration<double, std::milli>;
            double lo = std::chrono::duration_cast<ms>(cfg.delay_min).count();
            double hi = std::chrono::duration_cast<ms>(cfg.delay_max).count();
            double drawn = std::uniform_real_distribution<double>(lo, hi)(rng);
            delay_out = std::chrono::duration_cast<ClockDuration>(ms(drawn));
            return !lost;
        }
    };

    struct Flow {
        UdpSocket up;
        SocketAddress client;
        std::thread rx;
    };

    void client_side_loop() {
        while (!st_->stopped.load()) {
            auto pkt = st_->listen.receive(std::chrono::milliseconds(20));
            if (!pkt || st_->stopped.load()) continue;
            auto flow = flow_for(pkt->from);
            ClockDuration delay;
            if (!st_->impair(delay)) {
                st_->dropped.fetch_add(1);
                continue;
            }
            st_->clock.schedule(delay, [st = st_, flow, payload = std::move(pkt->payload)] {
                if (st->stopped.load()) return;
                try {
                    flow->up.send(payload);
                    st->delivered_to_target.fetch_add(1);
                } catch (const Error&) {
                    // upstream briefly unreachable: the packet is simply lost
                }
            });
        }
    }

    void target_side_loop(std::shared_ptr<Flow> flow) {
        while (!st_->stopped.load()) {
            auto pkt = flow->up.receive(std::chrono::milliseconds(20));
            if (!pkt || st_->stopped.load()) continue;
            ClockDuration delay;
            if (!st_->impair(delay)) {
                st_->dropped.fetch_add(1);
                continue;
            }
            st_->clock.schedule(delay, [st = st_, client = flow->client,
                                        payload = std::move(pkt->payload)] {
                if (st->stopped.load()) return;
                try {
                    st->listen.send_to(payload, client);
                    st->delivered_to_client.fetch_add(1);
                } catch (const Error&) {
                }
            });
        }
    }

    std::shared_ptr<Flow> flow_for(const SocketAddress& client) {
        std::string key = client.to_string();
        std::lock_guard<std::mutex> lk(flows_mu_);
        auto it = flows_.find(key);
        if (it != flows_.end()) return it->second;
        auto flow = std::make_shared<Flow>();
        flow->client = client;
        flow->up.connect(st_->target);
        flow->rx = std::thread([this, flow] { target_side_loop(flow); });
        flows_.emplace(std::move(key), flow);
        return flow;
    }

    std::shared_ptr<State> st_;
    std::mutex flows_mu_;
    std::unordered_map<std::string, std::shared_ptr<Flow>> flows_;
    std::thread rx_;
};

} // namespace doq
