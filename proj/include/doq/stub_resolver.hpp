// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "doq/dns.hpp"
#include "doq/errors.hpp"
#include "doq/udp.hpp"

namespace doq {

// Hermetic stand-in for a public recursive resolver: one zone, fixed answers.
struct StubZoneConfig {
    std::string zone = "example.org";
    std::array<std::string, 4> answers = {"192.0.2.1", "192.0.2.2", "192.0.2.3", "192.0.2.4"};
    std::uint32_t ttl = 300;
};

// Classic DNS-over-UDP responder: A queries for the zone get the configured
// answer set with the query id echoed; anything else gets NXDOMAIN; malformed
// packets are dropped.
class StubResolver {
public:
    StubResolver(StubZoneConfig cfg, const std::string& listen)
        : cfg_(std::move(cfg)), zone_(DnsName::parse(cfg_.zone)) {
        socket_.bind(SocketAddress::resolve(listen, 0));
        local_address_ = socket_.local_address().to_string();
        rx_ = std::thread([this] { loop(); });
    }

    ~StubResolver() { stop(); }
    StubResolver(const StubResolver&) = delete;
    StubResolver& operator=(const StubResolver&) = delete;

    void stop() {
        stopped_.store(true);
        if (rx_.joinable()) rx_.join();
        socket_.close();
    }

    const std::string& local_address() const { return local_address_; }
    std::uint64_t queries_answered() const { return answered_.load(); }

private:
    void loop() {
        while (!stopped_.load()) {
            auto pkt = socket_.receive(std::chrono::milliseconds(20));
            if (!pkt || stopped_.load()) continue;
            DnsMessage query;
            try {
                query = decode_message(pkt->payload);
            } catch (const CodecError&) {
                continue;
            }
            if (query.header.qr || query.questions.size() != 1) continue;

            const Question& q = query.questions.front();
            DnsMessage response;
            if (q.qtype == RTYPE_A && q.qname == zone_) {
                std::vector<ResourceRecord> answers;
                answers.reserve(cfg_.answers.size());
                for (const auto& ip : cfg_.answers)
                    answers.push_back(make_a_record(q.qname, ip, cfg_.ttl));
                response = make_response(query, std::move(answers));
            } else {
                response = make_response(query, {}, RCODE_NXDOMAIN);
            }
            // Count before sending so a caller who has the reply in hand
            // always observes the increment.
            ++answered_;
            socket_.send_to(encode_message(response), pkt->from); // unframed
        }
    }

    StubZoneConfig cfg_;
    DnsName zone_;
    UdpSocket socket_;
    std::string local_address_;
    std::atomic<std::uint64_t> answered_{0};
    std::atomic<bool> stopped_{false};
    std::thread rx_;
};

inline std::unique_ptr<StubResolver> run_stub_resolver(StubZoneConfig cfg,
                                                       const std::string& listen) {
    return std::make_unique<StubResolver>(std::move(cfg), listen);
}

} // namespace doq
