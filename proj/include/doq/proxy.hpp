// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <utility>

#include "doq/clock.hpp"
#include "doq/dns.hpp"
#include "doq/doq_server.hpp"
#include "doq/errors.hpp"
#include "doq/session.hpp"
#include "doq/stub_resolver.hpp"
#include "doq/tls.hpp"
#include "doq/udp_session.hpp"
#include "doq/upstream.hpp"

namespace doq {

struct ServerConfig {
    std::string listen_address = "127.0.0.1:853";
    // Both empty: a fresh self-signed identity is generated at startup.
    std::string certificate_path;
    std::string private_key_path;
    std::string certificate_hostname = "localhost";
    // Empty: an internal stub resolver is started and used as the upstream,
    // so every query still travels the classic-UDP forwarding path.
    std::string upstream_address;
    ClockDuration upstream_timeout = std::chrono::seconds(2);
    int upstream_retries = 2;
    bool datagram_support = true; // drives the advertisement
    std::uint64_t pending_query_cap = 1000;
    std::size_t padding_block_response = 468;
    StubZoneConfig stub_zone{};
};

// Accepts connections in both delivery modes and fulfills every query by
// forwarding it upstream over classic DNS-over-UDP. Each connection is served
// on its own thread; upstream failures surface as SERVFAIL answers.
class DoqProxy {
public:
    DoqProxy(Clock& clock, ServerConfig cfg) : clock_(clock), cfg_(std::move(cfg)) {
        if (cfg_.upstream_address.empty()) {
            stub_ = run_stub_resolver(cfg_.stub_zone, "127.0.0.1:0");
            cfg_.upstream_address = stub_->local_address();
        }
        forwarder_ = std::make_unique<UpstreamForwarder>(
            clock_,
            UpstreamConfig{cfg_.upstream_address, cfg_.upstream_timeout, cfg_.upstream_retries});

        ServerIdentity identity =
            cfg_.certificate_path.empty()
                ? ServerIdentity::self_signed(cfg_.certificate_hostname)
                : ServerIdentity::from_files(cfg_.certificate_path, cfg_.private_key_path);
        UdpSessionConfig session_cfg;
        session_cfg.local_max_datagram_frame_size =
            cfg_.datagram_support ? kRecommendedDatagramFrameSize : 0;
        listener_ = std::make_shared<UdpListener>(clock_, cfg_.listen_address,
                                                  std::move(identity), session_cfg);
        acceptor_ = std::thread([this] { accept_loop(); });
    }

    ~DoqProxy() { stop(); }
    DoqProxy(const DoqProxy&) = delete;
    DoqProxy& operator=(const DoqProxy&) = delete;

    void stop() {
        if (stopped_.exchange(true)) return;
        listener_->close();  // aborts live sessions; accept() starts throwing
        forwarder_->stop();  // unblocks handlers waiting on the upstream
        if (acceptor_.joinable()) acceptor_.join();
        serving_.wait();
        if (stub_) stub_->stop();
    }

    std::string local_address() const { return listener_->local_address(); }
    const std::string& upstream_address() const { return cfg_.upstream_address; }
    std::uint64_t connections_accepted() const { return connections_.load(); }
    std::uint64_t upstream_forwards() const { return forwarder_->forwards_resolved(); }

    ServeStats totals() const {
        std::lock_guard<std::mutex> lk(mu_);
        return totals_;
    }

private:
    void accept_loop() {
        for (;;) {
            SessionPtr session;
            try {
                session = listener_->accept(clock_.now() + std::chrono::seconds(1));
            } catch (const TimeoutError&) {
                continue;
            } catch (const ConnectionClosed&) {
                return;
            }
            ++connections_;
            serving_.add();
            std::thread([this, session = std::move(session)]() mutable {
                serve_one(std::move(session));
                serving_.done();
            }).detach();
        }
    }

    void serve_one(SessionPtr session) {
        ServeOptions opts;
        opts.pending_cap = cfg_.pending_query_cap;
        opts.response_padding_block = cfg_.padding_block_response;
        try {
            ServeStats stats = serve_session(
                std::move(session),
                [this](const DnsMessage& query) { return forwarder_->forward(query); }, opts);
            std::lock_guard<std::mutex> lk(mu_);
            totals_.stream_queries += stats.stream_queries;
            totals_.datagram_queries += stats.datagram_queries;
            totals_.malformed_datagrams += stats.malformed_datagrams;
            totals_.truncated_responses += stats.truncated_responses;
            totals_.load_shed += stats.load_shed;
        } catch (const Error&) {
            // Per-connection trouble stays on that connection.
        }
    }

    Clock& clock_;
    ServerConfig cfg_;
    std::unique_ptr<StubResolver> stub_;
    std::unique_ptr<UpstreamForwarder> forwarder_;
    std::shared_ptr<UdpListener> listener_;
    std::thread acceptor_;
    detail::WaitGroup serving_;
    mutable std::mutex mu_;
    ServeStats totals_;
    std::atomic<std::uint64_t> connections_{0};
    std::atomic<bool> stopped_{false};
};

} // namespace doq
