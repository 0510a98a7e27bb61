// SPDX-License-Identifier: Apache-2.0
//
// doq-proxy: accept DoQ connections in both delivery modes and forward
// every query to a classic DNS-over-UDP upstream (or a built-in stub zone).

#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "doq/proxy.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

// "name=ip1,ip2,ip3,ip4" (exactly four addresses, matching the answer set).
doq::StubZoneConfig parse_stub_zone(const std::string& text) {
    auto eq = text.find('=');
    if (eq == std::string::npos || eq == 0)
        throw CLI::ValidationError("--stub-zone", "expected name=ip1,ip2,ip3,ip4");
    doq::StubZoneConfig zone;
    zone.zone = text.substr(0, eq);
    std::istringstream ips(text.substr(eq + 1));
    std::vector<std::string> parts;
    std::string part;
    while (std::getline(ips, part, ',')) parts.push_back(part);
    if (parts.size() != zone.answers.size())
        throw CLI::ValidationError("--stub-zone", "expected exactly " +
                                                      std::to_string(zone.answers.size()) +
                                                      " addresses");
    std::copy(parts.begin(), parts.end(), zone.answers.begin());
    return zone;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DNS-over-QUIC proxy in front of a classic UDP resolver"};

    doq::ServerConfig cfg;
    std::string stub_zone;
    double upstream_timeout_ms = 2000.0;
    bool enable_datagrams = true;

    app.add_option("--listen", cfg.listen_address, "bind address")->capture_default_str();
    app.add_option("--cert", cfg.certificate_path,
                   "server certificate (PEM); omitted: self-signed at startup");
    app.add_option("--key", cfg.private_key_path, "private key (PEM)");
    app.add_option("--hostname", cfg.certificate_hostname,
                   "name for the self-signed certificate")
        ->capture_default_str();
    app.add_option("--upstream", cfg.upstream_address,
                   "UDP resolver address; omitted: serve the built-in stub zone");
    app.add_option("--upstream-timeout-ms", upstream_timeout_ms)->capture_default_str();
    app.add_option("--upstream-retries", cfg.upstream_retries)->capture_default_str();
    app.add_flag("--enable-datagrams,!--disable-datagrams", enable_datagrams,
                 "advertise datagram support")
        ->capture_default_str();
    app.add_option("--pending-cap", cfg.pending_query_cap,
                   "per-connection in-flight query cap")
        ->capture_default_str();
    app.add_option("--padding-block", cfg.padding_block_response,
                   "pad responses to a multiple of this")
        ->capture_default_str();
    app.add_option("--stub-zone", stub_zone, "built-in zone as name=ip1,ip2,ip3,ip4");

    CLI11_PARSE(app, argc, argv);

    cfg.datagram_support = enable_datagrams;
    cfg.upstream_timeout = std::chrono::duration_cast<doq::ClockDuration>(
        std::chrono::duration<double, std::milli>(upstream_timeout_ms));
    if (!stub_zone.empty()) {
        try {
            cfg.stub_zone = parse_stub_zone(stub_zone);
        } catch (const CLI::Error& e) {
            return app.exit(e);
        }
    }

    try {
        doq::SystemClock clock;
        doq::DoqProxy proxy(clock, std::move(cfg));
        std::cout << "listening on " << proxy.local_address() << std::endl;

        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));

        proxy.stop();
        doq::ServeStats totals = proxy.totals();
        std::cout << "served " << totals.stream_queries << " stream and "
                  << totals.datagram_queries << " datagram queries over "
                  << proxy.connections_accepted() << " connections" << std::endl;
        return 0;
    } catch (const doq::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
