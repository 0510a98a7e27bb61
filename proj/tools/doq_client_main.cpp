// SPDX-License-Identifier: Apache-2.0
//
// doq-client: issue DNS queries to a DoQ server over one connection and
// report per-query outcomes. Exits 0 only when every query was answered.

#include <chrono>
#include <iostream>
#include <string>

#include "CLI11.hpp"

#include "doq/client.hpp"

namespace {

std::uint16_t parse_record_type(const std::string& text) {
    if (text == "A" || text == "a") return doq::RTYPE_A;
    if (text == "AAAA" || text == "aaaa") return doq::RTYPE_AAAA;
    try {
        int v = std::stoi(text);
        if (v < 0 || v > 0xffff) throw std::out_of_range("rtype");
        return static_cast<std::uint16_t>(v);
    } catch (const std::exception&) {
        throw CLI::ValidationError("--type", "expected A, AAAA, or a numeric code");
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DNS-over-QUIC lookup client"};

    doq::ClientConfig cfg;
    std::string type = "A";
    std::string mode = "auto";
    std::string output = "human";
    double spacing_ms = 500.0;
    bool skip_verify = false;

    app.add_option("--server", cfg.server_address, "server host[:port]; port 853 when omitted")
        ->required();
    app.add_option("--domain", cfg.domain, "name to query")->capture_default_str();
    app.add_option("--type", type, "record type: A, AAAA, or a numeric code")
        ->capture_default_str();
    app.add_option("--count", cfg.count, "number of queries")->capture_default_str();
    app.add_option("--spacing-ms", spacing_ms, "delay between query starts")
        ->capture_default_str();
    app.add_option("--mode", mode, "delivery mode preference")
        ->check(CLI::IsMember({"auto", "stream"}))
        ->capture_default_str();
    app.add_option("--padding-block", cfg.padding_block, "pad queries to a multiple of this")
        ->capture_default_str();
    app.add_option("--hostname", cfg.hostname,
                   "expected certificate name (default: the server host)");
    app.add_flag("--insecure-skip-verify", skip_verify,
                 "accept any server certificate");
    app.add_option("--output", output, "report format")
        ->check(CLI::IsMember({"human", "jsonl"}))
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    cfg.record_type = parse_record_type(type);
    cfg.spacing = std::chrono::duration_cast<doq::ClockDuration>(
        std::chrono::duration<double, std::milli>(spacing_ms));
    cfg.mode_preference = mode == "stream" ? doq::ModePreference::ForceStream
                                           : doq::ModePreference::Auto;
    cfg.tls_verification = skip_verify ? doq::TlsVerification::SkipVerify
                                       : doq::TlsVerification::Full;
    cfg.output = output == "jsonl" ? doq::OutputFormat::JsonLines
                                   : doq::OutputFormat::Human;

    try {
        doq::SystemClock clock;
        doq::LookupReport report = doq::run_lookup(clock, cfg);
        doq::render_report(report, cfg.output, std::cout);
        return report.all_responded() ? 0 : 1;
    } catch (const doq::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
