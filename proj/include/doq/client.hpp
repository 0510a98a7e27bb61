// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "doq/clock.hpp"
#include "doq/dns.hpp"
#include "doq/doq_client.hpp"
#include "doq/exchange.hpp"
#include "doq/session.hpp"
#include "doq/udp_session.hpp"

namespace doq {

enum class TlsVerification { Full, SkipVerify };
enum class OutputFormat { Human, JsonLines };

struct ClientConfig {
    std::string server_address; // "host" or "host:port"; port 853 when omitted
    std::string domain = "example.org";
    std::uint16_t record_type = RTYPE_A;
    int count = 50;
    ClockDuration spacing = std::chrono::milliseconds(500);
    ModePreference mode_preference = ModePreference::Auto;
    std::size_t padding_block = 468;
    TlsVerification tls_verification = TlsVerification::Full;
    OutputFormat output = OutputFormat::Human;
    // Expected certificate name; empty means the server address host part.
    std::string hostname;

    void validate() const {
        if (count < 1) throw std::invalid_argument("count must be >= 1");
        if (spacing < ClockDuration::zero())
            throw std::invalid_argument("spacing must be >= 0");
    }
};

struct QueryResult {
    std::uint64_t sequence_number = 0;
    std::uint16_t txid = 0;
    DeliveryMode mode = DeliveryMode::Stream;
    std::optional<double> latency_ms; // present iff outcome == Responded
    std::uint32_t attempts = 0;
    std::size_t answer_count = 0;
    ExchangeOutcome outcome = ExchangeOutcome::Pending;
    bool tc_fallback = false;
    std::string failure_reason;
};

struct LookupSummary {
    std::uint64_t success_count = 0;
    double wall_time_ms = 0.0;
    double mean_latency_ms = 0.0;   // over responded queries
    double median_latency_ms = 0.0; // over responded queries
};

struct LookupReport {
    DeliveryMode mode = DeliveryMode::Stream;
    std::vector<QueryResult> results; // in sequence order
    LookupSummary summary;

    bool all_responded() const {
        return summary.success_count == results.size() && !results.empty();
    }
};

namespace detail {

inline double to_ms(ClockDuration d) {
    return std::chrono::duration<double, std::milli>(d).count();
}

} // namespace detail

// Issues `count` queries for one domain over the given established session,
// paced by `spacing`. Sends follow the schedule regardless of how slowly
// earlier responses arrive; results come back in sequence order.
inline LookupReport run_lookup_on(SessionPtr session, const ClientConfig& cfg) {
    cfg.validate();
    Clock& clock = session->clock();
    DoqClient::Options opts;
    opts.preference = cfg.mode_preference;
    DoqClient client(std::move(session), opts);

    LookupReport report;
    report.mode = client.mode();

    ClockTime start = clock.now();
    std::vector<DoqClient::Handle> handles;
    handles.reserve(static_cast<std::size_t>(cfg.count));
    for (int i = 0; i < cfg.count; ++i) {
        if (i > 0) clock.sleep_until(start + i * cfg.spacing);
        DnsMessage query = make_query(cfg.domain, cfg.record_type, 0, true);
        if (cfg.padding_block > 1) query = apply_padding(query, cfg.padding_block);
        handles.push_back(client.begin(std::move(query)));
    }

    report.results.reserve(handles.size());
    std::vector<double> latencies;
    for (std::size_t i = 0; i < handles.size(); ++i) {
        ExchangeRecord rec = client.await(handles[i]);
        QueryResult r;
        r.sequence_number = i;
        r.txid = rec.txid;
        r.mode = rec.mode;
        r.attempts = rec.attempts;
        r.outcome = rec.outcome;
        r.tc_fallback = rec.tc_fallback;
        r.failure_reason = rec.failure_reason;
        if (rec.outcome == ExchangeOutcome::Responded) {
            r.answer_count = rec.response ? rec.response->answers.size() : 0;
            r.latency_ms = detail::to_ms(rec.completed_at - rec.send_timestamps.front());
            latencies.push_back(*r.latency_ms);
            ++report.summary.success_count;
        }
        report.results.push_back(std::move(r));
    }
    report.summary.wall_time_ms = detail::to_ms(clock.now() - start);

    if (!latencies.empty()) {
        double sum = 0.0;
        for (double v : latencies) sum += v;
        report.summary.mean_latency_ms = sum / static_cast<double>(latencies.size());
        std::sort(latencies.begin(), latencies.end());
        std::size_t n = latencies.size();
        report.summary.median_latency_ms =
            n % 2 == 1 ? latencies[n / 2] : (latencies[n / 2 - 1] + latencies[n / 2]) / 2.0;
    }
    return report;
}

// Dials the server, runs the workload over one connection, closes it.
inline LookupReport run_lookup(Clock& clock, const ClientConfig& cfg) {
    cfg.validate();
    UdpSessionConfig session_cfg;
    session_cfg.insecure_skip_verify = cfg.tls_verification == TlsVerification::SkipVerify;
    session_cfg.hostname = cfg.hostname;
    SessionPtr session = udp_connect(clock, cfg.server_address, session_cfg);
    LookupReport report = run_lookup_on(session, cfg);
    session->close(0x0); // NoError
    return report;
}

inline void render_report(const LookupReport& report, OutputFormat format, std::ostream& out) {
    if (format == OutputFormat::JsonLines) {
        for (const auto& r : report.results) {
            nlohmann::json j{{"sequence", r.sequence_number},
                             {"txid", r.txid},
                             {"mode", to_string(r.mode)},
                             {"attempts", r.attempts},
                             {"answer_count", r.answer_count},
                             {"outcome", to_string(r.outcome)},
                             {"tc_fallback", r.tc_fallback}};
            if (r.latency_ms) j["latency_ms"] = *r.latency_ms;
            if (!r.failure_reason.empty()) j["failure_reason"] = r.failure_reason;
            out << j.dump() << '\n';
        }
        nlohmann::json summary{{"summary", true},
                               {"mode", to_string(report.mode)},
                               {"success_count", report.summary.success_count},
                               {"total", report.results.size()},
                               {"wall_time_ms", report.summary.wall_time_ms},
                               {"mean_latency_ms", report.summary.mean_latency_ms},
                               {"median_latency_ms", report.summary.median_latency_ms}};
        out << summary.dump() << '\n';
        return;
    }

    for (const auto& r : report.results) {
        out << "#" << r.sequence_number << " txid=" << r.txid << " mode=" << to_string(r.mode)
            << " outcome=" << to_string(r.outcome) << " attempts=" << r.attempts;
        if (r.latency_ms)
            out << " answers=" << r.answer_count << " latency_ms=" << *r.latency_ms;
        if (r.tc_fallback) out << " tc_fallback";
        if (!r.failure_reason.empty()) out << " (" << r.failure_reason << ")";
        out << '\n';
    }
    out << report.summary.success_count << "/" << report.results.size() << " responded over "
        << to_string(report.mode) << ", wall " << report.summary.wall_time_ms
        << " ms, mean latency " << report.summary.mean_latency_ms << " ms, median "
        << report.summary.median_latency_ms << " ms\n";
}

} // namespace doq
