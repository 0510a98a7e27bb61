// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <unistd.h>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "doq/client.hpp"
#include "doq/clock.hpp"
#include "doq/doq_server.hpp"
#include "doq/errors.hpp"
#include "doq/exchange.hpp"
#include "doq/fake_session.hpp"
#include "doq/ledger.hpp"
#include "doq/proxy.hpp"
#include "doq/qlog.hpp"
#include "doq/relay.hpp"
#include "doq/sim.hpp"
#include "doq/stats.hpp"

namespace doq {

enum class Backend { RealStack, FakeSim };

inline const char* to_string(Backend b) {
    return b == Backend::RealStack ? "real_stack" : "fake_sim";
}

struct Impairment {
    double delay_min_ms = 0.0; // one-way, per packet
    double delay_max_ms = 0.0;
    double loss_rate = 0.0;

    bool operator==(const Impairment&) const = default;
};

struct Scenario {
    std::string id; // CSV key; derived from the fields when empty
    DeliveryMode mode = DeliveryMode::Stream;
    int query_count = 50;
    double spacing_ms = 500.0;
    int iterations = 10;
    std::optional<Impairment> impairment;
    Backend backend = Backend::FakeSim;
    std::uint32_t seed = 1;

    void validate() const {
        if (query_count < 1) throw std::invalid_argument("query_count must be >= 1");
        if (iterations < 1) throw std::invalid_argument("iterations must be >= 1");
        if (spacing_ms < 0.0) throw std::invalid_argument("spacing_ms must be >= 0");
        if (impairment) {
            if (impairment->delay_min_ms > impairment->delay_max_ms)
                throw std::invalid_argument("impairment delay min > max");
            if (impairment->loss_rate < 0.0 || impairment->loss_rate > 1.0)
                throw std::invalid_argument("impairment loss rate outside [0,1]");
        }
    }

    std::string effective_id() const {
        if (!id.empty()) return id;
        std::ostringstream out;
        out << to_string(mode) << "_q" << query_count << "_sp"
            << static_cast<long long>(spacing_ms) << "_"
            << (backend == Backend::RealStack ? "real" : "fake");
        if (impairment) out << "_imp";
        return out.str();
    }

    bool operator==(const Scenario&) const = default;
};

struct IterationSample {
    int iteration = 0;
    bool failed = false;
    std::string failure_reason;
    std::uint64_t total_bytes_sent = 0;     // client's transport octets out
    std::uint64_t total_bytes_received = 0; // and in, setup included
    double wall_time_ms = 0.0;
    std::vector<double> latencies_ms; // responded queries, in sequence order
    // Duplicate transmissions of query payloads: datagram re-sends plus
    // reliable-substrate retransmissions on the real stack.
    std::uint64_t retransmission_count = 0;
    std::uint64_t one_time_octets = 0; // connection setup, reported apart
    std::array<std::array<FrameTally, kFrameTypeCount>, 2> frames{};

    const FrameTally& frame(Direction d, FrameType t) const {
        return frames[static_cast<int>(d)][static_cast<int>(t)];
    }
    double latency_mean_ms() const {
        if (latencies_ms.empty()) return 0.0;
        double sum = 0.0;
        for (double v : latencies_ms) sum += v;
        return sum / static_cast<double>(latencies_ms.size());
    }

    bool operator==(const IterationSample&) const = default;
};

struct ExperimentReport {
    Scenario scenario;
    std::vector<IterationSample> samples; // one per iteration, failures marked
    // Box statistics over the successful iterations of each metric.
    BoxStats wall_time_ms;
    BoxStats bytes_sent;
    BoxStats bytes_received;
    BoxStats retransmissions;
    BoxStats latency_mean_ms;

    bool operator==(const ExperimentReport&) const = default;
};

// ------------------------------------------------------------------ json ---

inline void to_json(nlohmann::json& j, const Impairment& v) {
    j = {{"delay_min_ms", v.delay_min_ms},
         {"delay_max_ms", v.delay_max_ms},
         {"loss_rate", v.loss_rate}};
}
inline void from_json(const nlohmann::json& j, Impairment& v) {
    v.delay_min_ms = j.value("delay_min_ms", 0.0);
    v.delay_max_ms = j.value("delay_max_ms", 0.0);
    v.loss_rate = j.value("loss_rate", 0.0);
}

inline void to_json(nlohmann::json& j, const Scenario& v) {
    j = {{"id", v.id},
         {"mode", to_string(v.mode)},
         {"query_count", v.query_count},
         {"spacing_ms", v.spacing_ms},
         {"iterations", v.iterations},
         {"backend", to_string(v.backend)},
         {"seed", v.seed}};
    if (v.impairment) j["impairment"] = *v.impairment;
}
inline void from_json(const nlohmann::json& j, Scenario& v) {
    v.id = j.value("id", std::string{});
    std::string mode = j.value("mode", std::string{"stream"});
    if (mode == "stream")
        v.mode = DeliveryMode::Stream;
    else if (mode == "datagram")
        v.mode = DeliveryMode::Datagram;
    else
        throw std::invalid_argument("unknown mode: " + mode);
    v.query_count = j.value("query_count", 50);
    v.spacing_ms = j.value("spacing_ms", 500.0);
    v.iterations = j.value("iterations", 10);
    std::string backend = j.value("backend", std::string{"fake_sim"});
    if (backend == "fake_sim")
        v.backend = Backend::FakeSim;
    else if (backend == "real_stack")
        v.backend = Backend::RealStack;
    else
        throw std::invalid_argument("unknown backend: " + backend);
    v.seed = j.value("seed", 1u);
    if (j.contains("impairment") && !j["impairment"].is_null())
        v.impairment = j["impairment"].get<Impairment>();
    else
        v.impairment.reset();
}

inline void to_json(nlohmann::json& j, const FrameTally& v) {
    j = {{"count", v.count}, {"octets", v.octets}};
}
inline void from_json(const nlohmann::json& j, FrameTally& v) {
    v.count = j.value("count", std::uint64_t{0});
    v.octets = j.value("octets", std::uint64_t{0});
}

namespace detail {

inline nlohmann::json frames_to_json(
    const std::array<std::array<FrameTally, kFrameTypeCount>, 2>& frames) {
    nlohmann::json out;
    for (int d = 0; d < 2; ++d) {
        nlohmann::json dir = nlohmann::json::object();
        for (int f = 0; f < kFrameTypeCount; ++f) {
            const FrameTally& t = frames[d][f];
            if (t.count == 0 && t.octets == 0) continue;
            dir[to_string(static_cast<FrameType>(f))] = t;
        }
        out[to_string(static_cast<Direction>(d))] = std::move(dir);
    }
    return out;
}

inline void frames_from_json(const nlohmann::json& j,
                             std::array<std::array<FrameTally, kFrameTypeCount>, 2>& frames) {
    frames = {};
    for (int d = 0; d < 2; ++d) {
        const char* dir = to_string(static_cast<Direction>(d));
        if (!j.contains(dir)) continue;
        for (int f = 0; f < kFrameTypeCount; ++f) {
            const char* name = to_string(static_cast<FrameType>(f));
            if (j[dir].contains(name)) frames[d][f] = j[dir][name].get<FrameTally>();
        }
    }
}

} // namespace detail

inline void to_json(nlohmann::json& j, const IterationSample& v) {
    j = {{"iteration", v.iteration},
         {"failed", v.failed},
         {"total_bytes_sent", v.total_bytes_sent},
         {"total_bytes_received", v.total_bytes_received},
         {"wall_time_ms", v.wall_time_ms},
         {"latencies_ms", v.latencies_ms},
         {"retransmission_count", v.retransmission_count},
         {"one_time_octets", v.one_time_octets},
         {"frames", detail::frames_to_json(v.frames)}};
    if (!v.failure_reason.empty()) j["failure_reason"] = v.failure_reason;
}
inline void from_json(const nlohmann::json& j, IterationSample& v) {
    v.iteration = j.value("iteration", 0);
    v.failed = j.value("failed", false);
    v.failure_reason = j.value("failure_reason", std::string{});
    v.total_bytes_sent = j.value("total_bytes_sent", std::uint64_t{0});
    v.total_bytes_received = j.value("total_bytes_received", std::uint64_t{0});
    v.wall_time_ms = j.value("wall_time_ms", 0.0);
    v.latencies_ms = j.value("latencies_ms", std::vector<double>{});
    v.retransmission_count = j.value("retransmission_count", std::uint64_t{0});
    v.one_time_octets = j.value("one_time_octets", std::uint64_t{0});
    if (j.contains("frames")) detail::frames_from_json(j["frames"], v.frames);
}

inline void to_json(nlohmann::json& j, const BoxStats& v) {
    j = {{"minimum", v.minimum},
         {"q1", v.q1},
         {"median", v.median},
         {"q3", v.q3},
         {"maximum", v.maximum},
         {"mean", v.mean},
         {"whisker_low", v.whisker_low},
         {"whisker_high", v.whisker_high},
         {"outliers", v.outliers}};
}
inline void from_json(const nlohmann::json& j, BoxStats& v) {
    v.minimum = j.value("minimum", 0.0);
    v.q1 = j.value("q1", 0.0);
    v.median = j.value("median", 0.0);
    v.q3 = j.value("q3", 0.0);
    v.maximum = j.value("maximum", 0.0);
    v.mean = j.value("mean", 0.0);
    v.whisker_low = j.value("whisker_low", 0.0);
    v.whisker_high = j.value("whisker_high", 0.0);
    v.outliers = j.value("outliers", std::vector<double>{});
}

inline void to_json(nlohmann::json& j, const ExperimentReport& v) {
    j = {{"scenario", v.scenario},
         {"samples", v.samples},
         {"stats",
          {{"wall_time_ms", v.wall_time_ms},
           {"bytes_sent", v.bytes_sent},
           {"bytes_received", v.bytes_received},
           {"retransmissions", v.retransmissions},
           {"latency_mean_ms", v.latency_mean_ms}}}};
}
inline void from_json(const nlohmann::json& j, ExperimentReport& v) {
    v.scenario = j.at("scenario").get<Scenario>();
    v.samples = j.value("samples", std::vector<IterationSample>{});
    if (j.contains("stats")) {
        const auto& s = j["stats"];
        v.wall_time_ms = s.value("wall_time_ms", BoxStats{});
        v.bytes_sent = s.value("bytes_sent", BoxStats{});
        v.bytes_received = s.value("bytes_received", BoxStats{});
        v.retransmissions = s.value("retransmissions", BoxStats{});
        v.latency_mean_ms = s.value("latency_mean_ms", BoxStats{});
    }
}

// ----------------------------------------------------------------- runner ---

namespace detail {

inline ClockDuration duration_from_ms(double ms) {
    return std::chrono::duration_cast<ClockDuration>(
        std::chrono::duration<double, std::milli>(ms));
}

// The canonical served answer set, shape-aligned with the stub resolver.
inline DnsMessage canned_answers(const DnsMessage& query) {
    StubZoneConfig zone;
    std::vector<ResourceRecord> answers;
    answers.reserve(zone.answers.size());
    for (const auto& ip : zone.answers)
        answers.push_back(make_a_record(query.questions[0].qname, ip, zone.ttl));
    return make_response(query, std::move(answers));
}

inline void fill_from_lookup(IterationSample& sample, const LookupReport& rep) {
    sample.wall_time_ms = rep.summary.wall_time_ms;
    for (const QueryResult& r : rep.results) {
        if (r.latency_ms) sample.latencies_ms.push_back(*r.latency_ms);
        if (r.attempts > 1) sample.retransmission_count += r.attempts - 1;
    }
    if (!rep.all_responded()) {
        sample.failed = true;
        for (const QueryResult& r : rep.results) {
            if (r.outcome != ExchangeOutcome::Responded) {
                sample.failure_reason = "query " + std::to_string(r.sequence_number) +
                                        ": " + to_string(r.outcome) +
                                        (r.failure_reason.empty() ? ""
                                                                  : " (" + r.failure_reason + ")");
                break;
            }
        }
    }
}

inline ClientConfig lookup_config_for(const Scenario& sc) {
    ClientConfig cfg;
    cfg.count = sc.query_count;
    cfg.spacing = duration_from_ms(sc.spacing_ms);
    cfg.mode_preference = sc.mode == DeliveryMode::Stream ? ModePreference::ForceStream
                                                          : ModePreference::Auto;
    return cfg;
}

inline IterationSample run_fake_iteration(const Scenario& sc, int iteration) {
    IterationSample sample;
    sample.iteration = iteration;

    VirtualClock clock;
    ActorGuard driver(clock);

    FakeNetworkConfig net;
    net.seed = sc.seed + 1000003u * static_cast<std::uint32_t>(iteration);
    if (sc.impairment) {
        net.datagram_loss_rate = sc.impairment->loss_rate;
        net.delay_min = duration_from_ms(sc.impairment->delay_min_ms);
        net.delay_max = duration_from_ms(sc.impairment->delay_max_ms);
    }
    FakePair pair = make_fake_pair(clock, net);

    clock.pin(); // released by on_ready once the serve loops are registered
    ServeOptions opts;
    opts.on_ready = [&clock] { clock.unpin(); };
    std::thread server([session = pair.server, opts] {
        try {
            serve_session(session, canned_answers, opts);
        } catch (const Error&) {
            // session abort during teardown is not an iteration failure
        }
    });

    LookupReport rep;
    try {
        rep = run_lookup_on(pair.client, lookup_config_for(sc));
    } catch (...) {
        try {
            pair.client->close(code(DoqErrorCode::InternalError));
        } catch (const Error&) {
        }
        server.join();
        throw;
    }
    pair.client->close(code(DoqErrorCode::NoError));
    server.join();

    sample.total_bytes_sent = pair.client->bytes_sent();
    sample.total_bytes_received = pair.client->bytes_received();
    for (int d = 0; d < 2; ++d)
        for (int f = 0; f < kFrameTypeCount; ++f)
            sample.frames[d][f] = pair.client->frame_ledger().get(
                static_cast<Direction>(d), static_cast<FrameType>(f));
    fill_from_lookup(sample, rep);
    return sample;
}

struct RealRig {
    explicit RealRig(const Scenario& sc) {
        ServerConfig server_cfg;
        server_cfg.listen_address = "127.0.0.1:0";
        proxy.emplace(clock, std::move(server_cfg));
        dial = proxy->local_address();
        if (sc.impairment) {
            RelayConfig relay_cfg;
            relay_cfg.target_address = dial;
            relay_cfg.delay_min = duration_from_ms(sc.impairment->delay_min_ms);
            relay_cfg.delay_max = duration_from_ms(sc.impairment->delay_max_ms);
            relay_cfg.loss_rate = sc.impairment->loss_rate;
            relay_cfg.seed = sc.seed;
            relay.emplace(clock, std::move(relay_cfg));
            dial = relay->local_address();
        }
    }
    ~RealRig() {
        if (relay) relay->stop();
        if (proxy) proxy->stop();
    }

    SystemClock clock;
    std::optional<DoqProxy> proxy;
    std::optional<ImpairmentRelay> relay;
    std::string dial;
};

inline std::string fresh_qlog_path(const Scenario& sc, int iteration) {
    static std::atomic<std::uint64_t> counter{0};
    auto dir = std::filesystem::temp_directory_path();
    std::ostringstream name;
    name << "doq_bench_" << sc.effective_id() << "_i" << iteration << "_"
         << counter.fetch_add(1) << "_" << ::getpid() << ".qlog";
    return (dir / name.str()).string();
}

inline IterationSample run_real_iteration(RealRig& rig, const Scenario& sc, int iteration) {
    IterationSample sample;
    sample.iteration = iteration;

    std::string qlog_path = fresh_qlog_path(sc, iteration);
    UdpSessionConfig session_cfg;
    session_cfg.insecure_skip_verify = true;
    session_cfg.qlog_path = qlog_path;

    SessionPtr session = udp_connect(rig.clock, rig.dial, session_cfg);
    sample.one_time_octets = session->bytes_sent() + session->bytes_received();

    LookupReport rep = run_lookup_on(session, lookup_config_for(sc));

    sample.total_bytes_sent = session->bytes_sent();
    sample.total_bytes_received = session->bytes_received();
    if (auto udp = std::dynamic_pointer_cast<UdpSession>(session))
        sample.retransmission_count += udp->retransmits();
    session->close(code(DoqErrorCode::NoError));
    session.reset(); // flushes the trace

    QlogSummary trace = parse_qlog_file(qlog_path);
    sample.frames[static_cast<int>(Direction::ClientToServer)] = trace.sent.frames;
    sample.frames[static_cast<int>(Direction::ServerToClient)] = trace.received.frames;
    std::error_code ignored;
    std::filesystem::remove(qlog_path, ignored);

    fill_from_lookup(sample, rep);
    return sample;
}

inline BoxStats summarize_or_empty(const std::vector<double>& values) {
    return values.empty() ? BoxStats{} : summarize(values);
}

} // namespace detail

// Runs every iteration on a fresh connection, sequentially. If any iteration
// fails, the remaining ones still run; the partial report (failures marked)
// is written to `partial_out` when given, and ScenarioFailed is thrown.
inline ExperimentReport run_experiment(const Scenario& scenario,
                                       ExperimentReport* partial_out = nullptr) {
    scenario.validate();
    ExperimentReport report;
    report.scenario = scenario;

    std::optional<detail::RealRig> rig;
    if (scenario.backend == Backend::RealStack) rig.emplace(scenario);

    for (int i = 0; i < scenario.iterations; ++i) {
        IterationSample sample;
        try {
            sample = scenario.backend == Backend::FakeSim
                         ? detail::run_fake_iteration(scenario, i)
                         : detail::run_real_iteration(*rig, scenario, i);
        } catch (const Error& e) {
            sample = {};
            sample.iteration = i;
            sample.failed = true;
            sample.failure_reason = e.what();
        }
        report.samples.push_back(std::move(sample));
    }

    std::vector<double> wall, sent, received, retrans, latency;
    for (const IterationSample& s : report.samples) {
        if (s.failed) continue;
        wall.push_back(s.wall_time_ms);
        sent.push_back(static_cast<double>(s.total_bytes_sent));
        received.push_back(static_cast<double>(s.total_bytes_received));
        retrans.push_back(static_cast<double>(s.retransmission_count));
        latency.push_back(s.latency_mean_ms());
    }
    report.wall_time_ms = detail::summarize_or_empty(wall);
    report.bytes_sent = detail::summarize_or_empty(sent);
    report.bytes_received = detail::summarize_or_empty(received);
    report.retransmissions = detail::summarize_or_empty(retrans);
    report.latency_mean_ms = detail::summarize_or_empty(latency);

    for (const IterationSample& s : report.samples) {
        if (!s.failed) continue;
        if (partial_out) *partial_out = report;
        throw ScenarioFailed("iteration " + std::to_string(s.iteration) +
                             " failed: " + s.failure_reason);
    }
    return report;
}

// ----------------------------------------------------------------- output ---

enum class ReportFormat { Csv, Json };

// Writes the report under `directory`: one JSON mirror of the full structure,
// or one CSV per figure analog (time, bytes, retransmissions) with columns
// scenario,iteration,metric,value. Returns the paths written.
inline std::vector<std::string> emit_report(const ExperimentReport& report,
                                            ReportFormat format,
                                            const std::string& directory) {
    namespace fs = std::filesystem;
    fs::path dir(directory);
    std::error_code ec;
    fs::create_directories(dir, ec);
    std::string id = report.scenario.effective_id();
    std::vector<std::string> written;

    auto open_out = [&](const fs::path& p) {
        std::ofstream out(p, std::ios::trunc);
        if (!out) throw IoFailure("cannot write report file: " + p.string());
        return out;
    };

    if (format == ReportFormat::Json) {
        fs::path path = dir / (id + ".json");
        auto out = open_out(path);
        out << nlohmann::json(report).dump(2) << '\n';
        if (!out) throw IoFailure("short write: " + path.string());
        written.push_back(path.string());
        return written;
    }

    struct Figure {
        const char* suffix;
        std::vector<std::pair<const char*, std::function<double(const IterationSample&)>>>
            metrics;
    };
    const Figure figures[] = {
        {"_time.csv",
         {{"wall_time_ms", [](const IterationSample& s) { return s.wall_time_ms; }},
          {"latency_mean_ms",
           [](const IterationSample& s) { return s.latency_mean_ms(); }}}},
        {"_bytes.csv",
         {{"bytes_sent",
           [](const IterationSample& s) { return static_cast<double>(s.total_bytes_sent); }},
          {"bytes_received",
           [](const IterationSample& s) {
               return static_cast<double>(s.total_bytes_received);
           }},
          {"one_time_octets",
           [](const IterationSample& s) { return static_cast<double>(s.one_time_octets); }}}},
        {"_retransmissions.csv",
         {{"retransmissions", [](const IterationSample& s) {
               return static_cast<double>(s.retransmission_count);
           }}}},
    };

    for (const Figure& fig : figures) {
        fs::path path = dir / (id + fig.suffix);
        auto out = open_out(path);
        out << "scenario,iteration,metric,value\n";
        for (const auto& [metric, getter] : fig.metrics) {
            for (const IterationSample& s : report.samples) {
                if (s.failed) continue; // failures live in the JSON mirror
                out << id << ',' << s.iteration << ',' << metric << ','
                    << getter(s) << '\n';
            }
        }
        if (!out) throw IoFailure("short write: " + path.string());
        written.push_back(path.string());
    }
    return written;
}

inline Scenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoFailure("cannot open scenario file: " + path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw IoFailure("scenario file is not valid JSON: " + path);
    Scenario sc = j.get<Scenario>();
    sc.validate();
    return sc;
}

} // namespace doq
