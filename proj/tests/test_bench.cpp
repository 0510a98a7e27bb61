// SPDX-License-Identifier: Apache-2.0
//
// Benchmark toolkit: box statistics, qlog trace accounting, closed-form
// signaling simulation, the UDP impairment relay, and the scenario runner.

#include <gtest/gtest.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "doq/bench.hpp"

using namespace doq;
using namespace std::chrono_literals;

namespace {

namespace fs = std::filesystem;

fs::path fresh_dir(const std::string& tag) {
    static std::atomic<int> n{0};
    fs::path dir = fs::temp_directory_path() /
                   ("doq_test_" + tag + "_" + std::to_string(::getpid()) + "_" +
                    std::to_string(n.fetch_add(1)));
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void expect_box(const BoxStats& got, double minimum, double q1, double median, double q3,
                double maximum, double mean, double whisker_low, double whisker_high,
                const std::vector<double>& outliers) {
    EXPECT_DOUBLE_EQ(got.minimum, minimum);
    EXPECT_DOUBLE_EQ(got.q1, q1);
    EXPECT_DOUBLE_EQ(got.median, median);
    EXPECT_DOUBLE_EQ(got.q3, q3);
    EXPECT_DOUBLE_EQ(got.maximum, maximum);
    EXPECT_DOUBLE_EQ(got.mean, mean);
    EXPECT_DOUBLE_EQ(got.whisker_low, whisker_low);
    EXPECT_DOUBLE_EQ(got.whisker_high, whisker_high);
    ASSERT_EQ(got.outliers.size(), outliers.size());
    for (std::size_t i = 0; i < outliers.size(); ++i)
        EXPECT_DOUBLE_EQ(got.outliers[i], outliers[i]);
}

} // namespace

// ---------------------------------------------------------------- BoxStats --

TEST(BoxStatsSuite, FiveEvenlySpacedSamples) {
    expect_box(summarize({1, 2, 3, 4, 5}), 1, 2, 3, 4, 5, 3, 1, 5, {});
}

TEST(BoxStatsSuite, FourSamplesInterpolateQuartiles) {
    expect_box(summarize({1, 2, 3, 4}), 1, 1.75, 2.5, 3.25, 4, 2.5, 1, 4, {});
}

TEST(BoxStatsSuite, SingleSampleCollapsesEverything) {
    expect_box(summarize({7}), 7, 7, 7, 7, 7, 7, 7, 7, {});
}

TEST(BoxStatsSuite, TwoSamplesInterpolateBetweenThem) {
    expect_box(summarize({10, 20}), 10, 12.5, 15, 17.5, 20, 15, 10, 20, {});
}

TEST(BoxStatsSuite, FlatBodyFlagsTheSpikeAsOutlier) {
    expect_box(summarize({1, 1, 1, 1, 100}), 1, 1, 1, 1, 100, 20.8, 1, 1, {100});
}

TEST(BoxStatsSuite, TenMixedSamples) {
    expect_box(summarize({12, 3, 45, 7, 9, 22, 5, 18, 30, 2}), 2, 5.5, 10.5, 21, 45, 15.3,
               2, 30, {45});
}

TEST(BoxStatsSuite, OutliersOnBothTails) {
    expect_box(summarize({-50, 1, 2, 3, 4, 5, 60}), -50, 1.5, 3, 4.5, 60,
               3.5714285714285716, 1, 5, {-50, 60});
}

TEST(BoxStatsSuite, EmptyInputThrows) {
    EXPECT_THROW(summarize({}), EmptySamples);
}

TEST(BoxStatsSuite, InvariantsHoldOnRandomSamples) {
    std::mt19937 rng(7);
    std::uniform_real_distribution<double> value(-100.0, 100.0);
    std::uniform_int_distribution<int> size(1, 40);

    for (int rep = 0; rep < 200; ++rep) {
        std::vector<double> samples(static_cast<std::size_t>(size(rng)));
        for (double& v : samples) v = value(rng);

        BoxStats s = summarize(samples);
        std::sort(samples.begin(), samples.end());

        EXPECT_DOUBLE_EQ(s.minimum, samples.front());
        EXPECT_DOUBLE_EQ(s.maximum, samples.back());
        EXPECT_LE(s.minimum, s.q1);
        EXPECT_LE(s.q1, s.median);
        EXPECT_LE(s.median, s.q3);
        EXPECT_LE(s.q3, s.maximum);
        EXPECT_GE(s.mean, s.minimum);
        EXPECT_LE(s.mean, s.maximum);

        double lo_fence = s.q1 - 1.5 * (s.q3 - s.q1);
        double hi_fence = s.q3 + 1.5 * (s.q3 - s.q1);
        EXPECT_LE(s.whisker_low, s.whisker_high);
        EXPECT_GE(s.whisker_low, lo_fence);
        EXPECT_LE(s.whisker_high, hi_fence);

        EXPECT_TRUE(std::is_sorted(s.outliers.begin(), s.outliers.end()));
        for (double v : s.outliers) EXPECT_TRUE(v < lo_fence || v > hi_fence);
        std::size_t outside = 0;
        for (double v : samples)
            if (v < s.whisker_low || v > s.whisker_high) ++outside;
        EXPECT_EQ(outside, s.outliers.size());
    }
}

// --------------------------------------------------------------- QlogParse --

namespace {

std::string event_line(const char* name, std::uint64_t packet_size,
                       const std::vector<std::pair<std::string, std::optional<int>>>& frames) {
    nlohmann::json e{{"time", 0.0},
                     {"name", name},
                     {"data", {{"header", {{"packet_size", packet_size}}}}}};
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [type, length] : frames) {
        nlohmann::json f{{"frame_type", type}};
        if (length) f["length"] = *length;
        arr.push_back(std::move(f));
    }
    e["data"]["frames"] = std::move(arr);
    return e.dump();
}

} // namespace

TEST(QlogParse, CountsSyntheticMaxStreamsFrames) {
    std::string text = event_line("transport:packet_received", 66, {{"max_streams", {}}}) +
                       "\n" +
                       event_line("transport:packet_received", 66, {{"max_streams", {}}}) +
                       "\n" +
                       event_line("transport:packet_received", 66, {{"max_streams", {}}}) +
                       "\n";
    QlogSummary sum = parse_qlog_frames(text);
    EXPECT_EQ(sum.received.packets, 3u);
    EXPECT_EQ(sum.received.octets, 198u);
    EXPECT_EQ(sum.received.frame(FrameType::MaxStreams).count, 3u);
    EXPECT_EQ(sum.received.frame(FrameType::MaxStreams).octets, 198u);
    EXPECT_EQ(sum.sent.packets, 0u);
}

TEST(QlogParse, ExplicitFrameLengthsOwnTheirBytes) {
    QlogSummary sum = parse_qlog_frames(
        event_line("transport:packet_sent", 100, {{"stream", 60}, {"ack", 40}}));
    EXPECT_EQ(sum.sent.packets, 1u);
    EXPECT_EQ(sum.sent.octets, 100u);
    EXPECT_EQ(sum.sent.frame(FrameType::Stream).count, 1u);
    EXPECT_EQ(sum.sent.frame(FrameType::Stream).octets, 60u);
    EXPECT_EQ(sum.sent.frame(FrameType::Ack).octets, 40u);
}

TEST(QlogParse, RemainderSplitsEvenlyAcrossImplicitFrames) {
    // 103 total, 50 explicit: 53 left over, 27 to the first implicit frame.
    QlogSummary sum = parse_qlog_frames(event_line(
        "transport:packet_sent", 103, {{"stream", 50}, {"datagram", {}}, {"ping", {}}}));
    EXPECT_EQ(sum.sent.frame(FrameType::Stream).octets, 50u);
    EXPECT_EQ(sum.sent.frame(FrameType::Datagram).octets, 27u);
    EXPECT_EQ(sum.sent.frame(FrameType::Ping).octets, 26u);
    EXPECT_EQ(sum.sent.octets, 103u);
}

TEST(QlogParse, UnknownFrameTypesCountAsOther) {
    QlogSummary sum = parse_qlog_frames(
        event_line("packet_sent", 30, {{"handshake_done", {}}, {"crypto", {}}}));
    EXPECT_EQ(sum.sent.frame(FrameType::Other).count, 2u);
    EXPECT_EQ(sum.sent.frame(FrameType::Other).octets, 30u);
}

TEST(QlogParse, EmptyAndBlankInputMakeAnEmptySummary) {
    EXPECT_EQ(parse_qlog_frames(""), QlogSummary{});
    EXPECT_EQ(parse_qlog_frames("\n  \n\t\n"), QlogSummary{});
}

TEST(QlogParse, UnrelatedEventNamesAreSkipped) {
    QlogSummary sum = parse_qlog_frames(
        R"({"time":1,"name":"recovery:metrics_updated","data":{"smoothed_rtt":3}})");
    EXPECT_EQ(sum, QlogSummary{});
}

TEST(QlogParse, MalformedInputThrowsTypedError) {
    EXPECT_THROW(parse_qlog_frames("this is not json\n"), MalformedTrace);
    EXPECT_THROW(parse_qlog_frames(R"({"name":"transport:packet_sent"})"), MalformedTrace);
    EXPECT_THROW(parse_qlog_frames(R"([{"name":42,"data":{}}])"), MalformedTrace);
    EXPECT_THROW(parse_qlog_frames("[3, 4]"), MalformedTrace);
    EXPECT_THROW(parse_qlog_frames(
                     R"({"name":"packet_sent","data":{"frames":{"frame_type":"ack"}}})"),
                 MalformedTrace);
}

TEST(QlogParse, ArrayAndTracesDocumentsMatchTheLineForm) {
    std::string a = event_line("transport:packet_sent", 80, {{"datagram", {}}});
    std::string b = event_line("transport:packet_received", 90, {{"datagram", {}}});
    QlogSummary line_form = parse_qlog_frames(a + "\n" + b + "\n");

    QlogSummary array_form = parse_qlog_frames("[" + a + "," + b + "]");
    EXPECT_EQ(array_form, line_form);

    nlohmann::json doc{{"qlog_version", "0.3"},
                       {"traces", nlohmann::json::array(
                                      {{{"events", nlohmann::json::array(
                                                       {nlohmann::json::parse(a),
                                                        nlohmann::json::parse(b)})}}})}};
    QlogSummary doc_form = parse_qlog_frames(doc.dump());
    EXPECT_EQ(doc_form, line_form);
}

TEST(QlogParse, MissingFileThrowsIoFailure) {
    EXPECT_THROW(parse_qlog_file("/nonexistent/doq_trace.qlog"), IoFailure);
}

TEST(QlogParse, RoundTripsARealSessionTrace) {
    SystemClock clock;
    ServerConfig server_cfg;
    server_cfg.listen_address = "127.0.0.1:0";
    DoqProxy proxy(clock, std::move(server_cfg));

    fs::path trace = fresh_dir("qlog") / "session.qlog";
    UdpSessionConfig cfg;
    cfg.insecure_skip_verify = true;
    cfg.qlog_path = trace.string();

    SessionPtr session = udp_connect(clock, proxy.local_address(), cfg);
    std::uint64_t sent_at_connect = session->bytes_sent();
    std::uint64_t received_at_connect = session->bytes_received();

    ClientConfig lookup;
    lookup.count = 3;
    lookup.spacing = 0ms;
    LookupReport rep = run_lookup_on(session, lookup);
    ASSERT_TRUE(rep.all_responded());
    ASSERT_EQ(rep.mode, DeliveryMode::Datagram);

    std::uint64_t sent_total = session->bytes_sent();
    std::uint64_t received_total = session->bytes_received();
    session->close(code(DoqErrorCode::NoError));
    session.reset(); // last reference: flushes the trace file

    QlogSummary sum = parse_qlog_file(trace.string());
    // The trace covers post-handshake traffic; counters include the handshake.
    EXPECT_EQ(sum.sent.octets, sent_total - sent_at_connect);
    EXPECT_EQ(sum.received.octets, received_total - received_at_connect);
    EXPECT_GE(sum.sent.frame(FrameType::Datagram).count, 3u);
    EXPECT_GE(sum.received.frame(FrameType::Datagram).count, 3u);
    EXPECT_GE(sum.sent.packets, 4u); // three queries and a close, at least
}

// ------------------------------------------------------------ SimSignaling --

TEST(SimSignaling, GapMatchesCalibratedTargets) {
    EXPECT_EQ(signaling_gap(50), 6500u);
    EXPECT_EQ(signaling_gap(100), 13000u);
    EXPECT_EQ(signaling_gap(100), 2 * signaling_gap(50));
    EXPECT_EQ(signaling_gap(0), 0u);
}

TEST(SimSignaling, GapIsLinearInQueryCount) {
    for (std::uint64_t n : {1u, 2u, 7u, 33u, 250u})
        EXPECT_EQ(signaling_gap(n), n * 130u) << "n=" << n;
}

TEST(SimSignaling, StreamReportShape) {
    SignalingReport r = simulate_signaling(50, DeliveryMode::Stream);
    EXPECT_EQ(r.mode, DeliveryMode::Stream);
    EXPECT_EQ(r.queries, 50u);
    // Per query: one credit replenishment packet and its ack, plus the two
    // stream frame overheads.
    EXPECT_EQ(r.signaling_octets, 50u * (2 * 12 + 66 + 48));
    EXPECT_EQ(r.frame(Direction::ServerToClient, FrameType::MaxStreams).count, 50u);
    EXPECT_EQ(r.frame(Direction::ServerToClient, FrameType::MaxStreams).octets, 50u * 66);
    EXPECT_EQ(r.frame(Direction::ClientToServer, FrameType::Ack).count, 50u);
    EXPECT_EQ(r.frame(Direction::ClientToServer, FrameType::Ack).octets, 50u * 48);
    EXPECT_EQ(r.frame(Direction::ClientToServer, FrameType::Stream).count, 50u);
    EXPECT_EQ(r.frame(Direction::ServerToClient, FrameType::Stream).count, 50u);
    EXPECT_EQ(r.frame(Direction::ClientToServer, FrameType::Datagram).count, 0u);
    EXPECT_EQ(r.total_octets(), r.application_octets + r.signaling_octets);
    EXPECT_GT(r.application_octets, 0u);
}

TEST(SimSignaling, DatagramReportShape) {
    SignalingReport r = simulate_signaling(50, DeliveryMode::Datagram);
    EXPECT_EQ(r.signaling_octets, 50u * 2 * 4);
    EXPECT_EQ(r.frame(Direction::ClientToServer, FrameType::Datagram).count, 50u);
    EXPECT_EQ(r.frame(Direction::ServerToClient, FrameType::Datagram).count, 50u);
    EXPECT_EQ(r.frame(Direction::ServerToClient, FrameType::MaxStreams).count, 0u);
    EXPECT_EQ(r.frame(Direction::ClientToServer, FrameType::Ack).count, 0u);
    EXPECT_EQ(r.frame(Direction::ClientToServer, FrameType::Stream).count, 0u);
}

TEST(SimSignaling, ApplicationBytesCancelAcrossModes) {
    SignalingReport s = simulate_signaling(77, DeliveryMode::Stream);
    SignalingReport d = simulate_signaling(77, DeliveryMode::Datagram);
    EXPECT_EQ(s.application_octets, d.application_octets);
    EXPECT_EQ(s.total_octets() - d.total_octets(), signaling_gap(77));
}

TEST(SimSignaling, OneTimeCostStaysOutOfTheTotals) {
    SignalingReport r = simulate_signaling(10, DeliveryMode::Stream);
    EXPECT_EQ(r.one_time_octets, kOneTimeCostEstimateOctets);
    EXPECT_EQ(r.one_time_octets, 11600u);
    EXPECT_EQ(r.total_octets(), r.application_octets + r.signaling_octets);
}

TEST(SimSignaling, HonorsACustomCostModel) {
    FakeNetworkConfig model;
    model.cost_model.stream_frame_overhead = 10;
    model.cost_model.datagram_frame_overhead = 2;
    model.cost_model.max_streams_packet = 50;
    model.cost_model.ack_packet = 30;
    EXPECT_EQ(signaling_gap(10, model), 10u * ((10 - 2) * 2 + 50 + 30));
}

// ------------------------------------------------------------- RelaySuite --

namespace {

// Minimal UDP peer: counts datagrams and echoes them back when asked to.
class UdpPeer {
public:
    explicit UdpPeer(bool echo) : echo_(echo) {
        socket_.bind(SocketAddress::resolve("127.0.0.1:0", 0));
        address_ = socket_.local_address().to_string();
        rx_ = std::thread([this] { loop(); });
    }
    ~UdpPeer() { stop(); }

    void stop() {
        if (stopped_.exchange(true)) return;
        if (rx_.joinable()) rx_.join();
        socket_.close();
    }

    const std::string& address() const { return address_; }
    std::uint64_t received() const { return received_.load(); }

private:
    void loop() {
        while (!stopped_.load()) {
            auto pkt = socket_.receive(20ms);
            if (!pkt) continue;
            received_.fetch_add(1);
            if (echo_) socket_.send_to(pkt->payload, pkt->from);
        }
    }

    UdpSocket socket_;
    std::string address_;
    bool echo_;
    std::thread rx_;
    std::atomic<bool> stopped_{false};
    std::atomic<std::uint64_t> received_{0};
};

Bytes numbered_payload(int n, std::size_t size) {
    Bytes b(size);
    for (std::size_t i = 0; i < size; ++i)
        b[i] = static_cast<std::uint8_t>((n + static_cast<int>(i) * 31) & 0xff);
    b[0] = static_cast<std::uint8_t>(n >> 8);
    b[1] = static_cast<std::uint8_t>(n & 0xff);
    return b;
}

} // namespace

TEST(RelaySuite, ValidatesItsConfig) {
    RelayConfig cfg;
    EXPECT_THROW(cfg.validate(), std::invalid_argument); // no target

    cfg.target_address = "127.0.0.1:9";
    cfg.delay_min = 5ms;
    cfg.delay_max = 1ms;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);

    cfg.delay_max = 5ms;
    cfg.loss_rate = 1.5;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);

    cfg.loss_rate = 0.5;
    EXPECT_NO_THROW(cfg.validate());
}

TEST(RelaySuite, UnimpairedPassthroughIsByteExactAndOrdered) {
    SystemClock clock;
    UdpPeer peer(/*echo=*/true);

    RelayConfig cfg;
    cfg.target_address = peer.address();
    ImpairmentRelay relay(clock, cfg);

    UdpSocket client;
    client.connect(SocketAddress::resolve(relay.local_address(), 0));

    constexpr int kCount = 50;
    std::vector<Bytes> sent;
    for (int i = 0; i < kCount; ++i) {
        sent.push_back(numbered_payload(i, 20 + static_cast<std::size_t>(i)));
        client.send(sent.back());
    }

    std::vector<Bytes> got;
    auto deadline = std::chrono::steady_clock::now() + 5s;
    while (got.size() < kCount && std::chrono::steady_clock::now() < deadline) {
        auto pkt = client.receive(100ms);
        if (pkt) got.push_back(std::move(pkt->payload));
    }

    ASSERT_EQ(got.size(), static_cast<std::size_t>(kCount));
    for (int i = 0; i < kCount; ++i) EXPECT_EQ(got[i], sent[i]) << "packet " << i;

    EXPECT_EQ(relay.delivered_to_target(), static_cast<std::uint64_t>(kCount));
    EXPECT_EQ(relay.delivered_to_client(), static_cast<std::uint64_t>(kCount));
    EXPECT_EQ(relay.dropped(), 0u);
    relay.stop();
    relay.stop(); // idempotent
}

TEST(RelaySuite, LossRateStaysWithinBinomialBounds) {
    SystemClock clock;
    UdpPeer peer(/*echo=*/false);

    RelayConfig cfg;
    cfg.target_address = peer.address();
    cfg.loss_rate = 0.3;
    cfg.seed = 77;
    ImpairmentRelay relay(clock, cfg);

    UdpSocket client;
    client.connect(SocketAddress::resolve(relay.local_address(), 0));

    constexpr int kCount = 2000;
    Bytes payload = numbered_payload(1, 16);
    for (int i = 0; i < kCount; ++i) {
        client.send(payload);
        // Keep at most a small window in flight so the kernel socket buffer
        // never drops packets and distorts the measured loss.
        if (i % 64 == 63) {
            auto deadline = std::chrono::steady_clock::now() + 2s;
            while (relay.delivered_to_target() + relay.dropped() + 64 <
                       static_cast<std::uint64_t>(i) + 1 &&
                   std::chrono::steady_clock::now() < deadline)
                std::this_thread::sleep_for(1ms);
        }
    }
    auto deadline = std::chrono::steady_clock::now() + 5s;
    while (relay.delivered_to_target() + relay.dropped() < kCount &&
           std::chrono::steady_clock::now() < deadline)
        std::this_thread::sleep_for(2ms);

    ASSERT_EQ(relay.delivered_to_target() + relay.dropped(),
              static_cast<std::uint64_t>(kCount));
    double mean = kCount * (1.0 - cfg.loss_rate);
    double sigma = std::sqrt(kCount * cfg.loss_rate * (1.0 - cfg.loss_rate));
    EXPECT_NEAR(static_cast<double>(relay.delivered_to_target()), mean, 3.0 * sigma);

    // Everything the relay forwarded must actually reach the target.
    deadline = std::chrono::steady_clock::now() + 2s;
    while (peer.received() < relay.delivered_to_target() &&
           std::chrono::steady_clock::now() < deadline)
        std::this_thread::sleep_for(2ms);
    EXPECT_EQ(peer.received(), relay.delivered_to_target());
}

TEST(RelaySuite, FixedDelayInflatesEchoRttByTwiceTheBound) {
    SystemClock clock;
    UdpPeer peer(/*echo=*/true);

    auto median_rtt_ms = [](UdpSocket& sock, const Bytes& probe, int count) {
        std::vector<double> rtts;
        for (int i = 0; i < count; ++i) {
            auto t0 = std::chrono::steady_clock::now();
            sock.send(probe);
            auto pkt = sock.receive(2000ms);
            auto t1 = std::chrono::steady_clock::now();
            if (pkt)
                rtts.push_back(
                    std::chrono::duration<double, std::milli>(t1 - t0).count());
        }
        EXPECT_FALSE(rtts.empty());
        std::sort(rtts.begin(), rtts.end());
        return rtts[rtts.size() / 2];
    };

    Bytes probe = numbered_payload(9, 32);

    UdpSocket direct;
    direct.connect(SocketAddress::resolve(peer.address(), 0));
    double base = median_rtt_ms(direct, probe, 7);

    RelayConfig cfg;
    cfg.target_address = peer.address();
    cfg.delay_min = 50ms;
    cfg.delay_max = 50ms;
    ImpairmentRelay relay(clock, cfg);

    UdpSocket relayed;
    relayed.connect(SocketAddress::resolve(relay.local_address(), 0));
    double via_relay = median_rtt_ms(relayed, probe, 7);

    double inflation = via_relay - base;
    EXPECT_GE(inflation, 90.0) << "base " << base << " relayed " << via_relay;
    EXPECT_LE(inflation, 140.0) << "base " << base << " relayed " << via_relay;
}

// ------------------------------------------------------------- BenchSuite --

TEST(BenchScenario, JsonRoundTripsAllFields) {
    Scenario sc;
    sc.id = "fig3_datagram";
    sc.mode = DeliveryMode::Datagram;
    sc.query_count = 100;
    sc.spacing_ms = 500;
    sc.iterations = 10;
    sc.impairment = Impairment{20, 60, 0.05};
    sc.backend = Backend::RealStack;
    sc.seed = 99;

    nlohmann::json j = sc;
    Scenario back = j.get<Scenario>();
    EXPECT_EQ(back, sc);

    Scenario minimal = nlohmann::json::parse(R"({"mode":"datagram"})").get<Scenario>();
    EXPECT_EQ(minimal.mode, DeliveryMode::Datagram);
    EXPECT_EQ(minimal.query_count, 50);
    EXPECT_EQ(minimal.iterations, 10);
    EXPECT_FALSE(minimal.impairment.has_value());
    EXPECT_EQ(minimal.backend, Backend::FakeSim);

    EXPECT_THROW(nlohmann::json::parse(R"({"mode":"pigeon"})").get<Scenario>(),
                 std::invalid_argument);
}

TEST(BenchScenario, LoadScenarioReadsAFileAndValidates) {
    fs::path dir = fresh_dir("scenario");
    fs::path good = dir / "good.json";
    std::ofstream(good) << R"({"mode":"stream","query_count":4,"iterations":2})";
    Scenario sc = load_scenario(good.string());
    EXPECT_EQ(sc.query_count, 4);

    fs::path bad = dir / "bad.json";
    std::ofstream(bad) << R"({"mode":"stream","iterations":0})";
    EXPECT_THROW(load_scenario(bad.string()), std::invalid_argument);

    fs::path junk = dir / "junk.json";
    std::ofstream(junk) << "not json at all";
    EXPECT_THROW(load_scenario(junk.string()), IoFailure);

    EXPECT_THROW(load_scenario((dir / "missing.json").string()), IoFailure);
}

TEST(BenchScenario, ValidateRejectsBadFields) {
    Scenario sc;
    sc.iterations = 0;
    EXPECT_THROW(sc.validate(), std::invalid_argument);
    sc.iterations = 1;
    sc.query_count = 0;
    EXPECT_THROW(sc.validate(), std::invalid_argument);
    sc.query_count = 1;
    sc.spacing_ms = -1;
    EXPECT_THROW(sc.validate(), std::invalid_argument);
    sc.spacing_ms = 0;
    sc.impairment = Impairment{5, 1, 0};
    EXPECT_THROW(sc.validate(), std::invalid_argument);
    sc.impairment = Impairment{1, 5, 2.0};
    EXPECT_THROW(sc.validate(), std::invalid_argument);
    sc.impairment = Impairment{1, 5, 0.1};
    EXPECT_NO_THROW(sc.validate());
}

TEST(BenchScenario, EffectiveIdDerivesFromFieldsWhenUnset) {
    Scenario sc;
    sc.mode = DeliveryMode::Datagram;
    sc.query_count = 20;
    sc.spacing_ms = 100;
    EXPECT_EQ(sc.effective_id(), "datagram_q20_sp100_fake");
    sc.impairment = Impairment{};
    sc.backend = Backend::RealStack;
    EXPECT_EQ(sc.effective_id(), "datagram_q20_sp100_real_imp");
    sc.id = "custom";
    EXPECT_EQ(sc.effective_id(), "custom");
}

namespace {

Scenario small_fake_scenario(DeliveryMode mode) {
    Scenario sc;
    sc.mode = mode;
    sc.backend = Backend::FakeSim;
    sc.query_count = 10;
    sc.spacing_ms = 5;
    sc.iterations = 2;
    sc.seed = 3;
    return sc;
}

} // namespace

TEST(BenchRun, FakeSimStreamModeAccountsCreditTraffic) {
    ExperimentReport report = run_experiment(small_fake_scenario(DeliveryMode::Stream));
    ASSERT_EQ(report.samples.size(), 2u);
    for (const IterationSample& s : report.samples) {
        ASSERT_FALSE(s.failed) << s.failure_reason;
        EXPECT_EQ(s.latencies_ms.size(), 10u);
        EXPECT_EQ(s.retransmission_count, 0u);
        // One query up and one response down per exchange, each retired
        // stream answered by a credit grant and its ack.
        EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Stream).count, 10u);
        EXPECT_EQ(s.frame(Direction::ServerToClient, FrameType::Stream).count, 10u);
        EXPECT_EQ(s.frame(Direction::ServerToClient, FrameType::MaxStreams).count, 10u);
        EXPECT_EQ(s.frame(Direction::ServerToClient, FrameType::MaxStreams).octets, 660u);
        EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Ack).count, 10u);
        EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Ack).octets, 480u);
        EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Datagram).count, 0u);
        EXPECT_EQ(s.total_bytes_sent,
                  s.frame(Direction::ClientToServer, FrameType::Stream).octets +
                      s.frame(Direction::ClientToServer, FrameType::Ack).octets);
        EXPECT_EQ(s.total_bytes_received,
                  s.frame(Direction::ServerToClient, FrameType::Stream).octets +
                      s.frame(Direction::ServerToClient, FrameType::MaxStreams).octets);
        EXPECT_GE(s.wall_time_ms, 45.0); // nine 5 ms gaps at minimum
        EXPECT_EQ(s.one_time_octets, 0u); // in-memory pair has no setup bytes
    }
    EXPECT_DOUBLE_EQ(report.retransmissions.maximum, 0.0);
    EXPECT_GT(report.wall_time_ms.mean, 0.0);
}

TEST(BenchRun, FakeSimDatagramModeUsesOnlyDatagramFrames) {
    ExperimentReport report = run_experiment(small_fake_scenario(DeliveryMode::Datagram));
    for (const IterationSample& s : report.samples) {
        ASSERT_FALSE(s.failed) << s.failure_reason;
        EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Datagram).count, 10u);
        EXPECT_EQ(s.frame(Direction::ServerToClient, FrameType::Datagram).count, 10u);
        EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Stream).count, 0u);
        EXPECT_EQ(s.frame(Direction::ServerToClient, FrameType::MaxStreams).count, 0u);
        EXPECT_EQ(s.retransmission_count, 0u);
    }
}

TEST(BenchRun, FakeSimIsDeterministicPerSeed) {
    Scenario sc = small_fake_scenario(DeliveryMode::Datagram);
    sc.iterations = 3;
    sc.seed = 42;
    sc.impairment = Impairment{1, 3, 0.1}; // exercise the delay and loss draws

    ExperimentReport a = run_experiment(sc);
    ExperimentReport b = run_experiment(sc);
    EXPECT_EQ(a, b);

    fs::path dir_a = fresh_dir("det_a");
    fs::path dir_b = fresh_dir("det_b");
    auto files_a = emit_report(a, ReportFormat::Json, dir_a.string());
    auto files_b = emit_report(b, ReportFormat::Json, dir_b.string());
    ASSERT_EQ(files_a.size(), 1u);
    ASSERT_EQ(files_b.size(), 1u);
    EXPECT_EQ(slurp(files_a[0]), slurp(files_b[0]));
}

TEST(BenchRun, FakeSimLossTriggersRetransmissionsButCompletes) {
    Scenario sc = small_fake_scenario(DeliveryMode::Datagram);
    sc.query_count = 40;
    sc.spacing_ms = 2;
    sc.iterations = 1;
    sc.seed = 11;
    sc.impairment = Impairment{0, 0, 0.15};

    ExperimentReport report = run_experiment(sc);
    ASSERT_EQ(report.samples.size(), 1u);
    const IterationSample& s = report.samples[0];
    ASSERT_FALSE(s.failed) << s.failure_reason;
    EXPECT_EQ(s.latencies_ms.size(), 40u);
    EXPECT_GT(s.retransmission_count, 0u);
    // Every retransmission is another datagram on the wire.
    EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Datagram).count,
              40u + s.retransmission_count);
}

TEST(BenchRun, ScenarioFailedStillDeliversThePartialReport) {
    Scenario sc = small_fake_scenario(DeliveryMode::Datagram);
    sc.query_count = 2;
    sc.spacing_ms = 1;
    sc.iterations = 2;
    sc.seed = 5;
    sc.impairment = Impairment{0, 0, 0.999}; // retries cannot save this

    ExperimentReport partial;
    EXPECT_THROW(run_experiment(sc, &partial), ScenarioFailed);
    ASSERT_EQ(partial.samples.size(), 2u);
    for (const IterationSample& s : partial.samples) {
        EXPECT_TRUE(s.failed);
        EXPECT_FALSE(s.failure_reason.empty());
    }
    // No successful iterations: the metric summaries stay empty.
    EXPECT_EQ(partial.wall_time_ms, BoxStats{});
}

TEST(BenchRun, RealStackDatagramSmoke) {
    Scenario sc;
    sc.backend = Backend::RealStack;
    sc.mode = DeliveryMode::Datagram;
    sc.query_count = 5;
    sc.spacing_ms = 0;
    sc.iterations = 2;

    ExperimentReport report = run_experiment(sc);
    ASSERT_EQ(report.samples.size(), 2u);
    for (const IterationSample& s : report.samples) {
        ASSERT_FALSE(s.failed) << s.failure_reason;
        EXPECT_EQ(s.latencies_ms.size(), 5u);
        EXPECT_GT(s.one_time_octets, 0u);
        EXPECT_GT(s.total_bytes_sent + s.total_bytes_received, s.one_time_octets);
        EXPECT_GE(s.frame(Direction::ClientToServer, FrameType::Datagram).count, 5u);
        EXPECT_GE(s.frame(Direction::ServerToClient, FrameType::Datagram).count, 5u);
        EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Stream).count, 0u);
    }
    EXPECT_GT(report.latency_mean_ms.mean, 0.0);
}

TEST(BenchRun, RealStackStreamThroughImpairedRelay) {
    Scenario sc;
    sc.backend = Backend::RealStack;
    sc.mode = DeliveryMode::Stream;
    sc.query_count = 3;
    sc.spacing_ms = 0;
    sc.iterations = 1;
    sc.impairment = Impairment{2, 6, 0.0};

    ExperimentReport report = run_experiment(sc);
    const IterationSample& s = report.samples.at(0);
    ASSERT_FALSE(s.failed) << s.failure_reason;
    EXPECT_EQ(s.latencies_ms.size(), 3u);
    EXPECT_GE(s.frame(Direction::ClientToServer, FrameType::Stream).count, 3u);
    EXPECT_EQ(s.frame(Direction::ClientToServer, FrameType::Datagram).count, 0u);
    EXPECT_GE(s.frame(Direction::ServerToClient, FrameType::MaxStreams).count, 3u);
    // The impairment adds at least two 2 ms one-way delays per exchange.
    for (double l : s.latencies_ms) EXPECT_GE(l, 4.0);
}

TEST(BenchReport, JsonMirrorsTheFullStructureAndRoundTrips) {
    Scenario sc = small_fake_scenario(DeliveryMode::Datagram);
    sc.iterations = 4;
    sc.query_count = 3;
    sc.spacing_ms = 1;
    sc.seed = 9;
    ExperimentReport report = run_experiment(sc);

    fs::path dir = fresh_dir("json_report");
    auto files = emit_report(report, ReportFormat::Json, dir.string());
    ASSERT_EQ(files.size(), 1u);
    EXPECT_EQ(fs::path(files[0]).filename().string(), sc.effective_id() + ".json");

    nlohmann::json j = nlohmann::json::parse(slurp(files[0]));
    ExperimentReport back = j.get<ExperimentReport>();
    EXPECT_EQ(back, report);
}

TEST(BenchReport, CsvEmitsOneFilePerFigureInStableOrder) {
    Scenario sc = small_fake_scenario(DeliveryMode::Datagram);
    sc.iterations = 4;
    sc.query_count = 3;
    sc.spacing_ms = 1;
    sc.seed = 9;
    ExperimentReport report = run_experiment(sc);

    fs::path dir = fresh_dir("csv_report");
    auto files = emit_report(report, ReportFormat::Csv, dir.string());
    ASSERT_EQ(files.size(), 3u);
    const std::string id = sc.effective_id();
    EXPECT_EQ(fs::path(files[0]).filename().string(), id + "_time.csv");
    EXPECT_EQ(fs::path(files[1]).filename().string(), id + "_bytes.csv");
    EXPECT_EQ(fs::path(files[2]).filename().string(), id + "_retransmissions.csv");

    auto parse_csv = [](const std::string& text) {
        std::vector<std::vector<std::string>> rows;
        std::istringstream lines(text);
        std::string line;
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cells;
            std::istringstream cs(line);
            std::string cell;
            while (std::getline(cs, cell, ',')) cells.push_back(cell);
            rows.push_back(std::move(cells));
        }
        return rows;
    };

    auto time_rows = parse_csv(slurp(files[0]));
    ASSERT_EQ(time_rows.size(), 1u + 2 * 4); // header + 2 metrics x 4 iterations
    EXPECT_EQ(time_rows[0], (std::vector<std::string>{"scenario", "iteration", "metric",
                                                      "value"}));
    for (int i = 0; i < 4; ++i) {
        const auto& row = time_rows[1 + static_cast<std::size_t>(i)];
        ASSERT_EQ(row.size(), 4u);
        EXPECT_EQ(row[0], id);
        EXPECT_EQ(row[1], std::to_string(i));
        EXPECT_EQ(row[2], "wall_time_ms");
        EXPECT_NEAR(std::stod(row[3]), report.samples[static_cast<std::size_t>(i)].wall_time_ms,
                    1e-3 * (1.0 + report.samples[static_cast<std::size_t>(i)].wall_time_ms));
        EXPECT_EQ(time_rows[5 + static_cast<std::size_t>(i)][2], "latency_mean_ms");
    }

    auto bytes_rows = parse_csv(slurp(files[1]));
    ASSERT_EQ(bytes_rows.size(), 1u + 3 * 4); // bytes sent, received, one-time
    EXPECT_EQ(bytes_rows[1][2], "bytes_sent");
    EXPECT_EQ(bytes_rows[5][2], "bytes_received");
    EXPECT_EQ(bytes_rows[9][2], "one_time_octets");

    auto retrans_rows = parse_csv(slurp(files[2]));
    ASSERT_EQ(retrans_rows.size(), 1u + 4);
    EXPECT_EQ(retrans_rows[1][2], "retransmissions");
}

TEST(BenchReport, UnwritableDirectoryThrowsIoFailure) {
    ExperimentReport report;
    report.scenario = small_fake_scenario(DeliveryMode::Stream);
    EXPECT_THROW(emit_report(report, ReportFormat::Json, "/proc/doq_no_such_place"),
                 IoFailure);
    EXPECT_THROW(emit_report(report, ReportFormat::Csv, "/proc/doq_no_such_place"),
                 IoFailure);
}
