// SPDX-License-Identifier: Apache-2.0
//
// doq-bench: benchmark front-end.
//   run    execute a scenario file and emit CSV/JSON reports
//   sim    closed-form per-mode byte accounting for N queries
//   relay  stand-alone UDP impairment relay (delay/loss)
//   qlog   frame histogram of a qlog trace

#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <string>
#include <thread>

#include "CLI11.hpp"

#include "doq/bench.hpp"

namespace {

volatile std::sig_atomic_t g_stop = 0;

void on_signal(int) { g_stop = 1; }

nlohmann::json direction_json(const doq::QlogDirectionTotals& d) {
    nlohmann::json frames = nlohmann::json::object();
    for (int f = 0; f < doq::kFrameTypeCount; ++f) {
        const doq::FrameTally& t = d.frames[static_cast<std::size_t>(f)];
        if (t.count == 0 && t.octets == 0) continue;
        frames[doq::to_string(static_cast<doq::FrameType>(f))] = {{"count", t.count},
                                                                  {"octets", t.octets}};
    }
    return {{"packets", d.packets}, {"octets", d.octets}, {"frames", std::move(frames)}};
}

int cmd_run(const std::string& scenario_path, const std::string& out_dir,
            const std::string& format) {
    doq::Scenario scenario = doq::load_scenario(scenario_path);
    doq::ExperimentReport report;
    bool failed = false;
    try {
        report = doq::run_experiment(scenario, &report);
    } catch (const doq::ScenarioFailed& e) {
        // Partials were preserved in `report`; emit them with the failure marked.
        std::cerr << "scenario failed: " << e.what() << '\n';
        failed = true;
    }
    std::vector<std::string> written;
    if (format == "json" || format == "both") {
        auto files = doq::emit_report(report, doq::ReportFormat::Json, out_dir);
        written.insert(written.end(), files.begin(), files.end());
    }
    if (format == "csv" || format == "both") {
        auto files = doq::emit_report(report, doq::ReportFormat::Csv, out_dir);
        written.insert(written.end(), files.begin(), files.end());
    }
    for (const std::string& f : written) std::cout << f << '\n';
    return failed ? 3 : 0;
}

int cmd_sim(std::uint64_t queries, const std::string& mode_text) {
    doq::DeliveryMode mode = mode_text == "datagram" ? doq::DeliveryMode::Datagram
                                                     : doq::DeliveryMode::Stream;
    doq::SignalingReport r = doq::simulate_signaling(queries, mode);
    nlohmann::json frames = nlohmann::json::object();
    for (int d = 0; d < 2; ++d) {
        nlohmann::json dir = nlohmann::json::object();
        for (int f = 0; f < doq::kFrameTypeCount; ++f) {
            const doq::FrameTally& t = r.frames[static_cast<std::size_t>(d)]
                                               [static_cast<std::size_t>(f)];
            if (t.count == 0) continue;
            dir[doq::to_string(static_cast<doq::FrameType>(f))] = {{"count", t.count},
                                                                   {"octets", t.octets}};
        }
        frames[doq::to_string(static_cast<doq::Direction>(d))] = std::move(dir);
    }
    nlohmann::json out{{"mode", doq::to_string(mode)},
                       {"queries", r.queries},
                       {"application_octets", r.application_octets},
                       {"signaling_octets", r.signaling_octets},
                       {"total_octets", r.total_octets()},
                       {"one_time_octets_estimate", r.one_time_octets},
                       {"stream_minus_datagram_octets", doq::signaling_gap(queries)},
                       {"frames", std::move(frames)}};
    std::cout << out.dump(2) << '\n';
    return 0;
}

int cmd_relay(const std::string& listen, const std::string& target,
              const std::string& delay_spec, double loss, std::uint32_t seed) {
    doq::RelayConfig cfg;
    cfg.listen_address = listen;
    cfg.target_address = target;
    cfg.loss_rate = loss;
    cfg.seed = seed;
    if (!delay_spec.empty()) {
        auto colon = delay_spec.find(':');
        double lo = 0.0, hi = 0.0;
        try {
            if (colon == std::string::npos) {
                lo = hi = std::stod(delay_spec);
            } else {
                lo = std::stod(delay_spec.substr(0, colon));
                hi = std::stod(delay_spec.substr(colon + 1));
            }
        } catch (const std::exception&) {
            std::cerr << "error: --delay-ms expects ms or min:max\n";
            return 2;
        }
        cfg.delay_min = std::chrono::duration_cast<doq::ClockDuration>(
            std::chrono::duration<double, std::milli>(lo));
        cfg.delay_max = std::chrono::duration_cast<doq::ClockDuration>(
            std::chrono::duration<double, std::milli>(hi));
    }
    cfg.validate();

    doq::SystemClock clock;
    doq::ImpairmentRelay relay(clock, cfg);
    std::cout << "relaying " << relay.local_address() << " -> " << target << std::endl;

    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));

    relay.stop();
    std::cout << "forwarded " << relay.delivered_to_target() << " to target, "
              << relay.delivered_to_client() << " to clients, dropped " << relay.dropped()
              << std::endl;
    return 0;
}

int cmd_qlog(const std::string& path) {
    doq::QlogSummary sum = doq::parse_qlog_file(path);
    nlohmann::json out{{"sent", direction_json(sum.sent)},
                       {"received", direction_json(sum.received)}};
    std::cout << out.dump(2) << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"DoQ benchmark harness"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "run a scenario file and emit reports");
    std::string scenario_path, out_dir = ".", format = "both";
    run->add_option("--scenario", scenario_path, "scenario JSON file")->required();
    run->add_option("--out", out_dir, "output directory")->capture_default_str();
    run->add_option("--format", format)
        ->check(CLI::IsMember({"csv", "json", "both"}))
        ->capture_default_str();

    auto* sim = app.add_subcommand("sim", "closed-form signaling accounting");
    std::uint64_t queries = 50;
    std::string mode = "stream";
    sim->add_option("--queries", queries)->capture_default_str();
    sim->add_option("--mode", mode)
        ->check(CLI::IsMember({"stream", "datagram"}))
        ->capture_default_str();

    auto* relay = app.add_subcommand("relay", "UDP impairment relay");
    std::string listen = "127.0.0.1:0", target, delay_spec;
    double loss = 0.0;
    std::uint32_t seed = 1;
    relay->add_option("--listen", listen)->capture_default_str();
    relay->add_option("--target", target, "forward destination host:port")->required();
    relay->add_option("--delay-ms", delay_spec, "one-way delay, ms or min:max");
    relay->add_option("--loss", loss, "per-packet drop probability")->capture_default_str();
    relay->add_option("--seed", seed)->capture_default_str();

    auto* qlog = app.add_subcommand("qlog", "summarize a qlog trace");
    std::string trace_path;
    qlog->add_option("--in", trace_path, "trace file")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) return cmd_run(scenario_path, out_dir, format);
        if (sim->parsed()) return cmd_sim(queries, mode);
        if (relay->parsed()) return cmd_relay(listen, target, delay_spec, loss, seed);
        return cmd_qlog(trace_path);
    } catch (const doq::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
}
