// eqkd: entanglement-QKD link twin. Subcommands: simulate (write tag files),
// run-alice / run-bob (live TCP nodes), run-loopback (both nodes in-process),
// model-skr (rate scan / mu optimization), bench-correlate (throughput).
#include <chrono>
#include <fstream>
#include <iostream>
#include <random>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "eqkd/config.hpp"
#include "eqkd/node.hpp"
#include "eqkd/rng.hpp"
#include "eqkd/sim_link.hpp"
#include "eqkd/skr_model.hpp"
#include "eqkd/tagfile.hpp"
#include "eqkd/timetag.hpp"
#include "eqkd/transport.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitProtocol = 3;
constexpr int kExitSecurity = 4;

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::uint64_t seed = 1;
    bool quiet = false;
};

eqkd::SimConfig load_config(const CommonArgs& args) {
    auto cfg = eqkd::parse_config(args.config_path, args.overrides);
    if (!args.quiet) {
        std::cout << "# configuration (hash " << std::hex << cfg.hash() << std::dec << ")\n"
                  << cfg.dump(true) << std::flush;
    }
    return cfg;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "config file (sectioned key = value)");
    cmd->add_option("-s,--set", args.overrides,
                    "override a config key, e.g. --set source.mu=0.01 (repeatable)");
    cmd->add_option("--seed", args.seed, "master RNG seed");
    cmd->add_flag("-q,--quiet", args.quiet, "suppress the config dump");
}

int cmd_simulate(const CommonArgs& args, double duration, const std::string& out_a,
                 const std::string& out_b, const std::string& truth_path) {
    const auto cfg = load_config(args);
    eqkd::LinkSimulator sim(cfg, args.seed, duration);
    eqkd::TagFileWriter wa(out_a, eqkd::Side::Alice, cfg.hash(), args.seed);
    eqkd::TagFileWriter wb(out_b, eqkd::Side::Bob, cfg.hash(), args.seed);
    bool more_a = true, more_b = true;
    while (more_a || more_b) {
        if (more_a) {
            auto blk = sim.next_block(eqkd::Side::Alice);
            if (blk) wa.write_block(*blk);
            else more_a = false;
        }
        if (more_b) {
            auto blk = sim.next_block(eqkd::Side::Bob);
            if (blk) wb.write_block(*blk);
            else more_b = false;
        }
    }

    nlohmann::json truth;
    truth["seed"] = args.seed;
    truth["config_hash"] = cfg.hash();
    truth["duration_s"] = duration;
    truth["offset_ps"] = cfg.clock.offset_ps;
    truth["skew_ps_per_s"] = cfg.clock.skew_ps_per_s;
    truth["skew_random_walk_ps_per_s"] = cfg.clock.skew_random_walk_ps_per_s;
    truth["per_second_offsets_ps"] = sim.clock_path().per_second_offsets();
    std::ofstream tf(truth_path);
    tf << truth.dump(2) << "\n";

    std::cout << "wrote " << wa.count() << " alice tags -> " << out_a << "\n"
              << "wrote " << wb.count() << " bob tags   -> " << out_b << "\n"
              << "truth -> " << truth_path << "\n";
    return kExitOk;
}

void print_stats(const char* who, const eqkd::RunStats& st) {
    std::cout << who << ": phase=" << eqkd::node_phase_name(st.final_phase)
              << " announcements=" << st.announcements << " raw_blocks=" << st.raw_blocks_sealed
              << " verified=" << st.blocks_verified << " failed=" << st.blocks_failed
              << " qber_z=" << st.qber_z_mean << " periods=" << st.periods_confirmed
              << " secret_bits=" << st.secret_bits << " relocks=" << st.relocks << "\n";
}

int run_exit_code(const eqkd::RunStats& a, const eqkd::RunStats& b) {
    if (a.final_phase == eqkd::NodePhase::Aborted || b.final_phase == eqkd::NodePhase::Aborted)
        return kExitProtocol;
    if (a.periods_confirmed == 0 && a.periods_aborted > 0) return kExitSecurity;
    return kExitOk;
}

int cmd_loopback(const CommonArgs& args, double duration, const std::string& key_a,
                 const std::string& key_b, const std::string& metrics_a,
                 const std::string& metrics_b) {
    const auto cfg = load_config(args);
    auto sim = std::make_shared<eqkd::LinkSimulator>(cfg, args.seed, duration);
    auto sim_mutex = std::make_shared<std::mutex>();
    eqkd::SimTagSource src_a(sim, sim_mutex, eqkd::Side::Alice);
    eqkd::SimTagSource src_b(sim, sim_mutex, eqkd::Side::Bob);

    auto pair = eqkd::make_loopback(cfg.network.queue_depth);

    eqkd::NodeOptions opt_a;
    opt_a.cfg = cfg;
    opt_a.run_seed = eqkd::derive_seed(args.seed, "alice-node");
    opt_a.key_path = key_a;
    opt_a.metrics_path = metrics_a;
    opt_a.phase_actuator = [&src_a](double rad) { src_a.set_phase_a(rad); };

    eqkd::NodeOptions opt_b;
    opt_b.cfg = cfg;
    opt_b.run_seed = eqkd::derive_seed(args.seed, "bob-node");
    opt_b.key_path = key_b;
    opt_b.metrics_path = metrics_b;

    eqkd::AliceNode alice(std::move(opt_a), *pair.a, src_a);
    eqkd::BobNode bob(std::move(opt_b), *pair.b, src_b);

    eqkd::RunStats stats_a, stats_b;
    std::thread ta([&] { stats_a = alice.run(); });
    std::thread tb([&] { stats_b = bob.run(); });
    ta.join();
    tb.join();

    print_stats("alice", stats_a);
    print_stats("bob", stats_b);
    return run_exit_code(stats_a, stats_b);
}

int cmd_live(const CommonArgs& args, bool is_alice, const std::string& source_path,
             double duration) {
    const auto cfg = load_config(args);

    std::unique_ptr<eqkd::TagSource> src;
    std::shared_ptr<eqkd::LinkSimulator> sim;
    auto sim_mutex = std::make_shared<std::mutex>();
    if (source_path.empty()) {
        sim = std::make_shared<eqkd::LinkSimulator>(cfg, args.seed, duration);
        src = std::make_unique<eqkd::SimTagSource>(sim, sim_mutex,
                                                   is_alice ? eqkd::Side::Alice : eqkd::Side::Bob);
    } else {
        src = std::make_unique<eqkd::FileTagSource>(source_path);
    }

    std::unique_ptr<eqkd::Transport> tr;
    if (is_alice)
        tr = eqkd::TcpTransport::listen(cfg.network.listen_addr, cfg.network.port);
    else
        tr = eqkd::TcpTransport::connect(cfg.network.connect_host, cfg.network.port);

    eqkd::NodeOptions opt;
    opt.cfg = cfg;
    opt.run_seed = eqkd::derive_seed(args.seed, is_alice ? "alice-node" : "bob-node");
    opt.key_path = is_alice ? "alice.keys" : "bob.keys";
    opt.metrics_path = cfg.network.metrics_path;

    eqkd::RunStats stats;
    if (is_alice) {
        eqkd::AliceNode node(std::move(opt), *tr, *src);
        stats = node.run();
        print_stats("alice", stats);
    } else {
        eqkd::BobNode node(std::move(opt), *tr, *src);
        stats = node.run();
        print_stats("bob", stats);
    }
    if (stats.final_phase == eqkd::NodePhase::Aborted) return kExitProtocol;
    if (stats.periods_confirmed == 0 && stats.periods_aborted > 0) return kExitSecurity;
    return kExitOk;
}

int cmd_model(const CommonArgs& args, double mu_lo, double mu_hi, std::size_t points,
              const std::string& out, bool optimize) {
    const auto cfg = load_config(args);
    if (optimize) {
        const auto opt = eqkd::optimize_mu(cfg, mu_lo, mu_hi);
        std::cout << "mu* = " << opt.mu_star << "\n"
                  << "skr = " << opt.at_optimum.skr << " bps\n"
                  << "qber_z = " << opt.at_optimum.qber_z << "\n"
                  << "qber_x = " << opt.at_optimum.qber_x << "\n"
                  << "raw = " << opt.at_optimum.raw_rate << " bits/s\n";
        return kExitOk;
    }
    const auto grid = eqkd::geometric_grid(mu_lo, mu_hi, points);
    if (out.empty() || out == "-") {
        eqkd::export_scan(cfg, grid, std::cout);
    } else {
        std::ofstream f(out);
        eqkd::export_scan(cfg, grid, f);
        std::cout << "scan -> " << out << "\n";
    }
    return kExitOk;
}

int cmd_bench(const CommonArgs& args, std::size_t n_tags) {
    (void)args;
    std::mt19937_64 rng(12345);
    const std::int64_t span = 10 * eqkd::kPsPerSecond;
    auto make_side = [&](std::int64_t shift) {
        std::vector<eqkd::TimeTag> tags(n_tags);
        for (auto& t : tags)
            t = {static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(span)) + shift,
                 eqkd::Channel::AZ0};
        std::sort(tags.begin(), tags.end(),
                  [](const eqkd::TimeTag& a, const eqkd::TimeTag& b) { return a.time_ps < b.time_ps; });
        return tags;
    };
    const auto a = make_side(0);
    const auto b = make_side(123'456);

    std::vector<std::int64_t> ta(n_tags), tb(n_tags);
    for (std::size_t i = 0; i < n_tags; ++i) {
        ta[i] = a[i].time_ps;
        tb[i] = b[i].time_ps;
    }

    const auto t0 = std::chrono::steady_clock::now();
    const auto hist = eqkd::correlation_histogram(ta, tb, 0, 500'000, 1000);
    const auto t1 = std::chrono::steady_clock::now();
    const auto pairs = eqkd::match_coincidences(a, b, 123'456, 128);
    const auto t2 = std::chrono::steady_clock::now();

    const double dt_hist = std::chrono::duration<double>(t1 - t0).count();
    const double dt_match = std::chrono::duration<double>(t2 - t1).count();
    const double rate =
        static_cast<double>(n_tags) / std::max(1e-9, std::max(dt_hist, dt_match));
    std::cout << "tags/side: " << n_tags << "\n"
              << "histogram: " << dt_hist << " s (" << hist.total_pairs << " pairs in range)\n"
              << "matching:  " << dt_match << " s (" << pairs.size() << " pairs)\n"
              << "throughput: " << rate << " tags/s/side\n";
    return rate >= 1e6 ? kExitOk : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"entanglement-QKD link twin: simulator, nodes, rate model"};
    app.require_subcommand(1);

    CommonArgs args;

    auto* sim = app.add_subcommand("simulate", "generate tag files + truth file");
    add_common(sim, args);
    double duration = 10.0;
    std::string out_a = "alice.tags", out_b = "bob.tags", truth = "truth.json";
    sim->add_option("-d,--duration", duration, "link time to simulate, seconds");
    sim->add_option("--out-a", out_a, "Alice tag file");
    sim->add_option("--out-b", out_b, "Bob tag file");
    sim->add_option("--truth", truth, "truth JSON (clock offsets per second)");

    auto* loop = app.add_subcommand("run-loopback", "both nodes in-process over the full codec");
    add_common(loop, args);
    double loop_duration = 60.0;
    std::string key_a = "alice.keys", key_b = "bob.keys", metrics_a, metrics_b;
    loop->add_option("-d,--duration", loop_duration, "link time, seconds");
    loop->add_option("--key-a", key_a, "Alice key store");
    loop->add_option("--key-b", key_b, "Bob key store");
    loop->add_option("--metrics-a", metrics_a, "Alice metrics NDJSON");
    loop->add_option("--metrics-b", metrics_b, "Bob metrics NDJSON");

    auto* ra = app.add_subcommand("run-alice", "live Alice node (listens for Bob)");
    add_common(ra, args);
    std::string source_a;
    double live_duration = 600.0;
    ra->add_option("--source", source_a, "tag file to replay (default: simulate)");
    ra->add_option("-d,--duration", live_duration, "simulated link time when no source file");

    auto* rb = app.add_subcommand("run-bob", "live Bob node (connects to Alice)");
    add_common(rb, args);
    std::string source_b;
    rb->add_option("--source", source_b, "tag file to replay (default: simulate)");
    rb->add_option("-d,--duration", live_duration, "simulated link time when no source file");

    auto* model = app.add_subcommand("model-skr", "analytic SKR/QBER scan and mu optimization");
    add_common(model, args);
    double mu_lo = 1e-4, mu_hi = 0.3;
    std::size_t points = 100;
    std::string scan_out;
    bool optimize = false;
    model->add_option("--mu-lo", mu_lo);
    model->add_option("--mu-hi", mu_hi);
    model->add_option("-n,--points", points, "scan grid size");
    model->add_option("-o,--out", scan_out, "CSV output (default stdout)");
    model->add_flag("--optimize", optimize, "golden-section search for mu*");

    auto* bench = app.add_subcommand("bench-correlate", "correlation/matching throughput");
    add_common(bench, args);
    std::size_t n_tags = 10'000'000;
    bench->add_option("-n,--tags", n_tags, "tags per side");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) return cmd_simulate(args, duration, out_a, out_b, truth);
        if (loop->parsed())
            return cmd_loopback(args, loop_duration, key_a, key_b, metrics_a, metrics_b);
        if (ra->parsed()) return cmd_live(args, true, source_a, live_duration);
        if (rb->parsed()) return cmd_live(args, false, source_b, live_duration);
        if (model->parsed()) return cmd_model(args, mu_lo, mu_hi, points, scan_out, optimize);
        if (bench->parsed()) return cmd_bench(args, n_tags);
    } catch (const eqkd::ConfigError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitProtocol;
    }
    return kExitOk;
}
