#include <doctest.h>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/poisson.hpp>
#include <cmath>
#include <map>

#include "eqkd/sim_link.hpp"
#include "eqkd/timetag.hpp"

using namespace eqkd;

namespace {

SimConfig base_config(const std::string& extra = "") {
    return parse_config_text("[clock]\noffset_ps = 0\nskew_ps_per_s = 0\n"
                             "skew_random_walk_ps_per_s = 0\n" +
                             extra);
}

std::vector<TimeTag> channel_tags(const std::vector<TimeTag>& tags, Channel c) {
    std::vector<TimeTag> out;
    for (const auto& t : tags)
        if (t.channel == c) out.push_back(t);
    return out;
}

} // namespace

TEST_CASE("pair emissions: poisson count at the reference rate") {
    SourceParams src;
    src.mu = 1.28e-4; // 1e6 pairs/s at the 128 ps window
    src.window_ps = 128.0;
    const auto em = generate_pair_emissions(1.0, src, 42);
    CHECK(std::abs(static_cast<double>(em.size()) - 1e6) < 3.0 * std::sqrt(1e6));
    CHECK(std::is_sorted(em.begin(), em.end()));

    // reproducibility and the empty case
    CHECK(generate_pair_emissions(1.0, src, 42) == em);
    src.mu = 0.0;
    CHECK(generate_pair_emissions(1.0, src, 42).empty());
}

TEST_CASE("pair emissions: disjoint-interval counts pass a chi-square test") {
    SourceParams src;
    src.mu = 1.28e-4;
    src.window_ps = 128.0;
    const auto em = generate_pair_emissions(1.0, src, 202);
    // 1000 intervals of 1 ms: expected lambda = 1000 per interval
    std::vector<int> counts(1000, 0);
    for (const auto t : em) {
        const auto k = static_cast<std::size_t>(t / 1'000'000'000);
        if (k < counts.size()) ++counts[k];
    }
    const double lambda = 1e6 / 1000.0;
    boost::math::poisson_distribution<double> pois(lambda);
    // group the tails so every category expects >= 5 counts
    const int lo = static_cast<int>(lambda - 4 * std::sqrt(lambda));
    const int hi = static_cast<int>(lambda + 4 * std::sqrt(lambda));
    std::map<int, int> observed;
    for (const int c : counts) observed[std::clamp(c, lo, hi)]++;
    double chi2 = 0.0;
    int dof = -1;
    for (int k = lo; k <= hi; ++k) {
        double p = boost::math::pdf(pois, k);
        if (k == lo) p = boost::math::cdf(pois, lo);
        if (k == hi) p = 1.0 - boost::math::cdf(pois, hi - 1);
        const double expect = 1000.0 * p;
        if (expect < 1e-9) continue;
        const double obs = observed.count(k) ? observed[k] : 0;
        chi2 += (obs - expect) * (obs - expect) / expect;
        ++dof;
    }
    boost::math::chi_squared_distribution<double> dist(dof);
    const double p_value = 1.0 - boost::math::cdf(dist, chi2);
    CHECK(p_value > 0.001);
}

TEST_CASE("route_and_detect: singles rates match transmittance budgets") {
    // dead time off: saturation has its own test below
    auto cfg = base_config("[source]\nmu = 0.001\n[detectors]\ndead_time_ps = 0\n");
    const auto em = generate_pair_emissions(1.0, cfg.source, 7);
    const auto routed = route_and_detect(em, cfg, 1.0, 7);

    const double R = cfg.pair_rate_per_s;
    auto expect_rate = [&](Detector d) {
        return R * cfg.detect_prob[static_cast<int>(d)] + cfg.detectors.dark_rate_hz;
    };
    auto check_channel = [&](const std::vector<TimeTag>& tags, Channel c, Detector d) {
        const double n = static_cast<double>(channel_tags(tags, c).size());
        const double mu = expect_rate(d);
        CHECK(std::abs(n - mu) < 4.0 * std::sqrt(mu) + 4.0);
    };
    check_channel(routed.alice, Channel::AZ0, Detector::AZ);
    check_channel(routed.alice, Channel::AZ1, Detector::AZ); // duplicated copy
    check_channel(routed.alice, Channel::AX1, Detector::AX1);
    check_channel(routed.alice, Channel::AX2, Detector::AX2);
    check_channel(routed.bob, Channel::BZ1, Detector::BZ1);
    check_channel(routed.bob, Channel::BZ2, Detector::BZ2);
    check_channel(routed.bob, Channel::BX1, Detector::BX1);
    check_channel(routed.bob, Channel::BX2, Detector::BX2);
}

TEST_CASE("route_and_detect: dead time is enforced per physical detector") {
    auto cfg = base_config("[source]\nmu = 0.02\n");
    const auto em = generate_pair_emissions(0.2, cfg.source, 11);
    const auto routed = route_and_detect(em, cfg, 0.2, 11);
    const auto dead = static_cast<std::int64_t>(cfg.detectors.dead_time_ps);
    for (const Channel c : {Channel::AZ0, Channel::AZ1, Channel::AX1, Channel::AX2}) {
        const auto tags = channel_tags(routed.alice, c);
        for (std::size_t i = 1; i < tags.size(); ++i)
            CHECK(tags[i].time_ps - tags[i - 1].time_ps >= dead);
    }
    for (const Channel c : {Channel::BZ1, Channel::BZ2, Channel::BX1, Channel::BX2}) {
        const auto tags = channel_tags(routed.bob, c);
        for (std::size_t i = 1; i < tags.size(); ++i)
            CHECK(tags[i].time_ps - tags[i - 1].time_ps >= dead);
    }
    // the electrical AZ1 copy rides tau behind AZ0, tag for tag
    const auto az0 = channel_tags(routed.alice, Channel::AZ0);
    const auto az1 = channel_tags(routed.alice, Channel::AZ1);
    REQUIRE(az0.size() == az1.size());
    const auto tau = static_cast<std::int64_t>(cfg.coherence.tau_delay_ps);
    for (std::size_t i = 0; i < az0.size(); ++i)
        CHECK(az1[i].time_ps - az0[i].time_ps == tau);
}

TEST_CASE("route_and_detect: Z-Z coincidence peak has the configured width") {
    auto cfg = base_config("[source]\nmu = 0.002\n[detectors]\ndark_rate_hz = 0\n");
    const auto em = generate_pair_emissions(2.0, cfg.source, 13);
    const auto routed = route_and_detect(em, cfg, 2.0, 13);
    std::vector<TimeTag> az, bz;
    for (const auto& t : routed.alice)
        if (!channel_is_basis_x(t.channel)) az.push_back(t);
    for (const auto& t : routed.bob)
        if (!channel_is_basis_x(t.channel)) bz.push_back(t);
    // +/-150 ps window: wide enough for the ~43 ps relative sigma, narrow
    // enough that flat accidentals do not inflate the width estimate
    const auto pairs = match_coincidences(az, bz, 0, 300);
    REQUIRE(pairs.size() > 5000);
    double s1 = 0, s2 = 0;
    for (const auto& p : pairs) {
        s1 += static_cast<double>(p.residual_ps);
        s2 += static_cast<double>(p.residual_ps) * static_cast<double>(p.residual_ps);
    }
    const double mean = s1 / static_cast<double>(pairs.size());
    const double sigma = std::sqrt(s2 / static_cast<double>(pairs.size()) - mean * mean);
    const double fwhm = 2.3548 * sigma;
    CHECK(fwhm > 90.0);
    CHECK(fwhm < 110.0);
    CHECK(std::abs(mean) < 5.0);
}

TEST_CASE("route_and_detect: central-peak X statistics follow the interference law") {
    // strong X channels so the joint statistics converge quickly
    auto cfg = base_config(
        "[source]\nmu = 0.0005\n"
        "[losses]\naz_db = inf\nbz1_db = inf\nbz2_db = inf\n"
        "ax1_db = 3.1\nax2_db = 3.1\nbx1_db = 3.1\nbx2_db = 3.1\n"
        "[detectors]\ndark_rate_hz = 0\n");

    auto measure = [&](double phi_a, double& frac_anti, double& n_cc) {
        cfg.source.phase_a_rad = phi_a;
        cfg.validate();
        const auto em = generate_pair_emissions(0.5, cfg.source, 17);
        const auto routed = route_and_detect(em, cfg, 0.5, 17);
        std::map<std::uint64_t, std::pair<int, int>> joint; // pair -> (a bit+1, b bit+1)
        for (std::size_t i = 0; i < routed.alice.size(); ++i) {
            if (routed.alice_info[i].central)
                joint[routed.alice_info[i].pair_id].first = channel_bit(routed.alice[i].channel) + 1;
        }
        for (std::size_t i = 0; i < routed.bob.size(); ++i) {
            if (routed.bob_info[i].central)
                joint[routed.bob_info[i].pair_id].second = channel_bit(routed.bob[i].channel) + 1;
        }
        std::uint64_t corr = 0, anti = 0;
        for (const auto& [id, ab] : joint) {
            if (!ab.first || !ab.second) continue;
            if (ab.first == ab.second) ++corr;
            else ++anti;
        }
        n_cc = static_cast<double>(corr + anti);
        frac_anti = n_cc > 0 ? static_cast<double>(anti) / n_cc : 0.0;
    };

    double anti = 0, n = 0;
    measure(0.0, anti, n);
    REQUIRE(n > 1e5);
    const double expect0 = (1.0 - 0.997) / 2.0; // 0.0015
    CHECK(std::abs(anti - expect0) < 3.0 * std::sqrt(expect0 * (1 - expect0) / n) + 1e-4);

    measure(M_PI / 2.0, anti, n);
    CHECK(std::abs(anti - 0.5) < 3.0 * std::sqrt(0.25 / n));

    measure(M_PI, anti, n);
    CHECK(anti > 0.99);
}

TEST_CASE("apply_clock transforms") {
    std::vector<TimeTag> events;
    for (int i = 0; i < 100; ++i) events.push_back({i * 1'000'000'000LL, Channel::BZ1});

    SUBCASE("identity when everything is zero") {
        ClockModelParams params;
        params.offset_ps = 0;
        params.skew_ps_per_s = 0;
        params.skew_random_walk_ps_per_s = 0;
        ClockPath path(params, 1, 1.0);
        const auto out = apply_clock(events, path);
        for (std::size_t i = 0; i < events.size(); ++i) CHECK(out[i] == events[i]);
    }
    SUBCASE("pure offset shifts exactly") {
        ClockModelParams params;
        params.offset_ps = 1'000'000;
        params.skew_ps_per_s = 0;
        params.skew_random_walk_ps_per_s = 0;
        ClockPath path(params, 1, 1.0);
        const auto out = apply_clock(events, path);
        for (std::size_t i = 0; i < events.size(); ++i)
            CHECK(out[i].time_ps == events[i].time_ps + 1'000'000);
    }
    SUBCASE("deterministic skew integrates to skew * t") {
        ClockModelParams params;
        params.offset_ps = 0;
        params.skew_ps_per_s = 100;
        params.skew_random_walk_ps_per_s = 0;
        ClockPath path(params, 1, 11.0);
        CHECK(path.offset_at(10 * kPsPerSecond) == doctest::Approx(1000.0).epsilon(1e-9));
    }
    SUBCASE("random walk stays near the deterministic ramp") {
        ClockModelParams params;
        params.offset_ps = 0;
        params.skew_ps_per_s = 100;
        params.skew_random_walk_ps_per_s = 1;
        ClockPath path(params, 5, 11.0);
        CHECK(std::abs(path.offset_at(10 * kPsPerSecond) - 1000.0) < 200.0);
    }
}

TEST_CASE("simulate: block partition arithmetic") {
    auto cfg = base_config("[source]\nmu = 1e-5\n");
    const auto run = simulate(1.0, cfg, 23);
    CHECK(run.alice.size() == 10);
    CHECK(run.bob.size() == 10);
    for (std::size_t i = 0; i < run.alice.size(); ++i) {
        CHECK(run.alice[i].index == i);
        CHECK(run.alice[i].start_ps == static_cast<std::int64_t>(i) * kBlockSpanPs);
        for (const auto& t : run.alice[i].tags) {
            CHECK(t.time_ps >= run.alice[i].start_ps);
            CHECK(t.time_ps < run.alice[i].start_ps + kBlockSpanPs);
        }
        CHECK(std::is_sorted(run.alice[i].tags.begin(), run.alice[i].tags.end(),
                             [](const TimeTag& a, const TimeTag& b) {
                                 return a.time_ps < b.time_ps;
                             }));
    }
}

TEST_CASE("simulate: infinite losses leave only dark counts") {
    auto cfg = base_config(
        "[source]\nmu = 0.001\n"
        "[losses]\naz_db = inf\nax1_db = inf\nax2_db = inf\nbz1_db = inf\n"
        "bz2_db = inf\nbx1_db = inf\nbx2_db = inf\n");
    const auto run = simulate(2.0, cfg, 29);
    std::size_t alice_n = 0, bob_n = 0;
    for (const auto& b : run.alice) alice_n += b.tags.size();
    for (const auto& b : run.bob) bob_n += b.tags.size();
    // Alice: AZ darks duplicated (2x100/s) + AX1 + AX2; Bob: 4 detectors
    CHECK(std::abs(static_cast<double>(alice_n) - 800.0) < 4.0 * std::sqrt(800.0));
    CHECK(std::abs(static_cast<double>(bob_n) - 800.0) < 4.0 * std::sqrt(800.0));
}

TEST_CASE("simulate agrees with route_and_detect statistically") {
    auto cfg = base_config("[source]\nmu = 0.001\n");
    const auto run = simulate(1.0, cfg, 31);
    const auto em = generate_pair_emissions(1.0, cfg.source, 77);
    const auto routed = route_and_detect(em, cfg, 1.0, 77);
    std::size_t stream_n = 0;
    for (const auto& b : run.alice) stream_n += b.tags.size();
    const double direct_n = static_cast<double>(routed.alice.size());
    CHECK(std::abs(static_cast<double>(stream_n) - direct_n) < 5.0 * std::sqrt(direct_n));
}

TEST_CASE("simulate: bob blocks stay consistent under the drifting clock") {
    auto cfg = parse_config_text(
        "[source]\nmu = 0.0005\n"
        "[clock]\noffset_ps = 1e6\nskew_ps_per_s = 100\nskew_random_walk_ps_per_s = 1\n");
    const auto run = simulate(1.0, cfg, 37);
    REQUIRE(run.bob.size() >= 10);
    for (const auto& blk : run.bob) {
        for (const auto& t : blk.tags) {
            CHECK(t.time_ps >= blk.start_ps);
            CHECK(t.time_ps < blk.start_ps + blk.span_ps);
        }
    }
    CHECK(run.truth_offsets_per_s.size() >= 2);
    CHECK(run.truth_offsets_per_s[0] == doctest::Approx(1e6).epsilon(1e-6));
}

TEST_CASE("asymmetric vs passive Alice-Z analyser: sifted rate doubles") {
    // identical total Alice-Z transmittance; count zero-delay Z-Z matches
    auto run_scheme = [&](bool passive) {
        auto cfg = base_config(std::string("[source]\nmu = 0.002\nalice_z_passive = ") +
                               (passive ? "true" : "false") +
                               "\n[detectors]\ndark_rate_hz = 0\n");
        const auto em = generate_pair_emissions(2.0, cfg.source, 41);
        const auto routed = route_and_detect(em, cfg, 2.0, 41);
        std::vector<TimeTag> az, bz;
        for (const auto& t : routed.alice)
            if (!channel_is_basis_x(t.channel)) az.push_back(t);
        for (const auto& t : routed.bob)
            if (!channel_is_basis_x(t.channel)) bz.push_back(t);
        return static_cast<double>(match_coincidences(az, bz, 0, 128).size());
    };
    const double asym = run_scheme(false);
    const double passive = run_scheme(true);
    REQUIRE(passive > 1000);
    CHECK(asym / passive == doctest::Approx(2.0).epsilon(0.05));
}
