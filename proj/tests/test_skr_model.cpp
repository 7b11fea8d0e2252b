#include <doctest.h>

#include <cmath>
#include <sstream>

#include "eqkd/sim_link.hpp"
#include "eqkd/skr_model.hpp"
#include "eqkd/timetag.hpp"

using namespace eqkd;

TEST_CASE("qber tends to 1/2 when darks dominate") {
    // the true-coincidence rate falls linearly in mu while dark-dark
    // accidentals stay constant, so deep enough down qber -> 1/2
    const auto cfg = parse_config_text("");
    const auto p = predict(1e-14, cfg);
    CHECK(p.qber_z > 0.45);
    CHECK(p.skr == 0.0);
}

TEST_CASE("qber_z strictly increases with mu; SKR is unimodal with an interior peak") {
    const auto cfg = parse_config_text("");
    const auto grid = geometric_grid(1e-4, 0.3, 120);
    std::vector<double> qz, skr;
    for (const double mu : grid) {
        const auto p = predict(mu, cfg);
        qz.push_back(p.qber_z);
        skr.push_back(p.skr);
    }
    for (std::size_t i = 1; i < qz.size(); ++i) CHECK(qz[i] > qz[i - 1]);
    const auto imax = static_cast<std::size_t>(
        std::max_element(skr.begin(), skr.end()) - skr.begin());
    CHECK(imax > 0);
    CHECK(imax < skr.size() - 1);
    for (std::size_t i = 1; i <= imax; ++i) CHECK(skr[i] >= skr[i - 1]);
    for (std::size_t i = imax + 1; i < skr.size(); ++i) CHECK(skr[i] <= skr[i - 1]);
}

TEST_CASE("optimum sits at the 5% QBERz operating point") {
    const auto cfg = parse_config_text("");
    const auto opt = optimize_mu(cfg);
    CHECK(opt.at_optimum.qber_z > 0.04);
    CHECK(opt.at_optimum.qber_z < 0.06);
    CHECK(opt.at_optimum.skr > 0.0);
}

TEST_CASE("no accidental penalty makes SKR monotone: optimum at the range top") {
    // negligible pair rate range with darks off: qber ~ intrinsic only
    const auto cfg = parse_config_text("[detectors]\ndark_rate_hz = 0\n");
    const auto opt = optimize_mu(cfg, 1e-6, 1e-4);
    CHECK(opt.mu_star == doctest::Approx(1e-4).epsilon(0.02));
}

TEST_CASE("mu* invariant when loss moves between the two sides") {
    // +3 dB on all of Alice, -3 dB on all of Bob keeps every product
    // eta_A * eta_B and s_A * s_B fixed (darks off), so the curve is identical
    const auto base = parse_config_text("[detectors]\ndark_rate_hz = 0\n");
    const auto tilted = parse_config_text(
        "[detectors]\ndark_rate_hz = 0\n"
        "[losses]\naz_db = 15.6\nax1_db = 23.33\nax2_db = 23.46\n"
        "bz1_db = 12.86\nbz2_db = 13.22\nbx1_db = 18.83\nbx2_db = 19.47\n");
    for (const double mu : {0.005, 0.02, 0.05, 0.1}) {
        const auto a = predict(mu, base);
        const auto b = predict(mu, tilted);
        CHECK(a.skr == doctest::Approx(b.skr).epsilon(1e-9));
        CHECK(a.qber_z == doctest::Approx(b.qber_z).epsilon(1e-9));
    }
    const auto oa = optimize_mu(base);
    const auto ob = optimize_mu(tilted);
    CHECK(oa.mu_star == doctest::Approx(ob.mu_star).epsilon(0.01));
}

TEST_CASE("export_scan formatting and consistency") {
    const auto cfg = parse_config_text("");
    const auto grid = geometric_grid(1e-3, 1e-1, 100);

    std::ostringstream os;
    export_scan(cfg, grid, os);
    const std::string csv = os.str();
    std::size_t rows = 0;
    for (const char c : csv)
        if (c == '\n') ++rows;
    CHECK(rows == 101); // header + 100 points
    CHECK(csv.rfind("mu,skr_bps,qber_z,qber_x\n", 0) == 0);

    std::ostringstream empty;
    export_scan(cfg, std::vector<double>{}, empty);
    CHECK(empty.str() == "mu,skr_bps,qber_z,qber_x\n");

    // first row equals a pointwise predict() call
    std::istringstream is(csv);
    std::string line;
    std::getline(is, line);
    std::getline(is, line);
    const auto p = predict(grid[0], cfg);
    std::istringstream row(line);
    double mu, skr, qz, qx;
    char comma;
    row >> mu >> comma >> skr >> comma >> qz >> comma >> qx;
    CHECK(mu == doctest::Approx(grid[0]));
    CHECK(skr == doctest::Approx(p.skr).epsilon(1e-6));
    CHECK(qz == doctest::Approx(p.qber_z).epsilon(1e-6));
}

TEST_CASE("model agrees with the simulator on rate and error observables") {
    // attenuated link keeps detector loading negligible, where the saturation-
    // free model is valid
    const std::string lossy =
        "[source]\nmu = 0.02\n"
        "[losses]\naz_db = 28.6\nax1_db = 36.33\nax2_db = 36.46\n"
        "bz1_db = 31.86\nbz2_db = 32.22\nbx1_db = 37.83\nbx2_db = 38.47\n"
        "[clock]\noffset_ps = 0\nskew_ps_per_s = 0\nskew_random_walk_ps_per_s = 0\n";
    for (const double mu : {0.01, 0.03, 0.05}) {
        auto cfg = parse_config_text(lossy);
        cfg.source.mu = mu;
        cfg.validate();
        const auto pred = predict(mu, cfg);

        const double dur = 4.0;
        const auto run = simulate(dur, cfg, 1234);
        std::vector<TimeTag> az, bz;
        for (const auto& blk : run.alice)
            for (const auto& t : blk.tags)
                if (!channel_is_basis_x(t.channel)) az.push_back(t);
        for (const auto& blk : run.bob)
            for (const auto& t : blk.tags)
                if (!channel_is_basis_x(t.channel)) bz.push_back(t);
        const auto pairs = match_coincidences(az, bz, 0, 128);
        const double rate = static_cast<double>(pairs.size()) / dur;

        std::uint64_t errors = 0;
        for (const auto& p : pairs)
            if (channel_bit(p.alice_channel) != channel_bit(p.bob_channel)) ++errors;
        const double qber = static_cast<double>(errors) / static_cast<double>(pairs.size());

        CHECK(std::abs(rate - pred.raw_rate) / pred.raw_rate < 0.30);
        // the simulator has no intrinsic-error mechanism; compare against the
        // accidental-driven part of the model within the 30% band
        const double pred_qber_accidental =
            pred.accidental_z / 2.0 / (pred.coincidence_z + pred.accidental_z);
        CHECK(std::abs(qber - pred_qber_accidental) <
              0.30 * pred.qber_z + 3.0 * std::sqrt(qber / static_cast<double>(pairs.size() + 1)));
    }
}
