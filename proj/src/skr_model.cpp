#include "eqkd/skr_model.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "eqkd/distill.hpp"

namespace eqkd {

RatePrediction predict(double mu, const SimConfig& cfg) {
    RatePrediction p;
    p.mu = mu;
    const double w = cfg.source.window_ps * 1e-12; // s
    const double R = mu / cfg.source.window_ps * 1e12;
    p.pair_rate = R;
    const double dark = cfg.detectors.dark_rate_hz;
    const auto& t = cfg.detect_prob;
    auto idx = [](Detector d) { return static_cast<int>(d); };

    for (int i = 0; i < kNumDetectors; ++i) p.singles[i] = R * t[i] + dark;

    const double s_az = p.singles[idx(Detector::AZ)];
    const double s_bz = p.singles[idx(Detector::BZ1)] + p.singles[idx(Detector::BZ2)];
    const double s_ax = p.singles[idx(Detector::AX1)] + p.singles[idx(Detector::AX2)];
    const double s_bx = p.singles[idx(Detector::BX1)] + p.singles[idx(Detector::BX2)];

    const double t_bz = t[idx(Detector::BZ1)] + t[idx(Detector::BZ2)];
    const double t_ax = t[idx(Detector::AX1)] + t[idx(Detector::AX2)];
    const double t_bx = t[idx(Detector::BX1)] + t[idx(Detector::BX2)];

    p.coincidence_z = R * t[idx(Detector::AZ)] * t_bz * cfg.capture_fraction;
    // Alice's Z detector is read out on two logical channels, so every Bob-Z
    // single can accidentally pair with either copy.
    p.accidental_z = 2.0 * s_az * s_bz * w;
    // Only the short-short / long-long half of X-X pairs lands in the central peak.
    p.coincidence_x = R * t_ax * t_bx * 0.5 * cfg.capture_fraction;
    p.accidental_x = s_ax * s_bx * w;

    const double cz = p.coincidence_z, az = p.accidental_z;
    const double cx = p.coincidence_x, ax = p.accidental_x;
    const double e_int = cfg.source.intrinsic_error_z;
    const double phi = cfg.source.phase_a_rad + cfg.source.phase_b_rad;
    const double e_x = (1.0 - cfg.visibility_effective * std::cos(phi)) / 2.0;

    p.qber_z = (cz + az) > 0 ? (az / 2 + e_int * cz) / (cz + az) : 0.5;
    p.qber_x = (cx + ax) > 0 ? (ax / 2 + e_x * cx) / (cx + ax) : 0.5;
    p.qber_z = std::min(p.qber_z, 0.5);
    p.qber_x = std::min(p.qber_x, 0.5);

    p.raw_rate = cz + az;
    if (p.qber_z <= cfg.distill.qber_abort) {
        p.secret_fraction = std::max(
            0.0, 1.0 - binary_entropy(p.qber_x) -
                     cfg.distill.f_ec_target * binary_entropy(p.qber_z));
    } else {
        p.secret_fraction = 0.0;
    }
    p.skr = p.raw_rate * p.secret_fraction;
    return p;
}

std::vector<double> geometric_grid(double lo, double hi, std::size_t n) {
    std::vector<double> g(n);
    for (std::size_t i = 0; i < n; ++i)
        g[i] = lo * std::pow(hi / lo, n > 1 ? static_cast<double>(i) / (n - 1) : 0.0);
    return g;
}

MuOptimum optimize_mu(const SimConfig& cfg, double mu_lo, double mu_hi) {
    // Bracket the maximum on a coarse grid first; the plain golden-section
    // recursion can wander into the flat SKR=0 tail otherwise.
    const auto grid = geometric_grid(mu_lo, mu_hi, 160);
    std::size_t imax = 0;
    double best = -1.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double s = predict(grid[i], cfg).skr;
        if (s > best) {
            best = s;
            imax = i;
        }
    }
    double a = grid[imax > 0 ? imax - 1 : 0];
    double b = grid[std::min(grid.size() - 1, imax + 1)];

    const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
    while ((b - a) > 1e-3 * (a + b) / 2.0) {
        const double c = b - gr * (b - a);
        const double d = a + gr * (b - a);
        if (predict(c, cfg).skr > predict(d, cfg).skr) b = d;
        else a = c;
    }
    MuOptimum opt;
    opt.mu_star = (a + b) / 2.0;
    opt.at_optimum = predict(opt.mu_star, cfg);
    return opt;
}

void export_scan(const SimConfig& cfg, std::span<const double> mu_grid, std::ostream& os) {
    os << "mu,skr_bps,qber_z,qber_x\n";
    os.precision(10);
    for (const double mu : mu_grid) {
        const auto p = predict(mu, cfg);
        os << mu << ',' << p.skr << ',' << p.qber_z << ',' << p.qber_x << '\n';
    }
}

} // namespace eqkd
