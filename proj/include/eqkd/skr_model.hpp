// Closed-form singles / coincidence / QBER / secret-rate model as a function
// of the pair-generation probability mu, with scan and optimizer.
#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "eqkd/config.hpp"

namespace eqkd {

struct RatePrediction {
    double mu = 0.0;
    double pair_rate = 0.0;          // pairs/s
    double singles[kNumDetectors]{}; // per physical detector, 1/s
    double coincidence_z = 0.0;      // true Z-Z coincidences, 1/s
    double accidental_z = 0.0;       // Z-Z accidentals inside the window, 1/s
    double coincidence_x = 0.0;      // central-peak X-X coincidences, 1/s
    double accidental_x = 0.0;
    double qber_z = 0.0;
    double qber_x = 0.0;
    double raw_rate = 0.0;           // sifted Z bits/s (true + accidental)
    double secret_fraction = 0.0;    // asymptotic 1 - h(qx) - f_ec h(qz), floored at 0
    double skr = 0.0;                // raw_rate * secret_fraction
};

// Asymptotic rate prediction. Detector saturation (dead time) is deliberately
// not part of this model; it is a design tool for choosing mu.
RatePrediction predict(double mu, const SimConfig& cfg);

struct MuOptimum {
    double mu_star = 0.0;
    RatePrediction at_optimum;
};

// Golden-section search for the SKR maximum over [mu_lo, mu_hi], to relative
// tolerance 1e-3 (bracketed first on a coarse grid; SKR(mu) is unimodal).
MuOptimum optimize_mu(const SimConfig& cfg, double mu_lo = 1e-4, double mu_hi = 0.3);

// CSV rows "mu,skr_bps,qber_z,qber_x" for the given grid (header included).
void export_scan(const SimConfig& cfg, std::span<const double> mu_grid, std::ostream& os);

std::vector<double> geometric_grid(double lo, double hi, std::size_t n);

} // namespace eqkd
