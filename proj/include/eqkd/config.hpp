// Simulator / link configuration: parameter structs with paper-grade defaults,
// validation, derived quantities, and the sectioned key-value config file
// parser with default/file/flag provenance.
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "eqkd/types.hpp"

namespace eqkd {

enum class ConfigErrorKind {
    UnknownKey,
    TypeMismatch,
    EqOneViolation,
    NegativeParameter,
    BadFile,
};

class ConfigError : public std::runtime_error {
public:
    ConfigError(ConfigErrorKind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    ConfigErrorKind kind() const { return kind_; }

private:
    ConfigErrorKind kind_;
};

// Interferometer / Z-basis delay structure (Eq. 1 constraints).
struct CoherenceParams {
    double tau_delay_ps = 1600.0;      // interferometer & Z-basis delay tau
    double tau_coh_single_ps = 0.003;  // single-photon coherence time
    double tau_coh_pump_ps = 3e5;      // pump (pair) coherence time
    double tau_mismatch_ps = 0.0;      // |tau_a - tau_b|
};

struct DetectorParams {
    double efficiency = 0.80;
    double dead_time_ps = 50'000.0;
    double jitter_sigma_ps = 30.0;
    double dark_rate_hz = 100.0;       // per physical detector
    double dispersion_jitter_ps = 0.0; // residual chromatic dispersion term
};

// Source-to-detector losses in dB (Table-1 style: they already include the
// passive beam-splitter probabilities along each path).
struct ChannelLosses {
    double az_db = 12.6;
    double ax1_db = 20.33;
    double ax2_db = 20.46;
    double bz1_db = 15.86;
    double bz2_db = 16.22;
    double bx1_db = 21.83;
    double bx2_db = 22.47;

    double db_for(Detector d) const {
        switch (d) {
            case Detector::AZ: return az_db;
            case Detector::AX1: return ax1_db;
            case Detector::AX2: return ax2_db;
            case Detector::BZ1: return bz1_db;
            case Detector::BZ2: return bz2_db;
            case Detector::BX1: return bx1_db;
            case Detector::BX2: return bx2_db;
        }
        return 0.0;
    }
};

// Bob's clock relative to Alice's (Alice is the reference).
struct ClockModelParams {
    double offset_ps = 0.0;
    double skew_ps_per_s = 100.0;           // rubidium-clock case
    double skew_random_walk_ps_per_s = 1.0; // diffusion of the skew
};

struct SourceParams {
    double mu = 1e-3;            // mean pairs per coincidence window
    double window_ps = 128.0;    // reference window for mu; also the coincidence window
    double visibility = 0.997;
    double basis_prob_z = 0.5;
    double phase_a_rad = 0.0;
    double phase_b_rad = 0.0;
    double intrinsic_error_z = 0.003; // residual Z errors (timing leakage etc.)
    double light_on_time_s = 0.0;     // attenuator unblock time
    // Alice Z analyser: the paper's single-detector electrical-delay scheme, or
    // a conventional passive two-path analyser (for the sifting-gain check).
    bool alice_z_passive = false;
};

struct DistillationParams {
    std::uint32_t n_ec = 16384; // correction block size (bits)
    std::uint32_t k_blocks = 100;
    double f_ec_target = 1.06;
    double eps_pe = 1e-10;
    double eps_hash = 1e-10;
    double qber_abort = 0.11;
    double cascade_q_bootstrap = 0.05;
    std::uint32_t x_stats_floor = 100; // min X events per block for feedback

    std::uint64_t n_z() const { return std::uint64_t{n_ec} * k_blocks; }
};

struct NetworkParams {
    std::string listen_addr = "0.0.0.0";
    std::uint16_t port = 44020;
    std::string connect_host = "127.0.0.1";
    std::uint32_t queue_depth = 8;
    std::string metrics_path;
    double rate_gate_factor = 10.0;
    std::uint32_t rate_gate_consecutive_ms = 50;
};

struct SecurityParams {
    std::string mac_algo = "blake2b";
    std::string mac_key_hex = "000102030405060708090a0b0c0d0e0f";
};

enum class Provenance { Default, File, Flag };

struct SimConfig {
    SourceParams source;
    CoherenceParams coherence;
    ChannelLosses losses;
    DetectorParams detectors;
    ClockModelParams clock;
    DistillationParams distill;
    NetworkParams network;
    SecurityParams security;

    std::map<std::string, Provenance> provenance; // "section.key" -> origin

    // ---- derived quantities (valid after validate()) ----
    double pair_rate_per_s = 0.0;                  // mu / window
    std::array<double, kNumDetectors> transmittance{};   // 10^(-dB/10)
    std::array<double, kNumDetectors> detect_prob{};     // transmittance * efficiency
    double sigma_rel_ps = 0.0;                     // sqrt(2)*(jitter^2+dispersion^2)^.5
    double capture_fraction = 0.0;                 // P(|delta| <= window/2)
    double visibility_effective = 0.0;             // after tau-mismatch degradation

    // Throws ConfigError on invariant violation; fills the derived fields.
    void validate();

    std::uint64_t hash() const;          // stable hash of the canonical dump
    std::string dump(bool with_provenance) const;
};

// Spec-level operation: returns the config with derived quantities computed,
// or throws ConfigError.
SimConfig validate_config(SimConfig cfg);

// Parse a sectioned key-value file (INI-style) over the defaults, then apply
// "section.key=value" override strings (flag provenance). Empty path = defaults.
SimConfig parse_config(const std::string& path, const std::vector<std::string>& overrides = {});
SimConfig parse_config_text(const std::string& text, const std::vector<std::string>& overrides = {});

} // namespace eqkd
