// Basis reconciliation: Bob's public announcements, Alice's time-and-basis
// matching, raw-key accumulation into 16384-bit correction blocks, X-basis
// error statistics and the interferometer phase feedback.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "eqkd/bits.hpp"
#include "eqkd/types.hpp"

namespace eqkd {

struct ClockNotLocked : std::runtime_error {
    ClockNotLocked() : std::runtime_error("clock estimate not locked") {}
};
struct InsufficientStatistics : std::runtime_error {
    InsufficientStatistics() : std::runtime_error("too few X coincidences in block") {}
};

// One announced detection: time in Bob's clock, basis, and the outcome bit
// only for the X basis. Z outcomes are never announced.
struct AnnouncedEvent {
    std::int64_t time_ps = 0;
    bool basis_x = false;
    std::uint8_t x_bit = 0; // meaningful only when basis_x
};

struct Announcement {
    std::uint64_t block_index = 0;
    std::int64_t block_start_ps = 0;
    std::vector<AnnouncedEvent> events; // sorted by time
};

// Build Bob's announcement for a sealed acquisition block (timestamps stay in
// Bob's clock; Alice applies her ClockEstimate when matching).
Announcement build_announcement(const AcquisitionBlock& block);

struct SiftResponse {
    std::uint64_t block_index = 0;
    std::vector<std::uint32_t> z_match_indices; // strictly increasing
};

struct XCoincidence {
    std::uint8_t alice_bit = 0;
    std::uint8_t bob_bit = 0;
};

struct XBasisStats {
    std::uint64_t correlated = 0;
    std::uint64_t anticorrelated = 0;
    std::uint64_t total() const { return correlated + anticorrelated; }
    double qber_x() const {
        return total() ? static_cast<double>(anticorrelated) / static_cast<double>(total()) : 0.0;
    }
};

struct SiftOutcome {
    SiftResponse response;
    std::vector<std::uint8_t> alice_z_bits; // one per response index, same order
    std::vector<XCoincidence> x_outcomes;   // central-peak X-X coincidences
};

// Alice-side matching of one announcement against her own tags. Z-Z matches
// define key bits (her logical copy AZ0/AZ1 that matched names Bob's bit),
// X-X zero-delay matches feed the QBERx statistics, mixed-basis matches are
// discarded. Throws ClockNotLocked unless the estimate is locked.
SiftOutcome sift_match(std::span<const TimeTag> alice_tags, const Announcement& ann,
                       const ClockEstimate& clock, std::int64_t window_ps);

// qber_x over one correction-block period; throws InsufficientStatistics when
// fewer than min_count outcomes are available.
XBasisStats estimate_qber_x(std::span<const XCoincidence> outcomes, std::uint32_t min_count);

// Sealed 16384-bit raw key block.
struct RawKeyBlock {
    std::uint64_t id = 0;
    BitVec bits;
    std::vector<std::uint64_t> source_blocks; // announcement block indices
};

class RawBlockAccumulator {
public:
    explicit RawBlockAccumulator(std::uint32_t n_ec) : n_ec_(n_ec), pending_(0) {}

    // Append sifted bits (announcement order); returns any blocks sealed.
    std::vector<RawKeyBlock> push(std::span<const std::uint8_t> bits, std::uint64_t source_block);
    std::size_t pending_bits() const { return pending_.size(); }
    std::uint64_t sealed_count() const { return next_id_; }

private:
    std::uint32_t n_ec_;
    BitVec pending_;
    std::vector<std::uint64_t> pending_sources_;
    std::uint64_t next_id_ = 0;
};

// Dither-and-descend controller for the interferometer phase: alternates +/-
// delta probes, estimates the qber_x slope and steps downhill. Commands are
// wrapped into (-pi, pi] and rate-limited.
class PhaseController {
public:
    static constexpr double kDitherRad = 0.05;
    static constexpr double kGain = 0.5;
    static constexpr double kMaxStepRad = 0.3;

    explicit PhaseController(double initial_phase = 0.0) : base_(initial_phase) {}

    // One invocation per correction block with the qber_x measured for the
    // previous command (nullopt = insufficient statistics: hold).
    double step(std::optional<double> qber_x);

    double command() const { return wrap(base_ + (probe_sign_ > 0 ? kDitherRad : -kDitherRad)); }
    double base_phase() const { return base_; }

private:
    static double wrap(double phi);

    double base_;
    int probe_sign_ = 1;     // sign of the dither applied to the *next* block
    bool have_plus_ = false; // first half of the probe pair measured
    double q_plus_ = 0.0;
};

} // namespace eqkd
