// Timestamp-level simulator of the entangled-pair link: SPDC source, passive
// analysers, channel losses, detectors (jitter, dead time, darks) and the
// drifting remote clock. Produces statistically faithful Alice/Bob tag
// streams in 100 ms acquisition blocks.
#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "eqkd/config.hpp"
#include "eqkd/types.hpp"

namespace eqkd {

namespace detail {
// Physical detection candidate, pre dead-time.
struct DetCandidate {
    std::int64_t t = 0;
    std::uint64_t pair_id = 0;
    std::uint8_t det_slot = 0; // kNumDetectors physical slots + 1 passive extra
    Channel logical = Channel::AZ0;
    bool dark = false, satellite = false, central = false;
};
} // namespace detail

// Homogeneous Poisson pair-emission process at rate mu/window, true time frame.
std::vector<std::int64_t> generate_pair_emissions(double duration_s,
                                                  const SourceParams& source,
                                                  std::uint64_t seed);

// Per-tag truth annotations (simulator-internal; not part of the wire format).
struct EventInfo {
    std::uint64_t pair_id = 0; // 0 = dark count
    bool dark = false;
    bool satellite = false;    // X-basis short-long combination
    bool central = false;      // X-basis interfering central-peak component
};

struct RoutedEvents {
    std::vector<TimeTag> alice; // true time frame, sorted
    std::vector<TimeTag> bob;
    std::vector<EventInfo> alice_info;
    std::vector<EventInfo> bob_info;
};

// Route every emission through basis/arm/path choices, losses, interference,
// dark counts, jitter and per-physical-detector dead time. True time frame.
RoutedEvents route_and_detect(std::span<const std::int64_t> emissions,
                              const SimConfig& cfg, double duration_s,
                              std::uint64_t seed);

// Realized path of Bob's clock: offset + integral of (deterministic skew +
// random-walk skew), sampled on a 10 ms grid.
class ClockPath {
public:
    ClockPath(const ClockModelParams& params, std::uint64_t seed, double duration_s);

    double offset_at(std::int64_t true_ps) const;   // ps
    double skew_at(std::int64_t true_ps) const;     // ps/s
    std::int64_t transform(std::int64_t true_ps) const { // true -> Bob local
        return true_ps + static_cast<std::int64_t>(std::llround(offset_at(true_ps)));
    }
    // Realized offset at each whole second, for truth files / oracles.
    std::vector<double> per_second_offsets() const;
    double duration_s() const { return duration_s_; }

private:
    double step_s_ = 0.01;
    double duration_s_ = 0.0;
    std::vector<double> offset_;  // at grid points
    std::vector<double> skew_;    // on grid intervals
};

// Map true-frame events into the local clock frame (Bob's transform; Alice is
// the reference and passes through). Output stays sorted.
std::vector<TimeTag> apply_clock(std::span<const TimeTag> events, const ClockPath& path);

// Convenience all-in-memory run (small durations / tests).
struct SimRun {
    std::vector<AcquisitionBlock> alice;
    std::vector<AcquisitionBlock> bob;
    std::vector<double> truth_offsets_per_s;
};
SimRun simulate(double duration_s, const SimConfig& cfg, std::uint64_t seed);

// Streaming simulator: generates the run in 100 ms true-time segments and
// hands out sealed AcquisitionBlocks per side with bounded buffering. Only
// emissions with at least one surviving detection are materialized, so high
// pair rates with strong attenuation stay tractable.
class LinkSimulator {
public:
    LinkSimulator(SimConfig cfg, std::uint64_t seed, double duration_s);

    // Next sealed block for the side, or nullopt at end of run.
    std::optional<AcquisitionBlock> next_block(Side side);

    // Live phase actuator (piezo stand-in); affects subsequent segments.
    void set_phase_a(double rad) { phase_a_ = rad; }
    double phase_a() const { return phase_a_; }

    const ClockPath& clock_path() const { return clock_; }
    const SimConfig& config() const { return cfg_; }
    std::uint64_t seed() const { return seed_; }

private:
    using Pending = detail::DetCandidate;

    void advance_segment();
    void advance_next_emission();
    void emit_signal_events(std::int64_t seg_lo, std::int64_t seg_hi);
    void emit_dark_events(std::int64_t seg_lo, std::int64_t seg_hi);
    void process_pending(std::int64_t safe_until, bool flush);
    void seal_blocks(bool flush);

    SimConfig cfg_;
    std::uint64_t seed_;
    double duration_s_;
    std::int64_t duration_ps_;
    ClockPath clock_;
    double phase_a_;

    std::mt19937_64 rng_emit_, rng_outcome_, rng_dark_, rng_jitter_;
    std::int64_t next_emission_ps_ = 0;
    std::int64_t segment_lo_ = 0;
    std::int64_t watermark_true_ = 0;
    std::uint64_t pair_counter_ = 0;
    bool exhausted_ = false;

    static constexpr int kDetSlots = kNumDetectors + 1; // +1: passive Alice-Z arm 1
    std::array<std::vector<Pending>, kDetSlots> pending_;
    std::array<std::int64_t, kDetSlots> last_accept_;

    struct SideState {
        std::vector<TimeTag> staged;      // accepted logical tags awaiting sealing
        std::int64_t next_block_start = 0;
        std::uint64_t next_index = 0;
        std::deque<AcquisitionBlock> ready;
    };
    SideState alice_, bob_;
    bool end_block_start_reached(const SideState& st, bool is_bob) const;

    friend RoutedEvents route_and_detect(std::span<const std::int64_t>, const SimConfig&,
                                         double, std::uint64_t);
};

} // namespace eqkd
