// Coincidence analysis: cross-correlation histograms, peak location, greedy
// coincidence matching, and the three-stage clock acquisition plus 1 Hz
// offset/skew tracking.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "eqkd/types.hpp"

namespace eqkd {

struct EmptyBlockError : std::runtime_error {
    EmptyBlockError() : std::runtime_error("empty acquisition block") {}
};

struct CorrelationHistogram {
    std::int64_t bin_width_ps = 1;
    std::int64_t center_ps = 0;
    std::int64_t half_range_ps = 0;
    std::vector<std::uint64_t> counts;
    std::uint64_t total_pairs = 0; // sum of counts

    std::int64_t lo_ps() const { return center_ps - half_range_ps; }
    std::size_t nbins() const { return counts.size(); }
    std::int64_t bin_center(std::size_t k) const {
        return lo_ps() + static_cast<std::int64_t>(k) * bin_width_ps + bin_width_ps / 2;
    }
};

// Stage 1: difference of the first tags of the two blocks (Bob - Alice).
std::int64_t coarse_offset(std::span<const std::int64_t> block_a,
                           std::span<const std::int64_t> block_b);
std::int64_t coarse_offset(const AcquisitionBlock& a, const AcquisitionBlock& b);

// Histogram of delays (tB - tA) within [center - half_range, center + half_range),
// two-pointer sweep over sorted inputs.
CorrelationHistogram correlation_histogram(std::span<const std::int64_t> tags_a,
                                           std::span<const std::int64_t> tags_b,
                                           std::int64_t center_ps,
                                           std::int64_t half_range_ps,
                                           std::int64_t bin_width_ps);
// Accumulate into an existing histogram (same binning); used by the sync
// stages that integrate several acquisition blocks.
void accumulate_histogram(CorrelationHistogram& hist,
                          std::span<const std::int64_t> tags_a,
                          std::span<const std::int64_t> tags_b);

struct Peak {
    double offset_ps = 0.0;   // centroid over argmax +/- 3 bins, background-subtracted
    double significance = 0.0; // (peak - bg mean) / bg sigma
    double width_ps = 0.0;     // rms width of the centroid window
    std::uint64_t events = 0;  // background-subtracted events in the window
};

// Peak must exceed the background mean by >= 5 background sigma, else NoPeak.
std::optional<Peak> locate_peak(const CorrelationHistogram& hist);

// Stage 3: +/-40 ns fine histogram around the coarse offset, 16 ps bins.
std::optional<ClockEstimate> refine_offset(std::span<const std::int64_t> tags_a,
                                           std::span<const std::int64_t> tags_b,
                                           std::int64_t coarse_offset_ps);

// Greedy nearest-neighbour coincidence matching on corrected delays
// d = tB - offset - tA with |d| <= window/2. Pairs are taken smallest |d|
// first; ties go to the earlier Bob tag, then the earlier Alice tag; every
// tag is used at most once.
std::vector<CoincidencePair> match_coincidences(std::span<const TimeTag> tags_a,
                                                std::span<const TimeTag> tags_b,
                                                std::int64_t offset_ps,
                                                std::int64_t window_ps = 128);

// Fixed-gain alpha-beta tracker over (offset, skew), updated once per second
// from the residual delays of that second's near-coincidences.
class ClockTracker {
public:
    static constexpr double kAlpha = 0.3;
    static constexpr double kBeta = 0.1;
    static constexpr std::int64_t kSearchHalfRangePs = 40'000; // +/-40 ns
    static constexpr std::int64_t kFineBinPs = 16;
    static constexpr int kMaxConsecutiveMisses = 3;

    enum class Status { Tracking, Coasting, LostLock };

    explicit ClockTracker(const ClockEstimate& initial) : est_(initial) { est_.locked = true; }

    // `residuals` are (tB - tA - applied correction) for pairs within the
    // +/-40 ns search window, measured over the second ending at `now_ps`.
    // Returns the tracking status; on Tracking the estimate was updated and
    // steering_ps_per_s() reflects the new skew-cancellation command.
    Status update(std::span<const std::int64_t> residuals, std::int64_t now_ps);

    const ClockEstimate& estimate() const { return est_; }
    double steering_ps_per_s() const { return -est_.skew_ps_per_s; }
    int consecutive_misses() const { return misses_; }

private:
    ClockEstimate est_;
    int misses_ = 0;
};

// Three-stage acquisition: first-tag difference, +/-wide 1 ns histogram, then
// the 16 ps refinement. Blocks are accumulated until the stage-2 peak clears
// 5 sigma. The stage-2 half range adapts to the observed singles rates (the
// first-tag error scales with the inverse detection rate) with the +/-500 ns
// design floor.
class SyncAcquirer {
public:
    enum class State { NeedFirstBlocks, Stage2, Done };

    // Feed one 100 ms block pair (times only, local clocks). Returns the
    // refined estimate once stage 3 succeeds.
    std::optional<ClockEstimate> feed(std::span<const std::int64_t> tags_a,
                                      std::span<const std::int64_t> tags_b);

    State state() const { return state_; }
    std::int64_t stage1_offset_ps() const { return stage1_offset_; }
    std::int64_t stage2_half_range_ps() const { return stage2_half_range_; }
    void reset();

private:
    State state_ = State::NeedFirstBlocks;
    std::int64_t stage1_offset_ = 0;
    std::int64_t stage2_half_range_ = 0;
    CorrelationHistogram stage2_hist_;
    std::vector<std::int64_t> acc_a_, acc_b_; // blocks kept for stage 3
};

} // namespace eqkd
