// Core wire-level domain types shared across the pipeline.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace eqkd {

// Logical detection channels. Alice's single physical Z detector is read out
// twice (AZ0 at t, AZ1 at t+tau); every other logical channel maps 1:1 onto a
// physical detector. X-channel suffix is the outcome bit convention:
// AX1/BX1 -> 0, AX2/BX2 -> 1.
enum class Channel : std::uint8_t {
    AZ0 = 0,
    AZ1 = 1,
    AX1 = 2,
    AX2 = 3,
    BZ1 = 4, // Bob Z, short arm, bit 0
    BZ2 = 5, // Bob Z, delayed arm, bit 1
    BX1 = 6,
    BX2 = 7,
};
inline constexpr int kNumChannels = 8;

// Physical detectors, for dead-time and dark-count bookkeeping.
enum class Detector : std::uint8_t {
    AZ = 0,
    AX1 = 1,
    AX2 = 2,
    BZ1 = 3,
    BZ2 = 4,
    BX1 = 5,
    BX2 = 6,
};
inline constexpr int kNumDetectors = 7;

inline bool channel_is_alice(Channel c) { return static_cast<int>(c) <= 3; }
inline bool channel_is_basis_x(Channel c) {
    return c == Channel::AX1 || c == Channel::AX2 || c == Channel::BX1 || c == Channel::BX2;
}
inline int channel_bit(Channel c) {
    switch (c) {
        case Channel::AZ1:
        case Channel::AX2:
        case Channel::BZ2:
        case Channel::BX2: return 1;
        default: return 0;
    }
}
inline const char* channel_name(Channel c) {
    static const char* names[] = {"AZ0", "AZ1", "AX1", "AX2", "BZ1", "BZ2", "BX1", "BX2"};
    return names[static_cast<int>(c)];
}

// One detection event: 64-bit picosecond timestamp plus logical channel.
struct TimeTag {
    std::int64_t time_ps = 0;
    Channel channel = Channel::AZ0;

    friend bool operator==(const TimeTag&, const TimeTag&) = default;
};

// 100 ms batch of one side's detections, in that side's local clock.
struct AcquisitionBlock {
    std::uint64_t index = 0;     // sequential per side
    std::int64_t start_ps = 0;   // local-clock block start
    std::int64_t span_ps = 0;    // block duration (100 ms by default)
    std::vector<TimeTag> tags;   // sorted by time_ps
};

// Offset + skew of Bob's clock relative to Alice's (the reference).
struct ClockEstimate {
    double offset_ps = 0.0;
    double skew_ps_per_s = 0.0;
    double offset_uncertainty_ps = 0.0;
    std::int64_t last_update_ps = 0; // link time of last update
    bool locked = false;

    // Correction to subtract from a Bob timestamp to map it into Alice's frame.
    double correction_at(std::int64_t bob_time_ps) const {
        return offset_ps + skew_ps_per_s * (static_cast<double>(bob_time_ps - last_update_ps) * 1e-12);
    }
};

// One matched coincidence between an Alice and a Bob tag.
struct CoincidencePair {
    std::size_t alice_index = 0;
    std::size_t bob_index = 0;
    Channel alice_channel = Channel::AZ0;
    Channel bob_channel = Channel::BZ1;
    std::int64_t residual_ps = 0; // (corrected bob time) - (alice time)
};

enum class Side : std::uint8_t { Alice = 0, Bob = 1 };

constexpr std::int64_t kPsPerSecond = 1'000'000'000'000LL;
constexpr std::int64_t kBlockSpanPs = 100'000'000'000LL; // 100 ms

} // namespace eqkd
