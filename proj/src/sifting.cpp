#include "eqkd/sifting.hpp"

#include <algorithm>
#include <cmath>

#include "eqkd/timetag.hpp"

namespace eqkd {

Announcement build_announcement(const AcquisitionBlock& block) {
    Announcement ann;
    ann.block_index = block.index;
    ann.block_start_ps = block.start_ps;
    ann.events.reserve(block.tags.size());
    for (const auto& tag : block.tags) {
        AnnouncedEvent e;
        e.time_ps = tag.time_ps;
        e.basis_x = channel_is_basis_x(tag.channel);
        e.x_bit = e.basis_x ? static_cast<std::uint8_t>(channel_bit(tag.channel)) : 0;
        ann.events.push_back(e);
    }
    return ann;
}

SiftOutcome sift_match(std::span<const TimeTag> alice_tags, const Announcement& ann,
                       const ClockEstimate& clock, std::int64_t window_ps) {
    if (!clock.locked) throw ClockNotLocked{};

    SiftOutcome out;
    out.response.block_index = ann.block_index;

    // Split the announcement by basis, correcting Bob's times into Alice's
    // frame; remember the original announcement indices.
    std::vector<TimeTag> bob_z, bob_x;
    std::vector<std::uint32_t> idx_z, idx_x;
    std::vector<std::uint8_t> bit_x;
    for (std::uint32_t i = 0; i < ann.events.size(); ++i) {
        const auto& e = ann.events[i];
        const std::int64_t t =
            e.time_ps - static_cast<std::int64_t>(std::llround(clock.correction_at(e.time_ps)));
        if (e.basis_x) {
            bob_x.push_back({t, e.x_bit ? Channel::BX2 : Channel::BX1});
            idx_x.push_back(i);
            bit_x.push_back(e.x_bit);
        } else {
            bob_z.push_back({t, Channel::BZ1});
            idx_z.push_back(i);
        }
    }

    std::vector<TimeTag> alice_z, alice_x;
    for (const auto& tag : alice_tags) {
        if (channel_is_basis_x(tag.channel)) alice_x.push_back(tag);
        else alice_z.push_back(tag);
    }

    // Z-Z: the Alice logical copy that matched at zero delay names the bit.
    struct ZHit {
        std::uint32_t ann_index;
        std::uint8_t bit;
    };
    std::vector<ZHit> z_hits;
    for (const auto& pair : match_coincidences(alice_z, bob_z, 0, window_ps)) {
        z_hits.push_back({idx_z[pair.bob_index],
                          static_cast<std::uint8_t>(channel_bit(pair.alice_channel))});
    }
    std::sort(z_hits.begin(), z_hits.end(),
              [](const ZHit& a, const ZHit& b) { return a.ann_index < b.ann_index; });
    for (const auto& h : z_hits) {
        out.response.z_match_indices.push_back(h.ann_index);
        out.alice_z_bits.push_back(h.bit);
    }

    // X-X at zero delay (satellites at +/-tau fall outside the window).
    struct XHit {
        std::uint32_t ann_index;
        XCoincidence xc;
    };
    std::vector<XHit> x_hits;
    for (const auto& pair : match_coincidences(alice_x, bob_x, 0, window_ps)) {
        XCoincidence xc;
        xc.alice_bit = static_cast<std::uint8_t>(channel_bit(pair.alice_channel));
        xc.bob_bit = bit_x[pair.bob_index];
        x_hits.push_back({idx_x[pair.bob_index], xc});
    }
    std::sort(x_hits.begin(), x_hits.end(),
              [](const XHit& a, const XHit& b) { return a.ann_index < b.ann_index; });
    for (const auto& h : x_hits) out.x_outcomes.push_back(h.xc);
    return out;
}

XBasisStats estimate_qber_x(std::span<const XCoincidence> outcomes, std::uint32_t min_count) {
    if (outcomes.size() < min_count) throw InsufficientStatistics{};
    XBasisStats stats;
    for (const auto& o : outcomes) {
        if (o.alice_bit == o.bob_bit) ++stats.correlated;
        else ++stats.anticorrelated;
    }
    return stats;
}

std::vector<RawKeyBlock> RawBlockAccumulator::push(std::span<const std::uint8_t> bits,
                                                   std::uint64_t source_block) {
    std::vector<RawKeyBlock> sealed;
    if (!bits.empty() &&
        (pending_sources_.empty() || pending_sources_.back() != source_block))
        pending_sources_.push_back(source_block);
    for (const std::uint8_t b : bits) {
        pending_.push_back(b != 0);
        if (pending_.size() == n_ec_) {
            RawKeyBlock blk;
            blk.id = next_id_++;
            blk.bits = std::move(pending_);
            blk.source_blocks = std::move(pending_sources_);
            pending_ = BitVec(0);
            pending_sources_.clear();
            pending_sources_.push_back(source_block); // continues into the next block
            sealed.push_back(std::move(blk));
        }
    }
    return sealed;
}

double PhaseController::wrap(double phi) {
    while (phi > M_PI) phi -= 2.0 * M_PI;
    while (phi <= -M_PI) phi += 2.0 * M_PI;
    return phi;
}

double PhaseController::step(std::optional<double> qber_x) {
    if (!qber_x) return command(); // hold: repeat the same probe
    if (!have_plus_) {
        // Measurement for the +delta probe (probe_sign_ currently +1).
        q_plus_ = *qber_x;
        have_plus_ = true;
        probe_sign_ = -1;
        return command();
    }
    const double q_minus = *qber_x;
    const double gradient = (q_plus_ - q_minus) / (2.0 * kDitherRad);
    double delta = -kGain * gradient;
    delta = std::clamp(delta, -kMaxStepRad, kMaxStepRad);
    base_ = wrap(base_ + delta);
    have_plus_ = false;
    probe_sign_ = 1;
    return command();
}

} // namespace eqkd
