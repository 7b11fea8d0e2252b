#include "eqkd/timetag.hpp"

#include <algorithm>
#include <cmath>

namespace eqkd {

std::int64_t coarse_offset(std::span<const std::int64_t> block_a,
                           std::span<const std::int64_t> block_b) {
    if (block_a.empty() || block_b.empty()) throw EmptyBlockError{};
    return block_b.front() - block_a.front();
}

std::int64_t coarse_offset(const AcquisitionBlock& a, const AcquisitionBlock& b) {
    if (a.tags.empty() || b.tags.empty()) throw EmptyBlockError{};
    return b.tags.front().time_ps - a.tags.front().time_ps;
}

CorrelationHistogram correlation_histogram(std::span<const std::int64_t> tags_a,
                                           std::span<const std::int64_t> tags_b,
                                           std::int64_t center_ps,
                                           std::int64_t half_range_ps,
                                           std::int64_t bin_width_ps) {
    CorrelationHistogram h;
    h.bin_width_ps = bin_width_ps;
    h.center_ps = center_ps;
    h.half_range_ps = half_range_ps;
    const std::int64_t span = 2 * half_range_ps;
    h.counts.assign(static_cast<std::size_t>(std::max<std::int64_t>(1, (span + bin_width_ps - 1) / bin_width_ps)), 0);
    accumulate_histogram(h, tags_a, tags_b);
    return h;
}

void accumulate_histogram(CorrelationHistogram& h,
                          std::span<const std::int64_t> tags_a,
                          std::span<const std::int64_t> tags_b) {
    const std::int64_t lo = h.lo_ps();
    const std::int64_t hi = lo + static_cast<std::int64_t>(h.counts.size()) * h.bin_width_ps;
    std::size_t jlo = 0;
    for (const std::int64_t a : tags_a) {
        while (jlo < tags_b.size() && tags_b[jlo] - a < lo) ++jlo;
        for (std::size_t j = jlo; j < tags_b.size(); ++j) {
            const std::int64_t d = tags_b[j] - a;
            if (d >= hi) break;
            ++h.counts[static_cast<std::size_t>((d - lo) / h.bin_width_ps)];
            ++h.total_pairs;
        }
    }
}

std::optional<Peak> locate_peak(const CorrelationHistogram& h) {
    if (h.counts.empty()) return std::nullopt;
    const std::size_t n = h.counts.size();
    std::size_t imax = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (h.counts[i] > h.counts[imax]) imax = i;

    // Background statistics exclude the argmax +/- 3 window.
    const std::size_t wlo = imax >= 3 ? imax - 3 : 0;
    const std::size_t whi = std::min(n - 1, imax + 3);
    double sum = 0, sum2 = 0;
    std::size_t nbg = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (i >= wlo && i <= whi) continue;
        sum += static_cast<double>(h.counts[i]);
        sum2 += static_cast<double>(h.counts[i]) * static_cast<double>(h.counts[i]);
        ++nbg;
    }
    const double mean = nbg ? sum / static_cast<double>(nbg) : 0.0;
    const double var = nbg ? std::max(0.0, sum2 / static_cast<double>(nbg) - mean * mean) : 0.0;
    const double sigma = std::max({std::sqrt(var), std::sqrt(mean), 1.0});
    const double significance = (static_cast<double>(h.counts[imax]) - mean) / sigma;
    if (significance < 5.0) return std::nullopt;

    double wsum = 0, csum = 0, c2sum = 0;
    for (std::size_t i = wlo; i <= whi; ++i) {
        const double c = std::max(0.0, static_cast<double>(h.counts[i]) - mean);
        const double x = static_cast<double>(h.bin_center(i));
        wsum += c;
        csum += c * x;
        c2sum += c * x * x;
    }
    if (wsum <= 0) return std::nullopt;
    Peak p;
    p.offset_ps = csum / wsum;
    p.significance = significance;
    p.width_ps = std::sqrt(std::max(0.0, c2sum / wsum - p.offset_ps * p.offset_ps));
    p.events = static_cast<std::uint64_t>(wsum);
    return p;
}

std::optional<ClockEstimate> refine_offset(std::span<const std::int64_t> tags_a,
                                           std::span<const std::int64_t> tags_b,
                                           std::int64_t coarse_offset_ps) {
    const auto hist = correlation_histogram(tags_a, tags_b, coarse_offset_ps,
                                            ClockTracker::kSearchHalfRangePs,
                                            ClockTracker::kFineBinPs);
    const auto peak = locate_peak(hist);
    if (!peak) return std::nullopt;
    ClockEstimate est;
    est.offset_ps = peak->offset_ps;
    est.skew_ps_per_s = 0.0;
    est.offset_uncertainty_ps =
        std::max(1.0, peak->width_ps / std::sqrt(static_cast<double>(std::max<std::uint64_t>(1, peak->events))));
    est.locked = true;
    return est;
}

std::vector<CoincidencePair> match_coincidences(std::span<const TimeTag> tags_a,
                                                std::span<const TimeTag> tags_b,
                                                std::int64_t offset_ps,
                                                std::int64_t window_ps) {
    struct Cand {
        std::int64_t absd;
        std::int64_t tb;
        std::int64_t ta;
        std::size_t i, j;
        std::int64_t d;
    };
    const std::int64_t half = window_ps / 2;
    std::vector<CoincidencePair> out;
    std::vector<Cand> comp;        // candidates of the current connected component
    std::vector<std::size_t> used_a, used_b;

    auto flush = [&]() {
        if (comp.empty()) return;
        std::sort(comp.begin(), comp.end(), [](const Cand& x, const Cand& y) {
            if (x.absd != y.absd) return x.absd < y.absd;
            if (x.tb != y.tb) return x.tb < y.tb;
            if (x.ta != y.ta) return x.ta < y.ta;
            if (x.j != y.j) return x.j < y.j; // duplicate timestamps: index order
            return x.i < y.i;
        });
        used_a.clear();
        used_b.clear();
        for (const Cand& c : comp) {
            if (std::find(used_a.begin(), used_a.end(), c.i) != used_a.end()) continue;
            if (std::find(used_b.begin(), used_b.end(), c.j) != used_b.end()) continue;
            used_a.push_back(c.i);
            used_b.push_back(c.j);
            CoincidencePair p;
            p.alice_index = c.i;
            p.bob_index = c.j;
            p.alice_channel = tags_a[c.i].channel;
            p.bob_channel = tags_b[c.j].channel;
            p.residual_ps = c.d;
            out.push_back(p);
        }
        comp.clear();
    };

    std::size_t jlo = 0;
    std::int64_t comp_max_i = -1, comp_max_j = -1;
    for (std::size_t i = 0; i < tags_a.size(); ++i) {
        const std::int64_t a = tags_a[i].time_ps;
        while (jlo < tags_b.size() && tags_b[jlo].time_ps - offset_ps - a < -half) ++jlo;
        bool first_for_i = true;
        for (std::size_t j = jlo; j < tags_b.size(); ++j) {
            const std::int64_t d = tags_b[j].time_ps - offset_ps - a;
            if (d > half) break;
            if (first_for_i) {
                // Disjoint from the running component when both index ranges advanced.
                if (static_cast<std::int64_t>(i) > comp_max_i &&
                    static_cast<std::int64_t>(j) > comp_max_j)
                    flush();
                first_for_i = false;
            }
            comp.push_back({std::llabs(d), tags_b[j].time_ps, a, i, j, d});
            comp_max_i = std::max(comp_max_i, static_cast<std::int64_t>(i));
            comp_max_j = std::max(comp_max_j, static_cast<std::int64_t>(j));
        }
    }
    flush();

    // Restore deterministic global order (pairs are reported by Alice index).
    std::sort(out.begin(), out.end(), [](const CoincidencePair& x, const CoincidencePair& y) {
        return x.alice_index < y.alice_index;
    });
    return out;
}

ClockTracker::Status ClockTracker::update(std::span<const std::int64_t> residuals,
                                          std::int64_t now_ps) {
    const double dt_s =
        est_.last_update_ps ? static_cast<double>(now_ps - est_.last_update_ps) * 1e-12 : 1.0;

    CorrelationHistogram h;
    h.bin_width_ps = kFineBinPs;
    h.center_ps = 0;
    h.half_range_ps = kSearchHalfRangePs;
    h.counts.assign(static_cast<std::size_t>(2 * kSearchHalfRangePs / kFineBinPs), 0);
    const std::int64_t lo = h.lo_ps();
    const std::int64_t hi = lo + static_cast<std::int64_t>(h.counts.size()) * h.bin_width_ps;
    for (const std::int64_t r : residuals) {
        if (r < lo || r >= hi) continue;
        ++h.counts[static_cast<std::size_t>((r - lo) / h.bin_width_ps)];
        ++h.total_pairs;
    }

    const auto peak = locate_peak(h);
    if (!peak) {
        ++misses_;
        if (misses_ >= kMaxConsecutiveMisses) {
            est_.locked = false;
            return Status::LostLock;
        }
        // Coast on the current model: propagate the offset along the skew.
        est_.offset_ps += est_.skew_ps_per_s * dt_s;
        est_.last_update_ps = now_ps;
        return Status::Coasting;
    }
    misses_ = 0;

    // Residuals were measured against correction_at(), which already carries
    // the skew feed-forward; the peak position is the prediction error.
    const double r = peak->offset_ps;
    est_.offset_ps += est_.skew_ps_per_s * dt_s + kAlpha * r;
    est_.skew_ps_per_s += kBeta * r / dt_s;
    const double meas_sigma =
        std::max(1.0, peak->width_ps / std::sqrt(static_cast<double>(std::max<std::uint64_t>(1, peak->events))));
    est_.offset_uncertainty_ps = est_.offset_uncertainty_ps > 0
                                     ? (1.0 - kAlpha) * est_.offset_uncertainty_ps + kAlpha * meas_sigma
                                     : meas_sigma;
    est_.last_update_ps = now_ps;
    est_.locked = true;
    return Status::Tracking;
}

void SyncAcquirer::reset() {
    state_ = State::NeedFirstBlocks;
    stage1_offset_ = 0;
    stage2_half_range_ = 0;
    stage2_hist_ = CorrelationHistogram{};
    acc_a_.clear();
    acc_b_.clear();
}

std::optional<ClockEstimate> SyncAcquirer::feed(std::span<const std::int64_t> tags_a,
                                                std::span<const std::int64_t> tags_b) {
    if (tags_a.empty() || tags_b.empty()) return std::nullopt;

    if (state_ == State::NeedFirstBlocks) {
        stage1_offset_ = coarse_offset(tags_a, tags_b);
        // First-tag error is on the order of the inter-detection gaps; size the
        // stage-2 window from the observed block rates, floored at the design
        // +/-500 ns.
        const double span_s = 0.1;
        const double gap_a = span_s / static_cast<double>(tags_a.size()) * 1e12;
        const double gap_b = span_s / static_cast<double>(tags_b.size()) * 1e12;
        stage2_half_range_ = std::max<std::int64_t>(
            500'000, static_cast<std::int64_t>(12.0 * (gap_a + gap_b)));
        stage2_hist_ = CorrelationHistogram{};
        stage2_hist_.bin_width_ps = 1000;
        stage2_hist_.center_ps = stage1_offset_;
        stage2_hist_.half_range_ps = stage2_half_range_;
        stage2_hist_.counts.assign(
            static_cast<std::size_t>(2 * stage2_half_range_ / 1000), 0);
        state_ = State::Stage2;
    }

    acc_a_.insert(acc_a_.end(), tags_a.begin(), tags_a.end());
    acc_b_.insert(acc_b_.end(), tags_b.begin(), tags_b.end());
    accumulate_histogram(stage2_hist_, tags_a, tags_b);

    const auto p2 = locate_peak(stage2_hist_);
    if (!p2) return std::nullopt;

    auto est = refine_offset(acc_a_, acc_b_, static_cast<std::int64_t>(std::llround(p2->offset_ps)));
    if (!est) return std::nullopt;
    state_ = State::Done;
    acc_a_.clear();
    acc_b_.clear();
    return est;
}

} // namespace eqkd
