#include "eqkd/sim_link.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "eqkd/rng.hpp"

namespace eqkd {

namespace {

constexpr std::uint8_t kSlotPassiveAZ1 = kNumDetectors; // extra slot, passive scheme only

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b) != 0 && ((a < 0) != (b < 0))) --q;
    return q;
}

// Per-photon landing probabilities (Table-1 transmittance x efficiency, with
// the configured basis probability rescaling the default passive 50/50).
struct RouteProbs {
    double paz, pax1, pax2, pa;
    double pbz1, pbz2, pbx1, pbx2, pb;
    double v_eff;
    double phase_b;
    std::int64_t tau_ps;
    bool alice_passive;
};

RouteProbs make_probs(const SimConfig& cfg) {
    RouteProbs r;
    const double sz = cfg.source.basis_prob_z / 0.5;
    const double sx = (1.0 - cfg.source.basis_prob_z) / 0.5;
    auto dp = [&](Detector d) { return cfg.detect_prob[static_cast<int>(d)]; };
    r.paz = dp(Detector::AZ) * sz;
    r.pax1 = dp(Detector::AX1) * sx;
    r.pax2 = dp(Detector::AX2) * sx;
    r.pbz1 = dp(Detector::BZ1) * sz;
    r.pbz2 = dp(Detector::BZ2) * sz;
    r.pbx1 = dp(Detector::BX1) * sx;
    r.pbx2 = dp(Detector::BX2) * sx;
    r.pa = std::min(1.0, r.paz + r.pax1 + r.pax2);
    r.pb = std::min(1.0, r.pbz1 + r.pbz2 + r.pbx1 + r.pbx2);
    r.v_eff = cfg.visibility_effective;
    r.phase_b = cfg.source.phase_b_rad;
    r.tau_ps = static_cast<std::int64_t>(std::llround(cfg.coherence.tau_delay_ps));
    r.alice_passive = cfg.source.alice_z_passive;
    return r;
}

struct PhotonDraw {
    bool detected = false;
    bool basis_x = false;
    bool long_path = false; // X interferometer arm, or Alice passive Z arm 1
    std::uint8_t det_slot = 0;
    Channel logical = Channel::AZ0;
    std::int64_t extra_ps = 0;
};

using Candidate = detail::DetCandidate;

// Route one pair given which sides registered a detection. phase_a is live
// (feedback actuator); everything else is frozen in `p`.
void route_pair(const RouteProbs& p, double phase_a, std::int64_t t_emit,
                std::uint64_t pair_id, bool a_det, bool b_det, std::mt19937_64& rng,
                std::vector<Candidate>& out_a, std::vector<Candidate>& out_b) {
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    PhotonDraw a, b;

    if (a_det) {
        a.detected = true;
        a.basis_x = uni(rng) * p.pa >= p.paz;
        if (a.basis_x) {
            a.long_path = uni(rng) < 0.5;
            const bool det2 = uni(rng) * (p.pax1 + p.pax2) >= p.pax1;
            a.det_slot = static_cast<std::uint8_t>(det2 ? Detector::AX2 : Detector::AX1);
            a.logical = det2 ? Channel::AX2 : Channel::AX1;
            a.extra_ps = a.long_path ? p.tau_ps : 0;
        } else if (p.alice_passive) {
            a.long_path = uni(rng) < 0.5;
            a.det_slot = a.long_path ? kSlotPassiveAZ1
                                     : static_cast<std::uint8_t>(Detector::AZ);
            a.logical = a.long_path ? Channel::AZ1 : Channel::AZ0;
            a.extra_ps = a.long_path ? p.tau_ps : 0;
        } else {
            a.det_slot = static_cast<std::uint8_t>(Detector::AZ);
            a.logical = Channel::AZ0; // duplicated electronically after dead time
        }
    }
    if (b_det) {
        b.detected = true;
        b.basis_x = uni(rng) * p.pb >= (p.pbz1 + p.pbz2);
        if (b.basis_x) {
            b.long_path = uni(rng) < 0.5;
            const bool det2 = uni(rng) * (p.pbx1 + p.pbx2) >= p.pbx1;
            b.det_slot = static_cast<std::uint8_t>(det2 ? Detector::BX2 : Detector::BX1);
            b.logical = det2 ? Channel::BX2 : Channel::BX1;
            b.extra_ps = b.long_path ? p.tau_ps : 0;
        } else {
            const bool arm1 = uni(rng) * (p.pbz1 + p.pbz2) >= p.pbz1;
            b.det_slot = static_cast<std::uint8_t>(arm1 ? Detector::BZ2 : Detector::BZ1);
            b.logical = arm1 ? Channel::BZ2 : Channel::BZ1;
            b.extra_ps = arm1 ? p.tau_ps : 0;
        }
    }

    bool satellite = false, central = false;
    if (a.detected && b.detected && a.basis_x && b.basis_x) {
        if (a.long_path == b.long_path) {
            // Central peak: the short-short and long-long amplitudes interfere;
            // joint outcome (i,j) has p_ij = (1 + (-1)^(i xor j) V cos(phi)) / 4.
            central = true;
            const double phi = phase_a + p.phase_b;
            const bool same = uni(rng) < (1.0 + p.v_eff * std::cos(phi)) / 2.0;
            const bool i = uni(rng) < 0.5;
            const bool j = same ? i : !i;
            a.det_slot = static_cast<std::uint8_t>(i ? Detector::AX2 : Detector::AX1);
            a.logical = i ? Channel::AX2 : Channel::AX1;
            b.det_slot = static_cast<std::uint8_t>(j ? Detector::BX2 : Detector::BX1);
            b.logical = j ? Channel::BX2 : Channel::BX1;
        } else {
            satellite = true; // +/- tau peak, no interference, uniform detectors
        }
    }

    if (a.detected)
        out_a.push_back({t_emit + a.extra_ps, pair_id, a.det_slot, a.logical,
                         false, satellite, central});
    if (b.detected)
        out_b.push_back({t_emit + b.extra_ps, pair_id, b.det_slot, b.logical,
                         false, satellite, central});
}

} // namespace

std::vector<std::int64_t> generate_pair_emissions(double duration_s,
                                                  const SourceParams& source,
                                                  std::uint64_t seed) {
    std::vector<std::int64_t> out;
    if (duration_s <= 0 || source.mu <= 0) return out;
    const double rate_per_ps = source.mu / source.window_ps;
    std::mt19937_64 rng = make_rng(seed, "emissions");
    std::exponential_distribution<double> gap(rate_per_ps);
    const double end_ps = duration_s * 1e12;
    out.reserve(static_cast<std::size_t>(rate_per_ps * end_ps * 1.05) + 16);
    double start = source.light_on_time_s * 1e12;
    std::int64_t t = static_cast<std::int64_t>(start);
    for (;;) {
        t += std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(gap(rng))));
        if (static_cast<double>(t) >= end_ps) break;
        out.push_back(t);
    }
    return out;
}

// ---------------------------------------------------------------------------

ClockPath::ClockPath(const ClockModelParams& params, std::uint64_t seed, double duration_s)
    : duration_s_(duration_s) {
    const std::size_t steps = static_cast<std::size_t>(std::ceil(duration_s / step_s_)) + 2;
    offset_.resize(steps + 1);
    skew_.resize(steps);
    std::mt19937_64 rng = make_rng(seed, "clock");
    std::normal_distribution<double> walk(0.0, params.skew_random_walk_ps_per_s * std::sqrt(step_s_));
    double off = params.offset_ps;
    double skew = params.skew_ps_per_s;
    const bool has_walk = params.skew_random_walk_ps_per_s > 0;
    for (std::size_t i = 0; i < steps; ++i) {
        offset_[i] = off;
        skew_[i] = skew;
        off += skew * step_s_;
        if (has_walk) skew += walk(rng);
    }
    offset_[steps] = off;
}

double ClockPath::offset_at(std::int64_t true_ps) const {
    const double t_s = static_cast<double>(true_ps) * 1e-12;
    double fidx = t_s / step_s_;
    if (fidx < 0) fidx = 0;
    std::size_t i = static_cast<std::size_t>(fidx);
    if (i >= skew_.size()) i = skew_.size() - 1;
    const double frac_s = t_s - static_cast<double>(i) * step_s_;
    return offset_[i] + skew_[i] * frac_s;
}

double ClockPath::skew_at(std::int64_t true_ps) const {
    double fidx = static_cast<double>(true_ps) * 1e-12 / step_s_;
    if (fidx < 0) fidx = 0;
    std::size_t i = static_cast<std::size_t>(fidx);
    if (i >= skew_.size()) i = skew_.size() - 1;
    return skew_[i];
}

std::vector<double> ClockPath::per_second_offsets() const {
    std::vector<double> out;
    const std::size_t n = static_cast<std::size_t>(std::floor(duration_s_)) + 1;
    out.reserve(n);
    for (std::size_t s = 0; s < n; ++s)
        out.push_back(offset_at(static_cast<std::int64_t>(s) * kPsPerSecond));
    return out;
}

std::vector<TimeTag> apply_clock(std::span<const TimeTag> events, const ClockPath& path) {
    std::vector<TimeTag> out;
    out.reserve(events.size());
    for (const auto& e : events) out.push_back({path.transform(e.time_ps), e.channel});
    std::sort(out.begin(), out.end(),
              [](const TimeTag& a, const TimeTag& b) { return a.time_ps < b.time_ps; });
    return out;
}

// ---------------------------------------------------------------------------

RoutedEvents route_and_detect(std::span<const std::int64_t> emissions, const SimConfig& cfg,
                              double duration_s, std::uint64_t seed) {
    const RouteProbs probs = make_probs(cfg);
    std::mt19937_64 rng_out = make_rng(seed, "outcome");
    std::mt19937_64 rng_dark = make_rng(seed, "dark");
    std::mt19937_64 rng_jit = make_rng(seed, "jitter");
    std::uniform_real_distribution<double> uni(0.0, 1.0);

    std::array<std::vector<Candidate>, kNumDetectors + 1> per_slot;
    std::vector<Candidate> ca, cb;
    std::uint64_t pair_id = 0;
    for (const std::int64_t t : emissions) {
        ++pair_id;
        const bool a_det = uni(rng_out) < probs.pa;
        const bool b_det = uni(rng_out) < probs.pb;
        if (!a_det && !b_det) continue;
        ca.clear();
        cb.clear();
        route_pair(probs, cfg.source.phase_a_rad, t, pair_id, a_det, b_det, rng_out, ca, cb);
        for (const auto& c : ca) per_slot[c.det_slot].push_back(c);
        for (const auto& c : cb) per_slot[c.det_slot].push_back(c);
    }

    // Dark counts: independent Poisson stream per physical detector.
    static const Channel kSlotLogical[kNumDetectors + 1] = {
        Channel::AZ0, Channel::AX1, Channel::AX2, Channel::BZ1,
        Channel::BZ2, Channel::BX1, Channel::BX2, Channel::AZ1};
    const double span_ps = duration_s * 1e12;
    if (cfg.detectors.dark_rate_hz > 0 && duration_s > 0) {
        std::poisson_distribution<long> pois(cfg.detectors.dark_rate_hz * duration_s);
        const int nslots = cfg.source.alice_z_passive ? kNumDetectors + 1 : kNumDetectors;
        for (int s = 0; s < nslots; ++s) {
            const long n = pois(rng_dark);
            for (long i = 0; i < n; ++i) {
                Candidate c{};
                c.t = static_cast<std::int64_t>(uni(rng_dark) * span_ps);
                c.det_slot = static_cast<std::uint8_t>(s);
                c.dark = true;
                c.logical = kSlotLogical[s];
                per_slot[s].push_back(c);
            }
        }
    }

    // Jitter signal events, then per-detector dead time in arrival order.
    const double sigma = std::sqrt(cfg.detectors.jitter_sigma_ps * cfg.detectors.jitter_sigma_ps +
                                   cfg.detectors.dispersion_jitter_ps * cfg.detectors.dispersion_jitter_ps);
    std::normal_distribution<double> jitter(0.0, sigma > 0 ? sigma : 1e-12);
    const std::int64_t dead = static_cast<std::int64_t>(std::llround(cfg.detectors.dead_time_ps));
    const std::int64_t tau = probs.tau_ps;

    RoutedEvents out;
    for (auto& slot : per_slot) {
        for (auto& c : slot) {
            if (!c.dark && sigma > 0)
                c.t += static_cast<std::int64_t>(std::llround(jitter(rng_jit)));
            if (c.t < 0) c.t = 0;
        }
        std::sort(slot.begin(), slot.end(),
                  [](const Candidate& x, const Candidate& y) { return x.t < y.t; });
        std::int64_t last = std::numeric_limits<std::int64_t>::min() / 2;
        for (const auto& c : slot) {
            if (c.t - last < dead) continue;
            last = c.t;
            const EventInfo info{c.pair_id, c.dark, c.satellite, c.central};
            const bool is_alice = channel_is_alice(c.logical);
            auto& tags = is_alice ? out.alice : out.bob;
            auto& infos = is_alice ? out.alice_info : out.bob_info;
            if (c.det_slot == static_cast<std::uint8_t>(Detector::AZ) &&
                !cfg.source.alice_z_passive) {
                tags.push_back({c.t, Channel::AZ0});
                infos.push_back(info);
                tags.push_back({c.t + tau, Channel::AZ1});
                infos.push_back(info);
            } else {
                tags.push_back({c.t, c.logical});
                infos.push_back(info);
            }
        }
    }

    auto sort_side = [](std::vector<TimeTag>& tags, std::vector<EventInfo>& infos) {
        std::vector<std::size_t> order(tags.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return tags[a].time_ps < tags[b].time_ps;
        });
        std::vector<TimeTag> t2(tags.size());
        std::vector<EventInfo> i2(infos.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            t2[i] = tags[order[i]];
            i2[i] = infos[order[i]];
        }
        tags = std::move(t2);
        infos = std::move(i2);
    };
    sort_side(out.alice, out.alice_info);
    sort_side(out.bob, out.bob_info);
    return out;
}

// ---------------------------------------------------------------------------

LinkSimulator::LinkSimulator(SimConfig cfg, std::uint64_t seed, double duration_s)
    : cfg_(std::move(cfg)),
      seed_(seed),
      duration_s_(duration_s),
      duration_ps_(static_cast<std::int64_t>(duration_s * 1e12)),
      clock_(cfg_.clock, seed, duration_s),
      phase_a_(cfg_.source.phase_a_rad),
      rng_emit_(make_rng(seed, "emissions")),
      rng_outcome_(make_rng(seed, "outcome")),
      rng_dark_(make_rng(seed, "dark")),
      rng_jitter_(make_rng(seed, "jitter")) {
    cfg_.validate();
    last_accept_.fill(std::numeric_limits<std::int64_t>::min() / 2);
    next_emission_ps_ = static_cast<std::int64_t>(cfg_.source.light_on_time_s * 1e12);
    bob_.next_block_start = floor_div(clock_.transform(0), kBlockSpanPs) * kBlockSpanPs;
    advance_next_emission();
}

void LinkSimulator::advance_next_emission() {
    const RouteProbs probs = make_probs(cfg_);
    const double p_any = probs.pa + probs.pb - probs.pa * probs.pb;
    const double rate_per_ps = cfg_.source.mu / cfg_.source.window_ps * p_any;
    if (rate_per_ps <= 0) {
        next_emission_ps_ = std::numeric_limits<std::int64_t>::max();
        return;
    }
    std::exponential_distribution<double> gap(rate_per_ps);
    next_emission_ps_ +=
        std::max<std::int64_t>(1, static_cast<std::int64_t>(std::llround(gap(rng_emit_))));
}

void LinkSimulator::emit_signal_events(std::int64_t seg_lo, std::int64_t seg_hi) {
    (void)seg_lo;
    const RouteProbs probs = make_probs(cfg_);
    const double p_any = probs.pa + probs.pb - probs.pa * probs.pb;
    if (p_any <= 0) return;
    const double p_both = probs.pa * probs.pb / p_any;
    const double p_a_only = probs.pa * (1.0 - probs.pb) / p_any;
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const double sigma =
        std::sqrt(cfg_.detectors.jitter_sigma_ps * cfg_.detectors.jitter_sigma_ps +
                  cfg_.detectors.dispersion_jitter_ps * cfg_.detectors.dispersion_jitter_ps);
    std::normal_distribution<double> jitter(0.0, sigma > 0 ? sigma : 1e-12);
    const double jclamp = 10.0 * sigma;

    std::vector<Candidate> ca, cb;
    while (next_emission_ps_ < seg_hi && next_emission_ps_ < duration_ps_) {
        ++pair_counter_;
        // Only emissions with at least one surviving photon are materialized;
        // the class probabilities are conditioned accordingly.
        const double u = uni(rng_outcome_);
        bool a_det, b_det;
        if (u < p_both) {
            a_det = b_det = true;
        } else if (u < p_both + p_a_only) {
            a_det = true;
            b_det = false;
        } else {
            a_det = false;
            b_det = true;
        }
        ca.clear();
        cb.clear();
        route_pair(probs, phase_a_, next_emission_ps_, pair_counter_, a_det, b_det,
                   rng_outcome_, ca, cb);
        for (auto* vec : {&ca, &cb}) {
            for (auto& c : *vec) {
                if (sigma > 0) {
                    double j = jitter(rng_jitter_);
                    j = std::clamp(j, -jclamp, jclamp);
                    c.t += static_cast<std::int64_t>(std::llround(j));
                }
                if (c.t < 0) c.t = 0;
                pending_[c.det_slot].push_back(c);
            }
        }
        advance_next_emission();
    }
}

void LinkSimulator::emit_dark_events(std::int64_t seg_lo, std::int64_t seg_hi) {
    if (cfg_.detectors.dark_rate_hz <= 0) return;
    const double span_s = static_cast<double>(seg_hi - seg_lo) * 1e-12;
    std::poisson_distribution<long> pois(cfg_.detectors.dark_rate_hz * span_s);
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    const int nslots = cfg_.source.alice_z_passive ? kDetSlots : kNumDetectors;
    static const Channel slot_logical[kDetSlots] = {
        Channel::AZ0, Channel::AX1, Channel::AX2, Channel::BZ1,
        Channel::BZ2, Channel::BX1, Channel::BX2, Channel::AZ1};
    for (int s = 0; s < nslots; ++s) {
        const long n = pois(rng_dark_);
        for (long i = 0; i < n; ++i) {
            Candidate c{};
            c.t = seg_lo + static_cast<std::int64_t>(uni(rng_dark_) *
                                                     static_cast<double>(seg_hi - seg_lo));
            c.det_slot = static_cast<std::uint8_t>(s);
            c.logical = slot_logical[s];
            c.dark = true;
            pending_[s].push_back(c);
        }
    }
}

void LinkSimulator::process_pending(std::int64_t safe_until, bool flush) {
    const std::int64_t dead = static_cast<std::int64_t>(std::llround(cfg_.detectors.dead_time_ps));
    const std::int64_t tau = static_cast<std::int64_t>(std::llround(cfg_.coherence.tau_delay_ps));
    for (int s = 0; s < kDetSlots; ++s) {
        auto& vec = pending_[s];
        if (vec.empty()) continue;
        std::sort(vec.begin(), vec.end(),
                  [](const Candidate& x, const Candidate& y) { return x.t < y.t; });
        std::size_t i = 0;
        for (; i < vec.size(); ++i) {
            const Candidate& c = vec[i];
            if (!flush && c.t >= safe_until) break;
            if (c.t - last_accept_[s] < dead) continue;
            last_accept_[s] = c.t;
            const bool is_alice = channel_is_alice(c.logical);
            SideState& side = is_alice ? alice_ : bob_;
            if (s == static_cast<int>(Detector::AZ) && !cfg_.source.alice_z_passive) {
                side.staged.push_back({c.t, Channel::AZ0});
                side.staged.push_back({c.t + tau, Channel::AZ1});
            } else if (is_alice) {
                side.staged.push_back({c.t, c.logical});
            } else {
                side.staged.push_back({c.t, c.logical});
            }
        }
        vec.erase(vec.begin(), vec.begin() + static_cast<std::ptrdiff_t>(i));
    }

    // Transform Bob's staged tags into his local clock lazily at sealing time.
    watermark_true_ = flush ? std::numeric_limits<std::int64_t>::max() / 4 : safe_until;
}

void LinkSimulator::seal_blocks(bool flush) {
    auto seal_side = [&](SideState& st, bool is_bob) {
        std::sort(st.staged.begin(), st.staged.end(),
                  [](const TimeTag& a, const TimeTag& b) { return a.time_ps < b.time_ps; });
        std::int64_t watermark_local =
            watermark_true_ >= std::numeric_limits<std::int64_t>::max() / 8
                ? std::numeric_limits<std::int64_t>::max() / 4
                : (is_bob ? clock_.transform(watermark_true_) : watermark_true_);
        // The AZ1 electrical copy of a not-yet-processed AZ event can only land
        // later than the watermark, so sealing strictly below it is safe.
        std::size_t consumed = 0;
        while (watermark_local - st.next_block_start >= kBlockSpanPs) {
            AcquisitionBlock blk;
            blk.index = st.next_index;
            blk.start_ps = st.next_block_start;
            blk.span_ps = kBlockSpanPs;
            const std::int64_t hi = st.next_block_start + kBlockSpanPs;
            while (consumed < st.staged.size()) {
                std::int64_t t = st.staged[consumed].time_ps;
                if (is_bob) t = clock_.transform(t);
                if (t >= hi) break;
                blk.tags.push_back({t, st.staged[consumed].channel});
                ++consumed;
            }
            st.next_block_start = hi;
            ++st.next_index;
            st.ready.push_back(std::move(blk));
            if (flush && end_block_start_reached(st, is_bob)) break;
        }
        st.staged.erase(st.staged.begin(), st.staged.begin() + static_cast<std::ptrdiff_t>(consumed));
    };
    seal_side(alice_, false);
    seal_side(bob_, true);
}

bool LinkSimulator::end_block_start_reached(const SideState& st, bool is_bob) const {
    const std::int64_t end_local =
        is_bob ? clock_.transform(duration_ps_ > 0 ? duration_ps_ - 1 : 0) : duration_ps_ - 1;
    return st.next_block_start > end_local;
}

void LinkSimulator::advance_segment() {
    if (exhausted_) return;
    const std::int64_t seg_lo = segment_lo_;
    const std::int64_t seg_hi = std::min(duration_ps_, seg_lo + kBlockSpanPs);
    emit_signal_events(seg_lo, seg_hi);
    emit_dark_events(seg_lo, seg_hi);
    const double sigma = cfg_.detectors.jitter_sigma_ps + cfg_.detectors.dispersion_jitter_ps;
    const std::int64_t margin = static_cast<std::int64_t>(std::llround(10.0 * sigma)) + 1000;
    const bool last = seg_hi >= duration_ps_;
    process_pending(seg_hi - margin, last);
    seal_blocks(last);
    segment_lo_ = seg_hi;
    if (last) exhausted_ = true;
}

std::optional<AcquisitionBlock> LinkSimulator::next_block(Side side) {
    SideState& st = side == Side::Alice ? alice_ : bob_;
    while (st.ready.empty() && !exhausted_) advance_segment();
    if (st.ready.empty() && exhausted_) {
        // Pad the tail so both sides cover the full run with (possibly empty)
        // blocks even after the light or the signal stops.
        if (!end_block_start_reached(st, side == Side::Bob)) {
            AcquisitionBlock blk;
            blk.index = st.next_index++;
            blk.start_ps = st.next_block_start;
            blk.span_ps = kBlockSpanPs;
            st.next_block_start += kBlockSpanPs;
            return blk;
        }
        return std::nullopt;
    }
    AcquisitionBlock blk = std::move(st.ready.front());
    st.ready.pop_front();
    return blk;
}

SimRun simulate(double duration_s, const SimConfig& cfg, std::uint64_t seed) {
    LinkSimulator sim(cfg, seed, duration_s);
    SimRun run;
    while (auto b = sim.next_block(Side::Alice)) run.alice.push_back(std::move(*b));
    while (auto b = sim.next_block(Side::Bob)) run.bob.push_back(std::move(*b));
    run.truth_offsets_per_s = sim.clock_path().per_second_offsets();
    return run;
}

} // namespace eqkd
