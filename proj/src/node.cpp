#include "eqkd/node.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <thread>

#include "eqkd/rng.hpp"

namespace eqkd {

namespace {

constexpr std::int64_t kSiftMarginPs = 10'000'000'000;   // 10 ms ingest margin
constexpr std::int64_t kRingKeepPs = 400'000'000'000;    // 400 ms of own tags
constexpr std::size_t kMaxGatedBlocks = 64;              // sync pairing buffer

std::uint64_t shared_secret(const SimConfig& cfg) {
    return fnv1a64(cfg.security.mac_key_hex) ^ cfg.hash();
}

double clamp_q(double q) { return std::clamp(q, 1e-3, 0.25); }

struct PeriodEntry {
    std::uint64_t block_id = 0;
    BitVec bits;
    std::uint64_t lambda = 0;
    double qber = 0.0;
    XBasisStats x_stats;           // Alice only
    std::int64_t sealed_at_ps = 0; // local watermark when the raw block sealed
};

// Groups verified blocks into periods in block-id order; failed blocks are
// skipped, unresolved ones stall later periods so both sides group alike.
class PeriodAssembler {
public:
    explicit PeriodAssembler(std::uint32_t k) : k_(k) {}

    void resolve(std::uint64_t block_id, std::optional<PeriodEntry> verified_entry) {
        resolved_[block_id] = std::move(verified_entry);
    }

    // Completed period, if the next k verified blocks are all settled.
    std::optional<std::vector<PeriodEntry>> try_seal() {
        for (;;) {
            auto it = resolved_.find(next_block_);
            if (it == resolved_.end()) return std::nullopt;
            if (it->second) current_.push_back(std::move(*it->second));
            resolved_.erase(it);
            ++next_block_;
            if (current_.size() == k_) {
                std::vector<PeriodEntry> out = std::move(current_);
                current_.clear();
                return out;
            }
        }
    }

private:
    std::uint32_t k_;
    std::uint64_t next_block_ = 0;
    std::map<std::uint64_t, std::optional<PeriodEntry>> resolved_;
    std::vector<PeriodEntry> current_;
};

struct Endpoint {
    NodeOptions opt;
    Transport& tr;
    std::unique_ptr<MacProvider> mac;
    std::vector<std::uint8_t> psk;
    RunStats stats;
    std::chrono::steady_clock::time_point last_progress;
    std::ofstream metrics;

    Endpoint(NodeOptions o, Transport& t) : opt(std::move(o)), tr(t) {
        mac = make_mac(opt.cfg.security.mac_algo);
        psk = parse_hex_key(opt.cfg.security.mac_key_hex);
        last_progress = std::chrono::steady_clock::now();
        if (!opt.metrics_path.empty()) metrics.open(opt.metrics_path, std::ios::trunc);
    }

    void send(MsgType type, std::uint64_t ctx, std::vector<std::uint8_t> payload) {
        Message m;
        m.type = type;
        m.context_id = ctx;
        m.payload = std::move(payload);
        tr.send(encode_message(m, *mac, psk));
    }

    std::optional<Message> poll() {
        auto frame = tr.recv(0);
        if (!frame) return std::nullopt;
        auto decoded = decode_message(*frame, *mac, psk);
        if (std::holds_alternative<DecodeError>(decoded)) {
            ++stats.bad_mac_frames; // dropped; counter covers all decode failures
            return std::nullopt;
        }
        return std::get<Message>(std::move(decoded));
    }

    void progress() { last_progress = std::chrono::steady_clock::now(); }
    bool stalled() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - last_progress)
                   .count() > opt.stall_timeout_s;
    }

    MacTag confirm_tag(std::uint64_t period, char role, const BitVec& key_bits) const {
        std::vector<std::uint8_t> data;
        data.push_back(static_cast<std::uint8_t>(role));
        for (int i = 0; i < 8; ++i) data.push_back(static_cast<std::uint8_t>(period >> (8 * i)));
        const auto kb = key_bits.to_bytes();
        data.insert(data.end(), kb.begin(), kb.end());
        return mac->compute(psk, data);
    }

    void write_period_metrics(const PeriodMetrics& pm) {
        stats.periods.push_back(pm);
        if (!metrics.is_open()) return;
        metrics << "{\"period\":" << pm.period_id << ",\"n_z\":" << pm.n_z
                << ",\"n_x\":" << pm.n_x << ",\"phi_x\":" << pm.phi_x
                << ",\"phi_u\":" << pm.phi_u << ",\"lambda\":" << pm.lambda_total
                << ",\"l\":" << pm.l << ",\"skr_bps\":" << pm.skr_bps
                << ",\"qber_z\":" << pm.qber_z_mean
                << ",\"confirmed\":" << (pm.confirmed ? "true" : "false") << "}\n";
        metrics.flush();
    }
};

} // namespace

const char* node_phase_name(NodePhase p) {
    switch (p) {
        case NodePhase::WaitingForLight: return "WaitingForLight";
        case NodePhase::Acquiring: return "Acquiring";
        case NodePhase::Locked: return "Locked";
        case NodePhase::Distilling: return "Distilling";
        case NodePhase::Aborted: return "Aborted";
    }
    return "?";
}

std::uint64_t cascade_session_seed(const SimConfig& cfg, std::uint64_t block_id) {
    return derive_seed(shared_secret(cfg), "cascade-session", block_id);
}

void RateGate::feed(const AcquisitionBlock& block) {
    const std::uint32_t nbins = static_cast<std::uint32_t>(block.span_ps / 1'000'000'000);
    std::vector<std::uint32_t> bins(std::max(1u, nbins), 0);
    for (const auto& t : block.tags) {
        const std::int64_t rel = t.time_ps - block.start_ps;
        const std::size_t b = std::min<std::size_t>(bins.size() - 1,
                                                    static_cast<std::size_t>(rel / 1'000'000'000));
        ++bins[b];
    }
    for (const std::uint32_t c : bins) {
        if (static_cast<double>(c) > threshold_) {
            ++above_run_;
            below_run_ = 0;
            if (!present_ && above_run_ >= consecutive_ms_) present_ = true;
        } else {
            above_run_ = 0;
            // De-assert with hysteresis: half the threshold, ten times the dwell.
            if (static_cast<double>(c) < threshold_ / 2) {
                ++below_run_;
                if (present_ && below_run_ >= 10 * consecutive_ms_) present_ = false;
            } else {
                below_run_ = 0;
            }
        }
    }
}

std::optional<AcquisitionBlock> FileTagSource::next_block() {
    AcquisitionBlock blk;
    blk.span_ps = kBlockSpanPs;
    for (;;) {
        std::optional<TimeTag> tag = carry_ ? carry_ : reader_.next();
        carry_.reset();
        if (!tag) {
            if (!started_) return std::nullopt;
            if (blk.tags.empty()) return std::nullopt;
            blk.index = next_index_++;
            blk.start_ps = next_start_;
            return blk;
        }
        if (!started_) {
            started_ = true;
            next_start_ = (tag->time_ps / kBlockSpanPs) * kBlockSpanPs;
        }
        if (tag->time_ps >= next_start_ + kBlockSpanPs) {
            carry_ = tag;
            blk.index = next_index_++;
            blk.start_ps = next_start_;
            next_start_ += kBlockSpanPs;
            return blk;
        }
        blk.tags.push_back(*tag);
    }
}

// ===========================================================================
// Alice
// ===========================================================================

struct AliceNode::Impl {
    Endpoint ep;
    TagSource& src;

    NodePhase phase = NodePhase::WaitingForLight;
    RateGate gate;
    bool bob_present = false;
    bool source_done = false;
    bool peer_done = false;
    bool sent_done = false;

    // Own tag stream.
    std::vector<TimeTag> ring;
    std::int64_t watermark_ps = 0;

    // Sync.
    struct GatedBlock {
        std::int64_t start_ps;
        std::vector<std::int64_t> times;
    };
    std::deque<GatedBlock> own_gated;
    SyncAcquirer acquirer;
    std::optional<ClockTracker> tracker;
    std::vector<std::int64_t> residual_bucket;
    std::int64_t bucket_end_ps = 0;

    // Sifting / raw key.
    std::deque<Announcement> pending_ann;
    RawBlockAccumulator accumulator;
    PhaseController controller;
    std::vector<XCoincidence> x_since_seal;
    std::uint64_t x_insufficient_blocks = 0;

    // Cascade reference sessions and per-block bookkeeping.
    struct RefSession {
        CascadeReference ref;
        XBasisStats x_stats;
        std::int64_t sealed_at_ps;
        BitVec bits;
    };
    std::map<std::uint64_t, RefSession> sessions;

    PeriodAssembler assembler;
    std::uint64_t period_counter = 0;
    std::int64_t period_anchor_ps = -1;   // watermark at lock / previous period end
    struct PendingConfirm {
        BitVec key;
        KeyRecord rec;
        PeriodMetrics pm;
    };
    std::map<std::uint64_t, PendingConfirm> awaiting_confirm;
    std::unique_ptr<KeyStore> store;
    std::mt19937_64 pa_rng;

    Impl(NodeOptions opt, Transport& tr, TagSource& s)
        : ep(std::move(opt), tr),
          src(s),
          gate(3.0 * ep.opt.cfg.detectors.dark_rate_hz, ep.opt.cfg.network.rate_gate_factor,
               ep.opt.cfg.network.rate_gate_consecutive_ms),
          accumulator(ep.opt.cfg.distill.n_ec),
          controller(ep.opt.cfg.source.phase_a_rad),
          assembler(ep.opt.cfg.distill.k_blocks),
          pa_rng(make_rng(ep.opt.run_seed, "pa-seed")) {
        if (ep.opt.phase_actuator) ep.opt.phase_actuator(controller.command());
    }

    void ingest_own_block(const AcquisitionBlock& blk) {
        gate.feed(blk);
        watermark_ps = blk.start_ps + blk.span_ps;
        ring.insert(ring.end(), blk.tags.begin(), blk.tags.end());
        if (!ring.empty() && ring.front().time_ps < watermark_ps - kRingKeepPs) {
            const std::int64_t cutoff = watermark_ps - kRingKeepPs;
            auto it = std::lower_bound(ring.begin(), ring.end(), cutoff,
                                       [](const TimeTag& t, std::int64_t v) { return t.time_ps < v; });
            ring.erase(ring.begin(), it);
        }
        if (gate.present()) {
            GatedBlock gb;
            gb.start_ps = blk.start_ps;
            gb.times.reserve(blk.tags.size());
            for (const auto& t : blk.tags) gb.times.push_back(t.time_ps);
            own_gated.push_back(std::move(gb));
            while (own_gated.size() > kMaxGatedBlocks) own_gated.pop_front();
            if (phase == NodePhase::WaitingForLight && bob_present) phase = NodePhase::Acquiring;
        }
    }

    std::span<const TimeTag> ring_window(std::int64_t lo, std::int64_t hi) const {
        auto first = std::lower_bound(ring.begin(), ring.end(), lo,
                                      [](const TimeTag& t, std::int64_t v) { return t.time_ps < v; });
        auto last = std::lower_bound(ring.begin(), ring.end(), hi,
                                     [](const TimeTag& t, std::int64_t v) { return t.time_ps < v; });
        if (first == last) return {};
        return {&*first, static_cast<std::size_t>(last - first)};
    }

    bool try_acquire(const Announcement& ann) {
        // Pair the announcement with the own gated block of matching start
        // time (clock offsets well below the block span).
        while (!own_gated.empty() &&
               own_gated.front().start_ps < ann.block_start_ps - kBlockSpanPs / 2)
            own_gated.pop_front();
        if (own_gated.empty() ||
            own_gated.front().start_ps > ann.block_start_ps + kBlockSpanPs / 2)
            return false; // own block not there (yet); caller decides to wait or drop
        std::vector<std::int64_t> bob_times;
        bob_times.reserve(ann.events.size());
        for (const auto& e : ann.events) bob_times.push_back(e.time_ps);
        auto est = acquirer.feed(own_gated.front().times, bob_times);
        own_gated.pop_front();
        if (est) {
            est->last_update_ps = watermark_ps;
            tracker.emplace(*est);
            residual_bucket.clear();
            bucket_end_ps = 0;
            phase = NodePhase::Locked;
            if (period_anchor_ps < 0) period_anchor_ps = watermark_ps;
        }
        return true;
    }

    void collect_residuals(const Announcement& ann, const ClockEstimate& est) {
        if (ann.events.empty()) return;
        std::vector<std::int64_t> corrected;
        corrected.reserve(ann.events.size());
        for (const auto& e : ann.events)
            corrected.push_back(e.time_ps -
                                static_cast<std::int64_t>(std::llround(est.correction_at(e.time_ps))));
        const std::int64_t lo = corrected.front() - ClockTracker::kSearchHalfRangePs;
        const std::int64_t hi = corrected.back() + ClockTracker::kSearchHalfRangePs;
        const auto own = ring_window(lo, hi);
        std::size_t j = 0;
        for (const std::int64_t tb : corrected) {
            while (j < own.size() && own[j].time_ps < tb - ClockTracker::kSearchHalfRangePs) ++j;
            for (std::size_t k = j; k < own.size(); ++k) {
                const std::int64_t d = tb - own[k].time_ps; // corrected_bob - alice
                if (d < -ClockTracker::kSearchHalfRangePs) break;
                residual_bucket.push_back(d);
            }
        }
    }

    void flush_tracker_bucket(std::int64_t now_ps) {
        if (!tracker) return;
        const auto status = tracker->update(residual_bucket, now_ps);
        residual_bucket.clear();
        if (status == ClockTracker::Status::LostLock) {
            ++ep.stats.relocks;
            tracker.reset();
            acquirer.reset();
            phase = NodePhase::Acquiring;
            return;
        }
        ep.stats.track_time_ps.push_back(now_ps);
        ep.stats.track_offset_ps.push_back(tracker->estimate().offset_ps);
    }

    void handle_announcement(const Announcement& ann) {
        ++ep.stats.announcements;
        SiftResponse resp;
        resp.block_index = ann.block_index;
        std::vector<std::uint8_t> alice_bits;
        std::vector<XCoincidence> x_out;

        if (phase == NodePhase::Acquiring) {
            try_acquire(ann);
        } else if ((phase == NodePhase::Locked || phase == NodePhase::Distilling) && tracker) {
            const ClockEstimate est = tracker->estimate();
            // Per-second tracking bucket, in Alice-local time.
            const std::int64_t corrected_start =
                ann.block_start_ps -
                static_cast<std::int64_t>(std::llround(est.correction_at(ann.block_start_ps)));
            if (bucket_end_ps == 0)
                bucket_end_ps = (corrected_start / kPsPerSecond + 1) * kPsPerSecond;
            if (corrected_start >= bucket_end_ps) {
                flush_tracker_bucket(bucket_end_ps);
                while (bucket_end_ps <= corrected_start) bucket_end_ps += kPsPerSecond;
            }
            if (tracker) {
                collect_residuals(ann, tracker->estimate());
                const auto lo = corrected_start - kBlockSpanPs;
                const auto hi = corrected_start + 2 * kBlockSpanPs;
                const auto outcome = sift_match(
                    ring_window(lo, hi), ann, tracker->estimate(),
                    static_cast<std::int64_t>(ep.opt.cfg.source.window_ps));
                resp = outcome.response;
                alice_bits = outcome.alice_z_bits;
                x_out = outcome.x_outcomes;
            }
        }

        ep.send(MsgType::SiftResponse, ann.block_index, encode_sift_response(resp));

        if (!x_out.empty())
            x_since_seal.insert(x_since_seal.end(), x_out.begin(), x_out.end());
        if (!alice_bits.empty()) {
            for (auto& blk : accumulator.push(alice_bits, ann.block_index)) seal_raw_block(blk);
        }
    }

    void seal_raw_block(RawKeyBlock& blk) {
        ++ep.stats.raw_blocks_sealed;
        if (phase == NodePhase::Locked) phase = NodePhase::Distilling;

        // X statistics and the phase feedback run once per correction block.
        XBasisStats xs;
        std::optional<double> q;
        try {
            xs = estimate_qber_x(x_since_seal, ep.opt.cfg.distill.x_stats_floor);
            q = xs.qber_x();
        } catch (const InsufficientStatistics&) {
            ++x_insufficient_blocks;
            for (const auto& o : x_since_seal) {
                if (o.alice_bit == o.bob_bit) ++xs.correlated;
                else ++xs.anticorrelated;
            }
        }
        x_since_seal.clear();
        const double cmd = controller.step(q);
        if (ep.opt.phase_actuator) ep.opt.phase_actuator(cmd);

        RefSession sess{CascadeReference(blk.bits, cascade_session_seed(ep.opt.cfg, blk.id)),
                        xs, watermark_ps, blk.bits};
        sessions.emplace(blk.id, std::move(sess));
    }

    void handle_cascade_search(const Message& msg) {
        auto it = sessions.find(msg.context_id);
        if (it == sessions.end()) return; // unknown block: drop
        const auto ranges = decode_parity_ranges(msg.payload);
        const auto parities = it->second.ref.answer(ranges);
        ep.send(MsgType::CascadeParity, msg.context_id, encode_parities(parities));
    }

    void handle_verify(const Message& msg) {
        auto it = sessions.find(msg.context_id);
        if (it == sessions.end()) return;
        const VerifyHashMsg v = decode_verify(msg.payload);
        const std::uint64_t mine = it->second.ref.hash(v.seed);
        VerifyHashMsg reply;
        reply.stage = 1;
        reply.seed = v.seed;
        reply.hash = mine;
        reply.flips = v.flips;
        ep.send(MsgType::VerifyHash, msg.context_id, encode_verify(reply));

        const bool verified = mine == v.hash;
        if (verified) {
            ++ep.stats.blocks_verified;
            const double qber =
                static_cast<double>(v.flips) / static_cast<double>(it->second.bits.size());
            ep.stats.qber_z_mean += qber;
            PeriodEntry e;
            e.block_id = msg.context_id;
            e.bits = std::move(it->second.bits);
            e.lambda = it->second.ref.bits_disclosed() + kVerifyHashBits;
            e.qber = qber;
            e.x_stats = it->second.x_stats;
            e.sealed_at_ps = it->second.sealed_at_ps;
            assembler.resolve(msg.context_id, std::move(e));
        } else {
            ++ep.stats.blocks_failed;
            assembler.resolve(msg.context_id, std::nullopt);
        }
        sessions.erase(it);
        while (auto period = assembler.try_seal()) distill_period(std::move(*period));
    }

    void distill_period(std::vector<PeriodEntry> entries) {
        const std::uint64_t period = period_counter++;
        const auto& d = ep.opt.cfg.distill;

        BitVec all(0);
        XBasisStats xs;
        std::uint64_t lambda = 0;
        double qber_sum = 0.0;
        std::int64_t lo = entries.front().sealed_at_ps, hi = entries.front().sealed_at_ps;
        for (const auto& e : entries) {
            all.append(e.bits);
            xs.correlated += e.x_stats.correlated;
            xs.anticorrelated += e.x_stats.anticorrelated;
            lambda += e.lambda;
            qber_sum += e.qber;
            lo = std::min(lo, e.sealed_at_ps);
            hi = std::max(hi, e.sealed_at_ps);
        }
        const std::uint64_t n_z = all.size();
        const std::uint64_t n_x = xs.total();

        PASeedMsg seed_msg;
        seed_msg.n_x = n_x;
        seed_msg.lambda_total = lambda;

        SecurityEstimate sec = estimate_security(n_z, xs.qber_x(), n_x, lambda, d.eps_pe, d.eps_hash);
        seed_msg.phi_u = sec.phi_u;
        seed_msg.l = sec.l;

        PeriodMetrics pm;
        pm.period_id = period;
        pm.n_z = n_z;
        pm.n_x = n_x;
        pm.phi_x = xs.qber_x();
        pm.phi_u = sec.phi_u;
        pm.lambda_total = lambda;
        pm.l = sec.l;
        pm.qber_z_mean = qber_sum / static_cast<double>(entries.size());
        const std::int64_t span_lo = period_anchor_ps >= 0 ? std::min(period_anchor_ps, lo) : lo;
        pm.span_s = std::max(0.1, static_cast<double>(hi - span_lo) * 1e-12);
        period_anchor_ps = hi;
        pm.skr_bps = static_cast<double>(sec.l) / pm.span_s;

        if (sec.l == 0) {
            seed_msg.seed = BitVec(0);
            ep.send(MsgType::PASeed, period, encode_pa_seed(seed_msg));
            ++ep.stats.periods_aborted;
            pm.confirmed = false;
            ep.write_period_metrics(pm);
            return;
        }

        seed_msg.seed = BitVec::random(n_z + sec.l - 1, pa_rng);
        ep.send(MsgType::PASeed, period, encode_pa_seed(seed_msg));

        PendingConfirm pc;
        pc.key = toeplitz_extract(all, seed_msg.seed, sec.l);
        pc.rec.key_id = period;
        pc.rec.period_id = period;
        pc.rec.n_z = n_z;
        pc.rec.phi_u = sec.phi_u;
        pc.rec.lambda_total = lambda;
        pc.rec.bits = pc.key;
        pc.pm = pm;

        KeyConfirmMsg kc;
        kc.stage = 0;
        kc.tag = ep.confirm_tag(period, 'A', pc.key);
        ep.send(MsgType::KeyConfirm, period, encode_key_confirm(kc));
        awaiting_confirm.emplace(period, std::move(pc));
    }

    void handle_key_confirm(const Message& msg) {
        auto it = awaiting_confirm.find(msg.context_id);
        if (it == awaiting_confirm.end()) return;
        const KeyConfirmMsg kc = decode_key_confirm(msg.payload);
        if (kc.stage != 1) return;
        const MacTag expect = ep.confirm_tag(msg.context_id, 'B', it->second.key);
        if (expect == kc.tag) {
            commit_key(it->second);
        } else {
            ++ep.stats.periods_aborted;
            it->second.pm.confirmed = false;
            ep.write_period_metrics(it->second.pm);
        }
        awaiting_confirm.erase(it);
    }

    void commit_key(PendingConfirm& pc) {
        ++ep.stats.periods_confirmed;
        ep.stats.secret_bits += pc.key.size();
        pc.pm.confirmed = true;
        ep.write_period_metrics(pc.pm);
        if (!ep.opt.key_path.empty()) {
            if (!store)
                store = std::make_unique<KeyStore>(ep.opt.key_path, ep.opt.cfg.hash(),
                                                   ep.opt.run_seed);
            store->append(pc.rec);
        }
    }

    RunStats run() {
        bool sent_gate = false;
        try {
            ClockPingMsg hello;
            hello.config_hash = ep.opt.cfg.hash();
            hello.role = 0;
            ep.send(MsgType::ClockPing, 0, encode_clock_ping(hello));

            for (;;) {
                bool progress = false;

                if (!source_done) {
                    auto blk = src.next_block();
                    if (!blk) {
                        source_done = true;
                        watermark_ps = std::numeric_limits<std::int64_t>::max() / 4;
                    } else {
                        ingest_own_block(*blk);
                        if (gate.present() && !sent_gate) {
                            ep.send(MsgType::RateGate, 0, encode_rate_gate({1}));
                            sent_gate = true;
                        }
                    }
                    progress = true;
                }

                while (auto msg = ep.poll()) {
                    progress = true;
                    dispatch(*msg);
                }

                // Process announcements the own stream has caught up with.
                while (!pending_ann.empty()) {
                    const auto& ann = pending_ann.front();
                    const std::int64_t approx_end = ann.block_start_ps + kBlockSpanPs;
                    if (!source_done && watermark_ps < approx_end + kSiftMarginPs) break;
                    handle_announcement(ann);
                    pending_ann.pop_front();
                    progress = true;
                }

                if (peer_done && pending_ann.empty() && awaiting_confirm.empty() && !sent_done) {
                    ep.send(MsgType::Abort, 0, encode_abort({0, "end-of-run"}));
                    sent_done = true;
                }
                if (sent_done && peer_done) break;

                if (progress) {
                    ep.progress();
                } else {
                    if (ep.stalled()) {
                        phase = NodePhase::Aborted;
                        try {
                            ep.send(MsgType::Abort, 0, encode_abort({2, "stall"}));
                        } catch (...) {
                        }
                        break;
                    }
                    std::this_thread::sleep_for(std::chrono::microseconds(200));
                }
            }
        } catch (const TransportClosed&) {
            peer_done = true; // peer went away; keep whatever was confirmed
        }

        if (ep.stats.blocks_verified)
            ep.stats.qber_z_mean /= static_cast<double>(ep.stats.blocks_verified);
        ep.stats.final_phase = phase;
        return std::move(ep.stats);
    }

    void dispatch(const Message& msg) {
        switch (msg.type) {
            case MsgType::Announcement: {
                Announcement ann = decode_announcement(msg.payload);
                ann.block_index = msg.context_id;
                pending_ann.push_back(std::move(ann));
                break;
            }
            case MsgType::RateGate:
                bob_present = decode_rate_gate(msg.payload).present != 0;
                if (bob_present && gate.present() && phase == NodePhase::WaitingForLight)
                    phase = NodePhase::Acquiring;
                break;
            case MsgType::CascadeSearch:
                handle_cascade_search(msg);
                break;
            case MsgType::VerifyHash:
                handle_verify(msg);
                break;
            case MsgType::KeyConfirm:
                handle_key_confirm(msg);
                break;
            case MsgType::ClockPing:
                break; // hello; config hash checked by Bob side too
            case MsgType::Abort: {
                const AbortMsg a = decode_abort(msg.payload);
                peer_done = true;
                if (a.code != 0) phase = NodePhase::Aborted;
                break;
            }
            default:
                break;
        }
    }
};

AliceNode::AliceNode(NodeOptions opt, Transport& transport, TagSource& source)
    : impl_(std::make_shared<Impl>(std::move(opt), transport, source)) {}

RunStats AliceNode::run() { return impl_->run(); }

// ===========================================================================
// Bob
// ===========================================================================

struct BobNode::Impl {
    Endpoint ep;
    TagSource& src;

    NodePhase phase = NodePhase::WaitingForLight;
    RateGate gate;
    bool gate_sent = false;
    bool source_done = false;
    bool peer_done = false;
    bool sent_done = false;

    // Announced blocks awaiting their SiftResponse: per event, the Z bit or -1.
    std::map<std::uint64_t, std::vector<std::int8_t>> outstanding;

    RawBlockAccumulator accumulator;
    double q_est;

    struct CorSession {
        CascadeCorrector cor;
        std::vector<ParityRange> outstanding_query;
        std::int64_t sealed_at_ps;
    };
    std::map<std::uint64_t, CorSession> sessions;
    struct VerifyPending {
        std::uint64_t seed;
        std::uint64_t my_hash;
        std::uint32_t flips;
        std::uint64_t lambda;
        BitVec corrected;
        std::int64_t sealed_at_ps;
    };
    std::map<std::uint64_t, VerifyPending> verifying;

    PeriodAssembler assembler;
    std::int64_t period_anchor_ps = -1;
    std::map<std::uint64_t, std::vector<PeriodEntry>> sealed_periods; // awaiting PASeed
    std::uint64_t period_counter = 0;
    std::map<std::uint64_t, PeriodMetrics> period_meta;
    struct BobKey {
        BitVec key;
        KeyRecord rec;
    };
    std::map<std::uint64_t, BobKey> keys_pending; // awaiting Alice's KeyConfirm
    std::unique_ptr<KeyStore> store;
    std::mt19937_64 verify_rng;
    std::int64_t watermark_ps = 0;

    Impl(NodeOptions opt, Transport& tr, TagSource& s)
        : ep(std::move(opt), tr),
          src(s),
          gate(4.0 * ep.opt.cfg.detectors.dark_rate_hz, ep.opt.cfg.network.rate_gate_factor,
               ep.opt.cfg.network.rate_gate_consecutive_ms),
          accumulator(ep.opt.cfg.distill.n_ec),
          q_est(ep.opt.cfg.distill.cascade_q_bootstrap),
          assembler(ep.opt.cfg.distill.k_blocks),
          verify_rng(make_rng(ep.opt.run_seed, "verify-seed")) {}

    void announce(const AcquisitionBlock& blk) {
        const Announcement ann = build_announcement(blk);
        std::vector<std::int8_t> zbits(ann.events.size(), -1);
        for (std::size_t i = 0; i < blk.tags.size(); ++i) {
            if (!channel_is_basis_x(blk.tags[i].channel))
                zbits[i] = static_cast<std::int8_t>(channel_bit(blk.tags[i].channel));
        }
        outstanding.emplace(blk.index, std::move(zbits));
        ep.send(MsgType::Announcement, blk.index, encode_announcement(ann));
        if (phase == NodePhase::WaitingForLight) phase = NodePhase::Acquiring;
    }

    void handle_sift_response(const Message& msg) {
        const SiftResponse resp = decode_sift_response(msg.payload);
        auto it = outstanding.find(msg.context_id);
        if (it == outstanding.end()) return; // duplicate or unknown: idempotent ignore
        std::vector<std::uint8_t> bits;
        bits.reserve(resp.z_match_indices.size());
        std::uint32_t prev = 0;
        bool first = true;
        for (const std::uint32_t idx : resp.z_match_indices) {
            if (idx >= it->second.size()) continue;       // malformed index
            if (!first && idx <= prev) continue;          // must be strictly increasing
            if (it->second[idx] < 0) continue;            // X event referenced: not key material
            bits.push_back(static_cast<std::uint8_t>(it->second[idx]));
            prev = idx;
            first = false;
        }
        outstanding.erase(it);
        if (!bits.empty()) {
            if (phase == NodePhase::Acquiring) phase = NodePhase::Locked;
            if (period_anchor_ps < 0) period_anchor_ps = watermark_ps;
            for (auto& blk : accumulator.push(bits, msg.context_id)) seal_raw_block(blk);
        }
    }

    void seal_raw_block(RawKeyBlock& blk) {
        ++ep.stats.raw_blocks_sealed;
        phase = NodePhase::Distilling;
        CorSession sess{CascadeCorrector(blk.bits, q_est, cascade_session_seed(ep.opt.cfg, blk.id)),
                        {}, watermark_ps};
        auto [it, ok] = sessions.emplace(blk.id, std::move(sess));
        (void)ok;
        pump_session(blk.id, it->second);
    }

    void pump_session(std::uint64_t block_id, CorSession& sess) {
        const auto queries = sess.cor.next_queries();
        if (!queries.empty()) {
            sess.outstanding_query = queries;
            ep.send(MsgType::CascadeSearch, block_id, encode_parity_ranges(queries));
            return;
        }
        // Correction finished: exchange verification hashes.
        VerifyPending vp;
        vp.seed = verify_rng();
        vp.my_hash = sess.cor.hash(vp.seed);
        vp.flips = sess.cor.errors_fixed();
        vp.lambda = sess.cor.parities_received() + kVerifyHashBits;
        vp.corrected = sess.cor.block();
        vp.sealed_at_ps = sess.sealed_at_ps;
        VerifyHashMsg v;
        v.stage = 0;
        v.seed = vp.seed;
        v.hash = vp.my_hash;
        v.flips = vp.flips;
        ep.send(MsgType::VerifyHash, block_id, encode_verify(v));
        verifying.emplace(block_id, std::move(vp));
        sessions.erase(block_id);
    }

    void handle_cascade_parity(const Message& msg) {
        auto it = sessions.find(msg.context_id);
        if (it == sessions.end()) return;
        const auto parities = decode_parities(msg.payload);
        if (parities.size() != it->second.outstanding_query.size()) return; // protocol error
        it->second.cor.consume(parities);
        it->second.outstanding_query.clear();
        pump_session(msg.context_id, it->second);
    }

    void handle_verify_reply(const Message& msg) {
        auto it = verifying.find(msg.context_id);
        if (it == verifying.end()) return;
        const VerifyHashMsg v = decode_verify(msg.payload);
        const bool verified = v.hash == it->second.my_hash;
        if (verified) {
            ++ep.stats.blocks_verified;
            const double qber = static_cast<double>(it->second.flips) /
                                static_cast<double>(it->second.corrected.size());
            ep.stats.qber_z_mean += qber;
            q_est = clamp_q(qber);
            PeriodEntry e;
            e.block_id = msg.context_id;
            e.bits = std::move(it->second.corrected);
            e.lambda = it->second.lambda;
            e.qber = qber;
            e.sealed_at_ps = it->second.sealed_at_ps;
            assembler.resolve(msg.context_id, std::move(e));
        } else {
            ++ep.stats.blocks_failed;
            assembler.resolve(msg.context_id, std::nullopt);
        }
        verifying.erase(it);
        while (auto period = assembler.try_seal()) {
            const std::uint64_t pid = period_counter++;
            sealed_periods.emplace(pid, std::move(*period));
        }
    }

    void handle_pa_seed(const Message& msg) {
        auto it = sealed_periods.find(msg.context_id);
        if (it == sealed_periods.end()) return;
        const PASeedMsg m = decode_pa_seed(msg.payload);
        const auto& d = ep.opt.cfg.distill;

        BitVec all(0);
        std::uint64_t lambda = 0;
        double qber_sum = 0.0;
        std::int64_t lo = it->second.front().sealed_at_ps, hi = lo;
        for (const auto& e : it->second) {
            all.append(e.bits);
            lambda += e.lambda;
            qber_sum += e.qber;
            lo = std::min(lo, e.sealed_at_ps);
            hi = std::max(hi, e.sealed_at_ps);
        }

        PeriodMetrics pm;
        pm.period_id = msg.context_id;
        pm.n_z = all.size();
        pm.n_x = m.n_x;
        pm.phi_x = 0.0;
        pm.phi_u = m.phi_u;
        pm.lambda_total = lambda;
        pm.l = m.l;
        pm.qber_z_mean = qber_sum / static_cast<double>(it->second.size());
        const std::int64_t span_lo = period_anchor_ps >= 0 ? std::min(period_anchor_ps, lo) : lo;
        pm.span_s = std::max(0.1, static_cast<double>(hi - span_lo) * 1e-12);
        period_anchor_ps = hi;
        pm.skr_bps = static_cast<double>(m.l) / pm.span_s;

        if (m.l == 0) {
            ++ep.stats.periods_aborted;
            pm.confirmed = false;
            ep.write_period_metrics(pm);
            sealed_periods.erase(it);
            return;
        }

        // Cross-check Alice's length against the bound with our own leakage
        // accounting; a longer key than the bound allows is a security fault.
        const std::uint64_t bound =
            secret_key_length(all.size(), m.phi_u, static_cast<double>(lambda), d.eps_hash);
        if (m.l > bound || m.seed.size() != all.size() + m.l - 1) {
            ep.send(MsgType::Abort, msg.context_id, encode_abort({4, "secret length bound violated"}));
            phase = NodePhase::Aborted;
            ++ep.stats.periods_aborted;
            pm.confirmed = false;
            ep.write_period_metrics(pm);
            sealed_periods.erase(it);
            return;
        }

        BobKey bk;
        bk.key = toeplitz_extract(all, m.seed, m.l);
        bk.rec.key_id = msg.context_id;
        bk.rec.period_id = msg.context_id;
        bk.rec.n_z = all.size();
        bk.rec.phi_u = m.phi_u;
        bk.rec.lambda_total = lambda;
        bk.rec.bits = bk.key;
        keys_pending.emplace(msg.context_id, std::move(bk));
        period_meta.emplace(msg.context_id, pm);
        sealed_periods.erase(it);
    }

    void handle_key_confirm(const Message& msg) {
        auto it = keys_pending.find(msg.context_id);
        if (it == keys_pending.end()) return;
        const KeyConfirmMsg kc = decode_key_confirm(msg.payload);
        if (kc.stage != 0) return;

        const MacTag expect_a = ep.confirm_tag(msg.context_id, 'A', it->second.key);
        KeyConfirmMsg reply;
        reply.stage = 1;
        reply.tag = ep.confirm_tag(msg.context_id, 'B', it->second.key);
        ep.send(MsgType::KeyConfirm, msg.context_id, encode_key_confirm(reply));

        PeriodMetrics pm = period_meta[msg.context_id];
        period_meta.erase(msg.context_id);
        if (expect_a == kc.tag) {
            ++ep.stats.periods_confirmed;
            ep.stats.secret_bits += it->second.key.size();
            pm.confirmed = true;
            ep.write_period_metrics(pm);
            if (!ep.opt.key_path.empty()) {
                if (!store)
                    store = std::make_unique<KeyStore>(ep.opt.key_path, ep.opt.cfg.hash(),
                                                       ep.opt.run_seed);
                store->append(it->second.rec);
            }
        } else {
            ++ep.stats.periods_aborted;
            pm.confirmed = false;
            ep.write_period_metrics(pm);
        }
        keys_pending.erase(it);
    }

    RunStats run() {
        try {
            ClockPingMsg hello;
            hello.config_hash = ep.opt.cfg.hash();
            hello.role = 1;
            ep.send(MsgType::ClockPing, 0, encode_clock_ping(hello));

            for (;;) {
                bool progress = false;

                if (!source_done && outstanding.size() < ep.opt.cfg.network.queue_depth) {
                    auto blk = src.next_block();
                    if (!blk) {
                        source_done = true;
                    } else {
                        watermark_ps = blk->start_ps + blk->span_ps;
                        gate.feed(*blk);
                        if (gate.present() != gate_sent) {
                            gate_sent = gate.present();
                            ep.send(MsgType::RateGate, 0,
                                    encode_rate_gate({static_cast<std::uint8_t>(gate_sent ? 1 : 0)}));
                        }
                        if (gate.present()) announce(*blk);
                    }
                    progress = true;
                }

                while (auto msg = ep.poll()) {
                    progress = true;
                    dispatch(*msg);
                }

                if (source_done && !sent_done && outstanding.empty() && sessions.empty() &&
                    verifying.empty()) {
                    ep.send(MsgType::Abort, 0, encode_abort({0, "end-of-run"}));
                    sent_done = true;
                }
                if (sent_done && peer_done) break;

                if (progress) {
                    ep.progress();
                } else {
                    if (ep.stalled()) {
                        phase = NodePhase::Aborted;
                        try {
                            ep.send(MsgType::Abort, 0, encode_abort({2, "stall"}));
                        } catch (...) {
                        }
                        break;
                    }
                    std::this_thread::sleep_for(std::chrono::microseconds(200));
                }
            }
        } catch (const TransportClosed&) {
            peer_done = true;
        }

        if (ep.stats.blocks_verified)
            ep.stats.qber_z_mean /= static_cast<double>(ep.stats.blocks_verified);
        ep.stats.final_phase = phase;
        return std::move(ep.stats);
    }

    void dispatch(const Message& msg) {
        switch (msg.type) {
            case MsgType::SiftResponse:
                handle_sift_response(msg);
                break;
            case MsgType::CascadeParity:
                handle_cascade_parity(msg);
                break;
            case MsgType::VerifyHash:
                handle_verify_reply(msg);
                break;
            case MsgType::PASeed:
                handle_pa_seed(msg);
                break;
            case MsgType::KeyConfirm:
                handle_key_confirm(msg);
                break;
            case MsgType::ClockPing: {
                const ClockPingMsg ping = decode_clock_ping(msg.payload);
                if (ping.config_hash != ep.opt.cfg.hash()) {
                    ep.send(MsgType::Abort, 0, encode_abort({1, "config hash mismatch"}));
                    phase = NodePhase::Aborted;
                    peer_done = true;
                    sent_done = true;
                }
                break;
            }
            case MsgType::Abort: {
                const AbortMsg a = decode_abort(msg.payload);
                peer_done = true;
                if (a.code != 0) phase = NodePhase::Aborted;
                break;
            }
            default:
                break;
        }
    }
};

BobNode::BobNode(NodeOptions opt, Transport& transport, TagSource& source)
    : impl_(std::make_shared<Impl>(std::move(opt), transport, source)) {}

RunStats BobNode::run() { return impl_->run(); }

} // namespace eqkd
