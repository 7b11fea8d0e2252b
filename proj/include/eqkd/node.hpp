// Alice/Bob node processes: acquisition gating, clock acquisition + tracking,
// sifting, interleaved Cascade sessions, periodic distillation and key
// confirmation, all over the authenticated message channel. Single-threaded
// event loops; stages communicate through explicit bounded queues.
#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "eqkd/cascade.hpp"
#include "eqkd/config.hpp"
#include "eqkd/distill.hpp"
#include "eqkd/keystore.hpp"
#include "eqkd/messages.hpp"
#include "eqkd/sifting.hpp"
#include "eqkd/sim_link.hpp"
#include "eqkd/tagfile.hpp"
#include "eqkd/timetag.hpp"
#include "eqkd/transport.hpp"

namespace eqkd {

class TagSource {
public:
    virtual ~TagSource() = default;
    virtual std::optional<AcquisitionBlock> next_block() = 0;
};

// One side of a shared LinkSimulator; all simulator access is serialized so
// the two node threads can pull concurrently.
class SimTagSource final : public TagSource {
public:
    SimTagSource(std::shared_ptr<LinkSimulator> sim, std::shared_ptr<std::mutex> mutex, Side side)
        : sim_(std::move(sim)), mutex_(std::move(mutex)), side_(side) {}

    std::optional<AcquisitionBlock> next_block() override {
        std::lock_guard lk(*mutex_);
        return sim_->next_block(side_);
    }
    void set_phase_a(double rad) {
        std::lock_guard lk(*mutex_);
        sim_->set_phase_a(rad);
    }

private:
    std::shared_ptr<LinkSimulator> sim_;
    std::shared_ptr<std::mutex> mutex_;
    Side side_;
};

// Replays a tag file, re-partitioning the records into 100 ms blocks.
class FileTagSource final : public TagSource {
public:
    explicit FileTagSource(const std::string& path) : reader_(path) {}
    std::optional<AcquisitionBlock> next_block() override;

private:
    TagFileReader reader_;
    std::optional<TimeTag> carry_;
    bool started_ = false;
    std::int64_t next_start_ = 0;
    std::uint64_t next_index_ = 0;
};

// Signal-presence decision from 1 ms detection counts vs the dark-count rate.
class RateGate {
public:
    RateGate(double total_dark_rate_hz, double factor, std::uint32_t consecutive_ms)
        : threshold_(std::max(1.0, factor * total_dark_rate_hz * 1e-3)),
          consecutive_ms_(consecutive_ms) {}

    // Feed one sealed block (1 ms binning happens inside).
    void feed(const AcquisitionBlock& block);
    bool present() const { return present_; }

private:
    double threshold_;
    std::uint32_t consecutive_ms_;
    std::uint32_t above_run_ = 0;
    std::uint32_t below_run_ = 0;
    bool present_ = false;
};

enum class NodePhase : std::uint8_t {
    WaitingForLight,
    Acquiring,
    Locked,
    Distilling,
    Aborted,
};
const char* node_phase_name(NodePhase p);

struct PeriodMetrics {
    std::uint64_t period_id = 0;
    std::uint64_t n_z = 0;
    std::uint64_t n_x = 0;
    double phi_x = 0.0;
    double phi_u = 0.0;
    std::uint64_t lambda_total = 0;
    std::uint64_t l = 0;
    double span_s = 0.0;   // link time covered by the period's raw blocks
    double skr_bps = 0.0;
    double qber_z_mean = 0.0;
    bool confirmed = false;
};

struct RunStats {
    NodePhase final_phase = NodePhase::WaitingForLight;
    std::uint64_t announcements = 0;
    std::uint64_t raw_blocks_sealed = 0;
    std::uint64_t blocks_verified = 0;
    std::uint64_t blocks_failed = 0;
    std::uint64_t periods_confirmed = 0;
    std::uint64_t periods_aborted = 0;
    std::uint64_t secret_bits = 0;
    std::uint64_t bad_mac_frames = 0;
    std::uint64_t relocks = 0;
    double qber_z_mean = 0.0; // over verified blocks
    std::vector<PeriodMetrics> periods;
    // Alice only: applied clock correction at each tracked second.
    std::vector<std::int64_t> track_time_ps;
    std::vector<double> track_offset_ps;
};

struct NodeOptions {
    SimConfig cfg;
    std::uint64_t run_seed = 1;
    std::string key_path;      // empty: keys kept in memory only
    std::string metrics_path;  // empty: no metrics file
    std::function<void(double)> phase_actuator; // Alice's piezo command
    double stall_timeout_s = 30.0; // watchdog for protocol stalls
};

class AliceNode {
public:
    AliceNode(NodeOptions opt, Transport& transport, TagSource& source);
    RunStats run();

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

class BobNode {
public:
    BobNode(NodeOptions opt, Transport& transport, TagSource& source);
    RunStats run();

private:
    struct Impl;
    std::shared_ptr<Impl> impl_;
};

// Session seed shared by both ends for a given correction block (derived from
// the pre-shared MAC key; permutations need no secrecy, only agreement).
std::uint64_t cascade_session_seed(const SimConfig& cfg, std::uint64_t block_id);

} // namespace eqkd
