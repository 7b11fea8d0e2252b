// Interactive Cascade reconciliation over aligned key blocks. The corrector
// (Bob) drives all block partitioning and bisection; the reference (Alice) is
// a pure parity oracle, so both sides agree on the leakage by construction:
// every answered parity bit is one disclosed bit.
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "eqkd/bits.hpp"

namespace eqkd {

// First-pass block size k1 = ceil(0.8/q), clamped to [8, n/2].
std::uint32_t initial_block_size(double q_est, std::uint32_t n);

// XOR of bits[perm[i]] over i in [lo, hi).
bool block_parity(const BitVec& bits, std::span<const std::uint32_t> perm,
                  std::uint32_t lo, std::uint32_t hi);

// Polynomial block-verification hash over GF(2^61 - 1), seeded per block.
std::uint64_t verify_hash(const BitVec& bits, std::uint64_t seed);

// Shared per-pass permutations, derived from the session seed.
std::vector<std::vector<std::uint32_t>> cascade_permutations(std::uint32_t n,
                                                             std::uint64_t session_seed,
                                                             int passes);

// A parity query over the permuted index space of one pass.
struct ParityRange {
    std::uint8_t pass = 0;
    std::uint32_t lo = 0;
    std::uint32_t hi = 0; // half-open
};

// Reference side: answers parity queries over the fixed reference block.
class CascadeReference {
public:
    CascadeReference(BitVec block, std::uint64_t session_seed, int passes = 4);

    std::vector<std::uint8_t> answer(std::span<const ParityRange> ranges);
    std::uint64_t bits_disclosed() const { return disclosed_; }
    std::uint64_t hash(std::uint64_t seed) const { return verify_hash(block_, seed); }
    const BitVec& block() const { return block_; }

private:
    BitVec block_;
    std::vector<std::vector<std::uint32_t>> perms_;
    std::uint64_t disclosed_ = 0;
};

// Corrector side: four passes with block sizes k1, 2k1, 4k1, n/2, full
// backtracking across passes, strict query/answer alternation.
class CascadeCorrector {
public:
    CascadeCorrector(BitVec block, double q_est, std::uint64_t session_seed, int passes = 4);

    // Next batch of parity queries for the reference; empty batch = finished
    // (either corrected or budget exhausted).
    std::vector<ParityRange> next_queries();
    void consume(std::span<const std::uint8_t> parities);

    bool done() const { return done_; }
    bool budget_exhausted() const { return budget_exhausted_; }
    const BitVec& block() const { return block_; }
    std::uint32_t errors_fixed() const { return flips_; }
    std::uint64_t parities_received() const { return received_; }
    std::uint64_t hash(std::uint64_t seed) const { return verify_hash(block_, seed); }

private:
    struct Search { // bisection over permuted range [lo, hi) of pass p
        std::uint8_t pass;
        std::uint32_t lo, hi;
    };

    std::uint32_t block_count(int pass) const;
    std::uint32_t block_len(int pass) const { return k_[static_cast<std::size_t>(pass)]; }
    bool own_parity(int pass, std::uint32_t lo, std::uint32_t hi) const;
    void flip_bit(std::uint32_t bit);
    void refill_searches();
    void start_pass(int pass);

    BitVec block_;
    std::vector<std::vector<std::uint32_t>> perms_;
    std::vector<std::vector<std::uint32_t>> inv_perms_;
    std::vector<std::uint32_t> k_;                 // block size per pass
    std::vector<std::vector<std::uint8_t>> ref_parity_; // received top-level parities
    std::vector<std::vector<std::uint8_t>> have_ref_;   // parity known yet
    std::vector<std::vector<std::uint8_t>> mismatch_;   // own-vs-ref parity differs
    int passes_;
    int pass_initialized_ = -1;                    // highest pass with parities requested
    int awaiting_pass_ = -1;                       // pass of outstanding top-level query
    std::vector<Search> active_;                   // outstanding bisection queries
    std::uint32_t flips_ = 0;
    std::uint64_t received_ = 0;
    std::uint64_t bisection_queries_ = 0; // individual bisection probes issued
    std::uint64_t bisection_budget_ = 0;
    bool done_ = false;
    bool budget_exhausted_ = false;
};

struct CorrectionResult {
    BitVec corrected;             // corrector's block after reconciliation
    std::uint64_t bits_disclosed = 0; // parity bits exchanged
    std::uint32_t errors_fixed = 0;
    double measured_qber = 0.0;
    bool verified = false;
    std::uint64_t lambda_bits = 0; // bits_disclosed + verification-hash charge
};

inline constexpr std::uint64_t kVerifyHashBits = 64;

// In-process reconciliation (both ends visible); the node runs the same two
// state machines over the wire.
CorrectionResult cascade_reconcile(const BitVec& reference, const BitVec& corrupted,
                                   double q_est, std::uint64_t session_seed,
                                   std::uint64_t verify_seed);

} // namespace eqkd
