#include "eqkd/cascade.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "eqkd/rng.hpp"

namespace eqkd {

std::uint32_t initial_block_size(double q_est, std::uint32_t n) {
    if (q_est <= 0.0) throw std::invalid_argument("initial_block_size: q_est must be > 0");
    q_est = std::min(q_est, 0.25);
    const double raw = std::ceil(0.8 / q_est);
    const std::uint32_t half = std::max<std::uint32_t>(1, n / 2);
    std::uint32_t k = raw >= static_cast<double>(half) ? half : static_cast<std::uint32_t>(raw);
    k = std::max<std::uint32_t>(8, k);
    k = std::min(k, half);
    return k;
}

bool block_parity(const BitVec& bits, std::span<const std::uint32_t> perm,
                  std::uint32_t lo, std::uint32_t hi) {
    bool p = false;
    for (std::uint32_t i = lo; i < hi; ++i) p ^= bits.get(perm[i]);
    return p;
}

namespace {

constexpr std::uint64_t kM61 = (std::uint64_t{1} << 61) - 1;

std::uint64_t mulmod61(std::uint64_t a, std::uint64_t b) {
    const unsigned __int128 t = static_cast<unsigned __int128>(a) * b;
    std::uint64_t lo = static_cast<std::uint64_t>(t) & kM61;
    std::uint64_t hi = static_cast<std::uint64_t>(t >> 61);
    std::uint64_t s = lo + hi;
    if (s >= kM61) s -= kM61;
    return s;
}

} // namespace

std::uint64_t verify_hash(const BitVec& bits, std::uint64_t seed) {
    // Polynomial evaluation over GF(2^61-1); 32-bit half-words as coefficients
    // keep the coefficient map injective.
    const std::uint64_t x = splitmix64(seed) % kM61;
    std::uint64_t h = 0;
    for (const std::uint64_t w : bits.words()) {
        h = mulmod61(h, x);
        std::uint64_t c = w & 0xffffffffULL;
        h = (h + c) % kM61;
        h = mulmod61(h, x);
        c = w >> 32;
        h = (h + c) % kM61;
    }
    // Fold in the length so padding differences cannot collide.
    h = mulmod61(h, x);
    h = (h + bits.size()) % kM61;
    return h;
}

std::vector<std::vector<std::uint32_t>> cascade_permutations(std::uint32_t n,
                                                             std::uint64_t session_seed,
                                                             int passes) {
    std::vector<std::vector<std::uint32_t>> perms(static_cast<std::size_t>(passes));
    for (int p = 0; p < passes; ++p) {
        auto& perm = perms[static_cast<std::size_t>(p)];
        perm.resize(n);
        std::iota(perm.begin(), perm.end(), 0u);
        std::mt19937_64 rng = make_rng(session_seed, "cascade-perm", static_cast<std::uint64_t>(p));
        for (std::uint32_t i = n; i > 1; --i) {
            const std::uint32_t j =
                static_cast<std::uint32_t>(rng() % static_cast<std::uint64_t>(i));
            std::swap(perm[i - 1], perm[j]);
        }
    }
    return perms;
}

// ---------------------------------------------------------------------------

CascadeReference::CascadeReference(BitVec block, std::uint64_t session_seed, int passes)
    : block_(std::move(block)),
      perms_(cascade_permutations(static_cast<std::uint32_t>(block_.size()), session_seed, passes)) {}

std::vector<std::uint8_t> CascadeReference::answer(std::span<const ParityRange> ranges) {
    std::vector<std::uint8_t> out;
    out.reserve(ranges.size());
    for (const auto& r : ranges) {
        if (r.pass >= perms_.size() || r.hi > block_.size() || r.lo >= r.hi)
            throw std::invalid_argument("cascade: bad parity range");
        out.push_back(block_parity(block_, perms_[r.pass], r.lo, r.hi) ? 1 : 0);
        ++disclosed_;
    }
    return out;
}

// ---------------------------------------------------------------------------

CascadeCorrector::CascadeCorrector(BitVec block, double q_est, std::uint64_t session_seed,
                                   int passes)
    : block_(std::move(block)), passes_(passes) {
    const std::uint32_t n = static_cast<std::uint32_t>(block_.size());
    perms_ = cascade_permutations(n, session_seed, passes);
    inv_perms_.resize(perms_.size());
    for (std::size_t p = 0; p < perms_.size(); ++p) {
        inv_perms_[p].resize(n);
        for (std::uint32_t i = 0; i < n; ++i) inv_perms_[p][perms_[p][i]] = i;
    }
    const std::uint32_t k1 = initial_block_size(q_est, n);
    const std::uint32_t half = std::max<std::uint32_t>(1, n / 2);
    k_.resize(static_cast<std::size_t>(passes));
    for (int p = 0; p < passes; ++p) {
        if (p == passes - 1) k_[static_cast<std::size_t>(p)] = half;
        else k_[static_cast<std::size_t>(p)] = std::min<std::uint32_t>(k1 << p, half);
    }
    ref_parity_.resize(perms_.size());
    have_ref_.resize(perms_.size());
    mismatch_.resize(perms_.size());
    bisection_budget_ =
        10 * std::max<std::uint64_t>(16, static_cast<std::uint64_t>(std::ceil(q_est * n)));
}

std::uint32_t CascadeCorrector::block_count(int pass) const {
    const std::uint32_t n = static_cast<std::uint32_t>(block_.size());
    const std::uint32_t k = k_[static_cast<std::size_t>(pass)];
    return (n + k - 1) / k;
}

bool CascadeCorrector::own_parity(int pass, std::uint32_t lo, std::uint32_t hi) const {
    return block_parity(block_, perms_[static_cast<std::size_t>(pass)], lo, hi);
}

void CascadeCorrector::flip_bit(std::uint32_t bit) {
    block_.flip(bit);
    ++flips_;
    for (int p = 0; p <= pass_initialized_; ++p) {
        const std::uint32_t pos = inv_perms_[static_cast<std::size_t>(p)][bit];
        const std::uint32_t b = pos / k_[static_cast<std::size_t>(p)];
        mismatch_[static_cast<std::size_t>(p)][b] ^= 1;
    }
}

void CascadeCorrector::start_pass(int pass) {
    awaiting_pass_ = pass;
}

void CascadeCorrector::refill_searches() {
    // Bisect all mismatched blocks of the lowest mismatched pass in parallel;
    // within one pass the ranges are disjoint, so concurrent flips are safe.
    for (int p = 0; p <= pass_initialized_; ++p) {
        const auto& mm = mismatch_[static_cast<std::size_t>(p)];
        std::vector<Search> batch;
        for (std::uint32_t b = 0; b < mm.size(); ++b) {
            if (!mm[b]) continue;
            const std::uint32_t k = k_[static_cast<std::size_t>(p)];
            const std::uint32_t lo = b * k;
            const std::uint32_t hi =
                std::min<std::uint32_t>(lo + k, static_cast<std::uint32_t>(block_.size()));
            batch.push_back({static_cast<std::uint8_t>(p), lo, hi});
        }
        if (!batch.empty()) {
            if (bisection_queries_ >= bisection_budget_) {
                budget_exhausted_ = true;
                done_ = true;
                return;
            }
            active_ = std::move(batch);
            return;
        }
    }
    active_.clear();
}

std::vector<ParityRange> CascadeCorrector::next_queries() {
    if (done_) return {};

    // Resolve single-bit searches locally before asking for more parities.
    for (;;) {
        bool progressed = false;
        for (auto it = active_.begin(); it != active_.end();) {
            if (it->hi - it->lo == 1) {
                flip_bit(perms_[it->pass][it->lo]);
                it = active_.erase(it);
                progressed = true;
            } else {
                ++it;
            }
        }
        if (active_.empty()) {
            refill_searches();
            if (done_) return {};
            if (!active_.empty()) continue;
            // No mismatches left: advance to the next pass or finish.
            if (pass_initialized_ + 1 < passes_) {
                start_pass(pass_initialized_ + 1);
                std::vector<ParityRange> q;
                const int p = awaiting_pass_;
                const std::uint32_t k = k_[static_cast<std::size_t>(p)];
                const std::uint32_t n = static_cast<std::uint32_t>(block_.size());
                for (std::uint32_t lo = 0; lo < n; lo += k)
                    q.push_back({static_cast<std::uint8_t>(p), lo, std::min(lo + k, n)});
                return q;
            }
            done_ = true;
            return {};
        }
        if (!progressed) break;
    }

    // Ask for the left half of every active bisection.
    std::vector<ParityRange> q;
    q.reserve(active_.size());
    for (const auto& s : active_) {
        const std::uint32_t mid = s.lo + (s.hi - s.lo) / 2;
        q.push_back({s.pass, s.lo, mid});
    }
    bisection_queries_ += q.size();
    return q;
}

void CascadeCorrector::consume(std::span<const std::uint8_t> parities) {
    received_ += parities.size();

    if (awaiting_pass_ >= 0) {
        const int p = awaiting_pass_;
        awaiting_pass_ = -1;
        const std::uint32_t nblocks = block_count(p);
        if (parities.size() != nblocks)
            throw std::invalid_argument("cascade: top-level parity count mismatch");
        auto& ref = ref_parity_[static_cast<std::size_t>(p)];
        auto& have = have_ref_[static_cast<std::size_t>(p)];
        auto& mm = mismatch_[static_cast<std::size_t>(p)];
        ref.assign(nblocks, false);
        have.assign(nblocks, true);
        mm.assign(nblocks, false);
        const std::uint32_t k = k_[static_cast<std::size_t>(p)];
        const std::uint32_t n = static_cast<std::uint32_t>(block_.size());
        for (std::uint32_t b = 0; b < nblocks; ++b) {
            ref[b] = parities[b];
            const std::uint32_t lo = b * k;
            mm[b] = own_parity(p, lo, std::min(lo + k, n)) != (ref[b] != 0) ? 1 : 0;
        }
        pass_initialized_ = std::max(pass_initialized_, p);
        return;
    }

    if (parities.size() != active_.size())
        throw std::invalid_argument("cascade: bisection parity count mismatch");
    for (std::size_t i = 0; i < active_.size(); ++i) {
        Search& s = active_[i];
        const std::uint32_t mid = s.lo + (s.hi - s.lo) / 2;
        const bool ref_left = parities[i] != 0;
        const bool own_left = own_parity(s.pass, s.lo, mid);
        if (ref_left != own_left) s.hi = mid;
        else s.lo = mid;
    }
}

// ---------------------------------------------------------------------------

CorrectionResult cascade_reconcile(const BitVec& reference, const BitVec& corrupted,
                                   double q_est, std::uint64_t session_seed,
                                   std::uint64_t verify_seed) {
    if (reference.size() != corrupted.size())
        throw std::invalid_argument("cascade_reconcile: block size mismatch");
    CascadeReference ref(reference, session_seed);
    CascadeCorrector cor(corrupted, q_est, session_seed);

    for (;;) {
        const auto queries = cor.next_queries();
        if (queries.empty()) break;
        const auto answers = ref.answer(queries);
        cor.consume(answers);
    }

    CorrectionResult res;
    res.corrected = cor.block();
    res.bits_disclosed = ref.bits_disclosed();
    res.errors_fixed = cor.errors_fixed();
    res.measured_qber =
        reference.size() ? static_cast<double>(res.errors_fixed) / static_cast<double>(reference.size())
                         : 0.0;
    res.verified = !cor.budget_exhausted() &&
                   ref.hash(verify_seed) == cor.hash(verify_seed);
    res.lambda_bits = res.bits_disclosed + kVerifyHashBits;
    return res;
}

} // namespace eqkd
