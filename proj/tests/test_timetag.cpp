#include <doctest.h>

#include <algorithm>
#include <random>

#include "eqkd/timetag.hpp"

using namespace eqkd;

namespace {

// O(N*M) oracle for the histogram.
CorrelationHistogram brute_histogram(const std::vector<std::int64_t>& a,
                                     const std::vector<std::int64_t>& b,
                                     std::int64_t center, std::int64_t half, std::int64_t bw) {
    CorrelationHistogram h;
    h.bin_width_ps = bw;
    h.center_ps = center;
    h.half_range_ps = half;
    h.counts.assign(static_cast<std::size_t>((2 * half + bw - 1) / bw), 0);
    const std::int64_t lo = center - half;
    const std::int64_t hi = lo + static_cast<std::int64_t>(h.counts.size()) * bw;
    for (const auto ta : a)
        for (const auto tb : b) {
            const std::int64_t d = tb - ta;
            if (d < lo || d >= hi) continue;
            ++h.counts[static_cast<std::size_t>((d - lo) / bw)];
            ++h.total_pairs;
        }
    return h;
}

// O(N*M log) oracle for the greedy matcher: repeatedly take the globally
// smallest |residual| pair (ties: earlier Bob tag, then earlier Alice tag).
std::vector<CoincidencePair> brute_match(const std::vector<TimeTag>& a,
                                         const std::vector<TimeTag>& b,
                                         std::int64_t offset, std::int64_t window) {
    struct C {
        std::int64_t absd, tb, ta;
        std::size_t i, j;
        std::int64_t d;
    };
    std::vector<C> cands;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < b.size(); ++j) {
            const std::int64_t d = b[j].time_ps - offset - a[i].time_ps;
            if (std::llabs(d) * 2 <= window) cands.push_back({std::llabs(d), b[j].time_ps,
                                                              a[i].time_ps, i, j, d});
        }
    std::stable_sort(cands.begin(), cands.end(), [](const C& x, const C& y) {
        if (x.absd != y.absd) return x.absd < y.absd;
        if (x.tb != y.tb) return x.tb < y.tb;
        if (x.ta != y.ta) return x.ta < y.ta;
        if (x.j != y.j) return x.j < y.j;
        return x.i < y.i;
    });
    std::vector<bool> ua(a.size()), ub(b.size());
    std::vector<CoincidencePair> out;
    for (const auto& c : cands) {
        if (ua[c.i] || ub[c.j]) continue;
        ua[c.i] = ub[c.j] = true;
        out.push_back({c.i, c.j, a[c.i].channel, b[c.j].channel, c.d});
    }
    std::sort(out.begin(), out.end(),
              [](const CoincidencePair& x, const CoincidencePair& y) {
                  return x.alice_index < y.alice_index;
              });
    return out;
}

std::vector<TimeTag> random_tags(std::mt19937_64& rng, std::size_t n, std::int64_t span) {
    std::vector<TimeTag> tags(n);
    for (auto& t : tags)
        t = {static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(span)),
             rng() % 2 ? Channel::AZ0 : Channel::AZ1};
    std::sort(tags.begin(), tags.end(),
              [](const TimeTag& x, const TimeTag& y) { return x.time_ps < y.time_ps; });
    return tags;
}

} // namespace

TEST_CASE("coarse offset is the first-tag difference") {
    const std::vector<std::int64_t> a{1'000'000, 2'000'000};
    const std::vector<std::int64_t> b{1'004'000, 2'100'000};
    CHECK(coarse_offset(a, b) == 4000);
    CHECK(coarse_offset(a, a) == 0);
    CHECK_THROWS_AS(coarse_offset(std::vector<std::int64_t>{}, b), EmptyBlockError);
}

TEST_CASE("histogram: single pair lands in the center bin") {
    const std::vector<std::int64_t> a{500};
    const std::vector<std::int64_t> b{500};
    const auto h = correlation_histogram(a, b, 0, 1000, 100);
    CHECK(h.total_pairs == 1);
    CHECK(h.counts[static_cast<std::size_t>((0 - h.lo_ps()) / h.bin_width_ps)] == 1);
}

TEST_CASE("histogram equals brute force on random inputs") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        const std::size_t n = 1 + rng() % 400;
        const std::size_t m = 1 + rng() % 400;
        std::vector<std::int64_t> a(n), b(m);
        for (auto& t : a) t = static_cast<std::int64_t>(rng() % 100'000);
        for (auto& t : b) t = static_cast<std::int64_t>(rng() % 100'000);
        std::sort(a.begin(), a.end());
        std::sort(b.begin(), b.end());
        const std::int64_t center = static_cast<std::int64_t>(rng() % 2000) - 1000;
        const std::int64_t half = 500 + static_cast<std::int64_t>(rng() % 5000);
        const std::int64_t bw = 1 + static_cast<std::int64_t>(rng() % 64);
        const auto fast = correlation_histogram(a, b, center, half, bw);
        const auto slow = brute_histogram(a, b, center, half, bw);
        REQUIRE(fast.counts.size() == slow.counts.size());
        CHECK(fast.total_pairs == slow.total_pairs);
        CHECK(fast.counts == slow.counts);
    }
}

TEST_CASE("flat histogram has no peak") {
    CorrelationHistogram h;
    h.bin_width_ps = 10;
    h.center_ps = 0;
    h.half_range_ps = 500;
    h.counts.assign(100, 7);
    CHECK_FALSE(locate_peak(h).has_value());
}

TEST_CASE("delta histogram peaks at the bin center") {
    CorrelationHistogram h;
    h.bin_width_ps = 10;
    h.center_ps = 0;
    h.half_range_ps = 500;
    h.counts.assign(100, 0);
    h.counts[40] = 200;
    const auto p = locate_peak(h);
    REQUIRE(p.has_value());
    CHECK(p->offset_ps == doctest::Approx(static_cast<double>(h.bin_center(40))));
    CHECK(p->significance > 5.0);
}

TEST_CASE("gaussian peak centroid recovers truth within 32 ps") {
    // sigma 42.5 ps, 1e4 events, 16 ps bins: the stage-3 configuration
    std::mt19937_64 rng(17);
    std::normal_distribution<double> noise(0.0, 42.5);
    int hits = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        const double truth = -3000.0 + 60.0 * t;
        CorrelationHistogram h;
        h.bin_width_ps = 16;
        h.center_ps = 0;
        h.half_range_ps = 40'000;
        h.counts.assign(static_cast<std::size_t>(2 * 40'000 / 16), 0);
        for (int i = 0; i < 10'000; ++i) {
            const auto d = static_cast<std::int64_t>(std::llround(truth + noise(rng)));
            const std::int64_t lo = h.lo_ps();
            if (d < lo || d >= lo + static_cast<std::int64_t>(h.counts.size()) * 16) continue;
            ++h.counts[static_cast<std::size_t>((d - lo) / 16)];
        }
        const auto p = locate_peak(h);
        REQUIRE(p.has_value());
        if (std::abs(p->offset_ps - truth) <= 32.0) ++hits;
    }
    CHECK(hits >= 99);
}

TEST_CASE("matching: simple construction") {
    const std::vector<TimeTag> a{{100, Channel::AZ0}};
    const std::vector<TimeTag> b{{100 + 4000 + 30, Channel::BZ1}};
    const auto pairs = match_coincidences(a, b, 4000, 128);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].residual_ps == 30);
    CHECK(match_coincidences({}, b, 4000, 128).empty());
}

TEST_CASE("matching prefers the nearest neighbour") {
    // both alice tags within the window of one bob tag; nearest wins
    const std::vector<TimeTag> a{{0, Channel::AZ0}, {50, Channel::AZ1}};
    const std::vector<TimeTag> b{{40, Channel::BZ1}};
    const auto pairs = match_coincidences(a, b, 0, 128);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].alice_index == 1);
    CHECK(pairs[0].residual_ps == -10);
}

TEST_CASE("matching equals the brute-force greedy oracle") {
    std::mt19937_64 rng(23);
    for (int trial = 0; trial < 60; ++trial) {
        const std::size_t n = 1 + rng() % 300;
        const std::size_t m = 1 + rng() % 300;
        // dense span so multi-candidate components occur
        const auto a = random_tags(rng, n, 20'000);
        const auto b = random_tags(rng, m, 20'000);
        const std::int64_t off = static_cast<std::int64_t>(rng() % 200) - 100;
        const auto fast = match_coincidences(a, b, off, 128);
        const auto slow = brute_match(a, b, off, 128);
        REQUIRE(fast.size() == slow.size());
        for (std::size_t i = 0; i < fast.size(); ++i) {
            CHECK(fast[i].alice_index == slow[i].alice_index);
            CHECK(fast[i].bob_index == slow[i].bob_index);
            CHECK(fast[i].residual_ps == slow[i].residual_ps);
        }
    }
}

TEST_CASE("matching properties") {
    std::mt19937_64 rng(29);
    const auto a = random_tags(rng, 500, 1'000'000);
    const auto b = random_tags(rng, 400, 1'000'000);
    const auto base = match_coincidences(a, b, 0, 128);
    CHECK(base.size() <= std::min(a.size(), b.size()));

    SUBCASE("invariant under global time translation") {
        std::vector<TimeTag> a2 = a, b2 = b;
        for (auto& t : a2) t.time_ps += 777'777;
        for (auto& t : b2) t.time_ps += 777'777;
        const auto shifted = match_coincidences(a2, b2, 0, 128);
        REQUIRE(shifted.size() == base.size());
        for (std::size_t i = 0; i < base.size(); ++i) {
            CHECK(shifted[i].alice_index == base[i].alice_index);
            CHECK(shifted[i].bob_index == base[i].bob_index);
            CHECK(shifted[i].residual_ps == base[i].residual_ps);
        }
    }
    SUBCASE("each tag used at most once") {
        std::vector<bool> ua(a.size()), ub(b.size());
        for (const auto& p : base) {
            CHECK_FALSE(ua[p.alice_index]);
            CHECK_FALSE(ub[p.bob_index]);
            ua[p.alice_index] = ub[p.bob_index] = true;
        }
    }
}

TEST_CASE("refine_offset recovers a synthetic offset to the ps level") {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> jitter(0.0, 42.5);
    const std::int64_t truth = 123'456;
    std::vector<std::int64_t> a, b;
    std::int64_t t = 0;
    for (int i = 0; i < 20'000; ++i) {
        t += static_cast<std::int64_t>(rng() % 2'000'000) + 1;
        a.push_back(t);
        b.push_back(t + truth + static_cast<std::int64_t>(std::llround(jitter(rng))));
    }
    const auto est = refine_offset(a, b, 123'000); // coarse off by 456 ps
    REQUIRE(est.has_value());
    CHECK(std::abs(est->offset_ps - static_cast<double>(truth)) < 32.0);
    CHECK(est->offset_uncertainty_ps > 0.0);
}

TEST_CASE("tracker follows constant skew and recovers from a step") {
    // synthetic residual generator: the "true" clock runs away from the
    // estimate; each second we hand the tracker residual samples
    std::mt19937_64 rng(43);
    std::normal_distribution<double> meas(0.0, 42.5);
    ClockEstimate init;
    init.offset_ps = 0.0;
    init.locked = true;
    ClockTracker tracker(init);

    double true_offset = 0.0;
    const double skew = 100.0; // ps/s
    int settled = 0;
    for (int s = 1; s <= 40; ++s) {
        true_offset += skew;
        const std::int64_t now = static_cast<std::int64_t>(s) * kPsPerSecond;
        const double err = true_offset - tracker.estimate().correction_at(now);
        std::vector<std::int64_t> residuals;
        for (int i = 0; i < 500; ++i)
            residuals.push_back(static_cast<std::int64_t>(std::llround(err + meas(rng))));
        const auto st = tracker.update(residuals, now);
        CHECK(st == ClockTracker::Status::Tracking);
        if (s > 20) {
            // steady state: per-second prediction error within the 32 ps budget
            if (std::abs(err) <= 32.0) ++settled;
        }
    }
    CHECK(settled >= 19);

    SUBCASE("1 ns step is reabsorbed within 3 updates") {
        double step_offset = true_offset + 1000.0;
        double last_err = 1e9;
        for (int s = 41; s <= 43; ++s) {
            step_offset += skew;
            const std::int64_t now = static_cast<std::int64_t>(s) * kPsPerSecond;
            last_err = step_offset - tracker.estimate().correction_at(now);
            std::vector<std::int64_t> residuals;
            for (int i = 0; i < 500; ++i)
                residuals.push_back(static_cast<std::int64_t>(std::llround(last_err + meas(rng))));
            tracker.update(residuals, now);
        }
        // after three post-step updates the prediction error collapsed
        const std::int64_t next = 44 * kPsPerSecond;
        const double err = (step_offset + skew) - tracker.estimate().correction_at(next);
        CHECK(std::abs(err) < 500.0);
    }
}

TEST_CASE("tracker declares lost lock after three empty seconds") {
    ClockEstimate init;
    init.locked = true;
    ClockTracker tracker(init);
    const std::vector<std::int64_t> empty;
    CHECK(tracker.update(empty, 1 * kPsPerSecond) == ClockTracker::Status::Coasting);
    CHECK(tracker.update(empty, 2 * kPsPerSecond) == ClockTracker::Status::Coasting);
    CHECK(tracker.update(empty, 3 * kPsPerSecond) == ClockTracker::Status::LostLock);
    CHECK_FALSE(tracker.estimate().locked);
}
