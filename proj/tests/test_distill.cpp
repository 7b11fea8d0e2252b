#include <doctest.h>

#include <random>

#include "eqkd/distill.hpp"

using namespace eqkd;

namespace {

// Independent dense oracle: build T explicitly and multiply bit by bit.
BitVec dense_toeplitz(const BitVec& x, const BitVec& seed, std::size_t l) {
    const std::size_t n = x.size();
    BitVec out(l);
    for (std::size_t i = 0; i < l; ++i) {
        bool acc = false;
        for (std::size_t j = 0; j < n; ++j) {
            const bool t_ij = i >= j ? seed.get(i - j) : seed.get(l - 1 + (j - i));
            acc ^= t_ij && x.get(j);
        }
        out.set(i, acc);
    }
    return out;
}

} // namespace

TEST_CASE("binary entropy endpoints and reference values") {
    CHECK(binary_entropy(0.0) == 0.0);
    CHECK(binary_entropy(1.0) == 0.0);
    CHECK(binary_entropy(0.5) == doctest::Approx(1.0));
    // frozen from a high-precision evaluation
    CHECK(binary_entropy(0.05) == doctest::Approx(0.2863969571159561).epsilon(1e-12));
    CHECK_THROWS(binary_entropy(-0.01));
    CHECK_THROWS(binary_entropy(1.01));
}

TEST_CASE("leakage model") {
    CHECK(leakage_model(1.06, 16384, 0.05) == doctest::Approx(4973.8674101).epsilon(1e-9));
    CHECK(leakage_model(1.06, 16384, 0.0) == 0.0);
    CHECK(leakage_model(1.0, 16384, 0.5) == doctest::Approx(16384.0));
}

TEST_CASE("phase error upper bound") {
    // frozen from the independent oracle: dev = 0.034035794547672423
    const double phi = phase_error_upper_bound(0.02, 10'000, 1'638'400, 1e-10);
    CHECK(phi == doctest::Approx(0.02 + 0.0340357945476724).epsilon(1e-10));

    // eps -> 1 collapses the deviation term
    CHECK(phase_error_upper_bound(0.02, 10'000, 1'638'400, 1.0 - 1e-15)
          == doctest::Approx(0.02).epsilon(1e-6));

    // n_x -> infinity limit approaches phi_x
    CHECK(phase_error_upper_bound(0.02, 4'000'000'000ULL, 1'638'400, 1e-10)
          == doctest::Approx(0.02).epsilon(1e-2));

    // clamps at 0.5
    CHECK(phase_error_upper_bound(0.49, 10, 1'638'400, 1e-10) == 0.5);
    CHECK_THROWS(phase_error_upper_bound(0.02, 0, 100, 1e-10));
}

TEST_CASE("secret key length") {
    // frozen: floor(1638400*(1-h(0.05)) - 497387 - 66.4386) = 671713
    CHECK(secret_key_length(1'638'400, 0.05, 497'387.0, 1e-10) == 671'713);
    // phi_u >= 0.5 kills the key
    CHECK(secret_key_length(1'638'400, 0.5, 0.0, 1e-10) == 0);
    // only the extractor penalty: 2 log2(1e10) = 66.44, so n_z - 67 after floor
    CHECK(secret_key_length(1'638'400, 0.0, 0.0, 1e-10) == 1'638'400 - 67);
}

TEST_CASE("secret length monotone in phi_u and lambda") {
    std::mt19937_64 rng(31);
    std::uniform_real_distribution<double> uphi(0.0, 0.2), ulam(0.0, 4e5);
    for (int trial = 0; trial < 200; ++trial) {
        const double phi = uphi(rng);
        const double lam = ulam(rng);
        const auto l0 = secret_key_length(1'638'400, phi, lam, 1e-10);
        CHECK(secret_key_length(1'638'400, phi + 0.01, lam, 1e-10) <= l0);
        CHECK(secret_key_length(1'638'400, phi, lam + 1000.0, 1e-10) <= l0);
    }
}

TEST_CASE("toeplitz small hand-checkable case") {
    // n=3, l=2, seed bits s0..s3 = 1,0,1,1 (n + l - 1 = 4 bits)
    //   T = [ s0 s2 s3 ]   (first column s0,s1; first row continues s2,s3)
    //       [ s1 s0 s2 ]
    BitVec seed(4);
    seed.set(0, 1);
    seed.set(1, 0);
    seed.set(2, 1);
    seed.set(3, 1);
    BitVec x(3);
    x.set(0, 1);
    x.set(1, 0);
    x.set(2, 1);
    const BitVec got = toeplitz_extract(x, seed, 2);
    const BitVec want = dense_toeplitz(x, seed, 2);
    CHECK(got == want);
    // by hand: out0 = s0*1 ^ s2*0 ^ s3*1 = 1^1 = 0; out1 = s1*1 ^ s0*0 ^ s2*1 = 0^1 = 1
    CHECK(got.get(0) == 0);
    CHECK(got.get(1) == 1);
}

TEST_CASE("toeplitz equals dense oracle on random instances") {
    std::mt19937_64 rng(77);
    for (int trial = 0; trial < 40; ++trial) {
        const std::size_t n = 1 + rng() % 700;
        const std::size_t l = 1 + rng() % n;
        const BitVec x = BitVec::random(n, rng);
        const BitVec seed = BitVec::random(n + l - 1, rng);
        CHECK(toeplitz_extract(x, seed, l) == dense_toeplitz(x, seed, l));
    }
}

TEST_CASE("toeplitz properties") {
    std::mt19937_64 rng(78);
    const std::size_t n = 512, l = 200;
    const BitVec seed = BitVec::random(n + l - 1, rng);

    SUBCASE("all-zero seed maps everything to zero") {
        const BitVec zero_seed(n + l - 1);
        const BitVec x = BitVec::random(n, rng);
        CHECK(toeplitz_extract(x, zero_seed, l) == BitVec(l));
    }
    SUBCASE("linearity: T(x^y) = T(x)^T(y)") {
        for (int trial = 0; trial < 20; ++trial) {
            const BitVec x = BitVec::random(n, rng);
            const BitVec y = BitVec::random(n, rng);
            CHECK(toeplitz_extract(x ^ y, seed, l) ==
                  (toeplitz_extract(x, seed, l) ^ toeplitz_extract(y, seed, l)));
        }
    }
}

TEST_CASE("secret fraction at the nominal operating point") {
    // l/n_z at phi_u = 0.05, lambda = 1.06 * n_z * h(0.05): frozen oracle value
    const double nz = 1'638'400.0;
    const double lam = 1.06 * nz * binary_entropy(0.05);
    const auto l = secret_key_length(1'638'400, 0.05, lam, 1e-10);
    CHECK(static_cast<double>(l) / nz == doctest::Approx(0.409981).epsilon(2e-4));
}
