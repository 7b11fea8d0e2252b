#include <doctest.h>

#include <random>

#include "eqkd/bits.hpp"

using eqkd::BitVec;

TEST_CASE("bitvec basic set/get/flip") {
    BitVec v(130);
    CHECK(v.size() == 130);
    CHECK_FALSE(v.get(0));
    v.set(0, true);
    v.set(129, true);
    CHECK(v.get(0));
    CHECK(v.get(129));
    CHECK(v.popcount() == 2);
    v.flip(0);
    CHECK_FALSE(v.get(0));
    CHECK(v.popcount() == 1);
}

TEST_CASE("bitvec parity equals popcount mod 2") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 1 + rng() % 300;
        const BitVec v = BitVec::random(n, rng);
        CHECK(v.parity() == (v.popcount() % 2 == 1));
    }
}

TEST_CASE("bitvec byte round trip") {
    std::mt19937_64 rng(9);
    for (std::size_t n : {1u, 7u, 8u, 63u, 64u, 65u, 1000u}) {
        const BitVec v = BitVec::random(n, rng);
        const auto bytes = v.to_bytes();
        CHECK(BitVec::from_bytes(bytes.data(), n) == v);
    }
}

TEST_CASE("bitvec xor is bitwise") {
    std::mt19937_64 rng(11);
    const BitVec a = BitVec::random(200, rng);
    const BitVec b = BitVec::random(200, rng);
    const BitVec c = a ^ b;
    for (std::size_t i = 0; i < 200; ++i) CHECK(c.get(i) == (a.get(i) != b.get(i)));
}

TEST_CASE("bitvec push_back and append") {
    BitVec v;
    for (int i = 0; i < 100; ++i) v.push_back(i % 3 == 0);
    CHECK(v.size() == 100);
    for (int i = 0; i < 100; ++i) CHECK(v.get(static_cast<std::size_t>(i)) == (i % 3 == 0));
    BitVec w(5);
    w.set(2, true);
    v.append(w);
    CHECK(v.size() == 105);
    CHECK(v.get(102));
}
