// Packed bit vector over 64-bit words, plus GF(2) helpers used by the
// error-correction and privacy-amplification stages.
#pragma once

#include <bit>
#include <cstdint>
#include <cstddef>
#include <random>
#include <stdexcept>
#include <vector>

namespace eqkd {

class BitVec {
public:
    BitVec() = default;
    explicit BitVec(std::size_t nbits) : nbits_(nbits), words_((nbits + 63) / 64, 0) {}

    static BitVec random(std::size_t nbits, std::mt19937_64& rng) {
        BitVec v(nbits);
        for (auto& w : v.words_) w = rng();
        v.trim();
        return v;
    }

    std::size_t size() const { return nbits_; }
    bool empty() const { return nbits_ == 0; }

    bool get(std::size_t i) const { return (words_[i >> 6] >> (i & 63)) & 1u; }
    void set(std::size_t i, bool b) {
        const std::uint64_t m = std::uint64_t{1} << (i & 63);
        if (b) words_[i >> 6] |= m; else words_[i >> 6] &= ~m;
    }
    void flip(std::size_t i) { words_[i >> 6] ^= std::uint64_t{1} << (i & 63); }

    void push_back(bool b) {
        if ((nbits_ & 63) == 0) words_.push_back(0);
        ++nbits_;
        set(nbits_ - 1, b);
    }

    void append(const BitVec& other) {
        for (std::size_t i = 0; i < other.size(); ++i) push_back(other.get(i));
    }

    std::size_t popcount() const {
        std::size_t n = 0;
        for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
        return n;
    }

    // Parity (XOR) of all bits.
    bool parity() const {
        std::uint64_t acc = 0;
        for (auto w : words_) acc ^= w;
        return std::popcount(acc) & 1u;
    }

    BitVec& operator^=(const BitVec& o) {
        if (o.nbits_ != nbits_) throw std::invalid_argument("BitVec xor: size mismatch");
        for (std::size_t i = 0; i < words_.size(); ++i) words_[i] ^= o.words_[i];
        return *this;
    }
    friend BitVec operator^(BitVec a, const BitVec& b) { a ^= b; return a; }

    bool operator==(const BitVec& o) const {
        return nbits_ == o.nbits_ && words_ == o.words_;
    }

    const std::vector<std::uint64_t>& words() const { return words_; }
    std::vector<std::uint64_t>& words() { return words_; }

    // Serialize to bytes, little-endian, ceil(n/8) bytes.
    std::vector<std::uint8_t> to_bytes() const {
        std::vector<std::uint8_t> out((nbits_ + 7) / 8, 0);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const std::uint64_t w = words_[i >> 3];
            out[i] = static_cast<std::uint8_t>(w >> ((i & 7) * 8));
        }
        return out;
    }
    static BitVec from_bytes(const std::uint8_t* data, std::size_t nbits) {
        BitVec v(nbits);
        for (std::size_t i = 0; i < (nbits + 7) / 8; ++i)
            v.words_[i >> 3] |= std::uint64_t{data[i]} << ((i & 7) * 8);
        v.trim();
        return v;
    }

    // Zero any bits beyond size() in the top word.
    void trim() {
        if (nbits_ & 63) words_.back() &= (std::uint64_t{1} << (nbits_ & 63)) - 1;
        if (words_.size() > (nbits_ + 63) / 64) words_.resize((nbits_ + 63) / 64);
    }

private:
    std::size_t nbits_ = 0;
    std::vector<std::uint64_t> words_;
};

} // namespace eqkd
