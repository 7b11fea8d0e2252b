#include "eqkd/mac.hpp"

#include <sodium.h>
#include <stdexcept>

namespace eqkd {

namespace {

class Blake2bMac final : public MacProvider {
public:
    MacTag compute(std::span<const std::uint8_t> key,
                   std::span<const std::uint8_t> data) const override {
        MacTag tag{};
        crypto_generichash(tag.data(), tag.size(), data.data(), data.size(),
                           key.data(), std::min<std::size_t>(key.size(),
                                                             crypto_generichash_KEYBYTES_MAX));
        return tag;
    }
    const char* name() const override { return "blake2b"; }
};

} // namespace

std::unique_ptr<MacProvider> make_mac(const std::string& algo) {
    if (sodium_init() < 0) throw std::runtime_error("libsodium init failed");
    if (algo == "blake2b" || algo.empty()) return std::make_unique<Blake2bMac>();
    throw std::invalid_argument("unknown MAC algorithm: " + algo);
}

std::vector<std::uint8_t> parse_hex_key(const std::string& hex) {
    if (hex.size() % 2 != 0) throw std::invalid_argument("hex key must have even length");
    std::vector<std::uint8_t> out(hex.size() / 2);
    auto nib = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw std::invalid_argument("bad hex digit in key");
    };
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<std::uint8_t>(nib(hex[2 * i]) << 4 | nib(hex[2 * i + 1]));
    return out;
}

} // namespace eqkd
