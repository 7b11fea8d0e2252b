// Pluggable 128-bit message authentication for the classical channel.
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace eqkd {

using MacTag = std::array<std::uint8_t, 16>;

class MacProvider {
public:
    virtual ~MacProvider() = default;
    virtual MacTag compute(std::span<const std::uint8_t> key,
                           std::span<const std::uint8_t> data) const = 0;
    virtual const char* name() const = 0;
};

// Default: keyed BLAKE2b with 16-byte output (libsodium crypto_generichash).
std::unique_ptr<MacProvider> make_mac(const std::string& algo);

std::vector<std::uint8_t> parse_hex_key(const std::string& hex);

} // namespace eqkd
