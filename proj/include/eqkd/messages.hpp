// Wire protocol: framed, MAC-authenticated messages and their payload codecs.
//
// Frame layout (little-endian):
//   magic "EQKD" (4) | version (1) | type (1) | context id (8) | payload
//   length (4) | payload | MAC-128 over header+payload (16)
#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "eqkd/bits.hpp"
#include "eqkd/mac.hpp"
#include "eqkd/cascade.hpp"
#include "eqkd/sifting.hpp"

namespace eqkd {

inline constexpr std::uint8_t kProtocolVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 18;
inline constexpr std::size_t kFrameMacSize = 16;

enum class MsgType : std::uint8_t {
    Announcement = 1,
    SiftResponse = 2,
    CascadeParity = 3,
    CascadeSearch = 4,
    VerifyHash = 5,
    PASeed = 6,
    KeyConfirm = 7,
    ClockPing = 8,
    RateGate = 9,
    Abort = 10,
};

struct Message {
    MsgType type = MsgType::ClockPing;
    std::uint64_t context_id = 0; // block / period id
    std::vector<std::uint8_t> payload;
};

enum class DecodeError { BadMagic, BadVersion, BadType, BadMac, Truncated };
const char* decode_error_name(DecodeError e);

std::vector<std::uint8_t> encode_message(const Message& msg, const MacProvider& mac,
                                         std::span<const std::uint8_t> key);
std::variant<Message, DecodeError> decode_message(std::span<const std::uint8_t> frame,
                                                  const MacProvider& mac,
                                                  std::span<const std::uint8_t> key);

// Total frame size implied by a buffer holding at least the header, or
// nullopt if more header bytes are needed. Does not validate.
std::optional<std::size_t> frame_size(std::span<const std::uint8_t> partial);

// ---- payload codecs (throw std::runtime_error on malformed input) ----

std::vector<std::uint8_t> encode_announcement(const Announcement& a);
Announcement decode_announcement(std::span<const std::uint8_t> p);

std::vector<std::uint8_t> encode_sift_response(const SiftResponse& r);
SiftResponse decode_sift_response(std::span<const std::uint8_t> p);

std::vector<std::uint8_t> encode_parity_ranges(std::span<const ParityRange> ranges);
std::vector<ParityRange> decode_parity_ranges(std::span<const std::uint8_t> p);

std::vector<std::uint8_t> encode_parities(std::span<const std::uint8_t> bits);
std::vector<std::uint8_t> decode_parities(std::span<const std::uint8_t> p);

struct VerifyHashMsg {
    std::uint8_t stage = 0; // 0 = corrector -> reference, 1 = reply
    std::uint64_t seed = 0;
    std::uint64_t hash = 0;
    std::uint32_t flips = 0;
};
std::vector<std::uint8_t> encode_verify(const VerifyHashMsg& v);
VerifyHashMsg decode_verify(std::span<const std::uint8_t> p);

struct PASeedMsg {
    std::uint64_t l = 0;
    std::uint64_t n_x = 0;
    double phi_u = 0.0;
    std::uint64_t lambda_total = 0;
    BitVec seed; // n_z + l - 1 bits; empty when l == 0 (abort)
};
std::vector<std::uint8_t> encode_pa_seed(const PASeedMsg& m);
PASeedMsg decode_pa_seed(std::span<const std::uint8_t> p);

struct KeyConfirmMsg {
    std::uint8_t stage = 0; // 0 = alice -> bob, 1 = reply
    MacTag tag{};
};
std::vector<std::uint8_t> encode_key_confirm(const KeyConfirmMsg& m);
KeyConfirmMsg decode_key_confirm(std::span<const std::uint8_t> p);

struct ClockPingMsg {
    std::uint64_t config_hash = 0;
    std::uint64_t time_ps = 0;
    std::uint8_t role = 0; // 0 alice, 1 bob
};
std::vector<std::uint8_t> encode_clock_ping(const ClockPingMsg& m);
ClockPingMsg decode_clock_ping(std::span<const std::uint8_t> p);

struct RateGateMsg {
    std::uint8_t present = 0;
};
std::vector<std::uint8_t> encode_rate_gate(const RateGateMsg& m);
RateGateMsg decode_rate_gate(std::span<const std::uint8_t> p);

struct AbortMsg {
    std::uint32_t code = 0; // 0 = clean end of run
    std::string reason;
};
std::vector<std::uint8_t> encode_abort(const AbortMsg& m);
AbortMsg decode_abort(std::span<const std::uint8_t> p);

} // namespace eqkd
