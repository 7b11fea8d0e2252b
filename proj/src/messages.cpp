#include "eqkd/messages.hpp"

#include <cstring>
#include <stdexcept>

namespace eqkd {

namespace {

constexpr char kMagic[4] = {'E', 'Q', 'K', 'D'};

void put_u8(std::vector<std::uint8_t>& v, std::uint8_t x) { v.push_back(x); }
void put_u32(std::vector<std::uint8_t>& v, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) v.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& v, std::uint64_t x) {
    for (int i = 0; i < 8; ++i) v.push_back(static_cast<std::uint8_t>(x >> (8 * i)));
}
void put_i64(std::vector<std::uint8_t>& v, std::int64_t x) {
    put_u64(v, static_cast<std::uint64_t>(x));
}
void put_f64(std::vector<std::uint8_t>& v, double x) {
    std::uint64_t u;
    std::memcpy(&u, &x, 8);
    put_u64(v, u);
}

struct Reader {
    std::span<const std::uint8_t> p;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > p.size()) throw std::runtime_error("payload truncated");
    }
    std::uint8_t u8() {
        need(1);
        return p[pos++];
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t x = 0;
        for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(p[pos++]) << (8 * i);
        return x;
    }
    std::uint64_t u64() {
        need(8);
        std::uint64_t x = 0;
        for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(p[pos++]) << (8 * i);
        return x;
    }
    std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
    double f64() {
        const std::uint64_t u = u64();
        double d;
        std::memcpy(&d, &u, 8);
        return d;
    }
    void bytes(std::uint8_t* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, p.data() + pos, n);
        pos += n;
    }
    void done() const {
        if (pos != p.size()) throw std::runtime_error("trailing bytes in payload");
    }
};

} // namespace

const char* decode_error_name(DecodeError e) {
    switch (e) {
        case DecodeError::BadMagic: return "BadMagic";
        case DecodeError::BadVersion: return "BadVersion";
        case DecodeError::BadType: return "BadType";
        case DecodeError::BadMac: return "BadMac";
        case DecodeError::Truncated: return "Truncated";
    }
    return "?";
}

std::vector<std::uint8_t> encode_message(const Message& msg, const MacProvider& mac,
                                         std::span<const std::uint8_t> key) {
    std::vector<std::uint8_t> out;
    out.reserve(kFrameHeaderSize + msg.payload.size() + kFrameMacSize);
    out.insert(out.end(), kMagic, kMagic + 4);
    put_u8(out, kProtocolVersion);
    put_u8(out, static_cast<std::uint8_t>(msg.type));
    put_u64(out, msg.context_id);
    put_u32(out, static_cast<std::uint32_t>(msg.payload.size()));
    out.insert(out.end(), msg.payload.begin(), msg.payload.end());
    const MacTag tag = mac.compute(key, out);
    out.insert(out.end(), tag.begin(), tag.end());
    return out;
}

std::optional<std::size_t> frame_size(std::span<const std::uint8_t> partial) {
    if (partial.size() < kFrameHeaderSize) return std::nullopt;
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i)
        len |= static_cast<std::uint32_t>(partial[14 + i]) << (8 * i);
    return kFrameHeaderSize + len + kFrameMacSize;
}

std::variant<Message, DecodeError> decode_message(std::span<const std::uint8_t> frame,
                                                  const MacProvider& mac,
                                                  std::span<const std::uint8_t> key) {
    if (frame.size() < kFrameHeaderSize + kFrameMacSize) return DecodeError::Truncated;
    if (std::memcmp(frame.data(), kMagic, 4) != 0) return DecodeError::BadMagic;
    if (frame[4] != kProtocolVersion) return DecodeError::BadVersion;
    const std::uint8_t type = frame[5];
    if (type < 1 || type > 10) return DecodeError::BadType;
    std::uint32_t len = 0;
    for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(frame[14 + i]) << (8 * i);
    if (frame.size() != kFrameHeaderSize + len + kFrameMacSize) return DecodeError::Truncated;

    const MacTag tag = mac.compute(key, frame.first(kFrameHeaderSize + len));
    if (std::memcmp(tag.data(), frame.data() + kFrameHeaderSize + len, kFrameMacSize) != 0)
        return DecodeError::BadMac;

    Message msg;
    msg.type = static_cast<MsgType>(type);
    msg.context_id = 0;
    for (int i = 0; i < 8; ++i)
        msg.context_id |= static_cast<std::uint64_t>(frame[6 + i]) << (8 * i);
    msg.payload.assign(frame.begin() + kFrameHeaderSize,
                       frame.begin() + kFrameHeaderSize + len);
    return msg;
}

// ---- payload codecs --------------------------------------------------------

std::vector<std::uint8_t> encode_announcement(const Announcement& a) {
    std::vector<std::uint8_t> v;
    v.reserve(16 + a.events.size() * 9);
    put_i64(v, a.block_start_ps);
    put_u32(v, static_cast<std::uint32_t>(a.events.size()));
    for (const auto& e : a.events) {
        put_i64(v, e.time_ps);
        put_u8(v, static_cast<std::uint8_t>((e.basis_x ? 1 : 0) |
                                            (e.basis_x && e.x_bit ? 2 : 0)));
    }
    return v;
}

Announcement decode_announcement(std::span<const std::uint8_t> p) {
    Reader r{p};
    Announcement a;
    a.block_start_ps = r.i64();
    const std::uint32_t n = r.u32();
    r.need(static_cast<std::size_t>(n) * 9);
    a.events.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        a.events[i].time_ps = r.i64();
        const std::uint8_t f = r.u8();
        a.events[i].basis_x = (f & 1) != 0;
        a.events[i].x_bit = (f & 2) ? 1 : 0;
    }
    r.done();
    return a;
}

std::vector<std::uint8_t> encode_sift_response(const SiftResponse& resp) {
    std::vector<std::uint8_t> v;
    put_u32(v, static_cast<std::uint32_t>(resp.z_match_indices.size()));
    for (const std::uint32_t i : resp.z_match_indices) put_u32(v, i);
    return v;
}

SiftResponse decode_sift_response(std::span<const std::uint8_t> p) {
    Reader r{p};
    SiftResponse resp;
    const std::uint32_t n = r.u32();
    r.need(static_cast<std::size_t>(n) * 4);
    resp.z_match_indices.resize(n);
    for (std::uint32_t i = 0; i < n; ++i) resp.z_match_indices[i] = r.u32();
    r.done();
    return resp;
}

std::vector<std::uint8_t> encode_parity_ranges(std::span<const ParityRange> ranges) {
    std::vector<std::uint8_t> v;
    put_u32(v, static_cast<std::uint32_t>(ranges.size()));
    for (const auto& rg : ranges) {
        put_u8(v, rg.pass);
        put_u32(v, rg.lo);
        put_u32(v, rg.hi);
    }
    return v;
}

std::vector<ParityRange> decode_parity_ranges(std::span<const std::uint8_t> p) {
    Reader r{p};
    const std::uint32_t n = r.u32();
    r.need(static_cast<std::size_t>(n) * 9);
    std::vector<ParityRange> out(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        out[i].pass = r.u8();
        out[i].lo = r.u32();
        out[i].hi = r.u32();
    }
    r.done();
    return out;
}

std::vector<std::uint8_t> encode_parities(std::span<const std::uint8_t> bits) {
    std::vector<std::uint8_t> v;
    put_u32(v, static_cast<std::uint32_t>(bits.size()));
    std::uint8_t cur = 0;
    for (std::size_t i = 0; i < bits.size(); ++i) {
        if (bits[i]) cur |= static_cast<std::uint8_t>(1u << (i % 8));
        if (i % 8 == 7) {
            v.push_back(cur);
            cur = 0;
        }
    }
    if (bits.size() % 8) v.push_back(cur);
    return v;
}

std::vector<std::uint8_t> decode_parities(std::span<const std::uint8_t> p) {
    Reader r{p};
    const std::uint32_t n = r.u32();
    const std::size_t nbytes = (n + 7) / 8;
    r.need(nbytes);
    std::vector<std::uint8_t> out(n);
    for (std::uint32_t i = 0; i < n; ++i)
        out[i] = (p[4 + i / 8] >> (i % 8)) & 1;
    r.pos += nbytes;
    r.done();
    return out;
}

std::vector<std::uint8_t> encode_verify(const VerifyHashMsg& m) {
    std::vector<std::uint8_t> v;
    put_u8(v, m.stage);
    put_u64(v, m.seed);
    put_u64(v, m.hash);
    put_u32(v, m.flips);
    return v;
}

VerifyHashMsg decode_verify(std::span<const std::uint8_t> p) {
    Reader r{p};
    VerifyHashMsg m;
    m.stage = r.u8();
    m.seed = r.u64();
    m.hash = r.u64();
    m.flips = r.u32();
    r.done();
    return m;
}

std::vector<std::uint8_t> encode_pa_seed(const PASeedMsg& m) {
    std::vector<std::uint8_t> v;
    put_u64(v, m.l);
    put_u64(v, m.n_x);
    put_f64(v, m.phi_u);
    put_u64(v, m.lambda_total);
    put_u32(v, static_cast<std::uint32_t>(m.seed.size()));
    const auto bytes = m.seed.to_bytes();
    v.insert(v.end(), bytes.begin(), bytes.end());
    return v;
}

PASeedMsg decode_pa_seed(std::span<const std::uint8_t> p) {
    Reader r{p};
    PASeedMsg m;
    m.l = r.u64();
    m.n_x = r.u64();
    m.phi_u = r.f64();
    m.lambda_total = r.u64();
    const std::uint32_t nbits = r.u32();
    const std::size_t nbytes = (nbits + 7) / 8;
    r.need(nbytes);
    m.seed = BitVec::from_bytes(p.data() + r.pos, nbits);
    r.pos += nbytes;
    r.done();
    return m;
}

std::vector<std::uint8_t> encode_key_confirm(const KeyConfirmMsg& m) {
    std::vector<std::uint8_t> v;
    put_u8(v, m.stage);
    v.insert(v.end(), m.tag.begin(), m.tag.end());
    return v;
}

KeyConfirmMsg decode_key_confirm(std::span<const std::uint8_t> p) {
    Reader r{p};
    KeyConfirmMsg m;
    m.stage = r.u8();
    r.bytes(m.tag.data(), m.tag.size());
    r.done();
    return m;
}

std::vector<std::uint8_t> encode_clock_ping(const ClockPingMsg& m) {
    std::vector<std::uint8_t> v;
    put_u64(v, m.config_hash);
    put_u64(v, m.time_ps);
    put_u8(v, m.role);
    return v;
}

ClockPingMsg decode_clock_ping(std::span<const std::uint8_t> p) {
    Reader r{p};
    ClockPingMsg m;
    m.config_hash = r.u64();
    m.time_ps = r.u64();
    m.role = r.u8();
    r.done();
    return m;
}

std::vector<std::uint8_t> encode_rate_gate(const RateGateMsg& m) {
    return {m.present};
}

RateGateMsg decode_rate_gate(std::span<const std::uint8_t> p) {
    Reader r{p};
    RateGateMsg m;
    m.present = r.u8();
    r.done();
    return m;
}

std::vector<std::uint8_t> encode_abort(const AbortMsg& m) {
    std::vector<std::uint8_t> v;
    put_u32(v, m.code);
    put_u32(v, static_cast<std::uint32_t>(m.reason.size()));
    v.insert(v.end(), m.reason.begin(), m.reason.end());
    return v;
}

AbortMsg decode_abort(std::span<const std::uint8_t> p) {
    Reader r{p};
    AbortMsg m;
    m.code = r.u32();
    const std::uint32_t n = r.u32();
    r.need(n);
    m.reason.assign(reinterpret_cast<const char*>(p.data()) + r.pos, n);
    r.pos += n;
    r.done();
    return m;
}

} // namespace eqkd
