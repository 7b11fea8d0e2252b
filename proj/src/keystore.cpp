#include "eqkd/keystore.hpp"

#include <cstring>
#include <stdexcept>

namespace eqkd {

namespace {

constexpr char kMagic[4] = {'E', 'Q', 'K', 'S'};
constexpr std::uint8_t kVersion = 1;

template <typename T>
void write_le(std::ofstream& f, T v) {
    std::uint8_t buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf[i] = static_cast<std::uint8_t>(static_cast<std::uint64_t>(v) >> (8 * i));
    f.write(reinterpret_cast<const char*>(buf), sizeof buf);
}

template <typename T>
T read_le(std::ifstream& f) {
    std::uint8_t buf[sizeof(T)];
    f.read(reinterpret_cast<char*>(buf), sizeof buf);
    if (!f) throw std::runtime_error("key store truncated");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t{buf[i]} << (8 * i);
    return static_cast<T>(v);
}

} // namespace

KeyStore::KeyStore(const std::string& path, std::uint64_t config_hash, std::uint64_t seed)
    : path_(path),
      file_(path, std::ios::binary | std::ios::trunc),
      index_(path + ".index", std::ios::trunc) {
    if (!file_) throw std::runtime_error("cannot open key store: " + path);
    file_.write(kMagic, 4);
    file_.put(static_cast<char>(kVersion));
    write_le<std::uint64_t>(file_, config_hash);
    write_le<std::uint64_t>(file_, seed);
    index_ << "# key_id period_id length_bits phi_u lambda\n";
}

void KeyStore::append(const KeyRecord& rec) {
    write_le<std::uint64_t>(file_, rec.key_id);
    write_le<std::uint64_t>(file_, rec.period_id);
    write_le<std::uint64_t>(file_, rec.n_z);
    std::uint64_t phi_bits;
    std::memcpy(&phi_bits, &rec.phi_u, 8);
    write_le<std::uint64_t>(file_, phi_bits);
    write_le<std::uint64_t>(file_, rec.lambda_total);
    write_le<std::uint32_t>(file_, static_cast<std::uint32_t>(rec.bits.size()));
    const auto bytes = rec.bits.to_bytes();
    file_.write(reinterpret_cast<const char*>(bytes.data()),
                static_cast<std::streamsize>(bytes.size()));
    file_.flush();
    index_ << rec.key_id << ' ' << rec.period_id << ' ' << rec.bits.size() << ' ' << rec.phi_u
           << ' ' << rec.lambda_total << '\n';
    index_.flush();
}

void KeyStore::read_header(const std::string& path, std::uint64_t& config_hash,
                           std::uint64_t& seed) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open key store: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad key store magic: " + path);
    const int ver = f.get();
    if (ver != kVersion) throw std::runtime_error("unsupported key store version");
    config_hash = read_le<std::uint64_t>(f);
    seed = read_le<std::uint64_t>(f);
}

std::vector<KeyRecord> KeyStore::read_all(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open key store: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad key store magic: " + path);
    f.get(); // version
    read_le<std::uint64_t>(f);
    read_le<std::uint64_t>(f);

    std::vector<KeyRecord> out;
    for (;;) {
        KeyRecord rec;
        if (f.peek() == std::ifstream::traits_type::eof()) break;
        rec.key_id = read_le<std::uint64_t>(f);
        rec.period_id = read_le<std::uint64_t>(f);
        rec.n_z = read_le<std::uint64_t>(f);
        const std::uint64_t phi_bits = read_le<std::uint64_t>(f);
        std::memcpy(&rec.phi_u, &phi_bits, 8);
        rec.lambda_total = read_le<std::uint64_t>(f);
        const std::uint32_t nbits = read_le<std::uint32_t>(f);
        std::vector<std::uint8_t> bytes((nbits + 7) / 8);
        f.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("key store truncated");
        rec.bits = BitVec::from_bytes(bytes.data(), nbits);
        out.push_back(std::move(rec));
    }
    return out;
}

} // namespace eqkd
