#include "eqkd/tagfile.hpp"

#include <cstring>
#include <stdexcept>

namespace eqkd {

namespace {
constexpr char kMagic[4] = {'E', 'Q', 'T', 'F'};
constexpr std::uint8_t kVersion = 1;

void put_u64(std::ofstream& f, std::uint64_t v) {
    std::uint8_t buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<std::uint8_t>(v >> (8 * i));
    f.write(reinterpret_cast<const char*>(buf), 8);
}
std::uint64_t get_u64(std::ifstream& f) {
    std::uint8_t buf[8];
    f.read(reinterpret_cast<char*>(buf), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{buf[i]} << (8 * i);
    return v;
}
} // namespace

TagFileWriter::TagFileWriter(const std::string& path, Side side, std::uint64_t config_hash,
                             std::uint64_t seed)
    : file_(path, std::ios::binary | std::ios::trunc) {
    if (!file_) throw std::runtime_error("cannot open tag file for writing: " + path);
    file_.write(kMagic, 4);
    file_.put(static_cast<char>(kVersion));
    file_.put(static_cast<char>(side));
    put_u64(file_, config_hash);
    put_u64(file_, seed);
}

void TagFileWriter::write(const TimeTag& tag) {
    put_u64(file_, static_cast<std::uint64_t>(tag.time_ps));
    file_.put(static_cast<char>(tag.channel));
    ++count_;
}

void TagFileWriter::write_block(const AcquisitionBlock& block) {
    for (const auto& t : block.tags) write(t);
}

TagFileReader::TagFileReader(const std::string& path) : file_(path, std::ios::binary) {
    if (!file_) throw std::runtime_error("cannot open tag file: " + path);
    char magic[4];
    file_.read(magic, 4);
    if (!file_ || std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("bad tag file magic: " + path);
    const int ver = file_.get();
    if (ver != kVersion) throw std::runtime_error("unsupported tag file version");
    side_ = static_cast<Side>(file_.get());
    config_hash_ = get_u64(file_);
    seed_ = get_u64(file_);
}

std::optional<TimeTag> TagFileReader::next() {
    std::uint8_t buf[9];
    file_.read(reinterpret_cast<char*>(buf), 9);
    if (!file_) return std::nullopt;
    std::uint64_t t = 0;
    for (int i = 0; i < 8; ++i) t |= std::uint64_t{buf[i]} << (8 * i);
    return TimeTag{static_cast<std::int64_t>(t), static_cast<Channel>(buf[8])};
}

} // namespace eqkd
