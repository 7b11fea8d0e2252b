// Tag-file format for offline replay: a small header (config hash + seed for
// reproducibility) followed by little-endian (u64 time_ps, u8 channel) records.
#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>

#include "eqkd/types.hpp"

namespace eqkd {

class TagFileWriter {
public:
    TagFileWriter(const std::string& path, Side side, std::uint64_t config_hash,
                  std::uint64_t seed);
    void write(const TimeTag& tag);
    void write_block(const AcquisitionBlock& block);
    std::uint64_t count() const { return count_; }

private:
    std::ofstream file_;
    std::uint64_t count_ = 0;
};

class TagFileReader {
public:
    explicit TagFileReader(const std::string& path);

    Side side() const { return side_; }
    std::uint64_t config_hash() const { return config_hash_; }
    std::uint64_t seed() const { return seed_; }

    std::optional<TimeTag> next();

private:
    std::ifstream file_;
    Side side_ = Side::Alice;
    std::uint64_t config_hash_ = 0;
    std::uint64_t seed_ = 0;
};

} // namespace eqkd
