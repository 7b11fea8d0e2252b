// Append-only secret-key store: length-prefixed binary records plus a
// human-readable index file alongside.
#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "eqkd/bits.hpp"

namespace eqkd {

struct KeyRecord {
    std::uint64_t key_id = 0;
    std::uint64_t period_id = 0;
    std::uint64_t n_z = 0;
    double phi_u = 0.0;
    std::uint64_t lambda_total = 0;
    BitVec bits;
};

class KeyStore {
public:
    KeyStore(const std::string& path, std::uint64_t config_hash, std::uint64_t seed);

    void append(const KeyRecord& rec);
    const std::string& path() const { return path_; }

    static std::vector<KeyRecord> read_all(const std::string& path);
    // Header fields of an existing store.
    static void read_header(const std::string& path, std::uint64_t& config_hash,
                            std::uint64_t& seed);

private:
    std::string path_;
    std::ofstream file_;
    std::ofstream index_;
};

} // namespace eqkd
