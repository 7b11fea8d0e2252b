#include "eqkd/distill.hpp"

#include <cmath>
#include <stdexcept>

namespace eqkd {

double binary_entropy(double x) {
    if (x < 0.0 || x > 1.0) throw std::domain_error("binary_entropy: x outside [0,1]");
    if (x == 0.0 || x == 1.0) return 0.0;
    return -x * std::log2(x) - (1.0 - x) * std::log2(1.0 - x);
}

double leakage_model(double f_ec, double n, double q) {
    return f_ec * n * binary_entropy(q);
}

double phase_error_upper_bound(double phi_x, std::uint64_t n_x, std::uint64_t n_z,
                               double eps_pe) {
    if (n_x < 1) throw std::invalid_argument("phase_error_upper_bound: n_x must be >= 1");
    const double nx = static_cast<double>(n_x);
    const double nz = static_cast<double>(n_z);
    const double dev =
        std::sqrt((nx + nz) * (nx + 1.0) * std::log(1.0 / eps_pe) / (2.0 * nx * nx * nz));
    double phi_u = phi_x + dev;
    if (phi_u > 0.5) phi_u = 0.5;
    if (phi_u < phi_x) phi_u = phi_x;
    return phi_u;
}

std::uint64_t secret_key_length(std::uint64_t n_z, double phi_u,
                                double lambda_ec_total, double eps_hash) {
    const double nz = static_cast<double>(n_z);
    const double l = std::floor(nz * (1.0 - binary_entropy(phi_u)) - lambda_ec_total -
                                2.0 * std::log2(1.0 / eps_hash));
    if (l <= 0.0) return 0;
    if (l >= nz) return n_z;
    return static_cast<std::uint64_t>(l);
}

SecurityEstimate estimate_security(std::uint64_t n_z, double phi_x, std::uint64_t n_x,
                                   std::uint64_t lambda_ec_total, double eps_pe,
                                   double eps_hash) {
    SecurityEstimate est;
    est.phi_x = phi_x;
    est.n_x = n_x;
    est.lambda_ec_total = lambda_ec_total;
    est.phi_u = n_x >= 1 ? phase_error_upper_bound(phi_x, n_x, n_z, eps_pe) : 0.5;
    est.l = secret_key_length(n_z, est.phi_u, static_cast<double>(lambda_ec_total), eps_hash);
    return est;
}

namespace {

// XOR `nbits` bits of src starting at src_bit into dst starting at dst bit 0.
void xor_bit_range(std::vector<std::uint64_t>& dst, const std::vector<std::uint64_t>& src,
                   std::size_t src_bit, std::size_t nbits) {
    const std::size_t word = src_bit >> 6;
    const unsigned shift = static_cast<unsigned>(src_bit & 63);
    const std::size_t nwords = (nbits + 63) / 64;
    for (std::size_t i = 0; i < nwords; ++i) {
        std::uint64_t w = src[word + i] >> shift;
        if (shift && word + i + 1 < src.size()) w |= src[word + i + 1] << (64 - shift);
        dst[i] ^= w;
    }
}

} // namespace

BitVec toeplitz_extract(const BitVec& input, const BitVec& seed, std::size_t l) {
    const std::size_t n = input.size();
    if (l > n) throw std::invalid_argument("toeplitz_extract: l > n");
    if (seed.size() != n + l - 1)
        throw std::invalid_argument("toeplitz_extract: seed must hold n + l - 1 bits");
    if (l == 0) return BitVec(0);

    // out[i] = XOR_j input[j] * T[i][j]. Writing the diagonal kernel as
    //   g = [seed[l-1], ..., seed[0], seed[l], ..., seed[n+l-2]]
    // gives out[i] = XOR_j input[j] * g[j + (l-1-i)], i.e. for every set input
    // bit j we XOR a reversed window of g into the output:
    //   out[i] ^= h[(n-1-j) + i]   with h = reverse(g).
    const std::size_t L = n + l - 1;
    BitVec h(L);
    // h[k] = g[L-1-k]; g[m] = seed[l-1-m] for m < l, else seed[m].
    for (std::size_t k = 0; k < L; ++k) {
        const std::size_t m = L - 1 - k;
        h.set(k, m < l ? seed.get(l - 1 - m) : seed.get(m));
    }

    // Pad h so shifted 64-bit reads never run off the end.
    auto hw = h.words();
    hw.resize(hw.size() + (l + 63) / 64 + 1, 0);

    std::vector<std::uint64_t> out((l + 63) / 64, 0);
    const auto& xw = input.words();
    for (std::size_t wi = 0; wi < xw.size(); ++wi) {
        std::uint64_t w = xw[wi];
        while (w) {
            const unsigned b = static_cast<unsigned>(std::countr_zero(w));
            w &= w - 1;
            const std::size_t j = wi * 64 + b;
            xor_bit_range(out, hw, n - 1 - j, l);
        }
    }

    BitVec result(l);
    result.words() = std::move(out);
    result.words().resize((l + 63) / 64);
    result.trim();
    return result;
}

} // namespace eqkd
