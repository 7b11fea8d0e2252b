// Finite-key secret-length computation and the Toeplitz extractor.
#pragma once

#include <cstdint>

#include "eqkd/bits.hpp"

namespace eqkd {

// h(x) = -x log2 x - (1-x) log2 (1-x), with h(0) = h(1) = 0.
double binary_entropy(double x);

// Predicted error-correction leakage lambda_EC = f_EC * n * h(q).
// Prediction only; security accounting uses measured transcript counts.
double leakage_model(double f_ec, double n, double q);

// Upper-bound the phase error rate from n_x X-basis samples against n_z key
// bits (random-sampling deviation, Serfling-type). Clamped to [phi_x, 0.5].
double phase_error_upper_bound(double phi_x, std::uint64_t n_x, std::uint64_t n_z,
                               double eps_pe);

// l = max(0, floor(n_z (1 - h(phi_u)) - lambda_ec_total - 2 log2(1/eps_hash))).
// l == 0 signals abort for the period.
std::uint64_t secret_key_length(std::uint64_t n_z, double phi_u,
                                double lambda_ec_total, double eps_hash);

// Toeplitz extraction: output = T x over GF(2), where T is the l x n matrix
// with first column seed[0..l) (top to bottom) and first row continuing as
// seed[l-1 + j] for j >= 1 (corner taken from the column):
//     T[i][j] = seed[i-j]          for i >= j
//     T[i][j] = seed[l-1 + (j-i)]  for j >  i
// seed must hold n + l - 1 bits. Any algorithm is allowed internally, but the
// result is bit-exact with the direct matrix-vector product.
BitVec toeplitz_extract(const BitVec& input, const BitVec& seed, std::size_t l);

struct SecurityEstimate {
    double phi_x = 0.0;            // measured X error rate over the period
    std::uint64_t n_x = 0;         // X coincidences in the period
    double phi_u = 0.0;            // upper-bounded phase error rate
    std::uint64_t lambda_ec_total = 0; // measured disclosed bits (incl. verify hashes)
    std::uint64_t l = 0;           // secret length
};

SecurityEstimate estimate_security(std::uint64_t n_z, double phi_x, std::uint64_t n_x,
                                   std::uint64_t lambda_ec_total, double eps_pe,
                                   double eps_hash);

} // namespace eqkd
