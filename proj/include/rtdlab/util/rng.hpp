// Named random streams derived from one master seed.
//
// Every consumer (init, masking, sampling, dropout, data order) draws from
// its own stream so that adding or removing draws in one place never shifts
// another. Distributions are implemented here rather than taken from
// <random> so that streams are identical across standard libraries.

#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace rtdlab {

using Rng = std::mt19937_64;

std::uint64_t stream_seed(std::uint64_t master_seed, std::string_view name);
Rng make_stream(std::uint64_t master_seed, std::string_view name);

// Uniform in [0, 1) with 53 random bits.
double uniform01(Rng& rng);
// Uniform integer in [0, n), unbiased.
std::uint64_t uniform_below(Rng& rng, std::uint64_t n);
double normal(Rng& rng, double mean = 0.0, double stddev = 1.0);

}  // namespace rtdlab
