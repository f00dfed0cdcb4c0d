#pragma once

#include <cstdint>
#include <string>

#include "itermix/data.hpp"

namespace itermix {

// Deterministic 3-channel sinusoid mixture for desk-scale experiments.
// Channels 1 and 2 are sums of sinusoids plus white noise; channel 3 adds a
// rectified cross-channel term (scaled by `coupling`) computed from the
// *observed* noisy channels, which no linear readout of the past can fully
// capture. coupling = 0 gives a plain noisy sum-of-sinusoids.
RawSeries synthetic_sines(int steps, double noise_std, double coupling, std::uint64_t seed);

void write_csv(const RawSeries& series, const std::string& path);

}  // namespace itermix
