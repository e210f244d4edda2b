#pragma once

#include <cstdint>

#include "emnet/grid_series.hpp"

namespace emnet {

// Configuration for the synthetic seasonal-emissions generator. Defaults
// are the desk-scale dataset used throughout the tests and CLI.
struct SyntheticConfig {
    std::size_t height = 64;
    std::size_t width = 128;
    std::size_t months = 288;
    std::size_t channels = 5;
    std::uint64_t seed = 7;
    double noise_std = 0.02;
    std::size_t n_hotspots = 6;
};

// Index of the forecast target within the standard channel list.
inline constexpr std::size_t kTargetChannel = 2;  // N2O

// Deterministic synthetic series: per channel, a sum of spatial Gaussian
// hotspots whose amplitudes follow 12-month sinusoids with channel-specific
// phases, plus i.i.d. noise. The target channel's amplitude partially
// tracks the other channels so cross-channel context carries signal.
GridSeries generate_synthetic(const SyntheticConfig& config);

}  // namespace emnet
