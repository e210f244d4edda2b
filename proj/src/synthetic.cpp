#include "emnet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "emnet/rng.hpp"

namespace emnet {

namespace {

// Rough per-molecule magnitude ladder so channels span different raw scales
// and normalization is exercised non-trivially.
constexpr double kChannelScale[5] = {40.0, 800.0, 6.0, 120.0, 15.0};

const char* kChannelNames[5] = {"CH4", "CO2", "N2O", "CO2bio", "GWA"};

}  // namespace

GridSeries generate_synthetic(const SyntheticConfig& cfg) {
    if (cfg.height == 0 || cfg.width == 0 || cfg.months == 0 || cfg.channels == 0)
        throw ConfigError("generate_synthetic: all dims must be positive");
    if (cfg.noise_std < 0) throw ConfigError("generate_synthetic: noise_std must be >= 0");

    GridSeries s;
    s.channels = cfg.channels;
    s.months = cfg.months;
    s.height = cfg.height;
    s.width = cfg.width;
    s.start_year = 2000;
    s.start_month = 1;
    s.cell_degrees = 0.3;
    for (std::size_t c = 0; c < cfg.channels; ++c)
        s.channel_names.push_back(c < 5 ? kChannelNames[c] : "AUX" + std::to_string(c));
    s.values.resize(s.size());

    Rng rng(cfg.seed);
    const double two_pi = 2.0 * std::numbers::pi;

    std::vector<double> scale(cfg.channels), phase(cfg.channels);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
        scale[c] = (c < 5 ? kChannelScale[c] : 10.0) * rng.uniform(0.8, 1.2);
        phase[c] = rng.uniform(0.0, two_pi);
    }

    // Static hotspot field per channel; the seasonal cycle only scales it,
    // so the spatial sum factorizes out of the time loop.
    const std::size_t hw = cfg.height * cfg.width;
    std::vector<std::vector<double>> field(cfg.channels, std::vector<double>(hw, 0.0));
    const double min_dim = static_cast<double>(std::min(cfg.height, cfg.width));
    for (std::size_t c = 0; c < cfg.channels; ++c) {
        for (std::size_t h = 0; h < cfg.n_hotspots; ++h) {
            const double cy = rng.uniform(0.0, static_cast<double>(cfg.height));
            const double cx = rng.uniform(0.0, static_cast<double>(cfg.width));
            const double sigma = rng.uniform(min_dim / 12.0, min_dim / 6.0);
            const double amp = rng.uniform(0.4, 1.0);
            const double inv2s2 = 1.0 / (2.0 * sigma * sigma);
            for (std::size_t y = 0; y < cfg.height; ++y) {
                const double dy = static_cast<double>(y) - cy;
                for (std::size_t x = 0; x < cfg.width; ++x) {
                    const double dx = static_cast<double>(x) - cx;
                    field[c][y * cfg.width + x] += amp * std::exp(-(dy * dy + dx * dx) * inv2s2);
                }
            }
        }
    }

    // Seasonal factor per (channel, calendar month). Using t mod 12 keeps
    // the noise-free series exactly 12-month periodic. The target channel's
    // cycle mixes in the mean of the other channels' cycles so the
    // cross-channel context is informative about it.
    std::vector<std::vector<double>> season(cfg.channels, std::vector<double>(12));
    for (std::size_t m = 0; m < 12; ++m) {
        const double theta = two_pi * static_cast<double>(m) / 12.0;
        double other_mean = 0.0;
        std::size_t other_count = 0;
        for (std::size_t c = 0; c < cfg.channels; ++c)
            if (c != kTargetChannel && cfg.channels > 1) {
                other_mean += std::sin(theta + phase[c]);
                ++other_count;
            }
        if (other_count) other_mean /= static_cast<double>(other_count);
        for (std::size_t c = 0; c < cfg.channels; ++c) {
            double cycle = std::sin(theta + phase[c]);
            if (c == kTargetChannel && other_count) cycle = 0.55 * cycle + 0.45 * other_mean;
            season[c][m] = 1.0 + 0.8 * cycle;
        }
    }

    for (std::size_t c = 0; c < cfg.channels; ++c)
        for (std::size_t t = 0; t < cfg.months; ++t) {
            const double factor = scale[c] * season[c][t % 12];
            const double noise_scale = cfg.noise_std * scale[c];
            float* dst = s.values.data() + (c * cfg.months + t) * hw;
            if (noise_scale > 0.0) {
                for (std::size_t i = 0; i < hw; ++i) {
                    const double v = factor * field[c][i] + noise_scale * rng.normal();
                    dst[i] = static_cast<float>(std::max(0.0, v));
                }
            } else {
                for (std::size_t i = 0; i < hw; ++i)
                    dst[i] = static_cast<float>(std::max(0.0, factor * field[c][i]));
            }
        }
    return s;
}

}  // namespace emnet
