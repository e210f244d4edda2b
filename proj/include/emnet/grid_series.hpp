#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "emnet/errors.hpp"

namespace emnet {

// Dense (channels x months x lat x lon) grid of emission values with
// calendar and geospatial metadata. Values are immutable after construction
// and safe to share across threads for reading.
struct GridSeries {
    std::size_t channels = 0;
    std::size_t months = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> values;  // channel-major, then time, row, column
    std::vector<std::string> channel_names;
    std::int32_t start_year = 2000;
    std::int32_t start_month = 1;  // 1..12
    double cell_degrees = 0.1;

    std::size_t size() const { return channels * months * height * width; }

    std::size_t index(std::size_t c, std::size_t t, std::size_t y, std::size_t x) const {
        return ((c * months + t) * height + y) * width + x;
    }
    float at(std::size_t c, std::size_t t, std::size_t y, std::size_t x) const {
        return values[index(c, t, y, x)];
    }
    const float* frame(std::size_t c, std::size_t t) const {
        return values.data() + (c * months + t) * height * width;
    }

    // Throws DataError (naming the first offending index) or ShapeError if
    // the declared dims, names, and payload disagree.
    void validate() const;
};

// Contiguous [begin, end) month index range.
struct MonthRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t length() const { return end - begin; }
    bool operator==(const MonthRange&) const = default;
};

// Contiguous train/val/test month counts.
struct SplitSpec {
    std::size_t train_months = 0;
    std::size_t val_months = 0;
    std::size_t test_months = 0;
};

struct SplitRanges {
    MonthRange train, val, test;
};

// Per-channel min-max statistics fitted on the training range only.
struct NormStats {
    std::vector<float> channel_min;
    std::vector<float> channel_max;

    std::string to_json() const;
    static NormStats from_json(const std::string& text);
};

// One supervised example: a context-month x channel x H x W block plus the
// next-month target grid for one channel. Samples view their parent series;
// pixel blocks are materialized on demand.
struct WindowSample {
    std::shared_ptr<const GridSeries> series;
    std::size_t context_months = 0;
    std::size_t horizon = 1;
    std::size_t target_channel = 0;
    std::size_t target_month_index = 0;  // >= context_months by construction

    std::size_t context_begin() const {
        return target_month_index - horizon + 1 - context_months;
    }
    // (context, channels, H, W) block, time-major.
    std::vector<float> context() const;
    // (H, W) target grid.
    std::vector<float> target() const;
};

// --- EMG1 container -------------------------------------------------------

GridSeries load_grid_series(const std::filesystem::path& path);
void save_grid_series(const GridSeries& series, const std::filesystem::path& path);

// --- transforms -----------------------------------------------------------

// Mean-pools factor x factor spatial blocks; preserves each (channel, month)
// slice's global mean up to summation order. Dims must divide evenly.
GridSeries spatial_pool(const GridSeries& series, std::size_t factor);

SplitRanges chronological_split(const GridSeries& series, const SplitSpec& spec);

// Scales the default 231/28/29 split to `months`, rounding the remainder
// into the training range.
SplitSpec proportional_split(std::size_t months);

std::vector<WindowSample> make_windows(std::shared_ptr<const GridSeries> series,
                                       std::size_t context, std::size_t horizon,
                                       std::size_t target_channel, MonthRange month_range);

NormStats fit_norm_stats(const GridSeries& series, MonthRange train_range);
GridSeries normalize(const GridSeries& series, const NormStats& stats);
GridSeries denormalize(const GridSeries& series, const NormStats& stats);

// Pearson autocorrelation of the spatially averaged monthly series.
double autocorrelation(const GridSeries& series, std::size_t channel, std::size_t lag);

}  // namespace emnet
