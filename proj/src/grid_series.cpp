#include "emnet/grid_series.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace emnet {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'G', '1'};
constexpr std::uint32_t kFormatVersion = 1;

template <class T>
void write_le(std::ostream& os, T value) {
    // little-endian hosts only; static_assert keeps the assumption visible
    static_assert(std::endian::native == std::endian::little, "EMG1 writer assumes little-endian");
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    static_assert(std::endian::native == std::endian::little, "EMG1 reader assumes little-endian");
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) throw CorruptionError("EMG1: truncated file while reading header");
    return value;
}

}  // namespace

void GridSeries::validate() const {
    if (values.size() != size())
        throw ShapeError("GridSeries: payload holds " + std::to_string(values.size()) +
                         " values, dims imply " + std::to_string(size()));
    if (channel_names.size() != channels)
        throw ShapeError("GridSeries: " + std::to_string(channel_names.size()) +
                         " channel names for " + std::to_string(channels) + " channels");
    for (std::size_t i = 0; i < values.size(); ++i)
        if (!std::isfinite(values[i]))
            throw DataError("GridSeries: non-finite value at flat index " + std::to_string(i));
}

std::vector<float> WindowSample::context() const {
    const auto& s = *series;
    const std::size_t begin = context_begin();
    std::vector<float> out(context_months * s.channels * s.height * s.width);
    const std::size_t hw = s.height * s.width;
    for (std::size_t t = 0; t < context_months; ++t)
        for (std::size_t c = 0; c < s.channels; ++c)
            std::memcpy(out.data() + (t * s.channels + c) * hw, s.frame(c, begin + t),
                        hw * sizeof(float));
    return out;
}

std::vector<float> WindowSample::target() const {
    const auto& s = *series;
    const float* src = s.frame(target_channel, target_month_index);
    return std::vector<float>(src, src + s.height * s.width);
}

// --- EMG1 container ---------------------------------------------------------

GridSeries load_grid_series(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());

    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("EMG1: bad magic in " + path.string());
    const auto version = read_le<std::uint32_t>(is);
    if (version != kFormatVersion)
        throw FormatError("EMG1: unsupported format version " + std::to_string(version));

    GridSeries s;
    s.channels = read_le<std::uint32_t>(is);
    s.months = read_le<std::uint32_t>(is);
    s.height = read_le<std::uint32_t>(is);
    s.width = read_le<std::uint32_t>(is);
    const auto name_block_len = read_le<std::uint32_t>(is);

    std::string name_block(name_block_len, '\0');
    is.read(name_block.data(), name_block_len);
    if (!is) throw CorruptionError("EMG1: truncated channel-name block");
    std::istringstream names(name_block);
    for (std::string line; std::getline(names, line);) s.channel_names.push_back(line);

    s.start_year = read_le<std::int32_t>(is);
    s.start_month = read_le<std::int32_t>(is);
    s.cell_degrees = read_le<double>(is);

    s.values.resize(s.size());
    is.read(reinterpret_cast<char*>(s.values.data()),
            static_cast<std::streamsize>(s.values.size() * sizeof(float)));
    if (is.gcount() != static_cast<std::streamsize>(s.values.size() * sizeof(float)))
        throw CorruptionError("EMG1: truncated payload in " + path.string() + " (expected " +
                              std::to_string(s.size()) + " values)");
    s.validate();
    return s;
}

void save_grid_series(const GridSeries& series, const std::filesystem::path& path) {
    series.validate();
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());

    os.write(kMagic, 4);
    write_le<std::uint32_t>(os, kFormatVersion);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(series.channels));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(series.months));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(series.height));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(series.width));

    std::string name_block;
    for (std::size_t i = 0; i < series.channel_names.size(); ++i) {
        if (i) name_block += '\n';
        name_block += series.channel_names[i];
    }
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(name_block.size()));
    os.write(name_block.data(), static_cast<std::streamsize>(name_block.size()));

    write_le<std::int32_t>(os, series.start_year);
    write_le<std::int32_t>(os, series.start_month);
    write_le<double>(os, series.cell_degrees);
    os.write(reinterpret_cast<const char*>(series.values.data()),
             static_cast<std::streamsize>(series.values.size() * sizeof(float)));
    if (!os) throw IoError("write failed for " + path.string());
}

// --- transforms -------------------------------------------------------------

GridSeries spatial_pool(const GridSeries& series, std::size_t factor) {
    if (factor == 0) throw ContractError("spatial_pool: factor must be positive");
    if (series.height % factor != 0 || series.width % factor != 0)
        throw ShapeError("spatial_pool: " + std::to_string(series.height) + "x" +
                         std::to_string(series.width) + " not divisible by factor " +
                         std::to_string(factor));
    GridSeries out;
    out.channels = series.channels;
    out.months = series.months;
    out.height = series.height / factor;
    out.width = series.width / factor;
    out.channel_names = series.channel_names;
    out.start_year = series.start_year;
    out.start_month = series.start_month;
    out.cell_degrees = series.cell_degrees * static_cast<double>(factor);
    out.values.resize(out.size());

    const float inv = 1.0f / static_cast<float>(factor * factor);
    for (std::size_t c = 0; c < series.channels; ++c)
        for (std::size_t t = 0; t < series.months; ++t) {
            const float* src = series.frame(c, t);
            float* dst = out.values.data() + (c * out.months + t) * out.height * out.width;
            for (std::size_t oy = 0; oy < out.height; ++oy)
                for (std::size_t ox = 0; ox < out.width; ++ox) {
                    float acc = 0.0f;
                    for (std::size_t dy = 0; dy < factor; ++dy) {
                        const float* row = src + (oy * factor + dy) * series.width + ox * factor;
                        for (std::size_t dx = 0; dx < factor; ++dx) acc += row[dx];
                    }
                    dst[oy * out.width + ox] = acc * inv;
                }
        }
    return out;
}

SplitRanges chronological_split(const GridSeries& series, const SplitSpec& spec) {
    if (spec.train_months == 0 || spec.val_months == 0 || spec.test_months == 0)
        throw ConfigError("chronological_split: all split counts must be positive");
    const std::size_t total = spec.train_months + spec.val_months + spec.test_months;
    if (total != series.months)
        throw ConfigError("chronological_split: spec sums to " + std::to_string(total) +
                          " but series has " + std::to_string(series.months) + " months");
    SplitRanges r;
    r.train = {0, spec.train_months};
    r.val = {spec.train_months, spec.train_months + spec.val_months};
    r.test = {r.val.end, series.months};
    return r;
}

SplitSpec proportional_split(std::size_t months) {
    if (months < 3) throw ConfigError("proportional_split: need at least 3 months");
    // reference proportions 231/28/29 of 288
    SplitSpec spec;
    spec.val_months = std::max<std::size_t>(1, months * 28 / 288);
    spec.test_months = std::max<std::size_t>(1, months * 29 / 288);
    spec.train_months = months - spec.val_months - spec.test_months;
    return spec;
}

std::vector<WindowSample> make_windows(std::shared_ptr<const GridSeries> series,
                                       std::size_t context, std::size_t horizon,
                                       std::size_t target_channel, MonthRange month_range) {
    if (!series) throw ContractError("make_windows: null series");
    if (target_channel >= series->channels)
        throw ConfigError("make_windows: target channel " + std::to_string(target_channel) +
                          " out of range");
    if (horizon == 0 || context == 0)
        throw ConfigError("make_windows: context and horizon must be positive");
    if (month_range.end > series->months || month_range.begin > month_range.end)
        throw ContractError("make_windows: month range out of bounds");
    const std::size_t len = month_range.length();
    if (len < context + horizon)
        throw DataError("make_windows: range of " + std::to_string(len) +
                        " months yields no samples (need > " + std::to_string(context + horizon - 1) +
                        ")");
    std::vector<WindowSample> samples;
    samples.reserve(len - context - horizon + 1);
    for (std::size_t target = month_range.begin + context + horizon - 1; target < month_range.end;
         ++target) {
        WindowSample s;
        s.series = series;
        s.context_months = context;
        s.horizon = horizon;
        s.target_channel = target_channel;
        s.target_month_index = target;
        samples.push_back(std::move(s));
    }
    return samples;
}

// --- normalization ----------------------------------------------------------

NormStats fit_norm_stats(const GridSeries& series, MonthRange train_range) {
    if (train_range.end > series.months || train_range.length() == 0)
        throw ContractError("fit_norm_stats: bad training range");
    NormStats stats;
    stats.channel_min.resize(series.channels, std::numeric_limits<float>::max());
    stats.channel_max.resize(series.channels, std::numeric_limits<float>::lowest());
    const std::size_t hw = series.height * series.width;
    for (std::size_t c = 0; c < series.channels; ++c)
        for (std::size_t t = train_range.begin; t < train_range.end; ++t) {
            const float* f = series.frame(c, t);
            for (std::size_t i = 0; i < hw; ++i) {
                stats.channel_min[c] = std::min(stats.channel_min[c], f[i]);
                stats.channel_max[c] = std::max(stats.channel_max[c], f[i]);
            }
        }
    for (std::size_t c = 0; c < series.channels; ++c)
        if (!std::isfinite(stats.channel_min[c]) || !std::isfinite(stats.channel_max[c]))
            throw DataError("fit_norm_stats: non-finite stats for channel " + std::to_string(c));
    return stats;
}

namespace {

void check_stats(const GridSeries& series, const NormStats& stats) {
    if (stats.channel_min.size() != series.channels ||
        stats.channel_max.size() != series.channels)
        throw ShapeError("normalize: stats cover " + std::to_string(stats.channel_min.size()) +
                         " channels, series has " + std::to_string(series.channels));
    for (std::size_t c = 0; c < series.channels; ++c) {
        if (!std::isfinite(stats.channel_min[c]) || !std::isfinite(stats.channel_max[c]))
            throw DataError("normalize: non-finite stats for channel " + std::to_string(c));
        if (stats.channel_max[c] < stats.channel_min[c])
            throw DataError("normalize: max < min for channel " + std::to_string(c));
    }
}

}  // namespace

GridSeries normalize(const GridSeries& series, const NormStats& stats) {
    check_stats(series, stats);
    GridSeries out = series;
    const std::size_t per_channel = series.months * series.height * series.width;
    for (std::size_t c = 0; c < series.channels; ++c) {
        const float lo = stats.channel_min[c];
        const float range = stats.channel_max[c] - lo;
        float* dst = out.values.data() + c * per_channel;
        if (range == 0.0f) {
            std::fill(dst, dst + per_channel, 0.0f);
        } else {
            const float inv = 1.0f / range;
            for (std::size_t i = 0; i < per_channel; ++i) dst[i] = (dst[i] - lo) * inv;
        }
    }
    return out;
}

GridSeries denormalize(const GridSeries& series, const NormStats& stats) {
    check_stats(series, stats);
    GridSeries out = series;
    const std::size_t per_channel = series.months * series.height * series.width;
    for (std::size_t c = 0; c < series.channels; ++c) {
        const float lo = stats.channel_min[c];
        const float range = stats.channel_max[c] - lo;
        float* dst = out.values.data() + c * per_channel;
        if (range == 0.0f) {
            std::fill(dst, dst + per_channel, lo);
        } else {
            for (std::size_t i = 0; i < per_channel; ++i) dst[i] = dst[i] * range + lo;
        }
    }
    return out;
}

std::string NormStats::to_json() const {
    nlohmann::json j;
    j["scheme"] = "minmax";
    j["channel_min"] = channel_min;
    j["channel_max"] = channel_max;
    return j.dump(2);
}

NormStats NormStats::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    if (j.value("scheme", "") != "minmax")
        throw FormatError("NormStats: unknown scheme '" + j.value("scheme", "") + "'");
    NormStats s;
    s.channel_min = j.at("channel_min").get<std::vector<float>>();
    s.channel_max = j.at("channel_max").get<std::vector<float>>();
    if (s.channel_min.size() != s.channel_max.size())
        throw FormatError("NormStats: min/max length mismatch");
    return s;
}

// --- statistics ---------------------------------------------------------------

double autocorrelation(const GridSeries& series, std::size_t channel, std::size_t lag) {
    if (channel >= series.channels) throw ContractError("autocorrelation: channel out of range");
    if (lag >= series.months) throw ContractError("autocorrelation: lag must be below months");
    const std::size_t hw = series.height * series.width;
    std::vector<double> mean_series(series.months);
    for (std::size_t t = 0; t < series.months; ++t) {
        const float* f = series.frame(channel, t);
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += f[i];
        mean_series[t] = acc / static_cast<double>(hw);
    }
    const std::size_t n = series.months - lag;
    double ma = 0.0, mb = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        ma += mean_series[t];
        mb += mean_series[t + lag];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double cov = 0.0, va = 0.0, vb = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
        const double da = mean_series[t] - ma;
        const double db = mean_series[t + lag] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va == 0.0 || vb == 0.0)
        throw DataError("autocorrelation: series has zero temporal variance");
    return cov / std::sqrt(va * vb);
}

}  // namespace emnet
