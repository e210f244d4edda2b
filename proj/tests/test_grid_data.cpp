#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "emnet/grid_series.hpp"
#include "emnet/rng.hpp"
#include "emnet/synthetic.hpp"

using namespace emnet;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
    return fs::temp_directory_path() / ("emnet_test_" + name);
}

GridSeries random_series(std::size_t c, std::size_t m, std::size_t h, std::size_t w,
                         std::uint64_t seed) {
    GridSeries s;
    s.channels = c;
    s.months = m;
    s.height = h;
    s.width = w;
    s.cell_degrees = 0.1;
    for (std::size_t i = 0; i < c; ++i) s.channel_names.push_back("CH" + std::to_string(i));
    s.values.resize(s.size());
    Rng rng(seed);
    for (auto& v : s.values) v = static_cast<float>(rng.uniform(0.0, 10.0));
    return s;
}

std::vector<char> read_bytes(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(is),
                             std::istreambuf_iterator<char>());
}

// 12-month sinusoidal series, exactly periodic (phase from t mod 12).
GridSeries sinusoid_series(std::size_t months, double phase = 0.25) {
    GridSeries s;
    s.channels = 1;
    s.months = months;
    s.height = 4;
    s.width = 4;
    s.channel_names = {"N2O"};
    s.values.resize(s.size());
    for (std::size_t t = 0; t < months; ++t) {
        const double theta =
            2.0 * std::numbers::pi * static_cast<double>(t % 12) / 12.0 + phase;
        const float v = static_cast<float>(2.0 + std::sin(theta));
        for (std::size_t i = 0; i < 16; ++i) s.values[t * 16 + i] = v;
    }
    return s;
}

}  // namespace

TEST_CASE("EMG1 round-trip is bit-exact") {
    GridSeries s = random_series(2, 6, 4, 8, 99);
    const fs::path p1 = temp_file("roundtrip1.emg");
    const fs::path p2 = temp_file("roundtrip2.emg");
    save_grid_series(s, p1);
    GridSeries loaded = load_grid_series(p1);
    CHECK(loaded.channels == s.channels);
    CHECK(loaded.months == s.months);
    CHECK(loaded.height == s.height);
    CHECK(loaded.width == s.width);
    CHECK(loaded.channel_names == s.channel_names);
    CHECK(loaded.cell_degrees == s.cell_degrees);
    CHECK(loaded.values == s.values);  // bit-for-bit
    save_grid_series(loaded, p2);
    CHECK(read_bytes(p1) == read_bytes(p2));
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("EMG1 header carries full-scale dims") {
    // header-level check with the paper-sized dims but a light payload,
    // then the real (5,288,...) header at desk width
    GridSeries s = random_series(5, 288, 6, 12, 5);
    const fs::path p = temp_file("dims.emg");
    save_grid_series(s, p);
    GridSeries loaded = load_grid_series(p);
    CHECK(loaded.channels == 5);
    CHECK(loaded.months == 288);
    fs::remove(p);
}

TEST_CASE("EMG1 rejects bad magic and truncated payload") {
    const fs::path p = temp_file("bad.emg");
    {
        std::ofstream os(p, std::ios::binary);
        os << "XXXX";
        std::vector<char> junk(64, 0);
        os.write(junk.data(), junk.size());
    }
    CHECK_THROWS_AS(load_grid_series(p), FormatError);

    GridSeries s = random_series(1, 2, 4, 4, 3);
    save_grid_series(s, p);
    const auto bytes = read_bytes(p);
    {
        std::ofstream os(p, std::ios::binary | std::ios::trunc);
        os.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 40));
    }
    CHECK_THROWS_AS(load_grid_series(p), CorruptionError);
    fs::remove(p);
}

TEST_CASE("EMG1 rejects non-finite values on save") {
    GridSeries s = random_series(1, 1, 2, 2, 3);
    s.values[2] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(save_grid_series(s, temp_file("nan.emg")), DataError);
}

TEST_CASE("spatial pooling dims, constants, and block means") {
    GridSeries s = random_series(1, 2, 1800, 3600, 7);
    GridSeries pooled = spatial_pool(s, 3);
    CHECK(pooled.height == 600);
    CHECK(pooled.width == 1200);
    CHECK(pooled.cell_degrees == doctest::Approx(0.3));

    GridSeries c = random_series(1, 1, 6, 6, 1);
    std::fill(c.values.begin(), c.values.end(), 7.0f);
    GridSeries cp = spatial_pool(c, 2);
    for (float v : cp.values) CHECK(v == doctest::Approx(7.0f));

    GridSeries block = random_series(1, 1, 3, 3, 1);
    for (std::size_t i = 0; i < 9; ++i) block.values[i] = static_cast<float>(i + 1);
    GridSeries bp = spatial_pool(block, 3);
    CHECK(bp.values.size() == 1);
    CHECK(bp.values[0] == doctest::Approx(5.0f));
}

TEST_CASE("pooling preserves per-slice global means") {
    GridSeries s = random_series(2, 3, 12, 18, 11);
    GridSeries pooled = spatial_pool(s, 3);
    for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t t = 0; t < s.months; ++t) {
            double before = 0, after = 0;
            const float* f = s.frame(c, t);
            for (std::size_t i = 0; i < s.height * s.width; ++i) before += f[i];
            const float* g = pooled.frame(c, t);
            for (std::size_t i = 0; i < pooled.height * pooled.width; ++i) after += g[i];
            before /= static_cast<double>(s.height * s.width);
            after /= static_cast<double>(pooled.height * pooled.width);
            CHECK(std::fabs(before - after) <= 1e-6 * std::max(1.0, std::fabs(before)));
        }
}

TEST_CASE("pooling rejects non-divisible dims") {
    GridSeries s = random_series(1, 1, 600, 1200, 2);
    CHECK_THROWS_AS(spatial_pool(s, 7), ShapeError);
}

TEST_CASE("chronological split matches the 231/28/29 layout") {
    GridSeries s = random_series(1, 288, 2, 2, 1);
    SplitRanges r = chronological_split(s, {231, 28, 29});
    CHECK(r.train == MonthRange{0, 231});
    CHECK(r.val == MonthRange{231, 259});
    CHECK(r.test == MonthRange{259, 288});

    GridSeries tiny = random_series(1, 3, 2, 2, 1);
    SplitRanges rt = chronological_split(tiny, {1, 1, 1});
    CHECK(rt.train == MonthRange{0, 1});
    CHECK(rt.val == MonthRange{1, 2});
    CHECK(rt.test == MonthRange{2, 3});

    CHECK_THROWS_AS(chronological_split(s, {231, 28, 28}), ConfigError);
}

TEST_CASE("proportional split reproduces defaults at 288 months") {
    SplitSpec spec = proportional_split(288);
    CHECK(spec.train_months == 231);
    CHECK(spec.val_months == 28);
    CHECK(spec.test_months == 29);
}

TEST_CASE("windowing counts and boundaries") {
    auto s = std::make_shared<GridSeries>(random_series(5, 288, 4, 4, 13));
    auto samples = make_windows(s, 24, 1, 2, {0, 288});
    CHECK(samples.size() == 264);
    CHECK(samples.front().target_month_index == 24);
    CHECK(samples.back().target_month_index == 287);

    auto one = make_windows(s, 24, 1, 2, {0, 25});
    CHECK(one.size() == 1);
    CHECK(one[0].target_month_index == 24);

    CHECK_THROWS_AS(make_windows(s, 24, 1, 2, {0, 24}), DataError);
}

TEST_CASE("windows over split ranges never share target months") {
    auto s = std::make_shared<GridSeries>(random_series(5, 120, 2, 2, 17));
    SplitRanges r = chronological_split(*s, {80, 20, 20});
    std::set<std::size_t> seen;
    for (const auto& range : {r.train, r.val, r.test}) {
        if (range.length() < 25) continue;
        for (const auto& w : make_windows(s, 24, 1, 2, range)) {
            CHECK(seen.insert(w.target_month_index).second);
            CHECK(w.context_begin() >= range.begin);
            CHECK(w.target_month_index < range.end);
        }
    }
}

TEST_CASE("window sample materializes the right frames") {
    auto s = std::make_shared<GridSeries>(random_series(3, 30, 2, 2, 23));
    auto samples = make_windows(s, 4, 1, 1, {0, 30});
    const WindowSample& w = samples[2];  // target month 6, context 2..5
    CHECK(w.target_month_index == 6);
    auto ctx = w.context();
    CHECK(ctx.size() == 4 * 3 * 2 * 2);
    // time-major layout: frame t=0 is month 2
    CHECK(ctx[0 * 12 + 1 * 4 + 2] == s->at(1, 2, 1, 0));
    CHECK(ctx[3 * 12 + 0 * 4 + 1] == s->at(0, 5, 0, 1));
    auto tgt = w.target();
    CHECK(tgt[3] == s->at(1, 6, 1, 1));
}

TEST_CASE("min-max normalization: midpoint, degenerate channel, inversion") {
    GridSeries s = random_series(2, 4, 2, 2, 31);
    // channel 0: range [0,10] with an exact 5; channel 1: constant
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t i = 0; i < 4; ++i) {
            s.values[t * 4 + i] = static_cast<float>((t * 4 + i) % 11);
            s.values[16 + t * 4 + i] = 3.5f;
        }
    NormStats stats = fit_norm_stats(s, {0, 4});
    CHECK(stats.channel_min[0] == 0.0f);
    CHECK(stats.channel_max[0] == 10.0f);
    GridSeries n = normalize(s, stats);
    // value 5 -> 0.5
    bool found_half = false;
    for (std::size_t i = 0; i < 16; ++i)
        if (s.values[i] == 5.0f) {
            CHECK(n.values[i] == doctest::Approx(0.5f));
            found_half = true;
        }
    CHECK(found_half);
    for (std::size_t i = 16; i < 32; ++i) CHECK(n.values[i] == 0.0f);

    GridSeries back = denormalize(n, stats);
    for (std::size_t i = 0; i < s.values.size(); ++i)
        CHECK(std::fabs(back.values[i] - s.values[i]) <=
              1e-6f * std::max(1.0f, std::fabs(s.values[i])));
}

TEST_CASE("normalization fitted on train passes test extremes through unclipped") {
    GridSeries s = random_series(1, 10, 2, 2, 37);
    for (std::size_t i = 0; i < s.values.size(); ++i)
        s.values[i] = static_cast<float>(i % 7);
    // test range gets a larger extreme than anything in train
    s.values[9 * 4 + 1] = 50.0f;
    NormStats stats = fit_norm_stats(s, {0, 6});
    GridSeries n = normalize(s, stats);
    CHECK(n.values[9 * 4 + 1] > 1.0f);  // not clipped
}

TEST_CASE("norm stats JSON round-trip is lossless") {
    NormStats stats;
    stats.channel_min = {0.0f, -3.25f, 1.17e-7f};
    stats.channel_max = {10.0f, 12345.678f, 2.0e8f};
    NormStats back = NormStats::from_json(stats.to_json());
    CHECK(back.channel_min == stats.channel_min);
    CHECK(back.channel_max == stats.channel_max);
}

TEST_CASE("synthetic generator is a pure function of its config") {
    SyntheticConfig cfg;
    cfg.height = 16;
    cfg.width = 32;
    cfg.months = 36;
    cfg.seed = 42;
    GridSeries a = generate_synthetic(cfg);
    GridSeries b = generate_synthetic(cfg);
    CHECK(a.values == b.values);
    cfg.seed = 43;
    GridSeries c = generate_synthetic(cfg);
    CHECK(a.values != c.values);
}

TEST_CASE("noise-free synthetic series is exactly 12-month periodic") {
    SyntheticConfig cfg;
    cfg.height = 8;
    cfg.width = 8;
    cfg.months = 36;
    cfg.noise_std = 0.0;
    cfg.seed = 9;
    GridSeries s = generate_synthetic(cfg);
    for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t t = 0; t + 12 < s.months; ++t)
            for (std::size_t i = 0; i < 64; ++i)
                CHECK(s.frame(c, t)[i] == s.frame(c, t + 12)[i]);
}

TEST_CASE("synthetic values are finite and non-negative") {
    SyntheticConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.months = 24;
    cfg.seed = 4;
    GridSeries s = generate_synthetic(cfg);
    s.validate();
    for (float v : s.values) CHECK(v >= 0.0f);
}

TEST_CASE("default synthetic config has strong lag-12 autocorrelation") {
    SyntheticConfig cfg;  // defaults: 64x128, 288 months
    GridSeries s = generate_synthetic(cfg);
    CHECK(autocorrelation(s, kTargetChannel, 12) >= 0.9);
}

TEST_CASE("autocorrelation of a pure sinusoid") {
    GridSeries s = sinusoid_series(288);
    CHECK(autocorrelation(s, 0, 12) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(autocorrelation(s, 0, 6) == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("autocorrelation of white noise stays small") {
    for (std::uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        SyntheticConfig cfg;
        cfg.height = 8;
        cfg.width = 8;
        cfg.months = 288;
        cfg.n_hotspots = 0;  // noise only
        cfg.noise_std = 1.0;
        cfg.seed = seed;
        GridSeries s = generate_synthetic(cfg);
        CHECK(std::fabs(autocorrelation(s, kTargetChannel, 12)) < 0.2);
    }
}

TEST_CASE("autocorrelation rejects degenerate input") {
    GridSeries s = random_series(1, 10, 2, 2, 3);
    std::fill(s.values.begin(), s.values.end(), 1.0f);
    CHECK_THROWS_AS(autocorrelation(s, 0, 2), DataError);
    CHECK_THROWS_AS(autocorrelation(s, 0, 10), ContractError);
}
