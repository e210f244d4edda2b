#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "emnet/grid_series.hpp"
#include "emnet/model.hpp"
#include "emnet/optim.hpp"

namespace emnet {

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 8;
    std::uint64_t seed = 1;
    double lr_peak = 3e-3;
    double warmup_ratio = 0.25;
    double weight_decay = 1e-4;
    double clip_norm = 5.0;
    std::size_t eval_every = 1;
    std::string checkpoint_path;  // best-validation checkpoint when non-empty
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_mse = 0.0;
    double val_mse = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> history;
    double best_val_mse = 0.0;
    std::size_t best_epoch = 0;
};

// Plain metric helpers.
double mse(std::span<const float> pred, std::span<const float> truth);
double rmse(std::span<const float> pred, std::span<const float> truth);

// Assembles (B, context, channels, H, W) inputs and (B, H, W) targets for
// samples[order[lo..hi)].
std::pair<Tensorf, Tensorf> make_batch(const std::vector<WindowSample>& samples,
                                       const std::vector<std::size_t>& order, std::size_t lo,
                                       std::size_t hi);

// Seeded-shuffle minibatch AdamW training with linear warmup/decay and
// global-norm gradient clipping. Records train/val MSE per epoch, keeps the
// best-validation weights (restored into the model on return), and aborts
// with a NumericError naming the epoch/step if the loss goes non-finite.
TrainResult train(ForecastModel& model, const std::vector<WindowSample>& train_windows,
                  const std::vector<WindowSample>& val_windows, const TrainConfig& cfg);

// Mean per-sample MSE in eval mode; independent of batch partitioning.
double evaluate_mse(ForecastModel& model, const std::vector<WindowSample>& windows,
                    std::size_t batch_size = 8);

// Same protocol for the trivial repeat-last-month forecaster.
double persistence_mse(const std::vector<WindowSample>& windows);

}  // namespace emnet
