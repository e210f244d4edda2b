#pragma once

#include <functional>
#include <string>
#include <vector>

#include "emnet/grid_series.hpp"
#include "emnet/model.hpp"

namespace emnet {

// How the non-target channels advance during closed-loop prediction:
// `truth` feeds them ground-truth values; `persist` repeats the most recent
// context frame.
enum class ExogenousPolicy { truth, persist };

std::string to_string(ExogenousPolicy policy);
ExogenousPolicy parse_exogenous_policy(std::string_view name);

struct RolloutReport {
    std::vector<double> rmse;  // one entry per step
    ExogenousPolicy policy = ExogenousPolicy::truth;
    std::size_t start_month = 0;
};

// Forecaster interface so oracle stubs can stand in for trained models:
// takes a (1, context, channels, H, W) window, returns (1, H, W).
using ForecastFn = std::function<Tensorf(const Tensorf&)>;

// Closed-loop evaluation: the window advances one month per step with the
// target channel of the newest frame replaced by the model's previous
// prediction, non-target channels per policy. RMSE is measured against
// ground truth per step; step 1 is exactly single-step evaluation.
RolloutReport autoregressive_rollout(const ForecastFn& predict, const GridSeries& series,
                                     std::size_t context, std::size_t target_channel,
                                     std::size_t start_month, std::size_t steps,
                                     ExogenousPolicy policy);

RolloutReport autoregressive_rollout(ForecastModel& model, const GridSeries& series,
                                     std::size_t start_month, std::size_t steps,
                                     ExogenousPolicy policy);

}  // namespace emnet
