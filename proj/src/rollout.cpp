#include "emnet/rollout.hpp"

#include <cmath>
#include <cstring>

#include "emnet/synthetic.hpp"
#include "emnet/train.hpp"

namespace emnet {

std::string to_string(ExogenousPolicy policy) {
    return policy == ExogenousPolicy::truth ? "exogenous-truth" : "persist-exogenous";
}

ExogenousPolicy parse_exogenous_policy(std::string_view name) {
    if (name == "exogenous-truth" || name == "truth") return ExogenousPolicy::truth;
    if (name == "persist-exogenous" || name == "persist") return ExogenousPolicy::persist;
    throw ConfigError("unknown exogenous policy '" + std::string(name) + "'");
}

RolloutReport autoregressive_rollout(const ForecastFn& predict, const GridSeries& series,
                                     std::size_t context, std::size_t target_channel,
                                     std::size_t start_month, std::size_t steps,
                                     ExogenousPolicy policy) {
    if (start_month < context)
        throw ContractError("rollout: start month " + std::to_string(start_month) +
                            " leaves no room for a " + std::to_string(context) +
                            "-month context");
    if (start_month + steps > series.months)
        throw ContractError("rollout: " + std::to_string(steps) + " steps from month " +
                            std::to_string(start_month) + " overflow " +
                            std::to_string(series.months) + " months");
    if (steps == 0) throw ContractError("rollout: need at least one step");
    if (target_channel >= series.channels)
        throw ContractError("rollout: target channel out of range");

    const std::size_t hw = series.height * series.width;
    const std::size_t c = series.channels;

    // rolling (1, context, channels, H, W) window, seeded with ground truth
    Tensorf window({1, context, c, series.height, series.width});
    for (std::size_t t = 0; t < context; ++t)
        for (std::size_t ch = 0; ch < c; ++ch)
            std::memcpy(window.raw() + (t * c + ch) * hw,
                        series.frame(ch, start_month - context + t), hw * sizeof(float));

    RolloutReport report;
    report.policy = policy;
    report.start_month = start_month;
    report.rmse.reserve(steps);

    std::vector<float> prediction(hw);
    for (std::size_t k = 0; k < steps; ++k) {
        const std::size_t month = start_month + k;
        Tensorf out = predict(window);
        if (out.size() != hw)
            throw ShapeError("rollout: prediction has " + std::to_string(out.size()) +
                             " values, grid has " + std::to_string(hw));
        std::memcpy(prediction.data(), out.raw(), hw * sizeof(float));
        report.rmse.push_back(rmse(prediction, {series.frame(target_channel, month), hw}));

        if (k + 1 == steps) break;
        // shift one month: drop the oldest frame
        float* base = window.raw();
        std::memmove(base, base + c * hw, (context - 1) * c * hw * sizeof(float));
        float* newest = base + (context - 1) * c * hw;
        for (std::size_t ch = 0; ch < c; ++ch) {
            float* dst = newest + ch * hw;
            if (ch == target_channel) {
                std::memcpy(dst, prediction.data(), hw * sizeof(float));
            } else if (policy == ExogenousPolicy::truth) {
                std::memcpy(dst, series.frame(ch, month), hw * sizeof(float));
            }
            // persist policy: the moved frame at context-2 already holds the
            // latest exogenous values; copy them forward
            else {
                std::memcpy(dst, base + ((context - 2) * c + ch) * hw, hw * sizeof(float));
            }
        }
    }
    return report;
}

RolloutReport autoregressive_rollout(ForecastModel& model, const GridSeries& series,
                                     std::size_t start_month, std::size_t steps,
                                     ExogenousPolicy policy) {
    const std::size_t context = model.config().context_months;
    ForecastFn predict = [&model](const Tensorf& window) {
        ops::Context<float> ctx{nullptr, false, nullptr};
        return model.forward(window, ctx);
    };
    return autoregressive_rollout(predict, series, context, kTargetChannel, start_month, steps,
                                  policy);
}

}  // namespace emnet
