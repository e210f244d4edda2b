#include "emnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "emnet/checkpoint.hpp"
#include "emnet/rng.hpp"

namespace emnet {

double mse(std::span<const float> pred, std::span<const float> truth) {
    if (pred.size() != truth.size())
        throw ShapeError("mse: size mismatch " + std::to_string(pred.size()) + " vs " +
                         std::to_string(truth.size()));
    if (pred.empty()) throw ContractError("mse: empty input");
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = static_cast<double>(pred[i]) - static_cast<double>(truth[i]);
        acc += d * d;
    }
    return acc / static_cast<double>(pred.size());
}

double rmse(std::span<const float> pred, std::span<const float> truth) {
    return std::sqrt(mse(pred, truth));
}

std::pair<Tensorf, Tensorf> make_batch(const std::vector<WindowSample>& samples,
                                       const std::vector<std::size_t>& order, std::size_t lo,
                                       std::size_t hi) {
    if (lo >= hi || hi > order.size()) throw ContractError("make_batch: bad range");
    const WindowSample& first = samples[order[lo]];
    const GridSeries& s = *first.series;
    const std::size_t b = hi - lo;
    const std::size_t ctx = first.context_months;
    Tensorf x({b, ctx, s.channels, s.height, s.width});
    Tensorf y({b, s.height, s.width});
    const std::size_t frame = ctx * s.channels * s.height * s.width;
    const std::size_t hw = s.height * s.width;
    for (std::size_t i = 0; i < b; ++i) {
        const WindowSample& sample = samples[order[lo + i]];
        const std::vector<float> context = sample.context();
        const std::vector<float> target = sample.target();
        std::memcpy(x.raw() + i * frame, context.data(), frame * sizeof(float));
        std::memcpy(y.raw() + i * hw, target.data(), hw * sizeof(float));
    }
    return {std::move(x), std::move(y)};
}

namespace {

std::vector<float> snapshot_params(const ForecastModel& model) {
    std::vector<float> out;
    for (const auto& p : model.parameters())
        out.insert(out.end(), p.tensor.data().begin(), p.tensor.data().end());
    for (const auto& b : model.buffers())
        out.insert(out.end(), b.tensor.data().begin(), b.tensor.data().end());
    return out;
}

void restore_params(ForecastModel& model, const std::vector<float>& snap) {
    std::size_t off = 0;
    for (auto& p : model.parameters()) {
        std::copy(snap.begin() + off, snap.begin() + off + p.tensor.size(),
                  p.tensor.data().begin());
        off += p.tensor.size();
    }
    for (auto& b : model.buffers()) {
        std::copy(snap.begin() + off, snap.begin() + off + b.tensor.size(),
                  b.tensor.data().begin());
        off += b.tensor.size();
    }
}

}  // namespace

TrainResult train(ForecastModel& model, const std::vector<WindowSample>& train_windows,
                  const std::vector<WindowSample>& val_windows, const TrainConfig& cfg) {
    if (train_windows.empty()) throw DataError("train: empty training set");
    if (cfg.epochs == 0 || cfg.batch_size == 0)
        throw ConfigError("train: epochs and batch size must be positive");

    const std::size_t n = train_windows.size();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const LrSchedule schedule{cfg.lr_peak, cfg.warmup_ratio, cfg.epochs * steps_per_epoch};

    std::vector<Tensorf> param_tensors;
    for (auto& p : model.parameters()) param_tensors.push_back(p.tensor);
    AdamW<float> opt(param_tensors,
                     {0.9f, 0.999f, 1e-8f, static_cast<float>(cfg.weight_decay)});

    Rng rng(cfg.seed);
    Rng dropout_rng = rng.fork(0xd70);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    result.best_val_mse = std::numeric_limits<double>::infinity();
    std::vector<float> best_snapshot;
    double last_val = std::numeric_limits<double>::quiet_NaN();

    Tape<float> tape;
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            const std::size_t lo = step * cfg.batch_size;
            const std::size_t hi = std::min(n, lo + cfg.batch_size);
            auto [x, y] = make_batch(train_windows, order, lo, hi);
            ops::Context<float> ctx{&tape, true, &dropout_rng};
            Tensorf pred = model.forward(x, ctx);
            Tensorf loss = ops::mse_loss(pred, y, &tape);
            const double loss_value = static_cast<double>(loss.item());
            if (!std::isfinite(loss_value))
                throw NumericError("non-finite training loss at epoch " + std::to_string(epoch) +
                                   " step " + std::to_string(step));
            backward(loss, tape);
            clip_global_norm(param_tensors, static_cast<float>(cfg.clip_norm));
            ++global_step;
            opt.step(static_cast<float>(lr_at(global_step, schedule)));
            model.zero_grad();
            tape.clear();
            epoch_loss += loss_value * static_cast<double>(hi - lo);
        }
        epoch_loss /= static_cast<double>(n);

        const bool eval_now =
            !val_windows.empty() &&
            (epoch % std::max<std::size_t>(1, cfg.eval_every) == 0 || epoch + 1 == cfg.epochs);
        if (eval_now) {
            last_val = evaluate_mse(model, val_windows, cfg.batch_size);
            if (last_val < result.best_val_mse) {
                result.best_val_mse = last_val;
                result.best_epoch = epoch;
                best_snapshot = snapshot_params(model);
            }
        }
        result.history.push_back({epoch, epoch_loss, last_val});
    }

    if (!best_snapshot.empty()) {
        restore_params(model, best_snapshot);
        if (!cfg.checkpoint_path.empty()) save_checkpoint(model, cfg.checkpoint_path);
    } else if (!cfg.checkpoint_path.empty()) {
        save_checkpoint(model, cfg.checkpoint_path);
    }
    return result;
}

double evaluate_mse(ForecastModel& model, const std::vector<WindowSample>& windows,
                    std::size_t batch_size) {
    if (windows.empty()) throw DataError("evaluate_mse: empty window set");
    if (batch_size == 0) throw ConfigError("evaluate_mse: batch size must be positive");
    std::vector<std::size_t> order(windows.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t hw = windows.front().series->height * windows.front().series->width;
    double acc = 0.0;
    for (std::size_t lo = 0; lo < windows.size(); lo += batch_size) {
        const std::size_t hi = std::min(windows.size(), lo + batch_size);
        auto [x, y] = make_batch(windows, order, lo, hi);
        ops::Context<float> ctx{nullptr, false, nullptr};
        Tensorf pred = model.forward(x, ctx);
        const float* pp = pred.raw();
        const float* py = y.raw();
        for (std::size_t i = 0; i < hi - lo; ++i)
            acc += mse({pp + i * hw, hw}, {py + i * hw, hw});
    }
    return acc / static_cast<double>(windows.size());
}

double persistence_mse(const std::vector<WindowSample>& windows) {
    if (windows.empty()) throw DataError("persistence_mse: empty window set");
    double acc = 0.0;
    for (const auto& sample : windows) {
        const GridSeries& s = *sample.series;
        const std::size_t last_month = sample.context_begin() + sample.context_months - 1;
        const float* last = s.frame(sample.target_channel, last_month);
        const std::vector<float> target = sample.target();
        acc += mse({last, target.size()}, target);
    }
    return acc / static_cast<double>(windows.size());
}

}  // namespace emnet
