#pragma once

#include <filesystem>

#include "emnet/model.hpp"

namespace emnet {

// EMC1 container: "EMC1" tag, config record (u32 JSON length, JSON bytes,
// u64 config hash), u32 tensor count, then named tensors (u32 name length,
// UTF-8 name, u32 rank, u32 dims, f32 LE data). Parameters and buffers are
// stored alike.
void save_checkpoint(const ForecastModel& model, const std::filesystem::path& path);

// Loads into an existing model; rejects files whose config hash differs
// from the model's.
void load_checkpoint(ForecastModel& model, const std::filesystem::path& path);

// Rebuilds the model from the embedded config, then loads the weights.
ForecastModel load_checkpoint(const std::filesystem::path& path);

}  // namespace emnet
