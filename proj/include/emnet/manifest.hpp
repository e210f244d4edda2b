#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace emnet {

inline constexpr const char* kToolkitVersion = "0.1.0";

// Record of one CLI invocation. Written atomically (temp file + rename)
// after verifying that every named output exists.
struct RunManifest {
    std::string command;
    std::vector<std::pair<std::string, std::string>> config;
    std::uint64_t seed = 0;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
    std::string version = kToolkitVersion;
    double duration_seconds = 0.0;

    void write_atomic(const std::filesystem::path& path) const;
};

}  // namespace emnet
