#include "emnet/manifest.hpp"

#include <fstream>

#include <json.hpp>

#include "emnet/errors.hpp"

namespace emnet {

void RunManifest::write_atomic(const std::filesystem::path& path) const {
    for (const auto& out : outputs)
        if (!std::filesystem::exists(out))
            throw IoError("manifest: declared output missing: " + out);

    nlohmann::json j;
    j["command"] = command;
    nlohmann::json cfg = nlohmann::json::object();
    for (const auto& [key, value] : config) cfg[key] = value;
    j["config"] = cfg;
    j["seed"] = seed;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["version"] = version;
    j["duration_seconds"] = duration_seconds;

    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream os(tmp);
        if (!os) throw IoError("manifest: cannot write " + tmp.string());
        os << j.dump(2) << '\n';
        if (!os) throw IoError("manifest: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace emnet
