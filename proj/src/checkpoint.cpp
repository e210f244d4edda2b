#include "emnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace emnet {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'C', '1'};

template <class T>
void write_le(std::ostream& os, T value) {
    static_assert(std::endian::native == std::endian::little, "EMC1 writer assumes little-endian");
    os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_le(std::istream& is) {
    static_assert(std::endian::native == std::endian::little, "EMC1 reader assumes little-endian");
    T value{};
    is.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!is) throw CorruptionError("EMC1: truncated file");
    return value;
}

void write_tensor(std::ostream& os, const NamedTensor& nt) {
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(nt.name.size()));
    os.write(nt.name.data(), static_cast<std::streamsize>(nt.name.size()));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(nt.tensor.rank()));
    for (const std::size_t d : nt.tensor.shape())
        write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(nt.tensor.raw()),
             static_cast<std::streamsize>(nt.tensor.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const ForecastModel& model, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path.string());
    os.write(kMagic, 4);
    const std::string config_json = model.config().to_json();
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(config_json.size()));
    os.write(config_json.data(), static_cast<std::streamsize>(config_json.size()));
    write_le<std::uint64_t>(os, model.config().hash());
    write_le<std::uint32_t>(os,
                            static_cast<std::uint32_t>(model.parameters().size() +
                                                       model.buffers().size()));
    for (const auto& p : model.parameters()) write_tensor(os, p);
    for (const auto& b : model.buffers()) write_tensor(os, b);
    if (!os) throw IoError("write failed for " + path.string());
}

namespace {

struct LoadedHeader {
    ModelConfig config;
    std::uint64_t stored_hash;
    std::uint32_t tensor_count;
};

LoadedHeader read_header(std::istream& is, const std::filesystem::path& path) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError("EMC1: bad magic in " + path.string());
    const auto json_len = read_le<std::uint32_t>(is);
    std::string config_json(json_len, '\0');
    is.read(config_json.data(), json_len);
    if (!is) throw CorruptionError("EMC1: truncated config record");
    LoadedHeader h{ModelConfig::from_json(config_json), read_le<std::uint64_t>(is),
                   read_le<std::uint32_t>(is)};
    if (h.config.hash() != h.stored_hash)
        throw CorruptionError("EMC1: stored config hash does not match config record");
    return h;
}

void read_tensors_into(std::istream& is, ForecastModel& model, std::uint32_t count) {
    auto find = [&](const std::string& name) -> Tensorf* {
        for (auto& p : model.parameters())
            if (p.name == name) return &p.tensor;
        for (auto& b : model.buffers())
            if (b.name == name) return &b.tensor;
        return nullptr;
    };
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto name_len = read_le<std::uint32_t>(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        if (!is) throw CorruptionError("EMC1: truncated tensor name");
        const auto rank = read_le<std::uint32_t>(is);
        Shape shape(rank);
        for (auto& d : shape) d = read_le<std::uint32_t>(is);
        Tensorf* dst = find(name);
        if (!dst) throw FormatError("EMC1: unknown tensor '" + name + "'");
        if (dst->shape() != shape)
            throw CorruptionError("EMC1: tensor '" + name + "' has shape " + shape_str(shape) +
                                  ", model expects " + shape_str(dst->shape()));
        is.read(reinterpret_cast<char*>(dst->raw()),
                static_cast<std::streamsize>(dst->size() * sizeof(float)));
        if (!is) throw CorruptionError("EMC1: truncated data for tensor '" + name + "'");
    }
}

}  // namespace

void load_checkpoint(ForecastModel& model, const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    const LoadedHeader h = read_header(is, path);
    if (h.config.hash() != model.config().hash())
        throw ConfigError("EMC1: checkpoint config hash does not match the target model");
    read_tensors_into(is, model, h.tensor_count);
}

ForecastModel load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    const LoadedHeader h = read_header(is, path);
    ForecastModel model = build_model(h.config);
    read_tensors_into(is, model, h.tensor_count);
    return model;
}

}  // namespace emnet
