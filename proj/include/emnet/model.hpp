#pragma once

#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "emnet/ops.hpp"
#include "emnet/tensor.hpp"

namespace emnet {

enum class ModelKind { mlp, convlstm, ent, env };

std::string to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

struct ModelConfig {
    ModelKind kind = ModelKind::mlp;
    std::size_t context_months = 24;
    std::size_t in_channels = 5;
    std::size_t grid_h = 64;
    std::size_t grid_w = 128;
    std::uint64_t init_seed = 42;

    // MLP
    std::vector<std::size_t> mlp_hidden = {256, 256};

    // ConvLSTM
    std::size_t convlstm_layers = 1;
    std::size_t convlstm_hidden = 8;
    std::size_t convlstm_kernel = 3;

    // ENT
    std::size_t ent_base_width = 64;   // initial conv filters; attention embed dim
    std::size_t ent_mid_width = 128;   // residual trunk width
    std::size_t ent_heads = 4;
    double ent_dropout = 0.1;

    // ENV
    std::size_t env_head1 = 192;
    std::size_t env_head2 = 384;
    std::size_t env_mfe_branch = 96;   // per-branch width; each MFE emits 4x this
    std::size_t env_ids_modules = 4;
    std::size_t env_ids_layers = 4;
    std::size_t env_growth = 56;
    std::size_t env_attn_reduction = 4;
    std::size_t env_reg_width = 128;
    std::size_t env_reg_skip_width = 32;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    std::uint64_t hash() const;

    void validate() const;
};

// Documented mini (desk-scale) and paper (full-scale) width presets.
// `scale` is "mini" or "paper"; grid dims override the preset's default.
ModelConfig default_config(ModelKind kind, std::string_view scale, std::size_t grid_h,
                           std::size_t grid_w);

struct NamedTensor {
    std::string name;
    Tensorf tensor;
};

namespace detail {
struct ModelImpl;
}

// A parameterized computation graph for one of the four architectures.
// Parameters and buffers are registered by unique name; the architecture
// structs alias the same storage, so checkpoint loads update the graph.
class ForecastModel {
public:
    ForecastModel() = default;
    ForecastModel(ForecastModel&&) noexcept;
    ForecastModel& operator=(ForecastModel&&) noexcept;
    ~ForecastModel();

    const ModelConfig& config() const { return config_; }
    const std::vector<NamedTensor>& parameters() const { return params_; }
    std::vector<NamedTensor>& parameters() { return params_; }
    const std::vector<NamedTensor>& buffers() const { return buffers_; }
    std::vector<NamedTensor>& buffers() { return buffers_; }

    // window (N, context, channels, H, W) -> prediction (N, H, W)
    Tensorf forward(const Tensorf& window, ops::Context<float>& ctx);

    void zero_grad();

    friend ForecastModel build_model(const ModelConfig& config);

private:
    ModelConfig config_;
    std::vector<NamedTensor> params_;
    std::vector<NamedTensor> buffers_;
    std::unique_ptr<detail::ModelImpl> impl_;
};

ForecastModel build_model(const ModelConfig& config);

// Total element count across all stored parameter tensors.
std::size_t count_parameters(const ForecastModel& model);

}  // namespace emnet
