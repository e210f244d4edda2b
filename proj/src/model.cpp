#include "emnet/model.hpp"

#include <cmath>
#include <string>

#include <json.hpp>

#include "emnet/layers.hpp"
#include "emnet/rng.hpp"

namespace emnet {

std::string to_string(ModelKind kind) {
    switch (kind) {
        case ModelKind::mlp: return "mlp";
        case ModelKind::convlstm: return "convlstm";
        case ModelKind::ent: return "ent";
        default: return "env";
    }
}

ModelKind parse_model_kind(std::string_view name) {
    if (name == "mlp") return ModelKind::mlp;
    if (name == "convlstm") return ModelKind::convlstm;
    if (name == "ent") return ModelKind::ent;
    if (name == "env") return ModelKind::env;
    throw ConfigError("unknown model kind '" + std::string(name) +
                      "' (expected mlp|convlstm|ent|env)");
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["kind"] = emnet::to_string(kind);
    j["context_months"] = context_months;
    j["in_channels"] = in_channels;
    j["grid_h"] = grid_h;
    j["grid_w"] = grid_w;
    j["init_seed"] = init_seed;
    j["mlp_hidden"] = mlp_hidden;
    j["convlstm_layers"] = convlstm_layers;
    j["convlstm_hidden"] = convlstm_hidden;
    j["convlstm_kernel"] = convlstm_kernel;
    j["ent_base_width"] = ent_base_width;
    j["ent_mid_width"] = ent_mid_width;
    j["ent_heads"] = ent_heads;
    j["ent_dropout"] = ent_dropout;
    j["env_head1"] = env_head1;
    j["env_head2"] = env_head2;
    j["env_mfe_branch"] = env_mfe_branch;
    j["env_ids_modules"] = env_ids_modules;
    j["env_ids_layers"] = env_ids_layers;
    j["env_growth"] = env_growth;
    j["env_attn_reduction"] = env_attn_reduction;
    j["env_reg_width"] = env_reg_width;
    j["env_reg_skip_width"] = env_reg_skip_width;
    return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    nlohmann::json j = nlohmann::json::parse(text);
    ModelConfig c;
    c.kind = parse_model_kind(j.at("kind").get<std::string>());
    c.context_months = j.at("context_months").get<std::size_t>();
    c.in_channels = j.at("in_channels").get<std::size_t>();
    c.grid_h = j.at("grid_h").get<std::size_t>();
    c.grid_w = j.at("grid_w").get<std::size_t>();
    c.init_seed = j.at("init_seed").get<std::uint64_t>();
    c.mlp_hidden = j.at("mlp_hidden").get<std::vector<std::size_t>>();
    c.convlstm_layers = j.at("convlstm_layers").get<std::size_t>();
    c.convlstm_hidden = j.at("convlstm_hidden").get<std::size_t>();
    c.convlstm_kernel = j.at("convlstm_kernel").get<std::size_t>();
    c.ent_base_width = j.at("ent_base_width").get<std::size_t>();
    c.ent_mid_width = j.at("ent_mid_width").get<std::size_t>();
    c.ent_heads = j.at("ent_heads").get<std::size_t>();
    c.ent_dropout = j.at("ent_dropout").get<double>();
    c.env_head1 = j.at("env_head1").get<std::size_t>();
    c.env_head2 = j.at("env_head2").get<std::size_t>();
    c.env_mfe_branch = j.at("env_mfe_branch").get<std::size_t>();
    c.env_ids_modules = j.at("env_ids_modules").get<std::size_t>();
    c.env_ids_layers = j.at("env_ids_layers").get<std::size_t>();
    c.env_growth = j.at("env_growth").get<std::size_t>();
    c.env_attn_reduction = j.at("env_attn_reduction").get<std::size_t>();
    c.env_reg_width = j.at("env_reg_width").get<std::size_t>();
    c.env_reg_skip_width = j.at("env_reg_skip_width").get<std::size_t>();
    return c;
}

std::uint64_t ModelConfig::hash() const {
    // FNV-1a over the canonical JSON encoding
    const std::string text = to_json();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

void ModelConfig::validate() const {
    if (context_months == 0 || in_channels == 0 || grid_h == 0 || grid_w == 0)
        throw ConfigError("model config: dims must be positive");
    switch (kind) {
        case ModelKind::mlp:
            if (mlp_hidden.empty()) throw ConfigError("mlp: hidden width list is empty");
            for (const std::size_t wdt : mlp_hidden)
                if (wdt == 0) throw ConfigError("mlp: zero hidden width");
            break;
        case ModelKind::convlstm:
            if (convlstm_layers == 0 || convlstm_hidden == 0)
                throw ConfigError("convlstm: layers and hidden channels must be positive");
            if (convlstm_kernel % 2 == 0)
                throw ConfigError("convlstm: kernel size must be odd for same padding");
            break;
        case ModelKind::ent:
            if (ent_base_width == 0 || ent_mid_width == 0)
                throw ConfigError("ent: widths must be positive");
            if (grid_h % 2 != 0 || grid_w % 2 != 0)
                throw ConfigError("ent: grid dims must be divisible by 2, got " +
                                  std::to_string(grid_h) + "x" + std::to_string(grid_w));
            if (ent_heads == 0 || ent_base_width % ent_heads != 0)
                throw ConfigError("ent: base width must divide into heads");
            break;
        case ModelKind::env: {
            if (env_head1 == 0 || env_head2 == 0 || env_mfe_branch == 0 || env_growth == 0 ||
                env_reg_width == 0 || env_reg_skip_width == 0)
                throw ConfigError("env: widths must be positive");
            const std::size_t down = 4u << env_ids_modules;  // 2 head strides + one pool each
            if (grid_h % down != 0 || grid_w % down != 0)
                throw ConfigError("env: grid dims must be divisible by " + std::to_string(down) +
                                  ", got " + std::to_string(grid_h) + "x" + std::to_string(grid_w));
            const std::size_t c0 = 4 * env_mfe_branch;
            for (std::size_t l = 0; l <= env_ids_layers; ++l)
                if ((c0 + l * env_growth) % env_attn_reduction != 0)
                    throw ConfigError("env: IDS channel count " +
                                      std::to_string(c0 + l * env_growth) +
                                      " not divisible by attention reduction " +
                                      std::to_string(env_attn_reduction));
            break;
        }
    }
}

ModelConfig default_config(ModelKind kind, std::string_view scale, std::size_t grid_h,
                           std::size_t grid_w) {
    if (scale != "mini" && scale != "paper")
        throw ConfigError("unknown scale '" + std::string(scale) + "' (expected mini|paper)");
    ModelConfig c;
    c.kind = kind;
    c.grid_h = grid_h;
    c.grid_w = grid_w;
    if (scale == "paper") {
        c.mlp_hidden = {512, 512, 128};
        c.convlstm_layers = 3;
        c.convlstm_hidden = 32;
        c.convlstm_kernel = 5;
        c.ent_base_width = 64;
        c.ent_mid_width = 128;
        c.ent_heads = 4;
        c.env_head1 = 192;
        c.env_head2 = 384;
        c.env_mfe_branch = 96;
        c.env_growth = 56;
        c.env_reg_width = 128;
        c.env_reg_skip_width = 32;
    } else {
        c.mlp_hidden = {16, 16};
        c.convlstm_layers = 1;
        c.convlstm_hidden = 3;
        c.convlstm_kernel = 3;
        c.ent_base_width = 16;
        c.ent_mid_width = 32;
        c.ent_heads = 2;
        c.env_head1 = 16;
        c.env_head2 = 24;
        c.env_mfe_branch = 6;
        c.env_growth = 8;
        c.env_reg_width = 16;
        c.env_reg_skip_width = 8;
    }
    return c;
}

namespace detail {

using layers::AttentionParams;
using layers::ChannelAttenParams;
using layers::ConvLstmParams;
using layers::DenseBasicParams;
using layers::MfeParams;
using layers::ResidualBlockParams;
using ops::Context;

namespace {

void ensure_finite(const Tensorf& t, const std::string& stage) {
    if (!t.all_finite())
        throw NumericError("non-finite activations after layer '" + stage + "'");
}

// Registers parameters/buffers and draws fan-in-scaled uniform initial
// values in a fixed order, so identical configs build identical models.
class ParamBuilder {
public:
    ParamBuilder(std::vector<NamedTensor>& params, std::vector<NamedTensor>& buffers,
                 std::uint64_t seed)
        : params_(params), buffers_(buffers), rng_(seed) {}

    Tensorf weight(const std::string& name, Shape shape, std::size_t fan_in) {
        Tensorf t(shape);
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        for (auto& v : t.data()) v = static_cast<float>(rng_.uniform(-bound, bound));
        return track(name, t);
    }

    Tensorf conv_weight(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k) {
        return weight(name, {cout, cin, k, k}, cin * k * k);
    }

    Tensorf linear_weight(const std::string& name, std::size_t dout, std::size_t din) {
        return weight(name, {dout, din}, din);
    }

    Tensorf constant(const std::string& name, Shape shape, float value) {
        Tensorf t(shape, value);
        return track(name, t);
    }

    Tensorf zeros(const std::string& name, Shape shape) { return constant(name, shape, 0.0f); }
    Tensorf ones(const std::string& name, Shape shape) { return constant(name, shape, 1.0f); }

    void bn(const std::string& prefix, std::size_t channels, Tensorf& gamma, Tensorf& beta,
            ops::BatchNormState<float>& state) {
        gamma = ones(prefix + ".gamma", {channels});
        beta = zeros(prefix + ".beta", {channels});
        state = ops::BatchNormState<float>(channels);
        buffers_.push_back({prefix + ".running_mean", state.running_mean});
        buffers_.push_back({prefix + ".running_var", state.running_var});
    }

private:
    Tensorf track(const std::string& name, Tensorf t) {
        t.set_requires_grad(true);
        params_.push_back({name, t});
        return t;
    }

    std::vector<NamedTensor>& params_;
    std::vector<NamedTensor>& buffers_;
    Rng rng_;
};

Tensorf check_window(const Tensorf& window, const ModelConfig& cfg) {
    if (window.rank() != 5 || window.dim(1) != cfg.context_months ||
        window.dim(2) != cfg.in_channels || window.dim(3) != cfg.grid_h ||
        window.dim(4) != cfg.grid_w)
        throw ShapeError("forward: window " + shape_str(window.shape()) + " does not match (N," +
                         std::to_string(cfg.context_months) + "," +
                         std::to_string(cfg.in_channels) + "," + std::to_string(cfg.grid_h) + "," +
                         std::to_string(cfg.grid_w) + ")");
    return window;
}

}  // namespace

struct ModelImpl {
    virtual ~ModelImpl() = default;
    virtual Tensorf forward(const Tensorf& window, Context<float>& ctx) = 0;
};

// --- MLP ---------------------------------------------------------------------

struct MlpImpl : ModelImpl {
    ModelConfig cfg;
    std::vector<Tensorf> w, b;  // hidden stack then output layer

    MlpImpl(const ModelConfig& config, ParamBuilder& pb) : cfg(config) {
        const std::size_t in_dim =
            cfg.context_months * cfg.in_channels * cfg.grid_h * cfg.grid_w;
        std::size_t prev = in_dim;
        for (std::size_t i = 0; i < cfg.mlp_hidden.size(); ++i) {
            const std::size_t width = cfg.mlp_hidden[i];
            const std::string base = "mlp.fc" + std::to_string(i);
            w.push_back(pb.linear_weight(base + ".weight", width, prev));
            b.push_back(pb.zeros(base + ".bias", {width}));
            prev = width;
        }
        const std::size_t out_dim = cfg.grid_h * cfg.grid_w;
        w.push_back(pb.linear_weight("mlp.out.weight", out_dim, prev));
        b.push_back(pb.zeros("mlp.out.bias", {out_dim}));
    }

    Tensorf forward(const Tensorf& window, Context<float>& ctx) override {
        const std::size_t n = window.dim(0);
        Tensorf x = ops::reshape(window, {n, window.size() / n}, ctx.tape);
        for (std::size_t i = 0; i + 1 < w.size(); ++i) {
            x = ops::relu(ops::linear(x, w[i], b[i], ctx.tape), ctx.tape);
            ensure_finite(x, "mlp.fc" + std::to_string(i));
        }
        x = ops::linear(x, w.back(), b.back(), ctx.tape);
        ensure_finite(x, "mlp.out");
        return ops::reshape(x, {n, cfg.grid_h, cfg.grid_w}, ctx.tape);
    }
};

// --- ConvLSTM ------------------------------------------------------------------

struct ConvLstmImpl : ModelImpl {
    ModelConfig cfg;
    std::vector<ConvLstmParams<float>> cells;
    Tensorf head_w, head_b;

    ConvLstmImpl(const ModelConfig& config, ParamBuilder& pb) : cfg(config) {
        const std::size_t k = cfg.convlstm_kernel;
        const std::size_t ch = cfg.convlstm_hidden;
        std::size_t cin = cfg.in_channels;
        for (std::size_t l = 0; l < cfg.convlstm_layers; ++l) {
            const std::string base = "convlstm.l" + std::to_string(l);
            ConvLstmParams<float> p;
            p.hidden_channels = ch;
            p.kernel_size = k;
            p.w_xi = pb.conv_weight(base + ".w_xi", ch, cin, k);
            p.w_xf = pb.conv_weight(base + ".w_xf", ch, cin, k);
            p.w_xc = pb.conv_weight(base + ".w_xc", ch, cin, k);
            p.w_xo = pb.conv_weight(base + ".w_xo", ch, cin, k);
            p.w_hi = pb.conv_weight(base + ".w_hi", ch, ch, k);
            p.w_hf = pb.conv_weight(base + ".w_hf", ch, ch, k);
            p.w_hc = pb.conv_weight(base + ".w_hc", ch, ch, k);
            p.w_ho = pb.conv_weight(base + ".w_ho", ch, ch, k);
            p.w_ci = pb.zeros(base + ".w_ci", {ch});
            p.w_cf = pb.zeros(base + ".w_cf", {ch});
            p.w_co = pb.zeros(base + ".w_co", {ch});
            p.b_i = pb.zeros(base + ".b_i", {ch});
            // forget gate starts open, the usual LSTM bias choice
            p.b_f = pb.constant(base + ".b_f", {ch}, 1.0f);
            p.b_c = pb.zeros(base + ".b_c", {ch});
            p.b_o = pb.zeros(base + ".b_o", {ch});
            cells.push_back(std::move(p));
            cin = ch;
        }
        head_w = pb.conv_weight("convlstm.head.weight", 1, ch, 1);
        head_b = pb.zeros("convlstm.head.bias", {1});
    }

    Tensorf forward(const Tensorf& window, Context<float>& ctx) override {
        const std::size_t n = window.dim(0);
        const std::size_t steps = cfg.context_months;
        const std::size_t pad = cfg.convlstm_kernel / 2;
        Tape<float>* tape = ctx.tape;
        const Shape state_shape{n, cfg.convlstm_hidden, cfg.grid_h, cfg.grid_w};

        // Input-side gate convolutions for the first layer do not depend on
        // the recurrent state, so they run once over all frames as a single
        // batched convolution; the window carries no gradient.
        layers::ConvLstmParams<float>& c0 = cells[0];
        Tensorf kx = ops::concat({c0.w_xi, c0.w_xf, c0.w_xc, c0.w_xo}, 0, tape);
        Tensorf bx = ops::concat({c0.b_i, c0.b_f, c0.b_c, c0.b_o}, 0, tape);
        Tensorf frames = ops::permute(window, {1, 0, 2, 3, 4}, tape);  // (T,N,C,H,W)
        frames = ops::reshape(
            frames, {steps * n, cfg.in_channels, cfg.grid_h, cfg.grid_w}, tape);
        Tensorf pre_x_all = ops::conv2d(frames, kx, bx, 1, pad, tape);

        Tensorf kh = ops::concat({c0.w_hi, c0.w_hf, c0.w_hc, c0.w_ho}, 0, tape);
        std::vector<Tensorf> h(cells.size()), c(cells.size());
        for (std::size_t l = 0; l < cells.size(); ++l) {
            h[l] = Tensorf(state_shape);
            c[l] = Tensorf(state_shape);
        }
        for (std::size_t t = 0; t < steps; ++t) {
            Tensorf pre_x = ops::slice(pre_x_all, 0, t * n, n, tape);
            Tensorf pre_h = ops::conv2d_nobias(h[0], kh, 1, pad, tape);
            Tensorf pre = ops::add(pre_x, pre_h, tape);
            auto [h_t, c_t] = ops::lstm_cell_update(pre, c[0], c0.w_ci, c0.w_cf, c0.w_co, tape);
            h[0] = h_t;
            c[0] = c_t;
            Tensorf x = h_t;
            for (std::size_t l = 1; l < cells.size(); ++l) {
                auto [hl, cl] = layers::conv_lstm_cell_step(x, h[l], c[l], cells[l], ctx);
                h[l] = hl;
                c[l] = cl;
                x = hl;
            }
            ensure_finite(h.back(), "convlstm.step" + std::to_string(t));
        }
        Tensorf out = ops::conv2d(h.back(), head_w, head_b, 1, 0, ctx.tape);
        ensure_finite(out, "convlstm.head");
        return ops::reshape(out, {n, cfg.grid_h, cfg.grid_w}, ctx.tape);
    }
};

// --- ENT (residual trunk + spatial self-attention) -----------------------------

struct EntImpl : ModelImpl {
    ModelConfig cfg;
    Tensorf init_w;
    Tensorf init_bn_g, init_bn_b;
    ops::BatchNormState<float> init_bn_state;
    ResidualBlockParams<float> rb1, rb2, rb3;
    AttentionParams<float> attn;
    Tensorf head_w, head_b;

    void residual(ParamBuilder& pb, const std::string& base, ResidualBlockParams<float>& p,
                  std::size_t cin, std::size_t cout, std::size_t stride) {
        p.stride = stride;
        p.conv1_w = pb.conv_weight(base + ".conv1.weight", cout, cin, 3);
        pb.bn(base + ".bn1", cout, p.bn1_gamma, p.bn1_beta, p.bn1_state);
        p.conv2_w = pb.conv_weight(base + ".conv2.weight", cout, cout, 3);
        pb.bn(base + ".bn2", cout, p.bn2_gamma, p.bn2_beta, p.bn2_state);
        if (cin != cout || stride != 1)
            p.shortcut_w = pb.conv_weight(base + ".shortcut.weight", cout, cin, 1);
    }

    EntImpl(const ModelConfig& config, ParamBuilder& pb) : cfg(config) {
        const std::size_t stacked = cfg.context_months * cfg.in_channels;
        const std::size_t base_w = cfg.ent_base_width;
        const std::size_t mid_w = cfg.ent_mid_width;
        init_w = pb.conv_weight("ent.init.weight", base_w, stacked, 3);
        pb.bn("ent.init.bn", base_w, init_bn_g, init_bn_b, init_bn_state);
        residual(pb, "ent.rb1", rb1, base_w, mid_w, 2);
        residual(pb, "ent.rb2", rb2, mid_w, mid_w, 1);
        residual(pb, "ent.rb3", rb3, mid_w, base_w, 1);
        attn.embed_dim = base_w;
        attn.heads = cfg.ent_heads;
        attn.dropout_rate = cfg.ent_dropout;
        attn.wq = pb.linear_weight("ent.attn.wq", base_w, base_w);
        attn.bq = pb.zeros("ent.attn.bq", {base_w});
        attn.wk = pb.linear_weight("ent.attn.wk", base_w, base_w);
        attn.bk = pb.zeros("ent.attn.bk", {base_w});
        attn.wv = pb.linear_weight("ent.attn.wv", base_w, base_w);
        attn.bv = pb.zeros("ent.attn.bv", {base_w});
        attn.wo = pb.linear_weight("ent.attn.wo", base_w, base_w);
        attn.bo = pb.zeros("ent.attn.bo", {base_w});
        attn.ln_gamma = pb.ones("ent.attn.ln.gamma", {base_w});
        attn.ln_beta = pb.zeros("ent.attn.ln.beta", {base_w});
        head_w = pb.conv_weight("ent.head.weight", 1, base_w, 1);
        head_b = pb.zeros("ent.head.bias", {1});
    }

    Tensorf forward(const Tensorf& window, Context<float>& ctx) override {
        const std::size_t n = window.dim(0);
        Tensorf x = ops::reshape(
            window, {n, cfg.context_months * cfg.in_channels, cfg.grid_h, cfg.grid_w}, ctx.tape);
        Tensorf y = ops::conv2d_nobias(x, init_w, 1, 1, ctx.tape);
        y = ops::batch_norm2d(y, init_bn_g, init_bn_b, init_bn_state, ctx.training, ctx.tape);
        y = ops::relu(y, ctx.tape);
        ensure_finite(y, "ent.init");
        y = layers::residual_block(y, rb1, ctx);
        y = layers::residual_block(y, rb2, ctx);
        y = layers::residual_block(y, rb3, ctx);
        ensure_finite(y, "ent.residual");
        y = layers::transformer_decoder(y, attn, ctx);
        ensure_finite(y, "ent.attn");
        y = ops::conv2d(y, head_w, head_b, 1, 0, ctx.tape);
        y = ops::bilinear_upsample(y, cfg.grid_h, cfg.grid_w, ctx.tape);
        ensure_finite(y, "ent.head");
        return ops::reshape(y, {n, cfg.grid_h, cfg.grid_w}, ctx.tape);
    }
};

// --- ENV (heads + MFE stack + IDS modules + regression) ------------------------

struct EnvImpl : ModelImpl {
    ModelConfig cfg;
    Tensorf head1_w, head2_w;
    Tensorf head1_bn_g, head1_bn_b, head2_bn_g, head2_bn_b;
    ops::BatchNormState<float> head1_bn_state, head2_bn_state;
    std::vector<MfeParams<float>> mfe;

    struct IdsModule {
        std::vector<DenseBasicParams<float>> basics;
        std::vector<ChannelAttenParams<float>> attns;
        Tensorf trans_w, trans_b;
    };
    std::vector<IdsModule> ids;

    Tensorf reg1_w, reg1_b, reg2_w, reg2_b, out_w, out_b;

    EnvImpl(const ModelConfig& config, ParamBuilder& pb) : cfg(config) {
        const std::size_t stacked = cfg.context_months * cfg.in_channels;
        head1_w = pb.conv_weight("env.head1.weight", cfg.env_head1, stacked, 3);
        pb.bn("env.head1.bn", cfg.env_head1, head1_bn_g, head1_bn_b, head1_bn_state);
        head2_w = pb.conv_weight("env.head2.weight", cfg.env_head2, cfg.env_head1, 3);
        pb.bn("env.head2.bn", cfg.env_head2, head2_bn_g, head2_bn_b, head2_bn_state);

        const std::size_t mfe_out = 4 * cfg.env_mfe_branch;
        std::size_t cin = cfg.env_head2;
        for (std::size_t m = 0; m < 3; ++m) {
            const std::string base = "env.mfe" + std::to_string(m);
            MfeParams<float> p;
            p.w1 = pb.conv_weight(base + ".b1.weight", cfg.env_mfe_branch, cin, 1);
            p.b1 = pb.zeros(base + ".b1.bias", {cfg.env_mfe_branch});
            p.w3 = pb.conv_weight(base + ".b3.weight", cfg.env_mfe_branch, cin, 3);
            p.b3 = pb.zeros(base + ".b3.bias", {cfg.env_mfe_branch});
            p.w5 = pb.conv_weight(base + ".b5.weight", cfg.env_mfe_branch, cin, 5);
            p.b5 = pb.zeros(base + ".b5.bias", {cfg.env_mfe_branch});
            p.wp = pb.conv_weight(base + ".bp.weight", cfg.env_mfe_branch, cin, 1);
            p.bp = pb.zeros(base + ".bp.bias", {cfg.env_mfe_branch});
            mfe.push_back(std::move(p));
            cin = mfe_out;
        }

        for (std::size_t m = 0; m < cfg.env_ids_modules; ++m) {
            const std::string mbase = "env.ids" + std::to_string(m);
            IdsModule mod;
            std::size_t stack_c = mfe_out;
            for (std::size_t l = 0; l < cfg.env_ids_layers; ++l) {
                const std::string lbase = mbase + ".basic" + std::to_string(l);
                DenseBasicParams<float> bp;
                pb.bn(lbase + ".bn", stack_c, bp.bn_gamma, bp.bn_beta, bp.bn_state);
                bp.conv_w = pb.conv_weight(lbase + ".conv.weight", cfg.env_growth, stack_c, 3);
                bp.conv_b = pb.zeros(lbase + ".conv.bias", {cfg.env_growth});
                mod.basics.push_back(std::move(bp));
                stack_c += cfg.env_growth;
                if (l + 1 < cfg.env_ids_layers) {
                    const std::string abase = mbase + ".attn" + std::to_string(l);
                    ChannelAttenParams<float> ap;
                    ap.reduction = cfg.env_attn_reduction;
                    ap.w1 = pb.linear_weight(abase + ".w1", stack_c / ap.reduction, stack_c);
                    ap.w2 = pb.linear_weight(abase + ".w2", stack_c, stack_c / ap.reduction);
                    mod.attns.push_back(std::move(ap));
                }
            }
            mod.trans_w = pb.conv_weight(mbase + ".trans.weight", mfe_out, stack_c, 1);
            mod.trans_b = pb.zeros(mbase + ".trans.bias", {mfe_out});
            ids.push_back(std::move(mod));
        }

        reg1_w = pb.conv_weight("env.reg1.weight", cfg.env_reg_width, 2 * mfe_out, 3);
        reg1_b = pb.zeros("env.reg1.bias", {cfg.env_reg_width});
        reg2_w = pb.conv_weight("env.reg2.weight", cfg.env_reg_skip_width,
                                cfg.env_reg_width + cfg.in_channels, 3);
        reg2_b = pb.zeros("env.reg2.bias", {cfg.env_reg_skip_width});
        out_w = pb.conv_weight("env.out.weight", 1, cfg.env_reg_skip_width, 1);
        out_b = pb.zeros("env.out.bias", {1});
    }

    Tensorf forward(const Tensorf& window, Context<float>& ctx) override {
        const std::size_t n = window.dim(0);
        Tensorf last_frame = ops::time_slice(window, cfg.context_months - 1, ctx.tape);
        Tensorf x = ops::reshape(
            window, {n, cfg.context_months * cfg.in_channels, cfg.grid_h, cfg.grid_w}, ctx.tape);

        Tensorf y = ops::conv2d_nobias(x, head1_w, 2, 1, ctx.tape);
        y = ops::batch_norm2d(y, head1_bn_g, head1_bn_b, head1_bn_state, ctx.training, ctx.tape);
        y = ops::relu(y, ctx.tape);
        y = ops::conv2d_nobias(y, head2_w, 2, 1, ctx.tape);
        y = ops::batch_norm2d(y, head2_bn_g, head2_bn_b, head2_bn_state, ctx.training, ctx.tape);
        y = ops::relu(y, ctx.tape);
        ensure_finite(y, "env.heads");

        for (std::size_t m = 0; m < mfe.size(); ++m) {
            y = layers::mfe_module(y, mfe[m], ctx);
            ensure_finite(y, "env.mfe" + std::to_string(m));
        }
        Tensorf mfe_out = y;

        for (std::size_t m = 0; m < ids.size(); ++m) {
            IdsModule& mod = ids[m];
            Tensorf stack = y;
            for (std::size_t l = 0; l < mod.basics.size(); ++l) {
                Tensorf grown = layers::dense_basic_layer({stack}, mod.basics[l], ctx);
                stack = ops::concat_channels({stack, grown}, ctx.tape);
                if (l < mod.attns.size())
                    stack = layers::channel_attention(stack, mod.attns[l], ctx);
            }
            y = ops::conv2d(stack, mod.trans_w, mod.trans_b, 1, 0, ctx.tape);
            y = ops::max_pool2d(y, 2, 2, 0, ctx.tape);
            ensure_finite(y, "env.ids" + std::to_string(m));
        }

        Tensorf up1 = ops::bilinear_upsample(y, mfe_out.dim(2), mfe_out.dim(3), ctx.tape);
        Tensorf cat1 = ops::concat_channels({up1, mfe_out}, ctx.tape);
        Tensorf r1 = ops::relu(ops::conv2d(cat1, reg1_w, reg1_b, 1, 1, ctx.tape), ctx.tape);
        Tensorf up2 = ops::bilinear_upsample(r1, cfg.grid_h, cfg.grid_w, ctx.tape);
        Tensorf cat2 = ops::concat_channels({up2, last_frame}, ctx.tape);
        Tensorf r2 = ops::relu(ops::conv2d(cat2, reg2_w, reg2_b, 1, 1, ctx.tape), ctx.tape);
        Tensorf out = ops::conv2d(r2, out_w, out_b, 1, 0, ctx.tape);
        ensure_finite(out, "env.regression");
        return ops::reshape(out, {n, cfg.grid_h, cfg.grid_w}, ctx.tape);
    }
};

}  // namespace detail

ForecastModel::ForecastModel(ForecastModel&&) noexcept = default;
ForecastModel& ForecastModel::operator=(ForecastModel&&) noexcept = default;
ForecastModel::~ForecastModel() = default;

Tensorf ForecastModel::forward(const Tensorf& window, ops::Context<float>& ctx) {
    detail::check_window(window, config_);
    Tensorf out = impl_->forward(window, ctx);
    if (!out.all_finite())
        throw NumericError("non-finite prediction from " + to_string(config_.kind) + " forward");
    return out;
}

void ForecastModel::zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
}

ForecastModel build_model(const ModelConfig& config) {
    config.validate();
    ForecastModel model;
    model.config_ = config;
    detail::ParamBuilder pb(model.params_, model.buffers_, config.init_seed);
    switch (config.kind) {
        case ModelKind::mlp:
            model.impl_ = std::make_unique<detail::MlpImpl>(config, pb);
            break;
        case ModelKind::convlstm:
            model.impl_ = std::make_unique<detail::ConvLstmImpl>(config, pb);
            break;
        case ModelKind::ent:
            model.impl_ = std::make_unique<detail::EntImpl>(config, pb);
            break;
        case ModelKind::env:
            model.impl_ = std::make_unique<detail::EnvImpl>(config, pb);
            break;
    }
    return model;
}

std::size_t count_parameters(const ForecastModel& model) {
    std::size_t total = 0;
    for (const auto& p : model.parameters()) total += p.tensor.size();
    return total;
}

}  // namespace emnet
