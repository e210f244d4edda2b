#pragma once

#include <cmath>
#include <utility>
#include <vector>

#include "emnet/ops.hpp"

namespace emnet::layers {

using ops::Context;

// ---------------------------------------------------------------------------
// ConvLSTM cell
// ---------------------------------------------------------------------------

// Peephole ConvLSTM parameters. Input/hidden transforms are convolutions;
// peephole terms are per-channel weights applied by broadcast Hadamard
// product against the cell state.
template <class T>
struct ConvLstmParams {
    Tensor<T> w_xi, w_xf, w_xc, w_xo;  // (Ch, Cin, k, k)
    Tensor<T> w_hi, w_hf, w_hc, w_ho;  // (Ch, Ch, k, k)
    Tensor<T> w_ci, w_cf, w_co;        // (Ch)
    Tensor<T> b_i, b_f, b_c, b_o;      // (Ch)
    std::size_t hidden_channels = 0;
    std::size_t kernel_size = 0;
};

// One recurrent step:
//   i = sigmoid(Wxi*X + Whi*H + Wci.C + bi)
//   f = sigmoid(Wxf*X + Whf*H + Wcf.C + bf)
//   C' = f.C + i.tanh(Wxc*X + Whc*H + bc)
//   o = sigmoid(Wxo*X + Who*H + Wco.C' + bo)
//   H' = o.tanh(C')
// The eight gate convolutions run as a single fused convolution over
// concat(X, H) with the gate kernels stacked on the output axis; the sum
// structure is identical to evaluating each term separately.
template <class T>
std::pair<Tensor<T>, Tensor<T>> conv_lstm_cell_step(const Tensor<T>& x, const Tensor<T>& h_prev,
                                                    const Tensor<T>& c_prev,
                                                    const ConvLstmParams<T>& p, Context<T>& ctx) {
    ops::detail::check(x.rank() == 4 && h_prev.rank() == 4 && c_prev.rank() == 4,
                       "conv_lstm_cell_step: expected rank-4 tensors");
    ops::detail::check(x.dim(0) == h_prev.dim(0) && x.dim(2) == h_prev.dim(2) &&
                           x.dim(3) == h_prev.dim(3) && h_prev.shape() == c_prev.shape(),
                       "conv_lstm_cell_step: state shapes disagree with input");
    const std::size_t ch = p.hidden_channels;
    const std::size_t k = p.kernel_size;
    ops::detail::check(k % 2 == 1, "conv_lstm_cell_step: kernel size must be odd");
    const std::size_t pad = k / 2;
    Tape<T>* tape = ctx.tape;

    Tensor<T> xh = ops::concat({x, h_prev}, 1, tape);
    // gate order: i, f, c, o
    Tensor<T> k_i = ops::concat({p.w_xi, p.w_hi}, 1, tape);
    Tensor<T> k_f = ops::concat({p.w_xf, p.w_hf}, 1, tape);
    Tensor<T> k_c = ops::concat({p.w_xc, p.w_hc}, 1, tape);
    Tensor<T> k_o = ops::concat({p.w_xo, p.w_ho}, 1, tape);
    Tensor<T> k_all = ops::concat({k_i, k_f, k_c, k_o}, 0, tape);
    Tensor<T> b_all = ops::concat({p.b_i, p.b_f, p.b_c, p.b_o}, 0, tape);
    Tensor<T> pre = ops::conv2d(xh, k_all, b_all, 1, pad, tape);
    return ops::lstm_cell_update(pre, c_prev, p.w_ci, p.w_cf, p.w_co, tape);
}

// ---------------------------------------------------------------------------
// Densely connected basic layer (BN -> ReLU -> 3x3 conv)
// ---------------------------------------------------------------------------

template <class T>
struct DenseBasicParams {
    Tensor<T> bn_gamma, bn_beta;
    ops::BatchNormState<T> bn_state;
    Tensor<T> conv_w;  // (growth, Cin_total, 3, 3)
    Tensor<T> conv_b;  // (growth)
};

// Concatenates every predecessor's output on the channel axis, then applies
// BN, ReLU, and a same-padding 3x3 convolution emitting `growth` channels.
template <class T>
Tensor<T> dense_basic_layer(const std::vector<Tensor<T>>& inputs, DenseBasicParams<T>& p,
                            Context<T>& ctx) {
    Tensor<T> cat = inputs.size() == 1 ? inputs[0] : ops::concat_channels(inputs, ctx.tape);
    Tensor<T> normed =
        ops::batch_norm2d(cat, p.bn_gamma, p.bn_beta, p.bn_state, ctx.training, ctx.tape);
    Tensor<T> act = ops::relu(normed, ctx.tape);
    return ops::conv2d(act, p.conv_w, p.conv_b, 1, 1, ctx.tape);
}

// ---------------------------------------------------------------------------
// Multi-scale feature extraction (parallel 1x1 / 3x3 / 5x5 / pool branches)
// ---------------------------------------------------------------------------

template <class T>
struct MfeParams {
    Tensor<T> w1, b1;          // 1x1
    Tensor<T> w3, b3;          // 3x3, pad 1
    Tensor<T> w5, b5;          // 5x5, pad 2
    Tensor<T> wp, bp;          // 1x1 after 3x3 max pool
};

// B = [H1x1(A), H3x3(A), H5x5(A), Hpool(A)], all branches preserving H x W.
template <class T>
Tensor<T> mfe_module(const Tensor<T>& x, const MfeParams<T>& p, Context<T>& ctx) {
    Tape<T>* tape = ctx.tape;
    Tensor<T> b1 = ops::conv2d(x, p.w1, p.b1, 1, 0, tape);
    Tensor<T> b3 = ops::conv2d(x, p.w3, p.b3, 1, 1, tape);
    Tensor<T> b5 = ops::conv2d(x, p.w5, p.b5, 1, 2, tape);
    Tensor<T> pooled = ops::max_pool2d(x, 3, 1, 1, tape);
    Tensor<T> bp = ops::conv2d(pooled, p.wp, p.bp, 1, 0, tape);
    return ops::concat_channels({b1, b3, b5, bp}, tape);
}

// ---------------------------------------------------------------------------
// Channel attention (squeeze -> two FC layers -> sigmoid -> recalibrate)
// ---------------------------------------------------------------------------

template <class T>
struct ChannelAttenParams {
    Tensor<T> w1;  // (C/r, C)
    Tensor<T> w2;  // (C, C/r)
    std::size_t reduction = 4;
};

// z_c = global average pool; s_c = sigmoid(w2 . relu(w1 . z)); out = s_c * u_c.
template <class T>
Tensor<T> channel_attention(const Tensor<T>& x, const ChannelAttenParams<T>& p, Context<T>& ctx) {
    const std::size_t c = x.dim(1);
    if (p.reduction == 0 || c % p.reduction != 0)
        throw ConfigError("channel_attention: channels " + std::to_string(c) +
                          " not divisible by reduction " + std::to_string(p.reduction));
    ops::detail::check(p.w1.dim(0) == c / p.reduction && p.w1.dim(1) == c &&
                           p.w2.dim(0) == c && p.w2.dim(1) == c / p.reduction,
                       "channel_attention: weight shapes disagree with reduction");
    Tape<T>* tape = ctx.tape;
    Tensor<T> z = ops::global_avg_pool(x, tape);
    Tensor<T> hidden = ops::relu(ops::linear_nobias(z, p.w1, tape), tape);
    Tensor<T> s = ops::sigmoid(ops::linear_nobias(hidden, p.w2, tape), tape);
    return ops::scale_channels(x, s, tape);
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

template <class T>
struct ResidualBlockParams {
    Tensor<T> conv1_w;  // (Cout, Cin, 3, 3), stride s
    Tensor<T> bn1_gamma, bn1_beta;
    ops::BatchNormState<T> bn1_state;
    Tensor<T> conv2_w;  // (Cout, Cout, 3, 3), stride 1
    Tensor<T> bn2_gamma, bn2_beta;
    ops::BatchNormState<T> bn2_state;
    Tensor<T> shortcut_w;  // (Cout, Cin, 1, 1) when projecting, empty otherwise
    std::size_t stride = 1;
};

template <class T>
bool residual_needs_projection(const ResidualBlockParams<T>& p) {
    return p.shortcut_w.size() > 0;
}

// conv3x3(stride) -> BN -> ReLU -> conv3x3 -> BN, plus identity or 1x1
// projection shortcut; ReLU on the sum.
template <class T>
Tensor<T> residual_block(const Tensor<T>& x, ResidualBlockParams<T>& p, Context<T>& ctx) {
    Tape<T>* tape = ctx.tape;
    const std::size_t cin = x.dim(1);
    const std::size_t cout = p.conv1_w.dim(0);
    const bool project = residual_needs_projection(p);
    if (!project && (cin != cout || p.stride != 1))
        throw ShapeError("residual_block: identity shortcut needs matching shape, got " +
                         std::to_string(cin) + "->" + std::to_string(cout) + " stride " +
                         std::to_string(p.stride));
    Tensor<T> y = ops::conv2d_nobias(x, p.conv1_w, p.stride, 1, tape);
    y = ops::batch_norm2d(y, p.bn1_gamma, p.bn1_beta, p.bn1_state, ctx.training, tape);
    y = ops::relu(y, tape);
    y = ops::conv2d_nobias(y, p.conv2_w, 1, 1, tape);
    y = ops::batch_norm2d(y, p.bn2_gamma, p.bn2_beta, p.bn2_state, ctx.training, tape);
    Tensor<T> shortcut =
        project ? ops::conv2d_nobias(x, p.shortcut_w, p.stride, 0, tape) : x;
    return ops::relu(ops::add(y, shortcut, tape), tape);
}

// ---------------------------------------------------------------------------
// Transformer decoder block (spatial self-attention)
// ---------------------------------------------------------------------------

template <class T>
struct AttentionParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // (C,C) projections with bias
    Tensor<T> ln_gamma, ln_beta;               // (C)
    std::size_t embed_dim = 0;
    std::size_t heads = 1;
    double dropout_rate = 0.0;
};

// Flattens the grid to H*W tokens of width C, runs multi-head scaled
// dot-product self-attention, projects, applies dropout, adds the residual,
// and layer-normalizes; the result is reshaped back to (N,C,H,W).
template <class T>
Tensor<T> transformer_decoder(const Tensor<T>& x, AttentionParams<T>& p, Context<T>& ctx) {
    ops::detail::check(x.rank() == 4, "transformer_decoder: expected (N,C,H,W)");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c != p.embed_dim)
        throw ConfigError("transformer_decoder: embed_dim " + std::to_string(p.embed_dim) +
                          " != channels " + std::to_string(c));
    if (p.heads == 0 || c % p.heads != 0)
        throw ConfigError("transformer_decoder: embed_dim not divisible by head count");
    Tape<T>* tape = ctx.tape;
    const std::size_t t = h * w;
    const std::size_t dh = c / p.heads;

    // (N,C,H,W) -> (N,T,C) token sequence
    Tensor<T> seq = ops::reshape(x, Shape{n, c, t}, tape);
    seq = ops::permute(seq, {0, 2, 1}, tape);
    Tensor<T> flat = ops::reshape(seq, Shape{n * t, c}, tape);

    auto project = [&](const Tensor<T>& wgt, const Tensor<T>& bias) {
        Tensor<T> pr = ops::linear(flat, wgt, bias, tape);
        pr = ops::reshape(pr, Shape{n, t, p.heads, dh}, tape);
        pr = ops::permute(pr, {0, 2, 1, 3}, tape);  // (N, heads, T, dh)
        return ops::reshape(pr, Shape{n * p.heads, t, dh}, tape);
    };
    Tensor<T> q = project(p.wq, p.bq);
    Tensor<T> k = project(p.wk, p.bk);
    Tensor<T> v = project(p.wv, p.bv);

    Tensor<T> scores = ops::bmm_nt(q, k, tape);
    scores = ops::scale(scores, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))), tape);
    Tensor<T> attn = ops::softmax_lastdim(scores, tape);
    Tensor<T> ctx_heads = ops::bmm(attn, v, tape);  // (N*heads, T, dh)

    Tensor<T> merged = ops::reshape(ctx_heads, Shape{n, p.heads, t, dh}, tape);
    merged = ops::permute(merged, {0, 2, 1, 3}, tape);  // (N, T, heads, dh)
    merged = ops::reshape(merged, Shape{n * t, c}, tape);
    Tensor<T> proj = ops::linear(merged, p.wo, p.bo, tape);
    proj = ops::dropout(proj, p.dropout_rate, ctx);

    Tensor<T> res = ops::add(flat, proj, tape);
    Tensor<T> normed = ops::layer_norm_lastdim(res, p.ln_gamma, p.ln_beta, tape);

    Tensor<T> back = ops::reshape(normed, Shape{n, t, c}, tape);
    back = ops::permute(back, {0, 2, 1}, tape);
    return ops::reshape(back, Shape{n, c, h, w}, tape);
}

}  // namespace emnet::layers
