#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <vector>

#include "emnet/blas.hpp"
#include "emnet/parallel.hpp"
#include "emnet/rng.hpp"
#include "emnet/tensor.hpp"

namespace emnet::ops {

// Execution context threaded through layers and models. A null tape means
// inference: no graph is recorded. `rng` drives dropout masks and must be
// consumed in deterministic (sequential) order.
template <class T>
struct Context {
    Tape<T>* tape = nullptr;
    bool training = false;
    Rng* rng = nullptr;
};

namespace detail {

template <class T>
inline bool wants_grad(const Tape<T>* tape, std::initializer_list<const Tensor<T>*> args) {
    if (!tape) return false;
    for (const auto* a : args)
        if (a->requires_grad()) return true;
    return false;
}

template <class T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
#ifndef NDEBUG
    if (!t.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
#else
    (void)t;
    (void)op;
#endif
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

// Chunked dispatch for memory-bound elementwise loops; short spans stay on
// the calling thread.
template <class Fn>
inline void span_parallel(std::size_t n, Fn&& fn) {
    if (n >= (std::size_t{1} << 17))
        parallel_chunks(n, fn);
    else if (n > 0)
        fn(std::size_t{0}, n);
}

// Cephes-style expf, ~1 ulp, branch-free and auto-vectorizable. The float
// training path uses it for sigmoid/tanh/softmax; the double path keeps
// libm so gradient checks see maximum precision.
inline float fast_exp(float x) {
    x = std::min(88.3762626647949f, std::max(-87.3365478515625f, x));
    const float z = x * 1.44269504088896341f;
    const float n = std::floor(z + 0.5f);
    float r = x - n * 0.693359375f;
    r -= n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    const std::int32_t ni = static_cast<std::int32_t>(n);
    const float scale = std::bit_cast<float>((ni + 127) << 23);
    return p * scale;
}

template <class T>
inline T exp_fn(T x) {
    if constexpr (std::is_same_v<T, float>)
        return fast_exp(x);
    else
        return std::exp(x);
}

template <class T>
inline T sigmoid_fn(T x) {
    return T(1) / (T(1) + exp_fn(-x));
}

template <class T>
inline T tanh_fn(T x) {
    if constexpr (std::is_same_v<T, float>)
        return 1.0f - 2.0f / (fast_exp(2.0f * x) + 1.0f);
    else
        return std::tanh(x);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(Tensor<T> a, Tensor<T> b, Tape<T>* tape) {
    detail::check(a.shape() == b.shape(),
                  "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* pa = a.raw();
    const T* pb = b.raw();
    T* po = out.raw();
    detail::span_parallel(out.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = pa[i] + pb[i];
    });
    if (detail::wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                detail::span_parallel(g.size(), [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t i = lo; i < hi; ++i) ga[i] += g[i];
                });
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                detail::span_parallel(g.size(), [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t i = lo; i < hi; ++i) gb[i] += g[i];
                });
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b, Tape<T>* tape) {
    detail::check(a.shape() == b.shape(),
                  "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* pa = a.raw();
    const T* pb = b.raw();
    T* po = out.raw();
    detail::span_parallel(out.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = pa[i] - pb[i];
    });
    if (detail::wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        });
    }
    return out;
}

// Hadamard product.
template <class T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b, Tape<T>* tape) {
    detail::check(a.shape() == b.shape(),
                  "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* pa = a.raw();
    const T* pb = b.raw();
    T* po = out.raw();
    detail::span_parallel(out.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = pa[i] * pb[i];
    });
    if (detail::wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                const T* pb2 = b.raw();
                detail::span_parallel(g.size(), [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t i = lo; i < hi; ++i) ga[i] += g[i] * pb2[i];
                });
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                const T* pa2 = a.raw();
                detail::span_parallel(g.size(), [&](std::size_t lo, std::size_t hi) {
                    for (std::size_t i = lo; i < hi; ++i) gb[i] += g[i] * pa2[i];
                });
            }
        });
    }
    return out;
}

enum class Elementwise { add, mul };

template <class T>
Tensor<T> elementwise(Tensor<T> a, Tensor<T> b, Elementwise kind, Tape<T>* tape) {
    return kind == Elementwise::add ? add(a, b, tape) : mul(a, b, tape);
}

template <class T>
Tensor<T> add_n(std::vector<Tensor<T>> inputs, Tape<T>* tape) {
    if (inputs.empty()) throw ContractError("add_n: empty input list");
    Tensor<T> out = Tensor<T>::uninit(inputs[0].shape());
    T* po = out.raw();
    std::memcpy(po, inputs[0].raw(), out.size() * sizeof(T));
    for (std::size_t j = 1; j < inputs.size(); ++j) {
        detail::check(inputs[j].shape() == out.shape(), "add_n: shape mismatch");
        const T* pi = inputs[j].raw();
        for (std::size_t i = 0; i < out.size(); ++i) po[i] += pi[i];
    }
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        tape->record([inputs, out]() mutable {
            auto g = out.grad();
            for (auto& in : inputs) {
                if (!in.requires_grad()) continue;
                auto gi = in.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
            }
        });
    }
    return out;
}

// Multiply by a compile-time-constant scalar (no gradient for the scalar).
template <class T>
Tensor<T> scale(Tensor<T> a, T factor, Tape<T>* tape) {
    Tensor<T> out = Tensor<T>::uninit(a.shape());
    const T* pa = a.raw();
    T* po = out.raw();
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] * factor;
    if (detail::wants_grad(tape, {&a})) {
        out.set_requires_grad(true);
        tape->record([a, out, factor]() mutable {
            auto g = out.grad();
            auto ga = a.grad();
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Channel-indexed helpers for NCHW tensors
// ---------------------------------------------------------------------------

// out[n,c,:,:] = x[n,c,:,:] + b[c]
template <class T>
Tensor<T> add_channel_bias(Tensor<T> x, Tensor<T> b, Tape<T>* tape) {
    detail::check(x.rank() == 4 && b.rank() == 1 && b.dim(0) == x.dim(1),
                  "add_channel_bias: expected (N,C,H,W) and (C)");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* px = x.raw();
    const T* pb = b.raw();
    T* po = out.raw();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const T bias = pb[ci];
            const std::size_t base = (ni * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) po[base + i] = px[base + i] + bias;
        }
    if (detail::wants_grad(tape, {&x, &b})) {
        out.set_requires_grad(true);
        tape->record([x, b, out, n, c, hw]() mutable {
            auto g = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                for (std::size_t ci = 0; ci < c; ++ci) {
                    T acc = 0;
                    for (std::size_t ni = 0; ni < n; ++ni) {
                        const std::size_t base = (ni * c + ci) * hw;
                        for (std::size_t i = 0; i < hw; ++i) acc += g[base + i];
                    }
                    gb[ci] += acc;
                }
            }
        });
    }
    return out;
}

// out[n,c,:,:] = w[c] * x[n,c,:,:]  (per-channel broadcast Hadamard)
template <class T>
Tensor<T> mul_channel_weight(Tensor<T> x, Tensor<T> w, Tape<T>* tape) {
    detail::check(x.rank() == 4 && w.rank() == 1 && w.dim(0) == x.dim(1),
                  "mul_channel_weight: expected (N,C,H,W) and (C)");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* px = x.raw();
    const T* pw = w.raw();
    T* po = out.raw();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const T wc = pw[ci];
            const std::size_t base = (ni * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) po[base + i] = px[base + i] * wc;
        }
    if (detail::wants_grad(tape, {&x, &w})) {
        out.set_requires_grad(true);
        tape->record([x, w, out, n, c, hw]() mutable {
            auto g = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                const T* pw2 = w.raw();
                for (std::size_t ni = 0; ni < n; ++ni)
                    for (std::size_t ci = 0; ci < c; ++ci) {
                        const T wc = pw2[ci];
                        const std::size_t base = (ni * c + ci) * hw;
                        for (std::size_t i = 0; i < hw; ++i) gx[base + i] += g[base + i] * wc;
                    }
            }
            if (w.requires_grad()) {
                auto gw = w.grad();
                const T* px2 = x.raw();
                for (std::size_t ci = 0; ci < c; ++ci) {
                    T acc = 0;
                    for (std::size_t ni = 0; ni < n; ++ni) {
                        const std::size_t base = (ni * c + ci) * hw;
                        for (std::size_t i = 0; i < hw; ++i) acc += g[base + i] * px2[base + i];
                    }
                    gw[ci] += acc;
                }
            }
        });
    }
    return out;
}

// out[n,c,:,:] = s[n,c] * x[n,c,:,:]  (per-sample channel recalibration)
template <class T>
Tensor<T> scale_channels(Tensor<T> x, Tensor<T> s, Tape<T>* tape) {
    detail::check(x.rank() == 4 && s.rank() == 2 && s.dim(0) == x.dim(0) && s.dim(1) == x.dim(1),
                  "scale_channels: expected (N,C,H,W) and (N,C)");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* px = x.raw();
    const T* ps = s.raw();
    T* po = out.raw();
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const T sv = ps[nc];
        const std::size_t base = nc * hw;
        for (std::size_t i = 0; i < hw; ++i) po[base + i] = px[base + i] * sv;
    }
    if (detail::wants_grad(tape, {&x, &s})) {
        out.set_requires_grad(true);
        tape->record([x, s, out, n, c, hw]() mutable {
            auto g = out.grad();
            if (x.requires_grad()) {
                auto gx = x.grad();
                const T* ps2 = s.raw();
                for (std::size_t nc = 0; nc < n * c; ++nc) {
                    const T sv = ps2[nc];
                    const std::size_t base = nc * hw;
                    for (std::size_t i = 0; i < hw; ++i) gx[base + i] += g[base + i] * sv;
                }
            }
            if (s.requires_grad()) {
                auto gs = s.grad();
                const T* px2 = x.raw();
                for (std::size_t nc = 0; nc < n * c; ++nc) {
                    T acc = 0;
                    const std::size_t base = nc * hw;
                    for (std::size_t i = 0; i < hw; ++i) acc += g[base + i] * px2[base + i];
                    gs[nc] += acc;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T, class Fwd, class Bwd>
Tensor<T> unary_op(Tensor<T> x, Tape<T>* tape, Fwd fwd, Bwd bwd_from_y, const char* name) {
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* __restrict px = x.raw();
    T* __restrict po = out.raw();
    detail::span_parallel(out.size(), [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) po[i] = fwd(px[i]);
    });
    detail::debug_check_finite(out, name);
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, bwd_from_y]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            const T* py = out.raw();
            const T* px2 = x.raw();
            detail::span_parallel(g.size(), [&](std::size_t lo, std::size_t hi) {
                for (std::size_t i = lo; i < hi; ++i) gx[i] += g[i] * bwd_from_y(py[i], px2[i]);
            });
        });
    }
    return out;
}

template <class T>
Tensor<T> sigmoid(Tensor<T> x, Tape<T>* tape) {
    return unary_op(
        x, tape, [](T v) { return detail::sigmoid_fn(v); },
        [](T y, T) { return y * (T(1) - y); }, "sigmoid");
}

template <class T>
Tensor<T> tanh_act(Tensor<T> x, Tape<T>* tape) {
    return unary_op(
        x, tape, [](T v) { return detail::tanh_fn(v); }, [](T y, T) { return T(1) - y * y; },
        "tanh");
}

template <class T>
Tensor<T> relu(Tensor<T> x, Tape<T>* tape) {
    return unary_op(
        x, tape, [](T v) { return v > T(0) ? v : T(0); },
        [](T, T xv) { return xv > T(0) ? T(1) : T(0); }, "relu");
}

enum class Activation { sigmoid, tanh, relu };

template <class T>
Tensor<T> activation(Tensor<T> x, Activation kind, Tape<T>* tape) {
    switch (kind) {
        case Activation::sigmoid: return sigmoid(x, tape);
        case Activation::tanh: return tanh_act(x, tape);
        default: return relu(x, tape);
    }
}


namespace detail {

// Restrict-qualified plane kernels; parameter-level restrict is what lets
// the compiler vectorize the gate math.
template <class T>
void lstm_plane_forward(const T* __restrict pre_i, const T* __restrict pre_f,
                        const T* __restrict pre_c, const T* __restrict pre_o,
                        const T* __restrict cp, T wci, T wcf, T wco, std::size_t hw,
                        T* __restrict hp, T* __restrict ctp, T* __restrict si,
                        T* __restrict sf, T* __restrict sg, T* __restrict so,
                        T* __restrict st) {
    for (std::size_t j = 0; j < hw; ++j) {
        const T i_g = sigmoid_fn(pre_i[j] + wci * cp[j]);
        const T f_g = sigmoid_fn(pre_f[j] + wcf * cp[j]);
        const T g_g = tanh_fn(pre_c[j]);
        const T ct = f_g * cp[j] + i_g * g_g;
        const T o_g = sigmoid_fn(pre_o[j] + wco * ct);
        const T tct = tanh_fn(ct);
        si[j] = i_g;
        sf[j] = f_g;
        sg[j] = g_g;
        so[j] = o_g;
        st[j] = tct;
        ctp[j] = ct;
        hp[j] = o_g * tct;
    }
}

template <class T>
struct LstmPlaneGrads {
    T wci = 0, wcf = 0, wco = 0;
};

template <class T>
LstmPlaneGrads<T> lstm_plane_backward(
    const T* __restrict si, const T* __restrict sf, const T* __restrict sg,
    const T* __restrict so, const T* __restrict st, const T* __restrict cp,
    const T* __restrict ct, const T* __restrict ghp, const T* __restrict gcp_out, T wci, T wcf,
    T wco, std::size_t hw, bool need_pre, bool need_cp, T* __restrict gpre_i,
    T* __restrict gpre_f, T* __restrict gpre_c, T* __restrict gpre_o, T* __restrict gcp) {
    LstmPlaneGrads<T> acc;
    for (std::size_t j = 0; j < hw; ++j) {
        const T d_o = ghp[j] * st[j];
        const T d_pre_o = d_o * so[j] * (T(1) - so[j]);
        const T g_ct = gcp_out[j] + ghp[j] * so[j] * (T(1) - st[j] * st[j]) + d_pre_o * wco;
        const T d_pre_f = g_ct * cp[j] * sf[j] * (T(1) - sf[j]);
        const T d_pre_i = g_ct * sg[j] * si[j] * (T(1) - si[j]);
        const T d_pre_c = g_ct * si[j] * (T(1) - sg[j] * sg[j]);
        if (need_pre) {
            gpre_i[j] += d_pre_i;
            gpre_f[j] += d_pre_f;
            gpre_c[j] += d_pre_c;
            gpre_o[j] += d_pre_o;
        }
        if (need_cp) gcp[j] += g_ct * sf[j] + d_pre_i * wci + d_pre_f * wcf;
        acc.wci += d_pre_i * cp[j];
        acc.wcf += d_pre_f * cp[j];
        acc.wco += d_pre_o * ct[j];
    }
    return acc;
}

}  // namespace detail

// Fused peephole-LSTM gate evaluation and state update over NCHW maps.
// `pre` stacks the four gate pre-activations [i, f, c, o] on the channel
// axis, before the peephole terms:
//   i = sigmoid(pre_i + w_ci . c_prev)   f = sigmoid(pre_f + w_cf . c_prev)
//   c_t = f . c_prev + i . tanh(pre_c)
//   o = sigmoid(pre_o + w_co . c_t)      h_t = o . tanh(c_t)
// One op instead of a dozen keeps the recurrent unroll's tape and
// intermediate-buffer footprint flat.
template <class T>
std::pair<Tensor<T>, Tensor<T>> lstm_cell_update(Tensor<T> pre, Tensor<T> c_prev, Tensor<T> w_ci,
                                                 Tensor<T> w_cf, Tensor<T> w_co, Tape<T>* tape) {
    detail::check(pre.rank() == 4 && c_prev.rank() == 4, "lstm_cell_update: bad ranks");
    const std::size_t n = c_prev.dim(0), ch = c_prev.dim(1);
    const std::size_t hw = c_prev.dim(2) * c_prev.dim(3);
    detail::check(pre.dim(0) == n && pre.dim(1) == 4 * ch && pre.dim(2) == c_prev.dim(2) &&
                      pre.dim(3) == c_prev.dim(3),
                  "lstm_cell_update: pre-activation must hold 4 gate blocks");
    detail::check(w_ci.size() == ch && w_cf.size() == ch && w_co.size() == ch,
                  "lstm_cell_update: peephole weight size mismatch");

    Tensor<T> h = Tensor<T>::uninit(c_prev.shape());
    Tensor<T> c_t = Tensor<T>::uninit(c_prev.shape());
    // saved gate values for the backward pass: i, f, g, o, tanh(c_t)
    auto saved = std::make_shared<TensorStorage<T>>();
    saved->resize(5 * n * ch * hw);
    {
        const T* pcp = c_prev.raw();
        const T* pwi = w_ci.raw();
        const T* pwf = w_cf.raw();
        const T* pwo = w_co.raw();
        parallel_for(n * ch, [&](std::size_t plane) {
            const std::size_t ni = plane / ch, ci = plane % ch;
            detail::lstm_plane_forward(pre.raw() + ((ni * 4 + 0) * ch + ci) * hw,
                                       pre.raw() + ((ni * 4 + 1) * ch + ci) * hw,
                                       pre.raw() + ((ni * 4 + 2) * ch + ci) * hw,
                                       pre.raw() + ((ni * 4 + 3) * ch + ci) * hw,
                                       pcp + plane * hw, pwi[ci], pwf[ci], pwo[ci], hw,
                                       h.raw() + plane * hw, c_t.raw() + plane * hw,
                                       saved->data() + (0 * n * ch + plane) * hw,
                                       saved->data() + (1 * n * ch + plane) * hw,
                                       saved->data() + (2 * n * ch + plane) * hw,
                                       saved->data() + (3 * n * ch + plane) * hw,
                                       saved->data() + (4 * n * ch + plane) * hw);
        });
    }
    detail::debug_check_finite(h, "lstm_cell_update");

    if (detail::wants_grad(tape, {&pre, &c_prev, &w_ci, &w_cf, &w_co})) {
        h.set_requires_grad(true);
        c_t.set_requires_grad(true);
        tape->record([pre, c_prev, w_ci, w_cf, w_co, h, c_t, saved, n, ch, hw]() mutable {
            auto gh = h.grad();
            auto gct_out = c_t.grad();
            const T* pcp = c_prev.raw();
            const T* pct = c_t.raw();
            const T* pwi = w_ci.raw();
            const T* pwf = w_cf.raw();
            const T* pwo = w_co.raw();
            const bool need_pre = pre.requires_grad();
            const bool need_cp = c_prev.requires_grad();
            std::vector<detail::LstmPlaneGrads<T>> plane_grads(n * ch);
            T* gpre_base = need_pre ? pre.grad().data() : nullptr;
            T* gcp_base = need_cp ? c_prev.grad().data() : nullptr;
            parallel_for(n * ch, [&](std::size_t plane) {
                const std::size_t ni = plane / ch, ci = plane % ch;
                plane_grads[plane] = detail::lstm_plane_backward(
                    saved->data() + (0 * n * ch + plane) * hw,
                    saved->data() + (1 * n * ch + plane) * hw,
                    saved->data() + (2 * n * ch + plane) * hw,
                    saved->data() + (3 * n * ch + plane) * hw,
                    saved->data() + (4 * n * ch + plane) * hw, pcp + plane * hw,
                    pct + plane * hw, gh.data() + plane * hw, gct_out.data() + plane * hw,
                    pwi[ci], pwf[ci], pwo[ci], hw, need_pre, need_cp,
                    need_pre ? gpre_base + ((ni * 4 + 0) * ch + ci) * hw : nullptr,
                    need_pre ? gpre_base + ((ni * 4 + 1) * ch + ci) * hw : nullptr,
                    need_pre ? gpre_base + ((ni * 4 + 2) * ch + ci) * hw : nullptr,
                    need_pre ? gpre_base + ((ni * 4 + 3) * ch + ci) * hw : nullptr,
                    need_cp ? gcp_base + plane * hw : nullptr);
            });
            for (std::size_t plane = 0; plane < n * ch; ++plane) {
                const std::size_t ci = plane % ch;
                if (w_ci.requires_grad()) w_ci.grad()[ci] += plane_grads[plane].wci;
                if (w_cf.requires_grad()) w_cf.grad()[ci] += plane_grads[plane].wcf;
                if (w_co.requires_grad()) w_co.grad()[ci] += plane_grads[plane].wco;
            }
        });
    }
    return {h, c_t};
}

// Numerically stable softmax over the last dimension.
template <class T>
Tensor<T> softmax_lastdim(Tensor<T> x, Tape<T>* tape) {
    detail::check(x.rank() >= 1 && x.dim(x.rank() - 1) >= 1, "softmax: empty last dim");
    const std::size_t d = x.dim(x.rank() - 1);
    const std::size_t rows = x.size() / d;
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    const T* px = x.raw();
    T* po = out.raw();
    parallel_chunks(rows, [&](std::size_t r_lo, std::size_t r_hi) {
    for (std::size_t r = r_lo; r < r_hi; ++r) {
        const T* row = px + r * d;
        T* orow = po + r * d;
        T mx = row[0];
        for (std::size_t i = 1; i < d; ++i) mx = std::max(mx, row[i]);
        T sum = 0;
        for (std::size_t i = 0; i < d; ++i) {
            orow[i] = detail::exp_fn(row[i] - mx);
            sum += orow[i];
        }
        const T inv = T(1) / sum;
        for (std::size_t i = 0; i < d; ++i) orow[i] *= inv;
    }
    });
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, rows, d]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            const T* py = out.raw();
            parallel_chunks(rows, [&](std::size_t r_lo, std::size_t r_hi) {
                for (std::size_t r = r_lo; r < r_hi; ++r) {
                    const T* yrow = py + r * d;
                    const T* grow = g.data() + r * d;
                    T dot = 0;
                    for (std::size_t i = 0; i < d; ++i) dot += grow[i] * yrow[i];
                    T* gxrow = gx.data() + r * d;
                    for (std::size_t i = 0; i < d; ++i) gxrow[i] += yrow[i] * (grow[i] - dot);
                }
            });
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// out = x @ w^T + b   with x (N,Din), w (Dout,Din), b (Dout)
template <class T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, const Tensor<T>* b, Tape<T>* tape) {
    detail::check(x.rank() == 2 && w.rank() == 2, "linear: bad ranks");
    const std::size_t n = x.dim(0), din = x.dim(1), dout = w.dim(0);
    detail::check(w.dim(1) == din, "linear: weight inner dim " + std::to_string(w.dim(1)) +
                                       " != input dim " + std::to_string(din));
    if (b) detail::check(b->rank() == 1 && b->dim(0) == dout, "linear: bias dim mismatch");
    Tensor<T> out = Tensor<T>::uninit({n, dout});
    {
        T* po = out.raw();
        T beta = T(0);
        if (b) {
            const T* pb = b->raw();
            for (std::size_t ni = 0; ni < n; ++ni)
                std::memcpy(po + ni * dout, pb, dout * sizeof(T));
            beta = T(1);
        }
        emnet::detail::gemm(false, true, n, dout, din, T(1), x.raw(), din, w.raw(), din, beta, po,
                     dout);
    }
    Tensor<T> bias_copy = b ? *b : Tensor<T>();
    const bool has_bias = b != nullptr;
    const bool bias_grad = has_bias && b->requires_grad();
    if ((tape && bias_grad) || detail::wants_grad(tape, {&x, &w})) {
        out.set_requires_grad(true);
        tape->record([x, w, bias_copy, has_bias, out, n, din, dout]() mutable {
            auto g = out.grad();
            if (x.requires_grad())
                emnet::detail::gemm(false, false, n, din, dout, T(1), g.data(), dout, w.raw(), din,
                             T(1), x.grad().data(), din);
            if (w.requires_grad())
                emnet::detail::gemm(true, false, dout, din, n, T(1), g.data(), dout, x.raw(), din,
                             T(1), w.grad().data(), din);
            if (has_bias && bias_copy.requires_grad()) {
                auto gb = bias_copy.grad();
                for (std::size_t ni = 0; ni < n; ++ni)
                    for (std::size_t o = 0; o < dout; ++o) gb[o] += g[ni * dout + o];
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> linear(Tensor<T> x, Tensor<T> w, Tensor<T> b, Tape<T>* tape) {
    return linear(x, w, &b, tape);
}

// out = x @ w^T  (projection without bias, used by channel attention)
template <class T>
Tensor<T> linear_nobias(Tensor<T> x, Tensor<T> w, Tape<T>* tape) {
    return linear(x, w, static_cast<const Tensor<T>*>(nullptr), tape);
}

// Batched matmul: a (B,M,K) x b (B,K,N) -> (B,M,N)
template <class T>
Tensor<T> bmm(Tensor<T> a, Tensor<T> b, Tape<T>* tape) {
    detail::check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
                  "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor<T> out = Tensor<T>::uninit({bs, m, n});
    parallel_for(bs, [&](std::size_t bi) {
        emnet::detail::gemm(false, false, m, n, k, T(1), a.raw() + bi * m * k, k,
                            b.raw() + bi * k * n, n, T(0), out.raw() + bi * m * n, n);
    });
    if (detail::wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, bs, m, k, n]() mutable {
            auto g = out.grad();
            for (std::size_t bi = 0; bi < bs; ++bi) {
                const T* gp = g.data() + bi * m * n;
                if (a.requires_grad())
                    emnet::detail::gemm(false, true, m, k, n, T(1), gp, n, b.raw() + bi * k * n, n,
                                 T(1), a.grad().data() + bi * m * k, k);
                if (b.requires_grad())
                    emnet::detail::gemm(true, false, k, n, m, T(1), a.raw() + bi * m * k, k, gp, n,
                                 T(1), b.grad().data() + bi * k * n, n);
            }
        });
    }
    return out;
}

// a (B,M,K) x b (B,N,K)^T -> (B,M,N); used for attention scores Q K^T.
template <class T>
Tensor<T> bmm_nt(Tensor<T> a, Tensor<T> b, Tape<T>* tape) {
    detail::check(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
                  "bmm_nt: incompatible shapes");
    const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor<T> out = Tensor<T>::uninit({bs, m, n});
    parallel_for(bs, [&](std::size_t bi) {
        emnet::detail::gemm(false, true, m, n, k, T(1), a.raw() + bi * m * k, k,
                            b.raw() + bi * n * k, k, T(0), out.raw() + bi * m * n, n);
    });
    if (detail::wants_grad(tape, {&a, &b})) {
        out.set_requires_grad(true);
        tape->record([a, b, out, bs, m, k, n]() mutable {
            auto g = out.grad();
            for (std::size_t bi = 0; bi < bs; ++bi) {
                const T* gp = g.data() + bi * m * n;
                if (a.requires_grad())
                    emnet::detail::gemm(false, false, m, k, n, T(1), gp, n, b.raw() + bi * n * k, k,
                                 T(1), a.grad().data() + bi * m * k, k);
                if (b.requires_grad())
                    emnet::detail::gemm(true, false, n, k, m, T(1), gp, n, a.raw() + bi * m * k, k,
                                 T(1), b.grad().data() + bi * n * k, k);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(Tensor<T> x, Shape new_shape, Tape<T>* tape) {
    detail::check(shape_numel(new_shape) == x.size(),
                  "reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                      shape_str(new_shape));
    Tensor<T> out = Tensor<T>::from_data(std::move(new_shape),
                                         std::vector<T>(x.data().begin(), x.data().end()));
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

namespace detail {

// True when the permutation swaps the two leading axes and keeps the rest,
// which reduces to a block transpose of contiguous chunks.
inline bool is_leading_swap(const std::vector<std::size_t>& axes) {
    if (axes.size() < 2 || axes[0] != 1 || axes[1] != 0) return false;
    for (std::size_t i = 2; i < axes.size(); ++i)
        if (axes[i] != i) return false;
    return true;
}

}  // namespace detail

template <class T>
Tensor<T> permute(Tensor<T> x, const std::vector<std::size_t>& axes, Tape<T>* tape) {
    const std::size_t r = x.rank();
    detail::check(axes.size() == r, "permute: axes rank mismatch");
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
    if (detail::is_leading_swap(axes)) {
        const std::size_t a = x.dim(0), b = x.dim(1);
        const std::size_t chunk = x.size() / (a * b);
        Tensor<T> out = Tensor<T>::uninit(out_shape);
        const T* px = x.raw();
        T* po = out.raw();
        for (std::size_t i = 0; i < a; ++i)
            for (std::size_t j = 0; j < b; ++j)
                std::memcpy(po + (j * a + i) * chunk, px + (i * b + j) * chunk,
                            chunk * sizeof(T));
        if (detail::wants_grad(tape, {&x})) {
            out.set_requires_grad(true);
            tape->record([x, out, a, b, chunk]() mutable {
                auto g = out.grad();
                auto gx = x.grad();
                for (std::size_t i = 0; i < a; ++i)
                    for (std::size_t j = 0; j < b; ++j) {
                        const T* gsrc = g.data() + (j * a + i) * chunk;
                        T* gdst = gx.data() + (i * b + j) * chunk;
                        for (std::size_t t = 0; t < chunk; ++t) gdst[t] += gsrc[t];
                    }
            });
        }
        return out;
    }
    std::vector<std::size_t> in_strides(r, 1), out_to_in_stride(r);
    for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
    for (std::size_t i = 0; i < r; ++i) out_to_in_stride[i] = in_strides[axes[i]];
    Tensor<T> out = Tensor<T>::uninit(out_shape);
    const T* px = x.raw();
    T* po = out.raw();
    const std::size_t total = out.size();
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t lin = 0; lin < total; ++lin) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < r; ++i) src += idx[i] * out_to_in_stride[i];
        po[lin] = px[src];
        for (std::size_t i = r; i-- > 0;) {
            if (++idx[i] < out_shape[i]) break;
            idx[i] = 0;
        }
    }
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, out_shape, out_to_in_stride, r]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            std::vector<std::size_t> idx2(r, 0);
            for (std::size_t lin = 0; lin < g.size(); ++lin) {
                std::size_t src = 0;
                for (std::size_t i = 0; i < r; ++i) src += idx2[i] * out_to_in_stride[i];
                gx[src] += g[lin];
                for (std::size_t i = r; i-- > 0;) {
                    if (++idx2[i] < out_shape[i]) break;
                    idx2[i] = 0;
                }
            }
        });
    }
    return out;
}

// Concatenate along an arbitrary axis; all other dims must agree.
template <class T>
Tensor<T> concat(std::vector<Tensor<T>> inputs, std::size_t axis, Tape<T>* tape) {
    if (inputs.empty()) throw ContractError("concat: empty input list");
    const Shape& s0 = inputs[0].shape();
    detail::check(axis < s0.size(), "concat: axis out of range");
    std::size_t axis_total = 0;
    for (const auto& in : inputs) {
        detail::check(in.rank() == s0.size(), "concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            detail::check(i == axis || in.dim(i) == s0[i],
                          "concat: non-axis dim mismatch at axis " + std::to_string(i));
        axis_total += in.dim(axis);
    }
    Shape out_shape = s0;
    out_shape[axis] = axis_total;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s0[i];
    for (std::size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
    Tensor<T> out = Tensor<T>::uninit(out_shape);
    T* po = out.raw();
    const std::size_t out_row = axis_total * inner;
    std::size_t offset = 0;
    for (const auto& in : inputs) {
        const std::size_t block = in.dim(axis) * inner;
        const T* pi = in.raw();
        for (std::size_t o = 0; o < outer; ++o)
            std::memcpy(po + o * out_row + offset, pi + o * block, block * sizeof(T));
        offset += block;
    }
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (tape && any) {
        out.set_requires_grad(true);
        tape->record([inputs, out, outer, inner, out_row, axis]() mutable {
            auto g = out.grad();
            std::size_t off = 0;
            for (auto& in : inputs) {
                const std::size_t block = in.dim(axis) * inner;
                if (in.requires_grad()) {
                    auto gi = in.grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* gsrc = g.data() + o * out_row + off;
                        T* gdst = gi.data() + o * block;
                        for (std::size_t i = 0; i < block; ++i) gdst[i] += gsrc[i];
                    }
                }
                off += block;
            }
        });
    }
    return out;
}

// (N,C_i,H,W) inputs joined on the channel axis.
template <class T>
Tensor<T> concat_channels(std::vector<Tensor<T>> inputs, Tape<T>* tape) {
    for (const auto& in : inputs)
        detail::check(in.rank() == 4, "concat_channels: expected rank-4 inputs");
    return concat(inputs, 1, tape);
}

// Copy of x[..., start:start+len, ...] along `axis`.
template <class T>
Tensor<T> slice(Tensor<T> x, std::size_t axis, std::size_t start, std::size_t len,
                Tape<T>* tape) {
    detail::check(axis < x.rank(), "slice: axis out of range");
    detail::check(start + len <= x.dim(axis), "slice: range out of bounds");
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Shape out_shape = x.shape();
    out_shape[axis] = len;
    Tensor<T> out = Tensor<T>::uninit(out_shape);
    const std::size_t in_row = x.dim(axis) * inner;
    const std::size_t out_row = len * inner;
    const T* px = x.raw();
    T* po = out.raw();
    for (std::size_t o = 0; o < outer; ++o)
        std::memcpy(po + o * out_row, px + o * in_row + start * inner, out_row * sizeof(T));
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, outer, inner, in_row, out_row, start]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t o = 0; o < outer; ++o) {
                T* gdst = gx.data() + o * in_row + start * inner;
                const T* gsrc = g.data() + o * out_row;
                for (std::size_t i = 0; i < out_row; ++i) gdst[i] += gsrc[i];
            }
        });
    }
    return out;
}

// (N,T,C,H,W) -> (N,C,H,W) frame at time t.
template <class T>
Tensor<T> time_slice(Tensor<T> x, std::size_t t, Tape<T>* tape) {
    detail::check(x.rank() == 5, "time_slice: expected (N,T,C,H,W)");
    Tensor<T> frame = slice(x, 1, t, 1, tape);
    return reshape(frame, Shape{x.dim(0), x.dim(2), x.dim(3), x.dim(4)}, tape);
}

// ---------------------------------------------------------------------------
// Convolution / pooling / normalization
// ---------------------------------------------------------------------------

inline std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride,
                                std::size_t padding) {
    if (in + 2 * padding < k) throw ShapeError("conv: kernel larger than padded input");
    return (in + 2 * padding - k) / stride + 1;
}

namespace detail {

// Sum with a fixed 16-lane accumulation order; vectorizes without
// reassociation license and stays bitwise reproducible.
template <class T>
T lane_sum(const T* p, std::size_t count) {
    T lanes[16] = {};
    std::size_t i = 0;
    for (; i + 16 <= count; i += 16)
        for (std::size_t l = 0; l < 16; ++l) lanes[l] += p[i + l];
    T acc = 0;
    for (; i < count; ++i) acc += p[i];
    for (std::size_t l = 0; l < 16; ++l) acc += lanes[l];
    return acc;
}

template <class T>
T lane_dot(const T* a, const T* b, std::size_t count) {
    T lanes[16] = {};
    std::size_t i = 0;
    for (; i + 16 <= count; i += 16)
        for (std::size_t l = 0; l < 16; ++l) lanes[l] += a[i + l] * b[i + l];
    T acc = 0;
    for (; i < count; ++i) acc += a[i] * b[i];
    for (std::size_t l = 0; l < 16; ++l) acc += lanes[l];
    return acc;
}

inline void valid_out_range(std::ptrdiff_t off, std::size_t stride, std::size_t in_dim,
                            std::size_t out_dim, std::size_t& lo, std::size_t& hi) {
    lo = 0;
    if (off < 0) lo = (static_cast<std::size_t>(-off) + stride - 1) / stride;
    const std::ptrdiff_t max_i = static_cast<std::ptrdiff_t>(in_dim) - 1 - off;
    hi = max_i < 0 ? 0 : std::min(out_dim, static_cast<std::size_t>(max_i) / stride + 1);
    if (hi < lo) hi = lo;
}

// Patch matrix in (Cin*kH*kW, Ho*Wo) layout: row (c*kH+ky)*kW+kx holds the
// shifted input plane, zero outside bounds.
template <class T>
void im2col(const T* in, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t padding, std::size_t ho,
            std::size_t wo, T* col) {
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
                T* base = col + ((c * kh + ky) * kw + kx) * ho * wo;
                const std::ptrdiff_t off_y = static_cast<std::ptrdiff_t>(ky) -
                                             static_cast<std::ptrdiff_t>(padding);
                const std::ptrdiff_t off_x = static_cast<std::ptrdiff_t>(kx) -
                                             static_cast<std::ptrdiff_t>(padding);
                std::size_t lo, hi;
                valid_out_range(off_x, stride, w, wo, lo, hi);
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    T* crow = base + oy * wo;
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride) + off_y;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) {
                        std::fill(crow, crow + wo, T(0));
                        continue;
                    }
                    const T* irow = in + (c * h + static_cast<std::size_t>(iy)) * w;
                    std::fill(crow, crow + lo, T(0));
                    std::fill(crow + hi, crow + wo, T(0));
                    if (stride == 1) {
                        std::memcpy(crow + lo, irow + lo + off_x, (hi - lo) * sizeof(T));
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox)
                            crow[ox] = irow[ox * stride + off_x];
                    }
                }
            }
}

// Scatter-add of the patch-matrix gradient back onto the input plane.
template <class T>
void col2im_add(const T* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t padding, std::size_t ho,
                std::size_t wo, T* gin) {
    for (std::size_t c = 0; c < cin; ++c)
        for (std::size_t ky = 0; ky < kh; ++ky)
            for (std::size_t kx = 0; kx < kw; ++kx) {
                const T* base = col + ((c * kh + ky) * kw + kx) * ho * wo;
                const std::ptrdiff_t off_y = static_cast<std::ptrdiff_t>(ky) -
                                             static_cast<std::ptrdiff_t>(padding);
                const std::ptrdiff_t off_x = static_cast<std::ptrdiff_t>(kx) -
                                             static_cast<std::ptrdiff_t>(padding);
                std::size_t lo, hi;
                valid_out_range(off_x, stride, w, wo, lo, hi);
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const T* crow = base + oy * wo;
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride) + off_y;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    T* grow = gin + (c * h + static_cast<std::size_t>(iy)) * w;
                    if (stride == 1) {
                        T* gr = grow + off_x;
                        for (std::size_t ox = lo; ox < hi; ++ox) gr[ox] += crow[ox];
                    } else {
                        for (std::size_t ox = lo; ox < hi; ++ox)
                            grow[ox * stride + off_x] += crow[ox];
                    }
                }
            }
}

}  // namespace detail

// Cross-correlation (no kernel flip), zero padding.
// input (N,Cin,H,W), kernel (Cout,Cin,kH,kW), optional bias (Cout).
// Lowered per sample to a patch matrix and evaluated as
// out (Cout, Ho*Wo) = kernel (Cout, Cin*kH*kW) x col; the backward pass
// uses the transposed products for the kernel and input gradients.
template <class T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> kernel, const Tensor<T>* bias, std::size_t stride,
                 std::size_t padding, Tape<T>* tape) {
    detail::check(input.rank() == 4 && kernel.rank() == 4, "conv2d: bad ranks");
    detail::check(stride >= 1, "conv2d: stride must be >= 1");
    const std::size_t n = input.dim(0), cin = input.dim(1), h = input.dim(2), w = input.dim(3);
    const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    detail::check(kernel.dim(1) == cin, "conv2d: channel mismatch, input has " +
                                            std::to_string(cin) + ", kernel expects " +
                                            std::to_string(kernel.dim(1)));
    if (bias) detail::check(bias->rank() == 1 && bias->dim(0) == cout, "conv2d: bad bias shape");
    const std::size_t ho = conv_out_dim(h, kh, stride, padding);
    const std::size_t wo = conv_out_dim(w, kw, stride, padding);
    detail::check(ho >= 1 && wo >= 1, "conv2d: non-positive output dims");

    const std::size_t ck = cin * kh * kw;
    const std::size_t owo = ho * wo;
    const bool plain = kh == 1 && kw == 1 && stride == 1 && padding == 0;

    Tensor<T> out = Tensor<T>::uninit({n, cout, ho, wo});
    {
        const T* pk = kernel.raw();
        const T* pb = bias ? bias->raw() : nullptr;
        parallel_chunks(n, [&](std::size_t lo, std::size_t hi) {
            std::vector<T> col(plain ? 0 : ck * owo);
            for (std::size_t ni = lo; ni < hi; ++ni) {
                const T* iplane = input.raw() + ni * cin * h * w;
                const T* colp = plain ? iplane : col.data();
                if (!plain)
                    detail::im2col(iplane, cin, h, w, kh, kw, stride, padding, ho, wo,
                                   col.data());
                T* oplane = out.raw() + ni * cout * owo;
                T beta = T(0);
                if (pb) {
                    for (std::size_t o = 0; o < cout; ++o)
                        std::fill(oplane + o * owo, oplane + (o + 1) * owo, pb[o]);
                    beta = T(1);
                }
                emnet::detail::gemm(false, false, cout, owo, ck, T(1), pk, ck, colp, owo, beta,
                                    oplane, owo);
            }
        });
    }
    detail::debug_check_finite(out, "conv2d");

    Tensor<T> bias_copy = bias ? *bias : Tensor<T>();
    const bool has_bias = bias != nullptr;
    const bool bias_grad = has_bias && bias->requires_grad();
    if ((tape && bias_grad) || detail::wants_grad(tape, {&input, &kernel})) {
        out.set_requires_grad(true);
        tape->record([input, kernel, bias_copy, has_bias, out, n, cin, cout, h, w, kh, kw, ho,
                      wo, ck, owo, stride, padding, plain]() mutable {
            auto g = out.grad();
            const T* pg = g.data();
            const bool need_dk = kernel.requires_grad();
            const bool need_dx = input.requires_grad();
            const T* pk = kernel.raw();
            if (need_dx) {
                T* pgin = input.grad().data();
                parallel_chunks(n, [&](std::size_t lo, std::size_t hi) {
                    std::vector<T> dcol(plain ? 0 : ck * owo);
                    for (std::size_t ni = lo; ni < hi; ++ni) {
                        const T* gplane = pg + ni * cout * owo;
                        T* giplane = pgin + ni * cin * h * w;
                        if (plain) {
                            emnet::detail::gemm(true, false, ck, owo, cout, T(1), pk, ck, gplane,
                                                owo, T(1), giplane, owo);
                        } else {
                            emnet::detail::gemm(true, false, ck, owo, cout, T(1), pk, ck, gplane,
                                                owo, T(0), dcol.data(), owo);
                            detail::col2im_add(dcol.data(), cin, h, w, kh, kw, stride, padding,
                                               ho, wo, giplane);
                        }
                    }
                });
            }
            if (need_dk) {
                T* pgk = kernel.grad().data();
                auto accumulate = [&](std::size_t lo, std::size_t hi, T* dst, T beta_first) {
                    std::vector<T> col(plain ? 0 : ck * owo);
                    T beta = beta_first;
                    for (std::size_t ni = lo; ni < hi; ++ni) {
                        const T* gplane = pg + ni * cout * owo;
                        const T* iplane = input.raw() + ni * cin * h * w;
                        const T* colp = plain ? iplane : col.data();
                        if (!plain)
                            detail::im2col(iplane, cin, h, w, kh, kw, stride, padding, ho, wo,
                                           col.data());
                        emnet::detail::gemm(false, true, cout, ck, owo, T(1), gplane, owo, colp,
                                            owo, beta, dst, ck);
                        beta = T(1);
                    }
                };
                const std::size_t workers = std::min<std::size_t>(thread_count(), n);
                const std::size_t chunk = workers ? (n + workers - 1) / workers : n;
                const std::size_t nchunks = chunk ? (n + chunk - 1) / chunk : 1;
                if (nchunks <= 1) {
                    accumulate(0, n, pgk, T(1));
                } else {
                    // per-chunk partial kernels merged in fixed chunk order
                    std::vector<std::vector<T>> partials(nchunks,
                                                         std::vector<T>(cout * ck));
                    parallel_chunks(n, [&](std::size_t lo, std::size_t hi) {
                        accumulate(lo, hi, partials[lo / chunk].data(), T(0));
                    });
                    for (const auto& part : partials)
                        for (std::size_t i = 0; i < part.size(); ++i) pgk[i] += part[i];
                }
            }
            if (has_bias && bias_copy.requires_grad()) {
                auto gb = bias_copy.grad();
                for (std::size_t o = 0; o < cout; ++o) {
                    T acc = 0;
                    for (std::size_t ni = 0; ni < n; ++ni)
                        acc += detail::lane_sum(pg + (ni * cout + o) * owo, owo);
                    gb[o] += acc;
                }
            }
        });
    }
    return out;
}

template <class T>
Tensor<T> conv2d(Tensor<T> input, Tensor<T> kernel, Tensor<T> bias, std::size_t stride,
                 std::size_t padding, Tape<T>* tape) {
    return conv2d(input, kernel, &bias, stride, padding, tape);
}

template <class T>
Tensor<T> conv2d_nobias(Tensor<T> input, Tensor<T> kernel, std::size_t stride,
                        std::size_t padding, Tape<T>* tape) {
    return conv2d(input, kernel, static_cast<const Tensor<T>*>(nullptr), stride, padding, tape);
}

// Block maxima with -inf padding. The gradient routes to the first maximal
// element in window scan order (lowest linear index on ties).
template <class T>
Tensor<T> max_pool2d(Tensor<T> x, std::size_t k, std::size_t stride, std::size_t padding,
                     Tape<T>* tape) {
    detail::check(x.rank() == 4, "max_pool2d: expected (N,C,H,W)");
    detail::check(k >= 1 && stride >= 1, "max_pool2d: bad window");
    detail::check(2 * padding <= k, "max_pool2d: padding larger than half the window");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::size_t ho = conv_out_dim(h, k, stride, padding);
    const std::size_t wo = conv_out_dim(w, k, stride, padding);
    Tensor<T> out = Tensor<T>::uninit({n, c, ho, wo});
    auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
    const T* px = x.raw();
    T* po = out.raw();
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const T* plane = px + nc * h * w;
        for (std::size_t oy = 0; oy < ho; ++oy)
            for (std::size_t ox = 0; ox < wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_idx = 0;
                bool found = false;
                for (std::size_t ky = 0; ky < k; ++ky) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                              static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t kx = 0; kx < k; ++kx) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                                  static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        const std::size_t lin = static_cast<std::size_t>(iy) * w +
                                                static_cast<std::size_t>(ix);
                        if (!found || plane[lin] > best) {
                            best = plane[lin];
                            best_idx = lin;
                            found = true;
                        }
                    }
                }
                detail::check(found, "max_pool2d: window fully in padding");
                const std::size_t out_lin = (nc * ho + oy) * wo + ox;
                po[out_lin] = best;
                (*argmax)[out_lin] = nc * h * w + best_idx;
            }
    }
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, argmax]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
        });
    }
    return out;
}

// (N,C,H,W) -> (N,C) spatial mean.
template <class T>
Tensor<T> global_avg_pool(Tensor<T> x, Tape<T>* tape) {
    detail::check(x.rank() == 4 && x.dim(2) >= 1 && x.dim(3) >= 1,
                  "global_avg_pool: expected (N,C,H,W)");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    Tensor<T> out = Tensor<T>::uninit({n, c});
    const T* px = x.raw();
    T* po = out.raw();
    const T inv = T(1) / static_cast<T>(hw);
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        T acc = 0;
        const T* base = px + nc * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += base[i];
        po[nc] = acc * inv;
    }
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, hw, inv]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t nc = 0; nc < g.size(); ++nc) {
                const T gv = g[nc] * inv;
                T* base = gx.data() + nc * hw;
                for (std::size_t i = 0; i < hw; ++i) base[i] += gv;
            }
        });
    }
    return out;
}

// Running statistics owned by a batch-norm layer.
template <class T>
struct BatchNormState {
    Tensor<T> running_mean;
    Tensor<T> running_var;

    explicit BatchNormState(std::size_t channels = 0)
        : running_mean(Shape{channels}, T(0)), running_var(Shape{channels}, T(1)) {}
};

// Train mode normalizes by per-channel batch statistics (biased variance,
// eps 1e-5) and updates running stats with momentum 0.1 (unbiased variance,
// matching the usual deep-learning convention). Eval mode applies the
// stored running stats as a fixed affine map.
template <class T>
Tensor<T> batch_norm2d(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                       BatchNormState<T>& state, bool training, Tape<T>* tape,
                       T momentum = T(0.1), T eps = T(1e-5)) {
    detail::check(x.rank() == 4, "batch_norm2d: expected (N,C,H,W)");
    const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    detail::check(gamma.rank() == 1 && gamma.dim(0) == c && beta.rank() == 1 && beta.dim(0) == c,
                  "batch_norm2d: gamma/beta must be per-channel");
    detail::check(state.running_mean.dim(0) == c, "batch_norm2d: state channel mismatch");
    const std::size_t m = n * hw;
    if (training && m < 2)
        throw DataError("batch_norm2d: train mode needs at least 2 values per channel");

    Tensor<T> out = Tensor<T>::uninit(x.shape());
    Tensor<T> mean = Tensor<T>::uninit({c});
    Tensor<T> inv_std = Tensor<T>::uninit({c});
    const T* px = x.raw();
    T* po = out.raw();
    T* pmean = mean.raw();
    T* pinv = inv_std.raw();

    if (training) {
        T* rm = state.running_mean.raw();
        T* rv = state.running_var.raw();
        for (std::size_t ci = 0; ci < c; ++ci) {
            T sum = 0;
            for (std::size_t ni = 0; ni < n; ++ni) {
                const T* base = px + (ni * c + ci) * hw;
                for (std::size_t i = 0; i < hw; ++i) sum += base[i];
            }
            const T mu = sum / static_cast<T>(m);
            T var_acc = 0;
            for (std::size_t ni = 0; ni < n; ++ni) {
                const T* base = px + (ni * c + ci) * hw;
                for (std::size_t i = 0; i < hw; ++i) {
                    const T d = base[i] - mu;
                    var_acc += d * d;
                }
            }
            const T var_biased = var_acc / static_cast<T>(m);
            pmean[ci] = mu;
            pinv[ci] = T(1) / std::sqrt(var_biased + eps);
            rm[ci] = (T(1) - momentum) * rm[ci] + momentum * mu;
            rv[ci] = (T(1) - momentum) * rv[ci] + momentum * (var_acc / static_cast<T>(m - 1));
        }
    } else {
        const T* rm = state.running_mean.raw();
        const T* rv = state.running_var.raw();
        for (std::size_t ci = 0; ci < c; ++ci) {
            pmean[ci] = rm[ci];
            pinv[ci] = T(1) / std::sqrt(rv[ci] + eps);
        }
    }

    const T* pg = gamma.raw();
    const T* pbt = beta.raw();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            const T a = pg[ci] * pinv[ci];
            const T b = pbt[ci] - a * pmean[ci];
            const std::size_t base = (ni * c + ci) * hw;
            for (std::size_t i = 0; i < hw; ++i) po[base + i] = a * px[base + i] + b;
        }
    detail::debug_check_finite(out, "batch_norm2d");

    if (detail::wants_grad(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        tape->record([x, gamma, beta, out, mean, inv_std, training, n, c, hw]() mutable {
            auto g = out.grad();
            const T* px2 = x.raw();
            const T* pmu = mean.raw();
            const T* pis = inv_std.raw();
            const T* pgm = gamma.raw();
            const std::size_t m2 = n * hw;
            for (std::size_t ci = 0; ci < c; ++ci) {
                // per-channel reductions: sum g, sum g*xhat
                T gsum = 0, gxsum = 0;
                for (std::size_t ni = 0; ni < n; ++ni) {
                    const std::size_t base = (ni * c + ci) * hw;
                    for (std::size_t i = 0; i < hw; ++i) {
                        const T gv = g[base + i];
                        gsum += gv;
                        gxsum += gv * (px2[base + i] - pmu[ci]) * pis[ci];
                    }
                }
                if (gamma.requires_grad()) gamma.grad()[ci] += gxsum;
                if (beta.requires_grad()) beta.grad()[ci] += gsum;
                if (x.requires_grad()) {
                    auto gx = x.grad();
                    const T a = pgm[ci] * pis[ci];
                    if (training) {
                        const T inv_m = T(1) / static_cast<T>(m2);
                        for (std::size_t ni = 0; ni < n; ++ni) {
                            const std::size_t base = (ni * c + ci) * hw;
                            for (std::size_t i = 0; i < hw; ++i) {
                                const T xhat = (px2[base + i] - pmu[ci]) * pis[ci];
                                gx[base + i] +=
                                    a * (g[base + i] - gsum * inv_m - xhat * gxsum * inv_m);
                            }
                        }
                    } else {
                        for (std::size_t ni = 0; ni < n; ++ni) {
                            const std::size_t base = (ni * c + ci) * hw;
                            for (std::size_t i = 0; i < hw; ++i) gx[base + i] += a * g[base + i];
                        }
                    }
                }
            }
        });
    }
    return out;
}

// align_corners=false bilinear interpolation to (out_h, out_w).
template <class T>
Tensor<T> bilinear_upsample(Tensor<T> x, std::size_t out_h, std::size_t out_w,
                            Tape<T>* tape) {
    detail::check(x.rank() == 4, "bilinear_upsample: expected (N,C,H,W)");
    detail::check(out_h >= 1 && out_w >= 1, "bilinear_upsample: output dims must be positive");
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);

    struct Taps {
        std::size_t i0, i1;
        T w1;  // weight of i1; i0 gets (1 - w1)
    };
    auto make_taps = [](std::size_t in, std::size_t out) {
        std::vector<Taps> taps(out);
        const double scale = static_cast<double>(in) / static_cast<double>(out);
        for (std::size_t d = 0; d < out; ++d) {
            double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
            if (src < 0) src = 0;
            std::size_t i0 = std::min(static_cast<std::size_t>(src), in - 1);
            const std::size_t i1 = i0 + 1 < in ? i0 + 1 : i0;
            taps[d] = {i0, i1, static_cast<T>(src - static_cast<double>(i0))};
        }
        return taps;
    };
    auto ytaps = std::make_shared<std::vector<Taps>>(make_taps(h, out_h));
    auto xtaps = std::make_shared<std::vector<Taps>>(make_taps(w, out_w));

    Tensor<T> out = Tensor<T>::uninit({n, c, out_h, out_w});
    const T* px = x.raw();
    T* po = out.raw();
    for (std::size_t nc = 0; nc < n * c; ++nc) {
        const T* plane = px + nc * h * w;
        T* oplane = po + nc * out_h * out_w;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
            const Taps ty = (*ytaps)[oy];
            for (std::size_t ox = 0; ox < out_w; ++ox) {
                const Taps tx = (*xtaps)[ox];
                const T top = plane[ty.i0 * w + tx.i0] * (T(1) - tx.w1) +
                              plane[ty.i0 * w + tx.i1] * tx.w1;
                const T bot = plane[ty.i1 * w + tx.i0] * (T(1) - tx.w1) +
                              plane[ty.i1 * w + tx.i1] * tx.w1;
                oplane[oy * out_w + ox] = top * (T(1) - ty.w1) + bot * ty.w1;
            }
        }
    }
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out, ytaps, xtaps, n, c, h, w, out_h, out_w]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t nc = 0; nc < n * c; ++nc) {
                T* gplane = gx.data() + nc * h * w;
                const T* goplane = g.data() + nc * out_h * out_w;
                for (std::size_t oy = 0; oy < out_h; ++oy) {
                    const Taps ty = (*ytaps)[oy];
                    for (std::size_t ox = 0; ox < out_w; ++ox) {
                        const Taps tx = (*xtaps)[ox];
                        const T gv = goplane[oy * out_w + ox];
                        gplane[ty.i0 * w + tx.i0] += gv * (T(1) - ty.w1) * (T(1) - tx.w1);
                        gplane[ty.i0 * w + tx.i1] += gv * (T(1) - ty.w1) * tx.w1;
                        gplane[ty.i1 * w + tx.i0] += gv * ty.w1 * (T(1) - tx.w1);
                        gplane[ty.i1 * w + tx.i1] += gv * ty.w1 * tx.w1;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Regularization
// ---------------------------------------------------------------------------

// Inverted dropout: train mode zeroes with probability `rate` and scales
// survivors by 1/(1-rate); eval mode is the identity. Mask draws come from
// ctx.rng in sequential order.
template <class T>
Tensor<T> dropout(Tensor<T> x, double rate, Context<T>& ctx) {
    if (rate < 0 || rate >= 1) throw ContractError("dropout: rate must be in [0,1)");
    if (!ctx.training || rate == 0) return x;
    if (!ctx.rng) throw ContractError("dropout: training mode requires an rng");
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    auto mask = std::make_shared<std::vector<T>>(x.size());
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    const T* px = x.raw();
    T* po = out.raw();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const T m = ctx.rng->uniform() < rate ? T(0) : keep_scale;
        (*mask)[i] = m;
        po[i] = px[i] * m;
    }
    if (detail::wants_grad(ctx.tape, {&x})) {
        out.set_requires_grad(true);
        ctx.tape->record([x, out, mask]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
        });
    }
    return out;
}

// Layer normalization over the last dimension with learned scale/shift.
template <class T>
Tensor<T> layer_norm_lastdim(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                             Tape<T>* tape, T eps = T(1e-5)) {
    const std::size_t d = x.dim(x.rank() - 1);
    detail::check(gamma.rank() == 1 && gamma.dim(0) == d && beta.rank() == 1 && beta.dim(0) == d,
                  "layer_norm: gamma/beta must match last dim");
    const std::size_t rows = x.size() / d;
    Tensor<T> out = Tensor<T>::uninit(x.shape());
    Tensor<T> inv_std = Tensor<T>::uninit({rows});
    Tensor<T> mean = Tensor<T>::uninit({rows});
    const T* px = x.raw();
    const T* pg = gamma.raw();
    const T* pb = beta.raw();
    T* po = out.raw();
    T* pis = inv_std.raw();
    T* pmu = mean.raw();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = px + r * d;
        T sum = 0;
        for (std::size_t i = 0; i < d; ++i) sum += row[i];
        const T mu = sum / static_cast<T>(d);
        T var = 0;
        for (std::size_t i = 0; i < d; ++i) {
            const T dv = row[i] - mu;
            var += dv * dv;
        }
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + eps);
        pmu[r] = mu;
        pis[r] = is;
        T* orow = po + r * d;
        for (std::size_t i = 0; i < d; ++i) orow[i] = pg[i] * (row[i] - mu) * is + pb[i];
    }
    if (detail::wants_grad(tape, {&x, &gamma, &beta})) {
        out.set_requires_grad(true);
        tape->record([x, gamma, beta, out, mean, inv_std, rows, d]() mutable {
            auto g = out.grad();
            const T* px2 = x.raw();
            const T* pg2 = gamma.raw();
            const T* pmu2 = mean.raw();
            const T* pis2 = inv_std.raw();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* row = px2 + r * d;
                const T* grow = g.data() + r * d;
                const T is = pis2[r];
                const T mu = pmu2[r];
                T hsum = 0, hxsum = 0;
                for (std::size_t i = 0; i < d; ++i) {
                    const T xhat = (row[i] - mu) * is;
                    const T hv = grow[i] * pg2[i];
                    hsum += hv;
                    hxsum += hv * xhat;
                }
                if (x.requires_grad()) {
                    auto gx = x.grad();
                    T* gxrow = gx.data() + r * d;
                    const T inv_d = T(1) / static_cast<T>(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        const T xhat = (row[i] - mu) * is;
                        gxrow[i] +=
                            is * (grow[i] * pg2[i] - hsum * inv_d - xhat * hxsum * inv_d);
                    }
                }
                if (gamma.requires_grad()) {
                    auto gg = gamma.grad();
                    for (std::size_t i = 0; i < d; ++i)
                        gg[i] += grow[i] * (row[i] - mu) * is;
                }
                if (beta.requires_grad()) {
                    auto gb = beta.grad();
                    for (std::size_t i = 0; i < d; ++i) gb[i] += grow[i];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sum_all(Tensor<T> x, Tape<T>* tape) {
    Tensor<T> out(Shape{1});
    const T* px = x.raw();
    T acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += px[i];
    out.raw()[0] = acc;
    if (detail::wants_grad(tape, {&x})) {
        out.set_requires_grad(true);
        tape->record([x, out]() mutable {
            const T gv = out.grad()[0];
            auto gx = x.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gv;
        });
    }
    return out;
}

template <class T>
Tensor<T> mean_all(Tensor<T> x, Tape<T>* tape) {
    Tensor<T> s = sum_all(x, tape);
    return scale(s, T(1) / static_cast<T>(x.size()), tape);
}

// Mean of squared elementwise differences over all elements.
template <class T>
Tensor<T> mse_loss(Tensor<T> pred, Tensor<T> truth, Tape<T>* tape) {
    detail::check(pred.shape() == truth.shape(), "mse_loss: shape mismatch " +
                                                     shape_str(pred.shape()) + " vs " +
                                                     shape_str(truth.shape()));
    Tensor<T> out(Shape{1});
    const T* pp = pred.raw();
    const T* pt = truth.raw();
    T acc = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const T d = pp[i] - pt[i];
        acc += d * d;
    }
    out.raw()[0] = acc / static_cast<T>(pred.size());
    if (detail::wants_grad(tape, {&pred, &truth})) {
        out.set_requires_grad(true);
        tape->record([pred, truth, out]() mutable {
            const T gv = out.grad()[0];
            const T* pp2 = pred.raw();
            const T* pt2 = truth.raw();
            const T c = gv * T(2) / static_cast<T>(pred.size());
            if (pred.requires_grad()) {
                auto gp = pred.grad();
                for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += c * (pp2[i] - pt2[i]);
            }
            if (truth.requires_grad()) {
                auto gt = truth.grad();
                for (std::size_t i = 0; i < gt.size(); ++i) gt[i] -= c * (pp2[i] - pt2[i]);
            }
        });
    }
    return out;
}

}  // namespace emnet::ops
