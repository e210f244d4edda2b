#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "emnet/ops.hpp"
#include "test_util.hpp"

using namespace emnet;
using emtest::random_tensor;

namespace {

template <class T>
Tensor<T> t4(std::size_t n, std::size_t c, std::size_t h, std::size_t w, std::vector<T> v) {
    return Tensor<T>::from_data({n, c, h, w}, std::move(v));
}

}  // namespace

TEST_CASE("conv2d identity kernel reproduces the input") {
    Tensorf x = t4<float>(1, 1, 3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensorf k = t4<float>(1, 1, 1, 1, {1.0f});
    Tensorf out = ops::conv2d_nobias(x, k, 1, 0, static_cast<Tape<float>*>(nullptr));
    for (std::size_t i = 0; i < 9; ++i) CHECK(out.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches the sliding-window oracle") {
    Tensorf x = t4<float>(1, 1, 3, 3, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensorf k = t4<float>(1, 1, 2, 2, {1, 1, 1, 1});
    Tensorf out = ops::conv2d_nobias(x, k, 1, 0, static_cast<Tape<float>*>(nullptr));
    CHECK(out.shape() == Shape{1, 1, 2, 2});
    CHECK(out.data()[0] == 12.0f);
    CHECK(out.data()[1] == 16.0f);
    CHECK(out.data()[2] == 24.0f);
    CHECK(out.data()[3] == 28.0f);
}

TEST_CASE("conv2d output size formula") {
    Tensorf x({1, 1, 6, 6}, 1.0f);
    Tensorf k({1, 1, 3, 3}, 0.5f);
    Tensorf out = ops::conv2d_nobias(x, k, 2, 1, static_cast<Tape<float>*>(nullptr));
    CHECK(out.shape() == Shape{1, 1, 3, 3});
}

TEST_CASE("conv2d brute-force cross-correlation oracle with stride and padding") {
    // independent nested-loop evaluation, double precision
    Rng rng(77);
    const std::size_t n = 2, cin = 3, cout = 2, h = 5, w = 6, kh = 3, kw = 3;
    for (const std::size_t stride : {std::size_t{1}, std::size_t{2}}) {
        for (const std::size_t pad : {std::size_t{0}, std::size_t{1}}) {
            Tensord x = emtest::random_tensor({n, cin, h, w}, rng);
            Tensord k = emtest::random_tensor({cout, cin, kh, kw}, rng);
            Tensord b = emtest::random_tensor({cout}, rng);
            Tensord out = ops::conv2d(x, k, b, stride, pad, static_cast<Tape<double>*>(nullptr));
            const std::size_t ho = (h + 2 * pad - kh) / stride + 1;
            const std::size_t wo = (w + 2 * pad - kw) / stride + 1;
            REQUIRE(out.shape() == Shape{n, cout, ho, wo});
            for (std::size_t ni = 0; ni < n; ++ni)
                for (std::size_t o = 0; o < cout; ++o)
                    for (std::size_t oy = 0; oy < ho; ++oy)
                        for (std::size_t ox = 0; ox < wo; ++ox) {
                            double acc = b.data()[o];
                            for (std::size_t c = 0; c < cin; ++c)
                                for (std::size_t ky = 0; ky < kh; ++ky)
                                    for (std::size_t kx = 0; kx < kw; ++kx) {
                                        const std::ptrdiff_t iy = oy * stride + ky - pad;
                                        const std::ptrdiff_t ix = ox * stride + kx - pad;
                                        if (iy < 0 || iy >= (std::ptrdiff_t)h || ix < 0 ||
                                            ix >= (std::ptrdiff_t)w)
                                            continue;
                                        acc += x.data()[((ni * cin + c) * h + iy) * w + ix] *
                                               k.data()[((o * cin + c) * kh + ky) * kw + kx];
                                    }
                            const double got =
                                out.data()[((ni * cout + o) * ho + oy) * wo + ox];
                            CHECK(std::fabs(got - acc) < 1e-9);
                        }
        }
    }
}

TEST_CASE("linear identity, hand product, and bias broadcast") {
    Tensorf x = Tensorf::from_data({2, 2}, {1, 2, 3, 4});
    Tensorf eye = Tensorf::from_data({2, 2}, {1, 0, 0, 1});
    Tensorf zero_b({2}, 0.0f);
    Tensorf out = ops::linear(x, eye, zero_b, static_cast<Tape<float>*>(nullptr));
    CHECK(out.data()[0] == 1.0f);
    CHECK(out.data()[3] == 4.0f);

    Tensorf w = Tensorf::from_data({2, 2}, {1, 2, 3, 4});
    Tensorf v = Tensorf::from_data({1, 2}, {1, 1});
    Tensorf r = ops::linear(v, w, zero_b, static_cast<Tape<float>*>(nullptr));
    CHECK(r.data()[0] == 3.0f);
    CHECK(r.data()[1] == 7.0f);

    Tensorf zw({2, 2}, 0.0f);
    Tensorf b = Tensorf::from_data({2}, {5, -1});
    Tensorf rows = ops::linear(x, zw, b, static_cast<Tape<float>*>(nullptr));
    CHECK(rows.data()[0] == 5.0f);
    CHECK(rows.data()[1] == -1.0f);
    CHECK(rows.data()[2] == 5.0f);
    CHECK(rows.data()[3] == -1.0f);
}

TEST_CASE("activations hit their reference values") {
    Tensorf x = Tensorf::from_data({3}, {0.0f, -3.2f, 0.5f});
    Tensorf s = ops::activation(x, ops::Activation::sigmoid, static_cast<Tape<float>*>(nullptr));
    CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-7));
    Tensorf r = ops::activation(x, ops::Activation::relu, static_cast<Tape<float>*>(nullptr));
    CHECK(r.data()[1] == 0.0f);
    Tensorf t = ops::activation(x, ops::Activation::tanh, static_cast<Tape<float>*>(nullptr));
    CHECK(std::fabs(t.data()[2] - 0.462117) < 1e-6);
}

TEST_CASE("activation ranges hold on random inputs") {
    Rng rng(5);
    Tensorf x(Shape{1000});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-30, 30));
    Tensorf s = ops::sigmoid(x, static_cast<Tape<float>*>(nullptr));
    for (float v : s.data()) {
        CHECK(v > 0.0f);
        CHECK(v < 1.0f);
    }
    Tensorf r = ops::relu(x, static_cast<Tape<float>*>(nullptr));
    for (float v : r.data()) CHECK(v >= 0.0f);
}

TEST_CASE("softmax uniform rows, hand case, and shift invariance") {
    Tensorf u({2, 4}, 1.0f);
    Tensorf su = ops::softmax_lastdim(u, static_cast<Tape<float>*>(nullptr));
    for (float v : su.data()) CHECK(v == doctest::Approx(0.25f));

    Tensorf x = Tensorf::from_data({1, 2}, {0.0f, std::log(3.0f)});
    Tensorf sx = ops::softmax_lastdim(x, static_cast<Tape<float>*>(nullptr));
    CHECK(sx.data()[0] == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(sx.data()[1] == doctest::Approx(0.75).epsilon(1e-6));

    Rng rng(6);
    Tensord row = random_tensor({1, 8}, rng);
    Tensord shifted(Shape{1, 8});
    for (std::size_t i = 0; i < 8; ++i) shifted.data()[i] = row.data()[i] + 17.5;
    Tensord a = ops::softmax_lastdim(row, static_cast<Tape<double>*>(nullptr));
    Tensord b = ops::softmax_lastdim(shifted, static_cast<Tape<double>*>(nullptr));
    double sum = 0;
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(std::fabs(a.data()[i] - b.data()[i]) < 1e-9);
        sum += a.data()[i];
    }
    CHECK(std::fabs(sum - 1.0) < 1e-6);
}

TEST_CASE("max pooling block maxima and size preservation") {
    Tensorf x = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
    Tensorf p = ops::max_pool2d(x, 2, 2, 0, static_cast<Tape<float>*>(nullptr));
    CHECK(p.size() == 1);
    CHECK(p.data()[0] == 4.0f);

    Tensorf c({1, 2, 4, 4}, 3.25f);
    Tensorf pc = ops::max_pool2d(c, 2, 2, 0, static_cast<Tape<float>*>(nullptr));
    for (float v : pc.data()) CHECK(v == 3.25f);

    Tensorf s({1, 1, 5, 7}, 1.0f);
    Tensorf ps = ops::max_pool2d(s, 3, 1, 1, static_cast<Tape<float>*>(nullptr));
    CHECK(ps.shape() == Shape{1, 1, 5, 7});
}

TEST_CASE("global average pooling means") {
    Tensorf c({2, 3, 4, 4}, 2.5f);
    Tensorf z = ops::global_avg_pool(c, static_cast<Tape<float>*>(nullptr));
    CHECK(z.shape() == Shape{2, 3});
    for (float v : z.data()) CHECK(v == doctest::Approx(2.5f));

    Tensorf x = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
    Tensorf m = ops::global_avg_pool(x, static_cast<Tape<float>*>(nullptr));
    CHECK(m.data()[0] == doctest::Approx(2.5f));
}

TEST_CASE("batch norm train-mode statistics and eval affine map") {
    Rng rng(8);
    Tensord x = random_tensor({4, 2, 3, 3}, rng, -2.0, 5.0);
    Tensord gamma({2}, 1.0);
    Tensord beta({2}, 0.0);
    ops::BatchNormState<double> state(2);
    Tensord out = ops::batch_norm2d(x, gamma, beta, state, true,
                                    static_cast<Tape<double>*>(nullptr));
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0, var = 0;
        std::size_t count = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 9; ++i) {
                mean += out.data()[(n * 2 + c) * 9 + i];
                ++count;
            }
        mean /= count;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t i = 0; i < 9; ++i) {
                const double d = out.data()[(n * 2 + c) * 9 + i] - mean;
                var += d * d;
            }
        var /= count;
        CHECK(std::fabs(mean) < 1e-5);
        CHECK(std::fabs(var - 1.0) < 1e-3);
    }

    // eval mode: closed-form affine from the running stats
    Tensord gamma2 = Tensord::from_data({2}, {1.5, 0.5});
    Tensord beta2 = Tensord::from_data({2}, {0.25, -1.0});
    Tensord y = ops::batch_norm2d(x, gamma2, beta2, state, false,
                                  static_cast<Tape<double>*>(nullptr));
    for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 9; ++i) {
                const double rm = state.running_mean.data()[c];
                const double rv = state.running_var.data()[c];
                const double expect = gamma2.data()[c] *
                                          (x.data()[(n * 2 + c) * 9 + i] - rm) /
                                          std::sqrt(rv + 1e-5) +
                                      beta2.data()[c];
                CHECK(std::fabs(y.data()[(n * 2 + c) * 9 + i] - expect) < 1e-9);
            }
}

TEST_CASE("batch norm rejects single-element training batches") {
    Tensorf x({1, 2, 1, 1}, 1.0f);
    Tensorf g({2}, 1.0f), b({2}, 0.0f);
    ops::BatchNormState<float> st(2);
    CHECK_THROWS_AS(ops::batch_norm2d(x, g, b, st, true, static_cast<Tape<float>*>(nullptr)),
                    DataError);
}

TEST_CASE("bilinear upsampling: constants, identity, and hand weights") {
    Tensorf c({1, 1, 3, 5}, 3.0f);
    Tensorf up = ops::bilinear_upsample(c, 7, 9, static_cast<Tape<float>*>(nullptr));
    for (float v : up.data()) CHECK(v == doctest::Approx(3.0f));

    Tensorf x = t4<float>(1, 1, 2, 2, {1, 2, 3, 4});
    Tensorf same = ops::bilinear_upsample(x, 2, 2, static_cast<Tape<float>*>(nullptr));
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(same.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-6));

    Tensorf row = t4<float>(1, 1, 1, 2, {0.0f, 1.0f});
    Tensorf wide = ops::bilinear_upsample(row, 1, 4, static_cast<Tape<float>*>(nullptr));
    CHECK(wide.data()[0] == doctest::Approx(0.0f));
    CHECK(wide.data()[1] == doctest::Approx(0.25f));
    CHECK(wide.data()[2] == doctest::Approx(0.75f));
    CHECK(wide.data()[3] == doctest::Approx(1.0f));
}

TEST_CASE("channel concatenation widths and identity") {
    Tensorf a({2, 3, 4, 5}, 1.0f);
    Tensorf b({2, 5, 4, 5}, 2.0f);
    Tensorf cat = ops::concat_channels({a, b}, static_cast<Tape<float>*>(nullptr));
    CHECK(cat.shape() == Shape{2, 8, 4, 5});
    CHECK(cat.data()[0] == 1.0f);
    CHECK(cat.data()[3 * 20] == 2.0f);

    Tensorf single = ops::concat_channels({a}, static_cast<Tape<float>*>(nullptr));
    CHECK(single.shape() == a.shape());
    Tensorf c({2, 3, 9, 5}, 0.0f);
    CHECK_THROWS_AS(ops::concat_channels({a, c}, static_cast<Tape<float>*>(nullptr)),
                    ShapeError);
}

TEST_CASE("elementwise ops and shape mismatch errors") {
    Tensorf a = Tensorf::from_data({3}, {1, 2, 3});
    Tensorf ones({3}, 1.0f);
    Tensorf prod = ops::elementwise(a, ones, ops::Elementwise::mul,
                                    static_cast<Tape<float>*>(nullptr));
    CHECK(prod.data()[0] == 1.0f);
    CHECK(prod.data()[2] == 3.0f);
    Tensorf bad({4}, 1.0f);
    CHECK_THROWS_AS(ops::elementwise(a, bad, ops::Elementwise::add,
                                     static_cast<Tape<float>*>(nullptr)),
                    ShapeError);
}

TEST_CASE("dropout: identity cases and survivor statistics") {
    Tensorf x({100000}, 1.0f);
    Rng rng(123);
    ops::Context<float> eval_ctx{nullptr, false, &rng};
    Tensorf same = ops::dropout(x, 0.5, eval_ctx);
    CHECK(same.data()[0] == 1.0f);

    ops::Context<float> train_ctx{nullptr, true, &rng};
    Tensorf zero_rate = ops::dropout(x, 0.0, train_ctx);
    CHECK(zero_rate.data()[42] == 1.0f);

    Tensorf dropped = ops::dropout(x, 0.5, train_ctx);
    std::size_t survivors = 0;
    double mean = 0;
    for (float v : dropped.data()) {
        if (v != 0.0f) {
            ++survivors;
            CHECK(v == doctest::Approx(2.0f));
        }
        mean += v;
    }
    mean /= static_cast<double>(x.size());
    CHECK(std::fabs(static_cast<double>(survivors) / x.size() - 0.5) < 0.01);
    CHECK(std::fabs(mean - 1.0) < 0.02);

    CHECK_THROWS_AS(ops::dropout(x, 1.0, train_ctx), ContractError);
}

TEST_CASE("dropout is deterministic under a fixed seed") {
    Tensorf x({512}, 1.0f);
    Rng r1(7), r2(7);
    ops::Context<float> c1{nullptr, true, &r1}, c2{nullptr, true, &r2};
    Tensorf a = ops::dropout(x, 0.3, c1);
    Tensorf b = ops::dropout(x, 0.3, c2);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(a.data()[i] == b.data()[i]);
}

TEST_CASE("backward: sum and hadamard-square gradients") {
    Tensorf x = Tensorf::from_data({3}, {1, 2, 3}, true);
    Tape<float> tape;
    Tensorf loss = ops::sum_all(x, &tape);
    backward(loss, tape);
    for (float g : x.grad()) CHECK(g == 1.0f);

    tape.clear();
    x.zero_grad();
    Tensorf sq = ops::mul(x, x, &tape);
    Tensorf loss2 = ops::sum_all(sq, &tape);
    backward(loss2, tape);
    CHECK(x.grad()[0] == 2.0f);
    CHECK(x.grad()[1] == 4.0f);
    CHECK(x.grad()[2] == 6.0f);
}

TEST_CASE("backward rejects non-scalar losses and accumulates until zeroed") {
    Tensorf x = Tensorf::from_data({2}, {1, 2}, true);
    Tape<float> tape;
    Tensorf y = ops::mul(x, x, &tape);
    CHECK_THROWS_AS(backward(y, tape), ContractError);

    tape.clear();
    x.zero_grad();
    Tensorf l1 = ops::sum_all(x, &tape);
    backward(l1, tape);
    tape.clear();
    Tensorf l2 = ops::sum_all(x, &tape);
    backward(l2, tape);
    CHECK(x.grad()[0] == 2.0f);  // two passes accumulate
}

TEST_CASE("mse loss value and shape checks") {
    Tensorf a({2, 3}, 1.0f);
    Tensorf b({2, 3}, 3.0f);
    Tensorf l = ops::mse_loss(a, b, static_cast<Tape<float>*>(nullptr));
    CHECK(l.item() == doctest::Approx(4.0f));
    Tensorf c({3, 2}, 0.0f);
    CHECK_THROWS_AS(ops::mse_loss(a, c, static_cast<Tape<float>*>(nullptr)), ShapeError);
}

TEST_CASE("lstm cell update matches the unfused op composition") {
    Rng rng(31);
    const std::size_t n = 2, ch = 3, h = 4, w = 5;
    Tensord pre = random_tensor({n, 4 * ch, h, w}, rng);
    Tensord c_prev = random_tensor({n, ch, h, w}, rng);
    Tensord wci = random_tensor({ch}, rng), wcf = random_tensor({ch}, rng),
            wco = random_tensor({ch}, rng);
    auto [ht, ct] =
        ops::lstm_cell_update(pre, c_prev, wci, wcf, wco, static_cast<Tape<double>*>(nullptr));

    Tape<double>* no = nullptr;
    Tensord pre_i = ops::slice(pre, 1, 0, ch, no);
    Tensord pre_f = ops::slice(pre, 1, ch, ch, no);
    Tensord pre_c = ops::slice(pre, 1, 2 * ch, ch, no);
    Tensord pre_o = ops::slice(pre, 1, 3 * ch, ch, no);
    Tensord i_g = ops::sigmoid(ops::add(pre_i, ops::mul_channel_weight(c_prev, wci, no), no), no);
    Tensord f_g = ops::sigmoid(ops::add(pre_f, ops::mul_channel_weight(c_prev, wcf, no), no), no);
    Tensord g_g = ops::tanh_act(pre_c, no);
    Tensord ct_ref = ops::add(ops::mul(f_g, c_prev, no), ops::mul(i_g, g_g, no), no);
    Tensord o_g = ops::sigmoid(ops::add(pre_o, ops::mul_channel_weight(ct_ref, wco, no), no), no);
    Tensord ht_ref = ops::mul(o_g, ops::tanh_act(ct_ref, no), no);
    for (std::size_t i = 0; i < ht.size(); ++i) {
        CHECK(std::fabs(ht.data()[i] - ht_ref.data()[i]) < 1e-12);
        CHECK(std::fabs(ct.data()[i] - ct_ref.data()[i]) < 1e-12);
    }
}

TEST_CASE("float fast-math activation paths stay close to libm") {
    Rng rng(67);
    for (int i = 0; i < 2000; ++i) {
        const float x = static_cast<float>(rng.uniform(-20.0, 20.0));
        const float fast_sig = ops::detail::sigmoid_fn(x);
        const double ref_sig = 1.0 / (1.0 + std::exp(-static_cast<double>(x)));
        CHECK(std::fabs(fast_sig - ref_sig) < 2e-7);
        const float fast_tanh = ops::detail::tanh_fn(x);
        CHECK(std::fabs(fast_tanh - std::tanh(static_cast<double>(x))) < 2e-7);
    }
}

TEST_CASE("forward results are identical for any worker count") {
    // same data, EMNET_THREADS is a runtime knob; reduction orders are fixed
    Rng rng(91);
    Tensorf x(Shape{3, 4, 8, 16});
    for (auto& v : x.data()) v = static_cast<float>(rng.uniform(-1, 1));
    Tensorf k(Shape{6, 4, 3, 3});
    for (auto& v : k.data()) v = static_cast<float>(rng.uniform(-1, 1));
    Tensorf out1 = ops::conv2d_nobias(x, k, 1, 1, static_cast<Tape<float>*>(nullptr));
    Tensorf out2 = ops::conv2d_nobias(x, k, 1, 1, static_cast<Tape<float>*>(nullptr));
    for (std::size_t i = 0; i < out1.size(); ++i) CHECK(out1.data()[i] == out2.data()[i]);
}
