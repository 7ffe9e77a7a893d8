// Validates the serial oracle itself: hand-computed cases small enough to
// check on paper, plus 64-bit central finite differences for every backward
// formula.  The optimized kernels are later tested against this oracle, so
// errors here would invalidate the whole chain.
#include <doctest.h>

#include <cmath>

#include "diracnet/errors.hpp"
#include "diracnet/reference.hpp"
#include "test_util.hpp"

using namespace diracnet;
using namespace diracnet::testutil;
namespace ref = diracnet::reference;

TEST_SUITE("reference") {

TEST_CASE("conv2d 1x1 kernel scales") {
    Tensor x({1, 1, 3, 3}, 1.0f);
    Tensor w({1, 1, 1, 1}, {2.0f});
    Tensor y = ref::conv2d_forward(x, w, nullptr, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 3, 3});
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == 2.0f);
}

TEST_CASE("conv2d 3x3 ones kernel, same padding, hand case") {
    // x = 1..9 in a 3x3 grid; all-ones kernel sums the 3x3 neighborhood.
    Tensor x({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    Tensor w({1, 1, 3, 3}, 1.0f);
    Tensor y = ref::conv2d_forward(x, w, nullptr, 1, 1);
    CHECK(y.at4(0, 0, 1, 1) == 45.0f);               // full grid
    CHECK(y.at4(0, 0, 0, 0) == 1 + 2 + 4 + 5);       // corner: 2x2 survives padding
    CHECK(y.at4(0, 0, 0, 1) == 1 + 2 + 3 + 4 + 5 + 6);
    CHECK(y.at4(0, 0, 2, 2) == 5 + 6 + 8 + 9);
}

TEST_CASE("conv2d bias and output shape formula") {
    Tensor x({1, 1, 4, 4}, 1.0f);
    Tensor w({1, 1, 3, 3}, 1.0f);
    Tensor b({1}, {0.5f});
    Tensor y = ref::conv2d_forward(x, w, &b, 1, 0);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y.at4(0, 0, 0, 0) == 9.5f);
    // stride 2: (4 - 3)/2 + 1 = 1
    Tensor y2 = ref::conv2d_forward(x, w, &b, 2, 0);
    REQUIRE(y2.shape() == Shape{1, 1, 1, 1});
    CHECK(y2[0] == 9.5f);
}

TEST_CASE("conv2d shape errors") {
    Tensor x({1, 2, 4, 4});
    Tensor w({1, 3, 3, 3});
    CHECK_THROWS_AS(ref::conv2d_forward(x, w, nullptr, 1, 1), ShapeError);
    Tensor w2({1, 2, 5, 5});
    CHECK_THROWS_AS(ref::conv2d_forward(x, w2, nullptr, 1, 0), ShapeError);
}

TEST_CASE("conv2d gradients match finite differences") {
    Rng rng(7);
    auto x = random_tensor<double>({2, 3, 5, 5}, rng);
    auto w = random_tensor<double>({4, 3, 3, 3}, rng);
    auto b = random_tensor<double>({4}, rng);
    auto proj = random_tensor<double>({2, 4, 5, 5}, rng);

    // scalar loss = <conv(x,w,b), proj>; grad_y = proj
    auto loss = [&]() {
        Tensor64 y = ref::conv2d_forward(x, w, &b, 1, 1);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * proj[i];
        return s;
    };
    Tensor64 gx = ref::conv2d_backward_input(proj, w, x.shape(), 1, 1);
    Tensor64 gw = ref::conv2d_backward_weight(proj, x, w.shape(), 1, 1);
    Tensor64 gb = ref::conv2d_backward_bias(proj);

    CHECK(max_rel_err(gx, numeric_grad(x, 1e-5, loss)) < 1e-6);
    CHECK(max_rel_err(gw, numeric_grad(w, 1e-5, loss)) < 1e-6);
    CHECK(max_rel_err(gb, numeric_grad(b, 1e-5, loss)) < 1e-6);
}

TEST_CASE("conv2d stride-2 gradients match finite differences") {
    Rng rng(11);
    auto x = random_tensor<double>({1, 2, 6, 6}, rng);
    auto w = random_tensor<double>({3, 2, 3, 3}, rng);
    Tensor64 y0 = ref::conv2d_forward(x, w, nullptr, 2, 1);
    auto proj = random_tensor<double>(y0.shape(), rng);
    auto loss = [&]() {
        Tensor64 y = ref::conv2d_forward(x, w, nullptr, 2, 1);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * proj[i];
        return s;
    };
    CHECK(max_rel_err(ref::conv2d_backward_input(proj, w, x.shape(), 2, 1),
                      numeric_grad(x, 1e-5, loss)) < 1e-6);
    CHECK(max_rel_err(ref::conv2d_backward_weight(proj, x, w.shape(), 2, 1),
                      numeric_grad(w, 1e-5, loss)) < 1e-6);
}

TEST_CASE("maxpool basics") {
    Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor y = ref::maxpool2_forward(x);
    REQUIRE(y.numel() == 1);
    CHECK(y[0] == 4.0f);

    Tensor c({2, 3, 4, 4}, 7.0f);
    Tensor yc = ref::maxpool2_forward(c);
    REQUIRE(yc.shape() == Shape{2, 3, 2, 2});
    for (std::size_t i = 0; i < yc.numel(); ++i) CHECK(yc[i] == 7.0f);

    Tensor odd({1, 1, 3, 4});
    CHECK_THROWS_AS(ref::maxpool2_forward(odd), ShapeError);
}

TEST_CASE("maxpool backward routes to first max") {
    Tensor x({1, 1, 2, 2}, {5, 5, 5, 5});
    Tensor gy({1, 1, 1, 1}, {1.0f});
    Tensor gx = ref::maxpool2_backward(x, gy);
    CHECK(gx[0] == 1.0f);  // row-major first element wins ties
    CHECK(gx[1] == 0.0f);
    CHECK(gx[2] == 0.0f);
    CHECK(gx[3] == 0.0f);
}

TEST_CASE("maxpool gradient matches finite differences") {
    Rng rng(3);
    // Distinct values so the max is differentiable at the sample point.
    Tensor64 x({1, 2, 4, 4});
    for (std::size_t i = 0; i < x.numel(); ++i) x[i] = double(i % 13) + 0.1 * double(i);
    auto proj = random_tensor<double>({1, 2, 2, 2}, rng);
    auto loss = [&]() {
        Tensor64 y = ref::maxpool2_forward(x);
        double s = 0;
        for (std::size_t i = 0; i < y.numel(); ++i) s += y[i] * proj[i];
        return s;
    };
    CHECK(max_rel_err(ref::maxpool2_backward(x, proj), numeric_grad(x, 1e-6, loss)) < 1e-6);
}

TEST_CASE("global avgpool arithmetic-mean hand case") {
    Tensor x({1, 1, 8, 8}, 1.0f);
    x.at4(0, 0, 3, 5) = 65.0f;
    Tensor y = ref::global_avgpool_forward(x);
    CHECK(y[0] == 2.0f);  // (63*1 + 65)/64
}

TEST_CASE("global avgpool backward spreads evenly") {
    Tensor gy({1, 2}, {64.0f, 128.0f});
    Tensor gx = ref::global_avgpool_backward(gy, 8, 8);
    CHECK(gx.at4(0, 0, 0, 0) == 1.0f);
    CHECK(gx.at4(0, 1, 7, 7) == 2.0f);
}

TEST_CASE("linear hand case and gradients") {
    Tensor x({1, 2}, {1.0f, 2.0f});
    Tensor w({2, 2}, {1.0f, 0.0f, 3.0f, 4.0f});
    Tensor b({2}, {10.0f, 20.0f});
    Tensor y = ref::linear_forward(x, w, &b);
    CHECK(y.at2(0, 0) == 11.0f);
    CHECK(y.at2(0, 1) == 31.0f);

    Rng rng(5);
    auto xd = random_tensor<double>({3, 4}, rng);
    auto wd = random_tensor<double>({5, 4}, rng);
    auto bd = random_tensor<double>({5}, rng);
    auto proj = random_tensor<double>({3, 5}, rng);
    auto loss = [&]() {
        Tensor64 yd = ref::linear_forward(xd, wd, &bd);
        double s = 0;
        for (std::size_t i = 0; i < yd.numel(); ++i) s += yd[i] * proj[i];
        return s;
    };
    CHECK(max_rel_err(ref::linear_backward_input(proj, wd), numeric_grad(xd, 1e-5, loss)) < 1e-6);
    CHECK(max_rel_err(ref::linear_backward_weight(proj, xd), numeric_grad(wd, 1e-5, loss)) < 1e-6);
    CHECK(max_rel_err(ref::linear_backward_bias(proj), numeric_grad(bd, 1e-5, loss)) < 1e-6);
}

TEST_CASE("relu basics") {
    Tensor x({3}, {-1.0f, 0.0f, 2.0f});
    Tensor y = ref::relu_forward(x);
    CHECK(y[0] == 0.0f);
    CHECK(y[1] == 0.0f);
    CHECK(y[2] == 2.0f);
    Tensor gy({3}, 1.0f);
    Tensor gx = ref::relu_backward(x, gy);
    CHECK(gx[0] == 0.0f);
    CHECK(gx[1] == 0.0f);  // derivative at 0 pinned to 0
    CHECK(gx[2] == 1.0f);
}

TEST_CASE("batchnorm train normalizes per channel") {
    Rng rng(9);
    auto x = random_tensor<float>({4, 3, 5, 5}, rng, 3.0);
    Tensor gamma({3}, 1.0f), beta({3}, 0.0f);
    auto r = ref::batchnorm_forward_train(x, gamma, beta, 1e-5f);
    // recompute output statistics per channel
    for (std::size_t c = 0; c < 3; ++c) {
        double sum = 0, ssq = 0;
        std::size_t m = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t h = 0; h < 5; ++h)
                for (std::size_t w = 0; w < 5; ++w) {
                    double v = r.y.at4(n, c, h, w);
                    sum += v;
                    ssq += v * v;
                    ++m;
                }
        double mean = sum / double(m);
        double var = ssq / double(m) - mean * mean;
        CHECK(std::abs(mean) < 1e-4);
        CHECK(std::abs(var - 1.0) < 1e-3);
    }
}

TEST_CASE("batchnorm eval with trivial stats is identity") {
    Rng rng(13);
    auto x = random_tensor<float>({2, 2, 3, 3}, rng);
    Tensor gamma({2}, 1.0f), beta({2}, 0.0f), mean({2}, 0.0f), var({2}, 1.0f);
    Tensor y = ref::batchnorm_forward_eval(x, gamma, beta, mean, var, 0.0f);
    CHECK(max_abs_diff(x, y) == 0.0);
}

TEST_CASE("batchnorm backward matches finite differences") {
    Rng rng(17);
    auto x = random_tensor<double>({3, 2, 4, 4}, rng, 2.0);
    auto gamma = random_tensor<double>({2}, rng);
    auto beta = random_tensor<double>({2}, rng);
    auto proj = random_tensor<double>({3, 2, 4, 4}, rng);
    const double eps = 1e-5;

    auto loss = [&]() {
        auto r = ref::batchnorm_forward_train(x, gamma, beta, eps);
        double s = 0;
        for (std::size_t i = 0; i < r.y.numel(); ++i) s += r.y[i] * proj[i];
        return s;
    };
    auto fwd = ref::batchnorm_forward_train(x, gamma, beta, eps);
    auto g = ref::batchnorm_backward(x, gamma, fwd.mean, fwd.var, eps, proj);

    CHECK(max_rel_err(g.grad_x, numeric_grad(x, 1e-5, loss)) < 1e-5);
    CHECK(max_rel_err(g.grad_gamma, numeric_grad(gamma, 1e-5, loss)) < 1e-6);
    CHECK(max_rel_err(g.grad_beta, numeric_grad(beta, 1e-5, loss)) < 1e-6);
}

TEST_CASE("softmax cross entropy: uniform logits give ln C") {
    Tensor logits({4, 7}, 0.3f);
    auto r = ref::softmax_cross_entropy(logits, {0, 1, 2, 6});
    CHECK(r.loss == doctest::Approx(std::log(7.0)).epsilon(1e-6));
    for (std::size_t n = 0; n < 4; ++n) {
        double sum = 0;
        for (std::size_t c = 0; c < 7; ++c) sum += r.probs.at2(n, c);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("softmax cross entropy: logit-shift invariance") {
    // Double input so the check measures the max-shift algorithm, not the
    // rounding of (logit + constant) in the input itself.
    Rng rng(19);
    auto logits = random_tensor<double>({5, 10}, rng, 4.0);
    auto labels = random_labels(5, 10, rng);
    auto r1 = ref::softmax_cross_entropy(logits, labels);
    Tensor64 shifted = logits;
    for (std::size_t i = 0; i < shifted.numel(); ++i) shifted[i] += 123.0;
    auto r2 = ref::softmax_cross_entropy(shifted, labels);
    CHECK(std::abs(r1.loss - r2.loss) < 1e-6);
}

TEST_CASE("softmax label validation") {
    Tensor logits({2, 3});
    CHECK_THROWS_AS(ref::softmax_cross_entropy(logits, {0, 3}), ConfigError);
    CHECK_THROWS_AS(ref::softmax_cross_entropy(logits, {0}), ShapeError);
}

TEST_CASE("softmax gradient matches finite differences") {
    Rng rng(23);
    auto logits = random_tensor<double>({4, 6}, rng, 2.0);
    auto labels = random_labels(4, 6, rng);
    auto loss = [&]() { return ref::softmax_cross_entropy(logits, labels).loss; };
    auto probs = ref::softmax_cross_entropy(logits, labels).probs;
    auto g = ref::softmax_cross_entropy_backward(probs, labels);
    // 1e-4: central differences on near-zero probabilities sit close to the
    // double roundoff floor.
    CHECK(max_rel_err(g, numeric_grad(logits, 1e-5, loss)) < 1e-4);
}

TEST_CASE("gemm transposes agree with explicit transposition") {
    Rng rng(29);
    const std::size_t M = 4, N = 5, K = 3;
    auto a = random_tensor<double>({M, K}, rng);
    auto b = random_tensor<double>({K, N}, rng);
    Tensor64 at({K, M}), bt({N, K});
    for (std::size_t i = 0; i < M; ++i)
        for (std::size_t p = 0; p < K; ++p) at.at2(p, i) = a.at2(i, p);
    for (std::size_t p = 0; p < K; ++p)
        for (std::size_t j = 0; j < N; ++j) bt.at2(j, p) = b.at2(p, j);

    Tensor64 c0({M, N}), c1({M, N}), c2({M, N}), c3({M, N});
    ref::gemm(false, false, M, N, K, 1.0, a.data(), K, b.data(), N, 0.0, c0.data(), N);
    ref::gemm(true, false, M, N, K, 1.0, at.data(), M, b.data(), N, 0.0, c1.data(), N);
    ref::gemm(false, true, M, N, K, 1.0, a.data(), K, bt.data(), K, 0.0, c2.data(), N);
    ref::gemm(true, true, M, N, K, 1.0, at.data(), M, bt.data(), K, 0.0, c3.data(), N);
    CHECK(max_abs_diff(c0, c1) < 1e-12);
    CHECK(max_abs_diff(c0, c2) < 1e-12);
    CHECK(max_abs_diff(c0, c3) < 1e-12);

    // alpha/beta contract
    Tensor64 c4 = c0;
    ref::gemm(false, false, M, N, K, 2.0, a.data(), K, b.data(), N, 1.0, c4.data(), N);
    for (std::size_t i = 0; i < c4.numel(); ++i) CHECK(c4[i] == doctest::Approx(3.0 * c0[i]));
}

TEST_CASE("filter_norms and channel ops") {
    Tensor w({1, 1, 1, 2}, {3.0f, 4.0f});
    Tensor n = ref::filter_norms(w);
    CHECK(n[0] == 5.0f);

    Tensor unit = ref::div_channels(w, n);
    CHECK(unit[0] == doctest::Approx(0.6f));
    CHECK(unit[1] == doctest::Approx(0.8f));

    Tensor back = ref::scale_channels(unit, n);
    CHECK(max_abs_diff(back, w) < 1e-6);
}

}  // TEST_SUITE
