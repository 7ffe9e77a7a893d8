#include <doctest.h>

#include <vector>

#include "diracnet/autograd.hpp"
#include "diracnet/errors.hpp"
#include "diracnet/rng.hpp"
#include "test_util.hpp"

using namespace diracnet;
using namespace diracnet::autograd;
using testutil::random_tensor;

namespace {

template <typename T>
VarT<T> make_leaf(TensorT<T> t, bool requires_grad = true) {
    return VarT<T>::leaf(std::move(t), requires_grad);
}

}  // namespace

TEST_SUITE("autograd") {

    TEST_CASE("sum of a scaled tensor backpropagates the constant") {
        Tape tape;
        Rng rng(1);
        auto x = make_leaf(random_tensor<float>({3, 4}, rng));
        auto loss = ops::sum(ops::scale(x, 2.0f));
        tape.backward(loss);
        for (std::size_t i = 0; i < x.grad().numel(); ++i) CHECK(x.grad()[i] == 2.0f);
    }

    TEST_CASE("relu masks the gradient") {
        Tape tape;
        TensorT<float> t({2});
        t[0] = -1.0f;
        t[1] = 3.0f;
        auto x = make_leaf(std::move(t));
        tape.backward(ops::sum(ops::relu(x)));
        CHECK(x.grad()[0] == 0.0f);
        CHECK(x.grad()[1] == 1.0f);
    }

    TEST_CASE("gradients accumulate until zeroed") {
        Tape tape;
        Rng rng(2);
        auto x = make_leaf(random_tensor<float>({5}, rng));
        auto loss = ops::sum(ops::scale(x, 3.0f));
        tape.backward(loss);
        TensorT<float> once = x.grad();
        tape.backward(loss);
        for (std::size_t i = 0; i < once.numel(); ++i) CHECK(x.grad()[i] == 2.0f * once[i]);

        // After zeroing, one more pass reproduces the single-pass gradient.
        zero_grads<float>({x});
        tape.backward(loss);
        CHECK(max_abs_diff(x.grad(), once) == 0.0);
    }

    TEST_CASE("backward rejects non-scalar losses, missing tapes, foreign tapes") {
        Rng rng(3);
        auto x = make_leaf(random_tensor<float>({4}, rng));
        CHECK_THROWS_AS(backward(x), ConfigError);  // no tape live

        Tape outer;
        auto y = ops::scale(x, 2.0f);
        CHECK_THROWS_AS(outer.backward(y), ShapeError);  // not scalar

        auto loss = ops::sum(y);
        {
            Tape inner;
            CHECK_THROWS_AS(inner.backward(loss), ConfigError);  // recorded on outer
        }
        outer.backward(loss);  // still fine on its own tape
        CHECK(x.grad()[0] == 2.0f);
    }

    TEST_CASE("constant inputs are pruned from the backward sweep") {
        Tape tape;
        Rng rng(4);
        auto x = make_leaf(random_tensor<float>({2, 3, 6, 6}, rng), /*requires_grad=*/false);
        auto w = make_leaf(random_tensor<float>({4, 3, 3, 3}, rng));
        auto loss = ops::sum(ops::conv2d<float>(x, w, nullptr, 1, 1));
        tape.backward(loss);
        CHECK(!x.has_grad());
        CHECK(w.has_grad());
    }

    TEST_CASE("NoGradGuard suppresses recording") {
        Tape tape;
        Rng rng(5);
        auto x = make_leaf(random_tensor<float>({4}, rng));
        {
            NoGradGuard guard;
            auto y = ops::relu(x);
            CHECK(!y.requires_grad());
        }
        CHECK(tape.size() == 0);
        auto y = ops::relu(x);
        CHECK(y.requires_grad());
        CHECK(tape.size() == 1);
    }

    TEST_CASE("finite_diff_check validates x squared") {
        TensorT<double> t({1});
        t[0] = 3.0;
        auto x = make_leaf(std::move(t));
        // scale_channels(x, x) with a single one-element filter is x*x.
        auto f = [x]() { return ops::sum(ops::scale_channels(x, x)); };
        auto report = finite_diff_check<double>(f, {{"x", x}}, 1e-5, 1e-4);
        REQUIRE(report.entries.size() == 1);
        CHECK(report.passed());
        CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-10));
    }

    TEST_CASE("finite_diff_check flags a non-deterministic function") {
        int calls = 0;
        auto f = [&calls]() {
            TensorT<double> t({1});
            t[0] = double(++calls);
            return make_leaf(std::move(t), false);
        };
        CHECK_THROWS_AS((void)finite_diff_check<double>(f, {}, 1e-5, 1e-4), NumericError);
    }

    TEST_CASE("conv2d gradients match finite differences") {
        Rng rng(derive_seed(7, 1, 0));
        auto x = make_leaf(random_tensor<double>({2, 2, 5, 5}, rng));
        auto w = make_leaf(random_tensor<double>({3, 2, 3, 3}, rng));
        auto b = make_leaf(random_tensor<double>({3}, rng));
        auto f = [&]() { return ops::sum(ops::relu(ops::conv2d(x, w, &b, 1, 1))); };
        auto report =
            finite_diff_check<double>(f, {{"x", x}, {"w", w}, {"b", b}}, 1e-5, 1e-4);
        CHECK(report.passed());
    }

    TEST_CASE("linear and softmax gradients match finite differences") {
        Rng rng(derive_seed(7, 2, 0));
        auto x = make_leaf(random_tensor<double>({4, 6}, rng));
        auto w = make_leaf(random_tensor<double>({3, 6}, rng));
        auto b = make_leaf(random_tensor<double>({3}, rng));
        std::vector<std::int32_t> labels = {0, 2, 1, 2};
        auto f = [&]() {
            return ops::softmax_cross_entropy(ops::linear(x, w, &b), labels).loss;
        };
        auto report =
            finite_diff_check<double>(f, {{"x", x}, {"w", w}, {"b", b}}, 1e-5, 1e-4);
        CHECK(report.passed());
    }

    TEST_CASE("batchnorm gradients match finite differences, fused and not") {
        Rng rng(derive_seed(7, 3, 0));
        auto x = make_leaf(random_tensor<double>({3, 2, 4, 4}, rng));
        auto gamma = make_leaf(random_tensor<double>({2}, rng, 0.5));
        auto beta = make_leaf(random_tensor<double>({2}, rng, 0.5));
        TensorT<double> rm({2}), rv({2});
        rv.fill(1.0);

        // momentum 0: the many finite-difference evaluations must not drift
        // the running stats (output is unaffected either way in train mode).
        auto plain = [&]() {
            return ops::sum(
                ops::relu(ops::batchnorm_train(x, gamma, beta, 1e-5, 0.0, rm, rv, false)));
        };
        auto report = finite_diff_check<double>(
            plain, {{"x", x}, {"gamma", gamma}, {"beta", beta}}, 1e-5, 1e-4);
        CHECK(report.passed());

        auto fused = [&]() {
            return ops::sum(ops::batchnorm_train(x, gamma, beta, 1e-5, 0.0, rm, rv, true));
        };
        auto report_fused = finite_diff_check<double>(
            fused, {{"x", x}, {"gamma", gamma}, {"beta", beta}}, 1e-5, 1e-4);
        CHECK(report_fused.passed());

        // Fused and composed graphs agree exactly on value and gradients.
        TapeT<double> tape;
        zero_grads<double>({x, gamma, beta});
        auto y1 = ops::batchnorm_train(x, gamma, beta, 1e-5, 0.0, rm, rv, true);
        tape.backward(ops::sum(y1));
        TensorT<double> gx1 = x.grad(), gg1 = gamma.grad(), gb1 = beta.grad();
        zero_grads<double>({x, gamma, beta});
        auto y2 = ops::relu(ops::batchnorm_train(x, gamma, beta, 1e-5, 0.0, rm, rv, false));
        tape.backward(ops::sum(y2));
        CHECK(max_abs_diff(y1.value(), y2.value()) == 0.0);
        // The masked reductions vectorize differently from the plain ones,
        // so cross-path gradients agree to rounding, not bit for bit.
        CHECK(max_abs_diff(gx1, x.grad()) <= 1e-12);
        CHECK(max_abs_diff(gg1, gamma.grad()) <= 1e-12);
        CHECK(max_abs_diff(gb1, beta.grad()) <= 1e-12);
    }

    TEST_CASE("pooling chain gradients match finite differences") {
        Rng rng(derive_seed(7, 4, 0));
        auto x = make_leaf(random_tensor<double>({2, 3, 6, 6}, rng));
        auto w = make_leaf(random_tensor<double>({4, 3}, rng));
        auto f = [&]() {
            return ops::sum(ops::linear<double>(
                ops::avg_pool_global(ops::max_pool2(x)), w, nullptr));
        };
        auto report = finite_diff_check<double>(f, {{"x", x}, {"w", w}}, 1e-5, 1e-4);
        CHECK(report.passed());
    }

    TEST_CASE("channel reparameterization gradients match finite differences") {
        // The composition used by the Dirac weight: a . delta + b . (W / |W|).
        Rng rng(derive_seed(7, 5, 0));
        auto x = make_leaf(random_tensor<double>({2, 2, 5, 5}, rng), false);
        auto w = make_leaf(random_tensor<double>({3, 2, 3, 3}, rng));
        auto a = make_leaf(random_tensor<double>({3}, rng, 0.5));
        auto b = make_leaf(random_tensor<double>({3}, rng, 0.5));
        auto delta = make_leaf(random_tensor<double>({3, 2, 3, 3}, rng), false);
        auto f = [&]() {
            auto w_norm = ops::div_channels(w, ops::filter_norms(w));
            auto what = ops::add(ops::scale_channels(delta, a), ops::scale_channels(w_norm, b));
            return ops::sum(ops::relu(ops::conv2d<double>(x, what, nullptr, 1, 1)));
        };
        auto report =
            finite_diff_check<double>(f, {{"w", w}, {"a", a}, {"b", b}}, 1e-5, 1e-4);
        CHECK(report.passed());
    }

    TEST_CASE("normalized filters are invariant to radial perturbations") {
        // Perturbing a filter along its own direction must not move its
        // normalized copy: the directional derivative vanishes.
        Rng rng(derive_seed(7, 6, 0));
        auto w = random_tensor<double>({4, 3, 3, 3}, rng);
        const double t = 1e-6;
        auto plus = kernels::scale(w, 1.0 + t);
        auto minus = kernels::scale(w, 1.0 - t);
        auto n_plus = kernels::div_channels(plus, kernels::filter_norms(plus));
        auto n_minus = kernels::div_channels(minus, kernels::filter_norms(minus));
        CHECK(max_abs_diff(n_plus, n_minus) / (2.0 * t) <= 1e-6);
    }

    TEST_CASE("small network chain matches finite differences end to end") {
        Rng rng(derive_seed(7, 7, 0));
        auto x = make_leaf(random_tensor<double>({2, 2, 4, 4}, rng), false);
        auto w1 = make_leaf(random_tensor<double>({3, 2, 3, 3}, rng));
        auto gamma = make_leaf(random_tensor<double>({3}, rng, 0.5));
        auto beta = make_leaf(random_tensor<double>({3}, rng, 0.5));
        auto w2 = make_leaf(random_tensor<double>({4, 3, 3, 3}, rng));
        auto wl = make_leaf(random_tensor<double>({3, 4}, rng));
        auto bl = make_leaf(random_tensor<double>({3}, rng));
        TensorT<double> rm({3}), rv({3});
        rv.fill(1.0);
        std::vector<std::int32_t> labels = {1, 0};

        auto f = [&]() {
            auto h = ops::conv2d<double>(x, w1, nullptr, 1, 1);
            h = ops::batchnorm_train(h, gamma, beta, 1e-5, 0.0, rm, rv, true);
            h = ops::max_pool2(h);
            h = ops::relu(ops::conv2d<double>(h, w2, nullptr, 1, 1));
            auto pooled = ops::avg_pool_global(h);
            return ops::softmax_cross_entropy(ops::linear(pooled, wl, &bl), labels).loss;
        };
        auto report = finite_diff_check<double>(
            f,
            {{"w1", w1}, {"gamma", gamma}, {"beta", beta}, {"w2", w2}, {"wl", wl}, {"bl", bl}},
            1e-5, 1e-4);
        for (const auto& e : report.entries) {
            CAPTURE(e.name);
            CHECK(e.max_rel_err <= 1e-4);
        }
        CHECK(report.passed());
    }
}
