// Convolution kernel benchmark: serial reference vs the two parallel
// algorithms, over the layer shapes the CIFAR-sized networks actually use.
// Each timed variant is also checked against the reference output, so this
// doubles as a smoke test that speed never bought wrong answers.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <string>
#include <vector>

#include "diracnet/kernels.hpp"
#include "diracnet/reference.hpp"
#include "diracnet/rng.hpp"
#include "diracnet/tensor.hpp"

using namespace diracnet;

namespace {

struct Case {
    const char* label;
    std::size_t b, cin, cout, hw, k, stride, pad;
};

double seconds() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

template <typename F>
double time_best(F&& f, int reps) {
    double best = 1e30;
    for (int r = 0; r < reps; ++r) {
        const double t0 = seconds();
        f();
        best = std::min(best, seconds() - t0);
    }
    return best;
}

double gflops(double flops, double secs) { return flops / secs / 1e9; }

void run_case(const Case& c, int reps, bool with_reference) {
    Rng rng(1);
    TensorT<float> x = TensorT<float>::uninitialized({c.b, c.cin, c.hw, c.hw});
    TensorT<float> w = TensorT<float>::uninitialized({c.cout, c.cin, c.k, c.k});
    fill_normal(x, rng);
    fill_normal(w, rng, 0.0, 0.1);
    const std::size_t oh = (c.hw + 2 * c.pad - c.k) / c.stride + 1;
    TensorT<float> gy = TensorT<float>::uninitialized({c.b, c.cout, oh, oh});
    fill_normal(gy, rng);

    // One multiply-add per (output element, tap) in each of the three passes.
    const double flops =
        2.0 * double(c.b) * double(c.cout) * double(oh) * double(oh) * double(c.cin) *
        double(c.k) * double(c.k);

    std::printf("%-22s B=%zu %zux%zu %zu->%zu k=%zu s=%zu\n", c.label, c.b, c.hw, c.hw, c.cin,
                c.cout, c.k, c.stride);

    TensorT<float> y_ref;
    if (with_reference) {
        const double t = time_best(
            [&] { y_ref = reference::conv2d_forward(x, w, nullptr, c.stride, c.pad); }, 1);
        std::printf("  %-10s fwd %7.2f GF/s\n", "reference", gflops(flops, t));
    }

    for (auto algo : {kernels::Conv2dAlgo::Direct, kernels::Conv2dAlgo::Im2col}) {
        const char* name = algo == kernels::Conv2dAlgo::Direct ? "direct" : "im2col";
        TensorT<float> y;
        const double tf = time_best(
            [&] { y = kernels::conv2d_forward(x, w, nullptr, c.stride, c.pad, algo); }, reps);
        if (with_reference && max_abs_diff(y, y_ref) > 1e-3) {
            std::printf("  %-10s fwd DISAGREES with reference!\n", name);
        }
        TensorT<float> gx, gw;
        const double tbi = time_best(
            [&] {
                gx = kernels::conv2d_backward_input(gy, w, x.shape(), c.stride, c.pad, algo);
            },
            reps);
        const double tbw = time_best(
            [&] {
                gw = kernels::conv2d_backward_weight(gy, x, w.shape(), c.stride, c.pad, algo);
            },
            reps);
        std::printf("  %-10s fwd %7.2f GF/s   bwd_in %7.2f GF/s   bwd_w %7.2f GF/s\n", name,
                    gflops(flops, tf), gflops(flops, tbi), gflops(flops, tbw));
    }
}

}  // namespace

int main(int argc, char** argv) {
    bool quick = false;
    bool with_reference = true;
    for (int i = 1; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--quick") quick = true;
        if (arg == "--no-reference") with_reference = false;
    }
    std::printf("threads=%d gemm=%s\n\n", kernels::max_threads(), kernels::gemm_backend());

    // Group shapes of the k=1 and k=10 CIFAR networks, plus the stem.
    const std::vector<Case> cases = {
        {"stem", 128, 3, 16, 32, 3, 1, 1},
        {"group1 k=1", 128, 16, 16, 32, 3, 1, 1},
        {"group2 k=1", 128, 32, 32, 16, 3, 1, 1},
        {"group3 k=1", 128, 64, 64, 8, 3, 1, 1},
        {"group1 k=10", 32, 160, 160, 32, 3, 1, 1},
        {"group3 k=10", 32, 640, 640, 8, 3, 1, 1},
    };
    const int reps = quick ? 1 : 3;
    const std::size_t limit = quick ? 4 : cases.size();
    for (std::size_t i = 0; i < limit; ++i) run_case(cases[i], reps, with_reference);
    return 0;
}
