#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "diracnet/rng.hpp"
#include "diracnet/tensor.hpp"

namespace diracnet::testutil {

/// Central-difference gradient of scalar f() w.r.t. x, perturbing in place.
template <typename F>
TensorT<double> numeric_grad(TensorT<double>& x, double step, F&& f) {
    TensorT<double> g(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
        double old = x[i];
        x[i] = old + step;
        double fp = f();
        x[i] = old - step;
        double fm = f();
        x[i] = old;
        g[i] = (fp - fm) / (2.0 * step);
    }
    return g;
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

template <typename T>
double max_rel_err(const TensorT<T>& a, const TensorT<T>& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) worst = std::max(worst, rel_err(double(a[i]), double(b[i])));
    return worst;
}

template <typename T>
TensorT<T> random_tensor(const Shape& shape, Rng& rng, double stddev = 1.0) {
    TensorT<T> t(shape);
    fill_normal(t, rng, 0.0, stddev);
    return t;
}

inline std::vector<std::int32_t> random_labels(std::size_t n, std::size_t classes, Rng& rng) {
    std::vector<std::int32_t> l(n);
    for (auto& v : l) v = std::int32_t(rng.below(classes));
    return l;
}

}  // namespace diracnet::testutil
