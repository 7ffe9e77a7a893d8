#include "diracnet/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>

namespace diracnet {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

template <typename T>
void ensure_finite(const TensorT<T>& t, const char* what) {
    // x * 0 is 0 for finite x and NaN otherwise; the accumulation
    // vectorizes where a per-element isfinite branch would not.
    const T* p = t.data();
    const std::size_t n = t.numel();
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += p[i] * T(0);
    if (acc == T(0)) return;
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(p[i])) {
            throw NumericError(msg(what, ": non-finite value ", p[i], " at flat index ", i,
                                   " in tensor of shape ", shape_str(t.shape())));
        }
    }
    throw NumericError(msg(what, ": non-finite value in tensor of shape ", shape_str(t.shape())));
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    if (!a.same_shape(b)) {
        throw ShapeError(msg("max_abs_diff: shapes differ, ", shape_str(a.shape()), " vs ",
                             shape_str(b.shape())));
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double d = std::abs(double(a[i]) - double(b[i]));
        if (d > worst) worst = d;
    }
    return worst;
}

template <typename T>
bool allclose(const TensorT<T>& a, const TensorT<T>& b, double rtol, double atol) {
    if (!a.same_shape(b)) return false;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        double d = std::abs(double(a[i]) - double(b[i]));
        if (d > atol + rtol * std::abs(double(b[i]))) return false;
    }
    return true;
}

template void ensure_finite<float>(const TensorT<float>&, const char*);
template void ensure_finite<double>(const TensorT<double>&, const char*);
template double max_abs_diff<float>(const TensorT<float>&, const TensorT<float>&);
template double max_abs_diff<double>(const TensorT<double>&, const TensorT<double>&);
template bool allclose<float>(const TensorT<float>&, const TensorT<float>&, double, double);
template bool allclose<double>(const TensorT<double>&, const TensorT<double>&, double, double);

}  // namespace diracnet
