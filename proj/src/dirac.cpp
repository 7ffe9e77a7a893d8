#include "diracnet/dirac.hpp"

#include <cmath>

#include "diracnet/errors.hpp"
#include "diracnet/kernels.hpp"

namespace diracnet::dirac {

template <typename T>
TensorT<T> build_dirac_delta(std::size_t channels, std::size_t k1, std::size_t k2) {
    if (channels == 0) throw ConfigError("build_dirac_delta: need at least one channel");
    if (k1 % 2 == 0 || k2 % 2 == 0) {
        throw ConfigError(msg("build_dirac_delta: kernel must be odd to center the identity, got ",
                              k1, "x", k2));
    }
    TensorT<T> delta({channels, channels, k1, k2});
    const std::size_t ch = (k1 - 1) / 2, cw = (k2 - 1) / 2;
    for (std::size_t i = 0; i < channels; ++i) delta.at4(i, i, ch, cw) = T(1);
    return delta;
}

namespace {

template <typename T>
void check_norm_floor(const TensorT<T>& norms) {
    for (std::size_t i = 0; i < norms.numel(); ++i) {
        if (!(double(norms[i]) > kNormFloor)) {
            throw NumericError(msg("weight_norm: filter ", i, " has degenerate norm ",
                                   double(norms[i]), " (floor ", kNormFloor, ")"));
        }
    }
}

}  // namespace

template <typename T>
TensorT<T> weight_norm(const TensorT<T>& w) {
    if (w.rank() != 4) throw ShapeError("weight_norm: expected a [out,in,kh,kw] weight");
    TensorT<T> norms = kernels::filter_norms(w);
    check_norm_floor(norms);
    return kernels::div_channels(w, norms);
}

template <typename T>
autograd::VarT<T> weight_norm(const autograd::VarT<T>& w) {
    if (w.value().rank() != 4) throw ShapeError("weight_norm: expected a [out,in,kh,kw] weight");
    check_norm_floor(kernels::filter_norms(w.value()));
    return autograd::ops::div_channels(w, autograd::ops::filter_norms(w));
}

template <typename T>
autograd::VarT<T> effective_weight(const DiracConvParamsT<T>& p,
                                   const autograd::VarT<T>& delta) {
    if (!p.w.value().same_shape(delta.value())) {
        throw ShapeError(msg("effective_weight: delta shape ", shape_str(delta.value().shape()),
                             " does not match weight ", shape_str(p.w.value().shape())));
    }
    return autograd::ops::add(autograd::ops::scale_channels(delta, p.a),
                              autograd::ops::scale_channels(weight_norm(p.w), p.b));
}

template <typename T>
TensorT<T> fold_dirac(const TensorT<T>& w, const TensorT<T>& a, const TensorT<T>& b,
                      const TensorT<T>& delta) {
    // Mirrors effective_weight op for op; any deviation would break the
    // bit-exact fold guarantee.
    TensorT<T> w_norm = weight_norm(w);
    return kernels::add(kernels::scale_channels(delta, a), kernels::scale_channels(w_norm, b));
}

template <typename T>
TensorT<T> fold_dirac(const DiracConvParamsT<T>& p) {
    const TensorT<T>& w = p.w.value();
    TensorT<T> delta = build_dirac_delta<T>(w.dim(0), w.dim(2), w.dim(3));
    return fold_dirac(w, p.a.value(), p.b.value(), delta);
}

template <typename T>
FoldedConvT<T> fold_batchnorm(const TensorT<T>& w, const TensorT<std::type_identity_t<T>>* bias,
                              const BatchNormStatsT<T>& bn) {
    const std::size_t C = w.dim(0);
    if (bn.gamma.numel() != C || bn.beta.numel() != C || bn.running_mean.numel() != C ||
        bn.running_var.numel() != C) {
        throw ShapeError(msg("fold_batchnorm: stats length mismatch for ", C, " channels"));
    }
    if (bias && bias->numel() != C) {
        throw ShapeError(msg("fold_batchnorm: bias length ", bias->numel(), " for ", C,
                             " channels"));
    }
    TensorT<T> scale = TensorT<T>::uninitialized({C});
    for (std::size_t c = 0; c < C; ++c) {
        const double var = double(bn.running_var[c]);
        if (var < 0.0) {
            throw NumericError(msg("fold_batchnorm: negative running variance ", var,
                                   " at channel ", c));
        }
        scale[c] = T(double(bn.gamma[c]) / std::sqrt(var + double(bn.eps)));
    }
    FoldedConvT<T> out;
    out.w = kernels::scale_channels(w, scale);
    out.bias = TensorT<T>::uninitialized({C});
    for (std::size_t c = 0; c < C; ++c) {
        const T b0 = bias ? (*bias)[c] : T(0);
        out.bias[c] = bn.beta[c] + (b0 - bn.running_mean[c]) * scale[c];
    }
    return out;
}

#define DIRACNET_INSTANTIATE_DIRAC(T)                                                             \
    template TensorT<T> build_dirac_delta<T>(std::size_t, std::size_t, std::size_t);              \
    template TensorT<T> weight_norm<T>(const TensorT<T>&);                                        \
    template autograd::VarT<T> weight_norm<T>(const autograd::VarT<T>&);                          \
    template autograd::VarT<T> effective_weight<T>(const DiracConvParamsT<T>&,                    \
                                                   const autograd::VarT<T>&);                     \
    template TensorT<T> fold_dirac<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,    \
                                      const TensorT<T>&);                                         \
    template TensorT<T> fold_dirac<T>(const DiracConvParamsT<T>&);                                \
    template FoldedConvT<T> fold_batchnorm<T>(const TensorT<T>&,                                  \
                                              const TensorT<std::type_identity_t<T>>*,           \
                                              const BatchNormStatsT<T>&);

DIRACNET_INSTANTIATE_DIRAC(float)
DIRACNET_INSTANTIATE_DIRAC(double)

#undef DIRACNET_INSTANTIATE_DIRAC

}  // namespace diracnet::dirac
