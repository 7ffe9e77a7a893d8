#pragma once

#include <cstddef>

#include "diracnet/autograd.hpp"
#include "diracnet/tensor.hpp"

// Dirac parameterization of convolution: What = diag(a).I + diag(b).W_norm,
// where I is the identity (Dirac delta) kernel and W_norm is W with each
// filter divided by its Euclidean norm. At inference the whole thing, batch
// norm included, folds into a plain convolution.

namespace diracnet::dirac {

/// Filters with a norm at or below this are treated as a pathological run
/// and rejected, never silently clamped. Standard-normal init keeps real
/// filters far above it.
inline constexpr double kNormFloor = 1e-12;

/// Identity kernel: zero everywhere except a 1 at [i, i, (k1-1)/2, (k2-1)/2]
/// for each channel i. The one sits at the spatial center - the only
/// placement for which stride-1 same-padding convolution reproduces the
/// input exactly; a literal reading of the written index condition would put
/// ones at every spatial offset, which breaks that identity for k > 1.
template <typename T>
TensorT<T> build_dirac_delta(std::size_t channels, std::size_t k1, std::size_t k2);

/// Each filter divided by its Euclidean norm. Errors on any filter whose
/// norm is at or below kNormFloor, naming the filter index.
template <typename T>
TensorT<T> weight_norm(const TensorT<T>& w);

/// Graph-building variant; gradients flow through the norm.
template <typename T>
autograd::VarT<T> weight_norm(const autograd::VarT<T>& w);

template <typename T>
struct DiracConvParamsT {
    autograd::VarT<T> w;  // [M, M, K, K], raw weight, trainable
    autograd::VarT<T> a;  // [M], init 1.0, trainable, never L2-decayed
    autograd::VarT<T> b;  // [M], init 0.1, trainable, never L2-decayed

    std::size_t channels() const { return w.value().dim(0); }
};

/// What = diag(a).I + diag(b).W_norm as a graph node. delta must be the
/// matching build_dirac_delta constant.
template <typename T>
autograd::VarT<T> effective_weight(const DiracConvParamsT<T>& p, const autograd::VarT<T>& delta);

/// The same arithmetic with no graph attached. Uses the identical kernel
/// routines in the identical order, so the result matches effective_weight
/// bit for bit.
template <typename T>
TensorT<T> fold_dirac(const TensorT<T>& w, const TensorT<T>& a, const TensorT<T>& b,
                      const TensorT<T>& delta);

template <typename T>
TensorT<T> fold_dirac(const DiracConvParamsT<T>& p);

template <typename T>
struct BatchNormStatsT {
    TensorT<T> gamma;
    TensorT<T> beta;
    TensorT<T> running_mean;
    TensorT<T> running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);
};

template <typename T>
struct FoldedConvT {
    TensorT<T> w;
    TensorT<T> bias;
};

/// Absorbs inference-mode batch norm into the convolution:
///   w'[c]    = w[c] . gamma[c] / sqrt(running_var[c] + eps)
///   bias'[c] = beta[c] + (bias[c] - running_mean[c]) . gamma[c] / sqrt(...)
/// bias may be null (treated as zero). Errors on negative running variance.
template <typename T>
FoldedConvT<T> fold_batchnorm(const TensorT<T>& w, const TensorT<std::type_identity_t<T>>* bias,
                              const BatchNormStatsT<T>& bn);

using DiracConvParams = DiracConvParamsT<float>;
using BatchNormStats = BatchNormStatsT<float>;

}  // namespace diracnet::dirac
