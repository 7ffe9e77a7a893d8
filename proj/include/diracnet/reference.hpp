#pragma once

#include <cstdint>
#include <type_traits>
#include <vector>

#include "diracnet/tensor.hpp"

// Naive serial implementations of every numeric kernel, written as directly
// from the definitions as possible.  They are the oracle the optimized
// kernels are tested against and the baseline the benchmark tool compares
// with, so nothing here may call into kernels::.
namespace diracnet::reference {

/// C[m,n] = alpha * op(A)[m,k] * op(B)[k,n] + beta * C[m,n], row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

/// Cross-correlation, zero padding.  x [B,Cin,H,W], w [Cout,Cin,kH,kW],
/// bias [Cout] or nullptr.  Output spatial dims follow the floor formula
/// (H + 2*pad - kH) / stride + 1.
template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w,
                          const TensorT<std::type_identity_t<T>>* bias,
                          std::size_t stride, std::size_t pad);

template <typename T>
TensorT<T> conv2d_backward_input(const TensorT<T>& grad_y, const TensorT<T>& w,
                                 const Shape& x_shape, std::size_t stride, std::size_t pad);

template <typename T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& grad_y, const TensorT<T>& x,
                                  const Shape& w_shape, std::size_t stride, std::size_t pad);

template <typename T>
TensorT<T> conv2d_backward_bias(const TensorT<T>& grad_y);

/// 2x2 max pooling, stride 2; H and W must be even.
template <typename T>
TensorT<T> maxpool2_forward(const TensorT<T>& x);

/// Routes each output gradient to the first maximum in its window
/// (row-major window scan, strictly-greater comparison).
template <typename T>
TensorT<T> maxpool2_backward(const TensorT<T>& x, const TensorT<T>& grad_y);

template <typename T>
TensorT<T> global_avgpool_forward(const TensorT<T>& x);

template <typename T>
TensorT<T> global_avgpool_backward(const TensorT<T>& grad_y, std::size_t h, std::size_t w);

/// x [B,D], w [C,D], bias [C] or nullptr -> y [B,C].
template <typename T>
TensorT<T> linear_forward(const TensorT<T>& x, const TensorT<T>& w,
                          const TensorT<std::type_identity_t<T>>* bias);

template <typename T>
TensorT<T> linear_backward_input(const TensorT<T>& grad_y, const TensorT<T>& w);

template <typename T>
TensorT<T> linear_backward_weight(const TensorT<T>& grad_y, const TensorT<T>& x);

template <typename T>
TensorT<T> linear_backward_bias(const TensorT<T>& grad_y);

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& x);

/// Gradient passes where x > 0; the derivative at exactly 0 is taken as 0.
template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& grad_y);

template <typename T>
struct BatchNormResult {
    TensorT<T> y;
    TensorT<T> mean;  // per channel, batch mean
    TensorT<T> var;   // per channel, biased batch variance
};

template <typename T>
BatchNormResult<T> batchnorm_forward_train(const TensorT<T>& x, const TensorT<T>& gamma,
                                           const TensorT<T>& beta, T eps);

template <typename T>
TensorT<T> batchnorm_forward_eval(const TensorT<T>& x, const TensorT<T>& gamma,
                                  const TensorT<T>& beta, const TensorT<T>& mean,
                                  const TensorT<T>& var, T eps);

template <typename T>
struct BatchNormGrads {
    TensorT<T> grad_x;
    TensorT<T> grad_gamma;
    TensorT<T> grad_beta;
};

/// Backward through train-mode normalization; mean/var are the saved batch
/// statistics from the forward pass.
template <typename T>
BatchNormGrads<T> batchnorm_backward(const TensorT<T>& x, const TensorT<T>& gamma,
                                     const TensorT<T>& mean, const TensorT<T>& var, T eps,
                                     const TensorT<T>& grad_y);

template <typename T>
struct SoftmaxResult {
    double loss;     // mean cross-entropy over the batch
    TensorT<T> probs;
};

template <typename T>
SoftmaxResult<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<std::int32_t>& labels);

/// Gradient of the mean loss w.r.t. logits: (probs - onehot) / batch.
template <typename T>
TensorT<T> softmax_cross_entropy_backward(const TensorT<T>& probs, const std::vector<std::int32_t>& labels);

/// Euclidean norm of each output filter w[o] (all trailing dims).
template <typename T>
TensorT<T> filter_norms(const TensorT<T>& w);

/// out[o] = w[o] / s[o]
template <typename T>
TensorT<T> div_channels(const TensorT<T>& w, const TensorT<T>& s);

/// out[o] = w[o] * s[o]
template <typename T>
TensorT<T> scale_channels(const TensorT<T>& w, const TensorT<T>& s);

}  // namespace diracnet::reference
