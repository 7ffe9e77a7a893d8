#pragma once

#include <cstdint>
#include <type_traits>
#include <vector>

#include "diracnet/tensor.hpp"

// OpenMP-parallel kernels.  Every routine here is tested against the serial
// implementations in reference.hpp.
//
// Determinism contract: results are bitwise identical across runs and thread
// counts for a fixed build.  Kernels only parallelize over disjoint output
// regions; reductions either stay inside one thread or combine per-chunk
// partials in a fixed order.  The BLAS backend is pinned to a single thread
// (see blas_init.cpp).
namespace diracnet::kernels {

/// Number of threads parallel regions will use.
int max_threads();
void set_threads(int n);

/// "openblas" or "builtin"; which backend gemm() dispatches to.
const char* gemm_backend();

/// C[m,n] = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

enum class Conv2dAlgo {
    Auto,    // Direct for narrow layers, Im2col for wide ones
    Direct,  // padded-input accumulation, vectorized over output columns
    Im2col,  // patch matrix + GEMM, chunked so buffers stay cache-sized
};

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w,
                          const TensorT<std::type_identity_t<T>>* bias, std::size_t stride,
                          std::size_t pad, Conv2dAlgo algo = Conv2dAlgo::Auto);

template <typename T>
TensorT<T> conv2d_backward_input(const TensorT<T>& grad_y, const TensorT<T>& w,
                                 const Shape& x_shape, std::size_t stride, std::size_t pad,
                                 Conv2dAlgo algo = Conv2dAlgo::Auto);

template <typename T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& grad_y, const TensorT<T>& x,
                                  const Shape& w_shape, std::size_t stride, std::size_t pad,
                                  Conv2dAlgo algo = Conv2dAlgo::Auto);

template <typename T>
TensorT<T> conv2d_backward_bias(const TensorT<T>& grad_y);

/// 2x2/stride-2 max pooling.  argmax (window-local index 0..3, first maximum
/// in row-major window order) is stored for the backward pass when non-null.
template <typename T>
TensorT<T> maxpool2_forward(const TensorT<T>& x, TensorT<std::int32_t>* argmax);

template <typename T>
TensorT<T> maxpool2_backward(const TensorT<std::int32_t>& argmax, const TensorT<T>& grad_y,
                             const Shape& x_shape);

template <typename T>
TensorT<T> global_avgpool_forward(const TensorT<T>& x);

template <typename T>
TensorT<T> global_avgpool_backward(const TensorT<T>& grad_y, std::size_t h, std::size_t w);

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

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& grad_y);

/// Train-mode batch norm over [B,C,H,W].  Normalizes with biased batch
/// variance, updates running stats in place as
///   running <- (1 - momentum) * running + momentum * batch
/// using the unbiased variance for running_var.  Saves batch mean/var for
/// backward.  fuse_relu applies max(., 0) to the output in the same pass.
template <typename T>
TensorT<T> batchnorm_forward_train(const TensorT<T>& x, const TensorT<T>& gamma,
                                   const TensorT<T>& beta, T eps, T momentum,
                                   TensorT<T>& running_mean, TensorT<T>& running_var,
                                   bool fuse_relu, TensorT<T>& save_mean, TensorT<T>& save_var);

template <typename T>
TensorT<T> batchnorm_forward_eval(const TensorT<T>& x, const TensorT<T>& gamma,
                                  const TensorT<T>& beta, const TensorT<T>& mean,
                                  const TensorT<T>& var, T eps, bool fuse_relu);

/// Backward through train-mode BN.  If relu_output is non-null the forward
/// fused a ReLU and grad_y is masked where that output is zero (exactly the
/// pre-activation > 0 test, since relu(v) > 0 iff v > 0).
template <typename T>
void batchnorm_backward(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& save_mean,
                        const TensorT<T>& save_var, T eps, const TensorT<T>& grad_y,
                        const TensorT<std::type_identity_t<T>>* relu_output, TensorT<T>& grad_x,
                        TensorT<T>& grad_gamma, TensorT<T>& grad_beta);

/// Mean cross-entropy over the batch; fills probs. Loss returned in double.
template <typename T>
double softmax_cross_entropy_forward(const TensorT<T>& logits,
                                     const std::vector<std::int32_t>& labels, TensorT<T>& probs);

/// scale * (probs - onehot) / batch
template <typename T>
TensorT<T> softmax_cross_entropy_backward(const TensorT<T>& probs,
                                          const std::vector<std::int32_t>& labels, T scale);

template <typename T>
std::vector<std::int32_t> argmax_rows(const TensorT<T>& logits);

/// Euclidean norm of each leading-dim slice w[o].
template <typename T>
TensorT<T> filter_norms(const TensorT<T>& w);

/// d(norms)/dW pullback: grad_w[o] = grad_norms[o] * w[o] / norms[o].
template <typename T>
TensorT<T> filter_norms_backward(const TensorT<T>& grad_norms, const TensorT<T>& w,
                                 const TensorT<T>& norms);

/// out[o] = w[o] / s[o].  Its pullback w.r.t. w is div_channels(grad, s).
template <typename T>
TensorT<T> div_channels(const TensorT<T>& w, const TensorT<T>& s);

/// grad_s[o] = -sum(grad_out[o] * w[o]) / s[o]^2
template <typename T>
TensorT<T> div_channels_backward_scale(const TensorT<T>& grad_out, const TensorT<T>& w,
                                       const TensorT<T>& s);

/// out[o] = w[o] * s[o].  Its pullback w.r.t. w is scale_channels(grad, s).
template <typename T>
TensorT<T> scale_channels(const TensorT<T>& w, const TensorT<T>& s);

/// grad_s[o] = sum(grad_out[o] * w[o])
template <typename T>
TensorT<T> scale_channels_backward_scale(const TensorT<T>& grad_out, const TensorT<T>& w);

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b);

/// y += alpha * x
template <typename T>
void axpy(T alpha, const TensorT<T>& x, TensorT<T>& y);

template <typename T>
TensorT<T> scale(const TensorT<T>& x, T alpha);

template <typename T>
double sum(const TensorT<T>& x);

/// v <- momentum * v + grad + wd * param;  param <- param - lr * v
template <typename T>
void sgd_update(TensorT<T>& param, const TensorT<T>& grad, TensorT<T>& velocity, T lr, T momentum,
                T wd);

}  // namespace diracnet::kernels
