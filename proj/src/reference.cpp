#include "diracnet/reference.hpp"

#include <algorithm>
#include <cmath>

#include "diracnet/errors.hpp"

namespace diracnet::reference {

namespace {

template <typename T>
void check_conv_shapes(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias) {
    require_rank(x, 4, "conv2d: input");
    require_rank(w, 4, "conv2d: weight");
    if (x.dim(1) != w.dim(1)) {
        throw ShapeError(msg("conv2d: input has ", x.dim(1), " channels but weight expects ",
                             w.dim(1)));
    }
    if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0))) {
        throw ShapeError(msg("conv2d: bias shape ", shape_str(bias->shape()),
                             " does not match ", w.dim(0), " output channels"));
    }
}

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) {
        throw ShapeError(msg("conv2d: kernel ", k, " larger than padded input ", in + 2 * pad));
    }
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc) {
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) {
                T av = trans_a ? a[p * lda + i] : a[i * lda + p];
                T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
                acc += av * bv;
            }
            c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
        }
    }
}

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& x, const TensorT<T>& w,
                          const TensorT<std::type_identity_t<T>>* bias,
                          std::size_t stride, std::size_t pad) {
    check_conv_shapes(x, w, bias);
    const std::size_t B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = w.dim(0), kH = w.dim(2), kW = w.dim(3);
    const std::size_t OH = conv_out_dim(H, kH, stride, pad);
    const std::size_t OW = conv_out_dim(W, kW, stride, pad);

    TensorT<T> y({B, Cout, OH, OW});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    T acc = bias ? (*bias)[co] : T(0);
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t kh = 0; kh < kH; ++kh)
                            for (std::size_t kw = 0; kw < kW; ++kw) {
                                std::ptrdiff_t ih = std::ptrdiff_t(oh * stride + kh) - std::ptrdiff_t(pad);
                                std::ptrdiff_t iw = std::ptrdiff_t(ow * stride + kw) - std::ptrdiff_t(pad);
                                if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                                    continue;
                                acc += x.at4(n, ci, std::size_t(ih), std::size_t(iw)) *
                                       w.at4(co, ci, kh, kw);
                            }
                    y.at4(n, co, oh, ow) = acc;
                }
    return y;
}

template <typename T>
TensorT<T> conv2d_backward_input(const TensorT<T>& grad_y, const TensorT<T>& w,
                                 const Shape& x_shape, std::size_t stride, std::size_t pad) {
    require_rank(grad_y, 4, "conv2d backward: grad_y");
    const std::size_t B = x_shape[0], H = x_shape[2], W = x_shape[3];
    const std::size_t Cout = w.dim(0), Cin = w.dim(1), kH = w.dim(2), kW = w.dim(3);
    const std::size_t OH = grad_y.dim(2), OW = grad_y.dim(3);

    TensorT<T> gx(x_shape);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    T g = grad_y.at4(n, co, oh, ow);
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t kh = 0; kh < kH; ++kh)
                            for (std::size_t kw = 0; kw < kW; ++kw) {
                                std::ptrdiff_t ih = std::ptrdiff_t(oh * stride + kh) - std::ptrdiff_t(pad);
                                std::ptrdiff_t iw = std::ptrdiff_t(ow * stride + kw) - std::ptrdiff_t(pad);
                                if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                                    continue;
                                gx.at4(n, ci, std::size_t(ih), std::size_t(iw)) +=
                                    g * w.at4(co, ci, kh, kw);
                            }
                }
    return gx;
}

template <typename T>
TensorT<T> conv2d_backward_weight(const TensorT<T>& grad_y, const TensorT<T>& x,
                                  const Shape& w_shape, std::size_t stride, std::size_t pad) {
    const std::size_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
    const std::size_t Cout = w_shape[0], Cin = w_shape[1], kH = w_shape[2], kW = w_shape[3];
    const std::size_t OH = grad_y.dim(2), OW = grad_y.dim(3);

    TensorT<T> gw(w_shape);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t co = 0; co < Cout; ++co)
            for (std::size_t oh = 0; oh < OH; ++oh)
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    T g = grad_y.at4(n, co, oh, ow);
                    for (std::size_t ci = 0; ci < Cin; ++ci)
                        for (std::size_t kh = 0; kh < kH; ++kh)
                            for (std::size_t kw = 0; kw < kW; ++kw) {
                                std::ptrdiff_t ih = std::ptrdiff_t(oh * stride + kh) - std::ptrdiff_t(pad);
                                std::ptrdiff_t iw = std::ptrdiff_t(ow * stride + kw) - std::ptrdiff_t(pad);
                                if (ih < 0 || iw < 0 || ih >= std::ptrdiff_t(H) || iw >= std::ptrdiff_t(W))
                                    continue;
                                gw.at4(co, ci, kh, kw) +=
                                    g * x.at4(n, ci, std::size_t(ih), std::size_t(iw));
                            }
                }
    return gw;
}

template <typename T>
TensorT<T> conv2d_backward_bias(const TensorT<T>& grad_y) {
    require_rank(grad_y, 4, "conv2d backward: grad_y");
    TensorT<T> gb({grad_y.dim(1)});
    for (std::size_t n = 0; n < grad_y.dim(0); ++n)
        for (std::size_t c = 0; c < grad_y.dim(1); ++c)
            for (std::size_t h = 0; h < grad_y.dim(2); ++h)
                for (std::size_t w = 0; w < grad_y.dim(3); ++w) gb[c] += grad_y.at4(n, c, h, w);
    return gb;
}

template <typename T>
TensorT<T> maxpool2_forward(const TensorT<T>& x) {
    require_rank(x, 4, "max_pool2: input");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (H % 2 != 0 || W % 2 != 0) {
        throw ShapeError(msg("max_pool2: spatial dims must be even, got ", H, "x", W));
    }
    TensorT<T> y({B, C, H / 2, W / 2});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oh = 0; oh < H / 2; ++oh)
                for (std::size_t ow = 0; ow < W / 2; ++ow) {
                    T best = x.at4(n, c, 2 * oh, 2 * ow);
                    for (std::size_t dh = 0; dh < 2; ++dh)
                        for (std::size_t dw = 0; dw < 2; ++dw)
                            best = std::max(best, x.at4(n, c, 2 * oh + dh, 2 * ow + dw));
                    y.at4(n, c, oh, ow) = best;
                }
    return y;
}

template <typename T>
TensorT<T> maxpool2_backward(const TensorT<T>& x, const TensorT<T>& grad_y) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> gx(x.shape());
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t oh = 0; oh < H / 2; ++oh)
                for (std::size_t ow = 0; ow < W / 2; ++ow) {
                    std::size_t bh = 2 * oh, bw = 2 * ow;
                    T best = x.at4(n, c, bh, bw);
                    for (std::size_t dh = 0; dh < 2; ++dh)
                        for (std::size_t dw = 0; dw < 2; ++dw)
                            if (x.at4(n, c, 2 * oh + dh, 2 * ow + dw) > best) {
                                best = x.at4(n, c, 2 * oh + dh, 2 * ow + dw);
                                bh = 2 * oh + dh;
                                bw = 2 * ow + dw;
                            }
                    gx.at4(n, c, bh, bw) += grad_y.at4(n, c, oh, ow);
                }
    return gx;
}

template <typename T>
TensorT<T> global_avgpool_forward(const TensorT<T>& x) {
    require_rank(x, 4, "avg_pool_global: input");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> y({B, C});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            T acc = T(0);
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) acc += x.at4(n, c, h, w);
            y.at2(n, c) = acc / T(H * W);
        }
    return y;
}

template <typename T>
TensorT<T> global_avgpool_backward(const TensorT<T>& grad_y, std::size_t h, std::size_t w) {
    const std::size_t B = grad_y.dim(0), C = grad_y.dim(1);
    TensorT<T> gx({B, C, h, w});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            T g = grad_y.at2(n, c) / T(h * w);
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) gx.at4(n, c, i, j) = g;
        }
    return gx;
}

template <typename T>
TensorT<T> linear_forward(const TensorT<T>& x, const TensorT<T>& w,
                          const TensorT<std::type_identity_t<T>>* bias) {
    require_rank(x, 2, "linear: input");
    require_rank(w, 2, "linear: weight");
    if (x.dim(1) != w.dim(1)) {
        throw ShapeError(msg("linear: input features ", x.dim(1), " vs weight features ", w.dim(1)));
    }
    const std::size_t B = x.dim(0), C = w.dim(0), D = w.dim(1);
    TensorT<T> y({B, C});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            T acc = bias ? (*bias)[c] : T(0);
            for (std::size_t d = 0; d < D; ++d) acc += x.at2(n, d) * w.at2(c, d);
            y.at2(n, c) = acc;
        }
    return y;
}

template <typename T>
TensorT<T> linear_backward_input(const TensorT<T>& grad_y, const TensorT<T>& w) {
    const std::size_t B = grad_y.dim(0), C = w.dim(0), D = w.dim(1);
    TensorT<T> gx({B, D});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t d = 0; d < D; ++d) {
            T acc = T(0);
            for (std::size_t c = 0; c < C; ++c) acc += grad_y.at2(n, c) * w.at2(c, d);
            gx.at2(n, d) = acc;
        }
    return gx;
}

template <typename T>
TensorT<T> linear_backward_weight(const TensorT<T>& grad_y, const TensorT<T>& x) {
    const std::size_t B = grad_y.dim(0), C = grad_y.dim(1), D = x.dim(1);
    TensorT<T> gw({C, D});
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t d = 0; d < D; ++d) {
            T acc = T(0);
            for (std::size_t n = 0; n < B; ++n) acc += grad_y.at2(n, c) * x.at2(n, d);
            gw.at2(c, d) = acc;
        }
    return gw;
}

template <typename T>
TensorT<T> linear_backward_bias(const TensorT<T>& grad_y) {
    const std::size_t B = grad_y.dim(0), C = grad_y.dim(1);
    TensorT<T> gb({C});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) gb[c] += grad_y.at2(n, c);
    return gb;
}

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& x) {
    TensorT<T> y(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& grad_y) {
    TensorT<T> gx(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] = x[i] > T(0) ? grad_y[i] : T(0);
    return gx;
}

template <typename T>
BatchNormResult<T> batchnorm_forward_train(const TensorT<T>& x, const TensorT<T>& gamma,
                                           const TensorT<T>& beta, T eps) {
    require_rank(x, 4, "batchnorm: input");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const T m = T(B * H * W);

    BatchNormResult<T> r{TensorT<T>(x.shape()), TensorT<T>({C}), TensorT<T>({C})};
    for (std::size_t c = 0; c < C; ++c) {
        T sum = T(0);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) sum += x.at4(n, c, h, w);
        T mean = sum / m;
        T ssq = T(0);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    T d = x.at4(n, c, h, w) - mean;
                    ssq += d * d;
                }
        T var = ssq / m;
        T inv = T(1) / std::sqrt(var + eps);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                    r.y.at4(n, c, h, w) = gamma[c] * (x.at4(n, c, h, w) - mean) * inv + beta[c];
        r.mean[c] = mean;
        r.var[c] = var;
    }
    return r;
}

template <typename T>
TensorT<T> batchnorm_forward_eval(const TensorT<T>& x, const TensorT<T>& gamma,
                                  const TensorT<T>& beta, const TensorT<T>& mean,
                                  const TensorT<T>& var, T eps) {
    require_rank(x, 4, "batchnorm: input");
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    TensorT<T> y(x.shape());
    for (std::size_t c = 0; c < C; ++c) {
        T inv = T(1) / std::sqrt(var[c] + eps);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w)
                    y.at4(n, c, h, w) = gamma[c] * (x.at4(n, c, h, w) - mean[c]) * inv + beta[c];
    }
    return y;
}

template <typename T>
BatchNormGrads<T> batchnorm_backward(const TensorT<T>& x, const TensorT<T>& gamma,
                                     const TensorT<T>& mean, const TensorT<T>& var, T eps,
                                     const TensorT<T>& grad_y) {
    const std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const T m = T(B * H * W);

    BatchNormGrads<T> g{TensorT<T>(x.shape()), TensorT<T>({C}), TensorT<T>({C})};
    for (std::size_t c = 0; c < C; ++c) {
        T inv = T(1) / std::sqrt(var[c] + eps);
        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    T xhat = (x.at4(n, c, h, w) - mean[c]) * inv;
                    sum_gy += grad_y.at4(n, c, h, w);
                    sum_gy_xhat += grad_y.at4(n, c, h, w) * xhat;
                }
        g.grad_beta[c] = sum_gy;
        g.grad_gamma[c] = sum_gy_xhat;
        for (std::size_t n = 0; n < B; ++n)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) {
                    T xhat = (x.at4(n, c, h, w) - mean[c]) * inv;
                    g.grad_x.at4(n, c, h, w) =
                        gamma[c] * inv *
                        (grad_y.at4(n, c, h, w) - sum_gy / m - xhat * sum_gy_xhat / m);
                }
    }
    return g;
}

template <typename T>
SoftmaxResult<T> softmax_cross_entropy(const TensorT<T>& logits, const std::vector<std::int32_t>& labels) {
    require_rank(logits, 2, "softmax_cross_entropy: logits");
    const std::size_t B = logits.dim(0), C = logits.dim(1);
    if (labels.size() != B) {
        throw ShapeError(msg("softmax_cross_entropy: ", labels.size(), " labels for batch ", B));
    }
    SoftmaxResult<T> r{0.0, TensorT<T>(logits.shape())};
    double loss = 0.0;
    for (std::size_t n = 0; n < B; ++n) {
        if (labels[n] < 0 || std::size_t(labels[n]) >= C) {
            throw ConfigError(msg("softmax_cross_entropy: label ", labels[n], " out of range [0,", C, ")"));
        }
        T mx = logits.at2(n, 0);
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, logits.at2(n, c));
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(double(logits.at2(n, c) - mx));
        for (std::size_t c = 0; c < C; ++c)
            r.probs.at2(n, c) = T(std::exp(double(logits.at2(n, c) - mx)) / z);
        loss += std::log(z) - double(logits.at2(n, std::size_t(labels[n])) - mx);
    }
    r.loss = loss / double(B);
    return r;
}

template <typename T>
TensorT<T> softmax_cross_entropy_backward(const TensorT<T>& probs, const std::vector<std::int32_t>& labels) {
    const std::size_t B = probs.dim(0), C = probs.dim(1);
    TensorT<T> g(probs.shape());
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            T onehot = (std::size_t(labels[n]) == c) ? T(1) : T(0);
            g.at2(n, c) = (probs.at2(n, c) - onehot) / T(B);
        }
    return g;
}

template <typename T>
TensorT<T> filter_norms(const TensorT<T>& w) {
    if (w.rank() < 2) throw ShapeError("filter_norms: need rank >= 2");
    const std::size_t Cout = w.dim(0), per = w.numel() / Cout;
    TensorT<T> norms({Cout});
    for (std::size_t o = 0; o < Cout; ++o) {
        T ssq = T(0);
        for (std::size_t i = 0; i < per; ++i) {
            T v = w[o * per + i];
            ssq += v * v;
        }
        norms[o] = std::sqrt(ssq);
    }
    return norms;
}

template <typename T>
TensorT<T> div_channels(const TensorT<T>& w, const TensorT<T>& s) {
    const std::size_t Cout = w.dim(0), per = w.numel() / Cout;
    TensorT<T> out(w.shape());
    for (std::size_t o = 0; o < Cout; ++o)
        for (std::size_t i = 0; i < per; ++i) out[o * per + i] = w[o * per + i] / s[o];
    return out;
}

template <typename T>
TensorT<T> scale_channels(const TensorT<T>& w, const TensorT<T>& s) {
    const std::size_t Cout = w.dim(0), per = w.numel() / Cout;
    TensorT<T> out(w.shape());
    for (std::size_t o = 0; o < Cout; ++o)
        for (std::size_t i = 0; i < per; ++i) out[o * per + i] = w[o * per + i] * s[o];
    return out;
}

#define DIRACNET_INSTANTIATE_REFERENCE(T)                                                        \
    template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, T, const T*,        \
                          std::size_t, const T*, std::size_t, T, T*, std::size_t);               \
    template TensorT<T> conv2d_forward<T>(const TensorT<T>&, const TensorT<T>&,                  \
                                          const TensorT<T>*, std::size_t, std::size_t);          \
    template TensorT<T> conv2d_backward_input<T>(const TensorT<T>&, const TensorT<T>&,           \
                                                 const Shape&, std::size_t, std::size_t);        \
    template TensorT<T> conv2d_backward_weight<T>(const TensorT<T>&, const TensorT<T>&,          \
                                                  const Shape&, std::size_t, std::size_t);       \
    template TensorT<T> conv2d_backward_bias<T>(const TensorT<T>&);                              \
    template TensorT<T> maxpool2_forward<T>(const TensorT<T>&);                                  \
    template TensorT<T> maxpool2_backward<T>(const TensorT<T>&, const TensorT<T>&);              \
    template TensorT<T> global_avgpool_forward<T>(const TensorT<T>&);                            \
    template TensorT<T> global_avgpool_backward<T>(const TensorT<T>&, std::size_t, std::size_t); \
    template TensorT<T> linear_forward<T>(const TensorT<T>&, const TensorT<T>&,                  \
                                          const TensorT<T>*);                                    \
    template TensorT<T> linear_backward_input<T>(const TensorT<T>&, const TensorT<T>&);          \
    template TensorT<T> linear_backward_weight<T>(const TensorT<T>&, const TensorT<T>&);         \
    template TensorT<T> linear_backward_bias<T>(const TensorT<T>&);                              \
    template TensorT<T> relu_forward<T>(const TensorT<T>&);                                      \
    template TensorT<T> relu_backward<T>(const TensorT<T>&, const TensorT<T>&);                  \
    template BatchNormResult<T> batchnorm_forward_train<T>(const TensorT<T>&, const TensorT<T>&, \
                                                           const TensorT<T>&, T);                \
    template TensorT<T> batchnorm_forward_eval<T>(const TensorT<T>&, const TensorT<T>&,          \
                                                  const TensorT<T>&, const TensorT<T>&,          \
                                                  const TensorT<T>&, T);                         \
    template BatchNormGrads<T> batchnorm_backward<T>(const TensorT<T>&, const TensorT<T>&,       \
                                                     const TensorT<T>&, const TensorT<T>&, T,    \
                                                     const TensorT<T>&);                         \
    template SoftmaxResult<T> softmax_cross_entropy<T>(const TensorT<T>&,                        \
                                                       const std::vector<std::int32_t>&);        \
    template TensorT<T> softmax_cross_entropy_backward<T>(const TensorT<T>&,                     \
                                                          const std::vector<std::int32_t>&);     \
    template TensorT<T> filter_norms<T>(const TensorT<T>&);                                      \
    template TensorT<T> div_channels<T>(const TensorT<T>&, const TensorT<T>&);                   \
    template TensorT<T> scale_channels<T>(const TensorT<T>&, const TensorT<T>&);

DIRACNET_INSTANTIATE_REFERENCE(float)
DIRACNET_INSTANTIATE_REFERENCE(double)

#undef DIRACNET_INSTANTIATE_REFERENCE

}  // namespace diracnet::reference
