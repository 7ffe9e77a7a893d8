#include "diracnet/autograd.hpp"

#include <cmath>

#include "diracnet/errors.hpp"

namespace diracnet::autograd {

namespace {

thread_local int no_grad_depth = 0;

template <typename T>
thread_local TapeT<T>* tls_tape = nullptr;

}  // namespace

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool NoGradGuard::active() { return no_grad_depth > 0; }

template <typename T>
TapeT<T>::TapeT() : prev_(tls_tape<T>) {
    tls_tape<T> = this;
}

template <typename T>
TapeT<T>::~TapeT() {
    tls_tape<T> = prev_;
}

template <typename T>
TapeT<T>* TapeT<T>::current() {
    return tls_tape<T>;
}

template <typename T>
std::shared_ptr<NodeT<T>> TapeT<T>::record(TensorT<T> value,
                                           std::vector<std::shared_ptr<NodeT<T>>> parents,
                                           std::function<void(NodeT<T>&)> backward_fn) {
    auto node = std::make_shared<NodeT<T>>();
    node->value = std::move(value);
    node->requires_grad = true;
    node->leaf = false;
    node->seq = nodes_.size();
    node->parents = std::move(parents);
    node->backward_fn = std::move(backward_fn);
    nodes_.push_back(node);
    return node;
}

template <typename T>
void TapeT<T>::backward(const VarT<T>& loss) {
    if (!loss) throw ConfigError("backward: empty loss Variable");
    if (loss.value().numel() != 1) {
        throw ShapeError(msg("backward: loss must be scalar, got shape ",
                             shape_str(loss.value().shape())));
    }
    auto seed = loss.node();
    if (!seed->leaf && (seed->seq >= nodes_.size() || nodes_[seed->seq] != seed)) {
        throw ConfigError("backward: loss was not recorded on this tape");
    }
    TensorT<T> one(seed->value.shape());
    one[0] = T(1);
    seed->accumulate(std::move(one));
    if (seed->leaf) return;  // loss is a constant w.r.t. everything

    // Recording order is topological, so a reverse sweep visits every node
    // after all of its consumers. A node whose grad is still empty is not an
    // ancestor of the loss and is skipped.
    for (std::size_t i = seed->seq + 1; i-- > 0;) {
        NodeT<T>& node = *nodes_[i];
        if (node.grad.numel() == 0) continue;
        if (node.backward_fn) node.backward_fn(node);
        node.grad = TensorT<T>();  // intermediates do not keep gradients
    }
}

template <typename T>
void backward(const VarT<T>& loss) {
    TapeT<T>* tape = TapeT<T>::current();
    if (!tape) throw ConfigError("backward: no tape is live on this thread");
    tape->backward(loss);
}

template <typename T>
void zero_grads(const std::vector<VarT<T>>& params) {
    for (const VarT<T>& p : params) {
        if (p) const_cast<VarT<T>&>(p).zero_grad();
    }
}

double FiniteDiffReport::worst() const {
    double w = 0.0;
    for (const Entry& e : entries) w = std::max(w, e.max_rel_err);
    return w;
}

template <typename T>
FiniteDiffReport finite_diff_check(const std::function<VarT<T>()>& f,
                                   const std::vector<std::pair<std::string, VarT<T>>>& params,
                                   double step, double tolerance) {
    auto eval = [&]() -> double {
        NoGradGuard pause;
        return double(f().value()[0]);
    };

    const double probe_a = eval();
    const double probe_b = eval();
    if (probe_a != probe_b) {
        throw NumericError(msg("finite_diff_check: f is not deterministic (", probe_a, " vs ",
                               probe_b, ")"));
    }

    // Analytic pass on a private tape.
    std::vector<TensorT<T>> analytic;
    {
        TapeT<T> tape;
        VarT<T> loss = f();
        for (const auto& [name, p] : params) const_cast<VarT<T>&>(p).zero_grad();
        tape.backward(loss);
        for (const auto& [name, p] : params) analytic.push_back(p.grad());
    }

    FiniteDiffReport report;
    report.tolerance = tolerance;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        TensorT<T>& x = const_cast<VarT<T>&>(params[pi].second).value();
        double worst = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) {
            const T saved = x[i];
            x[i] = T(double(saved) + step);
            const double up = eval();
            x[i] = T(double(saved) - step);
            const double down = eval();
            x[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            const double a = double(analytic[pi][i]);
            const double err = std::abs(a - numeric) /
                               std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, err);
        }
        report.entries.push_back({params[pi].first, worst});
    }
    return report;
}

namespace ops {

namespace {

/// Records an op node when gradients are wanted; otherwise wraps the value
/// as a constant leaf. parents may contain nulls (optional inputs).
template <typename T>
VarT<T> finish_op(TensorT<T> value, std::vector<std::shared_ptr<NodeT<T>>> parents,
                  std::function<void(NodeT<T>&)> backward_fn) {
    bool wants = false;
    for (const auto& p : parents) wants = wants || (p && p->requires_grad);
    if (!TapeT<T>::recording() || !wants) return VarT<T>::leaf(std::move(value), false);
    std::vector<std::shared_ptr<NodeT<T>>> kept;
    for (auto& p : parents)
        if (p) kept.push_back(std::move(p));
    return VarT<T>::from_node(
        TapeT<T>::current()->record(std::move(value), std::move(kept), std::move(backward_fn)));
}

}  // namespace

template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>* bias, std::size_t stride,
               std::size_t padding, kernels::Conv2dAlgo algo) {
    const TensorT<T>* bt = bias && *bias ? &bias->value() : nullptr;
    TensorT<T> y = kernels::conv2d_forward(x.value(), w.value(), bt, stride, padding, algo);
    auto xn = x.node(), wn = w.node();
    auto bn = bias && *bias ? bias->node() : nullptr;
    return finish_op<T>(std::move(y), {xn, wn, bn}, [=](NodeT<T>& self) {
        if (xn->requires_grad) {
            xn->accumulate(kernels::conv2d_backward_input(self.grad, wn->value,
                                                          xn->value.shape(), stride, padding,
                                                          algo));
        }
        if (wn->requires_grad) {
            wn->accumulate(kernels::conv2d_backward_weight(self.grad, xn->value,
                                                           wn->value.shape(), stride, padding,
                                                           algo));
        }
        if (bn && bn->requires_grad) bn->accumulate(kernels::conv2d_backward_bias(self.grad));
    });
}

template <typename T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>* bias) {
    const TensorT<T>* bt = bias && *bias ? &bias->value() : nullptr;
    TensorT<T> y = kernels::linear_forward(x.value(), w.value(), bt);
    auto xn = x.node(), wn = w.node();
    auto bn = bias && *bias ? bias->node() : nullptr;
    return finish_op<T>(std::move(y), {xn, wn, bn}, [=](NodeT<T>& self) {
        if (xn->requires_grad) xn->accumulate(kernels::linear_backward_input(self.grad, wn->value));
        if (wn->requires_grad)
            wn->accumulate(kernels::linear_backward_weight(self.grad, xn->value));
        if (bn && bn->requires_grad) bn->accumulate(kernels::linear_backward_bias(self.grad));
    });
}

template <typename T>
VarT<T> relu(const VarT<T>& x) {
    auto xn = x.node();
    return finish_op<T>(kernels::relu_forward(x.value()), {xn}, [=](NodeT<T>& self) {
        xn->accumulate(kernels::relu_backward(xn->value, self.grad));
    });
}

template <typename T>
VarT<T> max_pool2(const VarT<T>& x) {
    auto xn = x.node();
    const bool rec = TapeT<T>::recording() && xn->requires_grad;
    TensorT<std::int32_t> argmax;
    TensorT<T> y = kernels::maxpool2_forward(x.value(), rec ? &argmax : nullptr);
    return finish_op<T>(std::move(y), {xn},
                        [xn, argmax = std::move(argmax)](NodeT<T>& self) {
                            xn->accumulate(kernels::maxpool2_backward(argmax, self.grad,
                                                                      xn->value.shape()));
                        });
}

template <typename T>
VarT<T> avg_pool_global(const VarT<T>& x) {
    auto xn = x.node();
    const std::size_t h = x.value().dim(2), w = x.value().dim(3);
    return finish_op<T>(kernels::global_avgpool_forward(x.value()), {xn}, [=](NodeT<T>& self) {
        xn->accumulate(kernels::global_avgpool_backward(self.grad, h, w));
    });
}

template <typename T>
VarT<T> batchnorm_train(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta, T eps,
                        T momentum, TensorT<T>& running_mean, TensorT<T>& running_var,
                        bool fuse_relu) {
    TensorT<T> save_mean, save_var;
    TensorT<T> y = kernels::batchnorm_forward_train(x.value(), gamma.value(), beta.value(), eps,
                                                    momentum, running_mean, running_var,
                                                    fuse_relu, save_mean, save_var);
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return finish_op<T>(
        std::move(y), {xn, gn, bn},
        [xn, gn, bn, eps, fuse_relu, save_mean = std::move(save_mean),
         save_var = std::move(save_var)](NodeT<T>& self) {
            TensorT<T> gx, gg, gb;
            kernels::batchnorm_backward<T>(xn->value, gn->value, save_mean, save_var, eps,
                                           self.grad, fuse_relu ? &self.value : nullptr, gx, gg,
                                           gb);
            if (xn->requires_grad) xn->accumulate(std::move(gx));
            if (gn->requires_grad) gn->accumulate(std::move(gg));
            if (bn->requires_grad) bn->accumulate(std::move(gb));
        });
}

template <typename T>
VarT<T> batchnorm_eval(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta,
                       const TensorT<T>& mean, const TensorT<T>& var, T eps, bool fuse_relu) {
    // Frozen stats: no gradient path into mean/var, and none is offered for
    // x/gamma/beta either since eval mode never trains.
    TensorT<T> y = kernels::batchnorm_forward_eval(x.value(), gamma.value(), beta.value(), mean,
                                                   var, eps, fuse_relu);
    return VarT<T>::leaf(std::move(y), false);
}

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b) {
    auto an = a.node(), bn = b.node();
    return finish_op<T>(kernels::add(a.value(), b.value()), {an, bn}, [=](NodeT<T>& self) {
        if (an->requires_grad) an->accumulate(self.grad);
        if (bn->requires_grad) bn->accumulate(self.grad);
    });
}

template <typename T>
VarT<T> scale(const VarT<T>& x, T alpha) {
    auto xn = x.node();
    return finish_op<T>(kernels::scale(x.value(), alpha), {xn}, [=](NodeT<T>& self) {
        xn->accumulate(kernels::scale(self.grad, alpha));
    });
}

template <typename T>
VarT<T> sum(const VarT<T>& x) {
    auto xn = x.node();
    TensorT<T> total({1});
    total[0] = T(kernels::sum(x.value()));
    return finish_op<T>(std::move(total), {xn}, [=](NodeT<T>& self) {
        TensorT<T> g = TensorT<T>::uninitialized(xn->value.shape());
        g.fill(self.grad[0]);
        xn->accumulate(std::move(g));
    });
}

template <typename T>
VarT<T> filter_norms(const VarT<T>& w) {
    auto wn = w.node();
    return finish_op<T>(kernels::filter_norms(w.value()), {wn}, [=](NodeT<T>& self) {
        wn->accumulate(kernels::filter_norms_backward(self.grad, wn->value, self.value));
    });
}

template <typename T>
VarT<T> div_channels(const VarT<T>& w, const VarT<T>& s) {
    auto wn = w.node(), sn = s.node();
    return finish_op<T>(kernels::div_channels(w.value(), s.value()), {wn, sn},
                        [=](NodeT<T>& self) {
                            if (wn->requires_grad)
                                wn->accumulate(kernels::div_channels(self.grad, sn->value));
                            if (sn->requires_grad)
                                sn->accumulate(kernels::div_channels_backward_scale(
                                    self.grad, wn->value, sn->value));
                        });
}

template <typename T>
VarT<T> scale_channels(const VarT<T>& w, const VarT<T>& s) {
    auto wn = w.node(), sn = s.node();
    return finish_op<T>(kernels::scale_channels(w.value(), s.value()), {wn, sn},
                        [=](NodeT<T>& self) {
                            if (wn->requires_grad)
                                wn->accumulate(kernels::scale_channels(self.grad, sn->value));
                            if (sn->requires_grad)
                                sn->accumulate(kernels::scale_channels_backward_scale(self.grad,
                                                                                      wn->value));
                        });
}

template <typename T>
SoftmaxLossT<T> softmax_cross_entropy(const VarT<T>& logits,
                                      const std::vector<std::int32_t>& labels) {
    TensorT<T> probs;
    const double loss = kernels::softmax_cross_entropy_forward(logits.value(), labels, probs);
    TensorT<T> value({1});
    value[0] = T(loss);
    auto ln = logits.node();
    SoftmaxLossT<T> out;
    out.probs = probs;
    out.loss = finish_op<T>(std::move(value), {ln},
                            [ln, probs = std::move(probs), labels](NodeT<T>& self) {
                                ln->accumulate(kernels::softmax_cross_entropy_backward(
                                    probs, labels, self.grad[0]));
                            });
    return out;
}

}  // namespace ops

// ---------------------------------------------------------------------------

#define DIRACNET_INSTANTIATE_AUTOGRAD(T)                                                          \
    template class TapeT<T>;                                                                      \
    template void backward<T>(const VarT<T>&);                                                    \
    template void zero_grads<T>(const std::vector<VarT<T>>&);                                     \
    template FiniteDiffReport finite_diff_check<T>(                                               \
        const std::function<VarT<T>()>&, const std::vector<std::pair<std::string, VarT<T>>>&,    \
        double, double);                                                                          \
    namespace ops {                                                                               \
    template VarT<T> conv2d<T>(const VarT<T>&, const VarT<T>&, const VarT<T>*, std::size_t,      \
                               std::size_t, kernels::Conv2dAlgo);                                 \
    template VarT<T> linear<T>(const VarT<T>&, const VarT<T>&, const VarT<T>*);                  \
    template VarT<T> relu<T>(const VarT<T>&);                                                     \
    template VarT<T> max_pool2<T>(const VarT<T>&);                                                \
    template VarT<T> avg_pool_global<T>(const VarT<T>&);                                          \
    template VarT<T> batchnorm_train<T>(const VarT<T>&, const VarT<T>&, const VarT<T>&, T, T,    \
                                        TensorT<T>&, TensorT<T>&, bool);                          \
    template VarT<T> batchnorm_eval<T>(const VarT<T>&, const VarT<T>&, const VarT<T>&,           \
                                       const TensorT<T>&, const TensorT<T>&, T, bool);            \
    template VarT<T> add<T>(const VarT<T>&, const VarT<T>&);                                      \
    template VarT<T> scale<T>(const VarT<T>&, T);                                                 \
    template VarT<T> sum<T>(const VarT<T>&);                                                      \
    template VarT<T> filter_norms<T>(const VarT<T>&);                                             \
    template VarT<T> div_channels<T>(const VarT<T>&, const VarT<T>&);                             \
    template VarT<T> scale_channels<T>(const VarT<T>&, const VarT<T>&);                           \
    template SoftmaxLossT<T> softmax_cross_entropy<T>(const VarT<T>&,                             \
                                                      const std::vector<std::int32_t>&);          \
    }

DIRACNET_INSTANTIATE_AUTOGRAD(float)
DIRACNET_INSTANTIATE_AUTOGRAD(double)

#undef DIRACNET_INSTANTIATE_AUTOGRAD

}  // namespace diracnet::autograd
