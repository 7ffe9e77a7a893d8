#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diracnet/kernels.hpp"
#include "diracnet/tensor.hpp"

// Reverse-mode automatic differentiation over the tensor kernels.
//
// The graph is built as a dynamic tape: every op appends a node in recording
// order, which is already a topological order, and backward() walks it in
// reverse. Gradients accumulate additively (+=); the training loop owns
// zeroing. A tape and its Variables are confined to one thread; independent
// replicas on different threads never share state.

namespace diracnet::autograd {

template <typename T>
struct NodeT {
    TensorT<T> value;
    TensorT<T> grad;  // empty until a gradient flows in; see accumulate()
    bool requires_grad = false;
    bool leaf = false;
    std::size_t seq = 0;  // recording index on the owning tape
    std::vector<std::shared_ptr<NodeT>> parents;
    // Reads this->grad and pushes contributions into the parents. Intermediate
    // grads are released right after the call; leaf grads persist.
    std::function<void(NodeT&)> backward_fn;

    void accumulate(TensorT<T>&& g) {
        if (grad.numel() == 0) {
            grad = std::move(g);
        } else {
            kernels::axpy(T(1), g, grad);
        }
    }
    void accumulate(const TensorT<T>& g) {
        if (grad.numel() == 0) {
            grad = g;
        } else {
            kernels::axpy(T(1), g, grad);
        }
    }
};

/// Handle to a graph node. Copies share the node.
template <typename T>
class VarT {
  public:
    VarT() = default;

    static VarT leaf(TensorT<T> value, bool requires_grad) {
        VarT v;
        v.node_ = std::make_shared<NodeT<T>>();
        v.node_->value = std::move(value);
        v.node_->requires_grad = requires_grad;
        v.node_->leaf = true;
        return v;
    }
    static VarT from_node(std::shared_ptr<NodeT<T>> n) {
        VarT v;
        v.node_ = std::move(n);
        return v;
    }

    explicit operator bool() const { return bool(node_); }
    const TensorT<T>& value() const { return node_->value; }
    TensorT<T>& value() { return node_->value; }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    /// Materializes a zero gradient on first access.
    TensorT<T>& grad() {
        if (node_->grad.numel() == 0) node_->grad = TensorT<T>(node_->value.shape());
        return node_->grad;
    }
    const TensorT<T>& grad() const { return const_cast<VarT*>(this)->grad(); }
    bool has_grad() const { return node_ && node_->grad.numel() != 0; }
    void zero_grad() { node_->grad = TensorT<T>(node_->value.shape()); }

    std::shared_ptr<NodeT<T>> node() const { return node_; }

  private:
    std::shared_ptr<NodeT<T>> node_;
};

/// Active while constructed; ops computed under it produce constant leaves
/// instead of recording graph nodes.
class NoGradGuard {
  public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
    static bool active();
};

template <typename T>
class TapeT {
  public:
    TapeT();
    ~TapeT();
    TapeT(const TapeT&) = delete;
    TapeT& operator=(const TapeT&) = delete;

    /// Innermost live tape on this thread, or nullptr.
    static TapeT* current();
    /// True when ops should record: a tape is live and no NoGradGuard is.
    static bool recording() { return current() != nullptr && !NoGradGuard::active(); }

    std::shared_ptr<NodeT<T>> record(TensorT<T> value,
                                     std::vector<std::shared_ptr<NodeT<T>>> parents,
                                     std::function<void(NodeT<T>&)> backward_fn);

    /// Seeds d(loss)/d(loss) = 1 and walks the tape in reverse, accumulating
    /// into every reachable Variable that requires gradients.
    void backward(const VarT<T>& loss);

    std::size_t size() const { return nodes_.size(); }
    /// Drops recorded nodes (and with them the saved activations). Leaves
    /// held by the caller survive.
    void clear() { nodes_.clear(); }

  private:
    std::vector<std::shared_ptr<NodeT<T>>> nodes_;
    TapeT* prev_ = nullptr;
};

/// backward() on the innermost tape; error when none is live.
template <typename T>
void backward(const VarT<T>& loss);

template <typename T>
void zero_grads(const std::vector<VarT<T>>& params);

struct FiniteDiffReport {
    struct Entry {
        std::string name;
        double max_rel_err;
    };
    std::vector<Entry> entries;
    double tolerance = 0.0;
    double worst() const;
    bool passed() const { return worst() <= tolerance; }
};

/// Compares analytic gradients of f against central finite differences over
/// every element of every listed parameter. f must be deterministic (run
/// batch norm frozen); this is enforced by evaluating it twice up front.
/// Relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
template <typename T>
FiniteDiffReport finite_diff_check(const std::function<VarT<T>()>& f,
                                   const std::vector<std::pair<std::string, VarT<T>>>& params,
                                   double step, double tolerance);

namespace ops {

template <typename T>
VarT<T> conv2d(const VarT<T>& x, const VarT<T>& w, const VarT<T>* bias, std::size_t stride,
               std::size_t padding, kernels::Conv2dAlgo algo = kernels::Conv2dAlgo::Auto);

template <typename T>
VarT<T> linear(const VarT<T>& x, const VarT<T>& w, const VarT<T>* bias);

template <typename T>
VarT<T> relu(const VarT<T>& x);

template <typename T>
VarT<T> max_pool2(const VarT<T>& x);

template <typename T>
VarT<T> avg_pool_global(const VarT<T>& x);

/// Train-mode batch norm; updates the running stats in place at forward
/// time. fuse_relu clamps the output and masks the backward pass to match.
template <typename T>
VarT<T> batchnorm_train(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta, T eps,
                        T momentum, TensorT<T>& running_mean, TensorT<T>& running_var,
                        bool fuse_relu);

template <typename T>
VarT<T> batchnorm_eval(const VarT<T>& x, const VarT<T>& gamma, const VarT<T>& beta,
                       const TensorT<T>& mean, const TensorT<T>& var, T eps, bool fuse_relu);

template <typename T>
VarT<T> add(const VarT<T>& a, const VarT<T>& b);

template <typename T>
VarT<T> scale(const VarT<T>& x, T alpha);

/// Scalar sum of all elements.
template <typename T>
VarT<T> sum(const VarT<T>& x);

template <typename T>
VarT<T> filter_norms(const VarT<T>& w);

template <typename T>
VarT<T> div_channels(const VarT<T>& w, const VarT<T>& s);

template <typename T>
VarT<T> scale_channels(const VarT<T>& w, const VarT<T>& s);

template <typename T>
struct SoftmaxLossT {
    VarT<T> loss;      // scalar
    TensorT<T> probs;  // [batch, classes], for accuracy reporting
};

template <typename T>
SoftmaxLossT<T> softmax_cross_entropy(const VarT<T>& logits,
                                      const std::vector<std::int32_t>& labels);

}  // namespace ops

using Var = VarT<float>;
using Tape = TapeT<float>;

}  // namespace diracnet::autograd
