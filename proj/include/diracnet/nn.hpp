#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diracnet/autograd.hpp"
#include "diracnet/dirac.hpp"
#include "diracnet/tensor.hpp"

// Layer objects and model builders. Three variants share one skeleton:
//
//   conv1 [3x3, 3->16] -> group1 (16k) -> pool -> group2 (32k) -> pool
//     -> group3 (64k) -> global avg pool -> linear classifier
//
// Inside a group the first conv changes width (plain, since the Dirac
// parameterization needs square channel counts) and the remaining 2N-1 are
// Dirac-parameterized; the residual variant replaces groups with basic
// blocks. Every conv is followed by batch norm and ReLU.

namespace diracnet::nn {

enum class Variant { Dirac, Plain, ResnetDiracInit };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct NetworkSpec {
    std::size_t blocks_per_group = 1;  // N; each group holds 2N conv layers
    std::size_t width_factor = 1;      // k; group widths 16k, 32k, 64k
    std::size_t num_classes = 10;
    std::size_t input_channels = 3;
    Variant variant = Variant::Dirac;
    double init_sigma = 0.0;      // resnet_dirac_init only: W ~ N(0, sigma^2)
    bool orthogonal_init = false; // Dirac W: orthogonal rows instead of N(0,1)

    /// Depth label d = 6N + 4, matching the usual naming so that e.g.
    /// N=4 reads as a -28 network. Metadata only, never used for logic.
    std::size_t depth_label() const { return 6 * blocks_per_group + 4; }

    /// Throws ConfigError listing every invalid field at once.
    void validate() const;
};

template <typename T>
struct ParamRefT {
    std::string name;
    autograd::VarT<T> var;
    bool decayed;  // false for a, b, gamma, beta and biases
};

/// Name plus a pointer into the live network, covering parameters and
/// batch-norm running stats; this is the serialization surface.
template <typename T>
using NamedTensorT = std::pair<std::string, TensorT<T>*>;

template <typename T>
class LayerT {
  public:
    virtual ~LayerT() = default;
    virtual autograd::VarT<T> forward(const autograd::VarT<T>& x, bool train) = 0;
    virtual void collect_params(std::vector<ParamRefT<T>>& out) = 0;
    virtual void collect_tensors(std::vector<NamedTensorT<T>>& out) = 0;
    /// 0 means "any" (pooling, ReLU); used by the build-time chain check.
    virtual std::size_t in_channels() const { return 0; }
    virtual std::size_t out_channels() const { return 0; }
    virtual const char* kind() const = 0;
    virtual std::unique_ptr<LayerT<T>> clone() const = 0;

    const std::string& name() const { return name_; }
    void set_name(std::string n) { name_ = std::move(n); }

  protected:
    std::string name_;
};

template <typename T>
class Conv2dLayerT final : public LayerT<T> {
  public:
    Conv2dLayerT(TensorT<T> w, TensorT<T> bias, std::size_t stride, std::size_t padding);
    autograd::VarT<T> forward(const autograd::VarT<T>& x, bool train) override;
    void collect_params(std::vector<ParamRefT<T>>& out) override;
    void collect_tensors(std::vector<NamedTensorT<T>>& out) override;
    std::size_t in_channels() const override { return w_.value().dim(1); }
    std::size_t out_channels() const override { return w_.value().dim(0); }
    const char* kind() const override { return "conv"; }
    std::unique_ptr<LayerT<T>> clone() const override;

    autograd::VarT<T>& weight() { return w_; }
    autograd::VarT<T>& bias() { return bias_; }
    const autograd::VarT<T>& weight() const { return w_; }
    const autograd::VarT<T>& bias() const { return bias_; }
    std::size_t stride() const { return stride_; }
    std::size_t padding() const { return padding_; }

  private:
    autograd::VarT<T> w_;
    autograd::VarT<T> bias_;
    std::size_t stride_;
    std::size_t padding_;
};

template <typename T>
class DiracConv2dLayerT final : public LayerT<T> {
  public:
    DiracConv2dLayerT(TensorT<T> w, TensorT<T> a, TensorT<T> b, TensorT<T> bias,
                      std::size_t padding);
    autograd::VarT<T> forward(const autograd::VarT<T>& x, bool train) override;
    void collect_params(std::vector<ParamRefT<T>>& out) override;
    void collect_tensors(std::vector<NamedTensorT<T>>& out) override;
    std::size_t in_channels() const override { return params_.w.value().dim(1); }
    std::size_t out_channels() const override { return params_.w.value().dim(0); }
    const char* kind() const override { return "dirac_conv"; }
    std::unique_ptr<LayerT<T>> clone() const override;

    dirac::DiracConvParamsT<T>& params() { return params_; }
    autograd::VarT<T>& bias() { return bias_; }
    const dirac::DiracConvParamsT<T>& params() const { return params_; }
    const autograd::VarT<T>& bias() const { return bias_; }
    std::size_t padding() const { return padding_; }
    /// Concrete folded weight, identical bits to the live forward path.
    TensorT<T> folded_weight() const { return dirac::fold_dirac(params_); }

  private:
    dirac::DiracConvParamsT<T> params_;
    autograd::VarT<T> bias_;
    autograd::VarT<T> delta_;  // constant identity kernel, built once
    std::size_t padding_;
};

template <typename T>
class BatchNormLayerT final : public LayerT<T> {
  public:
    BatchNormLayerT(std::size_t channels, T eps, T momentum, bool fuse_relu);
    autograd::VarT<T> forward(const autograd::VarT<T>& x, bool train) override;
    void collect_params(std::vector<ParamRefT<T>>& out) override;
    void collect_tensors(std::vector<NamedTensorT<T>>& out) override;
    std::size_t in_channels() const override { return gamma_.value().dim(0); }
    std::size_t out_channels() const override { return gamma_.value().dim(0); }
    const char* kind() const override { return "batchnorm"; }
    std::unique_ptr<LayerT<T>> clone() const override;

    autograd::VarT<T>& gamma() { return gamma_; }
    autograd::VarT<T>& beta() { return beta_; }
    TensorT<T>& running_mean() { return running_mean_; }
    TensorT<T>& running_var() { return running_var_; }
    T eps() const { return eps_; }
    T momentum() const { return momentum_; }
    bool fuse_relu() const { return fuse_relu_; }
    dirac::BatchNormStatsT<T> stats() const;

  private:
    autograd::VarT<T> gamma_;
    autograd::VarT<T> beta_;
    TensorT<T> running_mean_;
    TensorT<T> running_var_;
    T eps_;
    T momentum_;
    bool fuse_relu_;
};

template <typename T>
class ReluLayerT final : public LayerT<T> {
  public:
    autograd::VarT<T> forward(const autograd::VarT<T>& x, bool) override {
        return autograd::ops::relu(x);
    }
    void collect_params(std::vector<ParamRefT<T>>&) override {}
    void collect_tensors(std::vector<NamedTensorT<T>>&) override {}
    const char* kind() const override { return "relu"; }
    std::unique_ptr<LayerT<T>> clone() const override;
};

template <typename T>
class MaxPool2LayerT final : public LayerT<T> {
  public:
    autograd::VarT<T> forward(const autograd::VarT<T>& x, bool) override {
        return autograd::ops::max_pool2(x);
    }
    void collect_params(std::vector<ParamRefT<T>>&) override {}
    void collect_tensors(std::vector<NamedTensorT<T>>&) override {}
    const char* kind() const override { return "max_pool2"; }
    std::unique_ptr<LayerT<T>> clone() const override;
};

template <typename T>
class GlobalAvgPoolLayerT final : public LayerT<T> {
  public:
    autograd::VarT<T> forward(const autograd::VarT<T>& x, bool) override {
        return autograd::ops::avg_pool_global(x);
    }
    void collect_params(std::vector<ParamRefT<T>>&) override {}
    void collect_tensors(std::vector<NamedTensorT<T>>&) override {}
    const char* kind() const override { return "avg_pool_global"; }
    std::unique_ptr<LayerT<T>> clone() const override;
};

template <typename T>
class LinearLayerT final : public LayerT<T> {
  public:
    LinearLayerT(TensorT<T> w, TensorT<T> bias);
    autograd::VarT<T> forward(const autograd::VarT<T>& x, bool) override;
    void collect_params(std::vector<ParamRefT<T>>& out) override;
    void collect_tensors(std::vector<NamedTensorT<T>>& out) override;
    std::size_t in_channels() const override { return w_.value().dim(1); }
    std::size_t out_channels() const override { return w_.value().dim(0); }
    const char* kind() const override { return "linear"; }
    std::unique_ptr<LayerT<T>> clone() const override;

    autograd::VarT<T>& weight() { return w_; }
    autograd::VarT<T>& bias() { return bias_; }

  private:
    autograd::VarT<T> w_;
    autograd::VarT<T> bias_;
};

/// Basic residual block: conv-BN-ReLU-conv-BN, added to the (possibly
/// projected) input, then ReLU. Weights are stored plainly; the Dirac-init
/// variant bakes I + W into them at build time.
template <typename T>
class ResidualBlockT final : public LayerT<T> {
  public:
    ResidualBlockT(std::unique_ptr<Conv2dLayerT<T>> conv1,
                   std::unique_ptr<BatchNormLayerT<T>> bn1,
                   std::unique_ptr<Conv2dLayerT<T>> conv2,
                   std::unique_ptr<BatchNormLayerT<T>> bn2,
                   std::unique_ptr<Conv2dLayerT<T>> proj,  // null for identity shortcut
                   std::unique_ptr<BatchNormLayerT<T>> proj_bn);
    autograd::VarT<T> forward(const autograd::VarT<T>& x, bool train) override;
    void collect_params(std::vector<ParamRefT<T>>& out) override;
    void collect_tensors(std::vector<NamedTensorT<T>>& out) override;
    std::size_t in_channels() const override { return conv1_->in_channels(); }
    std::size_t out_channels() const override { return conv2_->out_channels(); }
    const char* kind() const override { return "residual_block"; }
    std::unique_ptr<LayerT<T>> clone() const override;

  private:
    std::unique_ptr<Conv2dLayerT<T>> conv1_;
    std::unique_ptr<BatchNormLayerT<T>> bn1_;
    std::unique_ptr<Conv2dLayerT<T>> conv2_;
    std::unique_ptr<BatchNormLayerT<T>> bn2_;
    std::unique_ptr<Conv2dLayerT<T>> proj_;
    std::unique_ptr<BatchNormLayerT<T>> proj_bn_;
};

template <typename T>
class NetworkT {
  public:
    NetworkSpec spec;
    bool folded = false;
    std::vector<std::unique_ptr<LayerT<T>>> layers;

    void train() { training_ = true; }
    void eval() { training_ = false; }
    bool is_training() const { return training_; }

    /// Runs the layer chain. Input must be [B, input_channels, H, W] with
    /// H and W divisible by 4 (two spatial halvings).
    autograd::VarT<T> forward(const autograd::VarT<T>& x);
    TensorT<T> forward(const TensorT<T>& x);  // eval convenience, no graph

    struct ActivationStat {
        std::string layer;
        double stddev;
    };
    /// forward() that also reports the stddev of each layer's output.
    autograd::VarT<T> forward_probed(const autograd::VarT<T>& x,
                                     std::vector<ActivationStat>& stats);

    std::vector<ParamRefT<T>> parameters();
    std::vector<NamedTensorT<T>> named_tensors();
    std::size_t parameter_count();

    /// Build-time consistency check: consecutive channel counts must chain.
    void check_chain() const;

    NetworkT clone() const;

  private:
    autograd::VarT<T> run(const autograd::VarT<T>& x, std::vector<ActivationStat>* stats,
                          bool train);
    bool training_ = true;
};

template <typename T = float>
NetworkT<T> build_diracnet(const NetworkSpec& spec, std::uint64_t seed);
template <typename T = float>
NetworkT<T> build_plainnet(const NetworkSpec& spec, std::uint64_t seed);
template <typename T = float>
NetworkT<T> build_resnet_dirac_init(const NetworkSpec& spec, std::uint64_t seed);

/// Dispatches on spec.variant.
template <typename T = float>
NetworkT<T> build_network(const NetworkSpec& spec, std::uint64_t seed);

/// Deep-copies an eval-mode network into a plain chain of conv(+bias)-ReLU,
/// pooling and linear layers: Dirac parameterization and batch norm are
/// folded into the conv weights. The original is never mutated. Layers with
/// no fold rule (residual blocks) raise ConfigError naming the layer.
template <typename T>
NetworkT<T> fold_network(const NetworkT<T>& net);

using Network = NetworkT<float>;

}  // namespace diracnet::nn
