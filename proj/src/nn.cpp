#include "diracnet/nn.hpp"

#include <cmath>
#include <cstring>

#include "diracnet/errors.hpp"
#include "diracnet/rng.hpp"

namespace diracnet::nn {

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::Dirac: return "dirac";
        case Variant::Plain: return "plain";
        case Variant::ResnetDiracInit: return "resnet_dirac_init";
    }
    return "?";
}

Variant variant_from_name(const std::string& name) {
    if (name == "dirac") return Variant::Dirac;
    if (name == "plain") return Variant::Plain;
    if (name == "resnet_dirac_init") return Variant::ResnetDiracInit;
    throw ConfigError(msg("unknown network variant '", name,
                          "' (expected dirac, plain or resnet_dirac_init)"));
}

void NetworkSpec::validate() const {
    std::string bad;
    auto flag = [&bad](const std::string& what) {
        if (!bad.empty()) bad += "; ";
        bad += what;
    };
    if (blocks_per_group < 1) flag("blocks_per_group must be >= 1");
    if (width_factor < 1) flag("width_factor must be >= 1");
    if (num_classes < 2) flag("num_classes must be >= 2");
    if (input_channels < 1) flag("input_channels must be >= 1");
    if (init_sigma < 0.0) flag("init_sigma must be >= 0");
    if (!std::isfinite(init_sigma)) flag("init_sigma must be finite");
    if (!bad.empty()) throw ConfigError(msg("invalid network spec: ", bad));
}

// ---------------------------------------------------------------------------
// Layers

namespace {

template <typename T>
autograd::VarT<T> param_leaf(TensorT<T> t) {
    return autograd::VarT<T>::leaf(std::move(t), /*requires_grad=*/true);
}

template <typename T>
double stddev_of(const TensorT<T>& t) {
    const std::size_t n = t.numel();
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += double(t[i]);
    mean /= double(n);
    double ssq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = double(t[i]) - mean;
        ssq += d * d;
    }
    return std::sqrt(ssq / double(n));
}

}  // namespace

template <typename T>
Conv2dLayerT<T>::Conv2dLayerT(TensorT<T> w, TensorT<T> bias, std::size_t stride,
                              std::size_t padding)
    : w_(param_leaf(std::move(w))), bias_(param_leaf(std::move(bias))), stride_(stride),
      padding_(padding) {}

template <typename T>
autograd::VarT<T> Conv2dLayerT<T>::forward(const autograd::VarT<T>& x, bool) {
    return autograd::ops::conv2d(x, w_, &bias_, stride_, padding_);
}

template <typename T>
void Conv2dLayerT<T>::collect_params(std::vector<ParamRefT<T>>& out) {
    out.push_back({this->name_ + ".w", w_, /*decayed=*/true});
    out.push_back({this->name_ + ".bias", bias_, /*decayed=*/false});
}

template <typename T>
void Conv2dLayerT<T>::collect_tensors(std::vector<NamedTensorT<T>>& out) {
    out.emplace_back(this->name_ + ".w", &w_.value());
    out.emplace_back(this->name_ + ".bias", &bias_.value());
}

template <typename T>
std::unique_ptr<LayerT<T>> Conv2dLayerT<T>::clone() const {
    auto c = std::make_unique<Conv2dLayerT<T>>(w_.value(), bias_.value(), stride_, padding_);
    c->set_name(this->name_);
    return c;
}

template <typename T>
DiracConv2dLayerT<T>::DiracConv2dLayerT(TensorT<T> w, TensorT<T> a, TensorT<T> b, TensorT<T> bias,
                                        std::size_t padding)
    : bias_(param_leaf(std::move(bias))), padding_(padding) {
    if (w.dim(0) != w.dim(1)) {
        throw ShapeError(msg("dirac conv needs square channel counts, got ", w.dim(0), "x",
                             w.dim(1)));
    }
    delta_ = autograd::VarT<T>::leaf(dirac::build_dirac_delta<T>(w.dim(0), w.dim(2), w.dim(3)),
                                     /*requires_grad=*/false);
    params_.w = param_leaf(std::move(w));
    params_.a = param_leaf(std::move(a));
    params_.b = param_leaf(std::move(b));
}

template <typename T>
autograd::VarT<T> DiracConv2dLayerT<T>::forward(const autograd::VarT<T>& x, bool) {
    autograd::VarT<T> what = dirac::effective_weight(params_, delta_);
    return autograd::ops::conv2d(x, what, &bias_, /*stride=*/1, padding_);
}

template <typename T>
void DiracConv2dLayerT<T>::collect_params(std::vector<ParamRefT<T>>& out) {
    out.push_back({this->name_ + ".w", params_.w, /*decayed=*/true});
    out.push_back({this->name_ + ".a", params_.a, /*decayed=*/false});
    out.push_back({this->name_ + ".b", params_.b, /*decayed=*/false});
    out.push_back({this->name_ + ".bias", bias_, /*decayed=*/false});
}

template <typename T>
void DiracConv2dLayerT<T>::collect_tensors(std::vector<NamedTensorT<T>>& out) {
    out.emplace_back(this->name_ + ".w", &params_.w.value());
    out.emplace_back(this->name_ + ".a", &params_.a.value());
    out.emplace_back(this->name_ + ".b", &params_.b.value());
    out.emplace_back(this->name_ + ".bias", &bias_.value());
}

template <typename T>
std::unique_ptr<LayerT<T>> DiracConv2dLayerT<T>::clone() const {
    auto c = std::make_unique<DiracConv2dLayerT<T>>(params_.w.value(), params_.a.value(),
                                                    params_.b.value(), bias_.value(), padding_);
    c->set_name(this->name_);
    return c;
}

template <typename T>
BatchNormLayerT<T>::BatchNormLayerT(std::size_t channels, T eps, T momentum, bool fuse_relu)
    : eps_(eps), momentum_(momentum), fuse_relu_(fuse_relu) {
    TensorT<T> g({channels});
    g.fill(T(1));
    gamma_ = param_leaf(std::move(g));
    beta_ = param_leaf(TensorT<T>({channels}));
    running_mean_ = TensorT<T>({channels});
    running_var_ = TensorT<T>({channels});
    running_var_.fill(T(1));
}

template <typename T>
autograd::VarT<T> BatchNormLayerT<T>::forward(const autograd::VarT<T>& x, bool train) {
    if (train) {
        return autograd::ops::batchnorm_train(x, gamma_, beta_, eps_, momentum_, running_mean_,
                                              running_var_, fuse_relu_);
    }
    return autograd::ops::batchnorm_eval(x, gamma_, beta_, running_mean_, running_var_, eps_,
                                         fuse_relu_);
}

template <typename T>
void BatchNormLayerT<T>::collect_params(std::vector<ParamRefT<T>>& out) {
    out.push_back({this->name_ + ".gamma", gamma_, /*decayed=*/false});
    out.push_back({this->name_ + ".beta", beta_, /*decayed=*/false});
}

template <typename T>
void BatchNormLayerT<T>::collect_tensors(std::vector<NamedTensorT<T>>& out) {
    out.emplace_back(this->name_ + ".gamma", &gamma_.value());
    out.emplace_back(this->name_ + ".beta", &beta_.value());
    out.emplace_back(this->name_ + ".running_mean", &running_mean_);
    out.emplace_back(this->name_ + ".running_var", &running_var_);
}

template <typename T>
dirac::BatchNormStatsT<T> BatchNormLayerT<T>::stats() const {
    dirac::BatchNormStatsT<T> s;
    s.gamma = gamma_.value();
    s.beta = beta_.value();
    s.running_mean = running_mean_;
    s.running_var = running_var_;
    s.eps = eps_;
    s.momentum = momentum_;
    return s;
}

template <typename T>
std::unique_ptr<LayerT<T>> BatchNormLayerT<T>::clone() const {
    auto c = std::make_unique<BatchNormLayerT<T>>(gamma_.value().dim(0), eps_, momentum_,
                                                  fuse_relu_);
    c->gamma_.value() = gamma_.value();
    c->beta_.value() = beta_.value();
    c->running_mean_ = running_mean_;
    c->running_var_ = running_var_;
    c->set_name(this->name_);
    return c;
}

template <typename T>
std::unique_ptr<LayerT<T>> ReluLayerT<T>::clone() const {
    auto c = std::make_unique<ReluLayerT<T>>();
    c->set_name(this->name_);
    return c;
}

template <typename T>
std::unique_ptr<LayerT<T>> MaxPool2LayerT<T>::clone() const {
    auto c = std::make_unique<MaxPool2LayerT<T>>();
    c->set_name(this->name_);
    return c;
}

template <typename T>
std::unique_ptr<LayerT<T>> GlobalAvgPoolLayerT<T>::clone() const {
    auto c = std::make_unique<GlobalAvgPoolLayerT<T>>();
    c->set_name(this->name_);
    return c;
}

template <typename T>
LinearLayerT<T>::LinearLayerT(TensorT<T> w, TensorT<T> bias)
    : w_(param_leaf(std::move(w))), bias_(param_leaf(std::move(bias))) {}

template <typename T>
autograd::VarT<T> LinearLayerT<T>::forward(const autograd::VarT<T>& x, bool) {
    return autograd::ops::linear(x, w_, &bias_);
}

template <typename T>
void LinearLayerT<T>::collect_params(std::vector<ParamRefT<T>>& out) {
    out.push_back({this->name_ + ".w", w_, /*decayed=*/true});
    out.push_back({this->name_ + ".bias", bias_, /*decayed=*/false});
}

template <typename T>
void LinearLayerT<T>::collect_tensors(std::vector<NamedTensorT<T>>& out) {
    out.emplace_back(this->name_ + ".w", &w_.value());
    out.emplace_back(this->name_ + ".bias", &bias_.value());
}

template <typename T>
std::unique_ptr<LayerT<T>> LinearLayerT<T>::clone() const {
    auto c = std::make_unique<LinearLayerT<T>>(w_.value(), bias_.value());
    c->set_name(this->name_);
    return c;
}

template <typename T>
ResidualBlockT<T>::ResidualBlockT(std::unique_ptr<Conv2dLayerT<T>> conv1,
                                  std::unique_ptr<BatchNormLayerT<T>> bn1,
                                  std::unique_ptr<Conv2dLayerT<T>> conv2,
                                  std::unique_ptr<BatchNormLayerT<T>> bn2,
                                  std::unique_ptr<Conv2dLayerT<T>> proj,
                                  std::unique_ptr<BatchNormLayerT<T>> proj_bn)
    : conv1_(std::move(conv1)), bn1_(std::move(bn1)), conv2_(std::move(conv2)),
      bn2_(std::move(bn2)), proj_(std::move(proj)), proj_bn_(std::move(proj_bn)) {}

template <typename T>
autograd::VarT<T> ResidualBlockT<T>::forward(const autograd::VarT<T>& x, bool train) {
    auto h = bn1_->forward(conv1_->forward(x, train), train);  // ReLU fused into bn1
    h = bn2_->forward(conv2_->forward(h, train), train);
    autograd::VarT<T> shortcut = x;
    if (proj_) shortcut = proj_bn_->forward(proj_->forward(x, train), train);
    return autograd::ops::relu(autograd::ops::add(h, shortcut));
}

template <typename T>
void ResidualBlockT<T>::collect_params(std::vector<ParamRefT<T>>& out) {
    conv1_->collect_params(out);
    bn1_->collect_params(out);
    conv2_->collect_params(out);
    bn2_->collect_params(out);
    if (proj_) {
        proj_->collect_params(out);
        proj_bn_->collect_params(out);
    }
}

template <typename T>
void ResidualBlockT<T>::collect_tensors(std::vector<NamedTensorT<T>>& out) {
    conv1_->collect_tensors(out);
    bn1_->collect_tensors(out);
    conv2_->collect_tensors(out);
    bn2_->collect_tensors(out);
    if (proj_) {
        proj_->collect_tensors(out);
        proj_bn_->collect_tensors(out);
    }
}

template <typename T>
std::unique_ptr<LayerT<T>> ResidualBlockT<T>::clone() const {
    auto cast_conv = [](std::unique_ptr<LayerT<T>> l) {
        return std::unique_ptr<Conv2dLayerT<T>>(static_cast<Conv2dLayerT<T>*>(l.release()));
    };
    auto cast_bn = [](std::unique_ptr<LayerT<T>> l) {
        return std::unique_ptr<BatchNormLayerT<T>>(static_cast<BatchNormLayerT<T>*>(l.release()));
    };
    auto c = std::make_unique<ResidualBlockT<T>>(
        cast_conv(conv1_->clone()), cast_bn(bn1_->clone()), cast_conv(conv2_->clone()),
        cast_bn(bn2_->clone()), proj_ ? cast_conv(proj_->clone()) : nullptr,
        proj_bn_ ? cast_bn(proj_bn_->clone()) : nullptr);
    c->set_name(this->name_);
    return c;
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
autograd::VarT<T> NetworkT<T>::run(const autograd::VarT<T>& x, std::vector<ActivationStat>* stats,
                                   bool train) {
    const TensorT<T>& in = x.value();
    if (in.rank() != 4) {
        throw ShapeError(msg("forward: expected [B,C,H,W] input, got rank ", in.rank()));
    }
    if (in.dim(1) != spec.input_channels) {
        throw ShapeError(msg("forward: expected ", spec.input_channels, " input channels, got ",
                             in.dim(1)));
    }
    if (in.dim(2) % 4 != 0 || in.dim(3) % 4 != 0) {
        throw ShapeError(msg("forward: spatial dims must be divisible by 4, got ", in.dim(2), "x",
                             in.dim(3)));
    }
    autograd::VarT<T> h = x;
    for (auto& layer : layers) {
        h = layer->forward(h, train);
        if (stats) stats->push_back({layer->name(), stddev_of(h.value())});
    }
    return h;
}

template <typename T>
autograd::VarT<T> NetworkT<T>::forward(const autograd::VarT<T>& x) {
    return run(x, nullptr, training_);
}

template <typename T>
TensorT<T> NetworkT<T>::forward(const TensorT<T>& x) {
    autograd::NoGradGuard guard;
    return run(autograd::VarT<T>::leaf(x, false), nullptr, /*train=*/false).value();
}

template <typename T>
autograd::VarT<T> NetworkT<T>::forward_probed(const autograd::VarT<T>& x,
                                              std::vector<ActivationStat>& stats) {
    stats.clear();
    return run(x, &stats, training_);
}

template <typename T>
std::vector<ParamRefT<T>> NetworkT<T>::parameters() {
    std::vector<ParamRefT<T>> out;
    for (auto& layer : layers) layer->collect_params(out);
    return out;
}

template <typename T>
std::vector<NamedTensorT<T>> NetworkT<T>::named_tensors() {
    std::vector<NamedTensorT<T>> out;
    for (auto& layer : layers) layer->collect_tensors(out);
    return out;
}

template <typename T>
std::size_t NetworkT<T>::parameter_count() {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p.var.value().numel();
    return n;
}

template <typename T>
void NetworkT<T>::check_chain() const {
    std::size_t current = spec.input_channels;
    for (const auto& layer : layers) {
        const std::size_t in = layer->in_channels();
        if (in != 0 && in != current) {
            throw ConfigError(msg("channel chain broken at ", layer->name(), ": expects ", in,
                                  " channels but receives ", current));
        }
        if (layer->out_channels() != 0) current = layer->out_channels();
    }
}

template <typename T>
NetworkT<T> NetworkT<T>::clone() const {
    NetworkT<T> out;
    out.spec = spec;
    out.folded = folded;
    out.training_ = training_;
    for (const auto& layer : layers) out.layers.push_back(layer->clone());
    return out;
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

/// Fan-in scaled normal: N(0, sqrt(2 / fan_in)), the ReLU-aware convention.
template <typename T>
TensorT<T> msra_normal(const Shape& shape, Rng& rng) {
    std::size_t fan_in = 1;
    for (std::size_t d = 1; d < shape.size(); ++d) fan_in *= shape[d];
    TensorT<T> t = TensorT<T>::uninitialized(shape);
    fill_normal(t, rng, 0.0, std::sqrt(2.0 / double(fan_in)));
    return t;
}

template <typename T>
TensorT<T> plain_normal(const Shape& shape, Rng& rng, double stddev) {
    TensorT<T> t(shape);
    if (stddev > 0.0) fill_normal(t, rng, 0.0, stddev);
    return t;
}

/// Rows of the flattened [out, fan_in] matrix made orthonormal by modified
/// Gram-Schmidt over N(0,1) draws; needs out <= fan_in, which every conv
/// here satisfies.
template <typename T>
TensorT<T> orthogonal_rows(const Shape& shape, Rng& rng) {
    std::size_t fan = 1;
    for (std::size_t d = 1; d < shape.size(); ++d) fan *= shape[d];
    const std::size_t m = shape[0];
    if (m > fan) {
        throw ConfigError(msg("orthogonal init needs out <= fan_in, got ", m, " > ", fan));
    }
    std::vector<std::vector<double>> rows(m, std::vector<double>(fan));
    for (auto& row : rows)
        for (double& v : row) v = rng.normal();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < i; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < fan; ++c) dot += rows[i][c] * rows[j][c];
            for (std::size_t c = 0; c < fan; ++c) rows[i][c] -= dot * rows[j][c];
        }
        double norm = 0.0;
        for (double v : rows[i]) norm += v * v;
        norm = std::sqrt(norm);
        for (double& v : rows[i]) v /= norm;
    }
    TensorT<T> t = TensorT<T>::uninitialized(shape);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < fan; ++c) t[i * fan + c] = T(rows[i][c]);
    return t;
}

template <typename T>
std::unique_ptr<Conv2dLayerT<T>> make_conv(const std::string& name, TensorT<T> w,
                                           std::size_t stride, std::size_t padding) {
    TensorT<T> bias({w.dim(0)});
    auto layer = std::make_unique<Conv2dLayerT<T>>(std::move(w), std::move(bias), stride, padding);
    layer->set_name(name);
    return layer;
}

template <typename T>
std::unique_ptr<BatchNormLayerT<T>> make_bn(const std::string& name, std::size_t channels,
                                            bool fuse_relu) {
    auto layer = std::make_unique<BatchNormLayerT<T>>(channels, T(1e-5), T(0.1), fuse_relu);
    layer->set_name(name);
    return layer;
}

template <typename T>
std::unique_ptr<DiracConv2dLayerT<T>> make_dirac(const NetworkSpec& spec, const std::string& name,
                                                 std::size_t channels, Rng& rng) {
    const Shape shape{channels, channels, 3, 3};
    TensorT<T> w = spec.orthogonal_init ? orthogonal_rows<T>(shape, rng)
                                        : plain_normal<T>(shape, rng, 1.0);
    TensorT<T> a({channels});
    a.fill(T(1));
    TensorT<T> b({channels});
    b.fill(T(0.1));
    TensorT<T> bias({channels});
    auto layer = std::make_unique<DiracConv2dLayerT<T>>(std::move(w), std::move(a), std::move(b),
                                                        std::move(bias), /*padding=*/1);
    layer->set_name(name);
    return layer;
}

template <typename T>
std::unique_ptr<LinearLayerT<T>> make_linear(const std::string& name, TensorT<T> w) {
    TensorT<T> bias({w.dim(0)});
    auto layer = std::make_unique<LinearLayerT<T>>(std::move(w), std::move(bias));
    layer->set_name(name);
    return layer;
}

template <typename T>
std::unique_ptr<LayerT<T>> make_named(std::unique_ptr<LayerT<T>> layer, const std::string& name) {
    layer->set_name(name);
    return layer;
}

/// One fresh Rng per tensor, so adding or removing a layer never shifts the
/// draws of the others.
struct SeedStream {
    std::uint64_t seed;
    std::uint64_t next = 0;
    Rng fresh() { return Rng(derive_seed(seed, ++next)); }
};

}  // namespace

template <typename T>
NetworkT<T> build_diracnet(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    NetworkT<T> net;
    net.spec = spec;
    SeedStream stream{seed};
    const std::size_t N = spec.blocks_per_group;
    const std::size_t k = spec.width_factor;

    std::size_t channels = 16;
    {
        Rng rng = stream.fresh();
        net.layers.push_back(make_conv<T>(
            "conv1", msra_normal<T>({channels, spec.input_channels, 3, 3}, rng), 1, 1));
        net.layers.push_back(make_bn<T>("conv1.bn", channels, /*fuse_relu=*/true));
    }
    const std::size_t widths[3] = {16 * k, 32 * k, 64 * k};
    for (std::size_t g = 0; g < 3; ++g) {
        const std::string prefix = msg("group", g + 1, ".");
        {
            // Width changes here, so this one conv stays plainly parameterized.
            Rng rng = stream.fresh();
            net.layers.push_back(make_conv<T>(
                prefix + "conv1", msra_normal<T>({widths[g], channels, 3, 3}, rng), 1, 1));
            net.layers.push_back(make_bn<T>(prefix + "conv1.bn", widths[g], true));
            channels = widths[g];
        }
        for (std::size_t j = 2; j <= 2 * N; ++j) {
            Rng rng = stream.fresh();
            const std::string name = msg(prefix, "dirac", j);
            net.layers.push_back(make_dirac<T>(spec, name, channels, rng));
            net.layers.push_back(make_bn<T>(name + ".bn", channels, true));
        }
        if (g < 2) {
            net.layers.push_back(
                make_named<T>(std::make_unique<MaxPool2LayerT<T>>(), msg("pool", g + 1)));
        }
    }
    net.layers.push_back(make_named<T>(std::make_unique<GlobalAvgPoolLayerT<T>>(), "avgpool"));
    {
        Rng rng = stream.fresh();
        net.layers.push_back(
            make_linear<T>("fc", msra_normal<T>({spec.num_classes, channels}, rng)));
    }
    net.check_chain();
    return net;
}

template <typename T>
NetworkT<T> build_plainnet(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    NetworkT<T> net;
    net.spec = spec;
    SeedStream stream{seed};
    const std::size_t N = spec.blocks_per_group;
    const std::size_t k = spec.width_factor;

    std::size_t channels = 16;
    {
        Rng rng = stream.fresh();
        net.layers.push_back(make_conv<T>(
            "conv1", msra_normal<T>({channels, spec.input_channels, 3, 3}, rng), 1, 1));
        net.layers.push_back(make_bn<T>("conv1.bn", channels, true));
    }
    const std::size_t widths[3] = {16 * k, 32 * k, 64 * k};
    for (std::size_t g = 0; g < 3; ++g) {
        const std::string prefix = msg("group", g + 1, ".");
        for (std::size_t j = 1; j <= 2 * N; ++j) {
            Rng rng = stream.fresh();
            const std::size_t in = (j == 1) ? channels : widths[g];
            const std::string name = msg(prefix, "conv", j);
            net.layers.push_back(
                make_conv<T>(name, msra_normal<T>({widths[g], in, 3, 3}, rng), 1, 1));
            net.layers.push_back(make_bn<T>(name + ".bn", widths[g], true));
        }
        channels = widths[g];
        if (g < 2) {
            net.layers.push_back(
                make_named<T>(std::make_unique<MaxPool2LayerT<T>>(), msg("pool", g + 1)));
        }
    }
    net.layers.push_back(make_named<T>(std::make_unique<GlobalAvgPoolLayerT<T>>(), "avgpool"));
    {
        Rng rng = stream.fresh();
        net.layers.push_back(
            make_linear<T>("fc", msra_normal<T>({spec.num_classes, channels}, rng)));
    }
    net.check_chain();
    return net;
}

namespace {

/// N(0, sigma) draw with the identity kernel added on top when the shape
/// admits one (square channel counts, stride 1). sigma = 0 leaves exactly
/// the identity, which is handy for tests.
template <typename T>
TensorT<T> dirac_init_weight(const Shape& shape, std::size_t stride, double sigma, Rng& rng) {
    TensorT<T> w = plain_normal<T>(shape, rng, sigma);
    if (shape[0] == shape[1] && stride == 1) {
        // Serial: initialization must not depend on the thread count.
        TensorT<T> delta = dirac::build_dirac_delta<T>(shape[0], shape[2], shape[3]);
        for (std::size_t i = 0; i < w.numel(); ++i) w[i] += delta[i];
    }
    return w;
}

}  // namespace

template <typename T>
NetworkT<T> build_resnet_dirac_init(const NetworkSpec& spec, std::uint64_t seed) {
    spec.validate();
    NetworkT<T> net;
    net.spec = spec;
    SeedStream stream{seed};
    const std::size_t N = spec.blocks_per_group;
    const std::size_t k = spec.width_factor;
    const double sigma = spec.init_sigma;

    std::size_t channels = 16;
    {
        Rng rng = stream.fresh();
        TensorT<T> w = plain_normal<T>({channels, spec.input_channels, 3, 3}, rng, sigma);
        net.layers.push_back(make_conv<T>("conv1", std::move(w), 1, 1));
        net.layers.push_back(make_bn<T>("conv1.bn", channels, true));
    }
    const std::size_t widths[3] = {16 * k, 32 * k, 64 * k};
    for (std::size_t g = 0; g < 3; ++g) {
        for (std::size_t b = 1; b <= N; ++b) {
            const std::string name = msg("group", g + 1, ".block", b);
            // Spatial downsampling lives in the first block of groups 2 and
            // 3, replacing the pooling layers of the non-residual variants.
            const std::size_t stride = (g > 0 && b == 1) ? 2 : 1;
            const std::size_t in = (b == 1) ? channels : widths[g];

            Rng r1 = stream.fresh();
            auto conv1 = make_conv<T>(name + ".conv1",
                                      dirac_init_weight<T>({widths[g], in, 3, 3}, stride, sigma, r1),
                                      stride, 1);
            auto bn1 = make_bn<T>(name + ".bn1", widths[g], /*fuse_relu=*/true);
            Rng r2 = stream.fresh();
            auto conv2 = make_conv<T>(name + ".conv2",
                                      dirac_init_weight<T>({widths[g], widths[g], 3, 3}, 1, sigma, r2),
                                      1, 1);
            auto bn2 = make_bn<T>(name + ".bn2", widths[g], /*fuse_relu=*/false);

            std::unique_ptr<Conv2dLayerT<T>> proj;
            std::unique_ptr<BatchNormLayerT<T>> proj_bn;
            if (stride != 1 || in != widths[g]) {
                Rng rp = stream.fresh();
                proj = make_conv<T>(name + ".proj",
                                    plain_normal<T>({widths[g], in, 1, 1}, rp, sigma), stride, 0);
                proj_bn = make_bn<T>(name + ".proj.bn", widths[g], false);
            }
            auto block = std::make_unique<ResidualBlockT<T>>(
                std::move(conv1), std::move(bn1), std::move(conv2), std::move(bn2),
                std::move(proj), std::move(proj_bn));
            block->set_name(name);
            net.layers.push_back(std::move(block));
        }
        channels = widths[g];
    }
    net.layers.push_back(make_named<T>(std::make_unique<GlobalAvgPoolLayerT<T>>(), "avgpool"));
    {
        Rng rng = stream.fresh();
        TensorT<T> w = plain_normal<T>({spec.num_classes, channels}, rng, sigma);
        net.layers.push_back(make_linear<T>("fc", std::move(w)));
    }
    net.check_chain();
    return net;
}

template <typename T>
NetworkT<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
    switch (spec.variant) {
        case Variant::Dirac: return build_diracnet<T>(spec, seed);
        case Variant::Plain: return build_plainnet<T>(spec, seed);
        case Variant::ResnetDiracInit: return build_resnet_dirac_init<T>(spec, seed);
    }
    throw ConfigError("build_network: unknown variant");
}

// ---------------------------------------------------------------------------
// Folding

template <typename T>
NetworkT<T> fold_network(const NetworkT<T>& net) {
    if (net.folded) throw ConfigError("fold_network: network is already folded");
    NetworkT<T> out;
    out.spec = net.spec;
    out.folded = true;
    out.eval();

    const auto& layers = net.layers;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerT<T>* layer = layers[i].get();
        const std::string kind = layer->kind();
        if (kind == "conv" || kind == "dirac_conv") {
            if (i + 1 >= layers.size() ||
                std::string(layers[i + 1]->kind()) != "batchnorm") {
                throw ConfigError(msg("fold_network: ", layer->name(),
                                      " is not followed by batch norm"));
            }
            const auto* bn = static_cast<const BatchNormLayerT<T>*>(layers[i + 1].get());
            TensorT<T> w;
            TensorT<T> bias;
            std::size_t stride = 1, padding = 0;
            if (kind == "conv") {
                const auto* conv = static_cast<const Conv2dLayerT<T>*>(layer);
                w = conv->weight().value();
                bias = conv->bias().value();
                stride = conv->stride();
                padding = conv->padding();
            } else {
                const auto* conv = static_cast<const DiracConv2dLayerT<T>*>(layer);
                w = conv->folded_weight();
                bias = conv->bias().value();
                padding = conv->padding();
            }
            dirac::FoldedConvT<T> folded = dirac::fold_batchnorm(w, &bias, bn->stats());
            auto fused = std::make_unique<Conv2dLayerT<T>>(std::move(folded.w),
                                                           std::move(folded.bias), stride,
                                                           padding);
            fused->set_name(layer->name());
            out.layers.push_back(std::move(fused));
            if (bn->fuse_relu()) {
                out.layers.push_back(
                    make_named<T>(std::make_unique<ReluLayerT<T>>(), bn->name() + ".relu"));
            }
            ++i;  // the batch norm is consumed
        } else if (kind == "relu" || kind == "max_pool2" || kind == "avg_pool_global" ||
                   kind == "linear") {
            out.layers.push_back(layer->clone());
        } else {
            throw ConfigError(msg("fold_network: no fold rule for ", kind, " layer '",
                                  layer->name(), "'"));
        }
    }
    out.check_chain();
    return out;
}

#define DIRACNET_INSTANTIATE_NN(T)                                                              \
    template struct ParamRefT<T>;                                                               \
    template class Conv2dLayerT<T>;                                                             \
    template class DiracConv2dLayerT<T>;                                                        \
    template class BatchNormLayerT<T>;                                                          \
    template class ReluLayerT<T>;                                                               \
    template class MaxPool2LayerT<T>;                                                           \
    template class GlobalAvgPoolLayerT<T>;                                                      \
    template class LinearLayerT<T>;                                                             \
    template class ResidualBlockT<T>;                                                           \
    template class NetworkT<T>;                                                                 \
    template NetworkT<T> build_diracnet<T>(const NetworkSpec&, std::uint64_t);                  \
    template NetworkT<T> build_plainnet<T>(const NetworkSpec&, std::uint64_t);                  \
    template NetworkT<T> build_resnet_dirac_init<T>(const NetworkSpec&, std::uint64_t);        \
    template NetworkT<T> build_network<T>(const NetworkSpec&, std::uint64_t);                   \
    template NetworkT<T> fold_network<T>(const NetworkT<T>&);

DIRACNET_INSTANTIATE_NN(float)
DIRACNET_INSTANTIATE_NN(double)

}  // namespace diracnet::nn
