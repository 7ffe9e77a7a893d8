#include "diracnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <cstdio>
#include <deque>
#include <fstream>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <thread>

#include "diracnet/autograd.hpp"
#include "diracnet/errors.hpp"
#include "diracnet/kernels.hpp"
#include "diracnet/rng.hpp"

namespace diracnet::train {

void OptimConfig::validate() const {
    std::string bad;
    auto flag = [&bad](const std::string& what) {
        if (!bad.empty()) bad += "; ";
        bad += what;
    };
    if (!(lr > 0.0) || !std::isfinite(lr)) flag("lr must be positive and finite");
    if (!(momentum >= 0.0 && momentum < 1.0)) flag("momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) flag("weight_decay must be >= 0");
    if (epochs < 1) flag("epochs must be >= 1");
    if (batch_size < 2) flag("batch_size must be >= 2 (train-mode batch norm)");
    for (std::size_t i = 0; i < schedule.size(); ++i) {
        if (!(schedule[i].second > 0.0)) flag(msg("schedule multiplier ", i, " must be positive"));
        if (i > 0 && schedule[i].first <= schedule[i - 1].first) {
            flag("schedule epochs must be strictly increasing");
            break;
        }
    }
    if (!bad.empty()) throw ConfigError(msg("invalid optimizer config: ", bad));
}

double OptimConfig::lr_at(std::size_t epoch) const {
    double v = lr;
    for (const auto& [at, mult] : schedule) {
        if (epoch >= at) v *= mult;
    }
    return v;
}

// ---------------------------------------------------------------------------
// SGD

template <typename T>
SgdT<T>::SgdT(std::vector<nn::ParamRefT<T>> params, T momentum, T weight_decay, bool nesterov)
    : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay),
      nesterov_(nesterov) {
    velocity_.reserve(params_.size());
    for (const auto& p : params_) velocity_.emplace_back(p.var.value().shape());
}

template <typename T>
void SgdT<T>::step(T lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto& p = params_[i];
        const TensorT<T>& g = p.var.grad();  // materializes zeros if untouched
        const std::string label = msg("sgd: gradient of ", p.name);
        ensure_finite(g, label.c_str());
        const T wd = p.decayed ? weight_decay_ : T(0);
        TensorT<T>& value = p.var.value();
        TensorT<T>& v = velocity_[i];
        if (!nesterov_) {
            kernels::sgd_update(value, g, v, lr, momentum_, wd);
        } else {
            for (std::size_t j = 0; j < value.numel(); ++j) {
                const T gd = g[j] + wd * value[j];
                v[j] = momentum_ * v[j] + gd;
                value[j] -= lr * (gd + momentum_ * v[j]);
            }
        }
        p.var.zero_grad();
    }
}

template <typename T>
void SgdT<T>::zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
}

template <typename T>
std::vector<std::pair<std::string, TensorT<T>*>> SgdT<T>::state() {
    std::vector<std::pair<std::string, TensorT<T>*>> out;
    out.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.emplace_back(params_[i].name + ".velocity", &velocity_[i]);
    }
    return out;
}

template class SgdT<float>;
template class SgdT<double>;

// ---------------------------------------------------------------------------
// Batch assembly

namespace {

struct Batch {
    TensorT<float> images;
    std::vector<std::int32_t> labels;
};

Batch assemble_batch(const data::Dataset& ds, const std::vector<std::size_t>* order,
                     std::size_t start, std::size_t count, bool do_augment,
                     std::uint64_t aug_seed) {
    const std::size_t stride = ds.images.dim(1) * ds.images.dim(2) * ds.images.dim(3);
    Batch b;
    b.images = TensorT<float>::uninitialized(
        {count, ds.images.dim(1), ds.images.dim(2), ds.images.dim(3)});
    b.labels.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t src = order ? (*order)[start + i] : start + i;
        std::copy_n(&ds.images[src * stride], stride, &b.images[i * stride]);
        b.labels[i] = ds.labels[src];
    }
    if (do_augment) b.images = data::augment(b.images, aug_seed);
    data::normalize(b.images, ds.norm);
    return b;
}

/// Assembles batches in index order, optionally on a worker thread ahead of
/// the consumer. At most `depth` finished batches wait in the FIFO queue;
/// batch content is a pure function of the batch index, so prefetching can
/// never change what the training loop sees.
class BatchPipeline {
  public:
    BatchPipeline(const data::Dataset& ds, const std::vector<std::size_t>& order,
                  std::size_t batch_size, bool do_augment, std::uint64_t aug_root,
                  std::size_t depth)
        : ds_(ds), order_(order), batch_size_(batch_size), do_augment_(do_augment),
          aug_root_(aug_root), depth_(depth) {
        for (std::size_t start = 0; start < order.size(); start += batch_size) {
            const std::size_t count = std::min(batch_size, order.size() - start);
            if (count < 2) break;  // train-mode batch norm cannot use it
            starts_.push_back(start);
        }
        if (depth_ > 0) worker_ = std::thread([this] { produce(); });
    }

    BatchPipeline(const BatchPipeline&) = delete;

    ~BatchPipeline() {
        {
            std::lock_guard<std::mutex> lock(m_);
            aborted_ = true;
        }
        space_.notify_all();
        if (worker_.joinable()) worker_.join();
    }

    std::size_t batches() const { return starts_.size(); }

    std::optional<Batch> next() {
        if (depth_ == 0) {
            if (consumed_ >= starts_.size()) return std::nullopt;
            return make(consumed_++);
        }
        std::unique_lock<std::mutex> lock(m_);
        item_.wait(lock, [this] { return !queue_.empty() || finished_ || error_; });
        if (error_) std::rethrow_exception(error_);
        if (queue_.empty()) return std::nullopt;
        Batch b = std::move(queue_.front());
        queue_.pop_front();
        space_.notify_one();
        return b;
    }

  private:
    Batch make(std::size_t index) {
        return assemble_batch(ds_, &order_, starts_[index],
                              std::min(batch_size_, order_.size() - starts_[index]), do_augment_,
                              derive_seed(aug_root_, index));
    }

    void produce() {
        try {
            for (std::size_t index = 0; index < starts_.size(); ++index) {
                Batch b = make(index);
                std::unique_lock<std::mutex> lock(m_);
                space_.wait(lock, [this] { return queue_.size() < depth_ || aborted_; });
                if (aborted_) return;
                queue_.push_back(std::move(b));
                item_.notify_one();
            }
            std::lock_guard<std::mutex> lock(m_);
            finished_ = true;
        } catch (...) {
            std::lock_guard<std::mutex> lock(m_);
            error_ = std::current_exception();
        }
        item_.notify_all();
    }

    const data::Dataset& ds_;
    const std::vector<std::size_t>& order_;
    std::size_t batch_size_;
    bool do_augment_;
    std::uint64_t aug_root_;
    std::size_t depth_;
    std::vector<std::size_t> starts_;
    std::size_t consumed_ = 0;

    std::thread worker_;
    std::mutex m_;
    std::condition_variable item_, space_;
    std::deque<Batch> queue_;
    bool finished_ = false;
    bool aborted_ = false;
    std::exception_ptr error_;
};

std::size_t count_correct(const TensorT<float>& probs, const std::vector<std::int32_t>& labels) {
    const std::vector<std::int32_t> pred = kernels::argmax_rows(probs);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) correct += pred[i] == labels[i];
    return correct;
}

}  // namespace

EpochResult train_epoch(nn::Network& net, Sgd& opt, const data::Dataset& ds,
                        const OptimConfig& cfg, std::size_t epoch) {
    cfg.validate();
    if (ds.size() == 0) throw ConfigError("train_epoch: empty dataset");
    net.train();
    const float lr = float(cfg.lr_at(epoch));

    std::vector<std::size_t> order(ds.size());
    std::iota(order.begin(), order.end(), std::size_t(0));
    Rng shuffle_rng(derive_seed(cfg.seed, 1, epoch));
    for (std::size_t i = order.size() - 1; i > 0; --i) {
        std::swap(order[i], order[shuffle_rng.below(i + 1)]);
    }

    BatchPipeline pipeline(ds, order, cfg.batch_size, cfg.augment,
                           derive_seed(cfg.seed, 2, epoch), cfg.prefetch);
    if (pipeline.batches() == 0) {
        throw ConfigError("train_epoch: dataset yields no batch of size >= 2");
    }

    double loss_sum = 0.0;
    std::size_t correct = 0, seen = 0;
    while (auto batch = pipeline.next()) {
        autograd::Tape tape;
        auto x = autograd::Var::leaf(std::move(batch->images), false);
        auto logits = net.forward(x);
        auto sm = autograd::ops::softmax_cross_entropy(logits, batch->labels);
        tape.backward(sm.loss);
        opt.step(lr);

        const std::size_t n = batch->labels.size();
        loss_sum += double(sm.loss.value()[0]) * double(n);
        correct += count_correct(sm.probs, batch->labels);
        seen += n;
    }
    return {loss_sum / double(seen), double(correct) / double(seen)};
}

EpochResult evaluate(nn::Network& net, const data::Dataset& ds, std::size_t batch_size) {
    if (ds.size() == 0) throw ConfigError("evaluate: empty dataset");
    if (batch_size == 0) throw ConfigError("evaluate: batch_size must be positive");
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        const std::size_t count = std::min(batch_size, ds.size() - start);
        Batch b = assemble_batch(ds, nullptr, start, count, /*do_augment=*/false, 0);
        TensorT<float> logits = net.forward(b.images);
        TensorT<float> probs;
        loss_sum += kernels::softmax_cross_entropy_forward(logits, b.labels, probs) *
                    double(count);
        correct += count_correct(probs, b.labels);
    }
    return {loss_sum / double(ds.size()), double(correct) / double(ds.size())};
}

ScalingTrace record_scaling(nn::Network& net, std::size_t epoch) {
    ScalingTrace rows;
    for (const auto& layer : net.layers) {
        if (std::string(layer->kind()) != "dirac_conv") continue;
        auto* conv = static_cast<nn::DiracConv2dLayerT<float>*>(layer.get());
        const TensorT<float>& a = conv->params().a.value();
        const TensorT<float>& b = conv->params().b.value();
        double a_sum = 0.0, b_sum = 0.0;
        double min_ratio = std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < a.numel(); ++c) {
            a_sum += a[c];
            b_sum += b[c];
            min_ratio = std::min(min_ratio, std::abs(double(a[c])) / std::abs(double(b[c])));
        }
        ScalingRow row;
        row.epoch = epoch;
        row.name = layer->name();
        row.group = row.layer = 0;
        std::sscanf(row.name.c_str(), "group%zu.dirac%zu", &row.group, &row.layer);
        row.a_mean = a_sum / double(a.numel());
        row.b_mean = b_sum / double(b.numel());
        row.min_abs_ratio = min_ratio;
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ConfigError("record_scaling: network has no Dirac layers");
    return rows;
}

namespace {

std::ofstream open_csv(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError(msg("cannot write ", path.string()));
    // 17 significant digits round-trip a double exactly, so the files carry
    // the recorded values, not approximations of them.
    out.precision(17);
    return out;
}

}  // namespace

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out = open_csv(path);
    out << "epoch,split,loss,accuracy\n";
    for (const auto& r : rows) {
        out << r.epoch << ',' << r.split << ',' << r.loss << ',' << r.accuracy << '\n';
    }
    if (!out) throw IoError(msg("failed writing ", path.string()));
}

void write_scaling_csv(const std::filesystem::path& path, const ScalingTrace& rows) {
    std::ofstream out = open_csv(path);
    out << "epoch,group,layer,a_mean,b_mean,min_abs_ratio\n";
    for (const auto& r : rows) {
        out << r.epoch << ',' << r.group << ',' << r.layer << ',' << r.a_mean << ',' << r.b_mean
            << ',' << r.min_abs_ratio << '\n';
    }
    if (!out) throw IoError(msg("failed writing ", path.string()));
}

}  // namespace diracnet::train
