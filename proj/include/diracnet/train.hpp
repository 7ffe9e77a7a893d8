#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "diracnet/data.hpp"
#include "diracnet/nn.hpp"

// SGD-with-momentum training loop: weight decay on the decayed parameter
// group only, step learning-rate schedule, per-epoch metrics, and a CSV
// trace of the Dirac scaling vectors.

namespace diracnet::train {

struct OptimConfig {
    // The defaults are the standard wide-residual-network CIFAR recipe; the
    // recipe is adopted convention, not something this code derives.
    double lr = 0.1;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    /// (epoch, multiplier) pairs; the multiplier takes effect at the start
    /// of the named 0-based epoch. Epochs must be strictly increasing.
    std::vector<std::pair<std::size_t, double>> schedule = {{60, 0.2}, {120, 0.2}, {160, 0.2}};
    std::size_t epochs = 200;
    std::size_t batch_size = 128;
    std::uint64_t seed = 0;
    bool augment = true;       // horizontal flip + pad-4 random crop
    bool nesterov = false;     // conventional option, off by default
    std::size_t prefetch = 2;  // batches assembled ahead by a worker (0 = inline)

    void validate() const;
    /// Base lr times every multiplier whose epoch is <= the given epoch.
    double lr_at(std::size_t epoch) const;
};

/// Momentum SGD over a parameter snapshot. Velocities start at zero and
/// live here; grads are read from the parameters and zeroed after a step.
template <typename T>
class SgdT {
  public:
    SgdT(std::vector<nn::ParamRefT<T>> params, T momentum, T weight_decay,
         bool nesterov = false);

    /// v <- momentum*v + grad + wd*param (wd only on the decayed group),
    /// then param <- param - lr*v. Throws NumericError naming the parameter
    /// on a non-finite gradient. Grads are zeroed on the way out.
    void step(T lr);

    void zero_grad();
    const std::vector<nn::ParamRefT<T>>& params() const { return params_; }
    /// Velocity tensors, named after their parameters; checkpoint surface.
    std::vector<std::pair<std::string, TensorT<T>*>> state();

  private:
    std::vector<nn::ParamRefT<T>> params_;
    std::vector<TensorT<T>> velocity_;
    T momentum_;
    T weight_decay_;
    bool nesterov_;
};

using Sgd = SgdT<float>;

struct EpochResult {
    double loss = 0.0;
    double accuracy = 0.0;
};

/// One pass over the shuffled dataset in train mode. Shuffle order and
/// augmentation draws are pure functions of (cfg.seed, epoch), so a fixed
/// seed fixes the whole trajectory bit for bit within one build. A trailing
/// batch of a single sample is skipped: train-mode batch norm cannot
/// normalize it. Throws ConfigError on an empty dataset.
EpochResult train_epoch(nn::Network& net, Sgd& opt, const data::Dataset& ds,
                        const OptimConfig& cfg, std::size_t epoch);

/// Loss and accuracy over the dataset without touching the network: no
/// graph, no mode change, no running-stat updates.
EpochResult evaluate(nn::Network& net, const data::Dataset& ds, std::size_t batch_size = 256);

struct ScalingRow {
    std::size_t epoch;
    std::size_t group;  // parsed from the layer name; 0 when unnamed
    std::size_t layer;
    std::string name;
    double a_mean;
    double b_mean;
    double min_abs_ratio;  // min over channels of |a[c]| / |b[c]|
};
using ScalingTrace = std::vector<ScalingRow>;

/// One row per Dirac layer with the current means of a and b. Intended at
/// epoch start, so epoch 0 records the exact 1.0 / 0.1 initialization.
/// Throws ConfigError when the network has no Dirac layers.
ScalingTrace record_scaling(nn::Network& net, std::size_t epoch);

struct MetricsRow {
    std::size_t epoch;
    std::string split;  // "train" or "val"
    double loss;
    double accuracy;
};

/// Full rewrites, header included; rewriting per epoch keeps the files
/// consistent even if the run is interrupted.
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRow>& rows);
void write_scaling_csv(const std::filesystem::path& path, const ScalingTrace& rows);

}  // namespace diracnet::train
