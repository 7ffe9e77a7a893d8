#pragma once

#include <cstdint>
#include <string>

#include "diracnet/nn.hpp"
#include "diracnet/train.hpp"

// Command-line front end: train, eval, fold and check subcommands sharing one
// RunConfig. Every command validates its config before touching anything and
// never mutates a source checkpoint.

namespace diracnet::cli {

/// Everything a command needs, assembled from flags by run(). The defaults
/// here are what --help advertises.
struct RunConfig {
    std::string command;  // train | eval | fold | check
    nn::Variant variant = nn::Variant::Dirac;
    std::size_t n = 1;   // blocks per group; conv depth is 6n+4
    std::size_t k = 1;   // width factor
    double sigma = 0.1;  // conv init stddev, resnet-dirac variant only
    std::string dataset = "synthetic";  // synthetic | cifar10
    std::string data_dir = "data";      // cifar10 binary batches live here
    std::string run_dir = "run";
    std::uint64_t seed = 0;
    train::OptimConfig optim;  // epochs / lr / batch-size / augment land here
    int threads = 0;           // 0 keeps the library default

    std::string checkpoint;  // eval and fold input
    std::string out;         // fold output

    // Shape of the generated dataset when dataset == "synthetic". Fixed from
    // the command line; programmatic callers may shrink them.
    std::size_t synth_classes = 10;
    std::size_t synth_train_per_class = 500;
    std::size_t synth_val_per_class = 100;

    /// Throws ConfigError on the first bad field; nothing has run yet.
    void validate() const;
};

/// Trains per config: writes config.json, metrics.csv, scaling_trace.csv
/// (Dirac layers only), latest.drcn and best.drcn into the run dir, prints
/// one line per epoch and the final validation accuracy.
int cmd_train(const RunConfig& cfg);

/// Prints loss and accuracy of a checkpoint on the validation split, using
/// the normalization stored in the checkpoint. Writes nothing.
int cmd_eval(const RunConfig& cfg);

/// Folds a dirac checkpoint into a plain-conv checkpoint at cfg.out and
/// writes an equivalence report CSV next to it: max abs logit difference and
/// argmax agreement over 256 random inputs. Refuses non-dirac and
/// already-folded checkpoints.
int cmd_fold(const RunConfig& cfg);

/// Self-contained invariant suite: Dirac identity, fold equivalence,
/// gradient checks, init-sigma sweep. Stops at the first failure with a
/// named diagnosis and a nonzero exit.
int cmd_check(const RunConfig& cfg);

/// Parses argv, dispatches, turns exceptions into error messages; the
/// process exit code.
int run(int argc, const char* const* argv);

}  // namespace diracnet::cli
