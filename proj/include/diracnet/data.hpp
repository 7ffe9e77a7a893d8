#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "diracnet/tensor.hpp"

// Dataset ingestion and generation. Images live in memory as [N,3,32,32]
// float tensors with values in [0,1]; per-channel normalization is computed
// once on the training split and applied at batch-assembly time, so the
// stored datasets stay in pixel space.

namespace diracnet::data {

enum class Split { Train, Val };

/// Training-set channel statistics, stored in checkpoints so evaluation
/// applies the identical transform.
struct Normalization {
    std::vector<float> mean;
    std::vector<float> stddev;
    bool identity() const { return mean.empty(); }
};

struct Dataset {
    TensorT<float> images;  // [N, 3, 32, 32], values in [0, 1]
    std::vector<std::int32_t> labels;
    Split split = Split::Train;
    Normalization norm;

    std::size_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
    std::size_t channels() const { return images.rank() == 4 ? images.dim(1) : 0; }
};

/// Reads the standard binary batch files (data_batch_1..5.bin, test_batch.bin)
/// of 3073-byte records: one label byte, then 32x32 R, G and B planes.
/// Truncated or unreadable files raise IoError naming the byte offset.
std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir);

/// Class-balanced oriented sinusoidal gratings: class c draws orientation
/// +/-(c+0.5) * 90deg / classes with random phase, wavelength jitter around
/// 8 px, per-channel gain jitter and pixel noise, clipped to [0,1]. Random
/// phase and sign keep the class mean featureless, so a linear model on raw
/// pixels stays near chance while a small convnet separates the classes.
Dataset make_synthetic(std::size_t classes, std::size_t per_class, std::uint64_t seed);

/// One image's augmentation, exposed for direct testing: optional horizontal
/// flip, then zero-pad by `pad` on every side and crop back to height x width
/// at offset (oy, ox) in the padded frame. (pad, pad) reproduces the input.
void augment_image(const float* in, float* out, std::size_t channels, std::size_t height,
                   std::size_t width, bool flip, std::size_t oy, std::size_t ox, std::size_t pad);

/// Train-split augmentation of a [B,C,H,W] batch: per image independently, a
/// coin-flip horizontal mirror and a pad-4 random crop. Image i draws from
/// substream derive_seed(stream_seed, i), so the result is independent of
/// evaluation order and identical across thread counts.
TensorT<float> augment(const TensorT<float>& batch, std::uint64_t stream_seed);

Normalization compute_normalization(const Dataset& d);
void normalize(TensorT<float>& batch, const Normalization& n);
void denormalize(TensorT<float>& batch, const Normalization& n);

}  // namespace diracnet::data
