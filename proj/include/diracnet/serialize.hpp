#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "diracnet/data.hpp"
#include "diracnet/nn.hpp"
#include "diracnet/tensor.hpp"

namespace diracnet::serialize {

/// In-memory image of one checkpoint file: the network plus the training
/// metadata that train, eval and fold exchange through disk.
struct Checkpoint {
    nn::NetworkT<float> net;
    std::size_t epoch = 0;
    std::uint64_t seed = 0;
    data::Normalization norm;
    /// Optimizer tensors (SGD velocities), kept in save order. Empty means
    /// the checkpoint carries no optimizer state.
    std::vector<std::pair<std::string, TensorT<float>>> optimizer_state;
};

inline constexpr std::uint32_t kFormatVersion = 1;

/// Writes the DRCN container: magic "DRCN", u32 version, u32 metadata
/// length, canonical JSON metadata, then one blob per tensor (u32 name
/// length, name bytes, u32 rank, dims as u64, raw f32 data), everything
/// little-endian. Network tensors go first in registry order, optimizer
/// state after; a folded network is tagged "folded" in the metadata.
void save(const Checkpoint& ckpt, const std::string& path);

/// Rebuilds the network skeleton from the stored spec (re-folding it when
/// the checkpoint was taken from a folded net) and fills in every tensor.
/// The loaded network's eval-mode forward is bit-identical to the saved
/// one's, and saving the result again reproduces the file byte for byte.
Checkpoint load(const std::string& path);

}  // namespace diracnet::serialize
