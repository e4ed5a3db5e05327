#pragma once

#include <string>

#include "lfs/params.hpp"
#include "lfs/tensor.hpp"

namespace lfs {

// Four identical embedding blocks: 3x3 conv (pad 1, no bias), batch norm,
// ReLU, 2x2 max pool. Spatial extent halves per block (floor).
struct BackboneConfig {
  int64_t in_channels = 3;
  int64_t channels = 64;
  int blocks = 4;
};

// Final spatial extent for a square input; throws if the input collapses
// before the last block.
int64_t backbone_out_extent(const BackboneConfig& cfg, int64_t input_size);

// Registers conv weights, batch-norm affines, and running-moment buffers
// under "<prefix>.block{i}.*". Values start at zero; init happens model-side.
void backbone_register(ParameterStore& store, const BackboneConfig& cfg,
                       const std::string& prefix);

// One block. `prefix` addresses "<prefix>.conv.weight" and "<prefix>.bn.*".
Tensor conv_block_forward(const Tensor& x, ParameterStore& store,
                          const std::string& prefix, bool train);

// images [b,3,s,s] -> features [b,channels,s',s']
Tensor backbone_forward(const Tensor& images, ParameterStore& store,
                        const BackboneConfig& cfg, const std::string& prefix,
                        bool train);

}  // namespace lfs
