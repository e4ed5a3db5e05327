#include "lfs/backbone.hpp"

namespace lfs {

int64_t backbone_out_extent(const BackboneConfig& cfg, int64_t input_size) {
  int64_t s = input_size;
  for (int i = 0; i < cfg.blocks; ++i) {
    if (s < 2)
      throw DimensionError("backbone: input too small, block " +
                           std::to_string(i) + " sees extent " +
                           std::to_string(s));
    s /= 2;
  }
  if (s < 1) throw DimensionError("backbone: output collapsed to zero");
  return s;
}

void backbone_register(ParameterStore& store, const BackboneConfig& cfg,
                       const std::string& prefix) {
  int64_t in_ch = cfg.in_channels;
  for (int i = 0; i < cfg.blocks; ++i) {
    const std::string block = prefix + ".block" + std::to_string(i);
    store.add(block + ".conv.weight",
              Tensor::zeros({cfg.channels, in_ch, 3, 3}, true));
    store.add(block + ".bn.gamma", Tensor::zeros({cfg.channels}, true));
    store.add(block + ".bn.beta", Tensor::zeros({cfg.channels}, true));
    store.add(block + ".bn.running_mean", Tensor::zeros({cfg.channels}),
              /*trainable=*/false);
    store.add(block + ".bn.running_var", Tensor::zeros({cfg.channels}),
              /*trainable=*/false);
    in_ch = cfg.channels;
  }
}

Tensor conv_block_forward(const Tensor& x, ParameterStore& store,
                          const std::string& prefix, bool train) {
  Tensor out = conv2d(x, store.tensor(prefix + ".conv.weight"), /*stride=*/1,
                      /*padding=*/1);
  BatchNormArgs bn;
  bn.gamma = store.tensor(prefix + ".bn.gamma");
  bn.beta = store.tensor(prefix + ".bn.beta");
  bn.running_mean = &store.tensor(prefix + ".bn.running_mean").mutable_data();
  bn.running_var = &store.tensor(prefix + ".bn.running_var").mutable_data();
  bn.train = train;
  out = batch_norm(out, bn);
  out = relu(out);
  return max_pool2d(out);
}

Tensor backbone_forward(const Tensor& images, ParameterStore& store,
                        const BackboneConfig& cfg, const std::string& prefix,
                        bool train) {
  if (images.rank() != 4 || images.dim(1) != cfg.in_channels)
    throw DimensionError("backbone: want images [b," +
                         std::to_string(cfg.in_channels) + ",s,s]");
  Tensor out = images;
  for (int i = 0; i < cfg.blocks; ++i)
    out = conv_block_forward(out, store,
                             prefix + ".block" + std::to_string(i), train);
  return out;
}

}  // namespace lfs
