#pragma once

#include <string>
#include <vector>

#include "lfs/attention.hpp"
#include "lfs/backbone.hpp"
#include "lfs/reconstruction.hpp"

namespace lfs {

struct ModelConfig {
  int64_t input_size = 32;
  int64_t channels = 64;  // backbone output = attention token dim
  AttentionMode mode = AttentionMode::kLfs;
  real fs_ratio = 0.5;
  int heads = 1;
  int layers = 1;
  int kernel = 3;
  int mlp_multiplier = 2;
  HeadType head = HeadType::kFrn;
  bool normalize_rows = true;
  uint64_t seed = 1;

  BackboneConfig backbone() const;
  AttentionConfig attention() const;  // grid derived from input_size
  void validate() const;
};

// A built model: registered parameter store plus the forward pass.
class Model {
 public:
  static Model build(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // Full episode forward: backbone over support+query jointly, encoder per
  // image, pools grouped by class, head logits [n_query, ways].
  Tensor episode_logits(const Tensor& support_images,
                        const std::vector<int>& support_labels,
                        const Tensor& query_images, int ways, bool train,
                        AttentionTrace* trace = nullptr);

  // Feature pool for one image batch entry (post-encoder tokens [r,d]).
  std::vector<Tensor> feature_pools(const Tensor& images, bool train,
                                    AttentionTrace* trace = nullptr);

  HeadParams head() {
    return head_params_view(params_, cfg_.head, "head", cfg_.normalize_rows);
  }

 private:
  ModelConfig cfg_;
  ParameterStore params_;
};

// He/normal initialization keyed by (seed, parameter name), so a parameter
// gets identical values in any mode or head that declares it.
void init_params(ParameterStore& store, uint64_t seed);

}  // namespace lfs
