#pragma once

#include <string>
#include <vector>

#include "lfs/params.hpp"
#include "lfs/tensor.hpp"

namespace lfs {

// Attention variants: `self` = linear projections, no selection; `local` =
// depthwise-separable conv projections, no selection; `select` = linear
// projections gated by the foreground mask; `lfs` = conv projections gated
// by the foreground mask.
enum class AttentionMode { kSelf, kLocal, kSelect, kLfs };

AttentionMode attention_mode_from_string(const std::string& s);
std::string attention_mode_name(AttentionMode mode);
bool mode_uses_conv(AttentionMode mode);
bool mode_uses_mask(AttentionMode mode);

struct AttentionConfig {
  AttentionMode mode = AttentionMode::kLfs;
  real fs_ratio = 0.5;
  int heads = 1;
  int64_t d = 64;
  int64_t grid_h = 5;
  int64_t grid_w = 5;
  int kernel = 3;
  int layers = 1;
  int mlp_multiplier = 2;

  int64_t tokens() const { return grid_h * grid_w; }
  int64_t d_k() const { return d / heads; }
  void validate() const;
};

// Per-head attention probabilities of the last encoder layer, for the
// heatmap export and for white-box tests.
struct AttentionTrace {
  std::vector<Tensor> head_probs;  // each [m,m]
};

// map [d,h,w] -> tokens [r,d] in raster order, plus positional embedding.
Tensor tokenize(const Tensor& map, const Tensor& e_pos);

// scores = Q K^T / sqrt(d_k) for one head
Tensor relevance_scores(const Tensor& q, const Tensor& k);

// Per row: keep entries strictly greater than the value at 0-based position
// clamp(floor(fs_ratio*m), 1, m-1) of the descending-sorted row. fs_ratio=1
// keeps everything. A row emptied by ties keeps its first maximal entry.
// The result is a constant (no gradient flows through selection).
Tensor fs_threshold_mask(const Tensor& relevance, real fs_ratio);

void lfsm_register(ParameterStore& store, const AttentionConfig& cfg,
                   const std::string& prefix);

// One multi-head attention pass under the configured mode. `prefix`
// addresses one layer's parameters ("<prefix>.proj_q.*" etc).
Tensor lfs_attention_forward(const Tensor& tokens, const AttentionConfig& cfg,
                             ParameterStore& store, const std::string& prefix,
                             AttentionTrace* trace = nullptr);

// L layers of y -> MLP(LN(y + attention(y))). Returns the feature pool.
Tensor encoder_block(const Tensor& tokens, const AttentionConfig& cfg,
                     ParameterStore& store, const std::string& prefix,
                     AttentionTrace* trace = nullptr);

// Mean attention received per token (column means of the traced
// probabilities, averaged over heads), min-max normalized to [0,1] and
// reshaped to the grid. A constant column-mean vector maps to all zeros.
Tensor attention_heatmap(const AttentionTrace& trace, int64_t grid_h,
                         int64_t grid_w);

}  // namespace lfs
