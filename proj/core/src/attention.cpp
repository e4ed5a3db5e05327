#include "lfs/attention.hpp"

#include <cmath>

namespace lfs {

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "self") return AttentionMode::kSelf;
  if (s == "local") return AttentionMode::kLocal;
  if (s == "select") return AttentionMode::kSelect;
  if (s == "lfs") return AttentionMode::kLfs;
  throw ValidationError("unknown attention mode: " + s);
}

std::string attention_mode_name(AttentionMode mode) {
  switch (mode) {
    case AttentionMode::kSelf: return "self";
    case AttentionMode::kLocal: return "local";
    case AttentionMode::kSelect: return "select";
    case AttentionMode::kLfs: return "lfs";
  }
  throw ValidationError("bad attention mode value");
}

bool mode_uses_conv(AttentionMode mode) {
  return mode == AttentionMode::kLocal || mode == AttentionMode::kLfs;
}

bool mode_uses_mask(AttentionMode mode) {
  return mode == AttentionMode::kSelect || mode == AttentionMode::kLfs;
}

void AttentionConfig::validate() const {
  if (heads < 1 || d < 1 || grid_h < 1 || grid_w < 1 || layers < 1 ||
      mlp_multiplier < 1)
    throw ValidationError("attention config: extents must be positive");
  if (d % heads != 0)
    throw ValidationError("attention config: d must be divisible by heads");
  if (kernel < 1 || kernel % 2 == 0)
    throw ValidationError("attention config: kernel must be odd");
  const real lo = real{1} / static_cast<real>(tokens());
  if (!(fs_ratio > 0) || fs_ratio > 1 ||
      (mode_uses_mask(mode) && fs_ratio < lo))
    throw ValidationError("attention config: fs_ratio out of range");
}

Tensor tokenize(const Tensor& map, const Tensor& e_pos) {
  if (map.rank() != 3) throw DimensionError("tokenize: want map [d,h,w]");
  const int64_t d = map.dim(0), r = map.dim(1) * map.dim(2);
  if (e_pos.rank() != 2 || e_pos.dim(0) != r || e_pos.dim(1) != d)
    throw DimensionError("tokenize: e_pos " + shape_str(e_pos.shape()) +
                         " does not match tokens [" + std::to_string(r) + "," +
                         std::to_string(d) + "]");
  Tensor tokens = transpose(reshape(map, {d, r}));
  return add(tokens, e_pos);
}

Tensor relevance_scores(const Tensor& q, const Tensor& k) {
  if (q.rank() != 2 || k.rank() != 2 || q.dim(1) != k.dim(1))
    throw DimensionError("relevance_scores: want matching [m,d_k] inputs");
  const real inv_sqrt_dk =
      real{1} / std::sqrt(static_cast<real>(q.dim(1)));
  return scale(matmul(q, transpose(k)), inv_sqrt_dk);
}

Tensor fs_threshold_mask(const Tensor& relevance, real fs_ratio) {
  if (relevance.rank() != 2 || relevance.dim(0) != relevance.dim(1))
    throw DimensionError("fs_threshold_mask: want square relevance");
  const int64_t m = relevance.dim(0);
  if (!(fs_ratio > 0) || fs_ratio > 1)
    throw ValidationError("fs_threshold_mask: fs_ratio out of (0,1]");
  std::vector<real> mask(m * m, real{0});
  if (fs_ratio == real{1} || m == 1) {
    std::fill(mask.begin(), mask.end(), real{1});
    return Tensor::from_data({m, m}, std::move(mask));
  }
  const int64_t idx = std::clamp<int64_t>(
      static_cast<int64_t>(std::floor(fs_ratio * static_cast<real>(m))), 1,
      m - 1);
  const auto& rv = relevance.data();
  for (int64_t i = 0; i < m; ++i) {
    const real* row = rv.data() + i * m;
    std::vector<int64_t> order = argsort_desc(row, m);
    const real threshold = row[order[idx]];
    int64_t kept = 0;
    for (int64_t j = 0; j < m; ++j) {
      if (row[j] > threshold) {
        mask[i * m + j] = real{1};
        ++kept;
      }
    }
    if (kept == 0) mask[i * m + order[0]] = real{1};
  }
  return Tensor::from_data({m, m}, std::move(mask));
}

namespace {

std::string layer_prefix(const std::string& prefix, int layer) {
  return prefix + ".layer" + std::to_string(layer);
}

void register_projection(ParameterStore& store, const std::string& name,
                         const AttentionConfig& cfg) {
  if (mode_uses_conv(cfg.mode)) {
    store.add(name + ".dw", Tensor::zeros({cfg.d, cfg.kernel, cfg.kernel},
                                          true));
    store.add(name + ".pw", Tensor::zeros({cfg.d, cfg.d}, true));
  } else {
    store.add(name + ".weight", Tensor::zeros({cfg.d, cfg.d}, true));
  }
}

// tokens [r,d] -> projected tokens [r,d], via the grid for conv modes
Tensor project(const Tensor& tokens, const AttentionConfig& cfg,
               ParameterStore& store, const std::string& name) {
  if (mode_uses_conv(cfg.mode)) {
    const int64_t r = cfg.tokens();
    Tensor grid = reshape(transpose(tokens), {cfg.d, cfg.grid_h, cfg.grid_w});
    Tensor out = depthwise_separable_conv(
        grid, store.tensor(name + ".dw"), store.tensor(name + ".pw"),
        /*stride=*/1, /*padding=*/(cfg.kernel - 1) / 2);
    return transpose(reshape(out, {cfg.d, r}));
  }
  return matmul(tokens, store.tensor(name + ".weight"));
}

}  // namespace

void lfsm_register(ParameterStore& store, const AttentionConfig& cfg,
                   const std::string& prefix) {
  cfg.validate();
  store.add(prefix + ".e_pos", Tensor::zeros({cfg.tokens(), cfg.d}, true));
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = layer_prefix(prefix, l);
    register_projection(store, lp + ".proj_q", cfg);
    register_projection(store, lp + ".proj_k", cfg);
    register_projection(store, lp + ".proj_v", cfg);
    store.add(lp + ".out.weight", Tensor::zeros({cfg.d, cfg.d}, true));
    store.add(lp + ".out.bias", Tensor::zeros({cfg.d}, true));
    store.add(lp + ".ln.gain", Tensor::zeros({cfg.d}, true));
    store.add(lp + ".ln.bias", Tensor::zeros({cfg.d}, true));
    const int64_t hidden = cfg.d * cfg.mlp_multiplier;
    store.add(lp + ".mlp.fc1.weight", Tensor::zeros({cfg.d, hidden}, true));
    store.add(lp + ".mlp.fc1.bias", Tensor::zeros({hidden}, true));
    store.add(lp + ".mlp.fc2.weight", Tensor::zeros({hidden, cfg.d}, true));
    store.add(lp + ".mlp.fc2.bias", Tensor::zeros({cfg.d}, true));
  }
}

Tensor lfs_attention_forward(const Tensor& tokens, const AttentionConfig& cfg,
                             ParameterStore& store, const std::string& prefix,
                             AttentionTrace* trace) {
  cfg.validate();
  const int64_t m = cfg.tokens();
  if (tokens.rank() != 2 || tokens.dim(0) != m || tokens.dim(1) != cfg.d)
    throw DimensionError("lfs_attention_forward: want tokens [" +
                         std::to_string(m) + "," + std::to_string(cfg.d) +
                         "], got " + shape_str(tokens.shape()));
  Tensor q = project(tokens, cfg, store, prefix + ".proj_q");
  Tensor k = project(tokens, cfg, store, prefix + ".proj_k");
  Tensor v = project(tokens, cfg, store, prefix + ".proj_v");

  const Tensor ones_mask = Tensor::full({m, m}, real{1});
  if (trace) trace->head_probs.clear();
  std::vector<Tensor> head_outs;
  head_outs.reserve(cfg.heads);
  const int64_t dk = cfg.d_k();
  for (int h = 0; h < cfg.heads; ++h) {
    const int64_t c0 = h * dk, c1 = (h + 1) * dk;
    Tensor qh = cfg.heads == 1 ? q : slice_cols(q, c0, c1);
    Tensor kh = cfg.heads == 1 ? k : slice_cols(k, c0, c1);
    Tensor vh = cfg.heads == 1 ? v : slice_cols(v, c0, c1);
    Tensor scores = relevance_scores(qh, kh);
    // every mode funnels through the same masked softmax, so the fs_ratio=1
    // equivalences hold to the bit
    Tensor mask = mode_uses_mask(cfg.mode)
                      ? fs_threshold_mask(scores, cfg.fs_ratio)
                      : ones_mask;
    Tensor probs = masked_softmax_rows(scores, mask);
    if (trace) trace->head_probs.push_back(probs);
    head_outs.push_back(matmul(probs, vh));
  }
  Tensor mixed = cfg.heads == 1 ? head_outs[0] : concat_cols(head_outs);
  Tensor out = matmul(mixed, store.tensor(prefix + ".out.weight"));
  return add_rowvec(out, store.tensor(prefix + ".out.bias"));
}

Tensor encoder_block(const Tensor& tokens, const AttentionConfig& cfg,
                     ParameterStore& store, const std::string& prefix,
                     AttentionTrace* trace) {
  Tensor y = tokens;
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string lp = layer_prefix(prefix, l);
    Tensor attended = lfs_attention_forward(y, cfg, store, lp, trace);
    Tensor normed = layer_norm(add(y, attended), store.tensor(lp + ".ln.gain"),
                               store.tensor(lp + ".ln.bias"));
    Tensor hidden = add_rowvec(
        matmul(normed, store.tensor(lp + ".mlp.fc1.weight")),
        store.tensor(lp + ".mlp.fc1.bias"));
    hidden = relu(hidden);
    y = add_rowvec(matmul(hidden, store.tensor(lp + ".mlp.fc2.weight")),
                   store.tensor(lp + ".mlp.fc2.bias"));
  }
  return y;
}

Tensor attention_heatmap(const AttentionTrace& trace, int64_t grid_h,
                         int64_t grid_w) {
  if (trace.head_probs.empty())
    throw ValidationError("attention_heatmap: empty trace");
  const int64_t m = grid_h * grid_w;
  std::vector<real> importance(m, real{0});
  for (const Tensor& probs : trace.head_probs) {
    if (probs.rank() != 2 || probs.dim(0) != m || probs.dim(1) != m)
      throw DimensionError("attention_heatmap: trace/grid mismatch");
    const auto& pv = probs.data();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < m; ++j) importance[j] += pv[i * m + j];
  }
  const real denom = static_cast<real>(m) *
                     static_cast<real>(trace.head_probs.size());
  for (auto& v : importance) v /= denom;
  const auto [lo_it, hi_it] =
      std::minmax_element(importance.begin(), importance.end());
  const real lo = *lo_it, hi = *hi_it;
  if (hi - lo > real{0}) {
    for (auto& v : importance) v = (v - lo) / (hi - lo);
  } else {
    std::fill(importance.begin(), importance.end(), real{0});
  }
  return Tensor::from_data({grid_h, grid_w}, std::move(importance));
}

}  // namespace lfs
