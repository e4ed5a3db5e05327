#include "lfs/model.hpp"

#include <algorithm>
#include <cmath>

#include "lfs/rng.hpp"

namespace lfs {

BackboneConfig ModelConfig::backbone() const {
  BackboneConfig b;
  b.in_channels = 3;
  b.channels = channels;
  b.blocks = 4;
  return b;
}

AttentionConfig ModelConfig::attention() const {
  AttentionConfig a;
  a.mode = mode;
  a.fs_ratio = fs_ratio;
  a.heads = heads;
  a.d = channels;
  const int64_t grid = backbone_out_extent(backbone(), input_size);
  a.grid_h = grid;
  a.grid_w = grid;
  a.kernel = kernel;
  a.layers = layers;
  a.mlp_multiplier = mlp_multiplier;
  return a;
}

void ModelConfig::validate() const {
  if (input_size < 16)
    throw ValidationError("model: input_size must be at least 16");
  if (channels < 1) throw ValidationError("model: channels must be positive");
  attention().validate();
}

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void fill_normal(Tensor& t, Rng& rng, real stddev) {
  for (auto& v : t.mutable_data()) v = static_cast<real>(rng.normal()) * stddev;
}

void fill_constant(Tensor& t, real value) {
  std::fill(t.mutable_data().begin(), t.mutable_data().end(), value);
}

// fan-in for He init by tensor role
int64_t fan_in_of(const std::string& name, const Shape& shape) {
  if (shape.size() == 4) return shape[1] * shape[2] * shape[3];  // conv
  if (shape.size() == 3) return shape[1] * shape[2];             // depthwise
  if (shape.size() == 2) {
    // pointwise convs mix channels ([out,in]); token-side linears multiply on
    // the right ([in,out])
    return ends_with(name, ".pw") ? shape[1] : shape[0];
  }
  return shape[0];
}

}  // namespace

void init_params(ParameterStore& store, uint64_t seed) {
  for (auto& p : store.items()) {
    Rng rng(hash_combine(seed, hash_str(p.name)));
    const std::string& name = p.name;
    Tensor& t = p.value;
    if (ends_with(name, ".bn.gamma") || ends_with(name, ".ln.gain")) {
      fill_constant(t, real{1});
    } else if (ends_with(name, ".bn.beta") || ends_with(name, ".ln.bias") ||
               ends_with(name, ".bn.running_mean") ||
               ends_with(name, ".out.bias") || ends_with(name, ".bias")) {
      fill_constant(t, real{0});
    } else if (ends_with(name, ".bn.running_var")) {
      fill_constant(t, real{1});
    } else if (ends_with(name, ".e_pos")) {
      fill_normal(t, rng, real{0.02});
    } else if (name == "head.alpha" || name == "head.w_qs" ||
               name == "head.w_sq") {
      fill_constant(t, real{0});
    } else if (name == "head.beta") {
      // residuals of unit-norm rows scale like 1/d; exp(beta)=d keeps the
      // initial logits O(1)
      const real d = store.has("lfsm.e_pos")
                         ? static_cast<real>(store.tensor("lfsm.e_pos").dim(1))
                         : real{1};
      fill_constant(t, std::log(d));
    } else {
      fill_normal(t, rng,
                  std::sqrt(real{2} / static_cast<real>(
                                          fan_in_of(name, t.shape()))));
    }
  }
}

Model Model::build(const ModelConfig& cfg) {
  cfg.validate();
  Model model;
  model.cfg_ = cfg;
  backbone_register(model.params_, cfg.backbone(), "backbone");
  lfsm_register(model.params_, cfg.attention(), "lfsm");
  head_register(model.params_, cfg.head, "head");
  init_params(model.params_, cfg.seed);
  return model;
}

std::vector<Tensor> Model::feature_pools(const Tensor& images, bool train,
                                         AttentionTrace* trace) {
  const AttentionConfig attn = cfg_.attention();
  Tensor maps = backbone_forward(images, params_, cfg_.backbone(), "backbone",
                                 train);
  const int64_t b = maps.dim(0), d = maps.dim(1);
  const int64_t h = maps.dim(2), w = maps.dim(3);
  if (h != attn.grid_h || w != attn.grid_w)
    throw DimensionError("model: backbone grid does not match e_pos");
  Tensor flat = reshape(maps, {b, d * h * w});
  const Tensor& e_pos = params_.tensor("lfsm.e_pos");
  std::vector<Tensor> pools;
  pools.reserve(b);
  for (int64_t i = 0; i < b; ++i) {
    Tensor map = reshape(slice_rows(flat, i, i + 1), {d, h, w});
    Tensor tokens = tokenize(map, e_pos);
    pools.push_back(encoder_block(tokens, attn, params_, "lfsm", trace));
  }
  return pools;
}

Tensor Model::episode_logits(const Tensor& support_images,
                             const std::vector<int>& support_labels,
                             const Tensor& query_images, int ways, bool train,
                             AttentionTrace* trace) {
  if (support_images.dim(0) !=
      static_cast<int64_t>(support_labels.size()))
    throw DimensionError("model: support labels do not match images");
  if (ways < 2) throw ValidationError("model: ways must be >= 2");
  const int64_t n_support = support_images.dim(0);
  const int64_t n_query = query_images.dim(0);
  // one joint batch so batch-norm statistics cover the whole episode
  Tensor batch = concat_rows(
      {reshape(support_images,
               {n_support, support_images.numel() / n_support}),
       reshape(query_images, {n_query, query_images.numel() / n_query})});
  batch = reshape(batch, {n_support + n_query, 3, cfg_.input_size,
                          cfg_.input_size});
  std::vector<Tensor> pools = feature_pools(batch, train, trace);

  std::vector<std::vector<Tensor>> per_class(ways);
  for (int64_t i = 0; i < n_support; ++i) {
    const int label = support_labels[i];
    if (label < 0 || label >= ways)
      throw ValidationError("model: support label out of range");
    per_class[label].push_back(pools[i]);
  }
  std::vector<Tensor> supports;
  supports.reserve(ways);
  for (int c = 0; c < ways; ++c) {
    if (per_class[c].empty())
      throw ValidationError("model: class " + std::to_string(c) +
                            " has no support images");
    supports.push_back(per_class[c].size() == 1 ? per_class[c][0]
                                                : concat_rows(per_class[c]));
  }
  std::vector<Tensor> queries(pools.begin() + n_support, pools.end());

  HeadParams hp = head();
  return cfg_.head == HeadType::kFrn ? frn_logits(queries, supports, hp)
                                     : bifrn_logits(queries, supports, hp);
}

}  // namespace lfs
