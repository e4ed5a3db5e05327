#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "lfs/attention.hpp"
#include "lfs/tensor.hpp"
#include "test_helpers.hpp"

using namespace lfs;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

AttentionConfig small_config(AttentionMode mode, real ratio = 0.5,
                             int heads = 1) {
  AttentionConfig cfg;
  cfg.mode = mode;
  cfg.fs_ratio = ratio;
  cfg.heads = heads;
  cfg.d = 8;
  cfg.grid_h = 3;
  cfg.grid_w = 3;
  cfg.layers = 1;
  return cfg;
}

ParameterStore fresh_lfsm(const AttentionConfig& cfg, uint64_t seed) {
  ParameterStore store;
  lfsm_register(store, cfg, "lfsm");
  Rng rng(seed);
  for (auto& p : store.items()) {
    const real scale = p.name.ends_with("e_pos") ? 0.02 : 0.3;
    for (auto& v : p.value.mutable_data())
      v = static_cast<real>(rng.normal()) * scale;
    if (p.name.ends_with("ln.gain"))
      for (auto& v : p.value.mutable_data()) v = 1 + 0.1 * v;
  }
  return store;
}

int64_t count_row(const Tensor& mask, int64_t row) {
  const int64_t m = mask.dim(1);
  int64_t n = 0;
  for (int64_t j = 0; j < m; ++j)
    n += mask.data()[row * m + j] == 1 ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("mode names round-trip") {
  for (auto mode : {AttentionMode::kSelf, AttentionMode::kLocal,
                    AttentionMode::kSelect, AttentionMode::kLfs})
    CHECK(attention_mode_from_string(attention_mode_name(mode)) == mode);
  CHECK_THROWS_AS(attention_mode_from_string("banana"), ValidationError);
  CHECK(mode_uses_conv(AttentionMode::kLfs));
  CHECK(!mode_uses_conv(AttentionMode::kSelect));
  CHECK(mode_uses_mask(AttentionMode::kSelect));
  CHECK(!mode_uses_mask(AttentionMode::kLocal));
}

TEST_CASE("config validation") {
  AttentionConfig cfg = small_config(AttentionMode::kLfs);
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 3;  // 8 % 3 != 0
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config(AttentionMode::kLfs);
  cfg.kernel = 4;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = small_config(AttentionMode::kLfs);
  cfg.fs_ratio = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg.fs_ratio = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  // ratios below 1/m are fine for unmasked modes only
  cfg = small_config(AttentionMode::kLocal, 0.01);
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("tokenize lays out the grid in raster order and adds e_pos") {
  const int64_t d = 2, h = 2, w = 3;
  Tensor map = Tensor::zeros({d, h, w});
  for (int64_t c = 0; c < d; ++c)
    for (int64_t i = 0; i < h * w; ++i)
      map.mutable_data()[c * h * w + i] = static_cast<real>(100 * c + i);
  Tensor e_pos = Tensor::zeros({h * w, d});
  Tensor tokens = tokenize(map, e_pos);
  CHECK(tokens.shape() == Shape{h * w, d});
  for (int64_t t = 0; t < h * w; ++t) {
    CHECK(tokens.data()[t * d + 0] == t);
    CHECK(tokens.data()[t * d + 1] == 100 + t);
  }

  Tensor e_shift = Tensor::full({h * w, d}, 10);
  Tensor shifted = tokenize(map, e_shift);
  for (int64_t i = 0; i < h * w * d; ++i)
    CHECK(shifted.data()[i] == tokens.data()[i] + 10);
}

TEST_CASE("relevance scores scale by 1/sqrt(d)") {
  Tensor q = Tensor::from_data({2, 4}, {1, 0, 0, 0, 0, 1, 0, 0});
  Tensor k = Tensor::from_data({2, 4}, {2, 0, 0, 0, 0, 2, 0, 0});
  Tensor s = relevance_scores(q, k);
  CHECK(s.shape() == Shape{2, 2});
  CHECK(s.data()[0] == doctest::Approx(1.0).epsilon(1e-12));  // 2 / sqrt(4)
  CHECK(s.data()[1] == 0);
  CHECK(s.data()[3] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("threshold mask keeps the strict top fraction per row") {
  Tensor rel = Tensor::from_data({4, 4}, {0.9, 0.1, 0.5, 0.3,
                                          -1, -2, -3, -4,
                                          4, 3, 2, 1,
                                          0, 10, 0, 10});
  // ratio 0.5 -> pivot index 2 -> keep entries strictly above sorted[2]
  Tensor mask = fs_threshold_mask(rel, 0.5);
  CHECK(mask.data() == std::vector<real>{1, 0, 1, 0,
                                         1, 1, 0, 0,
                                         1, 1, 0, 0,
                                         0, 1, 0, 1});

  // ratio 1 keeps everything
  Tensor all = fs_threshold_mask(rel, 1.0);
  for (real v : all.data()) CHECK(v == 1);

  // tiny ratio clamps the pivot to position 1: only the max survives
  Tensor top1 = fs_threshold_mask(rel, 0.26);
  CHECK(count_row(top1, 0) == 1);
  CHECK(top1.data()[0] == 1);
}

TEST_CASE("threshold mask cardinality over random rows") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const int64_t m = 2 + rng.uniform_int(24);
    Tensor rel = random_tensor({m, m}, rng);
    const real ratio = 0.05 + 0.95 * rng.uniform();
    Tensor mask = fs_threshold_mask(rel, ratio);
    const int64_t pivot = std::clamp<int64_t>(
        static_cast<int64_t>(std::floor(ratio * m)), 1, m - 1);
    for (int64_t i = 0; i < m; ++i) {
      const int64_t kept = count_row(mask, i);
      if (ratio == 1) {
        CHECK(kept == m);
      } else {
        // distinct values almost surely: exactly `pivot` survive
        CHECK(kept == pivot);
      }
    }
  }
}

TEST_CASE("threshold mask edge rules: ties, ones, single token") {
  Tensor flat = Tensor::full({4, 4}, 3);
  Tensor mask = fs_threshold_mask(flat, 0.5);
  // all tied: strictly-greater empties the row, first max is kept back
  for (int64_t i = 0; i < 4; ++i) {
    CHECK(count_row(mask, i) == 1);
    CHECK(mask.data()[i * 4] == 1);
  }

  Tensor single = Tensor::from_data({1, 1}, {42});
  CHECK(fs_threshold_mask(single, 0.3).data() == std::vector<real>{1});

  // binarity and idempotence of the retained set
  Rng rng(22);
  Tensor rel = random_tensor({6, 6}, rng);
  Tensor m1 = fs_threshold_mask(rel, 0.4);
  for (real v : m1.data()) CHECK((v == 0 || v == 1));
  CHECK(!m1.requires_grad());
}

TEST_CASE("mask nesting: lower ratios keep subsets") {
  Rng rng(23);
  Tensor rel = random_tensor({8, 8}, rng);
  Tensor coarse = fs_threshold_mask(rel, 0.9);
  Tensor fine = fs_threshold_mask(rel, 0.3);
  for (int64_t i = 0; i < 64; ++i)
    if (fine.data()[i] == 1) CHECK(coarse.data()[i] == 1);
}

TEST_CASE("attention with identity-like projections reduces to masked mixing") {
  // one head, d=2, m=2: zero conv weights make Q=K=0 so scores are uniform;
  // with zero out weights the result is the out bias alone
  AttentionConfig cfg = small_config(AttentionMode::kSelf, 1.0);
  cfg.d = 2;
  cfg.grid_h = 1;
  cfg.grid_w = 2;
  ParameterStore store;
  lfsm_register(store, cfg, "lfsm");
  for (auto& p : store.items())
    for (auto& v : p.value.mutable_data()) v = 0;
  store.tensor("lfsm.layer0.out.bias").mutable_data() = {0.5, -0.25};

  Tensor tokens = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor out = lfs_attention_forward(tokens, cfg, store, "lfsm.layer0");
  CHECK(out.shape() == Shape{2, 2});
  for (int64_t t = 0; t < 2; ++t) {
    CHECK(out.data()[t * 2 + 0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out.data()[t * 2 + 1] == doctest::Approx(-0.25).epsilon(1e-12));
  }
}

TEST_CASE("single token attends to itself") {
  // m=1 admits only ratio 1 for masked modes
  AttentionConfig cfg = small_config(AttentionMode::kLfs, 1.0);
  cfg.grid_h = 1;
  cfg.grid_w = 1;
  ParameterStore store = fresh_lfsm(cfg, 31);
  Rng rng(32);
  Tensor tokens = random_tensor({1, 8}, rng);
  AttentionTrace trace;
  Tensor out = lfs_attention_forward(tokens, cfg, store, "lfsm.layer0",
                                     &trace);
  CHECK(out.shape() == Shape{1, 8});
  REQUIRE(trace.head_probs.size() == 1);
  CHECK(trace.head_probs[0].data() == std::vector<real>{1});
}

TEST_CASE("mode equivalences are bit identical") {
  Rng rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const uint64_t seed = rng.next_u64();
    Rng input_rng(seed);

    auto run = [&](AttentionMode mode, real ratio) {
      AttentionConfig cfg = small_config(mode, ratio, 2);
      ParameterStore store = fresh_lfsm(cfg, seed);
      Rng r(seed + 1);
      Tensor tokens = random_tensor({cfg.tokens(), cfg.d}, r);
      return lfs_attention_forward(tokens, cfg, store, "lfsm.layer0").data();
    };

    CHECK(run(AttentionMode::kLfs, 1.0) == run(AttentionMode::kLocal, 1.0));
    CHECK(run(AttentionMode::kSelect, 1.0) == run(AttentionMode::kSelf, 1.0));
  }
}

TEST_CASE("select with zero e_pos is permutation equivariant") {
  AttentionConfig cfg = small_config(AttentionMode::kSelect, 0.5);
  ParameterStore store = fresh_lfsm(cfg, 35);
  store.tensor("lfsm.e_pos").mutable_data().assign(cfg.tokens() * cfg.d, 0);
  Rng rng(36);
  const int64_t m = cfg.tokens(), d = cfg.d;
  Tensor tokens = random_tensor({m, d}, rng);

  std::vector<int64_t> perm(m);
  for (int64_t i = 0; i < m; ++i) perm[i] = i;
  for (int64_t i = m - 1; i > 0; --i)
    std::swap(perm[i], perm[rng.uniform_int(i + 1)]);

  Tensor permuted = Tensor::zeros({m, d});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < d; ++j)
      permuted.mutable_data()[i * d + j] = tokens.data()[perm[i] * d + j];

  Tensor out = lfs_attention_forward(tokens, cfg, store, "lfsm.layer0");
  Tensor out_p = lfs_attention_forward(permuted, cfg, store, "lfsm.layer0");
  double worst = 0;
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < d; ++j)
      worst = std::max(worst,
                       std::abs(out_p.data()[i * d + j] -
                                out.data()[perm[i] * d + j]));
  CHECK(worst < 1e-12);
}

TEST_CASE("multi-head output differs from single head but keeps shape") {
  AttentionConfig one = small_config(AttentionMode::kLfs, 0.6, 1);
  AttentionConfig two = small_config(AttentionMode::kLfs, 0.6, 2);
  ParameterStore s1 = fresh_lfsm(one, 41);
  ParameterStore s2 = fresh_lfsm(two, 41);
  Rng rng(42);
  Tensor tokens = random_tensor({one.tokens(), one.d}, rng);
  AttentionTrace t1, t2;
  Tensor o1 = lfs_attention_forward(tokens, one, s1, "lfsm.layer0", &t1);
  Tensor o2 = lfs_attention_forward(tokens, two, s2, "lfsm.layer0", &t2);
  CHECK(o1.shape() == o2.shape());
  CHECK(t1.head_probs.size() == 1);
  CHECK(t2.head_probs.size() == 2);
  for (const auto& p : t2.head_probs) {
    CHECK(p.shape() == Shape{9, 9});
    for (int64_t i = 0; i < 9; ++i) {
      real sum = 0;
      for (int64_t j = 0; j < 9; ++j) sum += p.data()[i * 9 + j];
      CHECK(sum == doctest::Approx(1).epsilon(1e-9));
    }
  }
}

TEST_CASE("encoder keeps token shape and stacks layers") {
  AttentionConfig cfg = small_config(AttentionMode::kLfs, 0.5, 2);
  cfg.layers = 2;
  ParameterStore store = fresh_lfsm(cfg, 51);
  CHECK(store.has("lfsm.layer0.proj_q.dw"));
  CHECK(store.has("lfsm.layer1.mlp.fc2.bias"));
  CHECK(store.has("lfsm.e_pos"));
  Rng rng(52);
  Tensor tokens = random_tensor({cfg.tokens(), cfg.d}, rng);
  AttentionTrace trace;
  Tensor out = encoder_block(tokens, cfg, store, "lfsm", &trace);
  CHECK(out.shape() == Shape{cfg.tokens(), cfg.d});
  // trace holds the last layer only
  CHECK(trace.head_probs.size() == 2);
}

TEST_CASE("encoder zero path pushes tokens through LN and MLP biases") {
  AttentionConfig cfg = small_config(AttentionMode::kSelf, 1.0);
  cfg.d = 4;
  cfg.grid_h = 1;
  cfg.grid_w = 2;
  ParameterStore store;
  lfsm_register(store, cfg, "lfsm");
  for (auto& p : store.items())
    for (auto& v : p.value.mutable_data()) v = 0;
  store.tensor("lfsm.layer0.ln.gain").mutable_data().assign(4, 1);
  store.tensor("lfsm.layer0.mlp.fc2.bias").mutable_data() = {1, 2, 3, 4};

  Rng rng(53);
  Tensor tokens = random_tensor({2, 4}, rng);
  Tensor out = encoder_block(tokens, cfg, store, "lfsm");
  // attention(y)=0, LN(y+0)=normed, fc1=0 so relu=0, fc2 = bias alone
  for (int64_t t = 0; t < 2; ++t)
    for (int64_t j = 0; j < 4; ++j)
      CHECK(out.data()[t * 4 + j] ==
            doctest::Approx(static_cast<double>(j + 1)).epsilon(1e-12));
}

TEST_CASE("heatmap normalizes column means to the unit interval") {
  AttentionTrace trace;
  // two heads, 4 tokens (2x2): hand-built probability rows
  Tensor p1 = Tensor::from_data({4, 4}, {1, 0, 0, 0,
                                         1, 0, 0, 0,
                                         0, 0, 0, 1,
                                         0, 0, 0, 1});
  Tensor p2 = Tensor::from_data({4, 4}, {0.25, 0.25, 0.25, 0.25,
                                         0.25, 0.25, 0.25, 0.25,
                                         0.25, 0.25, 0.25, 0.25,
                                         0.25, 0.25, 0.25, 0.25});
  trace.head_probs = {p1, p2};
  Tensor hm = attention_heatmap(trace, 2, 2);
  CHECK(hm.shape() == Shape{2, 2});
  // column means over heads: [ (0.5+0.25)/2, 0.25/2 ... ] -> minmax to [0,1]
  CHECK(hm.data()[0] == doctest::Approx(1).epsilon(1e-12));
  CHECK(hm.data()[1] == doctest::Approx(0).epsilon(1e-12));
  CHECK(hm.data()[2] == doctest::Approx(0).epsilon(1e-12));
  CHECK(hm.data()[3] == doctest::Approx(1).epsilon(1e-12));

  AttentionTrace flat;
  flat.head_probs = {p2};
  Tensor zeros = attention_heatmap(flat, 2, 2);
  for (real v : zeros.data()) CHECK(v == 0);
}

TEST_CASE("gradients flow through the full encoder in every mode") {
  Rng rng(61);
  for (auto mode : {AttentionMode::kSelf, AttentionMode::kLocal,
                    AttentionMode::kSelect, AttentionMode::kLfs}) {
    AttentionConfig cfg = small_config(mode, 0.5, 2);
    cfg.d = 4;
    ParameterStore store = fresh_lfsm(cfg, 62);
    Tensor tokens = random_tensor({cfg.tokens(), cfg.d}, rng);
    Tensor weight = random_tensor({cfg.tokens(), cfg.d}, rng);
    GradCheckConfig gc;
    auto result = grad_check(
        store,
        [&] {
          return mean_all(mul(weight, encoder_block(tokens, cfg, store,
                                                    "lfsm")));
        },
        gc);
    INFO("mode ", attention_mode_name(mode), " worst at ", result.worst_name);
    CHECK(result.ok);
    CHECK(result.worst_rel_err < 1e-4);
  }
}

TEST_CASE("attention is deterministic across repeated calls") {
  AttentionConfig cfg = small_config(AttentionMode::kLfs, 0.4, 2);
  ParameterStore store = fresh_lfsm(cfg, 71);
  Rng rng(72);
  Tensor tokens = random_tensor({cfg.tokens(), cfg.d}, rng);
  Tensor a = encoder_block(tokens, cfg, store, "lfsm");
  Tensor b = encoder_block(tokens, cfg, store, "lfsm");
  CHECK(a.data() == b.data());
}
