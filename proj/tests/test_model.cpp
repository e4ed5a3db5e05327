#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "lfs/config.hpp"
#include "lfs/model.hpp"
#include "test_helpers.hpp"

using namespace lfs;
using testutil::random_tensor;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model(AttentionMode mode = AttentionMode::kLfs,
                        HeadType head = HeadType::kFrn) {
  ModelConfig cfg;
  cfg.input_size = 32;
  cfg.channels = 8;
  cfg.mode = mode;
  cfg.head = head;
  cfg.fs_ratio = 0.5;
  cfg.seed = 5;
  return cfg;
}

struct EpisodeInputs {
  Tensor support;
  std::vector<int> support_labels;
  Tensor query;
};

EpisodeInputs tiny_episode(int ways, int shots, int queries, int64_t size,
                           uint64_t seed) {
  Rng rng(seed);
  EpisodeInputs e;
  e.support = random_tensor({ways * shots, 3, size, size}, rng, false, 0.5);
  e.query = random_tensor({ways * queries, 3, size, size}, rng, false, 0.5);
  for (int c = 0; c < ways; ++c)
    for (int s = 0; s < shots; ++s) e.support_labels.push_back(c);
  return e;
}

}  // namespace

TEST_CASE("model config derives the attention grid from the backbone") {
  ModelConfig cfg = small_model();
  CHECK(cfg.backbone().channels == 8);
  AttentionConfig att = cfg.attention();
  CHECK(att.grid_h == 2);
  CHECK(att.grid_w == 2);
  CHECK(att.d == 8);
  CHECK_NOTHROW(cfg.validate());
  cfg.channels = 9;
  cfg.heads = 2;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
}

TEST_CASE("initialization is keyed by name: shared layers match across modes") {
  Model lfs_model = Model::build(small_model(AttentionMode::kLfs));
  Model local_model = Model::build(small_model(AttentionMode::kLocal));
  Model self_model = Model::build(small_model(AttentionMode::kSelf));
  init_params(lfs_model.params(), 77);
  init_params(local_model.params(), 77);
  init_params(self_model.params(), 77);

  // conv projections exist in both conv modes with identical values
  CHECK(lfs_model.params().tensor("lfsm.layer0.proj_q.dw").data() ==
        local_model.params().tensor("lfsm.layer0.proj_q.dw").data());
  // backbone matches everywhere
  CHECK(lfs_model.params().tensor("backbone.block2.conv.weight").data() ==
        self_model.params().tensor("backbone.block2.conv.weight").data());
  // linear modes have .weight instead of .dw/.pw
  CHECK(self_model.params().has("lfsm.layer0.proj_q.weight"));
  CHECK(!self_model.params().has("lfsm.layer0.proj_q.dw"));
}

TEST_CASE("initialization constants: gains one, biases zero, beta log d") {
  Model model = Model::build(small_model());
  init_params(model.params(), 7);
  for (real v : model.params().tensor("backbone.block0.bn.gamma").data())
    CHECK(v == 1);
  for (real v : model.params().tensor("lfsm.layer0.ln.gain").data())
    CHECK(v == 1);
  for (real v : model.params().tensor("lfsm.layer0.out.bias").data())
    CHECK(v == 0);
  for (real v : model.params().tensor("backbone.block1.bn.running_var").data())
    CHECK(v == 1);
  CHECK(model.params().tensor("head.alpha").data()[0] == 0);
  CHECK(model.params().tensor("head.beta").data()[0] ==
        doctest::Approx(std::log(8.0)).epsilon(1e-12));
}

TEST_CASE("episode forward produces one logit row per query") {
  for (auto head : {HeadType::kFrn, HeadType::kBifrn}) {
    Model model = Model::build(small_model(AttentionMode::kLfs, head));
    init_params(model.params(), 11);
    EpisodeInputs e = tiny_episode(3, 2, 2, 32, 13);
    AttentionTrace trace;
    Tensor logits = model.episode_logits(e.support, e.support_labels, e.query,
                                         3, /*train=*/true, &trace);
    CHECK(logits.shape() == Shape{6, 3});
    CHECK(!trace.head_probs.empty());
    for (real v : logits.data()) CHECK(v <= 0);  // negative scaled distances
  }
}

TEST_CASE("feature pools are one [tokens, d] matrix per image") {
  Model model = Model::build(small_model());
  init_params(model.params(), 17);
  Rng rng(18);
  Tensor images = random_tensor({3, 3, 32, 32}, rng, false, 0.5);
  auto pools = model.feature_pools(images, /*train=*/false);
  REQUIRE(pools.size() == 3);
  for (const auto& p : pools) CHECK(p.shape() == Shape{4, 8});
}

TEST_CASE("full model gradients check out on a tiny episode") {
  ModelConfig cfg = small_model(AttentionMode::kLfs, HeadType::kBifrn);
  cfg.channels = 4;
  Model model = Model::build(cfg);
  init_params(model.params(), 19);
  EpisodeInputs e = tiny_episode(2, 1, 1, 32, 23);

  GradCheckConfig gc;
  gc.step = 1e-5;  // the deep composition makes 1e-4 truncation-noisy
  // spot check a cross-section: conv, bn affine, attention, head scalars
  gc.include = {"backbone.block0.conv.weight", "backbone.block3.bn.gamma",
                "lfsm.e_pos", "lfsm.layer0.proj_v.pw",
                "lfsm.layer0.out.weight", "lfsm.layer0.mlp.fc1.weight",
                "head.alpha", "head.beta", "head.w_qs", "head.w_sq"};
  auto result = grad_check(
      model.params(),
      [&] {
        Tensor logits = model.episode_logits(e.support, e.support_labels,
                                             e.query, 2, /*train=*/true);
        return softmax_cross_entropy(logits, {0, 1});
      },
      gc);
  INFO("worst ", result.worst_name, "[", result.worst_index, "] analytic ",
       result.worst_analytic, " numeric ", result.worst_numeric);
  CHECK(result.ok);
  CHECK(result.worst_rel_err < 1e-4);
}

TEST_CASE("run config: defaults, overrides, rejection") {
  RunConfig cfg;
  CHECK(cfg.get_int("channels") == 64);
  CHECK(cfg.get_int("input_size") == 32);
  CHECK(cfg.get("mode") == "lfs");
  CHECK(cfg.get_real("fs_ratio") == doctest::Approx(0.5));

  cfg.apply("mode", "select");
  cfg.apply_assignment("fs_ratio=0.3");
  CHECK(cfg.get("mode") == "select");
  CHECK(cfg.get_real("fs_ratio") == doctest::Approx(0.3));

  CHECK_THROWS_AS(cfg.apply("fs_ration", "0.5"), ValidationError);
  CHECK_THROWS_AS(cfg.apply_assignment("no_equals_sign"), ValidationError);
  CHECK_THROWS_AS(cfg.get_int("mode"), ValidationError);
  CHECK_THROWS_AS(cfg.get("unknown_key"), ValidationError);
}

TEST_CASE("run config round-trips through a file") {
  const auto dir = fs::temp_directory_path();
  const auto path = (dir / "lfs_run_config_test.cfg").string();
  RunConfig cfg;
  cfg.apply("epochs", "3");
  cfg.apply("head", "bifrn");
  cfg.write_resolved(path);

  RunConfig back;
  back.load_file(path);
  CHECK(back.get_int("epochs") == 3);
  CHECK(back.get("head") == "bifrn");
  CHECK(back.values() == cfg.values());

  // comments and blank lines are tolerated in config files
  {
    std::ofstream out(path);
    out << "# a note\n\nepochs = 4\nmode=local\n";
  }
  RunConfig commented;
  commented.load_file(path);
  CHECK(commented.get_int("epochs") == 4);
  CHECK(commented.get("mode") == "local");
  fs::remove(path);
}

TEST_CASE("run config converts into the typed module configs") {
  RunConfig cfg;
  cfg.apply("mode", "local");
  cfg.apply("head", "bifrn");
  cfg.apply("channels", "16");
  cfg.apply("epochs", "2");
  cfg.apply("lr", "0.25");
  cfg.apply("train_ways", "4");
  cfg.apply("train_shots", "3");
  cfg.apply("train_queries", "2");
  cfg.apply("eval_ways", "2");
  cfg.apply("synth_classes", "12");

  ModelConfig mc = cfg.model_config();
  CHECK(mc.mode == AttentionMode::kLocal);
  CHECK(mc.head == HeadType::kBifrn);
  CHECK(mc.channels == 16);

  TrainConfig tc = cfg.train_config();
  CHECK(tc.epochs == 2);
  CHECK(tc.lr == doctest::Approx(0.25));
  CHECK(tc.train_spec.ways == 4);
  CHECK(tc.train_spec.shots == 3);
  CHECK(tc.train_spec.queries == 2);

  CHECK(cfg.eval_spec().ways == 2);
  CHECK(cfg.synth_config().classes == 12);
}
