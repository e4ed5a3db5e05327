#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <vector>

#include "lfs/model.hpp"
#include "lfs/synth.hpp"
#include "lfs/train.hpp"

using namespace lfs;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("lfs_train_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// one shared tiny dataset for the whole binary
const LoadedDataset& shared_dataset() {
  static TempDir dir("data");
  static LoadedDataset data = [] {
    SynthConfig cfg;
    cfg.classes = 8;
    cfg.per_class = 8;
    cfg.size = 20;
    DatasetManifest manifest = synth_generate(cfg, 5, dir.path.string());
    return load_dataset(manifest, 16);
  }();
  return data;
}

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.input_size = 16;
  cfg.channels = 8;
  cfg.fs_ratio = 1.0;  // output grid is 1x1 at 16px, so only ratio 1 is legal
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("statistics helpers: mean and confidence interval") {
  CHECK(mean_of({0.5, 0.7, 0.9}) == doctest::Approx(0.7).epsilon(1e-12));
  CHECK(ci95_of({0.5}) == 0);
  CHECK(ci95_of({}) == 0);

  std::vector<real> values = {0.2, 0.4, 0.6, 0.8};
  // sample stddev = sqrt(sum((x-0.5)^2)/3)
  const double sd = std::sqrt((0.09 + 0.01 + 0.01 + 0.09) / 3);
  CHECK(ci95_of(values) ==
        doctest::Approx(1.96 * sd / std::sqrt(4.0)).epsilon(1e-12));
}

TEST_CASE("an oracle that always answers correctly scores 1 with zero ci") {
  const LoadedDataset& data = shared_dataset();
  EpisodeSpec spec;
  spec.ways = 2;
  spec.shots = 2;
  spec.queries = 3;
  auto oracle_logits = [](const Episode& ep, int ways) {
    std::vector<real> logits(ep.query.size() * ways, 0);
    for (size_t q = 0; q < ep.query.size(); ++q)
      logits[q * ways + ep.query_labels[q]] = 1;
    return logits;
  };
  EvalReport report =
      evaluate_tasks(data.test, spec, 12, 7, 1, oracle_logits);
  CHECK(report.n_tasks == 12);
  CHECK(report.mean_accuracy == 1);
  CHECK(report.ci95 == 0);

  EvalReport one = evaluate_tasks(data.test, spec, 1, 7, 1, oracle_logits);
  CHECK(one.ci95 == 0);
}

TEST_CASE("uniform random logits sit at chance level") {
  const LoadedDataset& data = shared_dataset();
  EpisodeSpec spec;
  spec.ways = 2;
  spec.shots = 1;
  spec.queries = 3;
  // per-episode deterministic pseudo-random logits, label-blind
  auto noise_logits = [](const Episode& ep, int ways) {
    Rng rng(hash_combine(ep.query.size(),
                         static_cast<uint64_t>(
                             ep.query[0].values[0] * 1e6)));
    std::vector<real> logits(ep.query.size() * ways);
    for (auto& v : logits) v = rng.uniform();
    return logits;
  };
  EvalReport report =
      evaluate_tasks(data.test, spec, 400, 11, 2, noise_logits);
  // 400 tasks * 6 queries, p = 1/2: 3 sigma on the mean of task accuracies
  const double sigma = 0.5 / std::sqrt(400.0 * 6);
  CHECK(std::abs(report.mean_accuracy - 0.5) < 4 * sigma);
  // recompute the interval from the per-task trace
  CHECK(report.ci95 ==
        doctest::Approx(ci95_of(report.task_accuracy)).epsilon(1e-12));
}

TEST_CASE("evaluation does not depend on the worker count") {
  const LoadedDataset& data = shared_dataset();
  EpisodeSpec spec;
  spec.ways = 2;
  spec.shots = 1;
  spec.queries = 2;
  Model model = Model::build(tiny_model());
  init_params(model.params(), 3);

  auto run = [&](int workers) {
    return evaluate_model(model, data, data.test, spec, 10, 21, workers);
  };
  EvalReport w1 = run(1);
  EvalReport w4 = run(4);
  CHECK(w1.task_accuracy == w4.task_accuracy);
  CHECK(w1.mean_accuracy == w4.mean_accuracy);
  CHECK(w1.ci95 == w4.ci95);
}

TEST_CASE("zero learning rate leaves parameters untouched") {
  const LoadedDataset& data = shared_dataset();
  Model model = Model::build(tiny_model());
  init_params(model.params(), 9);
  std::vector<std::vector<real>> before;
  for (const auto& p : model.params().items()) before.push_back(p.value.data());

  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.episodes_per_epoch = 3;
  cfg.train_spec = {2, 1, 1};
  cfg.val_spec = {2, 1, 1};
  cfg.lr = 0;
  cfg.weight_decay = 0;
  cfg.validate_every = 5;
  cfg.seed = 13;
  TrainResult result = train_model(model, data, cfg);
  CHECK(result.trace.size() == 3);

  size_t k = 0;
  for (const auto& p : model.params().items()) {
    if (p.name.find("running") == std::string::npos)
      CHECK(p.value.data() == before[k]);
    ++k;
  }
}

TEST_CASE("a short run decreases the loss on a learnable problem") {
  const LoadedDataset& data = shared_dataset();
  ModelConfig mc = tiny_model();
  mc.head = HeadType::kFrn;
  Model model = Model::build(mc);
  init_params(model.params(), 17);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.episodes_per_epoch = 12;
  cfg.train_spec = {2, 2, 2};
  cfg.val_spec = {2, 1, 1};
  cfg.lr = 0.05;
  cfg.validate_every = 2;
  cfg.val_episodes = 4;
  cfg.seed = 19;
  TrainResult result = train_model(model, data, cfg);
  REQUIRE(result.trace.size() == 24);

  real first = 0, last = 0;
  for (int i = 0; i < 6; ++i) {
    first += result.trace[i].loss;
    last += result.trace[result.trace.size() - 1 - i].loss;
  }
  CHECK(last < first);
  CHECK(result.best_val_accuracy > 0);
}

TEST_CASE("training writes checkpoints and a parseable trace") {
  const LoadedDataset& data = shared_dataset();
  TempDir out("ckpt");
  Model model = Model::build(tiny_model());
  init_params(model.params(), 23);

  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.episodes_per_epoch = 2;
  cfg.train_spec = {2, 1, 1};
  cfg.val_spec = {2, 1, 1};
  cfg.lr = 0.01;
  cfg.validate_every = 1;
  cfg.val_episodes = 2;
  cfg.seed = 29;
  cfg.out_dir = out.path.string();
  TrainResult result = train_model(model, data, cfg);
  CHECK(fs::exists(result.last_checkpoint));
  CHECK(fs::exists(result.best_checkpoint));

  // checkpoint loads back into a fresh model of the same shape
  Model fresh = Model::build(tiny_model());
  load_checkpoint(fresh.params(), result.last_checkpoint);
  for (const auto& p : model.params().items())
    CHECK(fresh.params().tensor(p.name).data() == p.value.data());

  write_loss_trace(result.trace, (out.path / "trace.tsv").string());
  std::ifstream in(out.path / "trace.tsv");
  int rows = 0;
  std::string line;
  while (std::getline(in, line)) {
    int epoch, episode;
    double loss;
    REQUIRE(std::sscanf(line.c_str(), "%d\t%d\t%lf", &epoch, &episode,
                        &loss) == 3);
    ++rows;
  }
  CHECK(rows == 4);
}

TEST_CASE("identical seeds give identical training runs") {
  const LoadedDataset& data = shared_dataset();
  auto run = [&] {
    Model model = Model::build(tiny_model());
    init_params(model.params(), 31);
    TrainConfig cfg;
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 4;
    cfg.train_spec = {2, 1, 1};
    cfg.val_spec = {2, 1, 1};
    cfg.lr = 0.02;
    cfg.validate_every = 2;
    cfg.seed = 37;
    TrainResult result = train_model(model, data, cfg);
    std::vector<real> wrapped;
    for (const auto& r : result.trace) wrapped.push_back(r.loss);
    for (const auto& p : model.params().items())
      wrapped.insert(wrapped.end(), p.value.data().begin(),
                     p.value.data().end());
    return wrapped;
  };
  CHECK(run() == run());
}

TEST_CASE("exploding updates abort with a divergence error") {
  const LoadedDataset& data = shared_dataset();
  Model model = Model::build(tiny_model());
  init_params(model.params(), 41);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.episodes_per_epoch = 10;
  cfg.train_spec = {2, 1, 1};
  cfg.val_spec = {2, 1, 1};
  cfg.lr = 1e12;
  cfg.seed = 43;
  CHECK_THROWS_AS(train_model(model, data, cfg), TrainingDivergenceError);
}

TEST_CASE("report writers produce the pinned format") {
  TempDir out("report");
  EvalReport report;
  report.n_tasks = 3;
  report.task_accuracy = {0.5, 0.75, 1.0};
  report.mean_accuracy = mean_of(report.task_accuracy);
  report.ci95 = ci95_of(report.task_accuracy);
  const auto path = (out.path / "eval.txt").string();
  write_eval_report(report, path);
  std::ifstream in(path);
  std::string l1, l2, l3;
  std::getline(in, l1);
  std::getline(in, l2);
  std::getline(in, l3);
  CHECK(l1 == "n_tasks=3");
  CHECK(l2.substr(0, 5) == "mean=");
  CHECK(l3.substr(0, 5) == "ci95=");
  CHECK(std::stod(l2.substr(5)) == doctest::Approx(0.75));

  write_task_trace(report, (out.path / "tasks.tsv").string());
  std::ifstream tasks(out.path / "tasks.tsv");
  std::string line;
  int rows = 0;
  while (std::getline(tasks, line)) ++rows;
  CHECK(rows == 3);
}
