#include "lfs/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

namespace lfs {

void TrainConfig::validate() const {
  if (epochs < 1 || episodes_per_epoch < 1)
    throw ValidationError("train config: epochs/episodes must be positive");
  if (!(lr >= 0) || !(momentum >= 0) || !(weight_decay >= 0))
    throw ValidationError("train config: negative hyperparameter");
  if (lr_decay_epochs < 1 || validate_every < 1 || val_episodes < 1)
    throw ValidationError("train config: decay/validation cadence invalid");
  train_spec.validate();
  val_spec.validate();
}

real mean_of(const std::vector<real>& values) {
  if (values.empty()) return 0;
  real acc = 0;
  for (real v : values) acc += v;
  return acc / static_cast<real>(values.size());
}

real ci95_of(const std::vector<real>& values) {
  const size_t n = values.size();
  if (n < 2) return 0;
  const real mean = mean_of(values);
  real ss = 0;
  for (real v : values) ss += (v - mean) * (v - mean);
  const real stddev = std::sqrt(ss / static_cast<real>(n - 1));
  return real{1.96} * stddev / std::sqrt(static_cast<real>(n));
}

namespace {

Rng episode_stream(uint64_t seed, const char* role, uint64_t index) {
  return Rng(hash_combine(hash_combine(seed, hash_str(role)), index));
}

struct EpisodeTensors {
  Tensor support;
  std::vector<int> support_labels;
  Tensor query;
  std::vector<int> query_labels;
};

EpisodeTensors prepare_episode(const Episode& episode,
                               const LoadedDataset& dataset, Rng& rng,
                               bool train) {
  std::vector<Image> support, query;
  support.reserve(episode.support.size());
  query.reserve(episode.query.size());
  for (const auto& image : episode.support)
    support.push_back(augment_image(image, rng, train));
  for (const auto& image : episode.query)
    query.push_back(augment_image(image, rng, train));
  EpisodeTensors out;
  out.support = images_to_tensor(support, dataset);
  out.query = images_to_tensor(query, dataset);
  out.support_labels = episode.support_labels;
  out.query_labels = episode.query_labels;
  return out;
}

real argmax_accuracy(const std::vector<real>& logits,
                     const std::vector<int>& labels, int ways) {
  const size_t n = labels.size();
  size_t correct = 0;
  for (size_t i = 0; i < n; ++i) {
    int best = 0;
    for (int c = 1; c < ways; ++c)
      if (logits[i * ways + c] > logits[i * ways + best]) best = c;
    if (best == labels[i]) ++correct;
  }
  return static_cast<real>(correct) / static_cast<real>(n);
}

}  // namespace

EvalReport evaluate_tasks(const LoadedSplit& split, const EpisodeSpec& spec,
                          int n_tasks, uint64_t seed, int workers,
                          const LogitsFn& logits_fn) {
  spec.validate();
  if (n_tasks < 1) throw ValidationError("evaluate: n_tasks must be positive");
  workers = std::clamp(workers, 1, n_tasks);
  std::vector<real> accuracy(n_tasks);

  auto run_task = [&](int task) {
    Rng rng = episode_stream(seed, "eval", static_cast<uint64_t>(task));
    Episode episode = sample_episode(split, spec, rng);
    std::vector<real> logits = logits_fn(episode, spec.ways);
    if (logits.size() != episode.query_labels.size() * spec.ways)
      throw DimensionError("evaluate: logits size mismatch");
    accuracy[task] = argmax_accuracy(logits, episode.query_labels, spec.ways);
  };

  if (workers == 1) {
    for (int t = 0; t < n_tasks; ++t) run_task(t);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
      pool.emplace_back([&, w]() {
        try {
          for (int t = w; t < n_tasks; t += workers) run_task(t);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  EvalReport report;
  report.n_tasks = n_tasks;
  report.task_accuracy = std::move(accuracy);
  report.mean_accuracy = mean_of(report.task_accuracy);
  report.ci95 = ci95_of(report.task_accuracy);
  return report;
}

EvalReport evaluate_model(Model& model, const LoadedDataset& dataset,
                          const LoadedSplit& split, const EpisodeSpec& spec,
                          int n_tasks, uint64_t seed, int workers) {
  LogitsFn fn = [&](const Episode& episode, int ways) {
    // eval-time augmentation is deterministic, the rng is just plumbing
    Rng rng(0);
    EpisodeTensors t = prepare_episode(episode, dataset, rng, /*train=*/false);
    Tensor logits = model.episode_logits(t.support, t.support_labels, t.query,
                                         ways, /*train=*/false);
    return logits.data();
  };
  return evaluate_tasks(split, spec, n_tasks, seed, workers, fn);
}

TrainResult train_model(Model& model, const LoadedDataset& dataset,
                        const TrainConfig& cfg) {
  cfg.validate();
  TrainResult result;
  const bool persist = !cfg.out_dir.empty();
  std::string best_path, last_path;
  if (persist) {
    std::filesystem::create_directories(cfg.out_dir);
    best_path =
        (std::filesystem::path(cfg.out_dir) / "best.ckpt").string();
    last_path =
        (std::filesystem::path(cfg.out_dir) / "last.ckpt").string();
  }
  result.best_val_accuracy = -1;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    SgdConfig sgd;
    sgd.lr = cfg.lr / std::pow(real{10},
                               static_cast<real>(epoch / cfg.lr_decay_epochs));
    sgd.momentum = cfg.momentum;
    sgd.weight_decay = cfg.weight_decay;

    for (int episode_i = 0; episode_i < cfg.episodes_per_epoch; ++episode_i) {
      const uint64_t index = static_cast<uint64_t>(epoch) *
                                 static_cast<uint64_t>(cfg.episodes_per_epoch) +
                             static_cast<uint64_t>(episode_i);
      Rng rng = episode_stream(cfg.seed, "train", index);
      Episode episode = sample_episode(dataset.train, cfg.train_spec, rng);
      EpisodeTensors t = prepare_episode(episode, dataset, rng, /*train=*/true);
      real loss_value;
      try {
        Tensor logits = model.episode_logits(t.support, t.support_labels,
                                             t.query, cfg.train_spec.ways,
                                             /*train=*/true);
        Tensor loss = softmax_cross_entropy(logits, t.query_labels);
        loss_value = loss.value();
        if (!std::isfinite(loss_value))
          throw NonFiniteError("loss is not finite");
        loss.backward();
        sgd_nesterov_step(model.params(), sgd);
      } catch (const NonFiniteError& e) {
        throw TrainingDivergenceError("diverged at epoch " +
                                      std::to_string(epoch) + " episode " +
                                      std::to_string(episode_i) + ": " +
                                      e.what());
      }
      result.trace.push_back({epoch, episode_i, loss_value});
    }

    if (persist) {
      save_checkpoint(model.params(), last_path);
      result.last_checkpoint = last_path;
      write_loss_trace(result.trace,
                       (std::filesystem::path(cfg.out_dir) / "loss.tsv")
                           .string());
    }

    const bool last_epoch = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.validate_every == 0 || last_epoch) {
      const LoadedSplit& val_split =
          dataset.val.classes.empty() ? dataset.train : dataset.val;
      EvalReport report;
      try {
        report = evaluate_model(model, dataset, val_split, cfg.val_spec,
                                cfg.val_episodes,
                                hash_combine(cfg.seed, hash_str("val")),
                                /*workers=*/1);
      } catch (const NonFiniteError& e) {
        throw TrainingDivergenceError("diverged during validation after epoch " +
                                      std::to_string(epoch) + ": " + e.what());
      }
      if (report.mean_accuracy > result.best_val_accuracy) {
        result.best_val_accuracy = report.mean_accuracy;
        if (persist) {
          save_checkpoint(model.params(), best_path);
          result.best_checkpoint = best_path;
        }
      }
    }
  }
  return result;
}

void write_loss_trace(const std::vector<LossRecord>& trace,
                      const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open trace for writing: " + path);
  char buf[80];
  for (const auto& rec : trace) {
    std::snprintf(buf, sizeof(buf), "%d\t%d\t%.9g\n", rec.epoch, rec.episode,
                  static_cast<double>(rec.loss));
    os << buf;
  }
  if (!os) throw IoError("trace write failed: " + path);
}

void write_eval_report(const EvalReport& report, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open report for writing: " + path);
  char buf[80];
  os << "n_tasks=" << report.n_tasks << "\n";
  std::snprintf(buf, sizeof(buf), "mean=%.9g\n",
                static_cast<double>(report.mean_accuracy));
  os << buf;
  std::snprintf(buf, sizeof(buf), "ci95=%.9g\n",
                static_cast<double>(report.ci95));
  os << buf;
  if (!os) throw IoError("report write failed: " + path);
}

void write_task_trace(const EvalReport& report, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open task trace for writing: " + path);
  char buf[80];
  for (size_t i = 0; i < report.task_accuracy.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%zu\t%.9g\n", i,
                  static_cast<double>(report.task_accuracy[i]));
    os << buf;
  }
  if (!os) throw IoError("task trace write failed: " + path);
}

}  // namespace lfs
