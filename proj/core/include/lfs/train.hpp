#pragma once

#include <functional>
#include <string>
#include <tuple>
#include <vector>

#include "lfs/dataset.hpp"
#include "lfs/model.hpp"

namespace lfs {

struct TrainConfig {
  int epochs = 30;
  int episodes_per_epoch = 100;
  EpisodeSpec train_spec{5, 5, 5};
  real lr = 0.1;
  real momentum = 0.9;
  real weight_decay = 5e-4;
  int lr_decay_epochs = 10;  // divide lr by 10 every this many epochs
  int validate_every = 5;    // epochs between validation passes
  int val_episodes = 40;
  EpisodeSpec val_spec{5, 5, 5};
  uint64_t seed = 1;
  std::string out_dir;  // receives best.ckpt / last.ckpt / trace
  void validate() const;
};

struct LossRecord {
  int epoch;
  int episode;
  real loss;
};

struct TrainResult {
  std::vector<LossRecord> trace;
  real best_val_accuracy = 0;
  std::string best_checkpoint;  // path, empty if out_dir empty
  std::string last_checkpoint;
};

// Episodic training with the Nesterov optimizer and step lr decay. The best
// validation checkpoint and the end-of-epoch checkpoint are kept on disk, so
// a later divergence still leaves a usable model behind.
TrainResult train_model(Model& model, const LoadedDataset& dataset,
                        const TrainConfig& cfg);

// epoch \t episode \t loss, 9 significant digits
void write_loss_trace(const std::vector<LossRecord>& trace,
                      const std::string& path);

struct EvalReport {
  int n_tasks = 0;
  real mean_accuracy = 0;
  real ci95 = 0;  // 1.96 * sample stddev / sqrt(n); 0 when n == 1
  std::vector<real> task_accuracy;
};

// Episode logits per query, row-major [n_query, ways]; must be thread-safe.
using LogitsFn =
    std::function<std::vector<real>(const Episode& episode, int ways)>;

// Samples n_tasks episodes with per-task rng (seed, task index), applies
// eval-time augmentation, scores argmax accuracy, and aggregates. Identical
// results regardless of worker count.
EvalReport evaluate_tasks(const LoadedSplit& split, const EpisodeSpec& spec,
                          int n_tasks, uint64_t seed, int workers,
                          const LogitsFn& logits_fn);

// The model-backed evaluator (inference-mode batch norm).
EvalReport evaluate_model(Model& model, const LoadedDataset& dataset,
                          const LoadedSplit& split, const EpisodeSpec& spec,
                          int n_tasks, uint64_t seed, int workers);

// key=value block (n_tasks, mean, ci95)
void write_eval_report(const EvalReport& report, const std::string& path);
// task index \t accuracy
void write_task_trace(const EvalReport& report, const std::string& path);

real mean_of(const std::vector<real>& values);
real ci95_of(const std::vector<real>& values);

}  // namespace lfs
