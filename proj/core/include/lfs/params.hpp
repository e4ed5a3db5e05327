#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lfs/errors.hpp"
#include "lfs/tensor.hpp"

namespace lfs {

// One named tensor. Buffers (trainable=false) ride along in checkpoints but
// are skipped by the optimizer and the gradient checker.
struct Parameter {
  std::string name;
  Tensor value;
  std::vector<real> momentum;  // lazily sized by the optimizer
  bool trainable = true;
};

class ParameterStore {
 public:
  Tensor& add(const std::string& name, Tensor value, bool trainable = true);
  bool has(const std::string& name) const;
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  Tensor& tensor(const std::string& name) { return get(name).value; }
  const Tensor& tensor(const std::string& name) const {
    return get(name).value;
  }

  // registration order, which is the checkpoint record order
  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }
  std::vector<std::string> names() const;

  int64_t total_values(bool trainable_only) const;
  void zero_grads();

 private:
  std::vector<Parameter> items_;
  std::vector<size_t> index_;  // probe by linear scan is fine at ~50 entries
};

void save_checkpoint(const ParameterStore& store, const std::string& path);
void load_checkpoint(ParameterStore& store, const std::string& path);

struct SgdConfig {
  real lr = 1e-3;
  real momentum = 0.9;
  real weight_decay = 0.0;
};

// Nesterov update: g = grad + wd*w; buf = m*buf + g; w -= lr*(g + m*buf).
// Non-finite gradients abort with TrainingDivergenceError. Grads are cleared.
void sgd_nesterov_step(ParameterStore& store, const SgdConfig& config);

struct GradCheckConfig {
  real step = 1e-4;
  real tolerance = 1e-4;
  real denom_floor = 1e-8;
  // Entries above tolerance*refine_margin at `step` are re-measured at
  // step/10, step/100, ... up to `refinements` times and the best agreement
  // is kept. A relu or pooling kink inside the difference window contaminates
  // the secant estimate at one step size but not below it, whereas a wrong
  // analytic gradient disagrees at every step size. The margin keeps refined
  // entries comfortably inside tolerance instead of censored just below it.
  int refinements = 3;
  real refine_margin = 0.05;
  std::vector<std::string> include;  // empty means every trainable parameter
};

struct GradCheckResult {
  bool ok = false;
  int64_t values_checked = 0;
  real worst_rel_err = 0;
  std::string worst_name;
  int64_t worst_index = -1;
  real worst_analytic = 0;
  real worst_numeric = 0;
};

// Central differences over every entry of the selected parameters. The loss
// closure must rebuild its graph per call. Buffer contents (running stats)
// are snapshotted before each evaluation so side effects cannot skew f(w±h).
GradCheckResult grad_check(ParameterStore& store,
                           const std::function<Tensor()>& loss_fn,
                           const GradCheckConfig& config);

}  // namespace lfs
