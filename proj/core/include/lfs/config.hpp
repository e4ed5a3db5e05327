#pragma once

#include <map>
#include <string>

#include "lfs/model.hpp"
#include "lfs/synth.hpp"
#include "lfs/train.hpp"

namespace lfs {

// Flat key=value run configuration. Every key has a default; unknown keys
// are rejected so typos fail loudly. The resolved table is written next to
// each command's outputs.
class RunConfig {
 public:
  RunConfig();  // defaults

  void apply(const std::string& key, const std::string& value);
  void apply_assignment(const std::string& assignment);  // "key=value"
  void load_file(const std::string& path);
  void write_resolved(const std::string& path) const;

  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  real get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  ModelConfig model_config() const;
  TrainConfig train_config() const;
  EpisodeSpec eval_spec() const;
  SynthConfig synth_config() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace lfs
