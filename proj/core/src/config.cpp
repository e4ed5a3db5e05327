#include "lfs/config.hpp"

#include <fstream>
#include <sstream>

namespace lfs {

RunConfig::RunConfig() {
  values_ = {
      {"mode", "lfs"},
      {"fs_ratio", "0.5"},
      {"heads", "1"},
      {"layers", "1"},
      {"kernel", "3"},
      {"mlp_multiplier", "2"},
      {"head", "frn"},
      {"normalize_rows", "true"},
      {"channels", "64"},
      {"input_size", "32"},
      {"epochs", "30"},
      {"episodes_per_epoch", "100"},
      {"lr", "0.1"},
      {"momentum", "0.9"},
      {"weight_decay", "0.0005"},
      {"lr_decay_epochs", "10"},
      {"validate_every", "5"},
      {"val_episodes", "40"},
      {"train_ways", "5"},
      {"train_shots", "5"},
      {"train_queries", "5"},
      {"val_ways", "5"},
      {"val_shots", "5"},
      {"val_queries", "5"},
      {"eval_ways", "5"},
      {"eval_shots", "5"},
      {"eval_queries", "15"},
      {"n_tasks", "200"},
      {"workers", "1"},
      {"seed", "1"},
      {"manifest", ""},
      {"checkpoint", ""},
      {"out_dir", "out"},
      {"image", ""},
      {"synth_classes", "20"},
      {"synth_per_class", "30"},
      {"synth_size", "32"},
      {"synth_fg_fraction", "0.45"},
      {"synth_clutter", "0.5"},
  };
}

void RunConfig::apply(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end())
    throw ValidationError("unknown config key: " + key);
  it->second = value;
}

void RunConfig::apply_assignment(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ValidationError("expected key=value, got: " + assignment);
  auto trim = [](std::string s) {
    const size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  apply(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

void RunConfig::load_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config: " + path);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    // trim
    const size_t b = line.find_first_not_of(" \t\r");
    if (b == std::string::npos) continue;
    const size_t e = line.find_last_not_of(" \t\r");
    line = line.substr(b, e - b + 1);
    try {
      apply_assignment(line);
    } catch (const ValidationError& err) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": " +
                            err.what());
    }
  }
}

void RunConfig::write_resolved(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open resolved config for writing: " + path);
  for (const auto& [key, value] : values_) os << key << "=" << value << "\n";
  if (!os) throw IoError("resolved config write failed: " + path);
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end())
    throw ValidationError("unknown config key: " + key);
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& raw = get(key);
  try {
    size_t used = 0;
    const int64_t v = std::stoll(raw, &used);
    if (used != raw.size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': bad integer '" + raw +
                          "'");
  }
}

real RunConfig::get_real(const std::string& key) const {
  const std::string& raw = get(key);
  try {
    size_t used = 0;
    const double v = std::stod(raw, &used);
    if (used != raw.size()) throw std::invalid_argument("trailing");
    return static_cast<real>(v);
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "': bad number '" + raw +
                          "'");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& raw = get(key);
  if (raw == "true" || raw == "1") return true;
  if (raw == "false" || raw == "0") return false;
  throw ValidationError("config key '" + key + "': bad boolean '" + raw + "'");
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.input_size = get_int("input_size");
  m.channels = get_int("channels");
  m.mode = attention_mode_from_string(get("mode"));
  m.fs_ratio = get_real("fs_ratio");
  m.heads = static_cast<int>(get_int("heads"));
  m.layers = static_cast<int>(get_int("layers"));
  m.kernel = static_cast<int>(get_int("kernel"));
  m.mlp_multiplier = static_cast<int>(get_int("mlp_multiplier"));
  m.head = head_type_from_string(get("head"));
  m.normalize_rows = get_bool("normalize_rows");
  m.seed = static_cast<uint64_t>(get_int("seed"));
  m.validate();
  return m;
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t;
  t.epochs = static_cast<int>(get_int("epochs"));
  t.episodes_per_epoch = static_cast<int>(get_int("episodes_per_epoch"));
  t.train_spec = {static_cast<int>(get_int("train_ways")),
                  static_cast<int>(get_int("train_shots")),
                  static_cast<int>(get_int("train_queries"))};
  t.lr = get_real("lr");
  t.momentum = get_real("momentum");
  t.weight_decay = get_real("weight_decay");
  t.lr_decay_epochs = static_cast<int>(get_int("lr_decay_epochs"));
  t.validate_every = static_cast<int>(get_int("validate_every"));
  t.val_episodes = static_cast<int>(get_int("val_episodes"));
  t.val_spec = {static_cast<int>(get_int("val_ways")),
                static_cast<int>(get_int("val_shots")),
                static_cast<int>(get_int("val_queries"))};
  t.seed = static_cast<uint64_t>(get_int("seed"));
  t.out_dir = get("out_dir");
  t.validate();
  return t;
}

EpisodeSpec RunConfig::eval_spec() const {
  EpisodeSpec spec{static_cast<int>(get_int("eval_ways")),
                   static_cast<int>(get_int("eval_shots")),
                   static_cast<int>(get_int("eval_queries"))};
  spec.validate();
  return spec;
}

SynthConfig RunConfig::synth_config() const {
  SynthConfig s;
  s.classes = static_cast<int>(get_int("synth_classes"));
  s.per_class = static_cast<int>(get_int("synth_per_class"));
  s.size = get_int("synth_size");
  s.fg_fraction = get_real("synth_fg_fraction");
  s.clutter_level = get_real("synth_clutter");
  return s;
}

}  // namespace lfs
