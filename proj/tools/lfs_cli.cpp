#include <CLI11.hpp>

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "lfs/config.hpp"
#include "lfs/model.hpp"
#include "lfs/synth.hpp"
#include "lfs/train.hpp"

namespace fs = std::filesystem;
using namespace lfs;

namespace {

// exit codes: 0 ok, 2 bad config, 3 I/O, 4 divergence, 5 checkpoint
// mismatch, 6 gradient check failure
constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kIoError = 3;
constexpr int kDivergence = 4;
constexpr int kMismatch = 5;
constexpr int kGradFailure = 6;

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_file, "key=value config file");
  cmd->add_option("--set", args.sets, "override one config key (repeatable)");
}

RunConfig resolve(const CommonArgs& args) {
  RunConfig cfg;
  if (!args.config_file.empty()) cfg.load_file(args.config_file);
  for (const auto& assignment : args.sets) cfg.apply_assignment(assignment);
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

LoadedDataset load_from_config(const RunConfig& cfg) {
  const std::string manifest_path = cfg.get("manifest");
  if (manifest_path.empty())
    throw ValidationError("manifest path is required (--set manifest=...)");
  DatasetManifest manifest = load_manifest(manifest_path);
  return load_dataset(manifest, cfg.get_int("input_size"));
}

Model build_model(const RunConfig& cfg) {
  ModelConfig mc = cfg.model_config();
  mc.validate();
  return Model::build(mc);
}

int run_synth(const CommonArgs& common) {
  RunConfig cfg = resolve(common);
  const std::string out_dir = cfg.get("out_dir");
  if (out_dir.empty())
    throw ValidationError("out_dir is required (--set out_dir=...)");
  ensure_dir(out_dir);
  DatasetManifest manifest =
      synth_generate(cfg.synth_config(), cfg.get_int("seed"), out_dir);
  cfg.write_resolved((fs::path(out_dir) / "resolved.cfg").string());
  std::printf("wrote %zu images under %s\n", manifest.entries.size(),
              out_dir.c_str());
  return kOk;
}

int run_train(const CommonArgs& common) {
  RunConfig cfg = resolve(common);
  const std::string out_dir = cfg.get("out_dir");
  if (out_dir.empty())
    throw ValidationError("out_dir is required (--set out_dir=...)");
  ensure_dir(out_dir);
  cfg.write_resolved((fs::path(out_dir) / "resolved.cfg").string());

  LoadedDataset dataset = load_from_config(cfg);
  Model model = build_model(cfg);
  init_params(model.params(), cfg.get_int("seed"));

  const std::string start = cfg.get("checkpoint");
  if (!start.empty()) load_checkpoint(model.params(), start);

  TrainConfig tc = cfg.train_config();
  tc.out_dir = out_dir;
  TrainResult result;
  try {
    result = train_model(model, dataset, tc);
  } catch (const TrainingDivergenceError& e) {
    // artifacts from completed epochs stay on disk
    std::fprintf(stderr, "error: %s\n", e.what());
    return kDivergence;
  }
  std::printf("best_val_accuracy=%.9g\n",
              static_cast<double>(result.best_val_accuracy));
  std::printf("last=%s\n", result.last_checkpoint.c_str());
  std::printf("best=%s\n", result.best_checkpoint.c_str());
  return kOk;
}

int run_eval(const CommonArgs& common) {
  RunConfig cfg = resolve(common);
  const std::string ckpt = cfg.get("checkpoint");
  if (ckpt.empty())
    throw ValidationError("checkpoint is required (--set checkpoint=...)");

  LoadedDataset dataset = load_from_config(cfg);
  Model model = build_model(cfg);
  init_params(model.params(), cfg.get_int("seed"));
  load_checkpoint(model.params(), ckpt);

  EvalReport report = evaluate_model(
      model, dataset, dataset.test, cfg.eval_spec(),
      static_cast<int>(cfg.get_int("n_tasks")), cfg.get_int("seed"),
      static_cast<int>(cfg.get_int("workers")));

  const std::string out_dir = cfg.get("out_dir");
  if (!out_dir.empty()) {
    ensure_dir(out_dir);
    cfg.write_resolved((fs::path(out_dir) / "resolved.cfg").string());
    write_eval_report(report, (fs::path(out_dir) / "eval.txt").string());
    write_task_trace(report, (fs::path(out_dir) / "tasks.tsv").string());
  }
  std::printf("n_tasks=%d\n", report.n_tasks);
  std::printf("mean=%.9g\n", static_cast<double>(report.mean_accuracy));
  std::printf("ci95=%.9g\n", static_cast<double>(report.ci95));
  return kOk;
}

// train + eval for one row of the sweep; returns "mean ci95" or "-"
struct AblateRow {
  std::string label;
  std::string one_shot = "-";
  std::string five_shot = "-";
  bool ok = false;
};

AblateRow ablate_row(RunConfig cfg, const std::string& label,
                     const std::string& out_dir) {
  AblateRow row;
  row.label = label;
  try {
    ensure_dir(out_dir);
    LoadedDataset dataset = load_from_config(cfg);
    Model model = build_model(cfg);
    init_params(model.params(), cfg.get_int("seed"));
    TrainConfig tc = cfg.train_config();
    tc.out_dir = out_dir;
    train_model(model, dataset, tc);

    const int n_tasks = static_cast<int>(cfg.get_int("n_tasks"));
    const int workers = static_cast<int>(cfg.get_int("workers"));
    char buffer[64];
    for (int shots : {1, 5}) {
      EpisodeSpec spec = cfg.eval_spec();
      spec.shots = shots;
      EvalReport report =
          evaluate_model(model, dataset, dataset.test, spec, n_tasks,
                         cfg.get_int("seed"), workers);
      std::snprintf(buffer, sizeof buffer, "%.4f +- %.4f",
                    static_cast<double>(report.mean_accuracy),
                    static_cast<double>(report.ci95));
      (shots == 1 ? row.one_shot : row.five_shot) = buffer;
    }
    row.ok = true;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "row %s failed: %s\n", label.c_str(), e.what());
  }
  return row;
}

int run_ablate(const CommonArgs& common) {
  RunConfig base = resolve(common);
  const std::string out_dir = base.get("out_dir");
  if (out_dir.empty())
    throw ValidationError("out_dir is required (--set out_dir=...)");
  ensure_dir(out_dir);
  base.write_resolved((fs::path(out_dir) / "resolved.cfg").string());

  std::vector<AblateRow> rows;
  for (const std::string mode : {"self", "local", "select", "lfs"}) {
    RunConfig cfg = base;
    cfg.apply("mode", mode);
    rows.push_back(ablate_row(cfg, "mode=" + mode,
                              (fs::path(out_dir) / ("mode_" + mode)).string()));
  }
  for (const std::string ratio : {"0.1", "0.3", "0.5", "0.7", "0.9", "1.0"}) {
    RunConfig cfg = base;
    cfg.apply("mode", "lfs");
    cfg.apply("fs_ratio", ratio);
    rows.push_back(
        ablate_row(cfg, "fs_ratio=" + ratio,
                   (fs::path(out_dir) / ("ratio_" + ratio)).string()));
  }

  FILE* table = std::fopen(
      (fs::path(out_dir) / "ablate.tsv").string().c_str(), "w");
  if (!table) throw IoError("cannot write ablate.tsv");
  std::fprintf(table, "row\t1shot\t5shot\n");
  int succeeded = 0;
  for (const auto& row : rows) {
    std::fprintf(table, "%s\t%s\t%s\n", row.label.c_str(),
                 row.one_shot.c_str(), row.five_shot.c_str());
    std::printf("%s\t%s\t%s\n", row.label.c_str(), row.one_shot.c_str(),
                row.five_shot.c_str());
    succeeded += row.ok ? 1 : 0;
  }
  std::fclose(table);
  return succeeded > 0 ? kOk : kDivergence;
}

int run_heatmap(const CommonArgs& common) {
  RunConfig cfg = resolve(common);
  const std::string image_path = cfg.get("image");
  if (image_path.empty())
    throw ValidationError("image is required (--set image=...)");
  const std::string ckpt = cfg.get("checkpoint");
  const std::string out_dir = cfg.get("out_dir");
  if (out_dir.empty())
    throw ValidationError("out_dir is required (--set out_dir=...)");
  ensure_dir(out_dir);

  Model model = build_model(cfg);
  init_params(model.params(), cfg.get_int("seed"));
  if (!ckpt.empty()) load_checkpoint(model.params(), ckpt);

  Image raw = read_pnm(image_path);
  const int64_t size = cfg.get_int("input_size");
  Image resized = resize_bilinear(raw, size, size);
  if (resized.channels == 1) {
    Image rgb;
    rgb.channels = 3;
    rgb.height = size;
    rgb.width = size;
    rgb.values.reserve(3 * size * size);
    for (int c = 0; c < 3; ++c)
      rgb.values.insert(rgb.values.end(), resized.values.begin(),
                        resized.values.end());
    resized = rgb;
  }

  Tensor batch = Tensor::zeros({1, 3, size, size});
  batch.mutable_data() = resized.values;
  AttentionTrace trace;
  auto pools = model.feature_pools(batch, /*train=*/false, &trace);

  const AttentionConfig att = model.config().attention();
  const int64_t gh = att.grid_h, gw = att.grid_w;

  // channel energy per token: L2 norm of each pooled row, minmax normalized
  std::vector<real> energy(gh * gw, 0);
  {
    const auto& pool = pools[0].data();
    const int64_t d = pools[0].dim(1);
    real lo = 0, hi = 0;
    for (int64_t t = 0; t < gh * gw; ++t) {
      real ss = 0;
      for (int64_t j = 0; j < d; ++j) ss += pool[t * d + j] * pool[t * d + j];
      energy[t] = std::sqrt(ss);
      if (t == 0) lo = hi = energy[t];
      lo = std::min(lo, energy[t]);
      hi = std::max(hi, energy[t]);
    }
    for (auto& v : energy) v = hi > lo ? (v - lo) / (hi - lo) : real{0};
  }

  Tensor importance = attention_heatmap(trace, gh, gw);

  // nearest-neighbor upscale back to the source image dimensions
  const int64_t oh = raw.height, ow = raw.width;
  auto upscale = [&](const std::vector<real>& grid) {
    std::vector<real> out(oh * ow);
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t x = 0; x < ow; ++x)
        out[y * ow + x] = grid[(y * gh / oh) * gw + (x * gw / ow)];
    return out;
  };

  write_pgm_ascii(upscale(energy), oh, ow,
                  (fs::path(out_dir) / "energy.pgm").string());
  write_pgm_ascii(upscale(importance.data()), oh, ow,
                  (fs::path(out_dir) / "importance.pgm").string());
  cfg.write_resolved((fs::path(out_dir) / "resolved.cfg").string());
  std::printf("grid=%lldx%lld\n", static_cast<long long>(gh),
              static_cast<long long>(gw));
  std::printf("wrote %s and %s\n",
              (fs::path(out_dir) / "energy.pgm").string().c_str(),
              (fs::path(out_dir) / "importance.pgm").string().c_str());
  return kOk;
}

int run_gradcheck(const CommonArgs& common, real step, bool inject_error) {
  RunConfig cfg = resolve(common);
  Model model = build_model(cfg);
  init_params(model.params(), cfg.get_int("seed"));

  const int ways = 2, shots = 1, queries = 1;
  const int64_t size = cfg.get_int("input_size");
  Rng rng(hash_combine(cfg.get_int("seed"), hash_str("gradcheck")));
  auto draw = [&](int64_t count) {
    Tensor t = Tensor::zeros({count, 3, size, size});
    for (auto& v : t.mutable_data())
      v = static_cast<real>(rng.normal()) * real{0.5};
    return t;
  };
  Tensor support = draw(ways * shots);
  Tensor query = draw(ways * queries);
  std::vector<int> support_labels = {0, 1};
  std::vector<int> query_labels = {0, 1};

  auto loss = [&] {
    Tensor logits = model.episode_logits(support, support_labels, query, ways,
                                         /*train=*/true);
    Tensor value = softmax_cross_entropy(logits, query_labels);
    if (inject_error && value.node()->parents.size() == 1) {
      // negative control: corrupt the final backward hook
      auto original = value.node()->backward_fn;
      value.node()->backward_fn = [original](TensorNode& node) {
        original(node);
        auto& grad = node.parents[0]->grad;
        if (!grad.empty()) grad[0] += real{0.5};
      };
    }
    return value;
  };

  GradCheckConfig gc;
  gc.step = step;

  // sweep per parameter group so the report pinpoints offenders
  bool all_ok = true;
  real worst = 0;
  std::string worst_name;
  for (const auto& name : model.params().names()) {
    if (!model.params().get(name).trainable) continue;
    gc.include = {name};
    GradCheckResult result = grad_check(model.params(), loss, gc);
    std::printf("%-34s values=%-6lld worst=%.3g%s\n", name.c_str(),
                static_cast<long long>(result.values_checked),
                static_cast<double>(result.worst_rel_err),
                result.ok ? "" : "  FAIL");
    if (result.worst_rel_err > worst) {
      worst = result.worst_rel_err;
      worst_name = name;
    }
    all_ok = all_ok && result.ok;
  }
  std::printf("worst=%.9g at %s\n", static_cast<double>(worst),
              worst_name.c_str());
  if (!all_ok) {
    std::fprintf(stderr, "gradient check failed\n");
    return kGradFailure;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"local foreground selection: few-shot tools"};
  app.require_subcommand(1);

  CommonArgs synth_args, train_args, eval_args, ablate_args, heatmap_args,
      grad_args;
  real grad_step = 1e-4;
  bool grad_inject = false;

  add_common(app.add_subcommand("synth", "render a synthetic dataset"),
             synth_args);
  add_common(app.add_subcommand("train", "episodic training"), train_args);
  add_common(app.add_subcommand("eval", "evaluate a checkpoint"), eval_args);
  add_common(app.add_subcommand("ablate", "mode and ratio sweep"),
             ablate_args);
  add_common(app.add_subcommand("heatmap", "export attention maps"),
             heatmap_args);
  auto* grad_cmd =
      app.add_subcommand("gradcheck", "finite-difference gradient audit");
  add_common(grad_cmd, grad_args);
  grad_cmd->add_option("--step", grad_step, "finite-difference step");
  grad_cmd->add_flag("--inject-backward-error", grad_inject)
      ->group("");  // hidden: negative control for tests

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("synth")) return run_synth(synth_args);
    if (app.got_subcommand("train")) return run_train(train_args);
    if (app.got_subcommand("eval")) return run_eval(eval_args);
    if (app.got_subcommand("ablate")) return run_ablate(ablate_args);
    if (app.got_subcommand("heatmap")) return run_heatmap(heatmap_args);
    if (app.got_subcommand("gradcheck"))
      return run_gradcheck(grad_args, grad_step, grad_inject);
  } catch (const CheckpointMismatchError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kMismatch;
  } catch (const TrainingDivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kDivergence;
  } catch (const IoError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kIoError;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfigError;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kConfigError;
  }
  return kConfigError;
}
