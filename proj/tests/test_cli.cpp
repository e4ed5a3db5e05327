#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "lfs/dataset.hpp"
#include "lfs/model.hpp"
#include "lfs/params.hpp"

using namespace lfs;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("lfs_cli_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

int line_count(const fs::path& p) {
  std::ifstream is(p);
  int n = 0;
  std::string line;
  while (std::getline(is, line)) ++n;
  return n;
}

bool same_bytes(const fs::path& a, const fs::path& b) {
  return slurp(a) == slurp(b);
}

CliResult run_cli(const std::string& args) {
  static TempDir capture("capture");
  static int counter = 0;
  fs::path base = capture.path / std::to_string(counter++);
  std::string cmd = std::string(LFS_CLI_PATH) + " " + args + " >" +
                    base.string() + ".out 2>" + base.string() + ".err";
  int status = std::system(cmd.c_str());
  CliResult r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(base.string() + ".out");
  r.err = slurp(base.string() + ".err");
  return r;
}

// one synthetic dataset shared by every test in this binary
const fs::path& data_dir() {
  static TempDir dir("data");
  static bool generated = [] {
    CliResult r = run_cli("synth --set out_dir=" + dir.path.string() +
                          " --set synth_classes=8 --set synth_per_class=6" +
                          " --set synth_size=20 --set seed=2");
    REQUIRE(r.code == 0);
    return true;
  }();
  (void)generated;
  return dir.path;
}

std::string manifest_arg() {
  return " --set manifest=" + (data_dir() / "manifest.tsv").string();
}

// flags for a train run tiny enough to finish in tens of milliseconds
std::string tiny_train_flags() {
  return manifest_arg() +
         " --set input_size=16 --set channels=8 --set fs_ratio=1.0"
         " --set epochs=2 --set episodes_per_epoch=2 --set lr=0.05"
         " --set train_ways=2 --set train_shots=1 --set train_queries=1"
         " --set val_ways=2 --set val_shots=1 --set val_queries=1"
         " --set validate_every=1 --set val_episodes=2 --set seed=7";
}

// one trained checkpoint shared by the eval-side tests
const fs::path& trained_dir() {
  static TempDir dir("trained");
  static bool trained = [] {
    CliResult r = run_cli("train" + tiny_train_flags() +
                          " --set out_dir=" + dir.path.string());
    REQUIRE(r.code == 0);
    return true;
  }();
  (void)trained;
  return dir.path;
}

fs::path first_image() {
  for (const auto& entry :
       fs::recursive_directory_iterator(data_dir() / "class_000")) {
    const std::string name = entry.path().filename().string();
    if (name.ends_with(".ppm")) return entry.path();
  }
  FAIL("no generated image found");
  return {};
}

}  // namespace

TEST_CASE("synth writes a loadable image tree") {
  TempDir out("synth");
  CliResult r = run_cli("synth --set out_dir=" + out.path.string() +
                        " --set synth_classes=8 --set synth_per_class=6" +
                        " --set synth_size=20 --set seed=2");
  CHECK(r.code == 0);
  CHECK(r.out.find("wrote 48 images") != std::string::npos);

  DatasetManifest manifest =
      load_manifest((out.path / "manifest.tsv").string());
  CHECK(manifest.entries.size() == 48);
  CHECK(fs::exists(out.path / "resolved.cfg"));

  // same seed through the CLI reproduces the tree byte for byte
  CHECK(same_bytes(out.path / "manifest.tsv", data_dir() / "manifest.tsv"));
  CHECK(same_bytes(out.path / "class_000" / "img_000.ppm",
                   data_dir() / "class_000" / "img_000.ppm"));
}

TEST_CASE("train writes checkpoints, trace, and resolved config") {
  const fs::path& dir = trained_dir();
  CHECK(fs::exists(dir / "best.ckpt"));
  CHECK(fs::exists(dir / "last.ckpt"));
  CHECK(line_count(dir / "loss.tsv") == 4);  // 2 epochs x 2 episodes

  const std::string resolved = slurp(dir / "resolved.cfg");
  CHECK(resolved.find("epochs=2") != std::string::npos);
  CHECK(resolved.find("seed=7") != std::string::npos);
}

TEST_CASE("same seed trains to byte-identical artifacts") {
  TempDir a("det_a");
  TempDir b("det_b");
  CHECK(run_cli("train" + tiny_train_flags() +
                " --set out_dir=" + a.path.string())
            .code == 0);
  CHECK(run_cli("train" + tiny_train_flags() +
                " --set out_dir=" + b.path.string())
            .code == 0);
  CHECK(same_bytes(a.path / "last.ckpt", b.path / "last.ckpt"));
  CHECK(same_bytes(a.path / "best.ckpt", b.path / "best.ckpt"));
  CHECK(same_bytes(a.path / "loss.tsv", b.path / "loss.tsv"));

  TempDir c("det_c");
  CHECK(run_cli("train" + tiny_train_flags() + " --set out_dir=" +
                c.path.string() + " --set seed=8")
            .code == 0);
  CHECK(!same_bytes(a.path / "last.ckpt", c.path / "last.ckpt"));
}

TEST_CASE("zero learning rate leaves trainable parameters at initialization") {
  TempDir out("lr0");
  CliResult r = run_cli("train" + tiny_train_flags() +
                        " --set out_dir=" + out.path.string() +
                        " --set lr=0 --set epochs=1");
  CHECK(r.code == 0);

  ModelConfig mc;
  mc.input_size = 16;
  mc.channels = 8;
  mc.fs_ratio = 1.0;
  Model fresh = Model::build(mc);
  init_params(fresh.params(), 7);
  Model loaded = Model::build(mc);
  load_checkpoint(loaded.params(), (out.path / "last.ckpt").string());

  for (const auto& p : fresh.params().items()) {
    if (!p.trainable) continue;  // running stats move even at lr 0
    const auto& trained = loaded.params().get(p.name).value.data();
    const auto& init = p.value.data();
    CHECK(trained == init);
  }
}

TEST_CASE("eval reports accuracy and writes report artifacts") {
  TempDir out("eval");
  CliResult r = run_cli(
      "eval" + manifest_arg() + " --set checkpoint=" +
      (trained_dir() / "best.ckpt").string() +
      " --set input_size=16 --set channels=8 --set fs_ratio=1.0"
      " --set eval_ways=2 --set eval_shots=1 --set eval_queries=2"
      " --set n_tasks=6 --set workers=2 --set seed=7"
      " --set out_dir=" +
      out.path.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("n_tasks=6") != std::string::npos);
  CHECK(r.out.find("mean=") != std::string::npos);
  CHECK(r.out.find("ci95=") != std::string::npos);

  const std::string report = slurp(out.path / "eval.txt");
  CHECK(report.find("n_tasks=6") != std::string::npos);
  CHECK(line_count(out.path / "tasks.tsv") == 6);

  double mean = -1;
  std::sscanf(report.c_str() + report.find("mean="), "mean=%lf", &mean);
  CHECK(mean >= 0.0);
  CHECK(mean <= 1.0);
}

TEST_CASE("heatmap emits graymaps at the source image dimensions") {
  TempDir out("heat");
  CliResult r = run_cli("heatmap --set image=" + first_image().string() +
                        " --set input_size=32 --set channels=8" +
                        " --set out_dir=" + out.path.string());
  CHECK(r.code == 0);
  CHECK(r.out.find("grid=2x2") != std::string::npos);

  for (const char* name : {"energy.pgm", "importance.pgm"}) {
    const std::string pgm = slurp(out.path / name);
    INFO(name);
    CHECK(pgm.substr(0, 3) == "P2\n");
    CHECK(pgm.find("20 20\n") != std::string::npos);  // source is 20x20
  }
}

TEST_CASE("gradcheck passes on a healthy model and fails the negative control") {
  const std::string flags =
      " --set input_size=16 --set channels=8 --set fs_ratio=1.0 --set seed=3";
  CliResult ok = run_cli("gradcheck" + flags);
  CHECK(ok.code == 0);
  CHECK(ok.out.find("backbone.block0.conv.weight") != std::string::npos);
  CHECK(ok.out.find("head.alpha") != std::string::npos);
  CHECK(ok.out.find("worst=") != std::string::npos);

  CliResult bad = run_cli("gradcheck" + flags + " --inject-backward-error");
  CHECK(bad.code == 6);
}

TEST_CASE("divergence exits 4 and keeps artifacts from completed epochs") {
  TempDir out("diverge");
  CliResult r = run_cli("train" + manifest_arg() +
                        " --set out_dir=" + out.path.string() +
                        " --set input_size=16 --set channels=8"
                        " --set fs_ratio=1.0 --set epochs=3"
                        " --set episodes_per_epoch=2 --set lr=5000"
                        " --set train_ways=2 --set train_shots=1"
                        " --set train_queries=1 --set val_ways=2"
                        " --set val_shots=1 --set val_queries=1"
                        " --set validate_every=99 --set seed=11");
  CHECK(r.code == 4);
  CHECK(r.err.find("diverged at epoch 1") != std::string::npos);
  CHECK(fs::exists(out.path / "last.ckpt"));
  CHECK(!fs::exists(out.path / "best.ckpt"));
  CHECK(line_count(out.path / "loss.tsv") == 2);  // epoch 0 completed

  // lr=1000 stays finite through every update but the unstable model blows
  // up inside the final validation pass, which must map to the same exit
  TempDir out2("diverge_val");
  CliResult v = run_cli("train" + manifest_arg() +
                        " --set out_dir=" + out2.path.string() +
                        " --set input_size=16 --set channels=8"
                        " --set fs_ratio=1.0 --set epochs=3"
                        " --set episodes_per_epoch=2 --set lr=1000"
                        " --set train_ways=2 --set train_shots=1"
                        " --set train_queries=1 --set val_ways=2"
                        " --set val_shots=1 --set val_queries=1"
                        " --set validate_every=99 --set seed=11");
  CHECK(v.code == 4);
  CHECK(v.err.find("diverged during validation after epoch 2") !=
        std::string::npos);
  CHECK(line_count(out2.path / "loss.tsv") == 6);
}

TEST_CASE("config, io, and checkpoint errors map to distinct exit codes") {
  CHECK(run_cli("train --set nonsense=1").code == 2);
  CHECK(run_cli("train" + tiny_train_flags() + " --set out_dir=" +
                (fs::temp_directory_path() / "lfs_cli_unused").string() +
                " --set manifest=/nonexistent/manifest.tsv")
            .code == 3);

  CliResult mismatch = run_cli(
      "eval" + manifest_arg() + " --set checkpoint=" +
      (trained_dir() / "best.ckpt").string() +
      " --set input_size=16 --set channels=16 --set fs_ratio=1.0"
      " --set eval_ways=2 --set eval_shots=1 --set eval_queries=2");
  CHECK(mismatch.code == 5);
}

TEST_CASE("ablate emits four mode rows and six ratio rows") {
  TempDir out("ablate");
  CliResult r = run_cli(
      "ablate" + manifest_arg() + " --set out_dir=" + out.path.string() +
      " --set input_size=64 --set channels=8 --set epochs=1"
      " --set episodes_per_epoch=1 --set lr=0.05"
      " --set train_ways=2 --set train_shots=1 --set train_queries=1"
      " --set val_ways=2 --set val_shots=1 --set val_queries=1"
      " --set validate_every=1 --set val_episodes=1"
      " --set eval_ways=2 --set eval_queries=1 --set n_tasks=2"
      " --set seed=4");
  CHECK(r.code == 0);

  std::ifstream table(out.path / "ablate.tsv");
  std::string line;
  std::getline(table, line);
  CHECK(line == "row\t1shot\t5shot");

  const std::vector<std::string> expected = {
      "mode=self",     "mode=local",    "mode=select",   "mode=lfs",
      "fs_ratio=0.1",  "fs_ratio=0.3",  "fs_ratio=0.5",  "fs_ratio=0.7",
      "fs_ratio=0.9",  "fs_ratio=1.0"};
  for (const auto& label : expected) {
    REQUIRE(std::getline(table, line));
    CAPTURE(line);
    CHECK(line.substr(0, label.size()) == label);
    CHECK(line.find("+-") != std::string::npos);  // row succeeded
  }
  CHECK(!std::getline(table, line));
}
