#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "occstep/archive.hpp"
#include "occstep/config.hpp"
#include "occstep/tensor.hpp"
#include "test_support.hpp"

using namespace occstep;
namespace fs = std::filesystem;

namespace {

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() /
                 ("occstep_cli_tests_" + std::to_string(::getpid()));
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) return {};
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

RunResult run(const std::string& args, const std::string& env_prefix = "") {
  static int invocation = 0;
  const fs::path out = work_dir() / ("stdout_" + std::to_string(invocation));
  const fs::path err = work_dir() / ("stderr_" + std::to_string(invocation));
  ++invocation;
  const std::string cmd = env_prefix + " " + std::string(OCCSTEP_BIN) + " " +
                          args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  RunResult r;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

std::string first_field(const std::string& csv_line) {
  return csv_line.substr(0, csv_line.find(','));
}

// Shared tiny setup: a model/scene config and a generated dataset.
const char* kTinyConfig =
    "num_classes = 3\n"
    "embed_channels = 4\n"
    "pe_bands = 2\n"
    "state_channels = 8\n"
    "heads = 4\n"
    "srd_w1 = 8\n"
    "srd_w2 = 12\n"
    "srd_w3 = 16\n"
    "tile = 4\n"
    "dims_d = 4\n"
    "dims_h = 8\n"
    "dims_w = 8\n"
    "x_min = -2\n"
    "x_max = 2\n"
    "y_min = -2\n"
    "y_max = 2\n"
    "z_min = 0\n"
    "z_max = 1\n"
    "frames = 4\n"
    "history = 2\n"
    "fps = 2\n"
    "min_boxes = 1\n"
    "max_boxes = 1\n"
    "box_min_size = 1.0\n"
    "box_max_size = 1.5\n"
    "box_center_margin = 1.5\n"
    "box_offset_min = 0.5\n"
    "ego_path = straight\n";

fs::path tiny_config_path() {
  static const fs::path p = [] {
    const fs::path path = work_dir() / "tiny.cfg";
    std::ofstream out(path);
    out << kTinyConfig;
    return path;
  }();
  return p;
}

fs::path dataset_dir() {
  static const fs::path dir = [] {
    const fs::path d = work_dir() / "data";
    RunResult r = run("generate --out " + d.string() + " --count 3 --config " +
                      tiny_config_path().string() + " --seed 11");
    REQUIRE(r.exit_code == 0);
    return d;
  }();
  return dir;
}

std::string train_args(const fs::path& data, const fs::path& ckpt,
                       const fs::path& csv, int max_steps,
                       const std::string& extra = "") {
  const fs::path cfg = work_dir() / ("train_" + std::to_string(max_steps) +
                                     ".cfg");
  if (!fs::exists(cfg)) {
    std::ofstream out(cfg);
    out << kTinyConfig << "max_steps = " << max_steps << "\nlr = 0.002\n";
  }
  return "train --data " + data.string() + " --out " + ckpt.string() +
         " --config " + cfg.string() + " --loss-csv " + csv.string() + " " +
         extra;
}

}  // namespace

TEST_CASE("generate writes a well-formed, reproducible dataset") {
  // Zero sequences: an empty directory with an empty index.
  const fs::path empty = work_dir() / "empty_data";
  RunResult r0 = run("generate --out " + empty.string() + " --count 0");
  CHECK(r0.exit_code == 0);
  CHECK(fs::exists(empty / "index.txt"));
  CHECK(slurp(empty / "index.txt").empty());

  // Three sequences: listed in the index, loadable, and valid.
  const fs::path data = dataset_dir();
  const std::string index = slurp(data / "index.txt");
  CHECK(count_lines(index) == 3);
  for (int i = 0; i < 3; ++i) {
    const fs::path f = data / ("seq_000" + std::to_string(i) + ".occ");
    REQUIRE(fs::exists(f));
    std::string provenance;
    OccSequence seq = load_archive(f.string(), &provenance);
    CHECK_NOTHROW(seq.validate());
    CHECK(seq.num_frames() == 4);
    CHECK(seq.history_len == 2);
    CHECK(provenance.rfind("synthetic", 0) == 0);
  }

  // The same seed reproduces the same bytes; a different seed does not.
  const fs::path data2 = work_dir() / "data_same_seed";
  RunResult r2 = run("generate --out " + data2.string() + " --count 3 " +
                     "--config " + tiny_config_path().string() + " --seed 11");
  CHECK(r2.exit_code == 0);
  for (int i = 0; i < 3; ++i) {
    const std::string name = "seq_000" + std::to_string(i) + ".occ";
    CHECK(slurp(data / name) == slurp(data2 / name));
  }
  const fs::path data3 = work_dir() / "data_other_seed";
  RunResult r3 = run("generate --out " + data3.string() + " --count 1 " +
                     "--config " + tiny_config_path().string() + " --seed 12");
  CHECK(r3.exit_code == 0);
  CHECK(slurp(data / "seq_0000.occ") != slurp(data3 / "seq_0000.occ"));
}

TEST_CASE("corrupt applies regimes on disk exactly as in memory") {
  const fs::path src = dataset_dir() / "seq_0000.occ";
  const fs::path rev1 = work_dir() / "rev1.occ";
  const fs::path rev2 = work_dir() / "rev2.occ";

  RunResult r1 = run("corrupt --in " + src.string() + " --out " +
                     rev1.string() + " --regime reverse");
  CHECK(r1.exit_code == 0);
  RunResult r2 = run("corrupt --in " + rev1.string() + " --out " +
                     rev2.string() + " --regime reverse");
  CHECK(r2.exit_code == 0);

  OccSequence original = load_archive(src.string());
  OccSequence once = load_archive(rev1.string());
  OccSequence twice = load_archive(rev2.string());
  bool any_changed = false;
  for (int f = 0; f < original.num_frames(); ++f) {
    CHECK(twice.frames[f].labels == original.frames[f].labels);
    any_changed = any_changed ||
                  once.frames[f].labels != original.frames[f].labels;
  }
  CHECK(any_changed);  // the single reverse really did something

  // Dropping frames on disk: 8 history frames at 25% lose exactly two.
  const fs::path big = work_dir() / "long_scene";
  const fs::path big_cfg = work_dir() / "long.cfg";
  {
    std::ofstream out(big_cfg);
    out << kTinyConfig << "# longer recording\n";
  }
  std::string cfg_text = slurp(big_cfg);
  cfg_text.replace(cfg_text.find("frames = 4"), 10, "frames = 10");
  cfg_text.replace(cfg_text.find("history = 2"), 11, "history = 8");
  {
    std::ofstream out(big_cfg);
    out << cfg_text;
  }
  RunResult g = run("generate --out " + big.string() + " --count 1 --config " +
                    big_cfg.string() + " --seed 4");
  REQUIRE(g.exit_code == 0);
  const fs::path dropped = work_dir() / "dropped.occ";
  RunResult d = run("corrupt --in " + (big / "seq_0000.occ").string() +
                    " --out " + dropped.string() +
                    " --regime discontinuous --pf 0.25 --seed 5");
  CHECK(d.exit_code == 0);
  OccSequence thin = load_archive(dropped.string());
  CHECK(thin.history_len == 6);
  CHECK(thin.num_frames() == 8);
  CHECK_NOTHROW(thin.validate());

  // In-memory corruption of the same archive gives the same frames.
  OccSequence loaded = load_archive((big / "seq_0000.occ").string());
  CorruptionSpec spec;
  spec.regime = CorruptionSpec::Regime::discontinuous;
  spec.p_f = 0.25;
  spec.seed = 5;
  OccSequence mem = apply_corruption(loaded, spec);
  REQUIRE(mem.num_frames() == thin.num_frames());
  for (int f = 0; f < mem.num_frames(); ++f)
    CHECK(mem.frames[f].labels == thin.frames[f].labels);
}

TEST_CASE("command errors exit nonzero with a single-line diagnostic") {
  const fs::path src = dataset_dir() / "seq_0000.occ";
  RunResult bad = run("corrupt --in " + src.string() + " --out " +
                      (work_dir() / "x.occ").string() + " --regime blur");
  CHECK(bad.exit_code == 1);
  CHECK(bad.err.rfind("error: ", 0) == 0);
  CHECK(count_lines(bad.err) == 1);

  RunResult missing = run("train --data " + (work_dir() / "no_dir").string() +
                          " --out " + (work_dir() / "x.ckpt").string());
  CHECK(missing.exit_code == 1);
  CHECK(missing.err.rfind("error: ", 0) == 0);
  CHECK(count_lines(missing.err) == 1);

  RunResult none = run("");
  CHECK(none.exit_code != 0);

  RunResult badthreads =
      run("eval --data " + dataset_dir().string() + " --ckpt " +
              (work_dir() / "absent.ckpt").string(),
          "OCCSTEP_THREADS=soon");
  CHECK(badthreads.exit_code == 1);
  CHECK(badthreads.err.rfind("error: ", 0) == 0);
}

TEST_CASE("train writes a checkpoint and a per-step loss table") {
  const fs::path ckpt = work_dir() / "tiny.ckpt";
  const fs::path csv = work_dir() / "loss.csv";
  RunResult r = run(train_args(dataset_dir(), ckpt, csv, 6, "--seed 2"));
  REQUIRE(r.exit_code == 0);
  CHECK(r.out.rfind("trained 6 step(s)", 0) == 0);

  ModelConfig mc = read_checkpoint_config(ckpt.string());
  CHECK(mc.num_classes == 3);
  CHECK(mc.grid.dims == std::array<int, 3>{4, 8, 8});
  WorldModel model(mc, 0);
  CheckpointMeta meta = load_checkpoint(ckpt.string(), model);
  CHECK(meta.step == 6);
  CHECK(meta.has_optimizer);

  const std::vector<std::string> lines = split_lines(slurp(csv));
  REQUIRE(lines.size() == 7);
  CHECK(lines[0] == "step,total,ce,pos,rot");
  for (int i = 1; i <= 6; ++i) {
    CHECK(first_field(lines[i]) == std::to_string(i - 1));
    CHECK(std::count(lines[i].begin(), lines[i].end(), ',') == 4);
  }

  // Identical invocations yield identical loss tables.
  const fs::path csv2 = work_dir() / "loss_again.csv";
  RunResult r2 = run(train_args(dataset_dir(), work_dir() / "tiny2.ckpt", csv2,
                                6, "--seed 2"));
  REQUIRE(r2.exit_code == 0);
  CHECK(slurp(csv) == slurp(csv2));
}

TEST_CASE("resuming from a checkpoint continues the original loss curve") {
  const fs::path full_csv = work_dir() / "full.csv";
  RunResult full = run(train_args(dataset_dir(), work_dir() / "full.ckpt",
                                  full_csv, 6, "--seed 8"));
  REQUIRE(full.exit_code == 0);

  const fs::path half_ckpt = work_dir() / "half.ckpt";
  const fs::path half_csv = work_dir() / "half.csv";
  RunResult half = run(train_args(dataset_dir(), half_ckpt, half_csv, 3,
                                  "--seed 8"));
  REQUIRE(half.exit_code == 0);

  const fs::path rest_csv = work_dir() / "rest.csv";
  // The seed flag is deliberately wrong: the resumed schedule must come
  // from the checkpoint, not the command line.
  RunResult rest = run(train_args(dataset_dir(), work_dir() / "rest.ckpt",
                                  rest_csv, 3,
                                  "--seed 4242 --resume " + half_ckpt.string()));
  REQUIRE(rest.exit_code == 0);

  const std::vector<std::string> a = split_lines(slurp(full_csv));
  const std::vector<std::string> b = split_lines(slurp(half_csv));
  const std::vector<std::string> c = split_lines(slurp(rest_csv));
  REQUIRE(a.size() == 7);
  REQUIRE(b.size() == 4);
  REQUIRE(c.size() == 4);
  for (int i = 1; i <= 3; ++i) {
    CHECK(b[i] == a[i]);          // first half matches
    CHECK(c[i] == a[i + 3]);      // resumed half continues, same global steps
  }
}

TEST_CASE("eval prints the score table and writes the matching csv") {
  const fs::path ckpt = work_dir() / "tiny.ckpt";
  if (!fs::exists(ckpt)) {
    RunResult r = run(train_args(dataset_dir(), ckpt, work_dir() / "loss.csv",
                                 6, "--seed 2"));
    REQUIRE(r.exit_code == 0);
  }

  const fs::path csv = work_dir() / "eval.csv";
  RunResult r = run("eval --data " + dataset_dir().string() + " --ckpt " +
                    ckpt.string() +
                    " --mode reactive --regimes reverse --seed 3 --csv " +
                    csv.string());
  REQUIRE(r.exit_code == 0);

  const std::vector<std::string> table = split_lines(r.out);
  REQUIRE(table.size() == 4);  // header + original + reverse + baseline
  CHECK(table[0].rfind("regime", 0) == 0);
  CHECK(table[1].rfind("original", 0) == 0);
  CHECK(table[2].rfind("reverse", 0) == 0);
  CHECK(table[3].rfind("copy_forward", 0) == 0);

  const std::vector<std::string> rows = split_lines(slurp(csv));
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "regime,mode,miou,iou,l2,l1");
  CHECK(rows[1].rfind("original,reactive,", 0) == 0);
  CHECK(rows[2].rfind("reverse,reactive,", 0) == 0);
  CHECK(rows[3].rfind("copy_forward,baseline,", 0) == 0);

  // Without a regime list only the clean row and the baseline appear.
  const fs::path csv2 = work_dir() / "eval_plain.csv";
  RunResult r2 = run("eval --data " + dataset_dir().string() + " --ckpt " +
                     ckpt.string() + " --mode proactive --csv " + csv2.string());
  REQUIRE(r2.exit_code == 0);
  const std::vector<std::string> rows2 = split_lines(slurp(csv2));
  REQUIRE(rows2.size() == 3);
  CHECK(rows2[1].rfind("original,proactive,", 0) == 0);
  CHECK(rows2[2].rfind("copy_forward,baseline,", 0) == 0);

  // Scores are deterministic for a fixed seed.
  const fs::path csv3 = work_dir() / "eval_repeat.csv";
  RunResult r3 = run("eval --data " + dataset_dir().string() + " --ckpt " +
                     ckpt.string() +
                     " --mode reactive --regimes reverse --seed 3 --csv " +
                     csv3.string());
  REQUIRE(r3.exit_code == 0);
  CHECK(slurp(csv) == slurp(csv3));
}

TEST_CASE("gradcheck reports every differentiable op exactly once") {
  RunResult r = run("gradcheck --seed 3 --probes 1");
  CHECK(r.exit_code == 0);

  const std::vector<std::string> lines = split_lines(r.out);
  for (const OpGradCase& c : standard_op_grad_cases()) {
    int seen = 0;
    for (const std::string& line : lines)
      if (line.rfind("op " + c.name + " ", 0) == 0) ++seen;
    INFO("op ", c.name);
    CHECK(seen == 1);
  }
  int end_to_end = 0;
  for (const std::string& line : lines) {
    if (line.rfind("op end_to_end", 0) == 0) ++end_to_end;
    if (line.rfind("op ", 0) == 0) CHECK(line.find("PASS") != std::string::npos);
  }
  CHECK(end_to_end == 1);

  RunResult r2 = run("gradcheck --seed 3 --probes 1");
  CHECK(r2.out == r.out);
}
