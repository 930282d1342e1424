// occstep: synthetic-scene generation, corruption benchmarks, training,
// evaluation, and gradient checking for the voxel world model.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "occstep/archive.hpp"
#include "occstep/benchmark.hpp"
#include "occstep/common.hpp"
#include "occstep/config.hpp"
#include "occstep/metrics.hpp"
#include "occstep/model.hpp"
#include "occstep/rollout.hpp"

namespace fs = std::filesystem;
using namespace occstep;

namespace {

// ---- shared helpers ---------------------------------------------------------

Config load_config_opt(const std::string& path) {
  return path.empty() ? Config{} : load_config_file(path);
}

std::vector<std::string> list_archive_files(const std::string& dir) {
  if (!fs::is_directory(dir))
    throw DataError("data directory not found: " + dir);
  std::vector<std::string> files;
  const fs::path index = fs::path(dir) / "index.txt";
  if (fs::exists(index)) {
    std::ifstream in(index);
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) files.push_back((fs::path(dir) / line).string());
  } else {
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".occ") files.push_back(e.path().string());
    std::sort(files.begin(), files.end());
  }
  return files;
}

std::vector<OccSequence> load_dataset(const std::string& dir) {
  std::vector<OccSequence> out;
  for (const std::string& f : list_archive_files(dir))
    out.push_back(load_archive(f));
  if (out.empty()) throw DataError("no archives found in: " + dir);
  return out;
}

int thread_budget(std::size_t jobs) {
  unsigned hw = std::thread::hardware_concurrency();
  if (hw == 0) hw = 1;
  long cap = hw;
  if (const char* env = std::getenv("OCCSTEP_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1)
      throw ConfigError("OCCSTEP_THREADS must be a positive integer");
    cap = v;
  }
  return int(std::min<long>(cap, std::max<std::size_t>(jobs, 1)));
}

// ---- generate ---------------------------------------------------------------

int cmd_generate(const std::string& out_dir, int count,
                 const std::string& config_path, std::uint64_t seed) {
  const SceneConfig scene = scene_config_from(load_config_opt(config_path));
  fs::create_directories(out_dir);
  std::vector<std::string> names;
  for (int i = 0; i < count; ++i) {
    char name[64];
    std::snprintf(name, sizeof name, "seq_%04d.occ", i);
    const std::uint64_t scene_seed = seed + std::uint64_t(i);
    const OccSequence seq = gen_synthetic_scene(scene, scene_seed);
    save_archive((fs::path(out_dir) / name).string(), seq,
                 "synthetic seed=" + std::to_string(scene_seed));
    names.push_back(name);
  }
  std::ofstream index(fs::path(out_dir) / "index.txt");
  if (!index) throw DataError("cannot write index file in: " + out_dir);
  for (const std::string& n : names) index << n << "\n";
  index.flush();
  if (!index) throw DataError("cannot write index file in: " + out_dir);
  std::printf("wrote %d archive(s) to %s\n", count, out_dir.c_str());
  return 0;
}

// ---- corrupt ----------------------------------------------------------------

int cmd_corrupt(const std::string& in_path, const std::string& out_path,
                const std::string& regime, double p_f, double p_v, int views,
                std::uint64_t seed) {
  CorruptionSpec spec;
  if (!regime_from_name(regime, spec.regime))
    throw ArgumentError("unknown regime: " + regime);
  spec.p_f = p_f;
  spec.p_v = p_v;
  spec.views = views;
  spec.seed = seed;

  std::string provenance;
  const OccSequence seq = load_archive(in_path, &provenance);
  const OccSequence corrupted = apply_corruption(seq, spec);
  char note[160];
  std::snprintf(note, sizeof note,
                "regime=%s p_f=%g p_v=%g views=%d seed=%llu", regime.c_str(),
                p_f, p_v, views, (unsigned long long)seed);
  if (!provenance.empty()) provenance += "; ";
  save_archive(out_path, corrupted, provenance + note);
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

// ---- train ------------------------------------------------------------------

int cmd_train(const std::string& data_dir, const std::string& out_ckpt,
              const std::string& config_path, std::uint64_t seed,
              const std::string& resume, const std::string& loss_csv) {
  const Config cfg = load_config_opt(config_path);
  const ModelConfig mc = model_config_from(cfg);
  TrainConfig tc = train_config_from(cfg);

  const std::vector<OccSequence> dataset = load_dataset(data_dir);
  if (!(dataset[0].frames[0].geom == mc.grid) ||
      dataset[0].frames[0].num_classes != mc.num_classes)
    throw DataError("data does not match the model config");

  WorldModel model(mc, seed);
  std::vector<Tensor> params;
  for (const auto& [name, p] : model.parameters()) params.push_back(p);
  AdamW opt(params, tc.lr, tc.weight_decay);
  TrainerState ts;
  if (!resume.empty()) {
    const CheckpointMeta meta = load_checkpoint(resume, model, &opt, &ts);
    seed = meta.seed;  // the schedule must continue the original run
  }
  tc.seed = seed;

  const TrainReport report = train(dataset, model, opt, tc, ts);
  save_checkpoint(out_ckpt, model, seed, ts, &opt);

  if (!loss_csv.empty()) {
    std::ofstream csv(loss_csv);
    if (!csv) throw DataError("cannot write loss csv: " + loss_csv);
    csv << "step,total,ce,pos,rot\n";
    for (std::size_t i = 0; i < report.step_losses.size(); ++i) {
      const LossParts& p = report.step_losses[i];
      char row[160];
      std::snprintf(row, sizeof row, "%lld,%.6f,%.6f,%.6f,%.6f\n",
                    (long long)(ts.step - report.steps_run) + (long long)i,
                    p.total, p.ce, p.pos, p.rot);
      csv << row;
    }
    csv.flush();
    if (!csv) throw DataError("cannot write loss csv: " + loss_csv);
  }
  std::printf("trained %d step(s); ce %.4f -> %.4f; checkpoint %s\n",
              report.steps_run, report.initial_ce, report.final_ce,
              out_ckpt.c_str());
  return 0;
}

// ---- eval -------------------------------------------------------------------

struct EvalRow {
  std::string regime;
  std::string mode;
  ScoreResult miou_score, iou_score;
  double l2 = 0, l1 = 0;
};

struct ArchiveScores {
  std::vector<ConfusionTally> tallies;  // per bucket
  std::vector<double> l2, l1;           // per bucket
};

// Scores one rollout result against the clean futures of `clean`.
ArchiveScores score_rollout(const RolloutResult& result,
                            const OccSequence& clean,
                            const std::vector<int>& bucket_ends,
                            bool per_step_plan) {
  const int h = clean.history_len;
  const int horizon = clean.num_frames() - h;
  std::vector<PlanarMotion> gt_motions, pred_motions;
  for (int tau = 0; tau < horizon; ++tau) {
    gt_motions.push_back(planar_from_se3(clean.relatives[h - 1 + tau]));
    pred_motions.push_back(result.predicted_egos[tau]);
  }
  ArchiveScores scores;
  for (int end : bucket_ends) {
    ConfusionTally tally;
    for (int tau = 0; tau < end; ++tau)
      accumulate(tally, result.predicted_frames[tau], clean.frames[h + tau]);
    scores.tallies.push_back(std::move(tally));
    const std::vector<PlanarMotion> p(pred_motions.begin(),
                                      pred_motions.begin() + end);
    const std::vector<PlanarMotion> g(gt_motions.begin(),
                                      gt_motions.begin() + end);
    scores.l2.push_back(plan_l2(p, g, per_step_plan));
    scores.l1.push_back(plan_l1_yaw(p, g, per_step_plan));
  }
  return scores;
}

// Runs one table row: corrupt each archive's history, roll out, score, and
// reduce (tallies merged in archive-index order; planning errors averaged
// over archives, then over buckets).
EvalRow eval_row(const std::vector<OccSequence>& dataset,
                 const WorldModel& model, bool proactive,
                 const CorruptionSpec* spec, bool baseline,
                 const std::vector<int>& bucket_ends, bool per_step_plan,
                 bool literal_last) {
  std::vector<ArchiveScores> all(dataset.size());
  std::atomic<std::size_t> next{0};
  std::vector<std::string> errors(dataset.size());
  auto worker = [&]() {
    for (std::size_t i = next.fetch_add(1); i < dataset.size();
         i = next.fetch_add(1)) {
      try {
        const OccSequence& clean = dataset[i];
        const OccSequence corrupted =
            spec ? apply_corruption(clean, *spec) : clean;
        const int h = corrupted.history_len;
        const int horizon = corrupted.num_frames() - h;
        RolloutResult result;
        if (baseline) {
          result = baseline_copy_forward(corrupted, horizon);
        } else if (proactive) {
          const std::vector<PoseSE3> future(
              corrupted.relatives.begin() + (h - 1),
              corrupted.relatives.end());
          result = proactive_rollout(corrupted, future, model, literal_last);
        } else {
          result = reactive_rollout(corrupted, horizon, model, literal_last);
        }
        all[i] = score_rollout(result, clean, bucket_ends, per_step_plan);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int n_threads = thread_budget(dataset.size());
  std::vector<std::thread> threads;
  for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (std::thread& t : threads) t.join();
  for (const std::string& e : errors)
    if (!e.empty()) throw DataError(e);

  std::vector<double> miou_buckets, iou_buckets, l2_buckets, l1_buckets;
  bool miou_ok = true, iou_ok = true;
  for (std::size_t b = 0; b < bucket_ends.size(); ++b) {
    ConfusionTally merged;
    double l2_sum = 0, l1_sum = 0;
    for (const ArchiveScores& s : all) {
      merged.merge(s.tallies[b]);
      l2_sum += s.l2[b];
      l1_sum += s.l1[b];
    }
    const ScoreResult m = miou(merged), o = iou(merged);
    miou_ok = miou_ok && m.defined;
    iou_ok = iou_ok && o.defined;
    miou_buckets.push_back(m.value);
    iou_buckets.push_back(o.value);
    l2_buckets.push_back(l2_sum / double(all.size()));
    l1_buckets.push_back(l1_sum / double(all.size()));
  }
  EvalRow row;
  row.miou_score = {miou_ok ? horizon_average(miou_buckets)
                            : std::numeric_limits<double>::quiet_NaN(),
                    miou_ok};
  row.iou_score = {iou_ok ? horizon_average(iou_buckets)
                          : std::numeric_limits<double>::quiet_NaN(),
                   iou_ok};
  row.l2 = horizon_average(l2_buckets);
  row.l1 = horizon_average(l1_buckets);
  return row;
}

std::string fmt_score(const ScoreResult& s) {
  if (!s.defined) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", s.value);
  return buf;
}

std::string fmt_plain(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

int cmd_eval(const std::string& data_dir, const std::string& ckpt_path,
             const std::string& mode, const std::string& regimes_arg,
             double p_f, double p_v, int views, std::uint64_t seed,
             const std::string& csv_path, bool per_step_plan,
             bool literal_last) {
  if (mode != "reactive" && mode != "proactive")
    throw ArgumentError("mode must be reactive or proactive");
  const bool proactive = mode == "proactive";

  const ModelConfig mc = read_checkpoint_config(ckpt_path);
  WorldModel model(mc, /*seed=*/0);
  load_checkpoint(ckpt_path, model);

  const std::vector<OccSequence> dataset = load_dataset(data_dir);
  for (const OccSequence& seq : dataset) {
    if (!(seq.frames[0].geom == mc.grid) ||
        seq.frames[0].num_classes != mc.num_classes)
      throw DataError("checkpoint/config mismatch with the data");
    if (seq.num_frames() - seq.history_len < 1)
      throw DataError("archive has no future frames to score");
    if (seq.num_frames() != dataset[0].num_frames() ||
        seq.history_len != dataset[0].history_len)
      throw DataError("archives disagree on sequence shape");
  }
  const int horizon = dataset[0].num_frames() - dataset[0].history_len;
  const int n = dataset[0].num_frames();
  const double dt =
      dataset[0].frame_times[n - 1] - dataset[0].frame_times[n - 2];
  if (dt <= 0) throw DataError("frame times must increase");
  const std::vector<int> bucket_ends =
      horizon_bucket_ends(1.0 / dt, {1.0, 2.0, 3.0}, horizon);

  std::vector<std::string> regimes;
  if (!regimes_arg.empty()) {
    std::size_t start = 0;
    while (start <= regimes_arg.size()) {
      const std::size_t comma = regimes_arg.find(',', start);
      const std::string name =
          regimes_arg.substr(start, comma == std::string::npos
                                        ? std::string::npos
                                        : comma - start);
      if (!name.empty()) regimes.push_back(name);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
  }

  std::vector<EvalRow> rows;
  {
    EvalRow row = eval_row(dataset, model, proactive, nullptr, false,
                           bucket_ends, per_step_plan, literal_last);
    row.regime = "original";
    row.mode = mode;
    rows.push_back(row);
  }
  for (const std::string& name : regimes) {
    CorruptionSpec spec;
    if (!regime_from_name(name, spec.regime))
      throw ArgumentError("unknown regime: " + name);
    spec.p_f = p_f;
    spec.p_v = p_v;
    spec.views = views;
    spec.seed = seed;
    EvalRow row = eval_row(dataset, model, proactive, &spec, false,
                           bucket_ends, per_step_plan, literal_last);
    row.regime = name;
    row.mode = mode;
    rows.push_back(row);
  }
  {
    EvalRow row = eval_row(dataset, model, false, nullptr, true, bucket_ends,
                           per_step_plan, literal_last);
    row.regime = "copy_forward";
    row.mode = "baseline";
    rows.push_back(row);
  }

  std::printf("%-14s %-10s %10s %10s %10s %10s\n", "regime", "mode", "miou",
              "iou", "l2", "l1");
  for (const EvalRow& r : rows)
    std::printf("%-14s %-10s %10s %10s %10s %10s\n", r.regime.c_str(),
                r.mode.c_str(), fmt_score(r.miou_score).c_str(),
                fmt_score(r.iou_score).c_str(), fmt_plain(r.l2).c_str(),
                fmt_plain(r.l1).c_str());

  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw DataError("cannot write csv: " + csv_path);
    csv << "regime,mode,miou,iou,l2,l1\n";
    for (const EvalRow& r : rows)
      csv << r.regime << ',' << r.mode << ',' << fmt_score(r.miou_score)
          << ',' << fmt_score(r.iou_score) << ',' << fmt_plain(r.l2) << ','
          << fmt_plain(r.l1) << "\n";
    csv.flush();
    if (!csv) throw DataError("cannot write csv: " + csv_path);
  }
  return 0;
}

// ---- gradcheck --------------------------------------------------------------

int cmd_gradcheck(std::uint64_t seed, int probes) {
  bool ok = true;
  for (const OpGradCase& c : standard_op_grad_cases()) {
    double worst = 0;
    for (std::uint64_t s = 0; s < 3; ++s)
      worst = std::max(worst, c.run(seed + s));
    const bool pass = worst < 1e-3;
    ok = ok && pass;
    std::printf("op %-24s max_rel_err %.3e %s\n", c.name.c_str(), worst,
                pass ? "PASS" : "FAIL");
  }

  // End-to-end: one model step plus the forecast loss on a tiny grid,
  // differentiated with respect to every parameter.
  ModelConfig mc;
  mc.num_classes = 3;
  mc.embed_channels = 4;
  mc.pe_bands = 2;
  mc.state_channels = 8;
  mc.heads = 4;
  mc.srd_widths = {8, 12, 16};
  mc.tile = 4;
  mc.grid.dims = {4, 8, 8};
  mc.grid.x_min = -2;
  mc.grid.x_max = 2;
  mc.grid.y_min = -2;
  mc.grid.y_max = 2;
  mc.grid.z_min = 0;
  mc.grid.z_max = 1;
  WorldModel model(mc, seed);

  std::mt19937_64 rng(seed);
  SemanticOccGrid obs(mc.grid, mc.num_classes);
  SemanticOccGrid target(mc.grid, mc.num_classes);
  for (auto& l : obs.labels) l = std::int8_t(rng() % mc.num_classes);
  for (auto& l : target.labels) l = std::int8_t(rng() % mc.num_classes);
  const PoseSE3 rel = se2_to_se3(PlanarMotion{0.3, -0.2, 0.1});
  // Heading target far from the initial prediction: keeps the directional
  // probes on one side of the absolute-error kink.
  const PlanarMotion ego_gt{0.3, -0.2, 0.6};

  std::vector<Tensor> params;
  for (const auto& [name, p] : model.parameters()) params.push_back(p);
  auto fn = [&](const std::vector<Tensor>&) {
    const StepOut out = model.step(obs, model.initial_state(), rel);
    return forecast_loss(out.logits, target, out.ego, ego_gt, LossWeights{});
  };
  const double err =
      grad_check_directional(fn, params, seed, 0.04, probes > 0 ? probes : 4);
  const bool pass = err < 1e-3;
  ok = ok && pass;
  std::printf("op %-24s max_rel_err %.3e %s\n", "end_to_end", err,
              pass ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occupancy world-model toolkit"};
  app.require_subcommand(1);

  std::string out_dir, config_path, in_path, out_path, data_dir, ckpt_path,
      resume, loss_csv, csv_path;
  std::string regime, regimes_arg, mode = "reactive";
  int count = 0, views = 6, probes = 2;
  double p_f = 0.25, p_v = 0.25;
  std::uint64_t seed = 0;
  bool per_step_plan = false, literal_last = false;

  CLI::App* gen = app.add_subcommand("generate", "write synthetic archives");
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--count", count, "number of sequences")->required();
  gen->add_option("--config", config_path, "key=value config file");
  gen->add_option("--seed", seed, "random seed");

  CLI::App* cor = app.add_subcommand("corrupt", "apply a corruption regime");
  cor->add_option("--in", in_path, "input archive")->required();
  cor->add_option("--out", out_path, "output archive")->required();
  cor->add_option("--regime", regime,
                  "reverse|discontinuous|fragmentary|reductive")
      ->required();
  cor->add_option("--pf", p_f, "frame fraction");
  cor->add_option("--pv", p_v, "within-frame fraction");
  cor->add_option("--views", views, "azimuthal sector count");
  cor->add_option("--seed", seed, "random seed");

  CLI::App* tr = app.add_subcommand("train", "teacher-forced training");
  tr->add_option("--data", data_dir, "archive directory")->required();
  tr->add_option("--out", out_path, "checkpoint to write")->required();
  tr->add_option("--config", config_path, "key=value config file");
  tr->add_option("--seed", seed, "random seed");
  tr->add_option("--resume", resume, "checkpoint to continue from");
  tr->add_option("--loss-csv", loss_csv, "per-step loss table to write");

  CLI::App* ev = app.add_subcommand("eval", "rollout evaluation table");
  ev->add_option("--data", data_dir, "archive directory")->required();
  ev->add_option("--ckpt", ckpt_path, "checkpoint to evaluate")->required();
  ev->add_option("--mode", mode, "reactive|proactive");
  ev->add_option("--regimes", regimes_arg,
                 "comma-separated corruption regimes (may be empty)");
  ev->add_option("--pf", p_f, "frame fraction");
  ev->add_option("--pv", p_v, "within-frame fraction");
  ev->add_option("--views", views, "azimuthal sector count");
  ev->add_option("--seed", seed, "random seed");
  ev->add_option("--csv", csv_path, "table file to write");
  ev->add_flag("--per-step-plan", per_step_plan,
               "per-step planning errors instead of cumulative");
  ev->add_flag("--literal-last-observation", literal_last,
               "re-feed the last observation instead of predictions");

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference checks");
  gc->add_option("--seed", seed, "random seed");
  gc->add_option("--probes", probes,
                 "random directions for the end-to-end check (-1: default 4)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(out_dir, count, config_path, seed);
    if (cor->parsed())
      return cmd_corrupt(in_path, out_path, regime, p_f, p_v, views, seed);
    if (tr->parsed())
      return cmd_train(data_dir, out_path, config_path, seed, resume,
                       loss_csv);
    if (ev->parsed())
      return cmd_eval(data_dir, ckpt_path, mode, regimes_arg, p_f, p_v, views,
                      seed, csv_path, per_step_plan, literal_last);
    if (gc->parsed()) return cmd_gradcheck(seed, probes);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::fprintf(stderr, "error: no subcommand\n");
  return 1;
}
