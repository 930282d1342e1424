#include "occstep/rollout.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "occstep/common.hpp"

namespace occstep {

void OccSequence::validate() const {
  if (frames.empty()) throw DataError("sequence has no frames");
  if (poses.size() != frames.size())
    throw DataError("pose count does not match frame count");
  if (relatives.size() + 1 != frames.size())
    throw DataError("relative count must be frame count - 1");
  if (frame_times.size() != frames.size())
    throw DataError("frame time count does not match frame count");
  if (history_len < 1 || history_len > int(frames.size()))
    throw DataError("history length out of range");
  if (!view_masks.empty() && view_masks.size() != frames.size())
    throw DataError("view mask count does not match frame count");
  for (std::size_t i = 0; i + 1 < frame_times.size(); ++i)
    if (!(frame_times[i] < frame_times[i + 1]))
      throw DataError("frame times must be strictly increasing");
  const GridGeometry& g = frames[0].geom;
  for (const SemanticOccGrid& f : frames) {
    if (!(f.geom == g) || f.num_classes != frames[0].num_classes)
      throw DataError("frames disagree on geometry or class count");
    f.validate();
  }
  if (!view_masks.empty())
    for (const auto& m : view_masks)
      if (!m.empty() && std::int64_t(m.size()) != g.size())
        throw DataError("view mask length does not match grid size");
  for (const PoseSE3& p : poses)
    if (!is_rigid(p)) throw DataError("pose is not a rigid transform");
  if (poses.size() >= 2) {
    const std::vector<PoseSE3> want = relative_from_absolute(poses);
    for (std::size_t i = 0; i < want.size(); ++i)
      if ((want[i] - relatives[i]).cwiseAbs().maxCoeff() > 1e-6)
        throw DataError("relatives are inconsistent with absolute poses");
  }
}

namespace {

PlanarMotion planar_from_ego_tensor(const Tensor& ego) {
  if (ego.size() != 3) throw ShapeError("ego estimate must have 3 values");
  const auto v = ego.to_vector();
  return {double(v[0]), double(v[1]), wrap_angle(double(v[2]))};
}

SemanticOccGrid argmax_grid(const std::vector<float>& probs,
                            const GridGeometry& g, int k) {
  SemanticOccGrid out(g, k);
  const std::int64_t n = g.size();
  for (std::int64_t i = 0; i < n; ++i) {
    int best = 0;
    float bv = probs[i];
    for (int c = 1; c < k; ++c) {
      const float v = probs[std::size_t(c) * n + i];
      if (v > bv) {
        bv = v;
        best = c;
      }
    }
    out.labels[i] = std::int8_t(best);
  }
  return out;
}

}  // namespace

WarmupOut warmup(const OccSequence& seq, const StepModel& model) {
  if (seq.history_len < 1) throw ArgumentError("warmup: empty history");
  Tensor state = model.initial_state();
  PlanarMotion last_ego;
  for (int i = 0; i < seq.history_len; ++i) {
    const PoseSE3 rel = i == 0 ? PoseSE3(PoseSE3::Identity()) : seq.relatives[i - 1];
    StepOut out = model.step(seq.frames[i], state, rel);
    state = out.state;
    last_ego = planar_from_ego_tensor(out.ego);
  }
  return {state, last_ego};
}

namespace {

RolloutResult run_rollout(const OccSequence& history, int horizon,
                          const StepModel& model,
                          const std::vector<PoseSE3>* future_relatives,
                          bool literal_last_observation) {
  if (horizon < 1) throw ArgumentError("rollout horizon must be >= 1");
  if (future_relatives && int(future_relatives->size()) != horizon)
    throw ArgumentError("future pose count must equal the horizon");

  WarmupOut wu = warmup(history, model);
  Tensor state = wu.state;
  PlanarMotion prev_ego = wu.last_ego;

  RolloutResult res;
  res.mode = future_relatives ? RolloutResult::Mode::proactive
                              : RolloutResult::Mode::reactive;
  const SemanticOccGrid& last_obs = history.frames[history.history_len - 1];
  const int k = model.config().num_classes;
  const GridGeometry& g = model.config().grid;

  for (int tau = 1; tau <= horizon; ++tau) {
    const SemanticOccGrid& obs = (tau == 1 || literal_last_observation)
                                     ? last_obs
                                     : res.predicted_frames.back();
    const PoseSE3 rel =
        future_relatives ? (*future_relatives)[tau - 1] : se2_to_se3(prev_ego);
    StepOut out = model.step(obs, state, rel);
    state = out.state;

    res.predicted_probs.push_back(softmax_channel(out.logits).to_vector());
    res.predicted_frames.push_back(argmax_grid(res.predicted_probs.back(), g, k));
    const PlanarMotion head_ego = planar_from_ego_tensor(out.ego);
    res.predicted_egos.push_back(future_relatives ? head_ego : prev_ego);
    prev_ego = head_ego;
  }
  return res;
}

}  // namespace

RolloutResult reactive_rollout(const OccSequence& history, int horizon,
                               const StepModel& model,
                               bool literal_last_observation) {
  return run_rollout(history, horizon, model, nullptr, literal_last_observation);
}

RolloutResult proactive_rollout(const OccSequence& history,
                                const std::vector<PoseSE3>& future_relatives,
                                const StepModel& model,
                                bool literal_last_observation) {
  return run_rollout(history, int(future_relatives.size()), model,
                     &future_relatives, literal_last_observation);
}

RolloutResult baseline_copy_forward(const OccSequence& history, int horizon) {
  if (history.history_len < 1)
    throw ArgumentError("baseline_copy_forward: empty history");
  SemanticOccGrid carried = history.frames[history.history_len - 1];
  for (std::int8_t& l : carried.labels)
    if (l < 0) l = 0;  // a prediction must be a valid class

  const std::int64_t n = carried.geom.size();
  std::vector<float> onehot(std::size_t(carried.num_classes) * n, 0.0f);
  for (std::int64_t i = 0; i < n; ++i)
    onehot[std::size_t(carried.labels[i]) * n + i] = 1.0f;

  RolloutResult res;
  res.mode = RolloutResult::Mode::reactive;
  for (int tau = 0; tau < horizon; ++tau) {
    res.predicted_probs.push_back(onehot);
    res.predicted_frames.push_back(carried);
    res.predicted_egos.push_back(PlanarMotion{});
  }
  return res;
}

Tensor forecast_loss(const Tensor& logits, const SemanticOccGrid& target,
                     const Tensor& ego_hat, const PlanarMotion& ego_gt,
                     const LossWeights& w, LossParts* parts) {
  if (logits.shape().empty() || logits.shape()[0] != target.num_classes)
    throw ShapeError("forecast_loss: logit classes do not match target");
  std::int64_t valid = 0;
  Tensor ce = cross_entropy(logits, target.labels, &valid);
  if (valid == 0)
    std::fprintf(stderr,
                 "warning: loss target is all-ignore; semantic term is 0\n");
  Tensor pos = smooth_l1(slice_flat(ego_hat, 0, 2),
                         {float(ego_gt.dx), float(ego_gt.dy)});
  Tensor rot = yaw_abs_error(slice_flat(ego_hat, 2, 1), ego_gt.dpsi);
  Tensor total = add(affine(ce, float(w.sem), 0.0f),
                     add(affine(pos, float(w.pos), 0.0f),
                         affine(rot, float(w.rot), 0.0f)));
  if (parts) {
    parts->ce = ce.item();
    parts->pos = pos.item();
    parts->rot = rot.item();
    parts->total = total.item();
    parts->valid_voxels = valid;
  }
  return total;
}

namespace {

std::vector<int> epoch_order(int n, std::uint64_t seed, std::int64_t epoch) {
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  // splitmix-style mix so per-epoch streams are independent of each other
  std::uint64_t s = seed + 0x9E3779B97F4A7C15ULL * std::uint64_t(epoch + 1);
  s ^= s >> 30;
  s *= 0xBF58476D1CE4E5B9ULL;
  s ^= s >> 27;
  std::mt19937_64 rng(s);
  for (int i = n - 1; i > 0; --i) {
    const int j = int(rng() % std::uint64_t(i + 1));
    std::swap(idx[i], idx[j]);
  }
  return idx;
}

double window_mean_ce(const std::vector<LossParts>& losses, bool front) {
  const int n = int(losses.size());
  const int w = std::min(10, n);
  double s = 0;
  for (int i = 0; i < w; ++i) s += losses[front ? i : n - 1 - i].ce;
  return w ? s / w : 0.0;
}

}  // namespace

TrainReport train(const std::vector<OccSequence>& dataset, WorldModel& model,
                  AdamW& opt, const TrainConfig& cfg, TrainerState& ts) {
  if (dataset.empty()) throw ArgumentError("train: empty dataset");
  std::int64_t pairs_per_epoch = 0;
  for (const OccSequence& s : dataset) {
    if (s.num_frames() < 2)
      throw ArgumentError("train: every sequence needs at least 2 frames");
    if (!(s.frames[0].geom == model.config().grid) ||
        s.frames[0].num_classes != model.config().num_classes)
      throw DataError("train: sequence does not match the model config");
    pairs_per_epoch += s.num_frames() - 1;
  }

  opt.lr = cfg.lr;
  opt.zero_grad();
  TrainReport report;
  Tensor state = ts.state;
  std::vector<int> order;
  std::int64_t order_epoch = -1;
  double epoch_accum = 0;
  int epoch_count = 0;

  for (int done = 0; done < cfg.max_steps; ++done) {
    const std::int64_t global = ts.step + done;
    const std::int64_t epoch = global / pairs_per_epoch;
    std::int64_t off = global % pairs_per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(int(dataset.size()), cfg.seed, epoch);
      order_epoch = epoch;
    }
    std::size_t si = 0;
    while (off >= dataset[order[si]].num_frames() - 1) {
      off -= dataset[order[si]].num_frames() - 1;
      ++si;
    }
    const OccSequence& seq = dataset[order[si]];
    const int pair = int(off);
    if (pair == 0 || !state.defined()) state = model.initial_state();

    LossParts parts;
    {
      Tape tape;
      StepOut out = model.step(seq.frames[pair], state, seq.relatives[pair]);
      Tensor loss = forecast_loss(out.logits, seq.frames[pair + 1], out.ego,
                                  planar_from_se3(seq.relatives[pair]),
                                  cfg.weights, &parts);
      if (!std::isfinite(parts.total))
        throw NumericError("training loss is non-finite; aborting");
      backward(tape, loss);
      opt.step();
      opt.zero_grad();
      state = detach(out.state);
    }
    report.step_losses.push_back(parts);
    epoch_accum += parts.total;
    ++epoch_count;
    if (global % pairs_per_epoch == pairs_per_epoch - 1) {
      report.epoch_losses.push_back(epoch_accum / epoch_count);
      epoch_accum = 0;
      epoch_count = 0;
    }
  }
  if (epoch_count > 0) report.epoch_losses.push_back(epoch_accum / epoch_count);

  ts.step += cfg.max_steps;
  ts.state = state;
  report.steps_run = cfg.max_steps;
  report.initial_ce = window_mean_ce(report.step_losses, true);
  report.final_ce = window_mean_ce(report.step_losses, false);
  return report;
}

}  // namespace occstep
