#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "occstep/geometry.hpp"
#include "occstep/grid.hpp"
#include "occstep/model.hpp"

namespace occstep {

// A contiguous occupancy recording: frames[0, history_len) are the history
// fed to the model, the rest are future targets. `relatives[i]` maps frame
// i+1 coordinates into frame i and always equals
// relative_from_absolute(poses)[i].
struct OccSequence {
  std::vector<SemanticOccGrid> frames;
  std::vector<PoseSE3> poses;
  std::vector<PoseSE3> relatives;
  std::vector<double> frame_times;
  // Optional per-frame ignore masks (1 = voxel blanked to -1); empty vector
  // for frames without a mask.
  std::vector<std::vector<std::uint8_t>> view_masks;
  int history_len = 0;

  int num_frames() const { return int(frames.size()); }
  void rebuild_relatives() {
    relatives = poses.size() >= 2 ? relative_from_absolute(poses)
                                  : std::vector<PoseSE3>{};
  }
  void validate() const;
};

struct RolloutResult {
  enum class Mode { reactive, proactive };
  Mode mode = Mode::reactive;
  // Per step: class probabilities (K * D*H*W, channel-major) and the argmax
  // occupancy (ties break to the lower class index).
  std::vector<std::vector<float>> predicted_probs;
  std::vector<SemanticOccGrid> predicted_frames;
  // Reactive: the motion actually executed (warped with) at each step.
  // Proactive: the ego head's estimate at each step.
  std::vector<PlanarMotion> predicted_egos;
};

// Runs one model step per history frame (composed gap relatives come in via
// seq.relatives) and returns the final state plus the last step's ego
// estimate, which seeds the first reactive action.
struct WarmupOut {
  Tensor state;
  PlanarMotion last_ego;
};
WarmupOut warmup(const OccSequence& history, const StepModel& model);

// Autoregressive forecast of `horizon` frames. Step 1 consumes the last
// real observation; later steps consume the previous argmax prediction
// (or the last observation again when literal_last_observation is set).
// The warp pose is the previous step's ego estimate mapped through
// se2_to_se3.
RolloutResult reactive_rollout(const OccSequence& history, int horizon,
                               const StepModel& model,
                               bool literal_last_observation = false);

// Same loop, but the warp poses are supplied: future_relatives[tau] maps
// predicted-frame-(tau+1) coordinates into the previous frame.
RolloutResult proactive_rollout(const OccSequence& history,
                                const std::vector<PoseSE3>& future_relatives,
                                const StepModel& model,
                                bool literal_last_observation = false);

RolloutResult baseline_copy_forward(const OccSequence& history, int horizon);

struct LossWeights {
  double sem = 1.0;
  double pos = 0.1;
  double rot = 0.1;
};

struct LossParts {
  double total = 0, ce = 0, pos = 0, rot = 0;
  std::int64_t valid_voxels = 0;
};

// lambda_sem * CE(logits, target; ignore -1) + lambda_pos * SmoothL1 on
// (d_x, d_y) + lambda_rot * |wrap(psi_hat) - wrap(psi)|. ego_hat is the
// (3,1) ego-head output so gradients flow through it.
Tensor forecast_loss(const Tensor& logits, const SemanticOccGrid& target,
                     const Tensor& ego_hat, const PlanarMotion& ego_gt,
                     const LossWeights& w, LossParts* parts = nullptr);

struct TrainConfig {
  int max_steps = 200;  // one step = one frame-pair update
  double lr = 1e-3;
  double weight_decay = 0.01;
  LossWeights weights;
  std::uint64_t seed = 0;
};

struct TrainReport {
  std::vector<LossParts> step_losses;   // per pair update
  std::vector<double> epoch_losses;     // mean total loss per (partial) epoch
  double initial_ce = 0;                // mean CE over the first few updates
  double final_ce = 0;                  // mean CE over the last few updates
  int steps_run = 0;
};

// Mutable training-loop state, checkpointable: the step counter fixes the
// position in the (seeded) shuffled pair schedule; `state` is the recurrent
// state carried into the next pair of the current sequence.
struct TrainerState {
  std::int64_t step = 0;
  Tensor state;  // empty tensor means "at a sequence boundary"
};

// Teacher-forced next-frame training: for sequence pair (i, i+1), the model
// steps on frame i with the dataset relative pose and is scored against
// frame i+1 plus the planar motion of that same relative. The recurrent
// state crosses pairs inside a sequence but gradients do not (detached), and
// it resets at sequence boundaries. Sequence order reshuffles every epoch
// from (seed, epoch). Aborts with a numeric error if the loss goes
// non-finite.
TrainReport train(const std::vector<OccSequence>& dataset, WorldModel& model,
                  AdamW& opt, const TrainConfig& cfg, TrainerState& ts);

}  // namespace occstep
