#pragma once

#include <cstdint>
#include <vector>

#include "occstep/geometry.hpp"
#include "occstep/grid.hpp"

namespace occstep {

// Voxel-level confusion counts. A tally is a mergeable accumulator: scoring
// many grids in parallel and merging the tallies gives the same result as
// scoring them all into one tally.
struct ConfusionTally {
  int num_classes = 0;
  std::vector<std::int64_t> intersection;  // per class, pred == gt == c
  std::vector<std::int64_t> pred_count;    // per class, pred == c
  std::vector<std::int64_t> gt_count;      // per class, gt == c
  std::int64_t occ_intersection = 0;       // both non-empty, class-agnostic
  std::int64_t occ_pred = 0;
  std::int64_t occ_gt = 0;
  std::int64_t ignore_count = 0;           // gt == -1, excluded everywhere

  ConfusionTally() = default;
  explicit ConfusionTally(int k);
  void merge(const ConfusionTally& other);
};

// Adds one prediction/ground-truth pair to the tally. Voxels with gt == -1
// contribute only to ignore_count. Predictions must be valid classes.
void accumulate(ConfusionTally& tally, const SemanticOccGrid& pred,
                const SemanticOccGrid& gt);

// A score in percent; `defined` is false (and value is NaN) when the tally
// has nothing to ground the score on.
struct ScoreResult {
  double value = 0;
  bool defined = false;
};

// Mean IoU over the semantic classes 1..K-1, skipping classes absent from
// both prediction and ground truth (their union is empty, so the ratio is
// 0/0). Undefined when no class qualifies.
ScoreResult miou(const ConfusionTally& tally);

// Binary occupied-versus-empty IoU (occupied = class != 0), class-agnostic.
// Undefined when the ground truth contains no occupied voxel.
ScoreResult iou(const ConfusionTally& tally);

// Planning errors between per-step planar motions. By default the motions
// are folded into cumulative trajectories and compared per horizon step:
// L2 is the mean Euclidean error of the integrated position, L1 the mean
// |wrapped difference| of the integrated yaw. With per_step = true the raw
// per-step motions are compared instead.
double plan_l2(const std::vector<PlanarMotion>& pred,
               const std::vector<PlanarMotion>& gt, bool per_step = false);
double plan_l1_yaw(const std::vector<PlanarMotion>& pred,
                   const std::vector<PlanarMotion>& gt, bool per_step = false);

// Arithmetic mean over per-horizon scores (e.g. the 1 s / 2 s / 3 s columns).
double horizon_average(const std::vector<double>& per_horizon);

// Frame indices (exclusive ends) of the cumulative horizon buckets: bucket i
// covers prediction steps 1..ends[i] where ends[i] ~ round(fps * seconds[i]),
// clamped to [1, horizon]. Duplicate ends after clamping are kept; callers
// control the seconds list.
std::vector<int> horizon_bucket_ends(double fps,
                                     const std::vector<double>& seconds,
                                     int horizon);

}  // namespace occstep
