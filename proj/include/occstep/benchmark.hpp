#pragma once

#include <cstdint>
#include <string>

#include "occstep/rollout.hpp"

namespace occstep {

// ---- corruption regimes -----------------------------------------------------
//
// Each generator rewrites only the history slice of a sequence (frames
// [0, history_len)); future frames, poses, and times pass through untouched.
// All are pure functions of (sequence, spec): the same seed gives the same
// output bytes.

struct CorruptionSpec {
  enum class Regime { reverse, discontinuous, fragmentary, reductive };
  Regime regime = Regime::reverse;
  double p_f = 0.25;       // fraction of history frames touched
  double p_v = 0.25;       // within-frame fraction (views / occupied voxels)
  int views = 6;           // azimuthal sector count for the fragmentary regime
  std::uint64_t seed = 0;
};

const char* regime_name(CorruptionSpec::Regime r);
// Returns false if the name is not one of the four regimes.
bool regime_from_name(const std::string& name, CorruptionSpec::Regime& out);

// Mirrors every history frame across the vehicle centerline (y -> -y, which
// flips the W axis) and conjugates every pose by F = diag(1,-1,1,1), so a
// planar motion (dx, dy, dpsi) becomes (dx, -dy, -dpsi). An involution.
OccSequence gen_reverse(const OccSequence& seq);

// Drops round(p_f * history_len) uniformly chosen history frames, never the
// most recent one. Survivors keep their absolute poses and timestamps;
// relative poses are recomputed across the gaps. Errors if nothing survives.
OccSequence gen_discontinuous(const OccSequence& seq, const CorruptionSpec& spec);

// In round(p_f * history_len) frames, blanks the voxels of
// round(p_v * views) azimuthal sectors (by atan2(y, x) of the voxel center
// around the ego origin) to the ignore label -1, recording each blanked
// voxel in view_masks.
OccSequence gen_fragmentary(const OccSequence& seq, const CorruptionSpec& spec);

// In round(p_f * history_len) frames, relabels round(p_v * occupied) occupied
// voxels with a uniformly chosen different non-empty class. Empty voxels are
// never touched, so the emptiness mask is preserved bit-exactly. Requires at
// least 3 classes (a distinct wrong class must exist).
OccSequence gen_reductive(const OccSequence& seq, const CorruptionSpec& spec);

// Dispatches to the generator named by spec.regime.
OccSequence apply_corruption(const OccSequence& seq, const CorruptionSpec& spec);

// ---- synthetic micro-scenes -------------------------------------------------

// Scene family: an infinite ground plane (class 1) below ground_height, an
// optional static wall (class 2), and randomly placed rigid boxes
// (classes 2.., or 3.. when the wall is present) drifting with constant
// planar velocity, observed from a scripted constant-rate ego trajectory.
// Frames are rendered in the ego frame by testing voxel centers against the
// world-space scene; poses are closed-form and exact.
struct SceneConfig {
  GridGeometry grid;              // defaults to desk_grid() when unset
  int num_classes = 8;
  int num_frames = 14;
  int history_len = 8;
  double fps = 2.0;

  int min_boxes = 1, max_boxes = 3;
  double ground_height = 0.5;     // meters; class 1 below this plane
  bool include_wall = false;      // static class-2 slab across the y extent
  double box_min_size = 1.5, box_max_size = 2.5;       // planar extent (m)
  double box_min_height = 1.0, box_max_height = 1.75;  // vertical extent (m)
  double box_center_margin = 3.5; // |x0|, |y0| upper bound for box centers
  double box_offset_min = 1.5;    // lower bound on |y0| (offset from center)
  double box_speed_max = 0.25;    // per-axis drift, meters per frame

  enum class EgoPath { straight, arc, turn, mixed };
  EgoPath path = EgoPath::mixed;
  double speed_min = 0.1, speed_max = 0.4;  // meters per frame
  double yaw_min = 0.05, yaw_max = 0.18;    // radians per frame
};

OccSequence gen_synthetic_scene(const SceneConfig& cfg, std::uint64_t seed);

}  // namespace occstep
