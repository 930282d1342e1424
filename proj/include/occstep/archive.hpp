#pragma once

#include <cstdint>
#include <string>

#include "occstep/model.hpp"
#include "occstep/rollout.hpp"

namespace occstep {

// ---- sequence archives ------------------------------------------------------
//
// One sequence per file: a line-oriented text manifest (format version,
// dimensions, class count, geometry, frame count, timestamps, provenance,
// mask flag) followed by the binary payload — one byte per voxel in raster
// order (-1 stored as 255) per frame, then 16 little-endian float64 per
// frame (row-major 4x4 pose), then optional bit-packed view masks. Relative
// poses are never stored; they are recomputed from the absolutes on load,
// which makes the write -> read round trip byte-identical and exact.

void save_archive(const std::string& path, const OccSequence& seq,
                  const std::string& provenance = "");
OccSequence load_archive(const std::string& path,
                         std::string* provenance = nullptr);

// ---- checkpoints ------------------------------------------------------------
//
// A checkpoint stores the seed, the global training-step counter, a config
// echo, and every named model parameter exactly once. A training checkpoint
// additionally stores the optimizer moment buffers and the live recurrent
// state so a resumed run continues bit-for-bit where it stopped; evaluation
// ignores those extras.

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::int64_t step = 0;
  bool has_optimizer = false;
  bool has_train_state = false;
};

void save_checkpoint(const std::string& path, const WorldModel& model,
                     std::uint64_t seed, const TrainerState& ts,
                     AdamW* opt = nullptr);

// Header-only read: the model configuration a checkpoint was built for.
ModelConfig read_checkpoint_config(const std::string& path);

// Loads parameters (and extras, when the pointers are given and the file has
// them) into an already-constructed model, which must match the stored
// config exactly. Requesting the optimizer from a checkpoint without one is
// an error; a missing train state loads as the empty (boundary) state.
CheckpointMeta load_checkpoint(const std::string& path, WorldModel& model,
                               AdamW* opt = nullptr,
                               TrainerState* ts = nullptr);

}  // namespace occstep
