#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "occstep/common.hpp"

namespace occstep {

// Axis convention: grid index (d,h,w) maps to metric (z,x,y).
// Voxel centers sit half a cell in from the low range edge.
struct GridGeometry {
  std::array<int, 3> dims{1, 1, 1};  // (D,H,W)
  double x_min = 0, x_max = 1;
  double y_min = 0, y_max = 1;
  double z_min = 0, z_max = 1;
  bool flip_y = false;

  int d() const { return dims[0]; }
  int h() const { return dims[1]; }
  int w() const { return dims[2]; }
  std::int64_t size() const {
    return std::int64_t(dims[0]) * dims[1] * dims[2];
  }

  double dx() const { return (x_max - x_min) / dims[1]; }
  double dy() const { return (y_max - y_min) / dims[2]; }
  double dz() const { return (z_max - z_min) / dims[0]; }

  void validate() const;

  Eigen::Vector3d voxel_center(int d, int h, int w) const;

  // Inverse of voxel_center, continuous: returns fractional (d,h,w) such
  // that integer values land exactly on voxel centers.
  Eigen::Vector3d world_to_fractional(const Eigen::Vector3d& p) const;

  std::int64_t raster_index(int d, int h, int w) const {
    return (std::int64_t(d) * dims[1] + h) * dims[2] + w;
  }

  bool operator==(const GridGeometry&) const = default;
};

// Dense semantic occupancy: one int8 label per voxel, raster order d-major.
// -1 marks ignore; 0 is empty; [1, K) are semantic classes.
struct SemanticOccGrid {
  GridGeometry geom;
  int num_classes = 2;
  std::vector<std::int8_t> labels;

  SemanticOccGrid() = default;
  SemanticOccGrid(const GridGeometry& g, int k)
      : geom(g), num_classes(k), labels(g.size(), 0) {
    if (k < 2) throw ArgumentError("num_classes must be >= 2");
  }

  std::int8_t& at(int d, int h, int w) { return labels[geom.raster_index(d, h, w)]; }
  std::int8_t at(int d, int h, int w) const { return labels[geom.raster_index(d, h, w)]; }

  void validate() const;
};

// forward[s] = raster index of the voxel at sequence position s.
// inverse[r] = sequence position of raster index r.
struct Permutation {
  std::vector<std::int32_t> forward;
  std::vector<std::int32_t> inverse;
  std::array<int, 3> dims{0, 0, 0};
  int tile = 1;

  std::int64_t length() const { return std::int64_t(forward.size()); }
};

// Bit-interleaved key, x least significant: bit i of x -> 3i, y -> 3i+1,
// z -> 3i+2. Coordinates must fit in 21 bits.
std::uint64_t morton_key(std::uint32_t x, std::uint32_t y, std::uint32_t z);

// Two-level Z-order: bricks of tile^3 voxels (boundary bricks truncated)
// visited in Morton order of brick indices, voxels inside a brick in Morton
// order of in-brick offsets. Grid axes map (h,w,d) -> (x,y,z).
Permutation build_tiled_morton(const std::array<int, 3>& dims, int tile);

}  // namespace occstep
