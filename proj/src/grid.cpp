#include "occstep/grid.hpp"

#include <algorithm>
#include <cmath>

namespace occstep {

void GridGeometry::validate() const {
  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1)
    throw ConfigError("grid dims must be >= 1 per axis");
  if (!(dx() > 0) || !(dy() > 0) || !(dz() > 0))
    throw ConfigError("grid ranges must have positive extent");
}

Eigen::Vector3d GridGeometry::voxel_center(int d, int h, int w) const {
  if (d < 0 || d >= dims[0] || h < 0 || h >= dims[1] || w < 0 || w >= dims[2])
    throw IndexError("voxel index out of range");
  const double x = x_min + (h + 0.5) * dx();
  const double y = flip_y ? y_max - (w + 0.5) * dy() : y_min + (w + 0.5) * dy();
  const double z = z_min + (d + 0.5) * dz();
  return {x, y, z};
}

Eigen::Vector3d GridGeometry::world_to_fractional(const Eigen::Vector3d& p) const {
  const double fh = (p.x() - x_min) / dx() - 0.5;
  const double fw = flip_y ? (y_max - p.y()) / dy() - 0.5 : (p.y() - y_min) / dy() - 0.5;
  const double fd = (p.z() - z_min) / dz() - 0.5;
  return {fd, fh, fw};
}

void SemanticOccGrid::validate() const {
  geom.validate();
  if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
  if (std::int64_t(labels.size()) != geom.size())
    throw ShapeError("label count does not match grid dims");
  for (std::int8_t v : labels)
    if (v < -1 || v >= num_classes) throw DataError("label outside {-1, 0..K-1}");
}

namespace {

// Spread the low 21 bits of x so bit i lands at bit 3i.
inline std::uint64_t spread3(std::uint64_t x) {
  x &= 0x1fffff;
  x = (x | x << 32) & 0x1f00000000ffffULL;
  x = (x | x << 16) & 0x1f0000ff0000ffULL;
  x = (x | x << 8) & 0x100f00f00f00f00fULL;
  x = (x | x << 4) & 0x10c30c30c30c30c3ULL;
  x = (x | x << 2) & 0x1249249249249249ULL;
  return x;
}

}  // namespace

std::uint64_t morton_key(std::uint32_t x, std::uint32_t y, std::uint32_t z) {
  return spread3(x) | spread3(y) << 1 | spread3(z) << 2;
}

Permutation build_tiled_morton(const std::array<int, 3>& dims, int tile) {
  const int d = dims[0], h = dims[1], w = dims[2];
  if (d < 1 || h < 1 || w < 1) throw ArgumentError("dims must be >= 1");
  if (tile < 1) throw ArgumentError("tile must be >= 1");

  Permutation p;
  p.dims = dims;
  p.tile = tile;
  const std::int64_t total = std::int64_t(d) * h * w;
  p.forward.reserve(total);

  const int nbd = (d + tile - 1) / tile;
  const int nbh = (h + tile - 1) / tile;
  const int nbw = (w + tile - 1) / tile;

  // Brick order: Morton over brick indices, x <- h, y <- w, z <- d.
  std::vector<std::array<int, 3>> bricks;
  bricks.reserve(std::size_t(nbd) * nbh * nbw);
  for (int bd = 0; bd < nbd; ++bd)
    for (int bh = 0; bh < nbh; ++bh)
      for (int bw = 0; bw < nbw; ++bw) bricks.push_back({bd, bh, bw});
  std::stable_sort(bricks.begin(), bricks.end(),
                   [](const std::array<int, 3>& a, const std::array<int, 3>& b) {
                     return morton_key(a[1], a[2], a[0]) < morton_key(b[1], b[2], b[0]);
                   });

  std::vector<std::uint64_t> keys;
  std::vector<std::int32_t> cell;
  for (const auto& b : bricks) {
    const int d0 = b[0] * tile, h0 = b[1] * tile, w0 = b[2] * tile;
    const int dn = std::min(tile, d - d0), hn = std::min(tile, h - h0),
              wn = std::min(tile, w - w0);
    keys.clear();
    cell.clear();
    for (int ud = 0; ud < dn; ++ud)
      for (int uh = 0; uh < hn; ++uh)
        for (int uw = 0; uw < wn; ++uw) {
          keys.push_back(morton_key(uh, uw, ud));
          cell.push_back(std::int32_t(
              (std::int64_t(d0 + ud) * h + (h0 + uh)) * w + (w0 + uw)));
        }
    std::vector<std::int32_t> order(cell.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = std::int32_t(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::int32_t a, std::int32_t b) { return keys[a] < keys[b]; });
    for (std::int32_t i : order) p.forward.push_back(cell[i]);
  }

  p.inverse.assign(total, -1);
  for (std::int64_t s = 0; s < total; ++s) p.inverse[p.forward[s]] = std::int32_t(s);
  return p;
}

}  // namespace occstep
