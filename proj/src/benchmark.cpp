#include "occstep/benchmark.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "occstep/common.hpp"
#include "occstep/model.hpp"

namespace occstep {

namespace {

double u01(std::mt19937_64& rng) {
  return double(rng() >> 11) * 0x1.0p-53;  // 53-bit mantissa in [0,1)
}

double uniform(std::mt19937_64& rng, double a, double b) {
  return a + (b - a) * u01(rng);
}

std::int64_t uniform_int(std::mt19937_64& rng, std::int64_t n) {
  return std::int64_t(rng() % std::uint64_t(n));
}

double pick_sign(std::mt19937_64& rng) { return u01(rng) < 0.5 ? -1.0 : 1.0; }

int round_count(double x) { return int(std::llround(x)); }

// First k elements of a uniform permutation of {0..n-1}, ascending.
std::vector<int> sample_without_replacement(std::mt19937_64& rng, int n, int k) {
  std::vector<int> pool(n);
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < k; ++i) {
    const int j = i + int(uniform_int(rng, n - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

void check_fractions(const CorruptionSpec& spec) {
  if (spec.p_f < 0 || spec.p_f > 1 || spec.p_v < 0 || spec.p_v > 1)
    throw ArgumentError("corruption fractions must lie in [0, 1]");
}

}  // namespace

const char* regime_name(CorruptionSpec::Regime r) {
  switch (r) {
    case CorruptionSpec::Regime::reverse: return "reverse";
    case CorruptionSpec::Regime::discontinuous: return "discontinuous";
    case CorruptionSpec::Regime::fragmentary: return "fragmentary";
    case CorruptionSpec::Regime::reductive: return "reductive";
  }
  throw ArgumentError("unknown corruption regime");
}

bool regime_from_name(const std::string& name, CorruptionSpec::Regime& out) {
  if (name == "reverse") out = CorruptionSpec::Regime::reverse;
  else if (name == "discontinuous") out = CorruptionSpec::Regime::discontinuous;
  else if (name == "fragmentary") out = CorruptionSpec::Regime::fragmentary;
  else if (name == "reductive") out = CorruptionSpec::Regime::reductive;
  else return false;
  return true;
}

OccSequence gen_reverse(const OccSequence& seq) {
  OccSequence out = seq;
  const GridGeometry& g = seq.frames[0].geom;
  const int D = g.d(), H = g.h(), W = g.w();
  for (int f = 0; f < seq.history_len; ++f) {
    for (int d = 0; d < D; ++d)
      for (int h = 0; h < H; ++h)
        for (int w = 0; w < W; ++w) {
          const std::int64_t dst = g.raster_index(d, h, w);
          const std::int64_t src = g.raster_index(d, h, W - 1 - w);
          out.frames[f].labels[dst] = seq.frames[f].labels[src];
          if (!seq.view_masks.empty() && !seq.view_masks[f].empty())
            out.view_masks[f][dst] = seq.view_masks[f][src];
        }
    out.poses[f] = reflect_y(seq.poses[f]);
  }
  out.relatives = relative_from_absolute(out.poses);
  return out;
}

OccSequence gen_discontinuous(const OccSequence& seq, const CorruptionSpec& spec) {
  check_fractions(spec);
  const int t0 = seq.history_len;
  if (t0 < 2)
    throw ArgumentError("discontinuous corruption needs at least 2 history frames");
  const int n_drop = round_count(spec.p_f * t0);
  if (n_drop <= 0) return seq;
  if (n_drop > t0 - 1)
    throw DataError("discontinuous corruption would drop every history frame");

  std::mt19937_64 rng(spec.seed);
  // The most recent history frame is exempt so rollouts still start from a
  // real observation.
  const std::vector<int> dropped = sample_without_replacement(rng, t0 - 1, n_drop);

  OccSequence out;
  std::vector<char> keep(seq.num_frames(), 1);
  for (int f : dropped) keep[f] = 0;
  for (int f = 0; f < seq.num_frames(); ++f) {
    if (!keep[f]) continue;
    out.frames.push_back(seq.frames[f]);
    out.poses.push_back(seq.poses[f]);
    out.frame_times.push_back(seq.frame_times[f]);
    if (!seq.view_masks.empty()) out.view_masks.push_back(seq.view_masks[f]);
  }
  out.history_len = t0 - n_drop;
  // Recomputing from surviving absolutes equals the product of the dropped
  // per-step relatives (the chain telescopes).
  out.relatives = relative_from_absolute(out.poses);
  return out;
}

OccSequence gen_fragmentary(const OccSequence& seq, const CorruptionSpec& spec) {
  check_fractions(spec);
  if (spec.views < 1)
    throw ArgumentError("fragmentary corruption needs at least 1 view sector");
  const int t0 = seq.history_len;
  const int n_frames = std::min(round_count(spec.p_f * t0), t0);
  const int n_sectors = std::min(round_count(spec.p_v * spec.views), spec.views);
  if (n_frames <= 0 || n_sectors <= 0) return seq;

  // Azimuthal sectors around the ego origin with equal cell counts: rank the
  // (h, w) columns by center angle and cut the ranking into `views` runs.
  // Equal-width wedges would over-collect cells toward the corners of a box
  // grid, letting the blanked fraction drift off sectors/views.
  const GridGeometry& g = seq.frames[0].geom;
  const std::int64_t hw = std::int64_t(g.h()) * g.w();
  std::vector<double> angle(hw);
  std::vector<std::int64_t> order(hw);
  for (int h = 0; h < g.h(); ++h)
    for (int w = 0; w < g.w(); ++w) {
      const Eigen::Vector3d c = g.voxel_center(0, h, w);
      angle[std::int64_t(h) * g.w() + w] = std::atan2(c.y(), c.x());
    }
  std::iota(order.begin(), order.end(), std::int64_t(0));
  std::stable_sort(order.begin(), order.end(),
                   [&](std::int64_t a, std::int64_t b) {
                     return angle[a] < angle[b];
                   });
  std::vector<int> sector2d(hw);
  for (std::int64_t r = 0; r < hw; ++r)
    sector2d[order[r]] =
        std::min(int(r * spec.views / hw), spec.views - 1);
  std::vector<int> sector_of(g.size());
  for (int d = 0; d < g.d(); ++d)
    for (int h = 0; h < g.h(); ++h)
      for (int w = 0; w < g.w(); ++w)
        sector_of[g.raster_index(d, h, w)] =
            sector2d[std::int64_t(h) * g.w() + w];

  OccSequence out = seq;
  if (out.view_masks.empty()) out.view_masks.resize(seq.num_frames());
  std::mt19937_64 rng(spec.seed);
  for (int f : sample_without_replacement(rng, t0, n_frames)) {
    const std::vector<int> sectors =
        sample_without_replacement(rng, spec.views, n_sectors);
    std::vector<char> blank(spec.views, 0);
    for (int s : sectors) blank[s] = 1;
    if (out.view_masks[f].empty()) out.view_masks[f].assign(g.size(), 0);
    for (std::int64_t i = 0; i < g.size(); ++i)
      if (blank[sector_of[i]]) {
        out.frames[f].labels[i] = -1;
        out.view_masks[f][i] = 1;
      }
  }
  return out;
}

OccSequence gen_reductive(const OccSequence& seq, const CorruptionSpec& spec) {
  check_fractions(spec);
  const int k = seq.frames[0].num_classes;
  if (k < 3)
    throw DataError("reductive corruption needs at least 3 classes");
  const int t0 = seq.history_len;
  const int n_frames = std::min(round_count(spec.p_f * t0), t0);
  if (n_frames <= 0) return seq;

  OccSequence out = seq;
  std::mt19937_64 rng(spec.seed);
  for (int f : sample_without_replacement(rng, t0, n_frames)) {
    std::vector<std::int64_t> occ;
    for (std::int64_t i = 0; i < std::int64_t(out.frames[f].labels.size()); ++i)
      if (out.frames[f].labels[i] > 0) occ.push_back(i);
    const int n_corrupt =
        std::min<std::int64_t>(round_count(spec.p_v * double(occ.size())),
                               std::int64_t(occ.size()));
    for (int i = 0; i < n_corrupt; ++i) {
      const std::int64_t j = i + uniform_int(rng, std::int64_t(occ.size()) - i);
      std::swap(occ[i], occ[j]);
      const int old = out.frames[f].labels[occ[i]];
      const int r = 1 + int(uniform_int(rng, k - 2));  // {1..K-1} minus old
      out.frames[f].labels[occ[i]] = std::int8_t(r < old ? r : r + 1);
    }
  }
  return out;
}

OccSequence apply_corruption(const OccSequence& seq, const CorruptionSpec& spec) {
  switch (spec.regime) {
    case CorruptionSpec::Regime::reverse: return gen_reverse(seq);
    case CorruptionSpec::Regime::discontinuous: return gen_discontinuous(seq, spec);
    case CorruptionSpec::Regime::fragmentary: return gen_fragmentary(seq, spec);
    case CorruptionSpec::Regime::reductive: return gen_reductive(seq, spec);
  }
  throw ArgumentError("unknown corruption regime");
}

// ---- synthetic micro-scenes -------------------------------------------------

namespace {

struct SceneBox {
  double cx, cy, hx, hy;  // planar center and half extents at t = 0
  double z0, z1;          // vertical span
  double vx, vy;          // drift per frame
  int cls;
};

bool box_contains(const SceneBox& b, double t, const Eigen::Vector3d& q) {
  return std::abs(q.x() - (b.cx + b.vx * t)) <= b.hx &&
         std::abs(q.y() - (b.cy + b.vy * t)) <= b.hy &&
         q.z() >= b.z0 && q.z() <= b.z1;
}

}  // namespace

OccSequence gen_synthetic_scene(const SceneConfig& cfg, std::uint64_t seed) {
  GridGeometry g = cfg.grid;
  if (g == GridGeometry{}) g = desk_grid();
  g.validate();
  if (g.h() < 8 || g.w() < 8)
    throw ConfigError("scene grid needs at least 8 voxels per planar axis");
  if (cfg.num_classes < 3)
    throw ConfigError("scene needs at least 3 classes (ground plus one object)");
  if (cfg.num_frames < 2)
    throw ConfigError("scene needs at least 2 frames");
  if (cfg.history_len < 1 || cfg.history_len > cfg.num_frames)
    throw ConfigError("scene history length out of range");
  if (cfg.fps <= 0) throw ConfigError("scene fps must be positive");
  if (cfg.min_boxes < 0 || cfg.max_boxes < cfg.min_boxes)
    throw ConfigError("scene box count range is invalid");
  if (cfg.box_min_size <= 0 || cfg.box_max_size < cfg.box_min_size ||
      cfg.box_min_height <= 0 || cfg.box_max_height < cfg.box_min_height ||
      cfg.speed_min < 0 || cfg.speed_max < cfg.speed_min || cfg.yaw_min < 0 ||
      cfg.yaw_max < cfg.yaw_min || cfg.box_speed_max < 0)
    throw ConfigError("scene parameter range is invalid");
  const double ex = g.x_max - g.x_min, ey = g.y_max - g.y_min;
  if (cfg.box_max_size > std::min(ex, ey))
    throw ConfigError("box larger than grid");
  if (cfg.box_offset_min > cfg.box_center_margin)
    throw ConfigError("box offset bound exceeds the center margin");

  std::mt19937_64 rng(seed);

  // Ego script: constant planar twist, integrated in closed form.
  SceneConfig::EgoPath path = cfg.path;
  if (path == SceneConfig::EgoPath::mixed) {
    const int pick = int(uniform_int(rng, 3));
    path = pick == 0 ? SceneConfig::EgoPath::straight
                     : (pick == 1 ? SceneConfig::EgoPath::arc
                                  : SceneConfig::EgoPath::turn);
  }
  double speed = 0, yaw_rate = 0;
  switch (path) {
    case SceneConfig::EgoPath::straight:
      speed = uniform(rng, cfg.speed_min, cfg.speed_max);
      break;
    case SceneConfig::EgoPath::arc:
      speed = uniform(rng, cfg.speed_min, cfg.speed_max);
      yaw_rate = pick_sign(rng) * uniform(rng, cfg.yaw_min, cfg.yaw_max);
      break;
    case SceneConfig::EgoPath::turn:
      yaw_rate = pick_sign(rng) * uniform(rng, cfg.yaw_min, cfg.yaw_max);
      break;
    case SceneConfig::EgoPath::mixed:
      break;  // resolved above
  }

  std::vector<SceneBox> boxes;
  int next_class = 2;
  if (cfg.include_wall) {
    SceneBox wall;
    wall.hx = 0.5;
    wall.hy = 0.4 * ey;
    wall.cx = pick_sign(rng) * uniform(rng, 0.45 * ex / 2, 0.7 * ex / 2);
    wall.cy = 0;
    wall.z0 = cfg.ground_height;
    wall.z1 = std::min(cfg.ground_height + 2.5, g.z_max);
    wall.vx = wall.vy = 0;
    wall.cls = next_class++;
    boxes.push_back(wall);
  }
  const int n_boxes =
      cfg.min_boxes + int(uniform_int(rng, cfg.max_boxes - cfg.min_boxes + 1));
  for (int b = 0; b < n_boxes; ++b) {
    SceneBox box;
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      box.hx = uniform(rng, cfg.box_min_size, cfg.box_max_size) / 2;
      box.hy = uniform(rng, cfg.box_min_size, cfg.box_max_size) / 2;
      box.cx = uniform(rng, -cfg.box_center_margin, cfg.box_center_margin);
      box.cy = pick_sign(rng) *
               uniform(rng, cfg.box_offset_min, cfg.box_center_margin);
      placed = true;
      for (const SceneBox& other : boxes)
        if (std::abs(box.cx - other.cx) <= box.hx + other.hx + 0.5 &&
            std::abs(box.cy - other.cy) <= box.hy + other.hy + 0.5) {
          placed = false;
          break;
        }
    }
    if (!placed) throw ConfigError("could not place boxes without overlap");
    box.z0 = cfg.ground_height;
    box.z1 = box.z0 + uniform(rng, cfg.box_min_height, cfg.box_max_height);
    box.vx = uniform(rng, -cfg.box_speed_max, cfg.box_speed_max);
    box.vy = uniform(rng, -cfg.box_speed_max, cfg.box_speed_max);
    box.cls = next_class;
    // Cycle through the non-ground classes, skipping the wall's class.
    const int first = cfg.include_wall ? 3 : 2;
    next_class = next_class + 1 < cfg.num_classes ? next_class + 1 : first;
    boxes.push_back(box);
  }

  OccSequence seq;
  seq.history_len = cfg.history_len;
  for (int t = 0; t < cfg.num_frames; ++t) {
    const double psi = yaw_rate * t;
    double x, y;
    if (std::abs(yaw_rate) < 1e-12) {
      x = speed * t;
      y = 0;
    } else {
      x = speed / yaw_rate * std::sin(psi);
      y = speed / yaw_rate * (1 - std::cos(psi));
    }
    const PoseSE3 pose = se2_to_se3(PlanarMotion{x, y, psi});

    SemanticOccGrid frame(g, cfg.num_classes);
    for (int d = 0; d < g.d(); ++d)
      for (int h = 0; h < g.h(); ++h)
        for (int w = 0; w < g.w(); ++w) {
          const Eigen::Vector3d local = g.voxel_center(d, h, w);
          const Eigen::Vector3d q =
              (pose * local.homogeneous()).head<3>();
          std::int8_t label = 0;
          for (const SceneBox& b : boxes)
            if (box_contains(b, t, q)) {
              label = std::int8_t(b.cls);
              break;
            }
          if (label == 0 && q.z() < cfg.ground_height) label = 1;
          frame.labels[g.raster_index(d, h, w)] = label;
        }
    seq.frames.push_back(std::move(frame));
    seq.poses.push_back(pose);
    seq.frame_times.push_back(t / cfg.fps);
  }
  seq.relatives = relative_from_absolute(seq.poses);
  return seq;
}

}  // namespace occstep
