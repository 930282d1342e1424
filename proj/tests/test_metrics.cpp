#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "occstep/metrics.hpp"
#include "test_support.hpp"

using namespace occstep;

namespace {

// Independent per-voxel reference scorer: plain counting loops and the
// textbook ratio formulas, no shared code with the library accumulator.
struct BruteScores {
  double miou = 0, iou = 0;
  bool miou_defined = false, iou_defined = false;
};

BruteScores brute_force(
    const std::vector<std::pair<SemanticOccGrid, SemanticOccGrid>>& pairs) {
  const int k = pairs.front().first.num_classes;
  std::vector<std::int64_t> inter(k, 0), pred(k, 0), gt(k, 0);
  std::int64_t oi = 0, op = 0, og = 0;
  for (const auto& [p, g] : pairs) {
    for (std::int64_t i = 0; i < g.geom.size(); ++i) {
      const int t = g.labels[i];
      const int q = p.labels[i];
      if (t == -1) continue;
      ++pred[q];
      ++gt[t];
      if (q == t) ++inter[q];
      if (q != 0) ++op;
      if (t != 0) ++og;
      if (q != 0 && t != 0) ++oi;
    }
  }
  BruteScores out;
  double sum = 0;
  int present = 0;
  for (int c = 1; c < k; ++c) {
    const std::int64_t uni = pred[c] + gt[c] - inter[c];
    if (uni == 0) continue;
    sum += double(inter[c]) / double(uni);
    ++present;
  }
  if (present > 0) {
    out.miou = 100.0 * sum / present;
    out.miou_defined = true;
  }
  if (og > 0) {
    out.iou = 100.0 * double(oi) / double(op + og - oi);
    out.iou_defined = true;
  }
  return out;
}

SemanticOccGrid random_grid(const GridGeometry& g, int k, std::mt19937_64& rng,
                            double ignore_frac) {
  SemanticOccGrid o(g, k);
  for (auto& l : o.labels) {
    const double u = test::urand(rng, 0, 1);
    if (u < ignore_frac) {
      l = -1;
    } else {
      l = std::int8_t(int(test::urand(rng, 0, 1) * k) % k);
    }
  }
  return o;
}

double class_iou(const SemanticOccGrid& pred, const SemanticOccGrid& gt, int c) {
  ConfusionTally t;
  accumulate(t, pred, gt);
  const std::int64_t uni = t.pred_count[c] + t.gt_count[c] - t.intersection[c];
  return uni == 0 ? 1.0 : double(t.intersection[c]) / double(uni);
}

}  // namespace

TEST_CASE("scores match a brute-force recount on a hundred random grids") {
  GridGeometry g = test::cube_geom(4);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    auto rng = test::rng_for(seed + 5000);
    const int k = 2 + int(seed % 4);
    const double ignore_frac = (seed % 3 == 0) ? 0.15 : 0.0;
    SemanticOccGrid pred = random_grid(g, k, rng, 0.0);  // preds are never -1
    SemanticOccGrid gt = random_grid(g, k, rng, ignore_frac);

    ConfusionTally tally;
    accumulate(tally, pred, gt);
    ScoreResult m = miou(tally);
    ScoreResult o = iou(tally);
    BruteScores want = brute_force({{pred, gt}});

    INFO("seed ", seed);
    CHECK(m.defined == want.miou_defined);
    CHECK(o.defined == want.iou_defined);
    if (m.defined) CHECK(m.value == want.miou);
    if (o.defined) CHECK(o.value == want.iou);
  }
}

TEST_CASE("half right on the only semantic class scores fifty percent") {
  GridGeometry g;
  g.dims = {1, 1, 2};
  g.x_min = g.y_min = g.z_min = 0;
  g.x_max = g.y_max = g.z_max = 1;
  SemanticOccGrid pred(g, 2), gt(g, 2);
  pred.labels = {1, 0};
  gt.labels = {1, 1};

  ConfusionTally t;
  accumulate(t, pred, gt);
  CHECK(miou(t).value == doctest::Approx(50.0).epsilon(1e-12));
  CHECK(iou(t).value == doctest::Approx(50.0).epsilon(1e-12));

  // A perfect prediction scores 100 on both.
  ConfusionTally perfect;
  accumulate(perfect, gt, gt);
  CHECK(miou(perfect).value == doctest::Approx(100.0).epsilon(1e-12));
  CHECK(iou(perfect).value == doctest::Approx(100.0).epsilon(1e-12));

  // An all-empty prediction against occupied ground truth scores 0 yet is
  // perfectly well defined.
  SemanticOccGrid empty(g, 2);
  ConfusionTally zero;
  accumulate(zero, empty, gt);
  CHECK(miou(zero).defined);
  CHECK(miou(zero).value == 0.0);
  CHECK(iou(zero).defined);
  CHECK(iou(zero).value == 0.0);
}

TEST_CASE("scores are symmetric in prediction and ground truth") {
  auto rng = test::rng_for(200);
  GridGeometry g = test::cube_geom(5);
  for (int trial = 0; trial < 10; ++trial) {
    SemanticOccGrid a = random_grid(g, 4, rng, 0.0);
    SemanticOccGrid b = random_grid(g, 4, rng, 0.0);
    ConfusionTally ab, ba;
    accumulate(ab, a, b);
    accumulate(ba, b, a);
    CHECK(miou(ab).value == doctest::Approx(miou(ba).value).epsilon(1e-12));
    CHECK(iou(ab).value == doctest::Approx(iou(ba).value).epsilon(1e-12));
  }
}

TEST_CASE("correcting one wrong voxel never hurts that class") {
  auto rng = test::rng_for(201);
  GridGeometry g = test::cube_geom(4);
  int flips = 0;
  for (int trial = 0; trial < 20 && flips < 50; ++trial) {
    SemanticOccGrid pred = random_grid(g, 4, rng, 0.0);
    SemanticOccGrid gt = random_grid(g, 4, rng, 0.0);
    for (std::int64_t i = 0; i < g.size() && flips < 50; ++i) {
      if (gt.labels[i] < 0 || pred.labels[i] == gt.labels[i]) continue;
      SemanticOccGrid fixed = pred;
      fixed.labels[i] = gt.labels[i];
      ++flips;

      for (int c = 1; c < 4; ++c) {
        INFO("trial ", trial, " voxel ", i, " class ", c);
        // The corrected class and the vacated class both matter; check all.
        CHECK(class_iou(fixed, gt, c) >= class_iou(pred, gt, c) - 1e-12);
      }
      ConfusionTally before, after;
      accumulate(before, pred, gt);
      accumulate(after, fixed, gt);
      if (iou(before).defined && iou(after).defined)
        CHECK(iou(after).value >= iou(before).value - 1e-12);
    }
  }
  CHECK(flips == 50);
}

TEST_CASE("merged tallies equal one big tally") {
  auto rng = test::rng_for(202);
  GridGeometry g = test::cube_geom(4);
  std::vector<std::pair<SemanticOccGrid, SemanticOccGrid>> pairs;
  for (int i = 0; i < 4; ++i)
    pairs.emplace_back(random_grid(g, 3, rng, 0.0), random_grid(g, 3, rng, 0.1));

  ConfusionTally whole;
  for (const auto& [p, t] : pairs) accumulate(whole, p, t);

  ConfusionTally left, right;
  accumulate(left, pairs[0].first, pairs[0].second);
  accumulate(left, pairs[1].first, pairs[1].second);
  accumulate(right, pairs[2].first, pairs[2].second);
  accumulate(right, pairs[3].first, pairs[3].second);
  left.merge(right);

  CHECK(left.intersection == whole.intersection);
  CHECK(left.pred_count == whole.pred_count);
  CHECK(left.gt_count == whole.gt_count);
  CHECK(left.occ_intersection == whole.occ_intersection);
  CHECK(left.occ_pred == whole.occ_pred);
  CHECK(left.occ_gt == whole.occ_gt);
  CHECK(left.ignore_count == whole.ignore_count);
  CHECK(miou(left).value == miou(whole).value);

  // Merging into a default-constructed tally adopts the other side.
  ConfusionTally fresh;
  fresh.merge(whole);
  CHECK(fresh.intersection == whole.intersection);
  ConfusionTally other(4);
  CHECK_THROWS_AS(other.merge(whole), ArgumentError);
}

TEST_CASE("masked ground-truth voxels influence nothing") {
  auto rng = test::rng_for(203);
  GridGeometry g = test::cube_geom(4);
  SemanticOccGrid pred = random_grid(g, 3, rng, 0.0);
  SemanticOccGrid gt = random_grid(g, 3, rng, 0.0);
  gt.labels[7] = -1;
  gt.labels[20] = -1;

  ConfusionTally before;
  accumulate(before, pred, gt);
  CHECK(before.ignore_count == 2);

  // Any prediction at a masked voxel gives the same scores.
  SemanticOccGrid pred2 = pred;
  pred2.labels[7] = std::int8_t((pred.labels[7] + 1) % 3);
  pred2.labels[20] = std::int8_t((pred.labels[20] + 2) % 3);
  ConfusionTally after;
  accumulate(after, pred2, gt);
  CHECK(miou(after).value == miou(before).value);
  CHECK(iou(after).value == iou(before).value);

  // A fully masked target defines no score at all.
  SemanticOccGrid all_masked(g, 3);
  for (auto& l : all_masked.labels) l = -1;
  ConfusionTally blank;
  accumulate(blank, pred, all_masked);
  CHECK(blank.ignore_count == g.size());
  CHECK(!miou(blank).defined);
  CHECK(std::isnan(miou(blank).value));
  CHECK(!iou(blank).defined);
  CHECK(std::isnan(iou(blank).value));
}

TEST_CASE("score plumbing rejects malformed inputs") {
  GridGeometry g = test::cube_geom(3);
  auto rng = test::rng_for(204);
  SemanticOccGrid ok = random_grid(g, 3, rng, 0.0);

  SemanticOccGrid masked_pred = ok;
  masked_pred.labels[0] = -1;  // predictions must commit to a class
  ConfusionTally t;
  CHECK_THROWS_AS(accumulate(t, masked_pred, ok), DataError);

  SemanticOccGrid bad_gt = ok;
  bad_gt.labels[0] = -2;
  ConfusionTally t2;
  CHECK_THROWS_AS(accumulate(t2, ok, bad_gt), DataError);

  SemanticOccGrid other(test::cube_geom(4), 3);
  ConfusionTally t3;
  CHECK_THROWS_AS(accumulate(t3, other, ok), ShapeError);

  SemanticOccGrid more_classes(g, 5);
  ConfusionTally t4;
  CHECK_THROWS_AS(accumulate(t4, more_classes, ok), ShapeError);

  ConfusionTally sized(4);
  CHECK_THROWS_AS(accumulate(sized, ok, ok), ShapeError);

  CHECK_THROWS_AS(ConfusionTally(1), ArgumentError);
}

TEST_CASE("planning position error integrates the motions before comparing") {
  // One step, one meter of positional error.
  CHECK(plan_l2({{1, 0, 0}}, {{0, 0, 0}}) == doctest::Approx(1.0).epsilon(1e-12));

  // An early heading error rotates every later increment.
  std::vector<PlanarMotion> pred = {{0, 0, M_PI / 2}, {1, 0, 0}};
  std::vector<PlanarMotion> gt = {{0, 0, 0}, {1, 0, 0}};
  const double want = (0.0 + std::sqrt(2.0)) / 2.0;
  CHECK(plan_l2(pred, gt) == doctest::Approx(want).epsilon(1e-12));
  // Compared step by step the motions differ only in yaw, not position.
  CHECK(plan_l2(pred, gt, true) == doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS_AS(plan_l2({{1, 0, 0}}, {}), ArgumentError);
  CHECK_THROWS_AS(plan_l2({}, {}), ArgumentError);
}

TEST_CASE("planning yaw error wraps the accumulated heading difference") {
  // Cumulative yaws pi and 3*pi both wrap to |pi| against a still target.
  std::vector<PlanarMotion> pred = {{0, 0, M_PI}, {0, 0, 2 * M_PI}};
  std::vector<PlanarMotion> gt = {{0, 0, 0}, {0, 0, 0}};
  CHECK(plan_l1_yaw(pred, gt) == doctest::Approx(M_PI).epsilon(1e-9));

  // Per step, the full turn in step two contributes nothing.
  CHECK(plan_l1_yaw(pred, gt, true) ==
        doctest::Approx(M_PI / 2.0).epsilon(1e-9));

  // Identical trajectories have zero error.
  CHECK(plan_l1_yaw(gt, gt) == 0.0);
  CHECK_THROWS_AS(plan_l1_yaw(pred, {{0, 0, 0}}), ArgumentError);
}

TEST_CASE("horizon averages and bucket boundaries") {
  CHECK(horizon_average({30.0, 20.0, 10.0}) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(std::abs(horizon_average({25.78, 15.14, 10.51}) - 17.14) < 0.01);
  CHECK_THROWS_AS(horizon_average({}), ArgumentError);

  CHECK(horizon_bucket_ends(2.0, {1.0, 2.0, 3.0}, 6) ==
        std::vector<int>{2, 4, 6});
  CHECK(horizon_bucket_ends(2.0, {1.0, 2.0, 3.0}, 4) ==
        std::vector<int>{2, 4, 4});
  CHECK(horizon_bucket_ends(0.4, {1.0}, 5) == std::vector<int>{1});
  CHECK(horizon_bucket_ends(2.0, {100.0}, 7) == std::vector<int>{7});
  CHECK_THROWS_AS(horizon_bucket_ends(2.0, {1.0}, 0), ArgumentError);
  CHECK_THROWS_AS(horizon_bucket_ends(0.0, {1.0}, 5), ArgumentError);
}
