#include "occstep/metrics.hpp"

#include <cmath>
#include <limits>

#include "occstep/common.hpp"

namespace occstep {

ConfusionTally::ConfusionTally(int k)
    : num_classes(k), intersection(k, 0), pred_count(k, 0), gt_count(k, 0) {
  if (k < 2) throw ArgumentError("tally needs at least 2 classes");
}

void ConfusionTally::merge(const ConfusionTally& other) {
  if (other.num_classes == 0) return;
  if (num_classes == 0) {
    *this = other;
    return;
  }
  if (num_classes != other.num_classes)
    throw ArgumentError("cannot merge tallies with different class counts");
  for (int c = 0; c < num_classes; ++c) {
    intersection[c] += other.intersection[c];
    pred_count[c] += other.pred_count[c];
    gt_count[c] += other.gt_count[c];
  }
  occ_intersection += other.occ_intersection;
  occ_pred += other.occ_pred;
  occ_gt += other.occ_gt;
  ignore_count += other.ignore_count;
}

void accumulate(ConfusionTally& tally, const SemanticOccGrid& pred,
                const SemanticOccGrid& gt) {
  if (!(pred.geom == gt.geom))
    throw ShapeError("accumulate: prediction and ground truth shapes differ");
  if (pred.num_classes != gt.num_classes)
    throw ShapeError("accumulate: class counts differ");
  if (tally.num_classes == 0) tally = ConfusionTally(gt.num_classes);
  if (tally.num_classes != gt.num_classes)
    throw ShapeError("accumulate: tally class count differs");

  const std::int64_t n = gt.geom.size();
  for (std::int64_t i = 0; i < n; ++i) {
    const int t = gt.labels[i];
    const int p = pred.labels[i];
    if (p < 0 || p >= tally.num_classes)
      throw DataError("accumulate: prediction label out of range");
    if (t == -1) {
      ++tally.ignore_count;
      continue;
    }
    if (t < 0 || t >= tally.num_classes)
      throw DataError("accumulate: ground-truth label out of range");
    ++tally.pred_count[p];
    ++tally.gt_count[t];
    if (p == t) ++tally.intersection[p];
    if (p != 0) ++tally.occ_pred;
    if (t != 0) ++tally.occ_gt;
    if (p != 0 && t != 0) ++tally.occ_intersection;
  }
}

ScoreResult miou(const ConfusionTally& tally) {
  double sum = 0;
  int present = 0;
  for (int c = 1; c < tally.num_classes; ++c) {
    const std::int64_t uni =
        tally.pred_count[c] + tally.gt_count[c] - tally.intersection[c];
    if (uni == 0) continue;  // class absent from both sides: 0/0, skipped
    sum += double(tally.intersection[c]) / double(uni);
    ++present;
  }
  if (present == 0)
    return {std::numeric_limits<double>::quiet_NaN(), false};
  return {100.0 * sum / present, true};
}

ScoreResult iou(const ConfusionTally& tally) {
  if (tally.occ_gt == 0)
    return {std::numeric_limits<double>::quiet_NaN(), false};
  const std::int64_t uni =
      tally.occ_pred + tally.occ_gt - tally.occ_intersection;
  return {100.0 * double(tally.occ_intersection) / double(uni), true};
}

namespace {

// Cumulative planar trajectory: fold-compose the per-step motions for the
// position, sum the yaw increments (wrapped only at comparison time).
struct CumulativePose {
  double x = 0, y = 0, yaw = 0;
  void advance(const PlanarMotion& m) {
    x += m.dx * std::cos(yaw) - m.dy * std::sin(yaw);
    y += m.dx * std::sin(yaw) + m.dy * std::cos(yaw);
    yaw += m.dpsi;
  }
};

void check_lengths(const std::vector<PlanarMotion>& pred,
                   const std::vector<PlanarMotion>& gt) {
  if (pred.size() != gt.size())
    throw ArgumentError("planning metric: prediction/target length mismatch");
  if (pred.empty())
    throw ArgumentError("planning metric: empty trajectories");
}

}  // namespace

double plan_l2(const std::vector<PlanarMotion>& pred,
               const std::vector<PlanarMotion>& gt, bool per_step) {
  check_lengths(pred, gt);
  double sum = 0;
  CumulativePose cp, cg;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (per_step) {
      sum += std::hypot(pred[i].dx - gt[i].dx, pred[i].dy - gt[i].dy);
    } else {
      cp.advance(pred[i]);
      cg.advance(gt[i]);
      sum += std::hypot(cp.x - cg.x, cp.y - cg.y);
    }
  }
  return sum / double(pred.size());
}

double plan_l1_yaw(const std::vector<PlanarMotion>& pred,
                   const std::vector<PlanarMotion>& gt, bool per_step) {
  check_lengths(pred, gt);
  double sum = 0, yp = 0, yg = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (per_step) {
      sum += std::abs(wrap_angle(pred[i].dpsi - gt[i].dpsi));
    } else {
      yp += pred[i].dpsi;
      yg += gt[i].dpsi;
      sum += std::abs(wrap_angle(yp - yg));
    }
  }
  return sum / double(pred.size());
}

double horizon_average(const std::vector<double>& per_horizon) {
  if (per_horizon.empty())
    throw ArgumentError("horizon average needs at least one bucket");
  double sum = 0;
  for (double v : per_horizon) sum += v;
  return sum / double(per_horizon.size());
}

std::vector<int> horizon_bucket_ends(double fps,
                                     const std::vector<double>& seconds,
                                     int horizon) {
  if (horizon < 1) throw ArgumentError("horizon must be at least 1");
  if (fps <= 0) throw ArgumentError("fps must be positive");
  std::vector<int> ends;
  for (double s : seconds) {
    int e = int(std::llround(fps * s));
    e = std::max(1, std::min(e, horizon));
    ends.push_back(e);
  }
  return ends;
}

}  // namespace occstep
