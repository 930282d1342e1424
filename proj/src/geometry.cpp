#include "occstep/geometry.hpp"

#include <cmath>

#include "occstep/common.hpp"

namespace occstep {

double wrap_angle(double psi) {
  if (!std::isfinite(psi)) throw ArgumentError("wrap_angle: non-finite angle");
  double r = std::fmod(psi, 2.0 * M_PI);
  if (r <= -M_PI) r += 2.0 * M_PI;
  if (r > M_PI) r -= 2.0 * M_PI;
  return r;
}

bool is_rigid(const PoseSE3& t, double tol) {
  if (!t.allFinite()) return false;
  if ((t.row(3) - Eigen::RowVector4d(0, 0, 0, 1)).cwiseAbs().maxCoeff() > tol)
    return false;
  const Eigen::Matrix3d r = t.block<3, 3>(0, 0);
  if ((r * r.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() > tol)
    return false;
  return std::abs(r.determinant() - 1.0) <= tol;
}

PoseSE3 se2_to_se3(const PlanarMotion& m) {
  if (!std::isfinite(m.dx) || !std::isfinite(m.dy) || !std::isfinite(m.dpsi))
    throw ArgumentError("se2_to_se3: non-finite planar motion");
  PoseSE3 t = PoseSE3::Identity();
  const double c = std::cos(m.dpsi), s = std::sin(m.dpsi);
  t(0, 0) = c;
  t(0, 1) = -s;
  t(1, 0) = s;
  t(1, 1) = c;
  t(0, 3) = m.dx;
  t(1, 3) = m.dy;
  return t;
}

PlanarMotion planar_from_se3(const PoseSE3& t) {
  PlanarMotion m;
  m.dx = t(0, 3);
  m.dy = t(1, 3);
  m.dpsi = wrap_angle(std::atan2(t(1, 0), t(0, 0)));
  return m;
}

PoseSE3 compose(const PoseSE3& a, const PoseSE3& b) { return a * b; }

PoseSE3 inverse(const PoseSE3& t) {
  const Eigen::Matrix3d rt = t.block<3, 3>(0, 0).transpose();
  PoseSE3 out = PoseSE3::Identity();
  out.block<3, 3>(0, 0) = rt;
  out.block<3, 1>(0, 3) = -rt * t.block<3, 1>(0, 3);
  return out;
}

PoseSE3 reflect_y(const PoseSE3& t) {
  PoseSE3 f = PoseSE3::Identity();
  f(1, 1) = -1.0;
  return f * t * f;
}

std::vector<PoseSE3> relative_from_absolute(const std::vector<PoseSE3>& poses) {
  if (poses.size() < 2)
    throw ArgumentError("relative_from_absolute: need at least 2 poses");
  std::vector<PoseSE3> rel;
  rel.reserve(poses.size() - 1);
  for (std::size_t i = 0; i + 1 < poses.size(); ++i)
    rel.push_back(inverse(poses[i]) * poses[i + 1]);
  return rel;
}

Tensor warp_trilinear(const Tensor& field, const PoseSE3& t,
                      const GridGeometry& g) {
  if (field.shape().size() != 4 || field.shape()[1] != g.d() ||
      field.shape()[2] != g.h() || field.shape()[3] != g.w())
    throw ShapeError("warp_trilinear: field does not match grid geometry");
  const PoseSE3 tinv = inverse(t);
  const std::int64_t n = g.size();
  Eigen::Matrix<double, 3, Eigen::Dynamic> coords(3, n);
  std::int64_t s = 0;
  for (int d = 0; d < g.d(); ++d)
    for (int h = 0; h < g.h(); ++h)
      for (int w = 0; w < g.w(); ++w, ++s) {
        const Eigen::Vector3d p = g.voxel_center(d, h, w);
        const Eigen::Vector3d q =
            tinv.block<3, 3>(0, 0) * p + tinv.block<3, 1>(0, 3);
        coords.col(s) = g.world_to_fractional(q);
      }
  Tensor flat = trilinear_sample(field, coords, {g.d(), g.h(), g.w()});
  return reshape(flat, field.shape());
}

}  // namespace occstep
