#pragma once

#include <vector>

#include <Eigen/Dense>

#include "occstep/grid.hpp"
#include "occstep/tensor.hpp"

namespace occstep {

// Homogeneous 4x4 rigid transform. Bottom row (0,0,0,1), rotation block
// orthonormal with det +1 within 1e-6 (compose does not re-orthonormalize;
// drift stays inside that tolerance for the sequence lengths in scope).
using PoseSE3 = Eigen::Matrix4d;

// Planar rigid motion [d_x, d_y, d_psi]; d_psi wrapped to (-pi, pi].
struct PlanarMotion {
  double dx = 0.0;
  double dy = 0.0;
  double dpsi = 0.0;
};

// Maps psi to the representative in (-pi, pi] congruent mod 2*pi.
double wrap_angle(double psi);

bool is_rigid(const PoseSE3& t, double tol = 1e-6);

// Rotation by d_psi about z plus translation (d_x, d_y, 0).
PoseSE3 se2_to_se3(const PlanarMotion& m);

// Planar projection: translation x/y and yaw from the rotation block.
PlanarMotion planar_from_se3(const PoseSE3& t);

PoseSE3 compose(const PoseSE3& a, const PoseSE3& b);
PoseSE3 inverse(const PoseSE3& t);

// Conjugation by F = diag(1,-1,1,1): the y-mirror image of a motion.
PoseSE3 reflect_y(const PoseSE3& t);

// Element i is inverse(poses[i]) * poses[i+1], mapping frame-(i+1)
// coordinates into frame i.
std::vector<PoseSE3> relative_from_absolute(const std::vector<PoseSE3>& poses);

// Resamples a (C,D,H,W) field: each output voxel center p is read from the
// input at t^-1 * p (trilinear, zeros outside the grid). Differentiable in
// the field; warp(warp(f,T1),T2) == warp(f, compose(T2,T1)) on smooth fields.
Tensor warp_trilinear(const Tensor& field, const PoseSE3& t,
                      const GridGeometry& g);

}  // namespace occstep
